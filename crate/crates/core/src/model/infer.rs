//! Graph-free eval forward pass. Performs the same floating-point operations
//! in the same order as the graph path, so outputs agree bit for bit.

use crate::autodiff::graph::{matmul_raw, transpose_raw, GELU_A, GELU_C, LAYER_NORM_EPS};
use crate::autodiff::Tensor;

use super::{RewardModelConfig, SequenceOutput, Window, BLOCK_PARAMS, EMBED_PARAMS};

fn linear(x: &[f64], rows: usize, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let mut out = matmul_raw(x, w.data(), rows, k, n);
    for row in out.chunks_mut(n) {
        for (v, bb) in row.iter_mut().zip(b.data()) {
            *v += bb;
        }
    }
    out
}

fn layer_norm(x: &[f64], d: usize, g: &Tensor, b: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, dst) in x.chunks(d).zip(out.chunks_mut(d)) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for j in 0..d {
            let h = (row[j] - mean) * is;
            dst[j] = g.data()[j] * h + b.data()[j];
        }
    }
    out
}

fn add_in_place(h: &mut [f64], o: &[f64]) {
    for (x, y) in h.iter_mut().zip(o) {
        *x += y;
    }
}

fn cols(x: &[f64], width: usize, lo: usize, hi: usize) -> Vec<f64> {
    x.chunks(width).flat_map(|r| r[lo..hi].iter().copied()).collect()
}

pub(super) fn encode(cfg: &RewardModelConfig, p: &[Tensor], window: &Window) -> SequenceOutput {
    let (len, d, heads) = (window.len(), cfg.embed_dim, cfg.num_heads);
    let head_dim = d / heads;
    let pos = &p[4].data()[..len * d];
    let mut es = linear(window.states.data(), len, &p[0], &p[1]);
    add_in_place(&mut es, pos);
    let mut ea = linear(window.actions.data(), len, &p[2], &p[3]);
    add_in_place(&mut ea, pos);
    let tokens = 2 * len;
    let mut h = Vec::with_capacity(tokens * d);
    for t in 0..len {
        h.extend_from_slice(&es[t * d..(t + 1) * d]);
        h.extend_from_slice(&ea[t * d..(t + 1) * d]);
    }

    let scale = 1.0 / (head_dim as f64).sqrt();
    for l in 0..cfg.num_causal_layers {
        let b = &p[EMBED_PARAMS + l * BLOCK_PARAMS..EMBED_PARAMS + (l + 1) * BLOCK_PARAMS];
        let x = layer_norm(&h, d, &b[0], &b[1]);
        let qkv = linear(&x, tokens, &b[2], &b[3]);
        let mut cat = vec![0.0; tokens * d];
        for hd in 0..heads {
            let lo = hd * head_dim;
            let q = cols(&qkv, 3 * d, lo, lo + head_dim);
            let k = cols(&qkv, 3 * d, d + lo, d + lo + head_dim);
            let v = cols(&qkv, 3 * d, 2 * d + lo, 2 * d + lo + head_dim);
            let kt = transpose_raw(&k, tokens, head_dim);
            let mut att = matmul_raw(&q, &kt, tokens, head_dim, tokens);
            att.iter_mut().for_each(|s| *s *= scale);
            for i in 0..tokens {
                let row = &mut att[i * tokens..(i + 1) * tokens];
                let visible = i + 1;
                let max = row[..visible].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for s in row[..visible].iter_mut() {
                    *s = (*s - max).exp();
                    total += *s;
                }
                row[..visible].iter_mut().for_each(|s| *s /= total);
                row[visible..].iter_mut().for_each(|s| *s = 0.0);
            }
            let o = matmul_raw(&att, &v, tokens, tokens, head_dim);
            for (dst, src) in cat.chunks_mut(d).zip(o.chunks(head_dim)) {
                dst[lo..lo + head_dim].copy_from_slice(src);
            }
        }
        let o = linear(&cat, tokens, &b[4], &b[5]);
        add_in_place(&mut h, &o);

        let x = layer_norm(&h, d, &b[6], &b[7]);
        let mut m = linear(&x, tokens, &b[8], &b[9]);
        m.iter_mut().for_each(|x| {
            let u = GELU_C * (*x + GELU_A * *x * *x * *x);
            *x = 0.5 * *x * (1.0 + u.tanh());
        });
        let m = linear(&m, tokens, &b[10], &b[11]);
        add_in_place(&mut h, &m);
    }
    let head = &p[EMBED_PARAMS + cfg.num_causal_layers * BLOCK_PARAMS..];
    let h = layer_norm(&h, d, &head[0], &head[1]);
    let x: Vec<f64> = h.chunks(d).skip(1).step_by(2).flatten().copied().collect();
    let r = linear(&x, len, &head[2], &head[3]);
    let q = linear(&x, len, &head[4], &head[5]);
    let k = linear(&x, len, &head[6], &head[7]);
    let mat = |v: Vec<f64>| Tensor::new(vec![len, d], v).expect("shape");
    SequenceOutput {
        embeddings: mat(x),
        rewards: r,
        queries: mat(q),
        keys: mat(k),
    }
}
