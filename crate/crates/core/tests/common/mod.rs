#![allow(dead_code)]

use codetr::composite::CompositeSpec;

/// Composite evaluator written straight from the formulas, loop by loop,
/// without sharing code with the library.
pub fn brute_composite(spec: &CompositeSpec, r: &[f64]) -> f64 {
    match *spec {
        CompositeSpec::Sum => {
            let mut s = 0.0;
            for &x in r {
                s += x;
            }
            s
        }
        CompositeSpec::SumSquare => {
            let mut s = 0.0;
            for &x in r {
                s += x.abs() * x;
            }
            s
        }
        CompositeSpec::SquareSum => {
            let mut s = 0.0;
            for &x in r {
                s += x;
            }
            s.abs() * s
        }
        CompositeSpec::Max { beta } => {
            // Unshifted softmax; inputs are kept small enough not to overflow.
            let mut z = 0.0;
            for &x in r {
                z += (beta * x).exp();
            }
            let mut s = 0.0;
            for &x in r {
                s += (beta * x).exp() / z * x;
            }
            r.len() as f64 * s
        }
    }
}
