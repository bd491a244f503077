// SPDX-License-Identifier: Apache-2.0

//! Central finite-difference helpers for checking tape gradients.

use crate::tensor::Tensor;

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn fd_grad(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    let mut p = x.clone();
    (0..x.numel())
        .map(|i| {
            let orig = p.data()[i];
            p.data_mut()[i] = orig + h;
            let up = f(&p);
            p.data_mut()[i] = orig - h;
            let down = f(&p);
            p.data_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest `|a − b| / max(|a|, |b|, floor)` over paired entries.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
