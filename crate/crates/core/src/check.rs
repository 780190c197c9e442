//! Numeric verification helpers.
//!
//! Central finite differences over a forward-only closure; used by the test
//! suites as an oracle independent of the reverse-mode path.

use crate::scalar::Real;

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_grad<F: Real>(mut f: impl FnMut(&[F]) -> F, x: &[F], eps: F) -> Vec<F> {
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let up = f(&probe);
        probe[i] = orig - eps;
        let down = f(&probe);
        probe[i] = orig;
        grad.push((up - down) / (F::of(2.0) * eps));
    }
    grad
}

/// Max relative error between two gradient vectors, with an absolute floor
/// so near-zero entries do not blow up the ratio.
pub fn max_rel_err<F: Real>(a: &[F], b: &[F], floor: F) -> F {
    assert_eq!(a.len(), b.len());
    let mut worst = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        let denom = x.abs().max(y.abs()).max(floor);
        let e = (x - y).abs() / denom;
        if e > worst {
            worst = e;
        }
    }
    worst
}

/// Relative deviation `|a - b| / max(|b|, floor)` for scalars.
pub fn rel_err<F: Real>(a: F, b: F, floor: F) -> F {
    (a - b).abs() / b.abs().max(floor)
}
