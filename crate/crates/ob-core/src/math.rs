// Thin libm wrappers so results do not depend on which float impls are linked.
pub(crate) use libm::{cos, exp, expm1, log, log1p, pow, sqrt};
#[allow(unused_imports)]
pub(crate) use libm::{sin, tanh};

pub(crate) fn powi(x: f64, n: i32) -> f64 {
    let mut r = 1.0;
    for _ in 0..n.unsigned_abs() {
        r *= x;
    }
    if n < 0 {
        1.0 / r
    } else {
        r
    }
}
