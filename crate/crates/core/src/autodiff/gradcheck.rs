//! Central finite differences, used to check analytic gradients.

use super::Matrix;

/// Numerical gradient of `f` at `x` by central differences with step `h`.
pub fn numeric_gradient(mut f: impl FnMut(&Matrix) -> f64, x: &Matrix, h: f64) -> Matrix {
    let mut probe = x.clone();
    let mut out = Matrix::zeros(x.dim());
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[[r, c]];
        probe[[r, c]] = orig + h;
        let up = f(&probe);
        probe[[r, c]] = orig - h;
        let down = f(&probe);
        probe[[r, c]] = orig;
        out[[r, c]] = (up - down) / (2.0 * h);
    }
    out
}

/// `max |a - b| / max(1, max |b|)`: absolute error for small gradients,
/// relative error for large ones.
pub fn relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    let scale = numeric.iter().fold(1.0f64, |m, x| m.max(x.abs()));
    let diff = analytic
        .iter()
        .zip(numeric.iter())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    diff / scale
}
