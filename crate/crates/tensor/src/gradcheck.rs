//! Central finite differences, for checking hand-written backward rules.

use crate::tensor::Tensor;

/// Numerical gradient of `f` at `x` by central differences with step `eps`.
///
/// Accumulates in `f64`; `f` is evaluated `2 * x.len()` times.
pub fn numeric_gradient(x: &Tensor, eps: f32, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = vec![0.0f32; x.len()];
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        out[i] = ((plus - minus) / (2.0 * eps as f64)) as f32;
    }
    Tensor::new(x.shape(), out)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn relative_error(a: &Tensor, b: &Tensor, floor: f32) -> f32 {
    assert_eq!(a.shape(), b.shape());
    let diff: f32 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f32>()
        .sqrt();
    let na = a.data().iter().map(|x| x * x).sum::<f32>().sqrt();
    let nb = b.data().iter().map(|x| x * x).sum::<f32>().sqrt();
    diff / na.max(nb).max(floor)
}
