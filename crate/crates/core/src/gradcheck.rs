//! Central finite-difference gradient oracle.
//!
//! The oracle differentiates the forward evaluation numerically and is
//! independent of the reverse-mode engine it is used to verify. It is a
//! library module (not test-only) so the self-verification suites can reach
//! it.

use crate::tensor::Tensor;

/// Central difference gradient of `f` at `x` with step `h` per coordinate.
pub fn finite_diff<F>(f: F, x: &[f32], h: f32) -> Vec<f32>
where
    F: Fn(&[f32]) -> f32,
{
    let mut grad = vec![0.0f32; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Relative error with a floor to keep near-zero gradients comparable.
pub fn rel_err(a: f32, b: f32, floor: f32) -> f32 {
    (a - b).abs() / (a.abs() + b.abs()).max(floor)
}

/// Check the analytic gradient of a scalar-valued tensor program against
/// central finite differences, input by input. `build` must be a pure
/// function of its inputs.
///
/// Returns the worst normwise relative error over inputs:
/// `max_j |a_j - fd_j| / max(max_j |a_j|, max_j |fd_j|)` per input tensor.
/// The gradient is compared as a vector because single f32 forward
/// evaluations cannot resolve coordinates far below the gradient's scale.
pub fn check_gradients<F>(inputs: &[(&[usize], Vec<f32>)], h: f32, build: F) -> f32
where
    F: Fn(&[Tensor]) -> Tensor,
{
    // Analytic gradients via backward.
    let tensors: Vec<Tensor> = inputs
        .iter()
        .map(|(shape, data)| {
            Tensor::from_vec(shape, data.clone())
                .expect("bad shape in check_gradients")
                .requires_grad()
        })
        .collect();
    let loss = build(&tensors);
    assert_eq!(loss.numel(), 1, "check_gradients requires a scalar loss");
    loss.backward().expect("backward failed");
    let analytic: Vec<Vec<f32>> = tensors
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    // Numeric gradients, one input at a time.
    let mut worst = 0.0f32;
    for (i, (_, data)) in inputs.iter().enumerate() {
        let eval = |xi: &[f32]| -> f32 {
            let ts: Vec<Tensor> = inputs
                .iter()
                .enumerate()
                .map(|(j, (sh, d))| {
                    let buf = if j == i { xi.to_vec() } else { d.clone() };
                    Tensor::from_vec(sh, buf).unwrap()
                })
                .collect();
            build(&ts).item()
        };
        let numeric = finite_diff(eval, data, h);
        let mut max_diff = 0.0f32;
        let mut scale = 0.0f32;
        for (a, n) in analytic[i].iter().zip(&numeric) {
            max_diff = max_diff.max((a - n).abs());
            scale = scale.max(a.abs()).max(n.abs());
        }
        worst = worst.max(max_diff / scale.max(1e-4));
    }
    worst
}
