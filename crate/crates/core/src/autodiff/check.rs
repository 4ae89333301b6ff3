//! Finite-difference gradient checking.

use rand::Rng;

use super::{forward_backward, Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A scalar-valued function that can be recorded on a tape of any precision.
///
/// Implemented by closures-in-structs in tests and by the model losses, so the
/// same graph can be differentiated in `T` and finite-differenced in `f64`.
pub trait DiffFn {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Var;
}

fn eval_f64<F: DiffFn>(f: &F, points: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone(), false)).collect();
    let out = f.eval(&mut tape, &vars);
    tape.value(out).item()
}

/// Compares reverse-mode gradients computed in precision `T` against central
/// differences computed in `f64`, over every coordinate of every input.
///
/// Returns `max |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)`.
pub fn grad_check<T: Scalar, F: DiffFn>(f: &F, points: &[Tensor<f64>], eps: f64) -> f64 {
    let mut tape = Tape::<T>::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.cast::<T>(), true)).collect();
    let out = f.eval(&mut tape, &vars);
    let analytic = forward_backward(&tape, out, &vars).expect("scalar output");

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = points.to_vec();
    for (pi, point) in points.iter().enumerate() {
        for i in 0..point.numel() {
            let x0 = point.data()[i];
            probe[pi].data_mut()[i] = x0 + eps;
            let up = eval_f64(f, &probe);
            probe[pi].data_mut()[i] = x0 - eps;
            let down = eval_f64(f, &probe);
            probe[pi].data_mut()[i] = x0;
            let fd = (up - down) / (2.0 * eps);
            let ad = analytic[pi].data()[i].to_f64c();
            let denom = ad.abs().max(fd.abs()).max(1e-8);
            worst = worst.max((ad - fd).abs() / denom);
        }
    }
    worst
}

/// Gaussian test point; when `min_abs` is set, coordinates closer than that to
/// zero are resampled so piecewise-linear ops are not probed at their kink.
pub fn sample_point<R: Rng + ?Sized>(shape: &[usize], rng: &mut R, min_abs: Option<f64>) -> Tensor<f64> {
    let mut t = Tensor::<f64>::randn(shape, 1.0, rng);
    if let Some(m) = min_abs {
        for v in t.data_mut() {
            while v.abs() < m {
                *v = Tensor::<f64>::randn(&[1], 1.0, rng).item();
            }
        }
    }
    t
}

/// Declares a unit struct implementing [`DiffFn`] from a body that builds the
/// graph on `tape` from the input handles `x`.
///
/// ```
/// use egospk::{diff_fn, grad_check, Tensor};
///
/// diff_fn!(Bilinear, |tape, x| tape.mul(x[0], x[1]));
/// let pts = [Tensor::scalar(2.0), Tensor::scalar(5.0)];
/// assert!(grad_check::<f64, _>(&Bilinear, &pts, 1e-5) < 1e-6);
/// ```
#[macro_export]
macro_rules! diff_fn {
    ($name:ident, |$tape:ident, $x:ident| $body:expr) => {
        struct $name;
        impl $crate::autodiff::DiffFn for $name {
            fn eval<T: $crate::Scalar>(
                &self,
                $tape: &mut $crate::Tape<T>,
                $x: &[$crate::Var],
            ) -> $crate::Var {
                $body
            }
        }
    };
}

/// Reduces `y` to a scalar as `Σ y ⊙ R` with a fixed pseudo-random `R`, so every
/// output coordinate contributes a distinct weight to the checked gradient.
pub fn probe_sum<T: Scalar>(tape: &mut Tape<T>, y: Var) -> Var {
    let mut r = crate::rng::rng(0x5eed);
    let weights = Tensor::<f64>::randn(tape.shape(y), 1.0, &mut r).cast::<T>();
    let w = tape.constant(weights);
    let p = tape.mul(y, w);
    tape.sum(p)
}
