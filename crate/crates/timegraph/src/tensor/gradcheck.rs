//! Finite-difference verification of reverse-mode gradients.

use super::{Tape, Tensor};
use crate::error::{Error, Result};

/// Compares the recorded gradient of `f` at `x` against central finite
/// differences, coordinate by coordinate. Returns the maximum relative
/// error `|g_ad - g_fd| / max(1, |g_fd|)` over all coordinates.
///
/// `f` must map a tensor to a scalar tensor and be deterministic; any
/// internal randomness (dropout masks, sampling noise) has to be frozen
/// by the caller, and data-dependent masks must be held fixed so the
/// perturbed evaluations stay on the same branch.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::Contract(format!("eps {eps} outside (0, 1e-3]")));
    }

    let tape = Tape::new();
    let attached = tape.attach(&x.detach());
    let out = f(&attached)?;
    let base = out.item()?;
    if !base.is_finite() {
        return Err(Error::domain("grad_check", format!("f(x) = {base}")));
    }
    let g_ad = tape.backward(&out)?.wrt(&attached)?;

    let eval = |data: Vec<f64>| -> Result<f64> {
        let probe = Tensor::new(x.shape().to_vec(), data)?;
        let v = f(&probe)?.item()?;
        if !v.is_finite() {
            return Err(Error::domain("grad_check", format!("f(x±eps) = {v}")));
        }
        Ok(v)
    };

    let mut max_rel = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        plus[i] += eps;
        let mut minus = x.data().to_vec();
        minus[i] -= eps;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let ad = g_ad.data()[i];
        let rel = (ad - fd).abs() / fd.abs().max(1.0);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SeededRng;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::from_vec(vec![1.0, -2.0, 3.0]);
        let err = grad_check(|x| x.sum(), &x, 1e-5).unwrap();
        assert!(err < 1e-9, "err {err}");
    }

    #[test]
    fn sigmoid_sum_within_tolerance() {
        let mut rng = SeededRng::new(11);
        let x = Tensor::uniform(&[4], -2.0, 2.0, &mut rng);
        let err = grad_check(|x| x.sigmoid()?.sum(), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn fixed_mask_branch_is_consistent() {
        // Mask computed once outside the closure, as a top-k style
        // selection would be.
        let x = Tensor::from_vec(vec![0.9, -0.4, 2.0, 0.1]);
        let mask = vec![1.0, 0.0, 1.0, 0.0];
        let err = grad_check(
            |x| x.apply_mask(&mask)?.mul(x)?.sum(),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn rejects_bad_eps() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|x| x.sum(), &x, 0.0).is_err());
        assert!(grad_check(|x| x.sum(), &x, 0.1).is_err());
    }

    #[test]
    fn rejects_non_finite_objective() {
        let x = Tensor::scalar(800.0);
        // exp(800) overflows to infinity
        let res = grad_check(|x| x.exp()?.sum(), &x, 1e-5);
        assert!(res.is_err());
    }
}
