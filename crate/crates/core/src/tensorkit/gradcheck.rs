use super::{GradBundle, MlpParams};
use crate::{Error, Result};

/// Compares a backprop gradient against central finite differences of
/// `loss_fn` over every parameter. Returns the max over parameters of
/// |g_fd - g_bp| / max(1e-8, |g_fd| + |g_bp|).
pub fn finite_diff_check<F>(
    loss_fn: F,
    p: &MlpParams,
    backprop: &GradBundle,
    eps: f64,
) -> Result<f64>
where
    F: Fn(&MlpParams) -> f64,
{
    let flat = p.flatten();
    let g_bp = backprop.flatten();
    if g_bp.len() != flat.len() {
        return Err(Error::Shape("finite_diff_check: gradient shape mismatch".into()));
    }
    let mut work = p.clone();
    let mut max_rel = 0.0f64;
    for i in 0..flat.len() {
        let mut probe = flat.clone();
        probe[i] = flat[i] + eps;
        work.unflatten_into(&probe);
        let lp = loss_fn(&work);
        probe[i] = flat[i] - eps;
        work.unflatten_into(&probe);
        let lm = loss_fn(&work);
        if !lp.is_finite() || !lm.is_finite() {
            return Err(Error::Numeric("finite_diff_check: non-finite loss".into()));
        }
        let g_fd = (lp - lm) / (2.0 * eps);
        let rel = (g_fd - g_bp[i]).abs() / (1e-8f64).max(g_fd.abs() + g_bp[i].abs());
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorkit::{mlp_backward, mlp_forward, Activation, MlpParams, Rng};

    #[test]
    fn quadratic_loss_on_linear_net() {
        // loss = ||Wx - y||^2, analytic gradient 2(Wx - y) x^T.
        let mut rng = Rng::new(11);
        let p = MlpParams::init(&[3, 2], &[Activation::Identity], &mut rng);
        let x = [0.5, -1.0, 2.0];
        let target = [1.0, -0.5];
        let loss = |p: &MlpParams| {
            let (y, _) = mlp_forward(p, &x).unwrap();
            y.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum()
        };
        let (y, cache) = mlp_forward(&p, &x).unwrap();
        let dy: Vec<f64> = y.iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect();
        let (g, _) = mlp_backward(&p, &cache, &dy).unwrap();
        let err = finite_diff_check(loss, &p, &g, 1e-5).unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn constant_loss_zero_everywhere() {
        let mut rng = Rng::new(5);
        let p = MlpParams::init(&[2, 2], &[Activation::Tanh], &mut rng);
        let g = GradBundle::zeros_like(&p);
        let err = finite_diff_check(|_| 7.0, &p, &g, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn two_layer_tanh_net_matches() {
        let mut rng = Rng::new(7);
        let p = MlpParams::init(&[3, 5, 2], &[Activation::Tanh, Activation::Identity], &mut rng);
        let x = [0.3, -0.7, 1.1];
        let loss = |p: &MlpParams| {
            let (y, _) = mlp_forward(p, &x).unwrap();
            y.iter().map(|v| v * v).sum()
        };
        let (y, cache) = mlp_forward(&p, &x).unwrap();
        let dy: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
        let (g, _) = mlp_backward(&p, &cache, &dy).unwrap();
        let err = finite_diff_check(loss, &p, &g, 1e-5).unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn non_finite_loss_is_error() {
        let mut rng = Rng::new(5);
        let p = MlpParams::init(&[2, 2], &[Activation::Tanh], &mut rng);
        let g = GradBundle::zeros_like(&p);
        assert!(finite_diff_check(|_| f64::NAN, &p, &g, 1e-5).is_err());
    }
}
