//! Central finite-difference gradient checking.

use super::Tensor;

/// Compare analytic gradients against central differences.
///
/// `f` maps the inputs to a scalar loss and its analytic gradients (one
/// tensor per input, same shapes). Each coordinate is perturbed by ±h and
/// the relative error `|a - n| / max(1, |a|, |n|)` is folded into the
/// returned maximum.
pub fn grad_check<F>(f: &F, inputs: &[Tensor], h: f64) -> f64
where
    F: Fn(&[Tensor]) -> (f64, Vec<Tensor>),
{
    let (_, analytic) = f(inputs);
    assert_eq!(analytic.len(), inputs.len(), "one gradient per input");
    let mut max_rel = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        assert_eq!(analytic[ti].shape(), input.shape(), "gradient shape");
        for j in 0..input.len() {
            let orig = input.data()[j];
            work[ti].data_mut()[j] = orig + h;
            let (fp, _) = f(&work);
            work[ti].data_mut()[j] = orig - h;
            let (fm, _) = f(&work);
            work[ti].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ti].data()[j];
            let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            max_rel = max_rel.max(rel);
        }
    }
    max_rel
}
