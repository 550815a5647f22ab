use super::{MetaError, Result};
use crate::tensor::Real;

/// Number of entries kept at sparsity `s` out of `n`: `⌈(1−s)·n⌉`.
pub(crate) fn kept(n: usize, s: f64) -> usize {
    (((1.0 - s) * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Binary mask keeping the `⌈(1−s)·n⌉` largest-magnitude entries among those
/// where `scope` is true (all entries when `None`). Out-of-scope entries are
/// kept. Ties keep the lower index.
pub fn magnitude_prune<T: Real>(values: &[T], target_sparsity: f64, scope: Option<&[bool]>) -> Result<Vec<T>> {
    if !(0.0..1.0).contains(&target_sparsity) {
        return Err(MetaError::Config(format!("sparsity {target_sparsity} outside [0, 1)")));
    }
    if let Some(s) = scope {
        if s.len() != values.len() {
            return Err(MetaError::Config("scope length differs from values".into()));
        }
    }
    let in_scope = |i: usize| scope.is_none_or(|s| s[i]);
    let mut order: Vec<usize> = (0..values.len()).filter(|&i| in_scope(i)).collect();
    let keep = kept(order.len(), target_sparsity);
    order.sort_by(|&a, &b| {
        values[b]
            .abs()
            .partial_cmp(&values[a].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut mask: Vec<T> = (0..values.len())
        .map(|i| if in_scope(i) { T::zero() } else { T::one() })
        .collect();
    for &i in order.iter().take(keep) {
        mask[i] = T::one();
    }
    Ok(mask)
}

/// Geometric schedule `1 − (1−s)^{r/R}` for rounds `r = 1..=R`.
pub fn imp_schedule(target_sparsity: f64, rounds: usize) -> Vec<f64> {
    (1..=rounds)
        .map(|r| 1.0 - (1.0 - target_sparsity).powf(r as f64 / rounds as f64))
        .collect()
}
