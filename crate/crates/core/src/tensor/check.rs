use super::{Graph, Real, Result, Tensor, TensorError, Var};

/// Step and stencil for [`finite_difference_check`].
#[derive(Clone, Copy, Debug)]
pub struct FdOptions {
    pub eps: f64,
    /// Use the five-point central stencil (error O(eps⁴)) instead of the
    /// three-point one (error O(eps²)).
    pub five_point: bool,
}

impl FdOptions {
    pub fn central(eps: f64) -> Self {
        FdOptions {
            eps,
            five_point: false,
        }
    }
}

fn eval_at<T: Real, F>(f: &F, x: &Tensor<T>) -> Result<f64>
where
    F: Fn(&Graph<T>, &Var<T>) -> Result<Var<T>>,
{
    let g = Graph::new();
    let v = g.constant(x.clone());
    let out = f(&g, &v)?;
    let shape = out.shape();
    if out.len() != 1 {
        return Err(TensorError::NonScalarOutput(shape));
    }
    Ok(out.item().as_f64())
}

/// Analytic gradient of the scalar function `f` at `x`.
pub fn grad_of<T: Real, F>(f: &F, x: &Tensor<T>) -> Result<Tensor<T>>
where
    F: Fn(&Graph<T>, &Var<T>) -> Result<Var<T>>,
{
    let g = Graph::new();
    let v = g.leaf(x.clone());
    let out = f(&g, &v)?;
    Ok(g.grad_allow_unused(&out, &[&v], false)?[0].to_tensor())
}

/// Compares [`grad_of`] against central differences of `f` and returns the
/// largest elementwise relative error, using `max(|a|, |b|, 1e-8)` as the
/// denominator.
pub fn finite_difference_check<T: Real, F>(f: F, x: &Tensor<T>, opts: FdOptions) -> Result<f64>
where
    F: Fn(&Graph<T>, &Var<T>) -> Result<Var<T>>,
{
    let first = eval_at(&f, x)?;
    let second = eval_at(&f, x)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic(first, second));
    }
    let analytic = grad_of(&f, x)?;
    let eps = opts.eps;
    let shifted = |i: usize, h: f64| -> Result<f64> {
        let mut y = x.clone();
        let v = y.data()[i].as_f64() + h;
        y.data_mut()[i] = T::from_f64_lossy(v);
        eval_at(&f, &y)
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let numeric = if opts.five_point {
            let (p1, m1) = (shifted(i, eps)?, shifted(i, -eps)?);
            let (p2, m2) = (shifted(i, 2.0 * eps)?, shifted(i, -2.0 * eps)?);
            (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps)
        } else {
            (shifted(i, eps)? - shifted(i, -eps)?) / (2.0 * eps)
        };
        let a = analytic.data()[i].as_f64();
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_of_sines_matches_cosine() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x = Tensor::vector(x);
        let f = |_: &Graph<f64>, v: &Var<f64>| v.sin()?.sum();
        let err = finite_difference_check(f, &x, FdOptions::central(1e-5)).unwrap();
        assert!(err <= 1e-6, "{err}");
        // Independent oracle: d/dx Σ sin x = cos x.
        let grad = grad_of(&f, &x).unwrap();
        for (g, v) in grad.data().iter().zip(x.data()) {
            assert!((g - v.cos()).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::vector(vec![1.0, -2.0, 3.0]);
        let f = |g: &Graph<f64>, _: &Var<f64>| Ok(g.scalar(4.0));
        let grad = grad_of(&f, &x).unwrap();
        assert!(grad.data().iter().all(|&v| v == 0.0));
        assert_eq!(finite_difference_check(f, &x, FdOptions::central(1e-5)).unwrap(), 0.0);
    }

    #[test]
    fn nondeterminism_is_reported() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let x = Tensor::vector(vec![1.0]);
        let f = |g: &Graph<f64>, v: &Var<f64>| {
            calls.set(calls.get() + 1.0);
            v.sum()?.add(&g.scalar(calls.get()))
        };
        assert!(matches!(
            finite_difference_check(f, &x, FdOptions::central(1e-5)),
            Err(TensorError::NonDeterministic(..))
        ));
    }
}
