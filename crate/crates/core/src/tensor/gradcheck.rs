use super::{Graph, Tensor, Var};
use crate::error::{Result, SimtsError};
use crate::scalar::Scalar;

/// Outcome of [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport<T> {
    /// `max |analytic − numeric| / max(1, |analytic|, |numeric|)` over all entries.
    pub max_rel_error: T,
    /// `(input index, flat entry index)` where the maximum occurred.
    pub worst: (usize, usize),
    pub entries_checked: usize,
}

fn evaluate<T, F>(f: &F, inputs: &[Tensor<T>]) -> Result<T>
where
    T: Scalar,
    F: Fn(&Graph<T>, &[Var]) -> Result<Var>,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let out = f(&g, &vars)?;
    if g.value_ref(out).len() != 1 {
        return Err(SimtsError::NonScalarLoss(g.shape(out)));
    }
    Ok(g.item(out))
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `eps`, perturbing every entry of every input.
pub fn grad_check<T, F>(f: F, inputs: &[Tensor<T>], eps: T) -> Result<GradCheckReport<T>>
where
    T: Scalar,
    F: Fn(&Graph<T>, &[Var]) -> Result<Var>,
{
    if !(eps >= T::of(1e-7) && eps <= T::of(1e-3)) {
        return Err(SimtsError::InvalidArgument(format!(
            "grad_check eps must lie in [1e-7, 1e-3], got {eps}"
        )));
    }

    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<T>> = vars.iter().map(|&v| grads.wrt(v)).collect();
    drop(g);

    let two = T::of(2.0);
    let mut report = GradCheckReport {
        max_rel_error: T::zero(),
        worst: (0, 0),
        entries_checked: 0,
    };
    let mut probe: Vec<Tensor<T>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let up = evaluate(&f, &probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let down = evaluate(&f, &probe)?;
            probe[i].data_mut()[j] = orig;

            let numeric = (up - down) / (two * eps);
            let exact = analytic[i].data()[j];
            let denom = T::one().max(exact.abs()).max(numeric.abs());
            let err = (exact - numeric).abs() / denom;
            if !(err <= report.max_rel_error) {
                report.max_rel_error = err;
                report.worst = (i, j);
            }
            report.entries_checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes() {
        let x = Tensor::vector(vec![1.5, -0.5, 2.0]);
        let r = grad_check(|g, v| Ok(g.sum(g.mul(v[0], v[0])?)), &[x], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-8);
        assert_eq!(r.entries_checked, 3);
    }

    #[test]
    fn detached_input_is_caught() {
        // analytic gradient through a detach is zero, numeric is not
        let x = Tensor::vector(vec![1.0, 2.0]);
        let r = grad_check(|g, v| Ok(g.sum(g.mul(g.detach(v[0]), v[0])?)), &[x], 1e-5).unwrap();
        assert!(r.max_rel_error > 0.1);
    }

    #[test]
    fn eps_out_of_range() {
        let x = Tensor::vector(vec![1.0]);
        assert!(grad_check(|g, v| Ok(g.sum(v[0])), &[x], 0.1).is_err());
    }
}
