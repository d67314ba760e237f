//! Finite-difference validation of tape gradients.

use super::{DiffGraph, NodeId, NumericsError, Tensor};

/// Central-difference gradient of a scalar function of a parameter list,
/// one perturbation pair per parameter element.
pub fn finite_difference<F>(
    f: &mut F,
    params: &[Tensor],
    eps: f64,
) -> Result<Vec<Tensor>, NumericsError>
where
    F: FnMut(&[Tensor]) -> Result<f64, NumericsError>,
{
    let mut work: Vec<Tensor> = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grad = params[p].zeros_like();
        for j in 0..params[p].data().len() {
            let orig = work[p].data()[j];
            work[p].data_mut()[j] = orig + eps;
            let up = f(&work)?;
            work[p].data_mut()[j] = orig - eps;
            let down = f(&work)?;
            work[p].data_mut()[j] = orig;
            grad.data_mut()[j] = (up - down) / (2.0 * eps);
        }
        grads.push(grad);
    }
    Ok(grads)
}

/// Compares the tape's analytic gradients against central differences.
///
/// `build` must construct the scalar loss from the supplied parameter
/// leaves; it is re-invoked for every perturbed evaluation, so it has to be
/// deterministic (fix any noise outside the closure). Returns the maximum
/// elementwise relative error `|a - n| / max(|a|, |n|, 1e-8)` across all
/// parameters.
///
/// Gradient-reversal markers flip signs on purpose, which a derivative of
/// the forward value can never reproduce — build the loss without markers
/// when checking (their contract is tested separately, bit for bit).
pub fn gradient_check<B>(build: B, params: &[Tensor], eps: f64) -> Result<f64, NumericsError>
where
    B: Fn(&mut DiffGraph, &[NodeId]) -> Result<NodeId, NumericsError>,
{
    // Analytic pass.
    let mut graph = DiffGraph::new();
    let ids: Vec<NodeId> = params
        .iter()
        .map(|p| graph.input(p.clone()))
        .collect::<Result<_, _>>()?;
    let loss = build(&mut graph, &ids)?;
    let analytic = graph.grad(loss, &ids)?;

    // Numeric pass.
    let mut eval = |ps: &[Tensor]| -> Result<f64, NumericsError> {
        let mut g = DiffGraph::new();
        let ids: Vec<NodeId> = ps
            .iter()
            .map(|p| g.input(p.clone()))
            .collect::<Result<_, _>>()?;
        let loss = build(&mut g, &ids)?;
        Ok(g.value(loss).item())
    };
    let numeric = finite_difference(&mut eval, params, eps)?;

    let mut max_err: f64 = 0.0;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            let err = (av - nv).abs() / av.abs().max(nv.abs()).max(1e-8);
            max_err = max_err.max(err);
        }
    }
    if !max_err.is_finite() {
        return Err(NumericsError::NonFinite {
            op: "gradient_check",
        });
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_recovered_to_high_precision() {
        // f(x) = sum(x .* x); gradient 2x, exactly representable, so the
        // check error is dominated by the O(eps^2) truncation term.
        let params = vec![Tensor::from_vec(1, 5, vec![0.3, -1.2, 2.0, 0.05, -0.7]).unwrap()];
        let err = gradient_check(
            |g, ids| {
                let sq = g.mul(ids[0], ids[0])?;
                g.sum_all(sq)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "error {err}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // relu at a kink: finite differences and the subgradient disagree,
        // which the check must surface rather than smooth over.
        let params = vec![Tensor::scalar(0.0)];
        let err = gradient_check(
            |g, ids| {
                let r = g.relu(ids[0])?;
                g.sum_all(r)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err > 0.1, "kink should show a large error, got {err}");
    }
}
