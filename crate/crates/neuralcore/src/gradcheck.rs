use crate::{Graph, NodeId, ParamSet};

/// Outcome of comparing taped gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / (|numeric| + 1e-8)` over all entries.
    pub max_rel_error: f64,
    /// Parameter name and flat index where the largest error occurred.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares the gradient of `loss_fn` with central finite differences of
/// width `step` for every scalar in `params`.
///
/// Uses the five-point central stencil, whose O(step⁴) truncation error
/// stays well under the tolerance even for entries with small gradients.
///
/// `loss_fn` must be deterministic: it records a fresh forward pass for the
/// given parameters and returns the scalar loss node.
pub fn finite_diff_check<F>(params: &ParamSet<f64>, loss_fn: F, step: f64) -> GradCheckReport
where
    F: Fn(&ParamSet<f64>, &mut Graph<f64>) -> NodeId,
{
    let mut g = Graph::for_params(params);
    let loss = loss_fn(params, &mut g);
    let grads = g.backward(loss).expect("scalar loss");

    let eval = |p: &ParamSet<f64>| {
        let mut g = Graph::for_params(p);
        let l = loss_fn(p, &mut g);
        g.value(l).item()
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0 };
    let mut probe = params.clone();
    for idx in 0..params.len() {
        for i in 0..params.value(idx).len() {
            let orig = params.value(idx).data()[i];
            let mut at = |delta: f64| {
                probe.value_mut(idx).data_mut()[i] = orig + delta;
                eval(&probe)
            };
            let (p1, m1, p2, m2) = (at(step), at(-step), at(2.0 * step), at(-2.0 * step));
            probe.value_mut(idx).data_mut()[i] = orig;

            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step);
            let analytic = grads.get(idx).map_or(0.0, |t| t.data()[i]);
            let rel = (analytic - numeric).abs() / (numeric.abs() + 1e-8);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((params.name(idx).to_string(), i));
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    #[test]
    fn quadratic_loss_is_exact() {
        let mut p = ParamSet::<f64>::new();
        p.insert("w", Tensor::vector(vec![0.3, -1.2, 2.5, 0.8]));
        let report = finite_diff_check(
            &p,
            |p, g| {
                let w = g.param(p, "w").unwrap();
                let sq = g.square(w);
                g.sum(sq)
            },
            1e-3,
        );
        assert!(report.max_rel_error < 1e-6, "{report:?}");
        assert_eq!(report.checked, 4);
    }
}
