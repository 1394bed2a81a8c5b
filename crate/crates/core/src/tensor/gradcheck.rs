use super::{Gradients, ParameterSet};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Compares analytic gradients with finite differences over every scalar
/// of every parameter.
///
/// The numeric derivative uses the five-point stencil with step `eps`,
/// whose error is fourth order in `eps`; a step around `1e-3` keeps both
/// truncation and roundoff near `1e-12` for smooth losses.
///
/// `f(params, grads)` must return the loss and, when `grads` is `Some`,
/// accumulate the analytic gradient into it. The relative error per
/// coordinate is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn finite_diff_check<F>(params: &mut ParameterSet<f64>, eps: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParameterSet<f64>, Option<&mut Gradients<f64>>) -> Result<f64>,
{
    let mut analytic = Gradients::zeros_for(params);
    f(params, Some(&mut analytic))?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let ids: Vec<_> = (0..params.len()).map(super::ParamId).collect();
    for id in ids {
        for k in 0..params.get(id).value.len() {
            let orig = params.get(id).value.data()[k];
            let mut at = |offset: f64, params: &mut ParameterSet<f64>| {
                params.get_mut(id).value.data_mut()[k] = orig + offset;
                f(params, None)
            };
            let p1 = at(eps, params)?;
            let m1 = at(-eps, params)?;
            let p2 = at(2.0 * eps, params)?;
            let m2 = at(-2.0 * eps, params)?;
            params.get_mut(id).value.data_mut()[k] = orig;

            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
            let a = analytic.get(id).data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.coordinates += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((params.get(id).name.clone(), k));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Tensor};

    #[test]
    fn square_function() {
        let mut ps = ParameterSet::new();
        let id = ps.add("theta", Tensor::scalar(3.0)).unwrap();
        let report = finite_diff_check(&mut ps, 1e-3, |p, grads| {
            let mut g = Graph::new(p);
            let t = g.param(id);
            let sq = g.mul(t, t)?;
            if let Some(grads) = grads {
                g.backward(sq, grads)?;
            }
            Ok(g.value(sq).item())
        })
        .unwrap();
        assert_eq!(report.analytic, 6.0);
        assert!((report.numeric - 6.0).abs() < 1e-8);
        assert!(report.max_rel_error < 1e-8);
    }

    #[test]
    fn every_op_matches_finite_differences() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut ps = ParameterSet::new();
        let w = ps
            .add("w", crate::tensor::uniform_init(&[6, 3], -1.0, 1.0, &mut rng).unwrap())
            .unwrap();
        let x = ps
            .add("x", crate::tensor::uniform_init(&[3], -1.0, 1.0, &mut rng).unwrap())
            .unwrap();
        let e = ps
            .add("e", crate::tensor::uniform_init(&[4, 3], -1.0, 1.0, &mut rng).unwrap())
            .unwrap();
        let report = finite_diff_check(&mut ps, 1e-3, |p, grads| {
            let mut g = Graph::new(p);
            let (wn, xn) = (g.param(w), g.param(x));
            let h = g.matvec(wn, xn)?;
            let a = g.slice(h, 0, 3)?;
            let b = g.slice(h, 3, 3)?;
            let sa = g.sigmoid(a);
            let tb = g.tanh(b);
            let m = g.mul(sa, tb)?;
            let r0 = g.row(e, 0)?;
            let r2 = g.row(e, 2)?;
            let s0 = g.dot(m, r0)?;
            let s1 = g.dot(m, r2)?;
            let scores = g.stack(&[s0, s1])?;
            let wts = g.softmax(scores, None)?;
            let ctx = g.weighted_sum(wts, &[r0, r2])?;
            let cat = g.concat(&[ctx, m])?;
            let drop = g.mul_const(cat, vec![2.0, 0.0, 2.0, 2.0, 0.0, 2.0])?;
            let back = g.slice(drop, 1, 3)?;
            let en = g.param(e);
            let logits = g.matvec(en, back)?;
            let l1 = g.nll(logits, 2)?;
            let l2 = g.nll(logits, 0)?;
            let loss = g.sum(&[l1, l2])?;
            if let Some(grads) = grads {
                g.backward(loss, grads)?;
            }
            Ok(g.value(loss).item())
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
