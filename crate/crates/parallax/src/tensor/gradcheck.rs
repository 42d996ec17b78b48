//! Central finite-difference oracle for backward rules.
//!
//! The caller supplies the parameters and a closure that rebuilds the scalar
//! loss on a fresh graph; the oracle perturbs one entry at a time and compares
//! `(f(p+h) - f(p-h)) / 2h` against the analytic gradient. Keep probe points
//! away from max-ties: the subgradient there makes the comparison meaningless.

use super::{Graph, NodeId, Tensor, TensorError};
use std::fmt;

/// Relative error floor; avoids division blowups when both gradients vanish.
const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn worst(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(
                f,
                "{:<24} max-rel-err {:.3e}  {}",
                e.name,
                e.max_rel_err,
                if e.pass { "pass" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Compares analytic gradients of `build`'s scalar output against central
/// finite differences, per parameter entry, with the relative-error
/// convention `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(
    params: &[(&str, Tensor)],
    build: F,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, TensorError>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.param(t.clone())).collect();
        let root = build(&mut g, &ids)?;
        if g.value(root).numel() != 1 {
            return Err(TensorError::NonScalarRoot(g.shape(root).to_vec()));
        }
        let v = g.data(root)[0];
        if !v.is_finite() {
            return Err(TensorError::NonFiniteLoss);
        }
        Ok(v)
    };

    // analytic pass
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|(_, t)| g.param(t.clone())).collect();
    let root = build(&mut g, &ids)?;
    if g.value(root).numel() != 1 {
        return Err(TensorError::NonScalarRoot(g.shape(root).to_vec()));
    }
    if !g.data(root)[0].is_finite() {
        return Err(TensorError::NonFiniteLoss);
    }
    g.backward(root)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| g.grad(id).map(|s| s.to_vec()).unwrap_or_default())
        .collect();

    let mut probe: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut entries = Vec::with_capacity(params.len());
    for (pi, (name, _)) in params.iter().enumerate() {
        let mut max_rel = 0.0f64;
        for j in 0..probe[pi].numel() {
            let orig = probe[pi].data()[j];
            probe[pi].data_mut()[j] = orig + h;
            let plus = eval(&probe)?;
            probe[pi].data_mut()[j] = orig - h;
            let minus = eval(&probe)?;
            probe[pi].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi].get(j).copied().unwrap_or(0.0);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            max_rel = max_rel.max(rel);
        }
        entries.push(GradCheckEntry {
            name: (*name).to_string(),
            max_rel_err: max_rel,
            pass: max_rel < tol,
        });
    }
    Ok(GradCheckReport { entries, tol })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_is_exact_to_roundoff() {
        let w = Tensor::from_vec(&[4], vec![0.5, -1.25, 2.0, 3.5]).unwrap();
        let report = grad_check(
            &[("w", w)],
            |g, ids| {
                let sq = g.mul(ids[0], ids[0])?;
                g.sum_all(sq)
            },
            1e-5,
            1e-9,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn corrupted_backward_rule_is_caught() {
        // Mutation test: the first build (used for the analytic gradient)
        // computes sum(w*w), every later build (used for finite differences)
        // computes 1.5*sum(w*w). The mismatch must be flagged.
        use std::cell::Cell;
        let calls = Cell::new(0usize);
        let w = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let report = grad_check(
            &[("w", w)],
            |g, ids| {
                let call = calls.get();
                calls.set(call + 1);
                let sq = g.mul(ids[0], ids[0])?;
                let s = g.sum_all(sq)?;
                if call == 0 {
                    Ok(s)
                } else {
                    g.scale(s, 1.5)
                }
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(!report.passed(), "{report}");
    }

    #[test]
    fn chained_ops_pass_across_seeds() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::rand_uniform(&[2, 5, 3], -1.0, 1.0, &mut rng).unwrap();
            let w = Tensor::rand_uniform(&[4, 6], -1.0, 1.0, &mut rng).unwrap();
            let b = Tensor::rand_uniform(&[4], -0.5, 0.5, &mut rng).unwrap();
            let report = grad_check(
                &[("x", x), ("w", w), ("b", b)],
                |g, ids| {
                    let mx = g.reduce_max(ids[0])?;
                    let mn = g.reduce_mean(ids[0])?;
                    let cat = g.concat_last(mx, mn)?; // [2,6]
                    let lin = g.linear(cat, ids[1], Some(ids[2]))?; // [2,4]
                    let act = g.gelu(lin)?;
                    let bc = g.broadcast_rows(act, 3)?; // [2,3,4]
                    let sq = g.mul(bc, bc)?;
                    g.sum_all(sq)
                },
                1e-5,
                1e-6,
            )
            .unwrap();
            assert!(report.passed(), "seed {seed}:\n{report}");
        }
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let w = Tensor::from_vec(&[1], vec![1e308]).unwrap();
        let err = grad_check(
            &[("w", w)],
            |g, ids| {
                let doubled = g.add(ids[0], ids[0])?;
                g.sum_all(doubled)
            },
            1e-5,
            1e-6,
        );
        assert!(matches!(
            err,
            Err(TensorError::NonFinite { .. }) | Err(TensorError::NonFiniteLoss)
        ));
    }
}
