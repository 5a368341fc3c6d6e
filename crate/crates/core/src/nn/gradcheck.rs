//! Central finite-difference verification of analytic gradients.
//!
//! Intended for 64-bit builds on tiny shapes, with dropout disabled and
//! batch normalization in eval mode so the loss is a deterministic function
//! of the parameters.

use super::graph::{Graph, NodeId};
use super::{NnError, Scalar};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (parameter index, element index) of the worst coordinate.
    pub worst: (usize, usize),
    pub coordinates_checked: usize,
}

/// Compare analytic gradients against central finite differences.
///
/// `build` wires a scalar loss from the supplied parameter leaves; it runs
/// once per perturbed coordinate, so keep shapes tiny. Relative error uses
/// `|a - n| / max(|a|, |n|)` with coordinates where both sides are below
/// 1e-6 treated as exact.
pub fn grad_check<S: Scalar>(
    shapes: &[Vec<usize>],
    values: &[Vec<S>],
    build: impl Fn(&mut Graph<S>, &[NodeId]) -> Result<NodeId, NnError>,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport, NnError> {
    assert_eq!(shapes.len(), values.len());
    let eval = |params: &[Vec<S>]| -> Result<(f64, Vec<Vec<S>>), NnError> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = shapes
            .iter()
            .zip(params)
            .map(|(shape, vals)| g.leaf(shape.clone(), vals.clone(), true))
            .collect();
        let loss = build(&mut g, &ids)?;
        let value = g.scalar_value(loss).into_f64();
        let mut grads = g.backward(loss);
        let analytic = ids
            .iter()
            .map(|&id| grads.take(id).unwrap_or_else(|| vec![S::zero(); g.values(id).len()]))
            .collect();
        Ok((value, analytic))
    };

    let (_, analytic) = eval(values)?;

    let mut max_rel_err = 0.0f64;
    let mut worst = (0, 0);
    let mut checked = 0usize;
    let mut work: Vec<Vec<S>> = values.to_vec();
    for p in 0..values.len() {
        for i in 0..values[p].len() {
            let original = work[p][i];
            work[p][i] = original + S::from_f64(h);
            let (plus, _) = eval(&work)?;
            work[p][i] = original - S::from_f64(h);
            let (minus, _) = eval(&work)?;
            work[p][i] = original;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[p][i].into_f64();
            let rel = relative_error(a, numeric);
            checked += 1;
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = (p, i);
            }
        }
    }

    let report = GradCheckReport {
        max_rel_err,
        worst,
        coordinates_checked: checked,
    };
    if max_rel_err > tolerance {
        return Err(NnError::ToleranceExceeded(format!(
            "parameter {} element {}: relative error {:.3e} exceeds {:.3e}",
            worst.0, worst.1, max_rel_err, tolerance
        )));
    }
    Ok(report)
}

fn relative_error(a: f64, n: f64) -> f64 {
    if a.abs() < 1e-6 && n.abs() < 1e-6 {
        0.0
    } else {
        (a - n).abs() / a.abs().max(n.abs())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_layer_gradients_are_tight() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let (n, din, dout) = (3, 4, 2);
        let x: Vec<f64> = (0..n * din).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..dout * din).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..dout).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let target: Vec<f64> = (0..n * dout).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let report = grad_check(
            &[vec![dout, din], vec![dout]],
            &[w, b],
            |g, params| {
                let xid = g.constant(vec![n, din], x.clone());
                let y = g.dense(xid, params[0], params[1])?;
                let d = g.sub_const(y, &target)?;
                let a = g.abs(d);
                Ok(g.mean(a))
            },
            1e-5,
            1e-7,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-7, "{report:?}");
    }

    #[test]
    fn tolerance_violations_are_reported() {
        // A "loss" whose analytic gradient is deliberately broken by scaling
        // after the mean matmul: use mean(2x) but compare against d/dx mean(x)
        // via a mismatched build: simplest is to check that an overly tight
        // tolerance on a coarse h fails gracefully.
        let err = grad_check(
            &[vec![1]],
            &[vec![1.0f64]],
            |g, params| {
                let sq = g.scale(params[0], 3.0);
                let prod = g.add(sq, params[0])?;
                let a = g.abs(prod);
                Ok(g.mean(a))
            },
            1e-1, // huge step: finite difference of |4x| near 1 is still exact,
            // so force failure with an absurd tolerance instead
            -1.0,
        );
        assert!(matches!(err, Err(NnError::ToleranceExceeded(_))));
    }
}
