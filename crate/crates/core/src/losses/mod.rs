//! The complete training objective: directional InfoNCE, the CLIP loss,
//! the multiple-alignment loss over view grids, the multi-positive fusion
//! loss with self-pair exclusion, and the λ-combined total.
//!
//! Every loss here has an independent brute-force twin in [`oracle`] that
//! shares no code with this module.

pub mod oracle;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Initial value for both learnable temperatures.
pub const TAU_INIT: f64 = 0.07;
/// Clamp range applied to exp(log_tau) after every optimizer step.
pub const TAU_MIN: f64 = 0.005;
pub const TAU_MAX: f64 = 1.0;

/// Batch reduction. `Mean` is the default everywhere so losses are
/// batch-size-comparable; `Sum` restores the literal per-batch sum for
/// oracle cross-checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub align: f64,
    pub fusion: f64,
    pub lambda: f64,
    /// Per view pair (i, j): the two directional components
    /// (L_{I_i->T_j}, L_{T_j->I_i}).
    pub components: BTreeMap<String, (f64, f64)>,
}

fn check_unit_rows(v: &Var, what: &str) -> Result<()> {
    v.with_value(|t| {
        let d = *t.shape().last().ok_or_else(|| {
            Error::Usage(format!("{what}: scalar input where rows expected"))
        })?;
        for (r, row) in t.data().chunks_exact(d).enumerate() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-4 {
                return Err(Error::Config(format!(
                    "{what}: row {r} has norm {norm}, expected unit within 1e-4"
                )));
            }
        }
        Ok(())
    })
}

/// Temperature as a graph value: tau = exp(log_tau). The caller clamps the
/// parameter outside the graph.
fn inv_tau(log_tau: &Var) -> Var {
    log_tau.neg().exp()
}

/// One direction of InfoNCE: anchors against the full candidate batch,
/// positives on the diagonal.
pub fn infonce_directional(
    anchors: &Var,
    candidates: &Var,
    log_tau: &Var,
    reduction: Reduction,
) -> Result<Var> {
    check_unit_rows(anchors, "infonce anchors")?;
    check_unit_rows(candidates, "infonce candidates")?;
    let b = anchors.shape()[0];
    if b == 0 {
        return Err(Error::Usage("infonce on empty batch".into()));
    }
    let sim = anchors
        .matmul(&candidates.transpose_last2())
        .mul(&inv_tau(log_tau));
    let per_sample = sim.logsumexp_last().sub(&sim.diag2d());
    Ok(match reduction {
        Reduction::Mean => per_sample.mean_all(),
        Reduction::Sum => per_sample.sum_all(),
    })
}

/// Symmetric CLIP loss: half the sum of both directions.
pub fn clip_loss(y: &Var, z: &Var, log_tau: &Var, reduction: Reduction) -> Result<Var> {
    let i2t = infonce_directional(y, z, log_tau, reduction)?;
    let t2i = infonce_directional(z, y, log_tau, reduction)?;
    Ok(i2t.add(&t2i).scale(0.5))
}

/// Multiple-alignment loss over a view grid: the average of the symmetric
/// CLIP losses over every (image view, text view) combination. Degenerates
/// to [`clip_loss`] for a 1x1 grid.
///
/// `y_views` and `z_views` hold one unit-norm [B, d] tensor per view.
/// Returns the loss and the per-pair directional components.
pub fn align_loss(
    y_views: &[Var],
    z_views: &[Var],
    log_tau: &Var,
    reduction: Reduction,
) -> Result<(Var, BTreeMap<String, (f64, f64)>)> {
    if y_views.is_empty() || z_views.is_empty() {
        return Err(Error::Usage("align_loss on an empty view grid".into()));
    }
    let mut components = BTreeMap::new();
    let mut pair_losses = Vec::new();
    for (i, y) in y_views.iter().enumerate() {
        for (j, z) in z_views.iter().enumerate() {
            let i2t = infonce_directional(y, z, log_tau, reduction)?;
            let t2i = infonce_directional(z, y, log_tau, reduction)?;
            components.insert(format!("{i},{j}"), (i2t.item(), t2i.item()));
            pair_losses.push(i2t.add(&t2i).scale(0.5));
        }
    }
    let mut total = pair_losses[0].clone();
    for p in &pair_losses[1..] {
        total = total.add(p);
    }
    Ok((total.scale(1.0 / pair_losses.len() as f64), components))
}

/// Additive log-domain masks for the fusion loss over `b` samples with `v`
/// fused views each, anchors indexed `n * v + view`.
///
/// Returns (positive mask, denominator mask): entry 0.0 where the pair
/// participates, -inf where excluded. The positive set of each anchor is
/// every other fused view of the same sample; the denominator excludes only
/// the anchor itself.
pub fn fusion_masks(b: usize, v: usize) -> (Tensor, Tensor) {
    let n = b * v;
    let mut pos = Tensor::full(&[n, n], f64::NEG_INFINITY);
    let mut den = Tensor::full(&[n, n], f64::NEG_INFINITY);
    for a in 0..n {
        for c in 0..n {
            if a == c {
                continue;
            }
            den.data_mut()[a * n + c] = 0.0;
            if a / v == c / v {
                pos.data_mut()[a * n + c] = 0.0;
            }
        }
    }
    (pos, den)
}

/// Per-anchor term counts implied by [`fusion_masks`]: (numerator,
/// denominator). Every anchor has v*b - 1 denominator terms and v - 1
/// positives.
pub fn fusion_term_counts(b: usize, v: usize) -> Vec<(usize, usize)> {
    let (pos, den) = fusion_masks(b, v);
    let n = b * v;
    (0..n)
        .map(|a| {
            let np = pos.data()[a * n..(a + 1) * n]
                .iter()
                .filter(|x| **x == 0.0)
                .count();
            let nd = den.data()[a * n..(a + 1) * n]
                .iter()
                .filter(|x| **x == 0.0)
                .count();
            (np, nd)
        })
        .collect()
}

/// Multi-positive fusion contrastive loss over fused representations.
///
/// `s` is [B*V, d] with row n*V + view, rows unit-norm, V = V_I * V_T.
/// Each anchor's positives are the other V-1 fused views of its sample;
/// the denominator runs over all B*V-1 other rows. Reduction averages over
/// all anchors (the 1/(4B) of the 2x2 grid) or sums when `Sum`.
pub fn fusion_loss(
    s: &Var,
    b: usize,
    v: usize,
    log_tau: &Var,
    reduction: Reduction,
) -> Result<Var> {
    check_unit_rows(s, "fusion_loss")?;
    if s.shape()[0] != b * v {
        return Err(Error::Usage(format!(
            "fusion_loss: got {} rows, expected B*V = {}",
            s.shape()[0],
            b * v
        )));
    }
    if v <= 1 && b <= 1 {
        return Err(Error::Usage(
            "fusion_loss degenerate: single anchor with empty denominator".into(),
        ));
    }
    if v <= 1 {
        return Err(Error::Usage(
            "fusion_loss needs at least two fused views per sample".into(),
        ));
    }
    let tape = s.tape().clone();
    let sim = s.matmul(&s.transpose_last2()).mul(&inv_tau(log_tau));
    let (pos, den) = fusion_masks(b, v);
    let lse_pos = sim.add(&tape.constant(pos)).logsumexp_last();
    let lse_den = sim.add(&tape.constant(den)).logsumexp_last();
    let per_anchor = lse_den.sub(&lse_pos);
    Ok(match reduction {
        Reduction::Mean => per_anchor.mean_all(),
        Reduction::Sum => per_anchor.sum_all(),
    })
}

/// The combined objective: align + lambda * fusion.
///
/// `fused` is `(s, v)` as in [`fusion_loss`]; it may be `None` only when
/// lambda == 0, in which case the fusion term is skipped entirely and
/// `total` equals `align` bitwise.
pub fn total_loss(
    y_views: &[Var],
    z_views: &[Var],
    fused: Option<(&Var, usize)>,
    log_tau_align: &Var,
    log_tau_fusion: &Var,
    lambda: f64,
    reduction: Reduction,
) -> Result<(Var, LossReport)> {
    if lambda < 0.0 {
        return Err(Error::Usage(format!("lambda must be >= 0, got {lambda}")));
    }
    let b = y_views[0].shape()[0];
    let (align, components) = align_loss(y_views, z_views, log_tau_align, reduction)?;
    let (total, fusion_val) = if lambda == 0.0 {
        (align.clone(), 0.0)
    } else {
        let (s, v) = fused.ok_or_else(|| {
            Error::Usage("lambda > 0 requires fused representations".into())
        })?;
        let fusion = fusion_loss(s, b, v, log_tau_fusion, reduction)?;
        (align.add(&fusion.scale(lambda)), fusion.item())
    };
    let report = LossReport {
        total: total.item(),
        align: align.item(),
        fusion: fusion_val,
        lambda,
        components,
    };
    Ok((total, report))
}

/// Convenience wrapper for value-only loss evaluation on plain tensors.
pub fn eval_clip_loss(y: &Tensor, z: &Tensor, tau: f64, reduction: Reduction) -> Result<f64> {
    let tape = Tape::no_grad();
    let yv = tape.leaf(y.clone(), false);
    let zv = tape.leaf(z.clone(), false);
    let lt = tape.leaf(Tensor::scalar(tau.ln()), false);
    Ok(clip_loss(&yv, &zv, &lt, reduction)?.item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, Rng, H_COMPOSITE};

    fn unit_rows(shape: &[usize], rng: &mut Rng) -> Tensor {
        Tensor::randn(shape, 1.0, rng).l2_normalize_last()
    }

    fn graph(t: &Tape, x: Tensor) -> Var {
        t.leaf(x, false)
    }

    fn log_tau(t: &Tape, tau: f64) -> Var {
        t.leaf(Tensor::scalar(tau.ln()), false)
    }

    #[test]
    fn singleton_batch_is_zero() {
        let mut rng = Rng::new(1);
        let tape = Tape::new();
        let y = graph(&tape, unit_rows(&[1, 8], &mut rng));
        let z = graph(&tape, unit_rows(&[1, 8], &mut rng));
        let lt = log_tau(&tape, 0.07);
        let l = infonce_directional(&y, &z, &lt, Reduction::Mean).unwrap();
        assert_eq!(l.item(), 0.0);
    }

    #[test]
    fn identical_rows_give_ln_b() {
        let mut rng = Rng::new(2);
        let tape = Tape::new();
        let row = unit_rows(&[1, 8], &mut rng);
        let all = Tensor::concat(&[&row, &row, &row, &row], 0);
        let y = graph(&tape, all.clone());
        let z = graph(&tape, all);
        let lt = log_tau(&tape, 0.07);
        let l = infonce_directional(&y, &z, &lt, Reduction::Mean).unwrap();
        assert!((l.item() - 4f64.ln()).abs() < 1e-9, "{}", l.item());
    }

    #[test]
    fn orthonormal_b2_closed_form() {
        // tau = 1, anchors = candidates = e1, e2: loss = ln(1 + e^-1)
        let tape = Tape::new();
        let e = Tensor::new(vec![2, 2], vec![1., 0., 0., 1.]);
        let y = graph(&tape, e.clone());
        let z = graph(&tape, e);
        let lt = log_tau(&tape, 1.0);
        let l = infonce_directional(&y, &z, &lt, Reduction::Mean).unwrap();
        let expect = (1.0 + (-1.0f64).exp()).ln();
        assert!((l.item() - expect).abs() < 1e-12);
        // clip loss equals either direction by symmetry
        let tape = Tape::new();
        let e = Tensor::new(vec![2, 2], vec![1., 0., 0., 1.]);
        let y = graph(&tape, e.clone());
        let z = graph(&tape, e);
        let lt = log_tau(&tape, 1.0);
        let c = clip_loss(&y, &z, &lt, Reduction::Mean).unwrap();
        assert!((c.item() - expect).abs() < 1e-12);
        assert!((expect - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn non_unit_rows_rejected() {
        let tape = Tape::new();
        let y = graph(&tape, Tensor::new(vec![2, 2], vec![3., 4., 1., 0.]));
        let z = graph(&tape, Tensor::new(vec![2, 2], vec![1., 0., 0., 1.]));
        let lt = log_tau(&tape, 0.07);
        match infonce_directional(&y, &z, &lt, Reduction::Mean) {
            Err(Error::Config(msg)) => assert!(msg.contains("row 0"), "{msg}"),
            other => panic!("expected config error, got {:?}", other.map(|v| v.item())),
        }
    }

    #[test]
    fn align_degenerate_grid_equals_clip_bitwise() {
        let mut rng = Rng::new(3);
        let tape = Tape::new();
        let y = graph(&tape, unit_rows(&[4, 8], &mut rng));
        let z = graph(&tape, unit_rows(&[4, 8], &mut rng));
        let lt = log_tau(&tape, 0.07);
        let c = clip_loss(&y, &z, &lt, Reduction::Mean).unwrap();
        let (a, comps) = align_loss(
            &[y.clone()],
            &[z.clone()],
            &lt,
            Reduction::Mean,
        )
        .unwrap();
        assert_eq!(a.item().to_bits(), c.item().to_bits());
        assert_eq!(comps.len(), 1);
    }

    #[test]
    fn align_collapses_with_duplicated_views() {
        let mut rng = Rng::new(4);
        let tape = Tape::new();
        let y = graph(&tape, unit_rows(&[4, 8], &mut rng));
        let z = graph(&tape, unit_rows(&[4, 8], &mut rng));
        let lt = log_tau(&tape, 0.07);
        let c = clip_loss(&y, &z, &lt, Reduction::Mean).unwrap();
        let (a, _) = align_loss(
            &[y.clone(), y.clone()],
            &[z.clone()],
            &lt,
            Reduction::Mean,
        )
        .unwrap();
        assert_eq!(a.item().to_bits(), c.item().to_bits());
    }

    #[test]
    fn align_2x2_equals_mean_of_pair_losses() {
        let mut rng = Rng::new(5);
        let tape = Tape::new();
        let views: Vec<Var> = (0..4).map(|_| graph(&tape, unit_rows(&[4, 8], &mut rng))).collect();
        let lt = log_tau(&tape, 0.07);
        let (a, _) = align_loss(&views[..2], &views[2..], &lt, Reduction::Mean).unwrap();
        let mut acc = 0.0;
        for y in &views[..2] {
            for z in &views[2..] {
                acc += clip_loss(y, z, &lt, Reduction::Mean).unwrap().item();
            }
        }
        assert!((a.item() - acc / 4.0).abs() < 1e-12);
    }

    #[test]
    fn fusion_b1_is_exactly_zero() {
        let mut rng = Rng::new(6);
        for _ in 0..5 {
            let tape = Tape::new();
            let s = graph(&tape, unit_rows(&[4, 8], &mut rng));
            let lt = log_tau(&tape, 0.07);
            let l = fusion_loss(&s, 1, 4, &lt, Reduction::Mean).unwrap();
            assert_eq!(l.item(), 0.0);
        }
    }

    #[test]
    fn fusion_identical_rows_ln_7_3() {
        let mut rng = Rng::new(7);
        let tape = Tape::new();
        let row = unit_rows(&[1, 8], &mut rng);
        let refs: Vec<&Tensor> = std::iter::repeat_n(&row, 8).collect();
        let s = graph(&tape, Tensor::concat(&refs, 0));
        let lt = log_tau(&tape, 0.07);
        let l = fusion_loss(&s, 2, 4, &lt, Reduction::Mean).unwrap();
        assert!((l.item() - (7.0f64 / 3.0).ln()).abs() < 1e-9, "{}", l.item());
    }

    #[test]
    fn fusion_term_counts_match_self_pair_exclusion() {
        for (b, vi, vt) in [(5usize, 2usize, 2usize), (3, 2, 1), (2, 2, 2)] {
            let v = vi * vt;
            for (np, nd) in fusion_term_counts(b, v) {
                assert_eq!(np, v - 1);
                assert_eq!(nd, v * b - 1);
            }
        }
    }

    #[test]
    fn fusion_degenerate_rejected() {
        let tape = Tape::new();
        let s = graph(&tape, Tensor::new(vec![1, 2], vec![1., 0.]));
        let lt = log_tau(&tape, 0.07);
        assert!(matches!(
            fusion_loss(&s, 1, 1, &lt, Reduction::Mean),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn total_lambda_zero_is_align_bitwise() {
        let mut rng = Rng::new(8);
        let tape = Tape::new();
        let y = graph(&tape, unit_rows(&[4, 8], &mut rng));
        let z = graph(&tape, unit_rows(&[4, 8], &mut rng));
        let lt = log_tau(&tape, 0.07);
        let ltf = log_tau(&tape, 0.07);
        let (total, report) =
            total_loss(&[y], &[z], None, &lt, &ltf, 0.0, Reduction::Mean).unwrap();
        assert_eq!(total.item().to_bits(), report.align.to_bits());
        assert_eq!(report.fusion, 0.0);
    }

    #[test]
    fn total_lambda_two_composition() {
        let mut rng = Rng::new(9);
        let tape = Tape::new();
        let b = 4;
        let y: Vec<Var> = (0..2).map(|_| graph(&tape, unit_rows(&[b, 8], &mut rng))).collect();
        let z = vec![graph(&tape, unit_rows(&[b, 8], &mut rng))];
        let s = graph(&tape, unit_rows(&[b * 2, 8], &mut rng));
        let lt = log_tau(&tape, 0.07);
        let ltf = log_tau(&tape, 0.07);
        let (total, report) =
            total_loss(&y, &z, Some((&s, 2)), &lt, &ltf, 2.0, Reduction::Mean).unwrap();
        assert!((total.item() - (report.align + 2.0 * report.fusion)).abs() < 1e-12);
        assert!(report.align >= 0.0 && report.fusion >= 0.0);
    }

    #[test]
    fn permutation_invariance() {
        let mut rng = Rng::new(10);
        let b = 6;
        let y = unit_rows(&[b, 8], &mut rng);
        let z = unit_rows(&[b, 8], &mut rng);
        let s = unit_rows(&[b * 2, 8], &mut rng);
        let perm = Rng::new(99).permutation(b);
        let yp = y.index_select0(&perm);
        let zp = z.index_select0(&perm);
        let sperm: Vec<usize> = perm.iter().flat_map(|&n| [2 * n, 2 * n + 1]).collect();
        let sp = s.index_select0(&sperm);

        let run = |y: &Tensor, z: &Tensor, s: &Tensor| {
            let tape = Tape::new();
            let yv = graph(&tape, y.clone());
            let zv = graph(&tape, z.clone());
            let sv = graph(&tape, s.clone());
            let lt = log_tau(&tape, 0.07);
            let ltf = log_tau(&tape, 0.07);
            let (t, _) = total_loss(
                &[yv],
                &[zv],
                Some((&sv, 2)),
                &lt,
                &ltf,
                2.0,
                Reduction::Mean,
            )
            .unwrap();
            t.item()
        };
        let a = run(&y, &z, &s);
        let bb = run(&yp, &zp, &sp);
        assert!((a - bb).abs() < 1e-10, "{a} vs {bb}");
    }

    #[test]
    fn per_anchor_terms_nonnegative() {
        // numerator is a subset of the denominator, so -log(num/den) >= 0
        let mut rng = Rng::new(11);
        for _ in 0..10 {
            let tape = Tape::new();
            let s = graph(&tape, unit_rows(&[8, 4], &mut rng));
            let lt = log_tau(&tape, 0.2);
            let l = fusion_loss(&s, 2, 4, &lt, Reduction::Mean).unwrap();
            assert!(l.item() >= 0.0);
        }
    }

    #[test]
    fn clip_loss_grad_check_wrt_embeddings_and_tau() {
        let mut rng = Rng::new(12);
        let y = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let z = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let lt = Tensor::scalar(TAU_INIT.ln());
        let err = grad_check(
            |_, v| {
                let y = v[0].l2_normalize_last();
                let z = v[1].l2_normalize_last();
                clip_loss(&y, &z, &v[2], Reduction::Mean).unwrap()
            },
            &[y, z, lt],
            H_COMPOSITE,
        )
        .unwrap();
        assert!(err < 1e-5, "err = {err}");
    }

    #[test]
    fn fusion_loss_grad_check() {
        let mut rng = Rng::new(13);
        let s = Tensor::randn(&[8, 8], 1.0, &mut rng);
        let lt = Tensor::scalar(TAU_INIT.ln());
        let err = grad_check(
            |_, v| {
                let s = v[0].l2_normalize_last();
                fusion_loss(&s, 2, 4, &v[1], Reduction::Mean).unwrap()
            },
            &[s, lt],
            H_COMPOSITE,
        )
        .unwrap();
        assert!(err < 1e-5, "err = {err}");
    }

    #[test]
    fn align_loss_grad_check() {
        let mut rng = Rng::new(14);
        let y1 = Tensor::randn(&[3, 6], 1.0, &mut rng);
        let y2 = Tensor::randn(&[3, 6], 1.0, &mut rng);
        let z1 = Tensor::randn(&[3, 6], 1.0, &mut rng);
        let lt = Tensor::scalar(TAU_INIT.ln());
        let err = grad_check(
            |_, v| {
                let y1 = v[0].l2_normalize_last();
                let y2 = v[1].l2_normalize_last();
                let z1 = v[2].l2_normalize_last();
                align_loss(&[y1, y2], &[z1], &v[3], Reduction::Mean)
                    .unwrap()
                    .0
            },
            &[y1, y2, z1, lt],
            H_COMPOSITE,
        )
        .unwrap();
        assert!(err < 1e-5, "err = {err}");
    }
}
