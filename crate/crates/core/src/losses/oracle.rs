//! Brute-force reference computations for every loss in the crate.
//!
//! Everything here is written as explicit nested loops over raw slices with
//! direct `exp`/`ln` calls. It deliberately shares no code with the main
//! loss path (no tensors, no tape, no stable log-sum-exp), so agreement
//! between the two is meaningful.

use super::Reduction;

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// One InfoNCE direction over `anchors[n]` vs all `candidates[m]`,
/// positive at m == n.
pub fn infonce_directional(
    anchors: &[Vec<f64>],
    candidates: &[Vec<f64>],
    tau: f64,
    reduction: Reduction,
) -> f64 {
    let b = anchors.len();
    let mut total = 0.0;
    for n in 0..b {
        let num = (cosine(&anchors[n], &candidates[n]) / tau).exp();
        let mut den = 0.0;
        for m in 0..b {
            den += (cosine(&anchors[n], &candidates[m]) / tau).exp();
        }
        total += -(num / den).ln();
    }
    match reduction {
        Reduction::Mean => total / b as f64,
        Reduction::Sum => total,
    }
}

pub fn clip_loss(y: &[Vec<f64>], z: &[Vec<f64>], tau: f64, reduction: Reduction) -> f64 {
    0.5 * (infonce_directional(y, z, tau, reduction) + infonce_directional(z, y, tau, reduction))
}

/// Multiple-alignment loss: `y_views[i][n]` and `z_views[j][n]` are the
/// per-view embedding lists.
pub fn align_loss(
    y_views: &[Vec<Vec<f64>>],
    z_views: &[Vec<Vec<f64>>],
    tau: f64,
    reduction: Reduction,
) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0.0;
    for y in y_views {
        for z in z_views {
            total += clip_loss(y, z, tau, reduction);
            pairs += 1.0;
        }
    }
    total / pairs
}

/// Multi-positive fusion loss. `s[n][v]` is the fused vector for sample n,
/// fused view v; positives of an anchor are the other views of its sample,
/// the denominator is every vector except the anchor itself.
pub fn fusion_loss(s: &[Vec<Vec<f64>>], tau: f64, reduction: Reduction) -> f64 {
    let b = s.len();
    let v = s[0].len();
    let mut total = 0.0;
    for n in 0..b {
        for i in 0..v {
            let anchor = &s[n][i];
            let mut num = 0.0;
            for k in 0..v {
                if k != i {
                    num += (cosine(anchor, &s[n][k]) / tau).exp();
                }
            }
            let mut den = 0.0;
            for m in 0..b {
                for k in 0..v {
                    if m == n && k == i {
                        continue;
                    }
                    den += (cosine(anchor, &s[m][k]) / tau).exp();
                }
            }
            total += -(num / den).ln();
        }
    }
    match reduction {
        Reduction::Mean => total / (b * v) as f64,
        Reduction::Sum => total,
    }
}

pub fn total_loss(
    y_views: &[Vec<Vec<f64>>],
    z_views: &[Vec<Vec<f64>>],
    s: &[Vec<Vec<f64>>],
    tau_align: f64,
    tau_fusion: f64,
    lambda: f64,
    reduction: Reduction,
) -> f64 {
    let align = align_loss(y_views, z_views, tau_align, reduction);
    if lambda == 0.0 {
        align
    } else {
        align + lambda * fusion_loss(s, tau_fusion, reduction)
    }
}

#[cfg(test)]
mod tests {
    use super::super::{self as losses, Reduction};
    use crate::numerics::{Rng, Tape, Tensor};

    fn unit_rows(b: usize, d: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
        (0..b)
            .map(|_| {
                let row: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                row.iter().map(|v| v / norm).collect()
            })
            .collect()
    }

    fn to_tensor(rows: &[Vec<f64>]) -> Tensor {
        let d = rows[0].len();
        Tensor::new(
            vec![rows.len(), d],
            rows.iter().flatten().copied().collect(),
        )
    }

    #[test]
    fn infonce_matches_main_path_100_instances() {
        let mut rng = Rng::new(20);
        for trial in 0..100 {
            let b = 2 + (trial % 7);
            let d = 4 + (trial % 13);
            let tau = 0.05 + 0.3 * (trial as f64 / 100.0);
            let a = unit_rows(b, d, &mut rng);
            let c = unit_rows(b, d, &mut rng);
            for reduction in [Reduction::Mean, Reduction::Sum] {
                let oracle = super::infonce_directional(&a, &c, tau, reduction);
                let tape = Tape::no_grad();
                let av = tape.leaf(to_tensor(&a), false);
                let cv = tape.leaf(to_tensor(&c), false);
                let lt = tape.leaf(Tensor::scalar(tau.ln()), false);
                let main = losses::infonce_directional(&av, &cv, &lt, reduction)
                    .unwrap()
                    .item();
                assert!((oracle - main).abs() < 1e-10, "trial {trial}: {oracle} vs {main}");
            }
        }
    }

    #[test]
    fn align_matches_main_path() {
        let mut rng = Rng::new(21);
        for trial in 0..50 {
            let b = 2 + (trial % 6);
            let d = 4 + (trial % 12);
            let yv: Vec<Vec<Vec<f64>>> = (0..2).map(|_| unit_rows(b, d, &mut rng)).collect();
            let zv: Vec<Vec<Vec<f64>>> = (0..2).map(|_| unit_rows(b, d, &mut rng)).collect();
            let oracle = super::align_loss(&yv, &zv, 0.07, Reduction::Mean);
            let tape = Tape::no_grad();
            let y: Vec<_> = yv.iter().map(|v| tape.leaf(to_tensor(v), false)).collect();
            let z: Vec<_> = zv.iter().map(|v| tape.leaf(to_tensor(v), false)).collect();
            let lt = tape.leaf(Tensor::scalar(0.07f64.ln()), false);
            let (main, _) = losses::align_loss(&y, &z, &lt, Reduction::Mean).unwrap();
            assert!((oracle - main.item()).abs() < 1e-10, "trial {trial}");
        }
    }

    #[test]
    fn fusion_matches_main_path() {
        let mut rng = Rng::new(22);
        for trial in 0..100 {
            let b = 2 + (trial % 7);
            let d = 4 + (trial % 13);
            let (vi, vt) = if trial % 2 == 0 { (2, 2) } else { (2, 1) };
            let v = vi * vt;
            let s: Vec<Vec<Vec<f64>>> = (0..b).map(|_| unit_rows(v, d, &mut rng)).collect();
            let oracle = super::fusion_loss(&s, 0.07, Reduction::Mean);
            let tape = Tape::no_grad();
            let flat: Vec<Vec<f64>> = s.iter().flatten().cloned().collect();
            let sv = tape.leaf(to_tensor(&flat), false);
            let lt = tape.leaf(Tensor::scalar(0.07f64.ln()), false);
            let main = losses::fusion_loss(&sv, b, v, &lt, Reduction::Mean)
                .unwrap()
                .item();
            assert!((oracle - main).abs() < 1e-10, "trial {trial}: {oracle} vs {main}");
        }
    }

    #[test]
    fn fusion_b2_identical_closed_form() {
        let row = {
            let mut rng = Rng::new(23);
            unit_rows(1, 8, &mut rng).pop().unwrap()
        };
        let s: Vec<Vec<Vec<f64>>> = vec![vec![row.clone(); 4]; 2];
        let l = super::fusion_loss(&s, 0.07, Reduction::Mean);
        assert!((l - (7.0f64 / 3.0).ln()).abs() < 1e-9);
    }
}
