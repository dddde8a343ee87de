//! Evaluation over the exported dual encoder: zero-shot classification,
//! bidirectional retrieval, a linear probe on frozen features, and the
//! representation-geometry statistics that quantify the modality gap.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TextMode, Vocab, IMAGE_SIZE, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::model::{checkpoint, Model, ParamStore};
use crate::numerics::{Rng, Tape, Tensor};

pub const RECALL_KS: [usize; 3] = [1, 5, 10];
pub const PROBE_ITERS: usize = 500;
pub const PROBE_LR: f64 = 0.1;
pub const KNN_K: usize = 10;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub i2t: Vec<(usize, f64)>, // (k, recall@k)
    pub t2i: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeometryReport {
    pub centroid_gap: f64,
    pub modality_probe_acc: f64,
    pub knn_mix: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub zero_shot_acc: f64,
    pub retrieval: RetrievalReport,
    pub linear_probe_acc: f64,
    pub geometry: GeometryReport,
}

/// Pooled unit-norm embeddings of a dataset through the dual encoder:
/// (image rows Y [N, d], text rows Z [N, d], labels).
///
/// Images are the un-augmented renders; texts the identity captions.
pub fn embed_dataset(model: &Model, ds: &Dataset, chunk: usize) -> Result<(Tensor, Tensor, Vec<u16>)> {
    let n = ds.samples.len();
    let d = model.cfg.embed_dim;
    let max_len = model.cfg.text.max_len;
    let mut y = Vec::with_capacity(n * d);
    let mut z = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut dummy_rng = Rng::new(0); // Full text mode draws nothing
    for start in (0..n).step_by(chunk.max(1)) {
        let end = (start + chunk.max(1)).min(n);
        let b = end - start;
        let px = 3 * IMAGE_SIZE * IMAGE_SIZE;
        let mut images = Vec::with_capacity(b * px);
        let mut texts = Vec::with_capacity(b * max_len);
        for s in &ds.samples[start..end] {
            images.extend_from_slice(s.image.data());
            texts.extend_from_slice(&crate::data::augment_text(
                &s.scene.clauses(),
                TextMode::Full,
                &ds.vocab,
                max_len,
                &mut dummy_rng,
            )?);
            labels.push(s.label);
        }
        let tape = Tape::no_grad();
        let f = model.bind(&tape, false);
        let (yv, _) = f.encode_image(&Tensor::new(vec![b, 3, IMAGE_SIZE, IMAGE_SIZE], images))?;
        let (zv, _, _) = f.encode_text(&texts)?;
        yv.with_value(|t| y.extend_from_slice(t.data()));
        zv.with_value(|t| z.extend_from_slice(t.data()));
    }
    Ok((Tensor::new(vec![n, d], y), Tensor::new(vec![n, d], z), labels))
}

/// Class prototypes: the renormalized mean over a prompt ensemble of the
/// unit-norm text embeddings, for each of the 32 classes in class order.
/// [C, d]. Ensembling over phrasings (with/without "photo of", the color
/// synonym, and the four positions) stabilizes the prototypes against the
/// idiosyncrasies of any single phrasing.
pub fn class_prototypes(model: &Model, vocab: &Vocab) -> Result<Tensor> {
    use crate::data::{COLOR_SYNONYMS, QUADRANTS};
    let max_len = model.cfg.text.max_len;
    let mut texts = Vec::new();
    let mut per_class = 0usize;
    for c in 0..NUM_CLASSES {
        let name = crate::data::SceneSpec::class_name(c as u16);
        let (color, shape) = name.split_once(' ').expect("class name is color shape");
        let synonym = COLOR_SYNONYMS[c % COLOR_SYNONYMS.len()];
        let mut prompts: Vec<Vec<&str>> = vec![
            vec!["a", "photo", "of", color, shape],
            vec!["a", color, shape],
            vec!["a", synonym, shape],
        ];
        for q in QUADRANTS {
            prompts.push(vec!["a", color, shape, "in", "the", q]);
        }
        per_class = prompts.len();
        for p in &prompts {
            texts.extend_from_slice(&vocab.encode(p, max_len)?);
        }
    }
    let tape = Tape::no_grad();
    let f = model.bind(&tape, false);
    let (embs, _, _) = f.encode_text(&texts)?;
    let embs = embs.value();
    let d = embs.shape()[1];
    let mut protos = Vec::with_capacity(NUM_CLASSES * d);
    for c in 0..NUM_CLASSES {
        let mut mean = vec![0.0; d];
        for p in 0..per_class {
            let row = &embs.data()[(c * per_class + p) * d..(c * per_class + p + 1) * d];
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / per_class as f64;
            }
        }
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        protos.extend(mean.iter().map(|v| v / norm));
    }
    Ok(Tensor::new(vec![NUM_CLASSES, d], protos))
}

/// Top-1 accuracy of nearest-prototype classification. Rows of `y` and
/// `prototypes` must be unit-norm, so the argmax dot product is the argmax
/// cosine; ties break to the lowest class index.
pub fn zero_shot_classify(y: &Tensor, prototypes: &Tensor, labels: &[u16]) -> f64 {
    let d = y.shape()[1];
    let n = y.shape()[0];
    let c = prototypes.shape()[0];
    let mut correct = 0usize;
    for i in 0..n {
        let row = &y.data()[i * d..(i + 1) * d];
        let mut best = 0usize;
        let mut best_sim = f64::NEG_INFINITY;
        for k in 0..c {
            let p = &prototypes.data()[k * d..(k + 1) * d];
            let sim: f64 = row.iter().zip(p).map(|(a, b)| a * b).sum();
            if sim > best_sim {
                best_sim = sim;
                best = k;
            }
        }
        if best == labels[i] as usize {
            correct += 1;
        }
    }
    correct as f64 / n as f64
}

/// Bidirectional recall@k. Row n of `y` pairs with row n of `z`; both sides
/// unit-norm. Ranking is by cosine descending with stable index tie-break.
pub fn retrieval_recall(y: &Tensor, z: &Tensor, ks: &[usize]) -> RetrievalReport {
    let rank_of_match = |queries: &Tensor, candidates: &Tensor| -> Vec<usize> {
        let n = queries.shape()[0];
        let d = queries.shape()[1];
        (0..n)
            .map(|q| {
                let qrow = &queries.data()[q * d..(q + 1) * d];
                let sims: Vec<f64> = (0..n)
                    .map(|c| {
                        let crow = &candidates.data()[c * d..(c + 1) * d];
                        qrow.iter().zip(crow).map(|(a, b)| a * b).sum()
                    })
                    .collect();
                // rank of the true match = 1 + number of candidates strictly
                // better, plus equally-similar candidates with lower index
                let own = sims[q];
                1 + sims
                    .iter()
                    .enumerate()
                    .filter(|&(c, &s)| s > own || (s == own && c < q))
                    .count()
            })
            .collect()
    };
    let at = |ranks: &[usize], k: usize| {
        ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
    };
    let ri = rank_of_match(y, z);
    let rt = rank_of_match(z, y);
    RetrievalReport {
        i2t: ks.iter().map(|&k| (k, at(&ri, k))).collect(),
        t2i: ks.iter().map(|&k| (k, at(&rt, k))).collect(),
    }
}

/// Multinomial logistic regression on frozen features: full-batch gradient
/// descent, no regularization. Returns (per-iteration losses, weights, bias).
fn fit_logistic(
    x: &Tensor,
    labels: &[usize],
    classes: usize,
    iters: usize,
    lr: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = x.shape()[0];
    let d = x.shape()[1];
    let mut w = vec![0.0; d * classes];
    let mut b = vec![0.0; classes];
    let mut losses = Vec::with_capacity(iters);
    let mut probs = vec![0.0; classes];
    for _ in 0..iters {
        let mut gw = vec![0.0; d * classes];
        let mut gb = vec![0.0; classes];
        let mut loss = 0.0;
        for i in 0..n {
            let xi = &x.data()[i * d..(i + 1) * d];
            for (c, p) in probs.iter_mut().enumerate() {
                *p = b[c] + xi.iter().zip(&w[c * d..(c + 1) * d]).map(|(a, ww)| a * ww).sum::<f64>();
            }
            let m = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + probs.iter().map(|p| (p - m).exp()).sum::<f64>().ln();
            loss += (lse - probs[labels[i]]) / n as f64;
            for c in 0..classes {
                let p = (probs[c] - lse).exp();
                let err = (p - f64::from(u8::from(c == labels[i]))) / n as f64;
                gb[c] += err;
                for (gwj, xij) in gw[c * d..(c + 1) * d].iter_mut().zip(xi) {
                    *gwj += err * xij;
                }
            }
        }
        losses.push(loss);
        for (wj, gj) in w.iter_mut().zip(&gw) {
            *wj -= lr * gj;
        }
        for (bj, gj) in b.iter_mut().zip(&gb) {
            *bj -= lr * gj;
        }
    }
    (losses, w, b)
}

fn logistic_accuracy(x: &Tensor, labels: &[usize], w: &[f64], b: &[f64], classes: usize) -> f64 {
    let n = x.shape()[0];
    let d = x.shape()[1];
    let mut correct = 0;
    for i in 0..n {
        let xi = &x.data()[i * d..(i + 1) * d];
        let mut best = 0;
        let mut best_s = f64::NEG_INFINITY;
        for c in 0..classes {
            let s = b[c] + xi.iter().zip(&w[c * d..(c + 1) * d]).map(|(a, ww)| a * ww).sum::<f64>();
            if s > best_s {
                best_s = s;
                best = c;
            }
        }
        if best == labels[i] {
            correct += 1;
        }
    }
    correct as f64 / n as f64
}

/// Linear probe: train on `train_frac` of the rows (seeded shuffle), report
/// held-out accuracy. Errors if the train split is single-class.
pub fn linear_probe(x: &Tensor, labels: &[u16], train_frac: f64, seed: u64) -> Result<f64> {
    let n = x.shape()[0];
    let d = x.shape()[1];
    let classes = labels.iter().map(|&l| l as usize).max().unwrap_or(0) + 1;
    let mut rng = Rng::derive(seed, 0x70726f6265); // probe split stream
    let order = rng.permutation(n);
    let n_train = ((n as f64) * train_frac).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::Usage(format!("degenerate probe split {n_train}/{n}")));
    }
    let gather = |ids: &[usize]| {
        let mut data = Vec::with_capacity(ids.len() * d);
        let mut ls = Vec::with_capacity(ids.len());
        for &i in ids {
            data.extend_from_slice(&x.data()[i * d..(i + 1) * d]);
            ls.push(labels[i] as usize);
        }
        (Tensor::new(vec![ids.len(), d], data), ls)
    };
    let (xt, lt) = gather(&order[..n_train]);
    let (xh, lh) = gather(&order[n_train..]);
    if lt.iter().collect::<BTreeSet<_>>().len() < 2 {
        return Err(Error::Usage("probe train split contains one class".into()));
    }
    let (_, w, b) = fit_logistic(&xt, &lt, classes, PROBE_ITERS, PROBE_LR);
    Ok(logistic_accuracy(&xh, &lh, &w, &b, classes))
}

fn centroid(x: &Tensor) -> Vec<f64> {
    let n = x.shape()[0];
    let d = x.shape()[1];
    let mut c = vec![0.0; d];
    for row in x.data().chunks(d) {
        for (cj, v) in c.iter_mut().zip(row) {
            *cj += v / n as f64;
        }
    }
    c
}

/// The three modality-gap statistics over unit-norm pools Y and Z.
pub fn geometry(y: &Tensor, z: &Tensor, seed: u64) -> Result<GeometryReport> {
    let d = y.shape()[1];
    assert_eq!(z.shape()[1], d);
    let (cy, cz) = (centroid(y), centroid(z));
    let centroid_gap = cy
        .iter()
        .zip(&cz)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();

    // 2-class probe: does a linear model recover the modality?
    let ny = y.shape()[0];
    let nz = z.shape()[0];
    let mut pool = Vec::with_capacity((ny + nz) * d);
    pool.extend_from_slice(y.data());
    pool.extend_from_slice(z.data());
    let pool = Tensor::new(vec![ny + nz, d], pool);
    let modality: Vec<u16> = (0..ny + nz).map(|i| u16::from(i >= ny)).collect();
    let modality_probe_acc = linear_probe(&pool, &modality, 0.7, seed)?;

    // Fraction of 10 nearest neighbors (cosine, tie-break lowest index)
    // belonging to the other modality.
    let n = ny + nz;
    let mut cross = 0usize;
    for i in 0..n {
        let xi = &pool.data()[i * d..(i + 1) * d];
        let mut sims: Vec<(usize, f64)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let xj = &pool.data()[j * d..(j + 1) * d];
                (j, xi.iter().zip(xj).map(|(a, b)| a * b).sum::<f64>())
            })
            .collect();
        sims.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        cross += sims[..KNN_K.min(sims.len())]
            .iter()
            .filter(|&&(j, _)| (j >= ny) != (i >= ny))
            .count();
    }
    let knn_mix = cross as f64 / (n * KNN_K.min(n - 1)) as f64;

    Ok(GeometryReport { centroid_gap, modality_probe_acc, knn_mix })
}

/// Full evaluation of a dual-encoder checkpoint over a dataset.
pub fn evaluate(model: &Model, ds: &Dataset, seed: u64) -> Result<EvalReport> {
    let (y, z, labels) = embed_dataset(model, ds, 64)?;
    let protos = class_prototypes(model, &ds.vocab)?;
    let zero_shot_acc = zero_shot_classify(&y, &protos, &labels);
    let retrieval = retrieval_recall(&y, &z, &RECALL_KS);
    let linear_probe_acc = linear_probe(&y, &labels, 0.7, seed)?;
    let geometry = geometry(&y, &z, seed)?;
    Ok(EvalReport {
        n_samples: ds.samples.len(),
        zero_shot_acc,
        retrieval,
        linear_probe_acc,
        geometry,
    })
}

/// Load a checkpoint for evaluation, insisting it is the exported dual
/// encoder: any fusion-prefixed parameter is a contract violation.
pub fn load_dual_encoder(path: &Path, cfg: crate::model::ModelConfig) -> Result<Model> {
    let store = checkpoint::load(path)?;
    let offenders: Vec<String> = store
        .names()
        .filter(|n| n.starts_with(checkpoint::FUSION_PREFIX))
        .map(|n| n.to_string())
        .collect();
    if !offenders.is_empty() {
        return Err(Error::Usage(format!(
            "checkpoint contains fusion parameters (e.g. {}); evaluate the exported dual encoder",
            offenders[0]
        )));
    }
    Model::from_parts(cfg, store)
}

/// Persist pooled embeddings in the checkpoint binary layout under the
/// array names "Y", "Z", "labels".
pub fn export_embeddings(y: &Tensor, z: &Tensor, labels: &[u16], path: &Path) -> Result<()> {
    let mut store = ParamStore::new();
    store.insert("Y", y.clone());
    store.insert("Z", z.clone());
    store.insert(
        "labels",
        Tensor::new(vec![labels.len()], labels.iter().map(|&l| l as f64).collect()),
    );
    checkpoint::save(&store, path)
}
