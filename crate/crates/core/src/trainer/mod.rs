//! Training harness: AdamW with decoupled weight decay, linear warmup into
//! a cosine schedule, gradient clipping, per-step metrics, periodic
//! zero-shot evaluation, and checkpoint export.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{generate_dataset, make_batches, Dataset, ViewBatch};
use crate::error::{Error, Result};
use crate::eval;
use crate::losses::{self, Reduction, TAU_MAX, TAU_MIN};
use crate::model::{checkpoint, Model, ModelConfig, ParamStore};
use crate::numerics::{Tape, Tensor, Var};

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub v_i: usize,
    pub v_t: usize,
    pub fusion_blocks: usize,
    /// Weight-initialization seed (its own stream; never touches data).
    pub seed: u64,
    /// Dataset + augmentation seed, shared across ablation arms.
    pub data_seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
    /// Zero-shot eval cadence in epochs (0 disables the hook).
    pub eval_every: usize,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Clamp both temperatures into [TAU_MIN, TAU_MAX] after each step.
    pub clamp_tau: bool,
    /// Drive the fusion loss with the alignment temperature instead of its
    /// own learnable scalar (single shared τ).
    pub shared_tau: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.98,
            weight_decay: 0.1,
            warmup_steps: 200,
            epochs: 30,
            batch_size: 64,
            lambda: 2.0,
            v_i: 2,
            v_t: 1,
            fusion_blocks: 2,
            seed: 0,
            data_seed: 1,
            n_train: 4096,
            n_eval: 1024,
            eval_every: 1,
            grad_clip: 1.0,
            clamp_tau: true,
            shared_tau: false,
        }
    }
}

impl TrainConfig {
    pub fn steps_per_epoch(&self) -> usize {
        self.n_train / self.batch_size
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.v_i == 0 || self.v_t == 0 {
            return Err(Error::Config("need at least one view per modality".into()));
        }
        if self.lambda > 0.0 && self.v_i * self.v_t < 2 {
            return Err(Error::Config(
                "fusion loss needs V_I * V_T >= 2 fused views; set lambda=0 for single-view runs"
                    .into(),
            ));
        }
        if self.batch_size == 0 || self.batch_size > self.n_train {
            return Err(Error::Config(format!(
                "batch size {} invalid for {} training samples",
                self.batch_size, self.n_train
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.warmup_steps >= self.total_steps() {
            return Err(Error::Config(format!(
                "warmup {} must be shorter than the run ({} steps)",
                self.warmup_steps,
                self.total_steps()
            )));
        }
        Ok(())
    }

    /// Flat key=value text form, one field per line.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        let v = serde_json::to_value(self).expect("config serializes");
        for (k, val) in v.as_object().expect("config is a map") {
            out.push_str(&format!("{k}={val}\n"));
        }
        out
    }

    /// Parse the key=value form; blank lines and '#' comments allowed.
    /// Unknown keys are rejected.
    pub fn from_key_values(text: &str) -> Result<TrainConfig> {
        let mut v = serde_json::to_value(TrainConfig::default()).expect("default serializes");
        let map = v.as_object_mut().expect("config is a map");
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, raw) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {line:?}", lineno + 1))
            })?;
            let (key, raw) = (key.trim(), raw.trim());
            let slot = map.get_mut(key).ok_or_else(|| {
                Error::Config(format!("line {}: unknown config key {key:?}", lineno + 1))
            })?;
            *slot = match slot {
                serde_json::Value::Bool(_) => serde_json::Value::Bool(
                    raw.parse::<bool>()
                        .map_err(|_| Error::Config(format!("{key}: expected bool, got {raw:?}")))?,
                ),
                _ => {
                    // integers stay integers so usize/u64 fields roundtrip
                    if let Ok(i) = raw.parse::<u64>() {
                        serde_json::Value::Number(i.into())
                    } else {
                        serde_json::Value::Number(
                            raw.parse::<f64>()
                                .ok()
                                .and_then(serde_json::Number::from_f64)
                                .ok_or_else(|| {
                                    Error::Config(format!("{key}: expected number, got {raw:?}"))
                                })?,
                        )
                    }
                }
            };
        }
        serde_json::from_value(v).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        *self = TrainConfig::from_key_values(&format!(
            "{}\n{key}={value}\n",
            self.to_key_values()
        ))?;
        Ok(())
    }
}

/// Linear warmup to `lr` over `warmup` steps, then cosine decay to zero at
/// `total` steps.
pub fn lr_at(step: usize, lr: f64, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        lr * step as f64 / warmup as f64
    } else {
        let t = (step - warmup) as f64 / (total - warmup) as f64;
        lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

fn no_weight_decay(name: &str) -> bool {
    name.contains("tau")
        || [".b", ".b1", ".b2", ".bq", ".bk", ".bv", ".bo"]
            .iter()
            .any(|s| name.ends_with(s))
}

/// AdamW with bias correction and decoupled weight decay. Moment buffers
/// are kept in parameter-store order.
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    weight_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: usize,
}

impl AdamW {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, weight_decay: f64) -> AdamW {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, p)| Tensor::zeros(p.shape()))
            .collect();
        AdamW { beta1, beta2, weight_decay, m: zeros.clone(), v: zeros, t: 0 }
    }

    /// One update. `grads` aligns with `params.iter()` order. Decay is
    /// decoupled (applied to the parameter, not the gradient) and skipped
    /// for biases and temperatures.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (name, p)) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for {name} at optimizer step {}",
                    self.t
                )));
            }
            let decay = if no_weight_decay(name) { 0.0 } else { self.weight_decay };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, pj) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *pj -= lr * decay * *pj + lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// Global L2 norm over a gradient set; scales in place when `clip` > 0 and
/// the norm exceeds it. Returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut [Tensor], clip: f64) -> f64 {
    let norm: f64 = grads
        .iter()
        .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if clip > 0.0 && norm > clip {
        let s = clip / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// One line of `metrics.jsonl`. Wall time is measured per step but written
/// to the `timings.jsonl` sidecar so metrics files are byte-reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_align: f64,
    pub loss_fusion: f64,
    pub tau_align: f64,
    pub tau_fusion: f64,
    #[serde(skip)]
    pub step_wall_ms: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochEval {
    pub epoch: usize,
    pub step: usize,
    pub zero_shot_acc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub final_loss: f64,
    pub fusion_forward_passes: usize,
    pub epoch_evals: Vec<EpochEval>,
    pub report: eval::EvalReport,
}

/// Indices that pull view `v` of every sample out of a view-major
/// [B * views, ...] stack.
fn view_indices(b: usize, views: usize, v: usize) -> Vec<usize> {
    (0..b).map(|n| n * views + v).collect()
}

/// Forward + loss for one batch. Returns the scalar loss Var and its report.
/// `fusion_counter` increments once per fusion-module forward pass.
pub fn batch_loss(
    f: &crate::model::Forward<'_>,
    batch: &ViewBatch,
    lambda: f64,
    shared_tau: bool,
    fusion_counter: &mut usize,
) -> Result<(Var, losses::LossReport)> {
    let b = batch.batch_size();
    let (v_i, v_t) = (batch.v_i, batch.v_t);
    let (pooled_i, tokens_i) = f.encode_image(&batch.images)?;
    let (pooled_t, tokens_t, eot) = f.encode_text(&batch.texts)?;
    let y_views: Vec<Var> = (0..v_i)
        .map(|v| pooled_i.index_select0(&view_indices(b, v_i, v)))
        .collect();
    let z_views: Vec<Var> = (0..v_t)
        .map(|v| pooled_t.index_select0(&view_indices(b, v_t, v)))
        .collect();

    let fused = if lambda > 0.0 {
        // All V_I x V_T combinations fused in one batched pass, rows ordered
        // n * V + (i * V_T + j) as the fusion loss expects.
        let v = v_i * v_t;
        let mut img_idx = Vec::with_capacity(b * v);
        let mut txt_idx = Vec::with_capacity(b * v);
        let mut eot_sel = Vec::with_capacity(b * v);
        for n in 0..b {
            for i in 0..v_i {
                for j in 0..v_t {
                    img_idx.push(n * v_i + i);
                    txt_idx.push(n * v_t + j);
                    eot_sel.push(eot[n * v_t + j]);
                }
            }
        }
        let s = f.fuse(
            &tokens_i.index_select0(&img_idx),
            &tokens_t.index_select0(&txt_idx),
            &eot_sel,
        )?;
        *fusion_counter += 1;
        Some((s, v))
    } else {
        None
    };

    let (loss, report) = losses::total_loss(
        &y_views,
        &z_views,
        fused.as_ref().map(|(s, v)| (s, *v)),
        f.log_tau_align(),
        if shared_tau { f.log_tau_align() } else { f.log_tau_fusion() },
        lambda,
        Reduction::Mean,
    )?;
    Ok((loss, report))
}

fn clamp_temperatures(params: &mut ParamStore) {
    for name in ["tau.align", "fusion.tau"] {
        if let Some(t) = params.get_mut(name) {
            let v = &mut t.data_mut()[0];
            *v = v.clamp(TAU_MIN.ln(), TAU_MAX.ln());
        }
    }
}

pub struct TrainArtifacts {
    pub out_dir: PathBuf,
    pub summary: TrainSummary,
}

/// Run the full training loop, writing config.txt, metrics.jsonl,
/// timings.jsonl, eval.jsonl, ckpt_final.ito, ckpt_dual.ito, and
/// report.json under `out_dir`.
pub fn train(cfg: &TrainConfig, out_dir: &Path) -> Result<TrainArtifacts> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let train_ds = generate_dataset(cfg.data_seed, cfg.n_train)?;
    let eval_ds = generate_dataset(cfg.data_seed ^ 0x6576616c, cfg.n_eval)?;
    let mut mcfg = ModelConfig::desk(train_ds.vocab.len());
    mcfg.fusion.blocks = cfg.fusion_blocks;
    let mut model = Model::new(mcfg.clone(), cfg.seed)?;
    let mut opt = AdamW::new(&model.params, cfg.beta1, cfg.beta2, cfg.weight_decay);

    std::fs::write(out_dir.join("config.txt"), cfg.to_key_values())?;
    let mut metrics = std::io::BufWriter::new(std::fs::File::create(out_dir.join("metrics.jsonl"))?);
    let mut timings = std::io::BufWriter::new(std::fs::File::create(out_dir.join("timings.jsonl"))?);
    let mut eval_log = std::io::BufWriter::new(std::fs::File::create(out_dir.join("eval.jsonl"))?);

    let total_steps = cfg.total_steps();
    let max_len = mcfg.text.max_len;
    let mut step = 0usize;
    let mut fusion_forward_passes = 0usize;
    let mut final_loss = f64::NAN;
    let mut epoch_evals = Vec::new();

    for epoch in 0..cfg.epochs {
        let batches = make_batches(
            &train_ds,
            cfg.batch_size,
            cfg.v_i,
            cfg.v_t,
            max_len,
            cfg.data_seed,
            epoch,
        )?;
        for batch in &batches {
            let t0 = Instant::now();
            let lr_t = lr_at(step, cfg.lr, cfg.warmup_steps, total_steps);
            let tape = Tape::new();
            let f = model.bind(&tape, true);
            let (loss, report) = batch_loss(
                &f,
                batch,
                cfg.lambda,
                cfg.shared_tau,
                &mut fusion_forward_passes,
            )?;
            if !report.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {} at step {step} (data_seed {}, epoch {epoch})",
                    report.total, cfg.data_seed
                )));
            }
            tape.backward(&loss);
            let mut grads = f.params().grads(&model.params);
            drop(f);
            drop(tape);
            let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip);
            if !grad_norm.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient norm at step {step} (data_seed {}, epoch {epoch})",
                    cfg.data_seed
                )));
            }
            opt.step(&mut model.params, &grads, lr_t)?;
            if cfg.clamp_tau {
                clamp_temperatures(&mut model.params);
            }
            let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
            let rec = MetricsRecord {
                step,
                epoch,
                lr: lr_t,
                loss_total: report.total,
                loss_align: report.align,
                loss_fusion: report.fusion,
                tau_align: model.params.get("tau.align").unwrap().data()[0].exp(),
                tau_fusion: if cfg.shared_tau {
                    model.params.get("tau.align").unwrap().data()[0].exp()
                } else {
                    model.params.get("fusion.tau").unwrap().data()[0].exp()
                },
                step_wall_ms: wall_ms,
                grad_norm,
            };
            writeln!(metrics, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
            writeln!(timings, "{{\"step\":{step},\"step_wall_ms\":{wall_ms:.3}}}")?;
            final_loss = report.total;
            step += 1;
        }
        if cfg.eval_every > 0 && ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs) {
            let acc = quick_zero_shot(&model, &eval_ds)?;
            let e = EpochEval { epoch, step, zero_shot_acc: acc };
            writeln!(eval_log, "{}", serde_json::to_string(&e).expect("record serializes"))?;
            epoch_evals.push(e);
        }
    }
    metrics.flush()?;
    timings.flush()?;
    eval_log.flush()?;

    checkpoint::save(&model.params, &out_dir.join("ckpt_final.ito"))?;
    let dual_path = out_dir.join("ckpt_dual.ito");
    checkpoint::export_dual_encoder(&model.params, &dual_path)?;

    // Final metrics go through the exported dual encoder, not the live model.
    let dual = eval::load_dual_encoder(&dual_path, mcfg)?;
    let report = eval::evaluate(&dual, &eval_ds, cfg.data_seed)?;
    std::fs::write(
        out_dir.join("report.json"),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;

    let summary = TrainSummary {
        steps: step,
        final_loss,
        fusion_forward_passes,
        epoch_evals,
        report,
    };
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    Ok(TrainArtifacts { out_dir: out_dir.to_path_buf(), summary })
}

/// Zero-shot accuracy of the current weights over an eval dataset
/// (dual-encoder path only).
pub fn quick_zero_shot(model: &Model, ds: &Dataset) -> Result<f64> {
    let (y, _, labels) = eval::embed_dataset(model, ds, 64)?;
    let protos = eval::class_prototypes(model, &ds.vocab)?;
    Ok(eval::zero_shot_classify(&y, &protos, &labels))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchArm {
    pub name: String,
    pub v_i: usize,
    pub v_t: usize,
    pub lambda: f64,
    pub median_step_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub arms: Vec<BenchArm>,
    pub ito_over_clip: f64,
    pub sub2_over_clip: f64,
    /// Reference step-time ratio reported for full-scale training of this
    /// objective; printed for comparison, not asserted.
    pub reference_ratio: f64,
}

/// Median wall time per optimization step for the CLIP baseline, the
/// default two-image-view configuration, and the two-by-two sub-description
/// grid, measured over `steps` real steps each.
pub fn overhead_benchmark(steps: usize, batch_size: usize, data_seed: u64) -> Result<BenchReport> {
    let arms = [("clip", 1, 1, 0.0), ("ito", 2, 1, 2.0), ("ito_sub2", 2, 2, 2.0)];
    let n = batch_size * (steps + 1);
    let ds = generate_dataset(data_seed, n)?;
    let mcfg = ModelConfig::desk(ds.vocab.len());
    let mut results = Vec::new();
    for (name, v_i, v_t, lambda) in arms {
        let mut model = Model::new(mcfg.clone(), 7)?;
        let mut opt = AdamW::new(&model.params, 0.9, 0.98, 0.1);
        let batches = make_batches(&ds, batch_size, v_i, v_t, mcfg.text.max_len, data_seed, 0)?;
        let mut wall = Vec::with_capacity(steps);
        let mut counter = 0usize;
        for batch in batches.iter().take(steps) {
            let t0 = Instant::now();
            let tape = Tape::new();
            let f = model.bind(&tape, true);
            let (loss, _) = batch_loss(&f, batch, lambda, false, &mut counter)?;
            tape.backward(&loss);
            let mut grads = f.params().grads(&model.params);
            drop(f);
            drop(tape);
            clip_grad_norm(&mut grads, 1.0);
            opt.step(&mut model.params, &grads, 1e-4)?;
            wall.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        wall.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = wall[wall.len() / 2];
        results.push(BenchArm {
            name: name.to_string(),
            v_i,
            v_t,
            lambda,
            median_step_ms: median,
        });
    }
    Ok(BenchReport {
        ito_over_clip: results[1].median_step_ms / results[0].median_step_ms,
        sub2_over_clip: results[2].median_step_ms / results[0].median_step_ms,
        reference_ratio: 1.4,
        arms: results,
    })
}

#[cfg(test)]
mod tests;
