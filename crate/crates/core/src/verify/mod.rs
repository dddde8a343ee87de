//! The gradient-verification suite behind the `gradcheck` command: every
//! primitive op, every loss, and the full objective through both encoders
//! and the fusion module, all checked against central finite differences.

use serde::{Deserialize, Serialize};

use crate::data::{generate_dataset, make_batches};
use crate::error::Result;
use crate::losses::{self, Reduction};
use crate::model::{FusionConfig, Model, ModelConfig, TextConfig, VisionConfig};
use crate::numerics::{grad_check, Rng, Tape, Tensor, Var, H_COMPOSITE, H_PRIMITIVE};

pub const TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
    pub wall_seconds: f64,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn worst(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }
}

fn check(
    out: &mut Vec<CheckResult>,
    name: &str,
    f: impl Fn(&Tape, &[Var]) -> Var,
    points: &[Tensor],
    h: f64,
) -> Result<()> {
    let max_rel_err = grad_check(f, points, h)?;
    out.push(CheckResult {
        name: name.to_string(),
        max_rel_err,
        tolerance: TOLERANCE,
    });
    Ok(())
}

/// Every differentiable primitive, checked on random inputs.
pub fn primitive_op_checks() -> Result<Vec<CheckResult>> {
    let mut rng = Rng::new(0x6f7073);
    let mut out = Vec::new();
    let x34 = Tensor::randn(&[3, 4], 1.0, &mut rng);
    type Unary = (&'static str, fn(&Tape, &[Var]) -> Var);
    let unary: Vec<Unary> = vec![
        ("add_broadcast", |_, v| v[0].add(&v[0].mean_axis(0)).exp().sum_all()),
        ("sub_mul", |_, v| v[0].sub(&v[0].mul(&v[0]).scale(0.3)).tanh().sum_all()),
        ("exp", |_, v| v[0].exp().sum_all()),
        ("log", |_, v| v[0].exp().add_scalar(1.0).log().sum_all()),
        ("tanh", |_, v| v[0].tanh().sum_all()),
        ("gelu", |_, v| v[0].gelu().sum_all()),
        ("neg_scale", |_, v| v[0].neg().scale(0.7).exp().sum_all()),
        ("softmax", |_, v| v[0].softmax_last().mul(&v[0]).sum_all()),
        ("logsumexp", |_, v| v[0].logsumexp_last().sum_all()),
        ("l2_normalize", |_, v| v[0].l2_normalize_last().exp().sum_all()),
        ("layernorm", |_, v| v[0].layernorm_last(1e-5).tanh().sum_all()),
        ("max_last", |_, v| v[0].max_last().sum_all()),
        ("transpose", |_, v| v[0].transpose_last2().exp().mean_all()),
        ("reshape_sum_axis", |_, v| v[0].reshape(&[2, 6]).sum_axis(0).tanh().sum_all()),
        ("mean_axis", |_, v| v[0].mean_axis(1).exp().sum_all()),
        ("diag2d", |_, v| v[0].matmul(&v[0].transpose_last2()).diag2d().sum_all()),
        ("narrow", |_, v| v[0].narrow(1, 1, 2).exp().sum_all()),
        ("index_select0", |_, v| v[0].index_select0(&[2, 0, 1, 0]).tanh().sum_all()),
    ];
    for (name, f) in unary {
        check(&mut out, name, f, std::slice::from_ref(&x34), H_PRIMITIVE)?;
    }

    let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
    check(
        &mut out,
        "matmul",
        |_, v| v[0].matmul(&v[1]).tanh().sum_all(),
        &[a, b],
        H_PRIMITIVE,
    )?;
    let a = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
    let b = Tensor::randn(&[2, 4, 3], 1.0, &mut rng);
    check(
        &mut out,
        "bmm",
        |_, v| v[0].bmm(&v[1]).tanh().sum_all(),
        &[a, b],
        H_PRIMITIVE,
    )?;
    let a = Tensor::randn(&[2, 3], 1.0, &mut rng);
    let b = Tensor::randn(&[3], 1.0, &mut rng).map(|v| v + 3.0);
    check(
        &mut out,
        "div_broadcast",
        |_, v| v[0].div(&v[1]).exp().sum_all(),
        &[a, b],
        H_PRIMITIVE,
    )?;
    let a = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
    let b = Tensor::randn(&[2, 2, 4], 1.0, &mut rng);
    check(
        &mut out,
        "concat",
        |_, v| Var::concat(&[&v[0], &v[1]], 1).tanh().sum_all(),
        &[a, b],
        H_PRIMITIVE,
    )?;
    let x = Tensor::randn(&[2, 4, 6], 1.0, &mut rng);
    check(
        &mut out,
        "split_merge_heads",
        |_, v| v[0].split_heads(2).tanh().merge_heads(2).sum_all(),
        std::slice::from_ref(&x),
        H_PRIMITIVE,
    )?;
    check(
        &mut out,
        "gather_token",
        |_, v| v[0].gather_token(&[3, 1]).exp().sum_all(),
        &[x],
        H_PRIMITIVE,
    )?;
    Ok(out)
}

/// The three losses, differentiated against raw (pre-normalization)
/// embeddings and the log-temperature.
pub fn loss_checks() -> Result<Vec<CheckResult>> {
    let mut rng = Rng::new(0x6c6f7373);
    let mut out = Vec::new();
    let (b, d) = (4, 6);
    let y = Tensor::randn(&[b, d], 1.0, &mut rng);
    let z = Tensor::randn(&[b, d], 1.0, &mut rng);
    let lt = Tensor::scalar(losses::TAU_INIT.ln());
    check(
        &mut out,
        "clip_loss",
        |_, v| {
            losses::clip_loss(
                &v[0].l2_normalize_last(),
                &v[1].l2_normalize_last(),
                &v[2],
                Reduction::Mean,
            )
            .expect("clip loss on valid inputs")
        },
        &[y.clone(), z.clone(), lt.clone()],
        H_COMPOSITE,
    )?;

    let y2 = Tensor::randn(&[b, d], 1.0, &mut rng);
    let z2 = Tensor::randn(&[b, d], 1.0, &mut rng);
    check(
        &mut out,
        "align_loss_2x2",
        |_, v| {
            let ys = [v[0].l2_normalize_last(), v[1].l2_normalize_last()];
            let zs = [v[2].l2_normalize_last(), v[3].l2_normalize_last()];
            losses::align_loss(&ys, &zs, &v[4], Reduction::Mean)
                .expect("align loss on valid inputs")
                .0
        },
        &[y, y2, z, z2, lt.clone()],
        H_COMPOSITE,
    )?;

    let s = Tensor::randn(&[b * 2, d], 1.0, &mut rng);
    check(
        &mut out,
        "fusion_loss",
        |_, v| {
            losses::fusion_loss(&v[0].l2_normalize_last(), b, 2, &v[1], Reduction::Mean)
                .expect("fusion loss on valid inputs")
        },
        &[s, lt],
        H_COMPOSITE,
    )?;
    Ok(out)
}

fn toy_model_config() -> ModelConfig {
    ModelConfig {
        vision: VisionConfig { image_size: 32, patch_size: 8, width: 8, layers: 1, heads: 2 },
        text: TextConfig { vocab_size: 33, max_len: 16, width: 8, layers: 1, heads: 2, eot_id: 2 },
        fusion: FusionConfig { blocks: 1, width: 8, heads: 2 },
        embed_dim: 8,
    }
}

/// The full objective (align + lambda * fusion) differentiated with respect
/// to EVERY model parameter on a real B=2 two-view batch.
pub fn full_objective_check() -> Result<CheckResult> {
    let model = Model::new(toy_model_config(), 0x66756c6c)?;
    let ds = generate_dataset(0x64617461, 2)?;
    let batch = make_batches(&ds, 2, 2, 1, 16, 3, 0)?
        .into_iter()
        .next()
        .expect("one batch of two samples");
    let points: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
    // The deep composition has enough curvature that the coarse composite
    // step leaves visible O(h^2) truncation; the fine step puts the
    // residual two decades under tolerance while round-off stays ~1e-9.
    let max_rel_err = grad_check(
        |tape, vars| {
            let f = model.bind_vars(tape, vars);
            let mut count = 0;
            crate::trainer::batch_loss(&f, &batch, 2.0, false, &mut count)
                .expect("objective forward on valid batch")
                .0
        },
        &points,
        H_PRIMITIVE,
    )?;
    Ok(CheckResult {
        name: "full_objective".to_string(),
        max_rel_err,
        tolerance: TOLERANCE,
    })
}

/// Everything the `gradcheck` command reports.
pub fn run_full_suite() -> Result<VerifyReport> {
    let t0 = std::time::Instant::now();
    let mut checks = primitive_op_checks()?;
    checks.extend(loss_checks()?);
    checks.push(full_objective_check()?);
    Ok(VerifyReport { checks, wall_seconds: t0.elapsed().as_secs_f64() })
}
