//! The dual encoder (the inference-time artifact) and the training-only
//! fusion transformer.
//!
//! Both encoders are small pre-layer-norm transformers: the vision side is
//! bidirectional with CLS pooling, the text side causal with pooling at the
//! end-of-text token, mirroring the CLIP convention. The fusion module maps
//! both token sequences into its own width, concatenates them (image tokens
//! first), runs bidirectional blocks, and reads out the token at the
//! end-of-text position of the joint sequence.

pub mod checkpoint;
pub mod config;
pub mod params;

use crate::error::{Error, Result};
use crate::losses::TAU_INIT;
use crate::numerics::{Rng, Tape, Tensor, Var};

pub use config::{FusionConfig, ModelConfig, TextConfig, VisionConfig};
pub use params::{BoundParams, ParamStore};

pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Fresh model with seeded initialization.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut rng = Rng::derive(seed, 0x696e6974); // init stream
        let mut p = ParamStore::new();
        init_encoder(&mut p, "vision", &cfg, &mut rng);
        init_encoder(&mut p, "text", &cfg, &mut rng);
        p.insert(
            "proj.image.w",
            Tensor::randn(&[cfg.vision.width, cfg.embed_dim], 0.02, &mut rng),
        );
        p.insert(
            "proj.text.w",
            Tensor::randn(&[cfg.text.width, cfg.embed_dim], 0.02, &mut rng),
        );
        p.insert("tau.align", Tensor::scalar(TAU_INIT.ln()));
        init_fusion(&mut p, &cfg, &mut rng);
        Ok(Model { cfg, params: p })
    }

    /// Rebuild from loaded parameters (e.g. a checkpoint). The store may
    /// lack the fusion module (dual-encoder export); encoding still works,
    /// fusing will panic on the missing names.
    pub fn from_parts(cfg: ModelConfig, params: ParamStore) -> Result<Model> {
        cfg.validate()?;
        for required in ["vision.patch_embed.w", "text.tok_embed", "proj.image.w"] {
            if params.get(required).is_none() {
                return Err(Error::Data(format!(
                    "checkpoint is missing parameter {required}"
                )));
            }
        }
        Ok(Model { cfg, params })
    }

    pub fn bind(&self, tape: &Tape, trainable: bool) -> Forward<'_> {
        Forward {
            cfg: &self.cfg,
            tape: tape.clone(),
            p: self.params.bind(tape, trainable),
        }
    }

    /// Forward pass over caller-supplied parameter leaves, positionally
    /// matched to the store order.
    pub fn bind_vars(&self, tape: &Tape, vars: &[Var]) -> Forward<'_> {
        let names: Vec<&str> = self.params.names().collect();
        Forward {
            cfg: &self.cfg,
            tape: tape.clone(),
            p: BoundParams::from_ordered(&names, vars),
        }
    }

    pub fn has_fusion(&self) -> bool {
        self.params.get("fusion.pos").is_some()
    }
}

fn init_block(p: &mut ParamStore, prefix: &str, width: usize, rng: &mut Rng) {
    let w = width;
    p.insert(&format!("{prefix}.ln1.g"), Tensor::full(&[w], 1.0));
    p.insert(&format!("{prefix}.ln1.b"), Tensor::zeros(&[w]));
    for name in ["wq", "wk", "wv", "wo"] {
        p.insert(
            &format!("{prefix}.attn.{name}"),
            Tensor::randn(&[w, w], 0.02, rng),
        );
        p.insert(
            &format!("{prefix}.attn.{}", name.replace('w', "b")),
            Tensor::zeros(&[w]),
        );
    }
    p.insert(&format!("{prefix}.ln2.g"), Tensor::full(&[w], 1.0));
    p.insert(&format!("{prefix}.ln2.b"), Tensor::zeros(&[w]));
    p.insert(&format!("{prefix}.mlp.w1"), Tensor::randn(&[w, 4 * w], 0.02, rng));
    p.insert(&format!("{prefix}.mlp.b1"), Tensor::zeros(&[4 * w]));
    p.insert(&format!("{prefix}.mlp.w2"), Tensor::randn(&[4 * w, w], 0.02, rng));
    p.insert(&format!("{prefix}.mlp.b2"), Tensor::zeros(&[w]));
}

fn init_encoder(p: &mut ParamStore, side: &str, cfg: &ModelConfig, rng: &mut Rng) {
    match side {
        "vision" => {
            let v = &cfg.vision;
            let patch_dim = v.patch_size * v.patch_size * 3;
            p.insert(
                "vision.patch_embed.w",
                Tensor::randn(&[patch_dim, v.width], 0.02, rng),
            );
            p.insert("vision.patch_embed.b", Tensor::zeros(&[v.width]));
            p.insert("vision.cls", Tensor::randn(&[1, 1, v.width], 0.02, rng));
            p.insert("vision.pos", Tensor::randn(&[v.seq_len(), v.width], 0.01, rng));
            for i in 0..v.layers {
                init_block(p, &format!("vision.block{i}"), v.width, rng);
            }
            p.insert("vision.ln_f.g", Tensor::full(&[v.width], 1.0));
            p.insert("vision.ln_f.b", Tensor::zeros(&[v.width]));
        }
        "text" => {
            let t = &cfg.text;
            p.insert(
                "text.tok_embed",
                Tensor::randn(&[t.vocab_size, t.width], 0.02, rng),
            );
            p.insert("text.pos", Tensor::randn(&[t.max_len, t.width], 0.01, rng));
            for i in 0..t.layers {
                init_block(p, &format!("text.block{i}"), t.width, rng);
            }
            p.insert("text.ln_f.g", Tensor::full(&[t.width], 1.0));
            p.insert("text.ln_f.b", Tensor::zeros(&[t.width]));
        }
        _ => unreachable!(),
    }
}

fn init_fusion(p: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) {
    let f = &cfg.fusion;
    p.insert("fusion.tau", Tensor::scalar(TAU_INIT.ln()));
    p.insert(
        "fusion.img_in.w",
        Tensor::randn(&[cfg.vision.width, f.width], 0.02, rng),
    );
    p.insert("fusion.img_in.b", Tensor::zeros(&[f.width]));
    p.insert(
        "fusion.txt_in.w",
        Tensor::randn(&[cfg.text.width, f.width], 0.02, rng),
    );
    p.insert("fusion.txt_in.b", Tensor::zeros(&[f.width]));
    p.insert(
        "fusion.pos",
        Tensor::randn(&[cfg.fusion_seq_len(), f.width], 0.01, rng),
    );
    for i in 0..f.blocks {
        init_block(p, &format!("fusion.block{i}"), f.width, rng);
    }
    p.insert("fusion.ln_f.g", Tensor::full(&[f.width], 1.0));
    p.insert("fusion.ln_f.b", Tensor::zeros(&[f.width]));
}

/// Number of scalar parameters in one transformer block of the given width.
pub fn block_param_count(width: usize) -> usize {
    let w = width;
    // ln1 + ln2 affine, 4 attention projections with bias, 4x MLP.
    4 * w + 4 * (w * w + w) + (w * 4 * w + 4 * w) + (4 * w * w + w)
}

const LN_EPS: f64 = 1e-5;

/// One forward-pass binding of the model onto a tape.
pub struct Forward<'m> {
    cfg: &'m ModelConfig,
    tape: Tape,
    p: BoundParams,
}

impl Forward<'_> {
    pub fn params(&self) -> &BoundParams {
        &self.p
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn log_tau_align(&self) -> &Var {
        self.p.get("tau.align")
    }

    pub fn log_tau_fusion(&self) -> &Var {
        self.p.get("fusion.tau")
    }

    fn linear(&self, x: &Var, w: &str, b: Option<&str>) -> Var {
        // x: [N, L, D_in] -> [N, L, D_out] through a shared weight
        let mut h = x.matmul(self.p.get(w));
        if let Some(b) = b {
            h = h.add(self.p.get(b));
        }
        h
    }

    fn layernorm(&self, x: &Var, prefix: &str) -> Var {
        x.layernorm_last(LN_EPS)
            .mul(self.p.get(&format!("{prefix}.g")))
            .add(self.p.get(&format!("{prefix}.b")))
    }

    fn attention(&self, x: &Var, prefix: &str, heads: usize, mask: Option<&Tensor>) -> Var {
        let d = x.shape()[2];
        let hd = d / heads;
        // fold the 1/sqrt(hd) into q: scaling [N,L,D] is cheaper than
        // scaling the [N*h, L, L] score tensor
        let q = self
            .linear(x, &format!("{prefix}.wq"), Some(&format!("{prefix}.bq")))
            .scale(1.0 / (hd as f64).sqrt())
            .split_heads(heads);
        let k = self
            .linear(x, &format!("{prefix}.wk"), Some(&format!("{prefix}.bk")))
            .split_heads(heads);
        let v = self
            .linear(x, &format!("{prefix}.wv"), Some(&format!("{prefix}.bv")))
            .split_heads(heads);
        let mut scores = q.bmm_nt(&k);
        if let Some(m) = mask {
            scores = scores.add(&self.tape.constant(m.clone()));
        }
        let out = scores.softmax_last().bmm(&v).merge_heads(heads);
        self.linear(&out, &format!("{prefix}.wo"), Some(&format!("{prefix}.bo")))
    }

    fn block(&self, x: &Var, prefix: &str, heads: usize, mask: Option<&Tensor>) -> Var {
        let a = self.attention(
            &self.layernorm(x, &format!("{prefix}.ln1")),
            &format!("{prefix}.attn"),
            heads,
            mask,
        );
        let x = x.add(&a);
        let h = self.layernorm(&x, &format!("{prefix}.ln2"));
        let h = self
            .linear(&h, &format!("{prefix}.mlp.w1"), Some(&format!("{prefix}.mlp.b1")))
            .gelu();
        let h = self.linear(&h, &format!("{prefix}.mlp.w2"), Some(&format!("{prefix}.mlp.b2")));
        x.add(&h)
    }

    /// Encode a batch of images [N, 3, H, W] into pooled unit-norm
    /// embeddings [N, embed_dim] and the full token sequence [N, L_I, width].
    pub fn encode_image(&self, images: &Tensor) -> Result<(Var, Var)> {
        let v = &self.cfg.vision;
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != v.image_size || shape[3] != v.image_size
        {
            return Err(Error::Config(format!(
                "encode_image expects [N, 3, {}, {}], got {:?}",
                v.image_size, v.image_size, shape
            )));
        }
        let n = shape[0];
        let patches = patchify(images, v.patch_size);
        let x = self.tape.constant(patches);
        let x = self.linear(&x, "vision.patch_embed.w", Some("vision.patch_embed.b"));
        let cls = self
            .p
            .get("vision.cls")
            .index_select0(&vec![0; n]);
        let x = Var::concat(&[&cls, &x], 1).add(self.p.get("vision.pos"));
        let mut x = x;
        for i in 0..v.layers {
            x = self.block(&x, &format!("vision.block{i}"), v.heads, None);
        }
        let tokens = self.layernorm(&x, "vision.ln_f");
        let pooled = tokens
            .gather_token(&vec![0; n])
            .matmul(self.p.get("proj.image.w"))
            .l2_normalize_last();
        Ok((pooled, tokens))
    }

    /// Encode token-id sequences [N * max_len] (row-major) into pooled
    /// unit-norm embeddings, the token sequence, and per-row EOT positions.
    pub fn encode_text(&self, ids: &[u16]) -> Result<(Var, Var, Vec<usize>)> {
        let t = &self.cfg.text;
        if ids.len() % t.max_len != 0 {
            return Err(Error::Data(format!(
                "token buffer length {} is not a multiple of max_len {}",
                ids.len(),
                t.max_len
            )));
        }
        let n = ids.len() / t.max_len;
        let mut eot = Vec::with_capacity(n);
        for row in 0..n {
            let seq = &ids[row * t.max_len..(row + 1) * t.max_len];
            let mut found = None;
            for (pos, &id) in seq.iter().enumerate() {
                if id as usize >= t.vocab_size {
                    return Err(Error::Data(format!(
                        "sample {row}: token id {id} out of vocabulary ({})",
                        t.vocab_size
                    )));
                }
                if id == t.eot_id {
                    if found.is_some() {
                        return Err(Error::Data(format!(
                            "sample {row}: duplicate end-of-text token"
                        )));
                    }
                    found = Some(pos);
                }
            }
            eot.push(found.ok_or_else(|| {
                Error::Data(format!("sample {row}: missing end-of-text token"))
            })?);
        }
        let flat: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let x = self
            .p
            .get("text.tok_embed")
            .index_select0(&flat)
            .reshape(&[n, t.max_len, t.width])
            .add(self.p.get("text.pos"));
        let mask = causal_mask(t.max_len);
        let mut x = x;
        for i in 0..t.layers {
            x = self.block(&x, &format!("text.block{i}"), t.heads, Some(&mask));
        }
        let tokens = self.layernorm(&x, "text.ln_f");
        let pooled = tokens
            .gather_token(&eot)
            .matmul(self.p.get("proj.text.w"))
            .l2_normalize_last();
        Ok((pooled, tokens, eot))
    }

    /// Fuse paired token sequences into unit-norm fused vectors [N, width].
    /// Row n of `img_tokens` pairs with row n of `txt_tokens`; `eot[n]` is
    /// the end-of-text position within the text sequence.
    pub fn fuse(&self, img_tokens: &Var, txt_tokens: &Var, eot: &[usize]) -> Result<Var> {
        let f = &self.cfg.fusion;
        let li = img_tokens.shape()[1];
        let n = img_tokens.shape()[0];
        if txt_tokens.shape()[0] != n || eot.len() != n {
            return Err(Error::Usage(format!(
                "fuse: mismatched pairing ({} image rows, {} text rows, {} eot entries)",
                n,
                txt_tokens.shape()[0],
                eot.len()
            )));
        }
        let img = self.linear(img_tokens, "fusion.img_in.w", Some("fusion.img_in.b"));
        let txt = self.linear(txt_tokens, "fusion.txt_in.w", Some("fusion.txt_in.b"));
        let mut x = Var::concat(&[&img, &txt], 1).add(self.p.get("fusion.pos"));
        for i in 0..f.blocks {
            x = self.block(&x, &format!("fusion.block{i}"), f.heads, None);
        }
        // Layernorm is per-token, so normalizing only the readout row is
        // identical to normalizing the whole sequence first.
        let readout: Vec<usize> = eot.iter().map(|&e| li + e).collect();
        let s = x
            .gather_token(&readout)
            .layernorm_last(LN_EPS)
            .mul(self.p.get("fusion.ln_f.g"))
            .add(self.p.get("fusion.ln_f.b"));
        Ok(s.l2_normalize_last())
    }
}

/// [N, 3, H, W] -> [N, patches, patch_size^2 * 3], row-major patches
/// left-to-right, top-to-bottom, channels fastest within a pixel.
pub fn patchify(images: &Tensor, patch: usize) -> Tensor {
    let shape = images.shape();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (ph, pw) = (h / patch, w / patch);
    let patch_dim = patch * patch * c;
    let mut out = Tensor::zeros(&[n, ph * pw, patch_dim]);
    let src = images.data();
    let dst = out.data_mut();
    for img in 0..n {
        for py in 0..ph {
            for px in 0..pw {
                let pi = py * pw + px;
                for dy in 0..patch {
                    for dx in 0..patch {
                        for ch in 0..c {
                            let sy = py * patch + dy;
                            let sx = px * patch + dx;
                            let s = ((img * c + ch) * h + sy) * w + sx;
                            let d = (img * ph * pw + pi) * patch_dim
                                + (dy * patch + dx) * c
                                + ch;
                            dst[d] = src[s];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Additive causal mask: -inf above the diagonal.
pub fn causal_mask(len: usize) -> Tensor {
    let mut m = Tensor::zeros(&[len, len]);
    let d = m.data_mut();
    for i in 0..len {
        for j in i + 1..len {
            d[i * len + j] = f64::NEG_INFINITY;
        }
    }
    m
}

#[cfg(test)]
mod tests;
