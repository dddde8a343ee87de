use super::*;
use crate::numerics::{Rng, Tape};

fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        vision: VisionConfig { image_size: 8, patch_size: 4, width: 8, layers: 1, heads: 2 },
        text: TextConfig { vocab_size: 16, max_len: 6, width: 8, layers: 1, heads: 2, eot_id: 2 },
        fusion: FusionConfig { blocks: 1, width: 8, heads: 2 },
        embed_dim: 8,
    }
}

fn random_images(n: usize, size: usize, rng: &mut Rng) -> Tensor {
    let data = (0..n * 3 * size * size).map(|_| rng.f64()).collect();
    Tensor::new(vec![n, 3, size, size], data)
}

/// Rows [BOS, w.., EOT, PAD..] with random mid tokens.
fn random_texts(n: usize, len: usize, vocab: usize, rng: &mut Rng) -> Vec<u16> {
    let mut out = Vec::with_capacity(n * len);
    for _ in 0..n {
        let content = 1 + rng.below((len - 3) as u64) as usize;
        out.push(1);
        for _ in 0..content {
            out.push(3 + rng.below((vocab - 3) as u64) as u16);
        }
        out.push(2);
        out.resize(out.len() + len - 2 - content, 0);
    }
    out
}

#[test]
fn default_config_has_17_image_tokens() {
    let cfg = ModelConfig::desk(64);
    assert_eq!(cfg.vision.patches(), 16);
    assert_eq!(cfg.vision.seq_len(), 17);
}

#[test]
fn pooled_embeddings_unit_norm() {
    let cfg = tiny_cfg();
    let model = Model::new(cfg, 1).unwrap();
    let mut rng = Rng::new(2);
    let tape = Tape::no_grad();
    let f = model.bind(&tape, false);
    let (y, tokens) = f.encode_image(&random_images(3, 8, &mut rng)).unwrap();
    assert_eq!(y.shape(), vec![3, 8]);
    assert_eq!(tokens.shape(), vec![3, 5, 8]);
    y.with_value(|t| {
        for row in t.data().chunks(8) {
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    });
}

#[test]
fn identical_views_identical_embeddings() {
    let model = Model::new(tiny_cfg(), 3).unwrap();
    let mut rng = Rng::new(4);
    let one = random_images(1, 8, &mut rng);
    let two = Tensor::concat(&[&one, &one], 0);
    let tape = Tape::no_grad();
    let f = model.bind(&tape, false);
    let (y, _) = f.encode_image(&two).unwrap();
    y.with_value(|t| {
        let (a, b) = t.data().split_at(8);
        assert_eq!(a, b);
    });
}

#[test]
fn wrong_image_size_is_config_error() {
    let model = Model::new(tiny_cfg(), 5).unwrap();
    let mut rng = Rng::new(6);
    let tape = Tape::no_grad();
    let f = model.bind(&tape, false);
    match f.encode_image(&random_images(1, 16, &mut rng)) {
        Err(crate::Error::Config(msg)) => assert!(msg.contains("[N, 3, 8, 8]"), "{msg}"),
        other => panic!("expected config error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn eot_index_found() {
    let model = Model::new(tiny_cfg(), 7).unwrap();
    let tape = Tape::no_grad();
    let f = model.bind(&tape, false);
    // [BOS, w1, w2, EOT, PAD, PAD] -> eot at 3
    let ids: Vec<u16> = vec![1, 5, 6, 2, 0, 0];
    let (_, _, eot) = f.encode_text(&ids).unwrap();
    assert_eq!(eot, vec![3]);
}

#[test]
fn missing_and_duplicate_eot_rejected() {
    let model = Model::new(tiny_cfg(), 8).unwrap();
    let tape = Tape::no_grad();
    let f = model.bind(&tape, false);
    match f.encode_text(&[1, 5, 6, 7, 0, 0]) {
        Err(crate::Error::Data(msg)) => assert!(msg.contains("sample 0"), "{msg}"),
        other => panic!("expected data error, got {:?}", other.map(|_| ())),
    }
    let two_rows: Vec<u16> = vec![1, 5, 2, 0, 0, 0, 1, 2, 5, 2, 0, 0];
    match f.encode_text(&two_rows) {
        Err(crate::Error::Data(msg)) => {
            assert!(msg.contains("sample 1") && msg.contains("duplicate"), "{msg}")
        }
        other => panic!("expected data error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn padding_after_eot_does_not_change_pooled_text() {
    let model = Model::new(tiny_cfg(), 9).unwrap();
    let run = |ids: &[u16]| {
        let tape = Tape::no_grad();
        let f = model.bind(&tape, false);
        let (z, _, _) = f.encode_text(ids).unwrap();
        z.value()
    };
    let a = run(&[1, 5, 6, 2, 0, 0]);
    let b = run(&[1, 5, 6, 2, 9, 4]);
    assert_eq!(a.data(), b.data());
}

#[test]
fn fused_vector_shape_and_norm() {
    let model = Model::new(tiny_cfg(), 10).unwrap();
    let mut rng = Rng::new(11);
    let tape = Tape::no_grad();
    let f = model.bind(&tape, false);
    let (_, img_tokens) = f.encode_image(&random_images(2, 8, &mut rng)).unwrap();
    let ids = random_texts(2, 6, 16, &mut rng);
    let (_, txt_tokens, eot) = f.encode_text(&ids).unwrap();
    let s = f.fuse(&img_tokens, &txt_tokens, &eot).unwrap();
    assert_eq!(s.shape(), vec![2, 8]);
    s.with_value(|t| {
        for row in t.data().chunks(8) {
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    });
}

#[test]
fn fusion_routes_gradients_to_both_token_streams() {
    let model = Model::new(tiny_cfg(), 12).unwrap();
    let mut rng = Rng::new(13);
    let tape = Tape::new();
    let f = model.bind(&tape, false);
    let img = tape.leaf(Tensor::randn(&[1, 5, 8], 0.5, &mut rng), true);
    let txt = tape.leaf(Tensor::randn(&[1, 6, 8], 0.5, &mut rng), true);
    let s = f.fuse(&img, &txt, &[3]).unwrap();
    // weighted readout: a plain sum-of-squares would be invariant under the
    // final normalization and its gradient identically zero
    let w = tape.constant(Tensor::randn(&[1, 8], 1.0, &mut rng));
    let loss = s.mul(&w).sum_all().tanh().sum_all();
    tape.backward(&loss);
    assert!(img.grad().unwrap().sq_sum() > 0.0);
    assert!(txt.grad().unwrap().sq_sum() > 0.0);
}

#[test]
fn perturbing_text_token_before_eot_changes_fusion() {
    let model = Model::new(tiny_cfg(), 14).unwrap();
    let mut rng = Rng::new(15);
    let img = Tensor::randn(&[1, 5, 8], 0.5, &mut rng);
    let txt = Tensor::randn(&[1, 6, 8], 0.5, &mut rng);
    let run = |txt: &Tensor| {
        let tape = Tape::no_grad();
        let f = model.bind(&tape, false);
        let iv = tape.constant(img.clone());
        let tv = tape.constant(txt.clone());
        f.fuse(&iv, &tv, &[4]).unwrap().value()
    };
    let base = run(&txt);
    for pos in 0..4 {
        let mut perturbed = txt.clone();
        perturbed.data_mut()[pos * 8 + 2] += 0.3;
        let out = run(&perturbed);
        assert_ne!(base.data(), out.data(), "token {pos} masked out of fusion");
    }
}

#[test]
fn deeper_fusion_adds_exactly_one_block_of_params() {
    let base = Model::new(tiny_cfg(), 16).unwrap();
    let mut deeper_cfg = tiny_cfg();
    deeper_cfg.fusion.blocks = 2;
    let deeper = Model::new(deeper_cfg, 16).unwrap();
    assert_eq!(
        deeper.params.scalar_count() - base.params.scalar_count(),
        block_param_count(8)
    );
}

#[test]
fn export_reload_bitwise_parity() {
    let model = Model::new(tiny_cfg(), 17).unwrap();
    let mut rng = Rng::new(18);
    let images = random_images(2, 8, &mut rng);
    let ids = random_texts(2, 6, 16, &mut rng);

    let embed = |m: &Model| {
        let tape = Tape::no_grad();
        let f = m.bind(&tape, false);
        let (y, _) = f.encode_image(&images).unwrap();
        let (z, _, _) = f.encode_text(&ids).unwrap();
        (y.value(), z.value())
    };
    let (y0, z0) = embed(&model);

    let dir = std::env::temp_dir().join(format!("ito_ckpt_test_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("dual.ito");
    checkpoint::export_dual_encoder(&model.params, &path).unwrap();
    let loaded = checkpoint::load(&path).unwrap();
    assert!(loaded.names().all(|n| !n.starts_with("fusion.")));
    assert!(loaded.scalar_count() < model.params.scalar_count());
    let reloaded = Model::from_parts(tiny_cfg(), loaded).unwrap();
    let (y1, z1) = embed(&reloaded);
    assert_eq!(y0.data(), y1.data());
    assert_eq!(z0.data(), z1.data());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn full_checkpoint_roundtrip_exact() {
    let model = Model::new(tiny_cfg(), 19).unwrap();
    let dir = std::env::temp_dir().join(format!("ito_ckpt_rt_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("full.ito");
    checkpoint::save(&model.params, &path).unwrap();
    let loaded = checkpoint::load(&path).unwrap();
    assert_eq!(loaded.len(), model.params.len());
    for (name, tensor) in model.params.iter() {
        let got = loaded.get(name).unwrap();
        assert_eq!(got.shape(), tensor.shape(), "{name}");
        assert_eq!(got.data(), tensor.data(), "{name}");
    }
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn same_seed_same_init() {
    let a = Model::new(tiny_cfg(), 42).unwrap();
    let b = Model::new(tiny_cfg(), 42).unwrap();
    for ((na, ta), (nb, tb)) in a.params.iter().zip(b.params.iter()) {
        assert_eq!(na, nb);
        assert_eq!(ta.data(), tb.data());
    }
}
