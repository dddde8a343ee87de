//! Procedural paired dataset: rendered scenes, clause captions, and
//! deterministic multi-view batch assembly.

pub mod augment;
pub mod scene;
pub mod vocab;

use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

pub use augment::{augment_image, augment_text, TextMode};
pub use scene::{render, SceneSpec, IMAGE_SIZE, NUM_CLASSES};
pub use vocab::{Vocab, BOS_ID, COLOR_SYNONYMS, EOT_ID, PAD_ID, QUADRANTS};

/// Fixed stream labels so dataset sampling, image views, and text views draw
/// from independent substreams of the run seed.
const STREAM_SCENE: u64 = 0x7363656e65; // "scene"
const STREAM_IMG_VIEW: u64 = 0x696d67; // "img"
const STREAM_TXT_VIEW: u64 = 0x747874; // "txt"

#[derive(Debug, Clone)]
pub struct Sample {
    pub scene: SceneSpec,
    pub image: Tensor, // [3, 32, 32]
    pub label: u16,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub seed: u64,
    pub samples: Vec<Sample>,
    pub vocab: Vocab,
}

/// One batch of augmented views.
///
/// `images` is [B * V_I, 3, 32, 32] with view-major rows (sample 0's views,
/// then sample 1's, ...); `texts` holds B * V_T padded token rows the same
/// way. `view_image(i)` / `view_text(j)` slice out a single view index across
/// the batch for the per-view encoder passes.
#[derive(Debug, Clone)]
pub struct ViewBatch {
    pub images: Tensor,
    pub texts: Vec<u16>,
    pub labels: Vec<u16>,
    pub sample_ids: Vec<usize>,
    pub v_i: usize,
    pub v_t: usize,
    pub max_len: usize,
}

impl ViewBatch {
    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }

    /// Image view `v` for every sample: [B, 3, 32, 32].
    pub fn view_image(&self, v: usize) -> Tensor {
        assert!(v < self.v_i);
        let b = self.batch_size();
        let px = 3 * IMAGE_SIZE * IMAGE_SIZE;
        let mut data = Vec::with_capacity(b * px);
        for n in 0..b {
            let row = (n * self.v_i + v) * px;
            data.extend_from_slice(&self.images.data()[row..row + px]);
        }
        Tensor::new(vec![b, 3, IMAGE_SIZE, IMAGE_SIZE], data)
    }

    /// Text view `v` for every sample: B rows of `max_len` ids, flattened.
    pub fn view_text(&self, v: usize) -> Vec<u16> {
        assert!(v < self.v_t);
        let b = self.batch_size();
        let mut out = Vec::with_capacity(b * self.max_len);
        for n in 0..b {
            let row = (n * self.v_t + v) * self.max_len;
            out.extend_from_slice(&self.texts[row..row + self.max_len]);
        }
        out
    }
}

/// Generate `n_samples` scene/image pairs, fully determined by `seed`.
/// Each sample draws from its own derived stream, so generation order (or a
/// future parallel implementation) cannot change the result.
pub fn generate_dataset(seed: u64, n_samples: usize) -> Result<Dataset> {
    if n_samples == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    let vocab = Vocab::new();
    let mut samples = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let mut rng = Rng::derive(seed ^ STREAM_SCENE, i as u64);
        let scene = SceneSpec::sample(&mut rng);
        let image = render(&scene);
        let label = scene.primary_class();
        samples.push(Sample { scene, image, label });
    }
    Ok(Dataset { seed, samples, vocab })
}

/// Assemble the epoch's batches: shuffle keyed by (seed, epoch), drop the
/// partial remainder, and draw every view from a stream derived from
/// (sample id, view slot, epoch) so view noise is independent across slots
/// and reproducible in isolation.
pub fn make_batches(
    ds: &Dataset,
    batch_size: usize,
    v_i: usize,
    v_t: usize,
    max_len: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<ViewBatch>> {
    if batch_size == 0 || batch_size > ds.samples.len() {
        return Err(Error::Config(format!(
            "batch size {batch_size} invalid for dataset of {}",
            ds.samples.len()
        )));
    }
    if v_i == 0 || v_t == 0 {
        return Err(Error::Config("need at least one view per modality".into()));
    }
    let mut order_rng = Rng::derive(seed, epoch as u64);
    let order = order_rng.permutation(ds.samples.len());
    let n_batches = ds.samples.len() / batch_size;
    let px = 3 * IMAGE_SIZE * IMAGE_SIZE;

    let mut batches = Vec::with_capacity(n_batches);
    for b in 0..n_batches {
        let ids = &order[b * batch_size..(b + 1) * batch_size];
        let mut images = Vec::with_capacity(batch_size * v_i * px);
        let mut texts = Vec::with_capacity(batch_size * v_t * max_len);
        let mut labels = Vec::with_capacity(batch_size);
        for &id in ids {
            let sample = &ds.samples[id];
            labels.push(sample.label);
            for v in 0..v_i {
                let mut rng = Rng::derive(
                    seed ^ STREAM_IMG_VIEW,
                    (id as u64) << 20 | (v as u64) << 12 | epoch as u64,
                );
                let view = augment_image(&sample.image, sample.scene.primary_bbox(), &mut rng);
                images.extend_from_slice(view.data());
            }
            for v in 0..v_t {
                // View 0 is the identity caption; extra views are
                // sub-description samples.
                let mode = if v == 0 { TextMode::Full } else { TextMode::Sub };
                let mut rng = Rng::derive(
                    seed ^ STREAM_TXT_VIEW,
                    (id as u64) << 20 | (v as u64) << 12 | epoch as u64,
                );
                let row =
                    augment_text(&sample.scene.clauses(), mode, &ds.vocab, max_len, &mut rng)?;
                texts.extend_from_slice(&row);
            }
        }
        batches.push(ViewBatch {
            images: Tensor::new(vec![batch_size * v_i, 3, IMAGE_SIZE, IMAGE_SIZE], images),
            texts,
            labels,
            sample_ids: ids.to_vec(),
            v_i,
            v_t,
            max_len,
        });
    }
    Ok(batches)
}

/// Write the human-readable manifest: seed, size, vocabulary, class names.
pub fn write_manifest(ds: &Dataset, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "seed {}", ds.seed)?;
    writeln!(f, "size {}", ds.samples.len())?;
    writeln!(f, "vocab {}", ds.vocab.len())?;
    for (i, w) in ds.vocab.words().enumerate() {
        writeln!(f, "token {i} {w}")?;
    }
    writeln!(f, "classes {}", NUM_CLASSES)?;
    for c in 0..NUM_CLASSES {
        writeln!(f, "class {c} {}", SceneSpec::class_name(c as u16))?;
    }
    Ok(())
}

/// Raw binary dump: per sample, image floats LE, token ids u16 LE (identity
/// caption padded to `max_len`), label u16 LE.
pub fn write_raw_dump(ds: &Dataset, max_len: usize, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut rng = Rng::new(0); // Full mode consumes no randomness
    for s in &ds.samples {
        for v in s.image.data() {
            f.write_all(&v.to_le_bytes())?;
        }
        let ids = augment_text(&s.scene.clauses(), TextMode::Full, &ds.vocab, max_len, &mut rng)?;
        for id in ids {
            f.write_all(&id.to_le_bytes())?;
        }
        f.write_all(&s.label.to_le_bytes())?;
    }
    Ok(())
}
