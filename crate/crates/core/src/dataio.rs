//! Dataset model and on-disk formats.
//!
//! A dataset is a manifest (one JSON object per line) plus one binary
//! embedding file per sample per modality. The first manifest line is a
//! header carrying the class counts and provenance notes; every following
//! line describes one sample. Embedding files are a fixed 16-byte header
//! (magic `EMB1`, version, T, D as little-endian u32) followed by T*D
//! little-endian f32 values in row-major order.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"EMB1";
pub const EMBEDDING_VERSION: u32 = 1;

/// Default provenance notes recorded by the synthetic generator: one frame
/// kept every 30 frames (about one second of video), 16 kHz audio.
pub const DEFAULT_FRAME_STRIDE: u32 = 30;
pub const DEFAULT_AUDIO_SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Audio,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Visual, Modality::Audio, Modality::Text];

    pub fn name(&self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Audio => "audio",
            Modality::Text => "text",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Unlabeled,
    Dev,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Unlabeled => "unlabeled",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "unlabeled" => Ok(Split::Unlabeled),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split '{other}'"))),
        }
    }
}

/// One modality's T x D embedding matrix.
#[derive(Debug, Clone)]
pub struct EmbeddingSequence {
    pub modality: Modality,
    pub data: Array2<f64>,
}

impl EmbeddingSequence {
    pub fn new(modality: Modality, data: Array2<f64>) -> Result<Self> {
        let (t, d) = data.dim();
        if t < 1 || d < 1 {
            return Err(Error::InvalidArgument(format!(
                "embedding sequence must be at least 1x1, got {t}x{d}"
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::DataFormat(format!(
                "{} embedding contains non-finite values",
                modality.name()
            )));
        }
        Ok(EmbeddingSequence { modality, data })
    }

    pub fn steps(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }
}

/// Frame indices kept when subsampling a clip: every `stride`-th frame
/// starting at 0, restricted to `[0, n_frames)`.
pub fn sample_frame_indices(n_frames: usize, stride: usize) -> Result<Vec<usize>> {
    if stride < 1 {
        return Err(Error::InvalidArgument("frame stride must be >= 1".into()));
    }
    Ok((0..n_frames).step_by(stride).collect())
}

/// Arithmetic mean over time: column j of the result is the mean of
/// column j across all rows.
pub fn mean_pool_time(data: &Array2<f64>) -> Result<Array2<f64>> {
    let (t, d) = data.dim();
    if t == 0 {
        return Err(Error::InvalidArgument(
            "cannot mean-pool an empty sequence".into(),
        ));
    }
    let mut out = Array2::zeros((1, d));
    for row in data.rows() {
        for (j, &v) in row.iter().enumerate() {
            out[(0, j)] += v;
        }
    }
    out.mapv_inplace(|v| v / t as f64);
    Ok(out)
}

pub fn write_embedding(path: &Path, data: &Array2<f64>) -> Result<()> {
    let (t, d) = data.dim();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(EMBEDDING_MAGIC)?;
    w.write_all(&EMBEDDING_VERSION.to_le_bytes())?;
    w.write_all(&(t as u32).to_le_bytes())?;
    w.write_all(&(d as u32).to_le_bytes())?;
    for &v in data.iter() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an embedding file, validating the header, the payload size, the
/// declared shape, and finiteness of every value.
pub fn read_embedding(path: &Path, expected_shape: (usize, usize)) -> Result<Array2<f64>> {
    let mut bytes = Vec::new();
    File::open(path)
        .map_err(|e| Error::DataFormat(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    if bytes.len() < 16 {
        return Err(Error::DataFormat(format!(
            "{}: truncated header ({} bytes)",
            path.display(),
            bytes.len()
        )));
    }
    if &bytes[0..4] != EMBEDDING_MAGIC {
        return Err(Error::DataFormat(format!(
            "{}: bad magic {:?}",
            path.display(),
            &bytes[0..4]
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != EMBEDDING_VERSION {
        return Err(Error::DataFormat(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let t = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if (t, d) != expected_shape {
        return Err(Error::DataFormat(format!(
            "{}: file declares {t}x{d} but manifest declares {}x{}",
            path.display(),
            expected_shape.0,
            expected_shape.1
        )));
    }
    let expected_payload = t
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::DataFormat(format!("{}: shape overflow", path.display())))?;
    if bytes.len() - 16 != expected_payload {
        return Err(Error::DataFormat(format!(
            "{}: payload holds {} bytes, expected {expected_payload} for {t}x{d}",
            path.display(),
            bytes.len() - 16
        )));
    }
    let mut data = Array2::zeros((t, d));
    for (idx, chunk) in bytes[16..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::DataFormat(format!(
                "{}: non-finite value at element {idx}",
                path.display()
            )));
        }
        data[(idx / d, idx % d)] = v as f64;
    }
    Ok(data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassCounts {
    pub emotion: usize,
    pub intent: usize,
}

/// First manifest line: class counts plus provenance notes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub class_counts: ClassCounts,
    pub frame_stride: u32,
    pub audio_sample_rate: u32,
}

/// One sample descriptor: label fields, relative embedding paths, and the
/// declared T x D shape of each file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub split: Split,
    pub emotion_label: Option<usize>,
    pub intent_label: Option<usize>,
    pub visual_path: String,
    pub audio_path: String,
    pub text_path: String,
    pub visual_shape: [usize; 2],
    pub audio_shape: [usize; 2],
    pub text_shape: [usize; 2],
    pub is_pseudo: bool,
}

impl ManifestRecord {
    pub fn path_for(&self, modality: Modality) -> &str {
        match modality {
            Modality::Visual => &self.visual_path,
            Modality::Audio => &self.audio_path,
            Modality::Text => &self.text_path,
        }
    }

    pub fn shape_for(&self, modality: Modality) -> (usize, usize) {
        let s = match modality {
            Modality::Visual => self.visual_shape,
            Modality::Audio => self.audio_shape,
            Modality::Text => self.text_shape,
        };
        (s[0], s[1])
    }

    pub fn has_labels(&self) -> bool {
        self.emotion_label.is_some() && self.intent_label.is_some()
    }
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub records: Vec<ManifestRecord>,
    /// Directory that record paths are relative to.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn record(&self, id: &str) -> Option<&ManifestRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn validate_record(&self, rec: &ManifestRecord) -> Result<()> {
        let cc = &self.header.class_counts;
        if let Some(e) = rec.emotion_label {
            if e >= cc.emotion {
                return Err(Error::DataFormat(format!(
                    "record '{}': emotion label {e} out of range (C_e = {})",
                    rec.id, cc.emotion
                )));
            }
        }
        if let Some(i) = rec.intent_label {
            if i >= cc.intent {
                return Err(Error::DataFormat(format!(
                    "record '{}': intent label {i} out of range (C_i = {})",
                    rec.id, cc.intent
                )));
            }
        }
        match rec.split {
            Split::Train => {
                if !rec.has_labels() {
                    return Err(Error::DataFormat(format!(
                        "record '{}': train records must carry both labels",
                        rec.id
                    )));
                }
            }
            Split::Unlabeled => {
                if !rec.is_pseudo && (rec.emotion_label.is_some() || rec.intent_label.is_some()) {
                    return Err(Error::DataFormat(format!(
                        "record '{}': unlabeled records must not carry labels",
                        rec.id
                    )));
                }
            }
            Split::Dev | Split::Test => {}
        }
        if rec.is_pseudo && !rec.has_labels() {
            return Err(Error::DataFormat(format!(
                "record '{}': pseudo-labeled records must carry both labels",
                rec.id
            )));
        }
        for modality in Modality::ALL {
            let rel = rec.path_for(modality);
            let path = self.resolve(rel);
            let declared = rec.shape_for(modality);
            if declared.0 < 1 || declared.1 < 1 {
                return Err(Error::DataFormat(format!(
                    "record '{}': declared {} shape {}x{} is degenerate",
                    rec.id,
                    modality.name(),
                    declared.0,
                    declared.1
                )));
            }
            let meta = fs::metadata(&path).map_err(|_| {
                Error::DataFormat(format!(
                    "record '{}': missing embedding file {}",
                    rec.id,
                    path.display()
                ))
            })?;
            let expected = 16 + declared.0 as u64 * declared.1 as u64 * 4;
            if meta.len() != expected {
                return Err(Error::DataFormat(format!(
                    "record '{}': {} is {} bytes, expected {expected} for shape {}x{}",
                    rec.id,
                    path.display(),
                    meta.len(),
                    declared.0,
                    declared.1
                )));
            }
        }
        Ok(())
    }
}

/// Loads and eagerly validates a manifest: header first, then every record
/// (unique ids, label ranges, split/label consistency, referenced files
/// present with the declared sizes).
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = File::open(path)
        .map_err(|e| Error::DataFormat(format!("cannot open manifest {}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));

    let mut lines = reader.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::DataFormat("manifest is empty".into()))??;
    let header: ManifestHeader = serde_json::from_str(&header_line)
        .map_err(|e| Error::DataFormat(format!("bad manifest header: {e}")))?;
    if header.class_counts.emotion < 2 || header.class_counts.intent < 2 {
        return Err(Error::DataFormat(format!(
            "class counts must be >= 2, got C_e={} C_i={}",
            header.class_counts.emotion, header.class_counts.intent
        )));
    }

    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| {
            Error::DataFormat(format!("manifest line {}: {e}", lineno + 2))
        })?;
        records.push(rec);
    }

    let manifest = DatasetManifest {
        header,
        records,
        root,
    };

    let mut seen = HashSet::new();
    for rec in &manifest.records {
        if !seen.insert(rec.id.clone()) {
            return Err(Error::DataFormat(format!("duplicate record id '{}'", rec.id)));
        }
        manifest.validate_record(rec)?;
    }
    Ok(manifest)
}

/// Writes a manifest as one JSON object per line (header first). The
/// written file loads back to an identical manifest.
pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &manifest.header)
        .map_err(|e| Error::DataFormat(format!("serialize header: {e}")))?;
    w.write_all(b"\n")?;
    for rec in &manifest.records {
        serde_json::to_writer(&mut w, rec)
            .map_err(|e| Error::DataFormat(format!("serialize record '{}': {e}", rec.id)))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Per-modality input dimensions, uniform across a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityDims {
    pub visual: usize,
    pub audio: usize,
    pub text: usize,
}

impl ModalityDims {
    pub fn get(&self, modality: Modality) -> usize {
        match modality {
            Modality::Visual => self.visual,
            Modality::Audio => self.audio,
            Modality::Text => self.text,
        }
    }
}

/// A fully loaded sample: one matrix per modality plus labels.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub id: String,
    pub split: Split,
    pub emotion_label: Option<usize>,
    pub intent_label: Option<usize>,
    pub is_pseudo: bool,
    pub visual: Array2<f64>,
    pub audio: Array2<f64>,
    pub text: Array2<f64>,
}

impl LoadedSample {
    pub fn sequence(&self, modality: Modality) -> &Array2<f64> {
        match modality {
            Modality::Visual => &self.visual,
            Modality::Audio => &self.audio,
            Modality::Text => &self.text,
        }
    }
}

/// An in-memory dataset in manifest record order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub emotion_classes: usize,
    pub intent_classes: usize,
    pub input_dims: ModalityDims,
    pub samples: Vec<LoadedSample>,
}

impl Dataset {
    pub fn samples_in(&self, split: Split) -> impl Iterator<Item = &LoadedSample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn indices_in(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Loads every embedding referenced by the manifest. With `average_inputs`
/// set, each sequence is mean-pooled over time at load so downstream
/// encoders see length-1 sequences.
pub fn load_dataset(manifest: &DatasetManifest, average_inputs: bool) -> Result<Dataset> {
    let mut dims: Option<ModalityDims> = None;
    let mut samples = Vec::with_capacity(manifest.records.len());
    for rec in &manifest.records {
        let mut mats = Vec::with_capacity(3);
        for modality in Modality::ALL {
            let declared = rec.shape_for(modality);
            let mut data = read_embedding(&manifest.resolve(rec.path_for(modality)), declared)
                .map_err(|e| Error::DataFormat(format!("record '{}': {e}", rec.id)))?;
            if average_inputs {
                data = mean_pool_time(&data)?;
            }
            let seq = EmbeddingSequence::new(modality, data)
                .map_err(|e| Error::DataFormat(format!("record '{}': {e}", rec.id)))?;
            mats.push(seq.data);
        }
        let sample_dims = ModalityDims {
            visual: mats[0].ncols(),
            audio: mats[1].ncols(),
            text: mats[2].ncols(),
        };
        match dims {
            None => dims = Some(sample_dims),
            Some(d) if d == sample_dims => {}
            Some(d) => {
                return Err(Error::DimMismatch(format!(
                    "record '{}' has embedding dims {:?}, dataset uses {:?}",
                    rec.id, sample_dims, d
                )))
            }
        }
        let mut it = mats.into_iter();
        samples.push(LoadedSample {
            id: rec.id.clone(),
            split: rec.split,
            emotion_label: rec.emotion_label,
            intent_label: rec.intent_label,
            is_pseudo: rec.is_pseudo,
            visual: it.next().unwrap(),
            audio: it.next().unwrap(),
            text: it.next().unwrap(),
        });
    }
    let input_dims = dims.ok_or_else(|| Error::DataFormat("manifest has no records".into()))?;
    Ok(Dataset {
        emotion_classes: manifest.header.class_counts.emotion,
        intent_classes: manifest.header.class_counts.intent,
        input_dims,
        samples,
    })
}

/// Parameters for the synthetic dataset generator.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub n_train: usize,
    pub n_unlabeled: usize,
    pub n_test: usize,
    pub emotion_classes: usize,
    pub intent_classes: usize,
    pub dim: usize,
    pub separation: f64,
    pub seed: u64,
}

/// Round-robin class assignment: the k-th sample of a split lands in cell
/// `k mod (C_e * C_i)`, so every (emotion, intent) pair is populated within
/// the first `C_e * C_i` samples when counts allow.
pub fn round_robin_labels(index: usize, emotion_classes: usize, intent_classes: usize) -> (usize, usize) {
    let cell = index % (emotion_classes * intent_classes);
    (cell / intent_classes, cell % intent_classes)
}

/// splitmix64-style mixing of seed components into one derived seed.
pub(crate) fn mix_seed(parts: &[u64]) -> u64 {
    let mut state = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        state = state.wrapping_add(p).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        state ^= state >> 31;
    }
    state
}

/// Additive cluster mean: an emotion component plus an intent component,
/// each a fixed random direction per (class, modality), scaled by
/// `separation`. The additive split keeps both tasks separable on their
/// own marginals.
fn cluster_mean(
    seed: u64,
    emotion: usize,
    intent: usize,
    modality: Modality,
    dim: usize,
    separation: f64,
) -> Vec<f64> {
    let m_idx = Modality::ALL.iter().position(|m| *m == modality).unwrap() as u64;
    let component = |task_tag: u64, class: usize| -> Vec<f64> {
        let derived = mix_seed(&[seed, task_tag, class as u64, m_idx]);
        let mut rng = ChaCha20Rng::seed_from_u64(derived);
        let normal = Normal::new(0.0, 1.0).unwrap();
        (0..dim).map(|_| normal.sample(&mut rng)).collect()
    };
    let e_part = component(1, emotion);
    let i_part = component(2, intent);
    e_part
        .iter()
        .zip(&i_part)
        .map(|(a, b)| separation * (a + b))
        .collect()
}

/// Ground-truth labels written next to a synthetic manifest so unlabeled
/// samples can be audited.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthRecord {
    pub id: String,
    pub emotion_label: usize,
    pub intent_label: usize,
}

pub fn load_truth(path: &Path) -> Result<Vec<TruthRecord>> {
    let file = File::open(path)
        .map_err(|e| Error::DataFormat(format!("cannot open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::DataFormat(format!("truth record: {e}")))?,
        );
    }
    Ok(out)
}

/// Generates a Gaussian-cluster dataset under `out_dir`: a manifest, one
/// embedding file per sample per modality, and a `truth.jsonl` recording
/// the generating labels of every sample (including unlabeled ones).
///
/// Each sample's rows are drawn around a per-(emotion, intent, modality)
/// mean that depends only on those values and the seed, scaled by
/// `separation`. Identical specs produce byte-identical files.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, out_dir: &Path) -> Result<DatasetManifest> {
    if spec.emotion_classes < 2 || spec.intent_classes < 2 {
        return Err(Error::InvalidArgument(
            "synthetic dataset needs at least 2 classes per task".into(),
        ));
    }
    if spec.dim < 2 {
        return Err(Error::InvalidArgument(
            "synthetic dataset needs dim >= 2".into(),
        ));
    }
    fs::create_dir_all(out_dir.join("embeddings"))?;

    let mut rng = ChaCha20Rng::seed_from_u64(mix_seed(&[spec.seed, 0x5a5a]));
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut records = Vec::new();
    let mut truths = Vec::new();

    let groups: [(Split, &str, usize); 3] = [
        (Split::Train, "train", spec.n_train),
        (Split::Unlabeled, "unlab", spec.n_unlabeled),
        (Split::Test, "test", spec.n_test),
    ];
    for (split, prefix, count) in groups {
        for k in 0..count {
            let (emotion, intent) =
                round_robin_labels(k, spec.emotion_classes, spec.intent_classes);
            let id = format!("{prefix}_{k:06}");
            let mut paths = Vec::new();
            let mut shapes = Vec::new();
            for modality in Modality::ALL {
                let steps = rng.gen_range(2..=6usize);
                let mean = cluster_mean(
                    spec.seed,
                    emotion,
                    intent,
                    modality,
                    spec.dim,
                    spec.separation,
                );
                let mut data = Array2::zeros((steps, spec.dim));
                for t in 0..steps {
                    for (j, &m) in mean.iter().enumerate() {
                        // Store at f32 precision so the written file
                        // round-trips the in-memory values exactly.
                        data[(t, j)] = (m + normal.sample(&mut rng)) as f32 as f64;
                    }
                }
                let rel = format!("embeddings/{id}_{}.emb", modality.name());
                write_embedding(&out_dir.join(&rel), &data)?;
                paths.push(rel);
                shapes.push([steps, spec.dim]);
            }
            let labeled = split != Split::Unlabeled;
            records.push(ManifestRecord {
                id: id.clone(),
                split,
                emotion_label: labeled.then_some(emotion),
                intent_label: labeled.then_some(intent),
                visual_path: paths[0].clone(),
                audio_path: paths[1].clone(),
                text_path: paths[2].clone(),
                visual_shape: shapes[0],
                audio_shape: shapes[1],
                text_shape: shapes[2],
                is_pseudo: false,
            });
            truths.push(TruthRecord {
                id,
                emotion_label: emotion,
                intent_label: intent,
            });
        }
    }

    let manifest = DatasetManifest {
        header: ManifestHeader {
            class_counts: ClassCounts {
                emotion: spec.emotion_classes,
                intent: spec.intent_classes,
            },
            frame_stride: DEFAULT_FRAME_STRIDE,
            audio_sample_rate: DEFAULT_AUDIO_SAMPLE_RATE,
        },
        records,
        root: out_dir.to_path_buf(),
    };
    save_manifest(&manifest, &out_dir.join("manifest.jsonl"))?;

    let mut w = BufWriter::new(File::create(out_dir.join("truth.jsonl"))?);
    for t in &truths {
        serde_json::to_writer(&mut w, t)
            .map_err(|e| Error::DataFormat(format!("serialize truth: {e}")))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;
    use tempfile::TempDir;

    #[test]
    fn frame_indices_every_thirty() {
        assert_eq!(sample_frame_indices(90, 30).unwrap(), vec![0, 30, 60]);
        assert_eq!(sample_frame_indices(1, 30).unwrap(), vec![0]);
        assert_eq!(sample_frame_indices(0, 30).unwrap(), Vec::<usize>::new());
        assert_eq!(sample_frame_indices(91, 30).unwrap(), vec![0, 30, 60, 90]);
    }

    #[test]
    fn frame_indices_reject_zero_stride() {
        assert!(sample_frame_indices(10, 0).is_err());
    }

    #[test]
    fn mean_pool_simple_cases() {
        let pooled = mean_pool_time(&array![[1.0, 3.0], [3.0, 1.0]]).unwrap();
        assert_eq!(pooled, array![[2.0, 2.0]]);
        let single = mean_pool_time(&array![[5.0, 7.0]]).unwrap();
        assert_eq!(single, array![[5.0, 7.0]]);
    }

    #[test]
    fn mean_pool_matches_columnwise_summation_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let data = Array2::from_shape_fn((5, 4), |_| rng.gen_range(-3.0..3.0));
        let pooled = mean_pool_time(&data).unwrap();
        for j in 0..4 {
            let mut sum = 0.0;
            for i in 0..5 {
                sum += data[(i, j)];
            }
            assert!((pooled[(0, j)] - sum / 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_pool_rejects_empty() {
        assert!(mean_pool_time(&Array2::zeros((0, 3))).is_err());
    }

    #[test]
    fn embedding_sequence_enforces_shape_and_finiteness() {
        assert!(EmbeddingSequence::new(Modality::Visual, array![[1.0, 2.0]]).is_ok());
        assert!(EmbeddingSequence::new(Modality::Audio, Array2::zeros((0, 3))).is_err());
        assert!(EmbeddingSequence::new(Modality::Text, Array2::zeros((2, 0))).is_err());
        assert!(EmbeddingSequence::new(Modality::Visual, array![[f64::NAN]]).is_err());
        let seq = EmbeddingSequence::new(Modality::Audio, array![[1.0], [2.0]]).unwrap();
        assert_eq!((seq.steps(), seq.dim()), (2, 1));
    }

    #[test]
    fn embedding_round_trip_is_bit_exact() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("a.emb");
        let data = array![[1.5, -2.0]];
        write_embedding(&path, &data).unwrap();
        let back = read_embedding(&path, (1, 2)).unwrap();
        assert_eq!(back, data);

        // byte-level: writing what we read reproduces the file
        let original = fs::read(&path).unwrap();
        let path2 = dir.path().join("b.emb");
        write_embedding(&path2, &back).unwrap();
        assert_eq!(original, fs::read(&path2).unwrap());
    }

    #[test]
    fn embedding_truncation_is_rejected() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("short.emb");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(EMBEDDING_MAGIC);
        bytes.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&4u32.to_le_bytes());
        for _ in 0..7 {
            bytes.extend_from_slice(&1.0f32.to_le_bytes());
        }
        fs::write(&path, &bytes).unwrap();
        let err = read_embedding(&path, (2, 4)).unwrap_err();
        assert!(matches!(err, Error::DataFormat(_)), "{err}");
    }

    #[test]
    fn embedding_nan_is_rejected() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("nan.emb");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(EMBEDDING_MAGIC);
        bytes.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        let err = read_embedding(&path, (1, 2)).unwrap_err();
        assert!(err.to_string().contains("non-finite"), "{err}");
    }

    #[test]
    fn embedding_bad_magic_is_rejected() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("bad.emb");
        fs::write(&path, b"XXXX0000000000000000").unwrap();
        let err = read_embedding(&path, (1, 1)).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    fn tiny_manifest(dir: &Path) -> DatasetManifest {
        generate_synthetic_dataset(
            &SyntheticSpec {
                n_train: 3,
                n_unlabeled: 2,
                n_test: 1,
                emotion_classes: 2,
                intent_classes: 3,
                dim: 4,
                separation: 2.0,
                seed: 11,
            },
            dir,
        )
        .unwrap()
    }

    #[test]
    fn manifest_happy_path_loads_all_records() {
        let dir = TempDir::new().unwrap();
        tiny_manifest(dir.path());
        let manifest = load_manifest(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(manifest.records.len(), 6);
        assert_eq!(manifest.header.class_counts.emotion, 2);
        assert_eq!(manifest.records_in(Split::Unlabeled).count(), 2);
    }

    #[test]
    fn manifest_missing_file_names_the_file() {
        let dir = TempDir::new().unwrap();
        tiny_manifest(dir.path());
        let victim = dir.path().join("embeddings/train_000001_audio.emb");
        fs::remove_file(&victim).unwrap();
        let err = load_manifest(&dir.path().join("manifest.jsonl")).unwrap_err();
        assert!(
            err.to_string().contains("train_000001_audio.emb"),
            "error should name the missing file: {err}"
        );
    }

    #[test]
    fn manifest_label_out_of_range_names_the_record() {
        let dir = TempDir::new().unwrap();
        let manifest = tiny_manifest(dir.path());
        let mut bad = manifest.clone();
        bad.records[0].emotion_label = Some(bad.header.class_counts.emotion);
        let path = dir.path().join("bad.jsonl");
        save_manifest(&bad, &path).unwrap();
        let err = load_manifest(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("out of range"), "{msg}");
        assert!(msg.contains(&bad.records[0].id), "{msg}");
    }

    #[test]
    fn manifest_split_label_consistency_is_enforced() {
        let dir = TempDir::new().unwrap();
        let manifest = tiny_manifest(dir.path());

        // train records must carry both labels
        let mut bad = manifest.clone();
        bad.records[0].intent_label = None;
        let path = dir.path().join("train_missing.jsonl");
        save_manifest(&bad, &path).unwrap();
        assert!(load_manifest(&path).is_err());

        // unlabeled records must not carry labels unless pseudo
        let mut bad = manifest.clone();
        let idx = bad
            .records
            .iter()
            .position(|r| r.split == Split::Unlabeled)
            .unwrap();
        bad.records[idx].emotion_label = Some(0);
        let path = dir.path().join("unlabeled_labeled.jsonl");
        save_manifest(&bad, &path).unwrap();
        assert!(load_manifest(&path).is_err());

        // pseudo-labeled records must carry both labels
        let mut bad = manifest.clone();
        bad.records[idx].is_pseudo = true;
        let path = dir.path().join("pseudo_unlabeled.jsonl");
        save_manifest(&bad, &path).unwrap();
        assert!(load_manifest(&path).is_err());
    }

    #[test]
    fn manifest_duplicate_id_is_rejected() {
        let dir = TempDir::new().unwrap();
        let manifest = tiny_manifest(dir.path());
        let mut bad = manifest.clone();
        let dup = bad.records[0].clone();
        bad.records.push(dup);
        let path = dir.path().join("dup.jsonl");
        save_manifest(&bad, &path).unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn manifest_shape_mismatch_is_rejected() {
        let dir = TempDir::new().unwrap();
        let manifest = tiny_manifest(dir.path());
        let mut bad = manifest.clone();
        bad.records[2].visual_shape[1] += 1;
        let path = dir.path().join("shape.jsonl");
        save_manifest(&bad, &path).unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(err.to_string().contains(&bad.records[2].id), "{err}");
    }

    #[test]
    fn manifest_load_save_load_is_a_fixed_point() {
        let dir = TempDir::new().unwrap();
        tiny_manifest(dir.path());
        let path1 = dir.path().join("manifest.jsonl");
        let m1 = load_manifest(&path1).unwrap();
        let path2 = dir.path().join("copy.jsonl");
        save_manifest(&m1, &path2).unwrap();
        let m2 = load_manifest(&path2).unwrap();
        assert_eq!(m1.header, m2.header);
        assert_eq!(m1.records, m2.records);
        // and byte-wise the two serializations agree
        let b1 = fs::read(&path1).unwrap();
        let b2 = fs::read(&path2).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn manifest_rejects_unknown_fields() {
        let dir = TempDir::new().unwrap();
        tiny_manifest(dir.path());
        let path = dir.path().join("manifest.jsonl");
        let mut contents = fs::read_to_string(&path).unwrap();
        contents = contents.replacen("\"is_pseudo\":false", "\"is_pseudo\":false,\"extra\":1", 1);
        fs::write(&path, contents).unwrap();
        assert!(load_manifest(&path).is_err());
    }

    #[test]
    fn synthetic_empty_spec_yields_empty_manifest() {
        let dir = TempDir::new().unwrap();
        let manifest = generate_synthetic_dataset(
            &SyntheticSpec {
                n_train: 0,
                n_unlabeled: 0,
                n_test: 0,
                emotion_classes: 2,
                intent_classes: 2,
                dim: 2,
                separation: 1.0,
                seed: 1,
            },
            dir.path(),
        )
        .unwrap();
        assert!(manifest.records.is_empty());
    }

    #[test]
    fn synthetic_rejects_degenerate_class_counts() {
        let dir = TempDir::new().unwrap();
        let err = generate_synthetic_dataset(
            &SyntheticSpec {
                n_train: 1,
                n_unlabeled: 0,
                n_test: 0,
                emotion_classes: 1,
                intent_classes: 2,
                dim: 4,
                separation: 1.0,
                seed: 1,
            },
            dir.path(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn synthetic_is_deterministic_per_seed() {
        let spec = SyntheticSpec {
            n_train: 4,
            n_unlabeled: 2,
            n_test: 2,
            emotion_classes: 2,
            intent_classes: 2,
            dim: 3,
            separation: 1.5,
            seed: 99,
        };
        let d1 = TempDir::new().unwrap();
        let d2 = TempDir::new().unwrap();
        generate_synthetic_dataset(&spec, d1.path()).unwrap();
        generate_synthetic_dataset(&spec, d2.path()).unwrap();
        let mut paths: Vec<_> = walk(d1.path());
        paths.sort();
        assert!(!paths.is_empty());
        for rel in paths {
            let b1 = fs::read(d1.path().join(&rel)).unwrap();
            let b2 = fs::read(d2.path().join(&rel)).unwrap();
            assert_eq!(b1, b2, "file {rel:?} differs between identical seeds");
        }
    }

    fn walk(root: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for entry in fs::read_dir(&dir).unwrap() {
                let path = entry.unwrap().path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    out.push(path.strip_prefix(root).unwrap().to_path_buf());
                }
            }
        }
        out
    }

    #[test]
    fn synthetic_round_robin_covers_every_cell() {
        for k in 0..6 {
            let (e, i) = round_robin_labels(k, 2, 3);
            assert_eq!(e, (k % 6) / 3);
            assert_eq!(i, k % 3);
        }
        let mut seen = HashSet::new();
        for k in 0..6 {
            seen.insert(round_robin_labels(k, 2, 3));
        }
        assert_eq!(seen.len(), 6);
    }

    #[test]
    fn synthetic_clusters_separate_under_nearest_centroid_oracle() {
        let dir = TempDir::new().unwrap();
        let manifest = generate_synthetic_dataset(
            &SyntheticSpec {
                n_train: 600,
                n_unlabeled: 0,
                n_test: 0,
                emotion_classes: 7,
                intent_classes: 9,
                dim: 8,
                separation: 8.0,
                seed: 5,
            },
            dir.path(),
        )
        .unwrap();
        let dataset = load_dataset(&manifest, true).unwrap();

        // nearest-class-mean on concatenated pooled embeddings
        let features: Vec<Vec<f64>> = dataset
            .samples
            .iter()
            .map(|s| {
                s.visual
                    .iter()
                    .chain(s.audio.iter())
                    .chain(s.text.iter())
                    .cloned()
                    .collect()
            })
            .collect();
        let dim = features[0].len();
        let mut means = vec![vec![0.0; dim]; 7];
        let mut counts = vec![0usize; 7];
        for (s, f) in dataset.samples.iter().zip(&features) {
            let e = s.emotion_label.unwrap();
            counts[e] += 1;
            for (acc, v) in means[e].iter_mut().zip(f) {
                *acc += v;
            }
        }
        for (m, &c) in means.iter_mut().zip(&counts) {
            for v in m.iter_mut() {
                *v /= c as f64;
            }
        }
        let mut correct = 0usize;
        for (s, f) in dataset.samples.iter().zip(&features) {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (cls, m) in means.iter().enumerate() {
                let d: f64 = m.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best_d {
                    best_d = d;
                    best = cls;
                }
            }
            if best == s.emotion_label.unwrap() {
                correct += 1;
            }
        }
        let accuracy = correct as f64 / dataset.samples.len() as f64;
        assert!(accuracy >= 0.99, "nearest-centroid accuracy {accuracy}");
    }

    #[test]
    fn load_dataset_averages_when_requested() {
        let dir = TempDir::new().unwrap();
        let manifest = tiny_manifest(dir.path());
        let pooled = load_dataset(&manifest, true).unwrap();
        assert!(pooled.samples.iter().all(|s| s.visual.nrows() == 1
            && s.audio.nrows() == 1
            && s.text.nrows() == 1));
        let full = load_dataset(&manifest, false).unwrap();
        assert!(full.samples.iter().any(|s| s.visual.nrows() > 1));
        // pooled values equal the time-mean of the full sequences
        let p = &pooled.samples[0].visual;
        let f = mean_pool_time(&full.samples[0].visual).unwrap();
        assert_eq!(p, &f);
    }

    proptest! {
        #[test]
        fn frame_index_count_matches_closed_form(n in 1usize..500, stride in 1usize..60) {
            let indices = sample_frame_indices(n, stride).unwrap();
            prop_assert_eq!(indices.len(), (n - 1) / stride + 1);
            prop_assert!(indices.windows(2).all(|w| w[1] > w[0]));
            prop_assert!(indices.iter().all(|&i| i < n));
        }

        #[test]
        fn mean_pool_is_permutation_invariant(rows in 1usize..6, cols in 1usize..5, seed in 0u64..1000) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let data = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-5.0..5.0));
            let mut order: Vec<usize> = (0..rows).collect();
            // deterministic shuffle
            for i in (1..rows).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            let mut shuffled = Array2::zeros((rows, cols));
            for (dst, &src) in order.iter().enumerate() {
                shuffled.row_mut(dst).assign(&data.row(src));
            }
            let a = mean_pool_time(&data).unwrap();
            let b = mean_pool_time(&shuffled).unwrap();
            for j in 0..cols {
                prop_assert!((a[(0, j)] - b[(0, j)]).abs() < 1e-9);
            }
        }
    }
}
