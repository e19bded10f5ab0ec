//! Network definitions and checkpoint persistence.
//!
//! The classifier is a small CNN over 1×80×64 feature grids:
//! conv(3×3, 32) → relu → pool2 → conv(3×3, 64) → relu → pool2 → flatten →
//! dense(128) → relu → dense(K). The autoencoder mirrors it: a conv encoder
//! ending in a *linear* bottleneck of `latent_dim` (no activation), and a
//! decoder that upsamples back to 80×64 through two nearest-upsample + conv
//! blocks and squashes the output with a sigmoid so decoded grids always sit
//! in (0, 1).
//!
//! Parameters are held as `f64` but rounded through `f32` at initialization
//! and after every optimizer step, matching the 32-bit checkpoint payload so
//! a save/load round trip is bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureGrid, FRAMES, MELS};
use crate::graph::{DiffGraph, GraphError, NodeId, Padding, Tensor};
use crate::rng::SeededRng;

/// Architecture tag stored in classifier checkpoints.
pub const CLASSIFIER_ARCH: &str = "classifier-cnn-v1";
/// Architecture tag stored in autoencoder checkpoints.
pub const AUTOENCODER_ARCH: &str = "autoencoder-conv-v1";

/// Default bottleneck width.
pub const DEFAULT_LATENT_DIM: usize = 128;

// Spatial sizes after the two pool-2 stages of the 80×64 input.
const POOLED_H: usize = MELS / 4; // 20
const POOLED_W: usize = FRAMES / 4; // 16
const CLF_FLAT: usize = 64 * POOLED_H * POOLED_W; // 20480
const ENC_FLAT: usize = 32 * POOLED_H * POOLED_W; // 10240

/// Bottleneck vector manipulated during decoder-prior maximization.
/// Unbounded but always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode(Vec<f64>);

impl LatentCode {
    pub fn new(values: Vec<f64>) -> Result<Self, GraphError> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(GraphError::NonFiniteValues);
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Euclidean distance to another code.
    pub fn distance(&self, other: &LatentCode) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// One named parameter tensor.
#[derive(Debug, Clone)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl NamedTensor {
    fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered parameter set of one network.
#[derive(Debug, Clone, Default)]
pub struct Parameters {
    pub tensors: Vec<NamedTensor>,
}

impl Parameters {
    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Round every value through `f32`, the storage precision.
    pub fn quantize_f32(&mut self) {
        for t in &mut self.tensors {
            for v in &mut t.values {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// He-uniform initialization: uniform in ±sqrt(6/fan_in).
fn he_uniform(rng: &mut SeededRng, fan_in: usize, n: usize) -> Vec<f64> {
    let limit = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.uniform_in(-limit, limit)).collect()
}

fn conv_param(rng: &mut SeededRng, name: &str, f: usize, c: usize) -> [NamedTensor; 2] {
    let kernel = NamedTensor {
        name: format!("{name}.kernel"),
        shape: vec![f, c, 3, 3],
        values: he_uniform(rng, c * 9, f * c * 9),
    };
    let bias = NamedTensor {
        name: format!("{name}.bias"),
        shape: vec![f],
        values: vec![0.0; f],
    };
    [kernel, bias]
}

fn dense_param(rng: &mut SeededRng, name: &str, out: usize, inp: usize) -> [NamedTensor; 2] {
    let weight = NamedTensor {
        name: format!("{name}.weight"),
        shape: vec![out, inp],
        values: he_uniform(rng, inp, out * inp),
    };
    let bias = NamedTensor {
        name: format!("{name}.bias"),
        shape: vec![out],
        values: vec![0.0; out],
    };
    [weight, bias]
}

/// Insert all parameter tensors of a set as named graph leaves, in order.
fn attach_params(
    g: &mut DiffGraph,
    params: &Parameters,
    requires_grad: bool,
) -> Result<Vec<NodeId>, GraphError> {
    params
        .tensors
        .iter()
        .map(|t| {
            let tensor = Tensor::new(t.shape.clone(), t.values.clone())?;
            let tensor = if requires_grad {
                tensor.with_requires_grad()
            } else {
                tensor
            };
            Ok(g.named_leaf(&t.name, tensor))
        })
        .collect()
}

/// Classifier output nodes inside a graph.
pub struct ClassifierHead {
    pub logits: NodeId,
    pub probs: NodeId,
    pub param_ids: Vec<NodeId>,
}

/// Logits and probabilities of one forward pass.
#[derive(Debug, Clone)]
pub struct ClassifierOutput {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Spoken-command CNN classifier.
#[derive(Debug, Clone)]
pub struct ClassifierModel {
    pub num_classes: usize,
    pub seed: u64,
    pub params: Parameters,
}

impl ClassifierModel {
    /// Seeded He-uniform initialization. Same seed, same parameters;
    /// a different seed yields the independent "separate" classifier.
    pub fn new(seed: u64, num_classes: usize) -> Self {
        assert!(num_classes >= 2, "need at least two classes");
        let mut rng = SeededRng::new(seed);
        let mut params = Parameters::default();
        params.tensors.extend(conv_param(&mut rng, "conv1", 32, 1));
        params.tensors.extend(conv_param(&mut rng, "conv2", 64, 32));
        params
            .tensors
            .extend(dense_param(&mut rng, "fc1", 128, CLF_FLAT));
        params
            .tensors
            .extend(dense_param(&mut rng, "fc2", num_classes, 128));
        params.quantize_f32();
        Self {
            num_classes,
            seed,
            params,
        }
    }

    /// Append the classifier network to `g`, consuming `input` (shape
    /// 1×80×64). Parameters become leaves of the graph.
    pub fn attach(
        &self,
        g: &mut DiffGraph,
        input: NodeId,
        params_require_grad: bool,
    ) -> Result<ClassifierHead, GraphError> {
        if g.shape(input) != [1, MELS, FRAMES] {
            return Err(GraphError::ShapeMismatch {
                op: "classifier",
                left: format!("[1x{MELS}x{FRAMES}]"),
                right: format!(
                    "[{}]",
                    g.shape(input)
                        .iter()
                        .map(|d| d.to_string())
                        .collect::<Vec<_>>()
                        .join("x")
                ),
            });
        }
        let p = attach_params(g, &self.params, params_require_grad)?;
        let c1 = g.conv2d(input, p[0], p[1], 1, Padding::Same)?;
        let r1 = g.relu(c1)?;
        let p1 = g.max_pool2d(r1, 2)?;
        let c2 = g.conv2d(p1, p[2], p[3], 1, Padding::Same)?;
        let r2 = g.relu(c2)?;
        let p2 = g.max_pool2d(r2, 2)?;
        let flat = g.reshape(p2, vec![CLF_FLAT])?;
        let h = g.dense(flat, p[4], p[5])?;
        let hr = g.relu(h)?;
        let logits = g.dense(hr, p[6], p[7])?;
        let probs = g.softmax(logits)?;
        Ok(ClassifierHead {
            logits,
            probs,
            param_ids: p,
        })
    }

    /// Pure forward pass on one feature grid.
    pub fn forward(&self, x: &FeatureGrid) -> Result<ClassifierOutput, GraphError> {
        let mut g = DiffGraph::new();
        let input = g.leaf(Tensor::new(vec![1, MELS, FRAMES], x.values().to_vec())?);
        let head = self.attach(&mut g, input, false)?;
        Ok(ClassifierOutput {
            logits: g.values(head.logits).to_vec(),
            probs: g.values(head.probs).to_vec(),
        })
    }

    /// Argmax class, ties broken toward the lowest index.
    pub fn predict(&self, x: &FeatureGrid) -> Result<usize, GraphError> {
        Ok(argmax(&self.forward(x)?.probs))
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        save_checkpoint(&Checkpoint::Classifier(self.clone()), path)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        match load_checkpoint(path)? {
            Checkpoint::Classifier(m) => Ok(m),
            Checkpoint::Autoencoder(_) => Err(CheckpointError::Kind {
                want: CLASSIFIER_ARCH.into(),
                got: AUTOENCODER_ARCH.into(),
            }),
        }
    }
}

/// First index of the maximal element.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Encoder output node inside a graph.
pub struct EncoderHead {
    pub latent: NodeId,
    pub param_ids: Vec<NodeId>,
}

/// Decoder output node inside a graph.
pub struct DecoderHead {
    pub output: NodeId,
    pub param_ids: Vec<NodeId>,
}

/// Convolutional autoencoder with a linear bottleneck.
#[derive(Debug, Clone)]
pub struct AutoencoderModel {
    pub latent_dim: usize,
    pub seed: u64,
    pub encoder: Parameters,
    pub decoder: Parameters,
}

impl AutoencoderModel {
    pub fn new(seed: u64, latent_dim: usize) -> Self {
        assert!(latent_dim >= 1);
        let mut rng = SeededRng::new(seed);
        let mut encoder = Parameters::default();
        encoder.tensors.extend(conv_param(&mut rng, "conv1", 16, 1));
        encoder
            .tensors
            .extend(conv_param(&mut rng, "conv2", 32, 16));
        encoder
            .tensors
            .extend(dense_param(&mut rng, "bottleneck", latent_dim, ENC_FLAT));
        let mut decoder = Parameters::default();
        decoder
            .tensors
            .extend(dense_param(&mut rng, "expand", ENC_FLAT, latent_dim));
        decoder
            .tensors
            .extend(conv_param(&mut rng, "conv1", 16, 32));
        decoder
            .tensors
            .extend(conv_param(&mut rng, "conv2", 16, 16));
        decoder.tensors.extend(conv_param(&mut rng, "out", 1, 16));
        encoder.quantize_f32();
        decoder.quantize_f32();
        Self {
            latent_dim,
            seed,
            encoder,
            decoder,
        }
    }

    /// Append the encoder: conv stack then a single *linear* dense layer —
    /// the bottleneck has no activation, so the graph ends on the dense node.
    pub fn attach_encoder(
        &self,
        g: &mut DiffGraph,
        input: NodeId,
        params_require_grad: bool,
    ) -> Result<EncoderHead, GraphError> {
        let p = attach_params(g, &self.encoder, params_require_grad)?;
        let c1 = g.conv2d(input, p[0], p[1], 1, Padding::Same)?;
        let r1 = g.relu(c1)?;
        let p1 = g.max_pool2d(r1, 2)?;
        let c2 = g.conv2d(p1, p[2], p[3], 1, Padding::Same)?;
        let r2 = g.relu(c2)?;
        let p2 = g.max_pool2d(r2, 2)?;
        let flat = g.reshape(p2, vec![ENC_FLAT])?;
        let latent = g.dense(flat, p[4], p[5])?;
        Ok(EncoderHead {
            latent,
            param_ids: p,
        })
    }

    /// Append the decoder: dense expansion, two nearest-upsample + conv
    /// blocks, a 1-channel conv, and a sigmoid onto (0, 1).
    pub fn attach_decoder(
        &self,
        g: &mut DiffGraph,
        latent: NodeId,
        params_require_grad: bool,
    ) -> Result<DecoderHead, GraphError> {
        let p = attach_params(g, &self.decoder, params_require_grad)?;
        let expand = g.dense(latent, p[0], p[1])?;
        let er = g.relu(expand)?;
        let vol = g.reshape(er, vec![32, POOLED_H, POOLED_W])?;
        let u1 = g.upsample_nearest2(vol)?;
        let c1 = g.conv2d(u1, p[2], p[3], 1, Padding::Same)?;
        let r1 = g.relu(c1)?;
        let u2 = g.upsample_nearest2(r1)?;
        let c2 = g.conv2d(u2, p[4], p[5], 1, Padding::Same)?;
        let r2 = g.relu(c2)?;
        let c3 = g.conv2d(r2, p[6], p[7], 1, Padding::Same)?;
        let output = g.sigmoid(c3)?;
        Ok(DecoderHead {
            output,
            param_ids: p,
        })
    }

    /// Encode one grid into its latent code.
    pub fn encode(&self, x: &FeatureGrid) -> Result<LatentCode, GraphError> {
        let mut g = DiffGraph::new();
        let input = g.leaf(Tensor::new(vec![1, MELS, FRAMES], x.values().to_vec())?);
        let head = self.attach_encoder(&mut g, input, false)?;
        LatentCode::new(g.values(head.latent).to_vec())
    }

    /// Decode a latent code into a feature grid (always 80×64, values in
    /// (0, 1)).
    pub fn decode(&self, z: &LatentCode) -> Result<FeatureGrid, GraphError> {
        let mut g = DiffGraph::new();
        let latent = g.leaf(Tensor::new(vec![self.latent_dim], z.values().to_vec())?);
        let head = self.attach_decoder(&mut g, latent, false)?;
        let flat = g.values(head.output).to_vec();
        FeatureGrid::from_values(flat).map_err(|_| GraphError::NonFinite { op: "decode" })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        save_checkpoint(&Checkpoint::Autoencoder(self.clone()), path)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        match load_checkpoint(path)? {
            Checkpoint::Autoencoder(m) => Ok(m),
            Checkpoint::Classifier(_) => Err(CheckpointError::Kind {
                want: AUTOENCODER_ARCH.into(),
                got: CLASSIFIER_ARCH.into(),
            }),
        }
    }
}

// ── checkpoints ─────────────────────────────────────────────────────────

const MAGIC: &[u8; 4] = b"AMXC";
const VERSION: u32 = 1;

/// Errors from checkpoint persistence.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic")]
    BadMagic,
    #[error("unsupported checkpoint version {got}, this build reads version {want}")]
    Version { got: u32, want: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint kind mismatch: expected {want}, found {got}")]
    Kind { want: String, got: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Either trained model, as stored on disk.
pub enum Checkpoint {
    Classifier(ClassifierModel),
    Autoencoder(AutoencoderModel),
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    arch: String,
    k: Option<usize>,
    latent_dim: Option<usize>,
    seed: u64,
    manifest: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

fn manifest_of(params: &Parameters, prefix: &str) -> Vec<ManifestEntry> {
    params
        .tensors
        .iter()
        .map(|t| ManifestEntry {
            name: format!("{prefix}{}", t.name),
            shape: t.shape.clone(),
        })
        .collect()
}

/// Write a checkpoint: `AMXC`, u32 version, u32 metadata length, JSON
/// metadata, then every tensor as contiguous little-endian `f32` in manifest
/// order.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let io_err = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let (meta, tensor_sets): (CheckpointMeta, Vec<&Parameters>) = match ckpt {
        Checkpoint::Classifier(m) => (
            CheckpointMeta {
                arch: CLASSIFIER_ARCH.into(),
                k: Some(m.num_classes),
                latent_dim: None,
                seed: m.seed,
                manifest: manifest_of(&m.params, ""),
            },
            vec![&m.params],
        ),
        Checkpoint::Autoencoder(m) => {
            let mut manifest = manifest_of(&m.encoder, "encoder.");
            manifest.extend(manifest_of(&m.decoder, "decoder."));
            (
                CheckpointMeta {
                    arch: AUTOENCODER_ARCH.into(),
                    k: None,
                    latent_dim: Some(m.latent_dim),
                    seed: m.seed,
                    manifest,
                },
                vec![&m.encoder, &m.decoder],
            )
        }
    };

    let meta_json =
        serde_json::to_vec(&meta).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let mut file = std::fs::File::create(path).map_err(io_err)?;
    file.write_all(MAGIC).map_err(io_err)?;
    file.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    file.write_all(&(meta_json.len() as u32).to_le_bytes())
        .map_err(io_err)?;
    file.write_all(&meta_json).map_err(io_err)?;
    let mut payload = Vec::new();
    for params in tensor_sets {
        for t in &params.tensors {
            for &v in &t.values {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    file.write_all(&payload).map_err(io_err)?;
    Ok(())
}

/// Read a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let io_err = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(io_err)?
        .read_to_end(&mut bytes)
        .map_err(io_err)?;

    if bytes.len() < 12 || &bytes[0..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::Version {
            got: version,
            want: VERSION,
        });
    }
    let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let meta_end = 12 + meta_len;
    if bytes.len() < meta_end {
        return Err(CheckpointError::Corrupt("metadata overruns file".into()));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[12..meta_end])
        .map_err(|e| CheckpointError::Corrupt(format!("bad metadata json: {e}")))?;

    let expected: usize = meta
        .manifest
        .iter()
        .map(|e| e.shape.iter().product::<usize>())
        .sum();
    let payload = &bytes[meta_end..];
    if payload.len() != expected * 4 {
        return Err(CheckpointError::Corrupt(format!(
            "manifest declares {} values ({} bytes) but payload has {} bytes",
            expected,
            expected * 4,
            payload.len()
        )));
    }

    let mut at = 0usize;
    let mut read_tensor = |entry: &ManifestEntry| -> NamedTensor {
        let n: usize = entry.shape.iter().product();
        let values: Vec<f64> = payload[at..at + 4 * n]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        at += 4 * n;
        NamedTensor {
            name: entry.name.clone(),
            shape: entry.shape.clone(),
            values,
        }
    };

    match meta.arch.as_str() {
        CLASSIFIER_ARCH => {
            let k = meta
                .k
                .ok_or_else(|| CheckpointError::Corrupt("classifier metadata missing k".into()))?;
            let tensors: Vec<NamedTensor> = meta.manifest.iter().map(&mut read_tensor).collect();
            Ok(Checkpoint::Classifier(ClassifierModel {
                num_classes: k,
                seed: meta.seed,
                params: Parameters { tensors },
            }))
        }
        AUTOENCODER_ARCH => {
            let latent_dim = meta.latent_dim.ok_or_else(|| {
                CheckpointError::Corrupt("autoencoder metadata missing latent_dim".into())
            })?;
            let mut encoder = Parameters::default();
            let mut decoder = Parameters::default();
            for entry in &meta.manifest {
                let mut t = read_tensor(entry);
                if let Some(rest) = entry.name.strip_prefix("encoder.") {
                    t.name = rest.to_string();
                    encoder.tensors.push(t);
                } else if let Some(rest) = entry.name.strip_prefix("decoder.") {
                    t.name = rest.to_string();
                    decoder.tensors.push(t);
                } else {
                    return Err(CheckpointError::Corrupt(format!(
                        "autoencoder tensor {} has no encoder/decoder prefix",
                        entry.name
                    )));
                }
            }
            Ok(Checkpoint::Autoencoder(AutoencoderModel {
                latent_dim,
                seed: meta.seed,
                encoder,
                decoder,
            }))
        }
        other => Err(CheckpointError::Corrupt(format!(
            "unknown architecture {other:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn random_grid(seed: u64) -> FeatureGrid {
        let mut rng = SeededRng::new(seed);
        FeatureGrid::from_values((0..MELS * FRAMES).map(|_| rng.uniform()).collect()).unwrap()
    }

    #[test]
    fn same_seed_gives_bit_identical_parameters() {
        let a = ClassifierModel::new(123, 10);
        let b = ClassifierModel::new(123, 10);
        for (ta, tb) in a.params.tensors.iter().zip(&b.params.tensors) {
            assert_eq!(ta.values, tb.values);
        }
    }

    #[test]
    fn different_seeds_give_different_parameters() {
        let a = ClassifierModel::new(1, 10);
        let b = ClassifierModel::new(2, 10);
        assert_ne!(a.params.tensors[0].values, b.params.tensors[0].values);
    }

    #[test]
    fn thirty_five_classes_gives_thirty_five_outputs() {
        let m = ClassifierModel::new(0, 35);
        let out = m.forward(&random_grid(1)).unwrap();
        assert_eq!(out.logits.len(), 35);
        assert_eq!(out.probs.len(), 35);
    }

    #[test]
    fn probs_sum_to_one() {
        let m = ClassifierModel::new(7, 10);
        let out = m.forward(&random_grid(2)).unwrap();
        let sum: f64 = out.probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn forward_is_deterministic() {
        let m = ClassifierModel::new(7, 10);
        let x = random_grid(3);
        let a = m.forward(&x).unwrap();
        let b = m.forward(&x).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn untrained_models_are_near_uniform() {
        // Measured over seeded inits: an untrained head should not be
        // confident on random input.
        let k = 10;
        let x = random_grid(11);
        let mut worst: f64 = 0.0;
        for seed in 0..100 {
            let m = ClassifierModel::new(seed, k);
            let out = m.forward(&x).unwrap();
            let top = out.probs.iter().cloned().fold(0.0, f64::max);
            worst = worst.max(top);
        }
        assert!(worst < 3.0 / k as f64, "max prob {worst}");
    }

    #[test]
    fn decoder_output_shape_and_range() {
        let ae = AutoencoderModel::new(5, DEFAULT_LATENT_DIM);
        let mut rng = SeededRng::new(8);
        let z = LatentCode::new((0..DEFAULT_LATENT_DIM).map(|_| rng.normal()).collect()).unwrap();
        let grid = ae.decode(&z).unwrap();
        assert_eq!(grid.values().len(), MELS * FRAMES);
        assert!(grid.values().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn encoder_output_can_be_negative() {
        // The bottleneck is linear, so nothing forces non-negative codes.
        let ae = AutoencoderModel::new(3, 32);
        let z = ae.encode(&random_grid(4)).unwrap();
        let min = z.values().iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min < 0.0, "expected some negative latent value, min {min}");
    }

    #[test]
    fn encoder_bottleneck_is_structurally_linear() {
        let ae = AutoencoderModel::new(3, 16);
        let mut g = DiffGraph::new();
        let input = g.leaf(Tensor::new(vec![1, MELS, FRAMES], vec![0.5; MELS * FRAMES]).unwrap());
        let head = ae.attach_encoder(&mut g, input, false).unwrap();
        // The latent node is a dense op and nothing comes after it.
        assert_eq!(g.op_name(head.latent), "dense");
        assert_eq!(head.latent.0 + 1, g.len());
    }

    #[test]
    fn autoencoder_round_trip_shape() {
        let ae = AutoencoderModel::new(9, 64);
        let x = random_grid(5);
        let z = ae.encode(&x).unwrap();
        assert_eq!(z.len(), 64);
        let y = ae.decode(&z).unwrap();
        assert_eq!(y.values().len(), x.values().len());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = ClassifierModel::new(77, 12);
        let path = dir.path().join("clf.ckpt");
        m.save(&path).unwrap();
        let back = ClassifierModel::load(&path).unwrap();
        assert_eq!(back.num_classes, 12);
        assert_eq!(back.seed, 77);
        for (a, b) in m.params.tensors.iter().zip(&back.params.tensors) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            assert_eq!(a.values, b.values, "tensor {} not bit-exact", a.name);
        }

        let ae = AutoencoderModel::new(3, 32);
        let ae_path = dir.path().join("ae.ckpt");
        ae.save(&ae_path).unwrap();
        let ae_back = AutoencoderModel::load(&ae_path).unwrap();
        for (a, b) in ae
            .encoder
            .tensors
            .iter()
            .chain(&ae.decoder.tensors)
            .zip(ae_back.encoder.tensors.iter().chain(&ae_back.decoder.tensors))
        {
            assert_eq!(a.values, b.values);
        }
    }

    #[test]
    fn bad_magic_is_not_a_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"XXXX rest of the file").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::BadMagic)
        ));
    }

    #[test]
    fn version_mismatch_names_versions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v9.ckpt");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"AMXC");
        bytes.extend_from_slice(&9u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path) {
            Err(CheckpointError::Version { got: 9, want: 1 }) => {}
            other => panic!("unexpected: {other:?}", other = other.err()),
        }
    }

    #[test]
    fn manifest_payload_mismatch_is_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let m = ClassifierModel::new(1, 4);
        let path = dir.path().join("short.ckpt");
        m.save(&path).unwrap();
        // Drop the last tensor's bytes: header now declares more than the
        // payload holds.
        let mut bytes = std::fs::read(&path).unwrap();
        let cut = bytes.len() - 4 * 4;
        bytes.truncate(cut);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::Corrupt(_))
        ));
    }

    #[test]
    fn wrong_kind_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clf.ckpt");
        ClassifierModel::new(0, 4).save(&path).unwrap();
        assert!(matches!(
            AutoencoderModel::load(&path),
            Err(CheckpointError::Kind { .. })
        ));
    }
}
