//! The CFSM network: a shared MLP feature extractor, the sigmoid CFS layer,
//! scenario-dependent softmax heads and the optional reconstruction decoder.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Tape, TapeId};

/// Architecture sizes. `target_classes` is zero whenever the scenario has no
/// target classifier head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub feat_dim: usize,
    pub cfs_dim: usize,
    pub source_classes: usize,
    #[serde(default)]
    pub target_classes: usize,
    #[serde(default)]
    pub ae_decoder: bool,
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 1 || self.feat_dim < 1 || self.cfs_dim < 1 {
            return Err(Error::Config("architecture dims must all be >= 1".into()));
        }
        if self.hidden.iter().any(|&w| w < 1) {
            return Err(Error::Config("hidden widths must all be >= 1".into()));
        }
        if self.source_classes < 2 {
            return Err(Error::Config(format!(
                "source_classes must be >= 2, got {}",
                self.source_classes
            )));
        }
        Ok(())
    }

    /// Extractor layer widths: input -> hidden... -> feat_dim.
    fn extractor_widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden);
        w.push(self.feat_dim);
        w
    }

    /// Closed-form parameter count implied by the architecture sizes.
    pub fn param_count(&self) -> usize {
        let widths = self.extractor_widths();
        let mut count = 0;
        for pair in widths.windows(2) {
            count += pair[0] * pair[1] + pair[1];
        }
        count += self.feat_dim * self.cfs_dim + self.cfs_dim;
        count += self.cfs_dim * self.source_classes + self.source_classes;
        if self.target_classes > 0 {
            count += self.cfs_dim * self.target_classes + self.target_classes;
        }
        if self.ae_decoder {
            count += self.cfs_dim * self.feat_dim + self.feat_dim;
        }
        count
    }
}

/// One affine layer: weight is out x in, bias is 1 x out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl DenseLayer {
    fn glorot(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data = (0..out_dim * in_dim)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        DenseLayer {
            weight: Matrix::from_vec(out_dim, in_dim, data).unwrap(),
            bias: Matrix::zeros(1, out_dim),
        }
    }

    fn zeros(out_dim: usize, in_dim: usize) -> Self {
        DenseLayer {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: Matrix::zeros(1, out_dim),
        }
    }
}

/// All trainable parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub extractor: Vec<DenseLayer>,
    pub cfs: DenseLayer,
    pub source_head: DenseLayer,
    pub target_head: Option<DenseLayer>,
    pub decoder: Option<DenseLayer>,
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases, drawn from the given stream.
    pub fn init(arch: &ArchSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        arch.validate()?;
        let widths = arch.extractor_widths();
        let extractor = widths
            .windows(2)
            .map(|pair| DenseLayer::glorot(pair[1], pair[0], rng))
            .collect();
        Ok(ModelParams {
            extractor,
            cfs: DenseLayer::glorot(arch.cfs_dim, arch.feat_dim, rng),
            source_head: DenseLayer::glorot(arch.source_classes, arch.cfs_dim, rng),
            target_head: if arch.target_classes > 0 {
                Some(DenseLayer::glorot(arch.target_classes, arch.cfs_dim, rng))
            } else {
                None
            },
            decoder: if arch.ae_decoder {
                Some(DenseLayer::glorot(arch.feat_dim, arch.cfs_dim, rng))
            } else {
                None
            },
        })
    }

    /// All-zero parameters with the shapes of `arch`, for tests and oracles.
    pub fn zeros(arch: &ArchSpec) -> Result<Self> {
        arch.validate()?;
        let widths = arch.extractor_widths();
        Ok(ModelParams {
            extractor: widths.windows(2).map(|p| DenseLayer::zeros(p[1], p[0])).collect(),
            cfs: DenseLayer::zeros(arch.cfs_dim, arch.feat_dim),
            source_head: DenseLayer::zeros(arch.source_classes, arch.cfs_dim),
            target_head: if arch.target_classes > 0 {
                Some(DenseLayer::zeros(arch.target_classes, arch.cfs_dim))
            } else {
                None
            },
            decoder: if arch.ae_decoder {
                Some(DenseLayer::zeros(arch.feat_dim, arch.cfs_dim))
            } else {
                None
            },
        })
    }

    /// Visit every parameter matrix in a fixed order. Optimizer state and
    /// gradient vectors are aligned with this order.
    pub fn entries(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (i, layer) in self.extractor.iter().enumerate() {
            out.push((format!("extractor.{i}.weight"), &layer.weight));
            out.push((format!("extractor.{i}.bias"), &layer.bias));
        }
        out.push(("cfs.weight".to_string(), &self.cfs.weight));
        out.push(("cfs.bias".to_string(), &self.cfs.bias));
        out.push(("source_head.weight".to_string(), &self.source_head.weight));
        out.push(("source_head.bias".to_string(), &self.source_head.bias));
        if let Some(t) = &self.target_head {
            out.push(("target_head.weight".to_string(), &t.weight));
            out.push(("target_head.bias".to_string(), &t.bias));
        }
        if let Some(d) = &self.decoder {
            out.push(("decoder.weight".to_string(), &d.weight));
            out.push(("decoder.bias".to_string(), &d.bias));
        }
        out
    }

    pub fn entries_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out: Vec<(String, &mut Matrix)> = Vec::new();
        for (i, layer) in self.extractor.iter_mut().enumerate() {
            out.push((format!("extractor.{i}.weight"), &mut layer.weight));
            out.push((format!("extractor.{i}.bias"), &mut layer.bias));
        }
        out.push(("cfs.weight".to_string(), &mut self.cfs.weight));
        out.push(("cfs.bias".to_string(), &mut self.cfs.bias));
        out.push(("source_head.weight".to_string(), &mut self.source_head.weight));
        out.push(("source_head.bias".to_string(), &mut self.source_head.bias));
        if let Some(t) = &mut self.target_head {
            out.push(("target_head.weight".to_string(), &mut t.weight));
            out.push(("target_head.bias".to_string(), &mut t.bias));
        }
        if let Some(d) = &mut self.decoder {
            out.push(("decoder.weight".to_string(), &mut d.weight));
            out.push(("decoder.bias".to_string(), &mut d.bias));
        }
        out
    }

    pub fn actual_param_count(&self) -> usize {
        self.entries().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries().iter().all(|(_, m)| m.all_finite())
    }

    /// Register every parameter as a tape leaf for one forward/backward pass.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundParams> {
        let extractor = self
            .extractor
            .iter()
            .map(|l| {
                Ok(BoundLayer {
                    weight: tape.leaf(l.weight.clone())?,
                    bias: tape.leaf(l.bias.clone())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundParams {
            extractor,
            cfs: BoundLayer {
                weight: tape.leaf(self.cfs.weight.clone())?,
                bias: tape.leaf(self.cfs.bias.clone())?,
            },
            source_head: BoundLayer {
                weight: tape.leaf(self.source_head.weight.clone())?,
                bias: tape.leaf(self.source_head.bias.clone())?,
            },
            target_head: self
                .target_head
                .as_ref()
                .map(|l| {
                    Ok::<_, Error>(BoundLayer {
                        weight: tape.leaf(l.weight.clone())?,
                        bias: tape.leaf(l.bias.clone())?,
                    })
                })
                .transpose()?,
            decoder: self
                .decoder
                .as_ref()
                .map(|l| {
                    Ok::<_, Error>(BoundLayer {
                        weight: tape.leaf(l.weight.clone())?,
                        bias: tape.leaf(l.bias.clone())?,
                    })
                })
                .transpose()?,
        })
    }
}

#[derive(Clone, Copy)]
pub struct BoundLayer {
    pub weight: TapeId,
    pub bias: TapeId,
}

/// Tape leaf ids mirroring `ModelParams`, in the same `entries` order.
pub struct BoundParams {
    pub extractor: Vec<BoundLayer>,
    pub cfs: BoundLayer,
    pub source_head: BoundLayer,
    pub target_head: Option<BoundLayer>,
    pub decoder: Option<BoundLayer>,
}

impl BoundParams {
    pub fn leaf_ids(&self) -> Vec<TapeId> {
        let mut out = Vec::new();
        for l in &self.extractor {
            out.push(l.weight);
            out.push(l.bias);
        }
        out.push(self.cfs.weight);
        out.push(self.cfs.bias);
        out.push(self.source_head.weight);
        out.push(self.source_head.bias);
        if let Some(t) = &self.target_head {
            out.push(t.weight);
            out.push(t.bias);
        }
        if let Some(d) = &self.decoder {
            out.push(d.weight);
            out.push(d.bias);
        }
        out
    }
}

fn affine(tape: &mut Tape, x: TapeId, layer: &BoundLayer) -> Result<TapeId> {
    let wt = tape.transpose(layer.weight)?;
    let xw = tape.matmul(x, wt)?;
    tape.add_bias(xw, layer.bias)
}

/// Extractor forward: rectified affine layers, F = Phi(x).
pub fn feature_extract(tape: &mut Tape, x: TapeId, bound: &BoundParams) -> Result<TapeId> {
    let mut h = x;
    for layer in &bound.extractor {
        let a = affine(tape, h, layer)?;
        h = tape.relu(a)?;
    }
    Ok(h)
}

/// CFS layer: Z = F W' + b and F_C = sigmoid(Z). Classifiers consume Z,
/// the entropy and graph terms consume F_C.
pub fn cfs_forward(tape: &mut Tape, f: TapeId, bound: &BoundParams) -> Result<(TapeId, TapeId)> {
    let z = affine(tape, f, &bound.cfs)?;
    let fc = tape.sigmoid(z)?;
    Ok((z, fc))
}

/// Softmax-head logits from the pre-activation Z; the softmax itself lives
/// in the loss.
pub fn classify(tape: &mut Tape, z: TapeId, head: &BoundLayer) -> Result<TapeId> {
    affine(tape, z, head)
}

/// Affine decode of the CFS code back to feature space (AE ablation).
pub fn ae_reconstruct(tape: &mut Tape, fc: TapeId, bound: &BoundParams) -> Result<TapeId> {
    let decoder = bound
        .decoder
        .as_ref()
        .ok_or_else(|| Error::Config("ae_reconstruct requires a decoder head".into()))?;
    affine(tape, fc, decoder)
}

/// Plain forward pass to (F, Z, F_C) without keeping a tape.
pub fn forward_values(params: &ModelParams, x: &Matrix) -> Result<ForwardValues> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let xid = tape.constant(x.clone())?;
    let f = feature_extract(&mut tape, xid, &bound)?;
    let (z, fc) = cfs_forward(&mut tape, f, &bound)?;
    let source_logits = classify(&mut tape, z, &bound.source_head)?;
    let target_logits = match bound.target_head {
        Some(head) => {
            let id = classify(&mut tape, z, &head)?;
            Some(tape.value(id).clone())
        }
        None => None,
    };
    Ok(ForwardValues {
        features: tape.value(f).clone(),
        pre_activation: tape.value(z).clone(),
        cfs: tape.value(fc).clone(),
        source_logits: tape.value(source_logits).clone(),
        target_logits,
    })
}

pub struct ForwardValues {
    pub features: Matrix,
    pub pre_activation: Matrix,
    pub cfs: Matrix,
    pub source_logits: Matrix,
    pub target_logits: Option<Matrix>,
}

/// Versioned checkpoint: architecture plus parameters. JSON round-trips f64
/// exactly, so write/read is bit-exact.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub arch: ArchSpec,
    pub params: ModelParams,
}

pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, arch: &ArchSpec, params: &ModelParams) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let writer = BufWriter::new(file);
    serde_json::to_writer(
        writer,
        &Checkpoint {
            version: CHECKPOINT_VERSION,
            arch: arch.clone(),
            params: params.clone(),
        },
    )?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path)?;
    let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(file))?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {} (expected {})",
            ckpt.version, CHECKPOINT_VERSION
        )));
    }
    if !ckpt.params.all_finite() {
        return Err(Error::Data("checkpoint contains non-finite parameters".into()));
    }
    Ok(ckpt)
}
