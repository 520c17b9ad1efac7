//! Synthetic two-domain benchmark with a known latent-factor structure.
//!
//! Every class is a distinct binary pattern over L latent factors. A sample
//! is the shared embedding of its class pattern, pushed through a
//! domain-specific affine distortion, plus Gaussian noise. Ground-truth
//! patterns are retained so latent-factor recovery can be scored.


use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Domain};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::rng::stream_rng;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    /// Number of latent binary factors L.
    pub factors: usize,
    pub source_classes: usize,
    pub target_classes: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    /// Noise standard deviation added to every sample.
    pub noise: f64,
    /// Strength of the domain-specific affine distortion; 0 keeps both
    /// domains at the shared embedding (identity distortion).
    pub distortion: f64,
    /// Explicit class patterns (source then target). When absent, distinct
    /// patterns are drawn deterministically from the seed.
    #[serde(default)]
    pub patterns: Option<SynthPatterns>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthPatterns {
    pub source: Vec<Vec<u8>>,
    pub target: Vec<Vec<u8>>,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.factors == 0 || self.factors > 20 {
            return Err(Error::Config("factors must be in 1..=20".into()));
        }
        if self.source_classes == 0 || self.target_classes == 0 {
            return Err(Error::Config("both domains need at least one class".into()));
        }
        if self.source_classes + self.target_classes > 1 << self.factors {
            return Err(Error::Config(format!(
                "{} classes cannot all have distinct {}-bit patterns",
                self.source_classes + self.target_classes,
                self.factors
            )));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Config("samples_per_class must be positive".into()));
        }
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if self.noise < 0.0 || self.distortion < 0.0 {
            return Err(Error::Config("noise and distortion must be nonnegative".into()));
        }
        Ok(())
    }
}

struct AffineDistortion {
    linear: Matrix,
    offset: Vec<f64>,
}

/// Frozen generator state shared by every draw from one seed: the class
/// patterns, the factor embedding and both domain distortions.
pub struct SynthWorld {
    spec: SynthSpec,
    source_patterns: Vec<Vec<u8>>,
    target_patterns: Vec<Vec<u8>>,
    embedding: Matrix,
    source_distortion: AffineDistortion,
    target_distortion: AffineDistortion,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn distinct_patterns(factors: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<u8>> {
    // Enumerate all patterns and shuffle; feasible because factors <= 20 and
    // validation caps the class count.
    use rand::seq::SliceRandom;
    let mut all: Vec<usize> = (0..(1usize << factors)).collect();
    all.shuffle(rng);
    all.into_iter()
        .take(count)
        .map(|bits| (0..factors).map(|f| ((bits >> f) & 1) as u8).collect())
        .collect()
}

impl SynthWorld {
    pub fn new(spec: &SynthSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let (source_patterns, target_patterns) = match &spec.patterns {
            Some(p) => {
                if p.source.len() != spec.source_classes || p.target.len() != spec.target_classes {
                    return Err(Error::Config("pattern list lengths must match class counts".into()));
                }
                let mut seen = std::collections::BTreeSet::new();
                for pat in p.source.iter().chain(p.target.iter()) {
                    if pat.len() != spec.factors {
                        return Err(Error::Config("pattern length must equal factors".into()));
                    }
                    if pat.iter().any(|&b| b > 1) {
                        return Err(Error::Config("patterns must be binary".into()));
                    }
                    if !seen.insert(pat.clone()) {
                        return Err(Error::Config(format!(
                            "class factor patterns must be disjoint; {pat:?} appears twice"
                        )));
                    }
                }
                (p.source.clone(), p.target.clone())
            }
            None => {
                let mut rng = stream_rng(seed, "synth.patterns");
                let all = distinct_patterns(spec.factors, spec.source_classes + spec.target_classes, &mut rng);
                (
                    all[..spec.source_classes].to_vec(),
                    all[spec.source_classes..].to_vec(),
                )
            }
        };

        let mut emb_rng = stream_rng(seed, "synth.embedding");
        let scale = 1.0 / (spec.factors as f64).sqrt();
        let embedding = Matrix::from_vec(
            spec.input_dim,
            spec.factors,
            (0..spec.input_dim * spec.factors)
                .map(|_| normal(&mut emb_rng) * scale)
                .collect(),
        )?;

        let make_distortion = |name: &str| -> Result<AffineDistortion> {
            let mut rng = stream_rng(seed, name);
            let d = spec.input_dim;
            let mut linear = Matrix::identity(d);
            let jitter = spec.distortion / (d as f64).sqrt();
            for r in 0..d {
                for c in 0..d {
                    linear.set(r, c, linear.get(r, c) + jitter * normal(&mut rng));
                }
            }
            let offset = (0..d).map(|_| spec.distortion * normal(&mut rng)).collect();
            Ok(AffineDistortion { linear, offset })
        };
        let source_distortion = make_distortion("synth.distortion.source")?;
        let target_distortion = make_distortion("synth.distortion.target")?;

        Ok(SynthWorld {
            spec: spec.clone(),
            source_patterns,
            target_patterns,
            embedding,
            source_distortion,
            target_distortion,
        })
    }

    pub fn source_patterns(&self) -> &[Vec<u8>] {
        &self.source_patterns
    }

    pub fn target_patterns(&self) -> &[Vec<u8>] {
        &self.target_patterns
    }

    /// Source class ids are 0..S, target ids S..S+T: disjoint label spaces.
    pub fn target_class_offset(&self) -> usize {
        self.source_patterns.len()
    }

    fn embed(&self, pattern: &[u8]) -> Vec<f64> {
        let mut out = vec![0.0; self.spec.input_dim];
        for (f, &bit) in pattern.iter().enumerate() {
            if bit == 1 {
                for (i, o) in out.iter_mut().enumerate() {
                    *o += self.embedding.get(i, f);
                }
            }
        }
        out
    }

    fn sample_domain(
        &self,
        domain: Domain,
        per_class: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Dataset> {
        let (patterns, distortion, class_offset) = match domain {
            Domain::Source => (&self.source_patterns, &self.source_distortion, 0),
            Domain::Target => (&self.target_patterns, &self.target_distortion, self.target_class_offset()),
        };
        let d = self.spec.input_dim;
        let n = patterns.len() * per_class;
        let mut samples = Matrix::zeros(n, d);
        let mut labels = Vec::with_capacity(n);
        let mut row = 0;
        for (class, pattern) in patterns.iter().enumerate() {
            let base = self.embed(pattern);
            // distortion(embed(pattern)) is class-constant; precompute it.
            let mut centre = vec![0.0; d];
            for (r, slot) in centre.iter_mut().enumerate() {
                let mut acc = distortion.offset[r];
                for (c, b) in base.iter().enumerate() {
                    acc += distortion.linear.get(r, c) * b;
                }
                *slot = acc;
            }
            for _ in 0..per_class {
                for (c, &centre_v) in centre.iter().enumerate() {
                    samples.set(row, c, centre_v + self.spec.noise * normal(rng));
                }
                labels.push(class_offset + class);
                row += 1;
            }
        }
        Dataset::new(samples, labels, domain)
    }

    /// Draw a source/target dataset pair from a named stream, e.g. "train"
    /// or "eval". The world (patterns, embedding, distortions) stays fixed.
    pub fn sample_pair(&self, per_class: usize, seed: u64, stream: &str) -> Result<(Dataset, Dataset)> {
        let mut src_rng = stream_rng(seed, &format!("synth.samples.source.{stream}"));
        let mut tgt_rng = stream_rng(seed, &format!("synth.samples.target.{stream}"));
        let source = self.sample_domain(Domain::Source, per_class, &mut src_rng)?;
        let target = self.sample_domain(Domain::Target, per_class, &mut tgt_rng)?;
        Ok((source, target))
    }
}

/// One-call generator: build the world for `seed` and draw the training pair.
pub fn synth_two_domain(spec: &SynthSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    let world = SynthWorld::new(spec, seed)?;
    world.sample_pair(spec.samples_per_class, seed, "train")
}
