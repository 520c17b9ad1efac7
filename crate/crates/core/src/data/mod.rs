//! Dataset ingestion, disjoint-label-space splitting, k-shot labelling,
//! synthetic generators and the balanced two-stream minibatch scheduler.

mod csv;
pub mod digits;
mod idx;
mod synth;

pub use csv::load_csv;
pub use idx::{load_idx, write_idx};
pub use synth::{synth_two_domain, SynthSpec, SynthWorld};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

/// A labelled pool of samples from one domain. Labels are always present in
/// the dataset; whether they reach training batches is the scheduler's
/// responsibility.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Matrix,
    pub labels: Vec<usize>,
    pub label_space: BTreeSet<usize>,
    pub domain: Domain,
}

impl Dataset {
    pub fn new(samples: Matrix, labels: Vec<usize>, domain: Domain) -> Result<Self> {
        if samples.rows() != labels.len() {
            return Err(Error::Data(format!(
                "sample count {} does not match label count {}",
                samples.rows(),
                labels.len()
            )));
        }
        if !samples.all_finite() {
            return Err(Error::Data("dataset contains non-finite sample values".into()));
        }
        let label_space = labels.iter().copied().collect();
        Ok(Dataset {
            samples,
            labels,
            label_space,
            domain,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.samples.cols()
    }

    /// Rows whose label is in `classes`, preserving order.
    pub fn filter_classes(&self, classes: &BTreeSet<usize>, domain: Domain) -> Result<Dataset> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect();
        let mut samples = Matrix::zeros(idx.len(), self.input_dim());
        let mut labels = Vec::with_capacity(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            for c in 0..self.input_dim() {
                samples.set(r, c, self.samples.get(i, c));
            }
            labels.push(self.labels[i]);
        }
        Ok(Dataset {
            samples,
            labels,
            label_space: classes.clone(),
            domain,
        })
    }
}

/// Split one pool into source and target datasets by class sets. In DLSTL
/// scenarios the two sets must be disjoint.
pub fn split_label_space(
    d: &Dataset,
    source_classes: &BTreeSet<usize>,
    target_classes: &BTreeSet<usize>,
    require_disjoint: bool,
) -> Result<(Dataset, Dataset)> {
    if require_disjoint {
        let overlap: Vec<usize> = source_classes.intersection(target_classes).copied().collect();
        if !overlap.is_empty() {
            return Err(Error::Config(format!(
                "source and target label spaces must be disjoint in a DLSTL scenario; both contain {overlap:?}"
            )));
        }
    }
    let source = d.filter_classes(source_classes, Domain::Source)?;
    let target = d.filter_classes(target_classes, Domain::Target)?;
    if source.is_empty() {
        eprintln!("warning: source split is empty for classes {source_classes:?}");
    }
    if target.is_empty() {
        eprintln!("warning: target split is empty for classes {target_classes:?}");
    }
    Ok((source, target))
}

/// Draw exactly k indices per class, deterministically for a given stream.
pub fn kshot_sample(target: &Dataset, k: usize, rng: &mut ChaCha8Rng) -> Result<BTreeSet<usize>> {
    let mut picked = BTreeSet::new();
    if k == 0 {
        return Ok(picked);
    }
    for class in &target.label_space {
        let members: Vec<usize> = (0..target.len()).filter(|&i| target.labels[i] == *class).collect();
        if members.len() < k {
            return Err(Error::Data(format!(
                "class {class} has only {} samples, cannot draw k = {k}",
                members.len()
            )));
        }
        let mut order = members;
        order.shuffle(rng);
        picked.extend(order.into_iter().take(k));
    }
    Ok(picked)
}

/// Maps a raw label space onto contiguous class indices 0..C.
#[derive(Clone, Debug)]
pub struct ClassMap {
    ids: Vec<usize>,
}

impl ClassMap {
    pub fn from_label_space(space: &BTreeSet<usize>) -> Self {
        ClassMap {
            ids: space.iter().copied().collect(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.ids.len()
    }

    pub fn to_index(&self, label: usize) -> Result<usize> {
        self.ids
            .binary_search(&label)
            .map_err(|_| Error::Data(format!("label {label} not in class map {:?}", self.ids)))
    }

    pub fn remap(&self, labels: &[usize]) -> Result<Vec<usize>> {
        labels.iter().map(|&l| self.to_index(l)).collect()
    }
}

/// One minibatch. Source rows come first, then target rows. `labels` holds
/// contiguous per-domain class indices and is `None` for rows whose label is
/// hidden from training.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Matrix,
    pub labels: Vec<Option<usize>>,
    pub domain: Vec<Domain>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.domain.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domain.is_empty()
    }

    pub fn labelled_mask(&self) -> Vec<bool> {
        self.labels.iter().map(|l| l.is_some()).collect()
    }

    pub fn rows_in_domain(&self, domain: Domain) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.domain[i] == domain).collect()
    }

    pub fn labelled_rows_in_domain(&self, domain: Domain) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.domain[i] == domain && self.labels[i].is_some())
            .collect()
    }
}

/// Which streams feed training batches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamMode {
    /// B/2 source rows and B/2 target rows per batch.
    Joint,
    /// All rows from the source pool.
    SourceOnly,
    /// All rows from the labelled k-shot subset of the target pool.
    TargetLabelledOnly,
}

/// Which target rows carry labels into batches.
#[derive(Clone, Debug)]
pub enum TargetLabelRule {
    /// No target labels visible (UDA, unsupervised DLSTL).
    Hidden,
    /// Only the k-shot subset is visible (semi-supervised DLSTL).
    Subset(BTreeSet<usize>),
}

struct Stream<'a> {
    data: &'a Dataset,
    /// Raw dataset indices this stream cycles over.
    pool: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl<'a> Stream<'a> {
    fn new(data: &'a Dataset, pool: Vec<usize>, mut rng: ChaCha8Rng) -> Self {
        let mut order = pool.clone();
        order.shuffle(&mut rng);
        Stream {
            data,
            pool,
            order,
            cursor: 0,
            rng,
        }
    }

    fn next_index(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.order = self.pool.clone();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let i = self.order[self.cursor];
        self.cursor += 1;
        i
    }
}

/// Emits balanced minibatches; each stream cycles independently with a
/// per-epoch reshuffle, so the shorter pool repeats within an epoch of the
/// longer one.
pub struct BatchScheduler<'a> {
    mode: StreamMode,
    batch_size: usize,
    source: Stream<'a>,
    target: Option<Stream<'a>>,
    source_map: ClassMap,
    target_map: Option<ClassMap>,
    target_rule: TargetLabelRule,
}

impl<'a> BatchScheduler<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        mode: StreamMode,
        batch_size: usize,
        source: &'a Dataset,
        target: Option<&'a Dataset>,
        kshot: Option<&BTreeSet<usize>>,
        target_rule: TargetLabelRule,
        source_rng: ChaCha8Rng,
        target_rng: ChaCha8Rng,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if mode == StreamMode::Joint && !batch_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "joint batches must be even to balance domains, got B = {batch_size}"
            )));
        }
        if source.is_empty() {
            return Err(Error::Data("source stream is empty".into()));
        }
        let source_map = ClassMap::from_label_space(&source.label_space);
        let target_stream = match mode {
            StreamMode::SourceOnly => None,
            StreamMode::Joint => {
                let t = target.ok_or_else(|| Error::Config("joint mode needs a target dataset".into()))?;
                if t.is_empty() {
                    return Err(Error::Data("target stream is empty".into()));
                }
                Some(Stream::new(t, (0..t.len()).collect(), target_rng))
            }
            StreamMode::TargetLabelledOnly => {
                let t = target.ok_or_else(|| Error::Config("target-only mode needs a target dataset".into()))?;
                let pool: Vec<usize> = match kshot {
                    Some(set) => set.iter().copied().collect(),
                    None => (0..t.len()).collect(),
                };
                if pool.is_empty() {
                    return Err(Error::Data("labelled target pool is empty".into()));
                }
                Some(Stream::new(t, pool, target_rng))
            }
        };
        let target_map = target.map(|t| ClassMap::from_label_space(&t.label_space));
        Ok(BatchScheduler {
            mode,
            batch_size,
            source: Stream::new(source, (0..source.len()).collect(), source_rng),
            target: target_stream,
            source_map,
            target_map,
            target_rule,
        })
    }

    /// Batches per pass over the primary stream (source in joint/source-only
    /// mode, the labelled target pool in target-only mode).
    pub fn steps_per_epoch(&self) -> usize {
        let (pool_len, per_batch) = match self.mode {
            StreamMode::Joint => (self.source.pool.len(), self.batch_size / 2),
            StreamMode::SourceOnly => (self.source.pool.len(), self.batch_size),
            StreamMode::TargetLabelledOnly => (
                self.target.as_ref().map(|t| t.pool.len()).unwrap_or(0),
                self.batch_size,
            ),
        };
        pool_len.div_ceil(per_batch).max(1)
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        let (n_source, n_target) = match self.mode {
            StreamMode::Joint => (self.batch_size / 2, self.batch_size / 2),
            StreamMode::SourceOnly => (self.batch_size, 0),
            StreamMode::TargetLabelledOnly => (0, self.batch_size),
        };
        let dim = self.source.data.input_dim();
        let mut x = Matrix::zeros(n_source + n_target, dim);
        let mut labels = Vec::with_capacity(n_source + n_target);
        let mut domain = Vec::with_capacity(n_source + n_target);

        for r in 0..n_source {
            let i = self.source.next_index();
            for c in 0..dim {
                x.set(r, c, self.source.data.samples.get(i, c));
            }
            labels.push(Some(self.source_map.to_index(self.source.data.labels[i])?));
            domain.push(Domain::Source);
        }
        if n_target > 0 {
            let map = self
                .target_map
                .as_ref()
                .ok_or_else(|| Error::Config("target rows requested without a target dataset".into()))?
                .clone();
            let stream = self.target.as_mut().expect("target stream present");
            for r in 0..n_target {
                let i = stream.next_index();
                for c in 0..dim {
                    x.set(n_source + r, c, stream.data.samples.get(i, c));
                }
                let visible = match &self.target_rule {
                    TargetLabelRule::Hidden => false,
                    TargetLabelRule::Subset(set) => set.contains(&i),
                };
                labels.push(if visible {
                    Some(map.to_index(stream.data.labels[i])?)
                } else {
                    None
                });
                domain.push(Domain::Target);
            }
        }
        Ok(Batch { x, labels, domain })
    }

    pub fn source_class_map(&self) -> &ClassMap {
        &self.source_map
    }

    pub fn target_class_map(&self) -> Option<&ClassMap> {
        self.target_map.as_ref()
    }
}
