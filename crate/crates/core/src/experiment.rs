//! End-to-end runs: data preparation, network construction, two-phase
//! training and test evaluation, all driven by a [`RunConfig`].

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::config::{DatasetKind, RunConfig};
use crate::data::{self, Dataset, Samples, SplitSpec};
use crate::elastic::{elasticize, prune_exits, Backbone, ElasticNetwork, HeadConfig};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::training::{self, LossConfig, MetricsLog};

#[derive(Debug, Clone)]
pub struct DataSplits {
    pub train: Samples,
    pub val: Samples,
    /// Held-out test set, when one is available.
    pub test: Option<Samples>,
}

fn first_existing(dir: &Path, names: &[&str]) -> Option<PathBuf> {
    names.iter().map(|n| dir.join(n)).find(|p| p.exists())
}

fn mnist_pair(dir: &Path, prefix: &str) -> Option<(PathBuf, PathBuf)> {
    let images = first_existing(
        dir,
        &[&format!("{prefix}-images-idx3-ubyte"), &format!("{prefix}-images-idx3-ubyte.gz")],
    )?;
    let labels = first_existing(
        dir,
        &[&format!("{prefix}-labels-idx1-ubyte"), &format!("{prefix}-labels-idx1-ubyte.gz")],
    )?;
    Some((images, labels))
}

fn concat(parts: Vec<Dataset>) -> Result<Dataset> {
    let mut iter = parts.into_iter();
    let mut all = iter.next().ok_or_else(|| Error::config("no data files"))?;
    for d in iter {
        all.images.extend_from_slice(&d.images);
        all.labels.extend_from_slice(&d.labels);
    }
    Ok(all)
}

/// Loads the training pool and, if present, the official test files.
pub fn load_raw(kind: DatasetKind, dir: &Path) -> Result<(Dataset, Option<Dataset>)> {
    match kind {
        DatasetKind::Mnist => {
            let (images, labels) = mnist_pair(dir, "train").ok_or_else(|| {
                Error::config(format!("{} has no train-images-idx3-ubyte[.gz]/train-labels-idx1-ubyte[.gz]", dir.display()))
            })?;
            let train = data::load_mnist_idx(&images, &labels)?;
            let test = match mnist_pair(dir, "t10k") {
                Some((i, l)) => Some(data::load_mnist_idx(&i, &l)?),
                None => None,
            };
            Ok((train, test))
        }
        DatasetKind::Cifar10 => {
            let dir = if dir.join("cifar-10-batches-bin").is_dir() {
                dir.join("cifar-10-batches-bin")
            } else {
                dir.to_path_buf()
            };
            let batches: Vec<PathBuf> = (1..=5)
                .map(|i| dir.join(format!("data_batch_{i}.bin")))
                .filter(|p| p.exists())
                .collect();
            if batches.is_empty() {
                return Err(Error::config(format!("{} has no data_batch_*.bin files", dir.display())));
            }
            let train = concat(batches.iter().map(|p| data::load_cifar10_binary(p)).collect::<Result<_>>()?)?;
            let test_path = dir.join("test_batch.bin");
            let test = if test_path.exists() {
                Some(data::load_cifar10_binary(&test_path)?)
            } else {
                None
            };
            Ok((train, test))
        }
    }
}

/// Subsamples (if requested), splits 80/20 and normalises. Without official
/// test files, samples left out by the per-class subsample form the test set.
pub fn prepare(cfg: &RunConfig, pool: &Dataset, official_test: Option<&Dataset>) -> Result<DataSplits> {
    let seed = cfg.train.seed;
    let (subset, leftover) = match cfg.per_class {
        Some(k) => {
            let idx = data::subsample_indices(pool, k, seed)?;
            let chosen: BTreeSet<usize> = idx.iter().copied().collect();
            let rest: Vec<usize> = (0..pool.len()).filter(|i| !chosen.contains(i)).collect();
            (pool.select(&idx), pool.select(&rest))
        }
        None => (pool.clone(), pool.select(&[])),
    };
    let (train, val) = data::split_train_val(
        &subset,
        SplitSpec {
            train_fraction: cfg.train_fraction,
            seed,
        },
    )?;
    let test = match official_test {
        Some(t) if !t.is_empty() => Some(Samples::from_dataset(t)),
        _ if !leftover.is_empty() => Some(Samples::from_dataset(&leftover)),
        _ => None,
    };
    Ok(DataSplits {
        train: Samples::from_dataset(&train),
        val: Samples::from_dataset(&val),
        test,
    })
}

pub fn load_splits(cfg: &RunConfig) -> Result<DataSplits> {
    let (pool, test) = load_raw(cfg.dataset, &cfg.data_dir)?;
    prepare(cfg, &pool, test.as_ref())
}

/// Builds, initialises and (optionally) prunes the network a run trains.
pub fn build_network(cfg: &RunConfig, input: crate::graph::FeatureShape, classes: usize) -> Result<ElasticNetwork> {
    let graph = cfg.backbone_config(input)?.build()?;
    let mut rng = rng::stream(cfg.train.seed, Stream::Init, 0);
    let backbone = Backbone::init(graph, &mut rng)?;
    let head = HeadConfig {
        classes,
        dropout: cfg.dropout,
        loss_weight: 1.0,
    };
    let net = elasticize(backbone, &head, &mut rng)?;
    let mut net = if !cfg.elastic {
        if cfg.keep_exits.as_ref().is_some_and(|k| !k.is_empty()) {
            return Err(Error::config("keep_exits needs an elastic network"));
        }
        prune_exits(net, &BTreeSet::new())?
    } else if let Some(keep) = &cfg.keep_exits {
        prune_exits(net, &keep.iter().copied().collect())?
    } else {
        net
    };
    if let Some(w) = &cfg.loss_weights {
        net.set_loss_weights(w)?;
    }
    Ok(net)
}

pub fn loss_config(cfg: &RunConfig, net: &ElasticNetwork) -> LossConfig {
    LossConfig {
        weights: net.loss_weights(),
        class_scaled: cfg.class_scaled_loss,
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub net: ElasticNetwork,
    pub log: MetricsLog,
    /// Per-exit test error fractions, if a test set exists.
    pub test_errors: Option<Vec<f64>>,
}

/// Trains on prepared data and evaluates on the test split.
pub fn run_with_data(cfg: &RunConfig, data: &DataSplits) -> Result<RunOutput> {
    let mut net = build_network(cfg, data.train.shape, data.train.classes)?;
    let loss = loss_config(cfg, &net);
    let log = training::train(&mut net, &data.train, &data.val, &cfg.train, &loss)?;
    let test_errors = match &data.test {
        Some(t) => Some(training::evaluate(&net, t)?),
        None => None,
    };
    Ok(RunOutput { net, log, test_errors })
}

pub fn run(cfg: &RunConfig) -> Result<RunOutput> {
    run_with_data(cfg, &load_splits(cfg)?)
}
