//! Training and evaluation of multi-view classifiers on a [`Dataset`].
//!
//! Everything runs on one thread in a fixed order, so a run is a pure
//! function of the dataset and [`TrainConfig`].

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::multiview::{bundles_to_views, MergeVariant, MultiViewConfig, MultiViewNetwork};
use crate::nn::layers::Mode;
use crate::nn::loss::{argmax_rows, softmax_cross_entropy};
use crate::nn::optim::{Sgd, SgdConfig};

/// Batch size of evaluation and batch-norm calibration passes.
pub const EVAL_BATCH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: MergeVariant,
    pub sgd: SgdConfig,
    pub width: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub expand_init: bool,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(variant: MergeVariant, seed: u64) -> Self {
        Self {
            variant,
            sgd: SgdConfig::default(),
            width: 32,
            hidden: 128,
            blocks: 3,
            expand_init: false,
            seed,
        }
    }

    pub fn network_config(&self, classes: usize, n: usize, k: usize) -> MultiViewConfig {
        MultiViewConfig {
            width: self.width,
            hidden: self.hidden,
            blocks: self.blocks,
            expand_init: self.expand_init,
            ..MultiViewConfig::new(self.variant, classes, n, k)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean loss of the training mini-batches as they were stepped on.
    pub batch_loss: f64,
    /// Loss and accuracy of the end-of-epoch network on the training split.
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub count: usize,
    pub loss: f64,
    pub accuracy: f64,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub classes: Vec<String>,
    pub n: usize,
    pub k: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub epochs: Vec<EpochStats>,
    pub final_test_accuracy: f64,
    pub confusion: Vec<Vec<usize>>,
}

/// Loss, accuracy and confusion matrix of `net` over one split, in storage
/// order and batches of [`EVAL_BATCH`].
pub fn evaluate(net: &mut MultiViewNetwork<f32>, dataset: &Dataset, split: Split) -> Result<Evaluation> {
    check_compatible(net, dataset)?;
    let indices = dataset.indices(split);
    evaluate_indices(net, dataset, &indices)
}

fn check_compatible(net: &MultiViewNetwork<f32>, dataset: &Dataset) -> Result<()> {
    let c = &net.config;
    if c.n != dataset.n || c.k != dataset.k || c.classes != dataset.num_classes() {
        return Err(Error::ShapeMismatch(format!(
            "network expects N={}, k={}, {} classes; dataset has N={}, k={}, {} classes",
            c.n,
            c.k,
            c.classes,
            dataset.n,
            dataset.k,
            dataset.num_classes()
        )));
    }
    Ok(())
}

fn evaluate_indices(
    net: &mut MultiViewNetwork<f32>,
    dataset: &Dataset,
    indices: &[usize],
) -> Result<Evaluation> {
    let classes = dataset.num_classes();
    let mut confusion = vec![vec![0usize; classes]; classes];
    let mut loss_sum = 0.0;
    for chunk in indices.chunks(EVAL_BATCH) {
        let bundles: Vec<_> = chunk.iter().map(|&i| &dataset.records[i].bundle).collect();
        let labels: Vec<usize> = chunk.iter().map(|&i| dataset.records[i].label).collect();
        let views = bundles_to_views(&bundles)?;
        let (logits, _) = net.forward(&views, Mode::Eval)?;
        let (loss, _) = softmax_cross_entropy(&logits, &labels)?;
        loss_sum += loss as f64 * chunk.len() as f64;
        for (&truth, pred) in labels.iter().zip(argmax_rows(&logits)) {
            confusion[truth][pred] += 1;
        }
    }
    let count = indices.len();
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    let (loss, accuracy) = if count == 0 {
        (0.0, 0.0)
    } else {
        (loss_sum / count as f64, correct as f64 / count as f64)
    };
    Ok(Evaluation {
        count,
        loss,
        accuracy,
        confusion,
    })
}

/// Replaces every batch-norm running average with population statistics
/// of the training split under the current weights.
fn calibrate_batch_norm(
    net: &mut MultiViewNetwork<f32>,
    dataset: &Dataset,
    indices: &[usize],
) -> Result<()> {
    net.batch_norms_mut()
        .into_iter()
        .for_each(|bn| bn.begin_calibration());
    for chunk in indices.chunks(EVAL_BATCH) {
        let bundles: Vec<_> = chunk.iter().map(|&i| &dataset.records[i].bundle).collect();
        net.forward(&bundles_to_views(&bundles)?, Mode::Calibrate)?;
    }
    net.batch_norms_mut()
        .into_iter()
        .for_each(|bn| bn.finish_calibration());
    Ok(())
}

pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<(TrainReport, MultiViewNetwork<f32>)> {
    train_with_progress(dataset, config, |_| {})
}

/// Mini-batch SGD over the training split, reshuffled every epoch from
/// `config.seed`. After each epoch the batch-norm statistics are
/// recalibrated on the training split and both splits are evaluated.
pub fn train_with_progress(
    dataset: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(TrainReport, MultiViewNetwork<f32>)> {
    config.sgd.validate()?;
    dataset.validate()?;
    let train_idx = dataset.indices(Split::Train);
    let test_idx = dataset.indices(Split::Test);
    if train_idx.is_empty() {
        return Err(Error::ConfigInvalid("dataset has no training records".into()));
    }
    if test_idx.is_empty() {
        return Err(Error::ConfigInvalid("dataset has no test records".into()));
    }
    let net_config = config.network_config(dataset.num_classes(), dataset.n, dataset.k);
    let mut net = MultiViewNetwork::<f32>::build(net_config, config.seed)?;
    let mut sgd = Sgd::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7368_7566_666c_6521);
    let mut order = train_idx.clone();
    let mut epochs = Vec::with_capacity(config.sgd.epochs);
    let mut last_test = None;

    for epoch in 0..config.sgd.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.sgd.batch_size) {
            let bundles: Vec<_> = batch.iter().map(|&i| &dataset.records[i].bundle).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| dataset.records[i].label).collect();
            let views = bundles_to_views(&bundles)?;
            net.zero_grad();
            let (logits, cache) = net.forward(&views, Mode::Train)?;
            let (loss, grad) = softmax_cross_entropy(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::InvalidData(format!(
                    "training diverged at epoch {epoch} (loss {loss})"
                )));
            }
            loss_sum += loss as f64 * batch.len() as f64;
            net.backward(&cache, &grad)?;
            sgd.step(net.params_mut(), &config.sgd, epoch)?;
        }

        calibrate_batch_norm(&mut net, dataset, &train_idx)?;
        let train_eval = evaluate_indices(&mut net, dataset, &train_idx)?;
        let test_eval = evaluate_indices(&mut net, dataset, &test_idx)?;
        let stats = EpochStats {
            epoch,
            learning_rate: config.sgd.learning_rate_at(epoch),
            batch_loss: loss_sum / train_idx.len() as f64,
            train_loss: train_eval.loss,
            train_accuracy: train_eval.accuracy,
            test_loss: test_eval.loss,
            test_accuracy: test_eval.accuracy,
        };
        on_epoch(&stats);
        epochs.push(stats);
        last_test = Some(test_eval);
    }

    let test = last_test.expect("at least one epoch");
    let report = TrainReport {
        config: *config,
        classes: dataset.class_names.clone(),
        n: dataset.n,
        k: dataset.k,
        train_count: train_idx.len(),
        test_count: test_idx.len(),
        epochs,
        final_test_accuracy: test.accuracy,
        confusion: test.confusion,
    };
    Ok((report, net))
}
