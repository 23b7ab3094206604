//! Supervised classification: fused feature vector, one fully connected
//! layer, softmax cross-entropy.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamStore};
use crate::config::{Precision, RunConfig, Task};
use crate::data::{split_samples, Checkpoint, Dataset};
use crate::encoder::{self, init_params_with, BnMode};
use crate::error::{Error, Result};
use crate::model::TrainedModel;
use crate::ops;
use crate::optim::Optimizer;
use crate::report::EpochRow;
use crate::tensor::Tensor;

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

/// Outcome of [`train_classifier`].
#[derive(Debug, Clone)]
pub struct ClassifyRun {
    pub checkpoint: Checkpoint,
    /// Epoch 0 rows describe the initialized model.
    pub metrics: Vec<EpochRow>,
    /// Held-out accuracy after the last epoch.
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Adds the fully connected head: uniform in `±1/sqrt(fan_in)`, zero bias.
pub fn init_head<R: Rng>(store: &mut ParamStore, features: usize, classes: usize, rng: &mut R) -> Result<()> {
    let bound = 1.0 / (features as f64).sqrt();
    let w = (0..features * classes)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    store.insert(HEAD_WEIGHT, Tensor::new(vec![features, classes], w)?, true);
    store.insert(HEAD_BIAS, Tensor::zeros(&[classes]), true);
    Ok(())
}

fn check_dataset(model: &TrainedModel, dataset: &Dataset) -> Result<()> {
    dataset.validate()?;
    if dataset.image_shape() != model.net.encoder.input {
        return Err(Error::Dimension(format!(
            "images are {:?}, model expects {:?}",
            dataset.image_shape(),
            model.net.encoder.input
        )));
    }
    if dataset.num_classes() > model.config.classes {
        return Err(Error::Data(format!(
            "dataset has {} classes, classifier has {}",
            dataset.num_classes(),
            model.config.classes
        )));
    }
    Ok(())
}

/// Loss and predictions for a batch. Returns `(loss, probs)` where `probs`
/// is `[n, classes]`.
fn batch_forward(
    graph: &mut Graph,
    model: &TrainedModel,
    images: &[&Tensor],
    labels: &[usize],
    mode: BnMode,
) -> Result<(crate::autodiff::Var, Vec<encoder::BnStats>, Tensor)> {
    let x = graph.constant(encoder::stack_images(images)?);
    let vars = model.net.forward(graph, &model.store, x, mode)?;
    let w = graph.param(&model.store, HEAD_WEIGHT)?;
    let b = graph.param(&model.store, HEAD_BIAS)?;
    let logits = graph.linear(vars.features, w, b)?;
    let probs = ops::softmax(graph.value(logits));
    let loss = graph.softmax_cross_entropy(logits, labels)?;
    Ok((loss, vars.bn_stats, probs))
}

/// Evaluation-mode accuracy, mean loss and confusion matrix. Pure: the model
/// is not modified.
pub fn evaluate(model: &TrainedModel, dataset: &Dataset) -> Result<Evaluation> {
    check_dataset(model, dataset)?;
    const CHUNK: usize = 64;
    let c = model.config.classes;
    let mut confusion = vec![vec![0usize; c]; c];
    let mut loss_sum = 0.0;
    let idx: Vec<usize> = (0..dataset.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let images: Vec<&Tensor> = chunk.iter().map(|&i| &dataset.images[i]).collect();
        let labels: Vec<usize> = chunk.iter().map(|&i| dataset.labels[i]).collect();
        let mut graph = Graph::new();
        let (loss, _, probs) = batch_forward(&mut graph, model, &images, &labels, BnMode::Eval)?;
        loss_sum += graph.value(loss).item()? * chunk.len() as f64;
        for (y, p) in labels.iter().zip(ops::argmax_rows(&probs)) {
            confusion[*y][p] += 1;
        }
    }
    let correct: usize = (0..c).map(|k| confusion[k][k]).sum();
    Ok(Evaluation {
        accuracy: correct as f64 / dataset.len() as f64,
        loss: loss_sum / dataset.len() as f64,
        confusion,
    })
}

/// Trains encoder, GC fusion and head on a stratified sample split.
///
/// All randomness (initialization, split, batch order) comes from one
/// generator seeded with `config.train.seed`.
pub fn train_classifier(dataset: &Dataset, config: &RunConfig) -> Result<ClassifyRun> {
    if config.task != Task::Classify {
        return Err(Error::Config("train_classifier needs task = classify".into()));
    }
    config.validate()?;
    dataset.validate()?;
    if dataset.num_classes() < 2 {
        return Err(Error::Data("classification needs at least two classes".into()));
    }
    if dataset.num_classes() != config.classes {
        return Err(Error::Config(format!(
            "config says {} classes, dataset has {}",
            config.classes,
            dataset.num_classes()
        )));
    }
    let t = &config.train;
    let net = config.net()?;
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    let mut store = ParamStore::new();
    init_params_with(&net.encoder, &mut rng, &mut store)?;
    init_head(&mut store, net.feature_len(), config.classes, &mut rng)?;
    if t.precision == Precision::F32 {
        store.round_to_f32();
    }
    let mut model = TrainedModel {
        config: config.clone(),
        net,
        store,
    };
    check_dataset(&model, dataset)?;
    let (train, test) = split_samples(dataset, config.holdout_fraction, &mut rng)?;
    let mut optimizer = Optimizer::new(t.optimizer, t.learning_rate);

    let mut metrics = Vec::new();
    let first_train = evaluate(&model, &train)?;
    let mut last_test = evaluate(&model, &test)?;
    metrics.push(row(0, "train", first_train.loss, first_train.accuracy));
    metrics.push(row(0, "test", last_test.loss, last_test.accuracy));

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=t.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(t.batch_size) {
            let images: Vec<&Tensor> = batch.iter().map(|&i| &train.images[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let mut graph = Graph::new();
            let (loss, stats, probs) =
                batch_forward(&mut graph, &model, &images, &labels, BnMode::Train)?;
            loss_sum += graph.value(loss).item()? * batch.len() as f64;
            correct += labels
                .iter()
                .zip(ops::argmax_rows(&probs))
                .filter(|(y, p)| **y == *p)
                .count();
            let grads = graph.backward(loss)?;
            optimizer.step(&mut model.store, &grads)?;
            encoder::update_running_stats(&mut model.store, &stats)?;
            if t.precision == Precision::F32 {
                model.store.round_to_f32();
            }
        }
        let n = train.len() as f64;
        metrics.push(row(epoch, "train", loss_sum / n, correct as f64 / n));
        last_test = evaluate(&model, &test)?;
        metrics.push(row(epoch, "test", last_test.loss, last_test.accuracy));
    }
    Ok(ClassifyRun {
        checkpoint: model.to_checkpoint(&optimizer, &rng),
        metrics,
        test_accuracy: last_test.accuracy,
    })
}

fn row(epoch: usize, split: &'static str, loss: f64, accuracy: f64) -> EpochRow {
    EpochRow {
        epoch,
        split,
        loss,
        accuracy,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Bright versus dark 8x8 images with a little texture.
    pub(crate) fn bright_dark(per_class: usize) -> Dataset {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..per_class * 2 {
            let class = i % 2;
            let base = if class == 0 { 0.1 } else { 0.9 };
            let data = (0..64)
                .map(|p| base + 0.05 * (((p * 7 + i * 3) % 5) as f64 / 5.0))
                .collect();
            images.push(Tensor::new(vec![8, 8, 1], data).unwrap());
            labels.push(class);
        }
        Dataset::new(images, labels, None).unwrap()
    }

    fn small_config() -> RunConfig {
        let mut c = RunConfig::default();
        for (k, v) in [
            ("task", "classify"),
            ("classes", "2"),
            ("image_height", "8"),
            ("image_width", "8"),
            ("blocks", "1"),
            ("filters", "4"),
            ("grid_rows", "2"),
            ("grid_cols", "2"),
            ("epochs", "3"),
            ("batch_size", "8"),
            ("learning_rate", "0.01"),
        ] {
            c.set(k, v).unwrap();
        }
        c
    }

    #[test]
    fn zero_epochs_returns_initialized_model() {
        let mut cfg = small_config();
        cfg.set("epochs", "0").unwrap();
        let run = train_classifier(&bright_dark(10), &cfg).unwrap();
        assert_eq!(run.metrics.len(), 2);
        let model = TrainedModel::from_checkpoint(&run.checkpoint).unwrap();
        assert!(model.store.get(HEAD_WEIGHT).is_some());
    }

    #[test]
    fn confusion_rows_count_samples() {
        let cfg = small_config();
        let ds = bright_dark(10);
        let run = train_classifier(&ds, &cfg).unwrap();
        let model = TrainedModel::from_checkpoint(&run.checkpoint).unwrap();
        let ev = evaluate(&model, &ds).unwrap();
        for (k, row) in ev.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<usize>(), ds.labels.iter().filter(|&&y| y == k).count());
        }
        let again = evaluate(&model, &ds).unwrap();
        assert_eq!(ev, again);
    }

    #[test]
    fn class_count_mismatch_is_config_error() {
        let mut cfg = small_config();
        cfg.set("classes", "3").unwrap();
        assert!(matches!(train_classifier(&bright_dark(4), &cfg), Err(Error::Config(_))));
    }
}
