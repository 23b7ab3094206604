//! Episodic training and evaluation of the few-shot heads.
//!
//! Classes are split into disjoint training and held-out sets. Training
//! samples episodes from the training classes with batch statistics in the
//! encoder; evaluation samples episodes from the held-out classes using the
//! running statistics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamStore};
use crate::config::{Precision, RunConfig, Task};
use crate::data::{sample_episode, split_classes, Checkpoint, ClassIndex, Dataset};
use crate::encoder::{self, init_params_with, BnMode};
use crate::error::{Error, Result};
use crate::fewshot::{accuracy, episode_forward, head_loss, EpisodeItem};
use crate::tensor::Tensor;
use crate::model::TrainedModel;
use crate::optim::Optimizer;
use crate::report::{mean_stderr, EpisodeRow};

/// Episodes drawn by [`evaluate_episodes`] come from this stream of the run
/// seed, so evaluation is reproducible apart from training.
pub const EVAL_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub rows: Vec<EpisodeRow>,
    pub mean_accuracy: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone)]
pub struct FewShotRun {
    pub checkpoint: Checkpoint,
    pub train_rows: Vec<EpisodeRow>,
    pub eval: EvalSummary,
}

pub fn eval_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(EVAL_STREAM);
    rng
}

fn check_shape(config: &RunConfig, dataset: &Dataset) -> Result<()> {
    if dataset.image_shape() != config.train.encoder.input {
        return Err(Error::Dimension(format!(
            "images are {:?}, config expects {:?}",
            dataset.image_shape(),
            config.train.encoder.input
        )));
    }
    Ok(())
}

/// Freshly initialized encoder parameters for `config`, drawn from `rng`.
pub fn init_model(config: &RunConfig, rng: &mut ChaCha8Rng) -> Result<TrainedModel> {
    let net = config.net()?;
    let mut store = ParamStore::new();
    init_params_with(&net.encoder, rng, &mut store)?;
    if config.train.precision == Precision::F32 {
        store.round_to_f32();
    }
    Ok(TrainedModel {
        config: config.clone(),
        net,
        store,
    })
}

/// Trains on the training classes for `train_episodes` episodes, then
/// evaluates `eval_episodes` episodes on the held-out classes.
pub fn train_fewshot(dataset: &Dataset, config: &RunConfig) -> Result<FewShotRun> {
    if config.task != Task::FewShot {
        return Err(Error::Config("train_fewshot needs task = fewshot".into()));
    }
    config.validate()?;
    dataset.validate()?;
    check_shape(config, dataset)?;
    let e = &config.episodes;
    let t = &config.train;
    let (train, test) = split_classes(dataset, e.train_fraction, t.seed)?;
    for (name, side) in [("training", &train), ("held-out", &test)] {
        if side.num_classes() < e.ways {
            return Err(Error::Data(format!(
                "{}-way episodes need {} {name} classes, split has {}",
                e.ways,
                e.ways,
                side.num_classes()
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    let mut model = init_model(config, &mut rng)?;
    let mut optimizer = Optimizer::new(t.optimizer, t.learning_rate);
    let index = ClassIndex::new(&train);
    let mut train_rows = Vec::with_capacity(e.train_episodes);
    for id in 0..e.train_episodes {
        let episode = sample_episode(&index, e.ways, e.shots, e.queries, &mut rng)?;
        let mut graph = Graph::new();
        let fwd = episode_forward(
            &mut graph,
            &episode,
            &train,
            &model.net,
            &model.store,
            e.head,
            e.metric,
            BnMode::Train,
        )?;
        let loss = graph.value(fwd.loss).item()?;
        let acc = accuracy(&fwd.probs, &fwd.query_labels);
        let grads = graph.backward(fwd.loss)?;
        optimizer.step(&mut model.store, &grads)?;
        encoder::update_running_stats(&mut model.store, &fwd.bn_stats)?;
        if t.precision == Precision::F32 {
            model.store.round_to_f32();
        }
        train_rows.push(row(config, id, loss, acc));
    }
    let eval = evaluate_episodes(&model, &test, e.eval_episodes, &mut eval_rng(t.seed))?;
    Ok(FewShotRun {
        checkpoint: model.to_checkpoint(&optimizer, &rng),
        train_rows,
        eval,
    })
}

/// Held-out classes of `dataset` under the model's class split.
pub fn held_out_classes(model: &TrainedModel, dataset: &Dataset) -> Result<Dataset> {
    let (_, test) = split_classes(
        dataset,
        model.config.episodes.train_fraction,
        model.config.train.seed,
    )?;
    Ok(test)
}

/// Mean query accuracy over `episodes` episodes sampled from all classes of
/// `dataset`, with the encoder in evaluation mode. The model is not modified.
pub fn evaluate_episodes(
    model: &TrainedModel,
    dataset: &Dataset,
    episodes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EvalSummary> {
    if episodes == 0 {
        return Err(Error::Config("episode count must be positive".into()));
    }
    dataset.validate()?;
    check_shape(&model.config, dataset)?;
    let e = &model.config.episodes;
    // With running statistics each image's features do not depend on the
    // rest of its batch, so every image is encoded once.
    let images: Vec<&Tensor> = dataset.images.iter().collect();
    let features = model.net.embed(&model.store, &images, BnMode::Eval)?;
    let d = features.shape()[1];
    let gather = |items: &[EpisodeItem]| -> Result<Tensor> {
        let mut data = Vec::with_capacity(items.len() * d);
        for it in items {
            data.extend_from_slice(features.row(it.sample));
        }
        Tensor::new(vec![items.len(), d], data)
    };
    let index = ClassIndex::new(dataset);
    let mut rows = Vec::with_capacity(episodes);
    for id in 0..episodes {
        let episode = sample_episode(&index, e.ways, e.shots, e.queries, rng)?;
        let mut graph = Graph::new();
        let support = graph.constant(gather(&episode.support)?);
        let query = graph.constant(gather(&episode.query)?);
        let query_labels = episode.query_labels();
        let out = head_loss(
            &mut graph,
            support,
            &episode.support_labels(),
            query,
            &query_labels,
            episode.ways,
            e.head,
            e.metric,
        )?;
        let loss = graph.value(out.loss).item()?;
        rows.push(row(&model.config, id, loss, accuracy(&out.probs, &query_labels)));
    }
    let accs: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
    let (mean_accuracy, stderr) = mean_stderr(&accs);
    Ok(EvalSummary {
        rows,
        mean_accuracy,
        stderr,
    })
}

fn row(config: &RunConfig, id: usize, loss: f64, accuracy: f64) -> EpisodeRow {
    let e = &config.episodes;
    EpisodeRow {
        episode_id: id,
        ways: e.ways,
        shots: e.shots,
        metric: e.metric.to_string(),
        head: e.head.to_string(),
        loss,
        accuracy,
    }
}

/// `RESULT head=<h> metric=<m> ways=<W> shots=<K> acc=<mean> se=<stderr>`.
pub fn result_line(config: &RunConfig, summary: &EvalSummary) -> String {
    let e = &config.episodes;
    format!(
        "RESULT head={} metric={} ways={} shots={} acc={:.4} se={:.4}",
        e.head, e.metric, e.ways, e.shots, summary.mean_accuracy, summary.stderr
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic_glyphs, GlyphConfig};

    fn tiny() -> (Dataset, RunConfig) {
        let ds = gen_synthetic_glyphs(&GlyphConfig {
            classes: 6,
            per_class: 6,
            size: 16,
            ..GlyphConfig::default()
        })
        .unwrap();
        let mut cfg = RunConfig::default();
        for (k, v) in [
            ("image_height", "16"),
            ("image_width", "16"),
            ("blocks", "2"),
            ("filters", "4"),
            ("grid_rows", "2"),
            ("grid_cols", "2"),
            ("ways", "2"),
            ("queries", "2"),
            ("train_episodes", "3"),
            ("eval_episodes", "4"),
            ("train_fraction", "0.5"),
        ] {
            cfg.set(k, v).unwrap();
        }
        (ds, cfg)
    }

    #[test]
    fn run_is_reproducible() {
        let (ds, cfg) = tiny();
        let a = train_fewshot(&ds, &cfg).unwrap();
        let b = train_fewshot(&ds, &cfg).unwrap();
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
        assert_eq!(a.train_rows, b.train_rows);
        assert_eq!(a.eval, b.eval);
        assert_eq!(a.train_rows.len(), 3);
        assert_eq!(a.eval.rows.len(), 4);
    }

    #[test]
    fn reloaded_model_reproduces_eval() {
        let (ds, cfg) = tiny();
        let run = train_fewshot(&ds, &cfg).unwrap();
        let model = TrainedModel::from_checkpoint(&run.checkpoint).unwrap();
        let test = held_out_classes(&model, &ds).unwrap();
        let again = evaluate_episodes(&model, &test, 4, &mut eval_rng(cfg.train.seed)).unwrap();
        assert_eq!(again, run.eval);
    }

    #[test]
    fn cached_features_match_per_episode_encoding() {
        let (ds, cfg) = tiny();
        let run = train_fewshot(&ds, &cfg).unwrap();
        let model = TrainedModel::from_checkpoint(&run.checkpoint).unwrap();
        let test = held_out_classes(&model, &ds).unwrap();
        let cached = evaluate_episodes(&model, &test, 4, &mut eval_rng(cfg.train.seed)).unwrap();
        let mut rng = eval_rng(cfg.train.seed);
        let index = ClassIndex::new(&test);
        let e = &cfg.episodes;
        for r in &cached.rows {
            let ep = sample_episode(&index, e.ways, e.shots, e.queries, &mut rng).unwrap();
            let direct = crate::fewshot::episode_loss(
                &ep, &test, &model.net, &model.store, e.head, e.metric, BnMode::Eval,
            )
            .unwrap();
            assert!((direct.loss - r.loss).abs() < 1e-12);
            assert_eq!(direct.accuracy, r.accuracy);
        }
    }

    #[test]
    fn too_many_ways_for_split() {
        let (ds, mut cfg) = tiny();
        cfg.set("ways", "4").unwrap();
        assert!(matches!(train_fewshot(&ds, &cfg), Err(Error::Data(_))));
    }

    #[test]
    fn result_line_format() {
        let (_, cfg) = tiny();
        let s = EvalSummary {
            rows: Vec::new(),
            mean_accuracy: 0.9,
            stderr: 0.01,
        };
        assert_eq!(
            result_line(&cfg, &s),
            "RESULT head=proto metric=euclid ways=2 shots=1 acc=0.9000 se=0.0100"
        );
    }
}
