use gccn_core::autodiff::{Graph, ParamStore};
use gccn_core::classify::{evaluate, init_head, train_classifier, HEAD_BIAS, HEAD_WEIGHT};
use gccn_core::config::RunConfig;
use gccn_core::data::{Checkpoint, Dataset};
use gccn_core::encoder::{self, init_params_with, BnMode};
use gccn_core::model::TrainedModel;
use gccn_core::optim::Optimizer;
use gccn_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bright_dark(per_class: usize) -> Dataset {
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

fn config(pairs: &[(&str, &str)]) -> RunConfig {
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
    for (k, v) in pairs {
        c.set(k, v).unwrap();
    }
    c
}

#[test]
fn bright_dark_is_solved_within_three_epochs() {
    let ds = bright_dark(20);
    let run = train_classifier(&ds, &config(&[])).unwrap();
    assert_eq!(run.test_accuracy, 1.0);
    let model = TrainedModel::from_checkpoint(&run.checkpoint).unwrap();
    assert_eq!(evaluate(&model, &ds).unwrap().accuracy, 1.0);
}

#[test]
fn permuted_labels_score_near_chance() {
    let ds = bright_dark(50);
    let run = train_classifier(&ds, &config(&[])).unwrap();
    let model = TrainedModel::from_checkpoint(&run.checkpoint).unwrap();
    let mut shuffled = ds.clone();
    shuffled.labels.shuffle(&mut ChaCha8Rng::seed_from_u64(3));
    let acc = evaluate(&model, &shuffled).unwrap().accuracy;
    // 100 samples, chance 0.5, 3 sigma = 0.15
    assert!((acc - 0.5).abs() <= 0.15, "accuracy {acc}");
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let ds = bright_dark(10);
    let a = train_classifier(&ds, &config(&[])).unwrap();
    let b = train_classifier(&ds, &config(&[])).unwrap();
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    assert_eq!(a.metrics, b.metrics);
    let c = train_classifier(&ds, &config(&[("seed", "1")])).unwrap();
    assert_ne!(a.checkpoint.to_bytes(), c.checkpoint.to_bytes());
}

#[test]
fn f32_run_stores_narrowed_parameters() {
    let ds = bright_dark(10);
    let run = train_classifier(&ds, &config(&[("precision", "f32")])).unwrap();
    let bytes = run.checkpoint.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    let model = TrainedModel::from_checkpoint(&back).unwrap();
    for e in model.store.iter() {
        assert!(e.value.data().iter().all(|&v| v == v as f32 as f64), "{}", e.name);
    }
    assert_eq!(evaluate(&model, &ds).unwrap().accuracy, 1.0);
}

fn batch_loss(store: &ParamStore, cfg: &RunConfig, images: &[&Tensor], labels: &[usize]) -> (f64, Graph, gccn_core::autodiff::Var) {
    let net = cfg.net().unwrap();
    let mut graph = Graph::new();
    let x = graph.constant(encoder::stack_images(images).unwrap());
    let vars = net.forward(&mut graph, store, x, BnMode::Train).unwrap();
    let w = graph.param(store, HEAD_WEIGHT).unwrap();
    let b = graph.param(store, HEAD_BIAS).unwrap();
    let logits = graph.linear(vars.features, w, b).unwrap();
    let loss = graph.softmax_cross_entropy(logits, labels).unwrap();
    (graph.value(loss).item().unwrap(), graph, loss)
}

#[test]
fn first_step_does_not_raise_fixed_batch_loss() {
    let ds = bright_dark(8);
    let images: Vec<&Tensor> = ds.images.iter().collect();
    let mut failures = 0;
    for seed in 0..20u64 {
        let cfg = config(&[("learning_rate", "0.001"), ("seed", &seed.to_string())]);
        let net = cfg.net().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_params_with(&net.encoder, &mut rng, &mut store).unwrap();
        init_head(&mut store, net.feature_len(), 2, &mut rng).unwrap();
        let (before, mut graph, loss) = batch_loss(&store, &cfg, &images, &ds.labels);
        let grads = graph.backward(loss).unwrap();
        let mut opt = Optimizer::new(cfg.train.optimizer, cfg.train.learning_rate);
        opt.step(&mut store, &grads).unwrap();
        let (after, _, _) = batch_loss(&store, &cfg, &images, &ds.labels);
        if after > before {
            failures += 1;
        }
    }
    assert!(failures <= 1, "{failures} of 20 seeds increased the loss");
}

#[test]
fn evaluate_is_repeatable_and_pure() {
    let ds = bright_dark(6);
    let run = train_classifier(&ds, &config(&[("epochs", "1")])).unwrap();
    let model = TrainedModel::from_checkpoint(&run.checkpoint).unwrap();
    let before: Vec<Vec<f64>> = model.store.iter().map(|e| e.value.data().to_vec()).collect();
    let a = evaluate(&model, &ds).unwrap();
    let b = evaluate(&model, &ds).unwrap();
    assert_eq!(a, b);
    let after: Vec<Vec<f64>> = model.store.iter().map(|e| e.value.data().to_vec()).collect();
    assert_eq!(before, after);
    let trace: usize = (0..2).map(|k| a.confusion[k][k]).sum();
    assert_eq!(a.accuracy, trace as f64 / ds.len() as f64);
}
