use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gccn_core::autodiff::{Fault, OpKind};
use gccn_core::classify::{evaluate, train_classifier};
use gccn_core::config::{RunConfig, Task};
use gccn_core::data::{
    gen_synthetic_glyphs, import_raw_dir, load_checkpoint, load_idx, save_checkpoint,
    write_features, write_idx_files, Dataset, GlyphConfig,
};
use gccn_core::encoder::BnMode;
use gccn_core::episodic::{eval_rng, evaluate_episodes, held_out_classes, result_line, train_fewshot};
use gccn_core::model::TrainedModel;
use gccn_core::report::{write_episode_csv, write_epoch_csv};
use gccn_core::selftest::{run_all, SelftestOptions};
use gccn_core::{Error, Result};

use crate::args::{ConfigFlags, EvalArgs, ExtractArgs, GenDataArgs, ImportRawArgs, SelftestArgs, TrainArgs};

pub const CHECKPOINT_FILE: &str = "model.gccn";

pub fn idx_paths(prefix: impl AsRef<Path>) -> (PathBuf, PathBuf) {
    let p = prefix.as_ref().to_string_lossy().into_owned();
    (
        PathBuf::from(format!("{p}-images.idx")),
        PathBuf::from(format!("{p}-labels.idx")),
    )
}

fn load_data(prefix: &str) -> Result<Dataset> {
    let (img, lab) = idx_paths(prefix);
    load_idx(img, lab)
}

fn print_config(config: &RunConfig) {
    println!("# resolved configuration");
    print!("{}", config.resolved());
    println!("# fingerprint {}", config.fingerprint());
}

/// Defaults, then the config file, then flags, then the data-derived image
/// shape (and class count for classification).
fn resolve_config(
    task: Task,
    flags: &ConfigFlags,
    data: Option<&str>,
    out: Option<&Path>,
    dataset: &Dataset,
) -> Result<RunConfig> {
    let mut config = RunConfig {
        task,
        ..RunConfig::default()
    };
    if let Some(path) = &flags.config {
        let text = fs::read_to_string(path)?;
        for (k, v) in gccn_core::config::parse_pairs(&text)? {
            config.set(&k, &v)?;
        }
        config.task = task;
    }
    for (k, v) in flags.pairs() {
        config.set(k, &v)?;
    }
    if let Some(d) = data {
        config.data = Some(d.to_string());
    }
    if let Some(o) = out {
        config.out = Some(o.to_string_lossy().into_owned());
    }
    let (h, w, c) = dataset.image_shape();
    config.train.encoder.input = (h, w, c);
    if task == Task::Classify {
        config.classes = dataset.num_classes();
    }
    config.validate()?;
    Ok(config)
}

fn data_arg(config_data: Option<String>, flag: Option<&String>) -> Result<String> {
    flag.cloned()
        .or(config_data)
        .ok_or_else(|| Error::Usage("--data is required (or `data` in the config file)".into()))
}

fn file_config_value(flags: &ConfigFlags, key: &str) -> Result<Option<String>> {
    let Some(path) = &flags.config else {
        return Ok(None);
    };
    let text = fs::read_to_string(path)?;
    Ok(gccn_core::config::parse_pairs(&text)?
        .into_iter()
        .rev()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v))
}

fn out_dir(args: &TrainArgs) -> Result<PathBuf> {
    let out = match &args.out {
        Some(o) => o.clone(),
        None => file_config_value(&args.flags, "out")?
            .map(PathBuf::from)
            .ok_or_else(|| Error::Usage("--out is required (or `out` in the config file)".into()))?,
    };
    fs::create_dir_all(&out)?;
    Ok(out)
}

pub fn gen_data(args: &GenDataArgs) -> Result<()> {
    if args.classes < 2 {
        return Err(Error::Config(format!("--classes must be >= 2, got {}", args.classes)));
    }
    let cfg = GlyphConfig {
        classes: args.classes,
        per_class: args.per_class,
        size: args.size,
        seed: args.seed,
        noise: args.noise,
        jitter: args.jitter,
    };
    println!(
        "# gen-data classes={} per_class={} size={} seed={} noise={} jitter={}",
        cfg.classes, cfg.per_class, cfg.size, cfg.seed, cfg.noise, cfg.jitter
    );
    let ds = gen_synthetic_glyphs(&cfg)?;
    let (img, lab) = idx_paths(&args.out);
    if let Some(parent) = img.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_idx_files(&ds, &img, &lab)?;
    println!("wrote {} and {} ({} images)", img.display(), lab.display(), ds.len());
    Ok(())
}

pub fn train_classify(args: &TrainArgs) -> Result<()> {
    let data = data_arg(file_config_value(&args.flags, "data")?, args.data.as_ref())?;
    let out = out_dir(args)?;
    let dataset = load_data(&data)?;
    let config = resolve_config(Task::Classify, &args.flags, Some(&data), Some(&out), &dataset)?;
    print_config(&config);
    let start = Instant::now();
    let run = train_classifier(&dataset, &config)?;
    save_checkpoint(out.join(CHECKPOINT_FILE), &run.checkpoint)?;
    write_epoch_csv(BufWriter::new(File::create(out.join("metrics.csv"))?), &run.metrics)?;
    for r in &run.metrics {
        println!("epoch {} {} loss={:.4} acc={:.4}", r.epoch, r.split, r.loss, r.accuracy);
    }
    println!(
        "RESULT task=classify mode={} epochs={} acc={:.4} time={:.1}s",
        config.train.gc.mode,
        config.train.epochs,
        run.test_accuracy,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

pub fn train_fewshot_cmd(args: &TrainArgs) -> Result<()> {
    let data = data_arg(file_config_value(&args.flags, "data")?, args.data.as_ref())?;
    let out = out_dir(args)?;
    let dataset = load_data(&data)?;
    let config = resolve_config(Task::FewShot, &args.flags, Some(&data), Some(&out), &dataset)?;
    print_config(&config);
    let start = Instant::now();
    let run = train_fewshot(&dataset, &config)?;
    save_checkpoint(out.join(CHECKPOINT_FILE), &run.checkpoint)?;
    write_episode_csv(
        BufWriter::new(File::create(out.join("train_episodes.csv"))?),
        &run.train_rows,
    )?;
    write_episode_csv(
        BufWriter::new(File::create(out.join("eval_episodes.csv"))?),
        &run.eval.rows,
    )?;
    println!(
        "mode={} train_episodes={} eval_episodes={} time={:.1}s",
        config.train.gc.mode,
        run.train_rows.len(),
        run.eval.rows.len(),
        start.elapsed().as_secs_f64()
    );
    println!("{}", result_line(&config, &run.eval));
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    if args.episodes == Some(0) {
        return Err(Error::Config("--episodes must be positive".into()));
    }
    let ckpt = load_checkpoint(&args.checkpoint, None)?;
    let model = TrainedModel::from_checkpoint(&ckpt)?;
    let dataset = load_data(&args.data)?;
    if let Some(path) = &args.config {
        let flags = ConfigFlags {
            config: Some(path.clone()),
            ..ConfigFlags::default()
        };
        let expected = resolve_config(model.config.task, &flags, None, None, &dataset)?;
        if expected.fingerprint() != ckpt.fingerprint {
            return Err(Error::Config(format!(
                "checkpoint fingerprint {} does not match config fingerprint {}",
                ckpt.fingerprint,
                expected.fingerprint()
            )));
        }
    }
    print_config(&model.config);
    match model.config.task {
        Task::Classify => {
            let ev = evaluate(&model, &dataset)?;
            for (k, row) in ev.confusion.iter().enumerate() {
                let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
                println!("confusion {k}: {}", cells.join(" "));
            }
            println!("RESULT task=classify acc={:.4} loss={:.4}", ev.accuracy, ev.loss);
        }
        Task::FewShot => {
            let episodes = args.episodes.unwrap_or(model.config.episodes.eval_episodes);
            let test = held_out_classes(&model, &dataset)?;
            let summary = evaluate_episodes(
                &model,
                &test,
                episodes,
                &mut eval_rng(model.config.train.seed),
            )?;
            if let Some(out) = &args.out {
                write_episode_csv(BufWriter::new(File::create(out)?), &summary.rows)?;
            }
            println!("{}", result_line(&model.config, &summary));
        }
    }
    Ok(())
}

pub fn extract_features(args: &ExtractArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint, None)?;
    let model = TrainedModel::from_checkpoint(&ckpt)?;
    let dataset = load_data(&args.data)?;
    print_config(&model.config);
    let images: Vec<_> = dataset.images.iter().collect();
    let features = model.net.embed(&model.store, &images, BnMode::Eval)?;
    write_features(&args.out, &features)?;
    println!(
        "wrote {} vectors of length {} to {}",
        features.shape()[0],
        features.shape()[1],
        args.out.display()
    );
    Ok(())
}

pub fn import_raw(args: &ImportRawArgs) -> Result<()> {
    let ds = import_raw_dir(&args.dir, args.height, args.width)?;
    let (img, lab) = idx_paths(&args.out);
    write_idx_files(&ds, &img, &lab)?;
    println!(
        "imported {} images in {} classes into {} and {}",
        ds.len(),
        ds.num_classes(),
        img.display(),
        lab.display()
    );
    Ok(())
}

/// Returns whether every check passed.
pub fn selftest(args: &SelftestArgs) -> Result<bool> {
    let fault = match &args.inject_fault {
        Some(op) => Some(Fault {
            op: op.parse::<OpKind>()?,
            factor: args.fault_factor,
        }),
        None => None,
    };
    let opts = SelftestOptions {
        seed: args.seed,
        fault,
        ..SelftestOptions::default()
    };
    println!("# selftest seed={} fault={:?}", opts.seed, fault);
    let start = Instant::now();
    let results = run_all(&opts)?;
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!(
        "selftest: {} checks, {} failed, {:.1}s",
        results.len(),
        failed,
        start.elapsed().as_secs_f64()
    );
    Ok(failed == 0)
}
