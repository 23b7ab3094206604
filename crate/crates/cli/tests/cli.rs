use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const GCCN: &str = env!("CARGO_BIN_EXE_gccn");

fn gccn(args: &[&str]) -> Output {
    Command::new(GCCN).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_data(dir: &Path, name: &str) -> String {
    let prefix = dir.join(name);
    let o = gccn(&[
        "gen-data", "--classes", "6", "--per-class", "8", "--size", "16", "--out", s(&prefix),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    prefix.to_str().unwrap().to_string()
}

const FEWSHOT_FLAGS: &[&str] = &[
    "--blocks", "2", "--filters", "4", "--grid", "2", "--ways", "2", "--shots", "1", "--queries", "2",
    "--train-episodes", "4", "--eval-episodes", "6", "--train-fraction", "0.5",
];

fn train_fewshot(data: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train-fewshot", "--data", data, "--out", s(out)];
    args.extend_from_slice(FEWSHOT_FLAGS);
    args.extend_from_slice(extra);
    gccn(&args)
}

#[test]
fn gen_data_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_data(dir.path(), "a");
    let b = small_data(dir.path(), "b");
    for suffix in ["-images.idx", "-labels.idx"] {
        let x = fs::read(format!("{a}{suffix}")).unwrap();
        assert_eq!(x, fs::read(format!("{b}{suffix}")).unwrap());
    }
    // 16-byte image header + 6*8 images of 16x16
    assert_eq!(fs::metadata(format!("{a}-images.idx")).unwrap().len(), 16 + 48 * 256);
}

#[test]
fn bad_arguments_exit_two_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    for args in [
        vec!["gen-data", "--classes", "1", "--out", s(&out)],
        vec!["gen-data", "--no-such-flag"],
        vec!["train-fewshot", "--ways", "lots"],
    ] {
        let o = gccn(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        let err = stderr(&o);
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with("error: kind="), "{err}");
    }
}

#[test]
fn missing_data_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = train_fewshot(s(&dir.path().join("absent")), &dir.path().join("run"), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: kind=io"), "{}", stderr(&o));
}

#[test]
fn fewshot_train_eval_and_features() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), "g");
    let run = dir.path().join("run");
    let o = train_fewshot(&data, &run, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("# fingerprint"), "{text}");
    let result = text.lines().find(|l| l.starts_with("RESULT")).unwrap();
    assert!(result.contains("ways=2 shots=1"), "{result}");
    let ckpt = run.join("model.gccn");
    let eval_csv = fs::read_to_string(run.join("eval_episodes.csv")).unwrap();
    assert_eq!(eval_csv.lines().next().unwrap(), "episode_id,W,K,metric,head,loss,accuracy");
    assert_eq!(eval_csv.lines().count(), 1 + 6);

    // eval reproduces the training-time evaluation
    let o = gccn(&["eval", "--checkpoint", s(&ckpt), "--data", &data]);
    assert!(o.status.success(), "{}", stderr(&o));
    let again = stdout(&o);
    assert!(again.lines().any(|l| l == result), "{again}");

    let o = gccn(&["eval", "--checkpoint", s(&ckpt), "--data", &data, "--episodes", "0"]);
    assert_eq!(o.status.code(), Some(2));

    // a config that differs from the one trained with is refused
    let cfg = dir.path().join("other.cfg");
    fs::write(&cfg, "task = fewshot\nblocks = 2\nfilters = 8\n").unwrap();
    let o = gccn(&["eval", "--checkpoint", s(&ckpt), "--data", &data, "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let feats = dir.path().join("f.gcfv");
    let o = gccn(&["extract-features", "--checkpoint", s(&ckpt), "--data", &data, "--out", s(&feats)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let bytes = fs::read(&feats).unwrap();
    assert_eq!(&bytes[..8], b"GCFV0001");
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let count = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    assert_eq!(count, 48);
    // 2 blocks of 4 filters on 16x16 leave a 2x2x4 map; augnorm adds 4 GC values
    assert_eq!(len, 16 + 4);
    assert_eq!(bytes.len(), 16 + 4 * len * count);
}

#[test]
fn config_file_and_flags_combine() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), "g");
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# small run\nfilters = 8\nseed = 4\n").unwrap();
    let run = dir.path().join("run");
    let o = train_fewshot(&data, &run, &["--config", s(&cfg), "--seed", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("seed = 5"), "{text}");
    assert!(text.contains("filters = 4"), "{text}");

    fs::write(&cfg, "filters = 8\nwidth_of_nothing = 3\n").unwrap();
    let o = train_fewshot(&data, &run, &["--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn classify_run_writes_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), "g");
    let run = dir.path().join("run");
    let o = gccn(&[
        "train-classify", "--data", &data, "--out", s(&run), "--blocks", "2", "--filters", "4", "--grid", "2",
        "--epochs", "2", "--batch-size", "8",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).lines().any(|l| l.starts_with("RESULT task=classify")));
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "epoch,split,loss,accuracy");
    assert_eq!(csv.lines().count(), 1 + 2 * 3);

    let o = gccn(&["eval", "--checkpoint", s(&run.join("model.gccn")), "--data", &data]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn import_raw_writes_idx() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("raw");
    for (class, value) in [("a", 0u8), ("b", 255u8)] {
        fs::create_dir_all(root.join(class)).unwrap();
        for i in 0..3 {
            fs::write(root.join(class).join(format!("{i}.bin")), vec![value; 20]).unwrap();
        }
    }
    let prefix = dir.path().join("imported");
    let o = gccn(&["import-raw", "--dir", s(&root), "--height", "4", "--width", "5", "--out", s(&prefix)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let labels = fs::read(format!("{}-labels.idx", s(&prefix))).unwrap();
    assert_eq!(&labels[8..], &[0, 0, 0, 1, 1, 1]);

    let o = gccn(&["import-raw", "--dir", s(&root), "--height", "4", "--width", "4", "--out", s(&prefix)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn selftest_passes_and_catches_faults() {
    let o = gccn(&["selftest"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).lines().filter(|l| l.starts_with("PASS")).count() >= 30);

    let o = gccn(&["selftest", "--inject-fault", "patch_max"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).lines().any(|l| l.starts_with("FAIL gradient/extract_gc")), "{}", stdout(&o));

    let o = gccn(&["selftest", "--inject-fault", "nonsense"]);
    assert_eq!(o.status.code(), Some(2));
}
