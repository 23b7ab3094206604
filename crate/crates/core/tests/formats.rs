use gccn_core::config::Precision;
use gccn_core::data::{
    decode_features, encode_features, gen_synthetic_glyphs, load_checkpoint, load_idx, read_features, save_checkpoint,
    write_features, write_idx, write_idx_files, Checkpoint, GlyphConfig, RngState,
};
use gccn_core::{Error, Tensor};
use proptest::collection::vec;
use proptest::prelude::*;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tensor() -> impl Strategy<Value = Tensor> {
    vec(1usize..4, 1..4).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        vec(-1e6f64..1e6, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
    })
}

fn checkpoint(precision: Precision, tensors: Vec<Tensor>, draws: u8) -> Checkpoint {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..draws {
        rng.next_u64();
    }
    Checkpoint {
        fingerprint: "ab".repeat(32),
        precision,
        tensors: tensors.into_iter().enumerate().map(|(i, t)| (format!("t{i}"), t)).collect(),
        config_text: "seed = 5\n".into(),
        rng: RngState::capture(&rng),
    }
}

proptest! {
    #[test]
    fn f64_checkpoints_round_trip_exactly(ts in vec(tensor(), 0..4), draws in 0u8..40) {
        let ckpt = checkpoint(Precision::F64, ts, draws);
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ckpt);
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn f32_checkpoints_are_stable_after_one_trip(ts in vec(tensor(), 1..4)) {
        let once = Checkpoint::from_bytes(&checkpoint(Precision::F32, ts, 0).to_bytes()).unwrap();
        let twice = Checkpoint::from_bytes(&once.to_bytes()).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn any_truncation_is_rejected(ts in vec(tensor(), 1..3), cut in 0.0f64..1.0) {
        let bytes = checkpoint(Precision::F64, ts, 0).to_bytes();
        let keep = ((bytes.len() as f64) * cut) as usize;
        prop_assert!(Checkpoint::from_bytes(&bytes[..keep]).is_err());
    }

    #[test]
    fn features_round_trip_through_f32(rows in 1usize..6, cols in 1usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| (rng.next_u32() as f32 / 7.0) as f64).collect();
        let t = Tensor::new(vec![rows, cols], data).unwrap();
        let bytes = encode_features(&t).unwrap();
        prop_assert_eq!(bytes.len(), 16 + 4 * rows * cols);
        prop_assert_eq!(decode_features(&bytes).unwrap(), t);
    }
}

#[test]
fn files_round_trip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen_synthetic_glyphs(&GlyphConfig {
        classes: 3,
        per_class: 4,
        size: 16,
        ..GlyphConfig::default()
    })
    .unwrap();
    let (img, lab) = (dir.path().join("g-images.idx"), dir.path().join("g-labels.idx"));
    write_idx_files(&ds, &img, &lab).unwrap();
    let back = load_idx(&img, &lab).unwrap();
    assert_eq!(back.labels, ds.labels);
    assert_eq!(write_idx(&back).unwrap(), write_idx(&ds).unwrap());

    let ckpt = checkpoint(Precision::F64, vec![Tensor::full(&[2, 2], 0.25)], 3);
    let path = dir.path().join("m.gccn");
    save_checkpoint(&path, &ckpt).unwrap();
    assert_eq!(load_checkpoint(&path, Some(&ckpt.fingerprint)).unwrap(), ckpt);
    assert!(matches!(load_checkpoint(&path, Some("cd")), Err(Error::Config(_))));

    let feats = Tensor::new(vec![2, 3], vec![0.5, 1.0, -2.0, 0.0, 4.0, 8.0]).unwrap();
    let fpath = dir.path().join("f.gcfv");
    write_features(&fpath, &feats).unwrap();
    assert_eq!(read_features(&fpath).unwrap(), feats);
}

#[test]
fn restored_rng_continues_the_stream() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    rng.next_u64();
    let state = RngState::capture(&rng);
    let mut resumed = state.restore();
    assert_eq!(rng.next_u64(), resumed.next_u64());
}
