use std::collections::BTreeMap;
use std::path::Path;

use ecmc::dataset::{load_dataset, read_manifest, save_dataset, FeaturePaths, Manifest, ManifestSample, MatrixFormat};
use ecmc::error::CliError;
use ecmc::formats::{
    decode_checkpoint, decode_matrix, encode_checkpoint, encode_matrix, read_checkpoint, read_csv_matrix, read_matrix,
    vocab_text, write_bytes, write_checkpoint, write_csv_matrix, write_matrix,
};
use ecmc_core::data::{generate_synthetic, ModalitySpec, Split, SyntheticConfig, REFERENCE_SPLITS};
use ecmc_core::decoder::Vocab;
use ecmc_core::Tensor;
use proptest::prelude::*;

fn dataset(seed: u64) -> ecmc_core::data::Dataset {
    let cfg = SyntheticConfig {
        splits: [12, 3, 5],
        modalities: [
            ModalitySpec {
                t_min: 1,
                t_max: 4,
                dim: 3,
            },
            ModalitySpec {
                t_min: 2,
                t_max: 5,
                dim: 2,
            },
            ModalitySpec {
                t_min: 1,
                t_max: 2,
                dim: 4,
            },
        ],
        prior_multiplier: 3.0,
        seed,
        ..SyntheticConfig::default()
    };
    generate_synthetic(&cfg, &Vocab::caption_default()).unwrap()
}

#[test]
fn dataset_round_trips_in_both_formats() {
    for format in [MatrixFormat::Ecmf, MatrixFormat::Csv] {
        let dir = tempfile::tempdir().unwrap();
        let d = dataset(4);
        save_dataset(&d, dir.path(), format).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, d, "{format:?}");
    }
}

#[test]
fn matrices_and_checkpoints_round_trip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let t = Tensor::from_rows(&[[1.5, -0.0, 1e-300], [f64::MAX, 3.0, -7.25]]).unwrap();
    let p = dir.path().join("m.ecmf");
    write_matrix(&p, &t).unwrap();
    assert_eq!(read_matrix(&p).unwrap(), t);
    let c = dir.path().join("m.csv");
    write_csv_matrix(&c, &t).unwrap();
    assert_eq!(read_csv_matrix(&c).unwrap(), t);

    let mut named = BTreeMap::new();
    named.insert("emotion.fusion.w_3".to_owned(), t.clone());
    named.insert("prefix.b_e".to_owned(), Tensor::zeros(1, 4));
    let k = dir.path().join("x.ecmb");
    write_checkpoint(&k, &named).unwrap();
    assert_eq!(read_checkpoint(&k).unwrap(), named);
}

fn expect_format_error(err: CliError, name: &str) {
    let msg = err.to_string();
    assert!(matches!(err, CliError::Format { .. }), "{msg}");
    assert_eq!(err.exit_code(), 3);
    assert!(msg.contains(name), "{msg} does not name {name}");
}

#[test]
fn truncated_files_are_reported_with_their_path() {
    let dir = tempfile::tempdir().unwrap();
    let t = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
    let bytes = encode_matrix(&t);
    for cut in [0, 3, 8, bytes.len() - 1] {
        let p = dir.path().join(format!("cut{cut}.ecmf"));
        write_bytes(&p, &bytes[..cut]).unwrap();
        expect_format_error(read_matrix(&p).unwrap_err(), &format!("cut{cut}.ecmf"));
    }
    let mut named = BTreeMap::new();
    named.insert("w".to_owned(), t);
    let ck = encode_checkpoint(&named);
    let p = dir.path().join("short.ecmb");
    write_bytes(&p, &ck[..ck.len() - 5]).unwrap();
    expect_format_error(read_checkpoint(&p).unwrap_err(), "short.ecmb");

    let p = dir.path().join("wrong.ecmb");
    write_bytes(&p, &bytes).unwrap();
    expect_format_error(read_checkpoint(&p).unwrap_err(), "wrong.ecmb");

    let missing = dir.path().join("absent.ecmf");
    let e = read_matrix(&missing).unwrap_err();
    assert_eq!(e.exit_code(), 3);
    assert!(e.to_string().contains("absent.ecmf"));
}

#[test]
fn ragged_csv_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("r.csv");
    write_bytes(&p, b"1,2,3\n4,5\n").unwrap();
    expect_format_error(read_csv_matrix(&p).unwrap_err(), "r.csv");
}

#[test]
fn broken_manifest_entries_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&dataset(1), dir.path(), MatrixFormat::Ecmf).unwrap();
    let path = dir.path().join("manifest.json");
    let mut m = read_manifest(&path).unwrap();
    m.samples[2].emotion = 7;
    write_bytes(&path, serde_json::to_string(&m).unwrap().as_bytes()).unwrap();
    let e = load_dataset(dir.path()).unwrap_err();
    assert!(e.to_string().contains("samples[2].emotion"), "{e}");
}

/// Writes a manifest with the reference split sizes whose samples all share
/// one set of tiny feature files.
fn reference_sized_manifest(dir: &Path) {
    let vocab = Vocab::caption_default();
    write_bytes(&dir.join("vocab.txt"), vocab_text(&vocab).as_bytes()).unwrap();
    let f = Tensor::from_rows(&[[0.5, -0.5]]).unwrap();
    for m in ["v", "a", "t"] {
        write_matrix(&dir.join(format!("{m}.ecmf")), &f).unwrap();
    }
    let mut samples = Vec::new();
    let mut sizes = BTreeMap::new();
    for (split, &n) in Split::ALL.iter().zip(&REFERENCE_SPLITS) {
        sizes.insert(split.name().to_owned(), n);
        for i in 0..n {
            samples.push(ManifestSample {
                id: format!("{}-{i}", split.name()),
                split: split.name().to_owned(),
                emotion: (i % 3) as i64 - 1,
                cognition: if i % 7 == 0 { vec!["memory".to_owned()] } else { vec![] },
                caption: "emotion neutral . cognition none .".to_owned(),
                features: FeaturePaths {
                    video: "v.ecmf".to_owned(),
                    audio: "a.ecmf".to_owned(),
                    text: "t.ecmf".to_owned(),
                },
            });
        }
    }
    let m = Manifest {
        schema: 1,
        vocab: "vocab.txt".to_owned(),
        split_sizes: Some(sizes),
        samples,
    };
    write_bytes(&dir.join("manifest.json"), serde_json::to_vec(&m).unwrap().as_slice()).unwrap();
}

#[test]
fn reference_split_sizes_load() {
    let dir = tempfile::tempdir().unwrap();
    reference_sized_manifest(dir.path());
    let d = load_dataset(dir.path()).unwrap();
    assert_eq!(d.split(Split::Train).len(), 13_536);
    assert_eq!(d.split(Split::Val).len(), 1_402);
    assert_eq!(d.split(Split::Test).len(), 3_790);

    // A declared count that disagrees with the samples is an error.
    let path = dir.path().join("manifest.json");
    let mut m = read_manifest(&path).unwrap();
    m.split_sizes.as_mut().unwrap().insert("val".to_owned(), 1_401);
    write_bytes(&path, serde_json::to_vec(&m).unwrap().as_slice()).unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap_err().exit_code(), 3);
}

proptest! {
    #[test]
    fn matrix_encoding_round_trips(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let data: Vec<f64> = (0..rows * cols).map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 2)).collect();
        let t = Tensor::new(rows, cols, data).unwrap();
        let back = decode_matrix(&encode_matrix(&t), Path::new("mem")).unwrap();
        prop_assert_eq!(back.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(), t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn checkpoint_encoding_round_trips(n in 0usize..5, seed in any::<u64>()) {
        let mut named = BTreeMap::new();
        for i in 0..n {
            let v = (seed % 1000) as f64 / 7.0 + i as f64;
            named.insert(format!("p{i}.w"), Tensor::new(i + 1, 2, vec![v; 2 * (i + 1)]).unwrap());
        }
        prop_assert_eq!(decode_checkpoint(&encode_checkpoint(&named), Path::new("mem")).unwrap(), named);
    }
}
