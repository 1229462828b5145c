use std::fs;

use mutatt_core::data::{Dataset, FEATURES_FILE, INDEX_FILE};
use mutatt_core::synth::{centroid_oracle, generate_synthetic, ledger_match, oracle_accuracy, SynthSpec};
use mutatt_core::Error;
use sha2::{Digest, Sha256};

fn digest(dir: &std::path::Path) -> Vec<u8> {
    let mut h = Sha256::new();
    for f in [INDEX_FILE, FEATURES_FILE, "vocab.txt"] {
        h.update(fs::read(dir.join(f)).unwrap());
    }
    h.finalize().to_vec()
}

#[test]
fn generator_is_a_pure_function_of_the_spec() {
    let spec = SynthSpec {
        num_images: 60,
        seed: 4,
        ..SynthSpec::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_synthetic(&spec).unwrap().0.save(a.path()).unwrap();
    generate_synthetic(&spec).unwrap().0.save(b.path()).unwrap();
    assert_eq!(digest(a.path()), digest(b.path()));
    let other = SynthSpec { seed: 5, ..spec };
    let c = tempfile::tempdir().unwrap();
    generate_synthetic(&other).unwrap().0.save(c.path()).unwrap();
    assert_ne!(digest(a.path()), digest(c.path()));
}

#[test]
fn saved_dataset_loads_back_identically() {
    let (ds, _) = generate_synthetic(&SynthSpec {
        num_images: 25,
        seed: 1,
        ..SynthSpec::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back.vocab, ds.vocab, "vocab");
    for (a, b) in back.images.iter().zip(&ds.images) {
        assert_eq!(a.size, b.size, "size");
        for (r, s) in a.regions.iter().zip(&b.regions) {
            assert_eq!(r.bbox, s.bbox, "bbox");
            assert_eq!(r.category, s.category);
            assert_eq!(r.context, s.context);
            assert_eq!(r.grid, s.grid, "grid");
        }
        assert_eq!(a.detections.len(), b.detections.len());
    }
    assert_eq!(back.expressions, ds.expressions);
    assert_eq!(back, ds);
}

#[test]
fn ledger_alone_identifies_every_target_at_zero_noise() {
    let (ds, ledger) = generate_synthetic(&SynthSpec {
        num_images: 200,
        noise_std: 0.0,
        seed: 2,
        ..SynthSpec::default()
    })
    .unwrap();
    let all: Vec<usize> = (0..ds.expressions.len()).collect();
    assert_eq!(oracle_accuracy(&ledger, &ds, &all, ledger_match), 1.0);
    assert_eq!(oracle_accuracy(&ledger, &ds, &all, centroid_oracle), 1.0);
}

#[test]
fn centroid_oracle_reaches_99_percent_at_default_noise() {
    let (ds, ledger) = generate_synthetic(&SynthSpec::default()).unwrap();
    assert!(ds.expressions.len() >= 1000);
    let first: Vec<usize> = (0..1000).collect();
    let acc = oracle_accuracy(&ledger, &ds, &first, centroid_oracle);
    assert!(acc >= 0.99, "centroid oracle accuracy {acc}");
}

#[test]
fn loader_names_the_offending_expression() {
    let (ds, _) = generate_synthetic(&SynthSpec {
        num_images: 10,
        seed: 3,
        ..SynthSpec::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    let path = dir.path().join(INDEX_FILE);
    let mut index: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    let victim = index["expressions"][2]["id"].as_u64().unwrap();
    index["expressions"][2]["image_id"] = serde_json::json!(9999);
    fs::write(&path, serde_json::to_string(&index).unwrap()).unwrap();
    match Dataset::load(dir.path()) {
        Err(Error::DanglingReference(msg)) => assert!(msg.contains(&format!("expression {victim}")), "{msg}"),
        other => panic!("expected a dangling reference, got {other:?}"),
    }
}

#[test]
fn loader_reports_bad_dimensions_and_versions() {
    let (ds, _) = generate_synthetic(&SynthSpec {
        num_images: 5,
        seed: 3,
        ..SynthSpec::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    let path = dir.path().join(INDEX_FILE);
    let text = fs::read_to_string(&path).unwrap();

    let mut index: serde_json::Value = serde_json::from_str(&text).unwrap();
    index["d_v"] = serde_json::json!(ds.visual_dim + 1);
    fs::write(&path, serde_json::to_string(&index).unwrap()).unwrap();
    assert!(matches!(Dataset::load(dir.path()), Err(Error::DimensionMismatch(_))));

    let mut index: serde_json::Value = serde_json::from_str(&text).unwrap();
    index["version"] = serde_json::json!(7);
    fs::write(&path, serde_json::to_string(&index).unwrap()).unwrap();
    assert!(matches!(
        Dataset::load(dir.path()),
        Err(Error::VersionMismatch { found: 7, .. })
    ));

    fs::remove_file(&path).unwrap();
    assert!(matches!(Dataset::load(dir.path()), Err(Error::MissingFile(_))));
}
