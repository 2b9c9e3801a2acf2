mod common;

use std::fs;
use std::path::Path;

use common::ks_uniform_p;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tactile_pose::dataset::{collect, manifest, normalize_labels, CollectSpec, Dataset, DatasetError, LabelScaler, Split};
use tactile_pose::sim::{SimConfig, Simulator, TactileImage};
use tactile_pose::{ObjectType, PoseRanges};

fn small_sim() -> Simulator {
    Simulator::new(SimConfig::small()).unwrap()
}

fn ten_surface() -> Dataset {
    collect(&CollectSpec::standard(ObjectType::Surface, 10, 11, Split::Train), &small_sim(), 1).unwrap()
}

fn edit_index(dir: &Path, edit: impl Fn(&mut Vec<Vec<String>>)) {
    let path = dir.join("index.csv");
    let mut rows: Vec<Vec<String>> = fs::read_to_string(&path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    edit(&mut rows);
    let text: String = rows.iter().map(|r| r.join(",") + "\n").collect();
    fs::write(path, text).unwrap();
}

#[test]
fn save_load_round_trip() {
    let d = ten_surface();
    let dir = tempfile::tempdir().unwrap();
    d.save(dir.path()).unwrap();
    assert_eq!(Dataset::load(dir.path()).unwrap(), d);

    let e = collect(&CollectSpec::standard(ObjectType::Edge, 10, 12, Split::Test), &small_sim(), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    e.save(dir.path()).unwrap();
    assert_eq!(Dataset::load(dir.path()).unwrap(), e);
}

#[test]
fn on_disk_layout() {
    let d = ten_surface();
    let dir = tempfile::tempdir().unwrap();
    d.save(dir.path()).unwrap();
    let index = fs::read_to_string(dir.path().join("index.csv")).unwrap();
    let header = index.lines().next().unwrap();
    assert_eq!(header, "id,depth,roll,pitch,dx,dy,d_depth,d_roll,d_pitch,d_yaw,image,sha256");
    assert_eq!(index.lines().count(), 11);
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["object_type"], "surface");
    assert_eq!(meta["n_samples"], 10);
    let first_image = index.lines().nth(1).unwrap().split(',').nth(10).unwrap().to_string();
    let pgm = fs::read(dir.path().join(first_image)).unwrap();
    assert!(pgm.starts_with(b"P5\n64 64\n255\n"));
    assert!(pgm[13..].iter().all(|&b| b == 0 || b == 255));
}

#[test]
fn out_of_range_roll_names_the_sample() {
    let d = ten_surface();
    let dir = tempfile::tempdir().unwrap();
    d.save(dir.path()).unwrap();
    let id = d.samples[4].id;
    edit_index(dir.path(), |rows| rows[5][2] = "47.5".into());
    match Dataset::load(dir.path()) {
        Err(DatasetError::OutOfRange { id: got, component, .. }) => {
            assert_eq!(got, id);
            assert_eq!(component, "roll");
        }
        other => panic!("expected out-of-range error, got {other:?}"),
    }
    let msg = Dataset::load(dir.path()).unwrap_err().to_string();
    assert!(msg.contains(&format!("sample {id}")), "{msg}");
}

#[test]
fn truncated_image_reports_its_path() {
    let d = ten_surface();
    let dir = tempfile::tempdir().unwrap();
    d.save(dir.path()).unwrap();
    let name = fs::read_to_string(dir.path().join("index.csv")).unwrap().lines().nth(3).unwrap().split(',').nth(10).unwrap().to_string();
    let path = dir.path().join(&name);
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    let err = Dataset::load(dir.path()).unwrap_err();
    assert!(err.to_string().contains(&name), "{err}");

    // The decoder itself also names the file when the header promises more data.
    let err = TactileImage::from_pgm(&bytes[..bytes.len() / 2], "cut.pgm").unwrap_err();
    assert!(err.to_string().contains("cut.pgm"), "{err}");
}

#[test]
fn missing_image_and_bad_checksum_are_distinct() {
    let d = ten_surface();
    let dir = tempfile::tempdir().unwrap();
    d.save(dir.path()).unwrap();
    let rows: Vec<Vec<String>> = fs::read_to_string(dir.path().join("index.csv"))
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();

    fs::remove_file(dir.path().join(&rows[1][10])).unwrap();
    assert!(matches!(Dataset::load(dir.path()), Err(DatasetError::MissingImage { .. })));

    d.save(dir.path()).unwrap();
    edit_index(dir.path(), |rows| rows[2][11] = "0".repeat(64));
    assert!(matches!(Dataset::load(dir.path()), Err(DatasetError::Checksum { id, .. }) if id == d.samples[1].id));

    d.save(dir.path()).unwrap();
    edit_index(dir.path(), |rows| rows[3][1] = "deep".into());
    assert!(matches!(Dataset::load(dir.path()), Err(DatasetError::MalformedRow { line: 4, .. })));
}

#[test]
fn collection_is_byte_identical() {
    let sim = small_sim();
    let spec = CollectSpec::standard(ObjectType::Edge, 25, 99, Split::Validation);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    collect(&spec, &sim, 1).unwrap().save(a.path()).unwrap();
    collect(&spec, &sim, 3).unwrap().save(b.path()).unwrap();
    let ma = manifest(a.path()).unwrap();
    assert_eq!(ma.len(), 27);
    assert_eq!(ma, manifest(b.path()).unwrap());
}

#[test]
fn splits_have_disjoint_images() {
    // An edge pose just past the rim can miss the object entirely, and every
    // such sample shows the undeformed rest pattern. Those carry no pose
    // information and are excluded; all other images must be unique.
    let sim = small_sim();
    for object in [ObjectType::Surface, ObjectType::Edge] {
        let mut seen = std::collections::HashMap::new();
        let mut untouched = 0;
        for split in Split::ALL {
            let d = collect(&CollectSpec::standard(object, 300, split.seed(7), split), &sim, 1).unwrap();
            for s in &d.samples {
                if s.image == *sim.rest_image() {
                    untouched += 1;
                    continue;
                }
                if let Some(prev) = seen.insert(s.image.to_pgm(), split) {
                    assert_eq!(prev, split, "{object:?}: {split:?} sample {} repeats a {prev:?} image", s.id);
                }
            }
        }
        assert!(untouched * 50 < 900, "{object:?}: {untouched} samples without contact");
    }
}

#[test]
fn label_marginals_are_uniform() {
    let sim = small_sim();
    for object in [ObjectType::Surface, ObjectType::Edge] {
        let d = collect(&CollectSpec::standard(object, 2000, 3, Split::Train), &sim, 1).unwrap();
        let labels = d.labels();
        for (k, c) in object.components().iter().enumerate() {
            let iv = d.meta.label_ranges.get(*c).unwrap();
            let xs: Vec<f64> = labels.iter().map(|l| l[k]).collect();
            let p = ks_uniform_p(&xs, iv.lo, iv.hi);
            assert!(p > 0.01, "{object:?} {c:?} p = {p}");
        }
    }
}

#[test]
fn normalization_examples_and_round_trip() {
    let surface = LabelScaler::from_ranges(ObjectType::Surface, &PoseRanges::surface_labels()).unwrap();
    assert_eq!(surface.normalize(&[-5.0, 0.0, 0.0])[0], -1.0);
    let edge = LabelScaler::from_ranges(ObjectType::Edge, &PoseRanges::edge_labels()).unwrap();
    assert_eq!(edge.normalize(&[0.0, 0.0, 0.0, 0.0, 22.5])[4], 0.5);

    let d = ten_surface();
    let (scaled, scaler) = normalize_labels(&d).unwrap();
    for (s, orig) in scaled.iter().zip(d.labels()) {
        assert!(s.iter().all(|v| (-1.0..=1.0).contains(v)));
        for (a, b) in scaler.denormalize(s).iter().zip(&orig) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let label: Vec<f64> = (0..5).map(|_| rng.gen_range(-45.0..45.0)).collect();
        let back = edge.denormalize(&edge.normalize(&label));
        for (a, b) in back.iter().zip(&label) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn zero_bound_is_rejected() {
    let ranges = PoseRanges::surface_labels().with(tactile_pose::Component::Roll, 0.0, 0.0);
    assert!(LabelScaler::from_ranges(ObjectType::Surface, &ranges).is_err());
}
