//! Shear-perturbed tactile datasets and their on-disk format.
//!
//! A dataset directory holds:
//!
//! * `meta.json`: object type, split, seed, label and perturbation ranges,
//!   image size and the simulator config hash;
//! * `index.csv`: one row per sample with columns `id`, the label components
//!   in label order, `dx, dy, d_depth, d_roll, d_pitch, d_yaw`, `image`
//!   (file name) and `sha256` (of the image file);
//! * one 8-bit binary PGM (P5, values 0/255) per sample, `img_<id>.pgm`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::pose::{
    sample_perturbation, sample_pose, Component, ObjectType, Perturbation, Pose, PoseError,
    PoseRanges,
};
use crate::sim::{ContactObject, ImageError, SimError, Simulator, TactileImage};

pub const FORMAT_VERSION: u32 = 1;
const PERTURBATION_COLUMNS: [&str; 6] = ["dx", "dy", "d_depth", "d_roll", "d_pitch", "d_yaw"];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset needs at least one sample")]
    Empty,
    #[error(transparent)]
    Pose(#[from] PoseError),
    #[error("sample {id}: {source}")]
    Contact {
        id: u64,
        #[source]
        source: SimError,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid metadata: {reason}")]
    Meta { path: String, reason: String },
    #[error("{path}, line {line}: malformed index row: {reason}")]
    MalformedRow { path: String, line: u64, reason: String },
    #[error("sample {id}: {component} = {value} lies outside its declared range")]
    OutOfRange { id: u64, component: String, value: f64 },
    #[error("sample {id}: missing image file {path}")]
    MissingImage { id: u64, path: String },
    #[error("sample {id}: checksum mismatch for {path}")]
    Checksum { id: u64, path: String },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("datasets disagree: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    /// Seed of this split derived from a run seed; distinct per split.
    pub fn seed(self, base: u64) -> u64 {
        splitmix64(base ^ splitmix64(self as u64 + 1))
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent random stream for sample `id` of a dataset with `seed`.
pub fn sample_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub image: TactileImage,
    pub label: Pose,
    /// Kept for auditing only; training code never reads it.
    pub perturbation: Perturbation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub object_type: ObjectType,
    pub split: Split,
    pub seed: u64,
    pub n_samples: usize,
    pub image_size: usize,
    pub label_ranges: PoseRanges,
    pub perturbation_ranges: PoseRanges,
    pub sim_config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<Sample>,
}

/// Parameters of one dataset collection run.
#[derive(Debug, Clone)]
pub struct CollectSpec {
    pub object_type: ObjectType,
    pub n: usize,
    pub label_ranges: PoseRanges,
    pub perturbation_ranges: PoseRanges,
    pub seed: u64,
    pub split: Split,
}

impl CollectSpec {
    /// Standard label and perturbation ranges for `object_type`.
    pub fn standard(object_type: ObjectType, n: usize, seed: u64, split: Split) -> Self {
        Self {
            object_type,
            n,
            label_ranges: PoseRanges::labels(object_type),
            perturbation_ranges: PoseRanges::perturbation(),
            seed,
            split,
        }
    }
}

/// The object a dataset of `object_type` is collected on.
pub fn collection_object(object_type: ObjectType) -> ContactObject {
    match object_type {
        ObjectType::Surface => ContactObject::Plane,
        ObjectType::Edge => ContactObject::HalfPlaneEdge,
    }
}

fn collect_one(spec: &CollectSpec, sim: &Simulator, id: u64) -> Result<Sample, DatasetError> {
    let object = collection_object(spec.object_type);
    let mut rng = sample_rng(spec.seed, id);
    let label = sample_pose(spec.object_type, &spec.label_ranges, &mut rng)?;
    let perturbation = sample_perturbation(&spec.perturbation_ranges, &mut rng)?;
    let image = sim
        .capture(&object, &label, &perturbation)
        .map_err(|source| DatasetError::Contact { id, source })?;
    Ok(Sample {
        id,
        image,
        label,
        perturbation,
    })
}

/// Generate a dataset. Each sample draws from its own stream derived from
/// `(seed, id)`, so the result does not depend on `threads`.
pub fn collect(spec: &CollectSpec, sim: &Simulator, threads: usize) -> Result<Dataset, DatasetError> {
    if spec.n == 0 {
        return Err(DatasetError::Empty);
    }
    spec.label_ranges.validate_labels(spec.object_type)?;
    spec.perturbation_ranges.validate_perturbation()?;
    let threads = threads.clamp(1, spec.n);
    let samples = if threads == 1 {
        (0..spec.n as u64)
            .map(|id| collect_one(spec, sim, id))
            .collect::<Result<Vec<_>, _>>()?
    } else {
        let chunk = spec.n.div_ceil(threads);
        let parts: Vec<Result<Vec<Sample>, DatasetError>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let lo = (t * chunk) as u64;
                    let hi = ((t + 1) * chunk).min(spec.n) as u64;
                    s.spawn(move || (lo..hi).map(|id| collect_one(spec, sim, id)).collect())
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("collector thread panicked"))
                .collect()
        });
        let mut samples = Vec::with_capacity(spec.n);
        for part in parts {
            samples.extend(part?);
        }
        samples
    };
    Ok(Dataset {
        meta: DatasetMeta {
            format_version: FORMAT_VERSION,
            object_type: spec.object_type,
            split: spec.split,
            seed: spec.seed,
            n_samples: spec.n,
            image_size: sim.geometry().image_size,
            label_ranges: spec.label_ranges.clone(),
            perturbation_ranges: spec.perturbation_ranges.clone(),
            sim_config_hash: sim.config().hash(),
        },
        samples,
    })
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn image_name(id: u64) -> String {
    format!("img_{id:06}.pgm")
}

impl Dataset {
    pub fn object_type(&self) -> ObjectType {
        self.meta.object_type
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.meta.image_size
    }

    /// Label vectors in label order.
    pub fn labels(&self) -> Vec<Vec<f64>> {
        self.samples.iter().map(|s| s.label.to_vec()).collect()
    }

    pub fn index_header(&self) -> Vec<String> {
        let mut cols = vec!["id".to_string()];
        cols.extend(self.object_type().components().iter().map(|c| c.name().to_string()));
        cols.extend(PERTURBATION_COLUMNS.iter().map(|c| c.to_string()));
        cols.push("image".into());
        cols.push("sha256".into());
        cols
    }

    /// Write the dataset into `dir` (created if needed).
    pub fn save(&self, dir: &Path) -> Result<(), DatasetError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let meta_path = dir.join("meta.json");
        let meta = serde_json::to_string_pretty(&self.meta).expect("meta serializes");
        fs::write(&meta_path, meta + "\n").map_err(io_err(&meta_path))?;

        let index_path = dir.join("index.csv");
        let mut w = csv::Writer::from_path(&index_path).map_err(|e| DatasetError::Io {
            path: index_path.display().to_string(),
            source: e.into(),
        })?;
        let csv_err = |e: csv::Error| DatasetError::Io {
            path: index_path.display().to_string(),
            source: e.into(),
        };
        w.write_record(self.index_header()).map_err(csv_err)?;
        for s in &self.samples {
            let name = image_name(s.id);
            let bytes = s.image.to_pgm();
            let img_path = dir.join(&name);
            fs::write(&img_path, &bytes).map_err(io_err(&img_path))?;
            let mut row = vec![s.id.to_string()];
            row.extend(s.label.to_vec().iter().map(|v| v.to_string()));
            row.extend(s.perturbation.to_array().iter().map(|v| v.to_string()));
            row.push(name);
            row.push(sha256_hex(&bytes));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(io_err(&index_path))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, DatasetError> {
        let meta_path = dir.join("meta.json");
        let text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
        let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| DatasetError::Meta {
            path: meta_path.display().to_string(),
            reason: e.to_string(),
        })?;
        let meta_err = |reason: String| DatasetError::Meta {
            path: meta_path.display().to_string(),
            reason,
        };
        if meta.format_version != FORMAT_VERSION {
            return Err(meta_err(format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                meta.format_version
            )));
        }
        meta.label_ranges
            .validate_labels(meta.object_type)
            .map_err(|e| meta_err(e.to_string()))?;
        meta.perturbation_ranges
            .validate_perturbation()
            .map_err(|e| meta_err(e.to_string()))?;

        let index_path = dir.join("index.csv");
        let index_str = index_path.display().to_string();
        let mut r = csv::Reader::from_path(&index_path).map_err(|e| DatasetError::Io {
            path: index_str.clone(),
            source: e.into(),
        })?;
        let object = meta.object_type;
        let label_cols = object.components();
        let n_cols = 1 + label_cols.len() + 6 + 2;
        let malformed = |line: u64, reason: String| DatasetError::MalformedRow {
            path: index_str.clone(),
            line,
            reason,
        };
        let header = r.headers().map_err(|e| malformed(1, e.to_string()))?.clone();
        let expected: Vec<String> = {
            let mut cols = vec!["id".to_string()];
            cols.extend(label_cols.iter().map(|c| c.name().to_string()));
            cols.extend(PERTURBATION_COLUMNS.iter().map(|c| c.to_string()));
            cols.extend(["image".to_string(), "sha256".to_string()]);
            cols
        };
        if header.iter().collect::<Vec<_>>() != expected {
            return Err(malformed(1, format!("expected columns {}", expected.join(","))));
        }

        let mut samples = Vec::new();
        for (k, rec) in r.records().enumerate() {
            let line = k as u64 + 2;
            let rec = rec.map_err(|e| malformed(line, e.to_string()))?;
            if rec.len() != n_cols {
                return Err(malformed(line, format!("{} fields, expected {n_cols}", rec.len())));
            }
            let id: u64 = rec[0]
                .parse()
                .map_err(|_| malformed(line, format!("bad id `{}`", &rec[0])))?;
            let mut nums = Vec::with_capacity(label_cols.len() + 6);
            for (j, field) in rec.iter().enumerate().skip(1).take(label_cols.len() + 6) {
                let v: f64 = field.parse().map_err(|_| {
                    malformed(line, format!("column {} is not a number: `{field}`", header[j].to_string()))
                })?;
                if !v.is_finite() {
                    return Err(malformed(line, format!("column {} is not finite", &header[j])));
                }
                nums.push(v);
            }
            let (label_vals, pert_vals) = nums.split_at(label_cols.len());
            for (c, &v) in label_cols.iter().zip(label_vals) {
                let iv = meta.label_ranges.get(*c).expect("validated");
                if !iv.contains(v) {
                    return Err(DatasetError::OutOfRange {
                        id,
                        component: c.name().into(),
                        value: v,
                    });
                }
            }
            for (k, (&v, name)) in pert_vals.iter().zip(PERTURBATION_COLUMNS).enumerate() {
                let c = Component::ALL[k];
                let iv = meta.perturbation_ranges.get(c).expect("validated");
                let ok = if c == Component::Depth { v == 0.0 } else { iv.contains(v) };
                if !ok {
                    return Err(DatasetError::OutOfRange {
                        id,
                        component: name.into(),
                        value: v,
                    });
                }
            }
            let name = &rec[n_cols - 2];
            if name.contains('/') || name.contains('\\') {
                return Err(malformed(line, format!("image name `{name}` must be a bare file name")));
            }
            let img_path: PathBuf = dir.join(name);
            let bytes = match fs::read(&img_path) {
                Ok(b) => b,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                    return Err(DatasetError::MissingImage {
                        id,
                        path: img_path.display().to_string(),
                    })
                }
                Err(e) => return Err(io_err(&img_path)(e)),
            };
            if sha256_hex(&bytes) != rec[n_cols - 1] {
                return Err(DatasetError::Checksum {
                    id,
                    path: img_path.display().to_string(),
                });
            }
            let image = TactileImage::from_pgm(&bytes, &img_path.display().to_string())?;
            if image.size() != meta.image_size {
                return Err(malformed(
                    line,
                    format!("image is {0}x{0}, metadata says {1}", image.size(), meta.image_size),
                ));
            }
            let mut pa = [0.0; 6];
            pa.copy_from_slice(pert_vals);
            samples.push(Sample {
                id,
                image,
                label: Pose::from_slice(object, label_vals)?,
                perturbation: Perturbation::from_array(pa),
            });
        }
        if samples.is_empty() {
            return Err(DatasetError::Empty);
        }
        if samples.len() != meta.n_samples {
            return Err(meta_err(format!(
                "index has {} rows, metadata says {}",
                samples.len(),
                meta.n_samples
            )));
        }
        Ok(Self { meta, samples })
    }
}

/// SHA-256 of every regular file in `dir`, keyed by file name.
pub fn manifest(dir: &Path) -> Result<BTreeMap<String, String>, DatasetError> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let path = entry.path();
        if path.is_file() {
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            out.insert(entry.file_name().to_string_lossy().into_owned(), sha256_hex(&bytes));
        }
    }
    Ok(out)
}

/// Component-wise label scaling by `1 / max|bound|`. Minimising plain MSE on
/// scaled labels is the same as minimising MSE weighted by `1 / max|bound|^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelScaler {
    pub scales: Vec<f64>,
}

impl LabelScaler {
    pub fn from_ranges(object: ObjectType, ranges: &PoseRanges) -> Result<Self, PoseError> {
        Ok(Self {
            scales: ranges.label_scales(object)?,
        })
    }

    pub fn normalize(&self, label: &[f64]) -> Vec<f64> {
        label.iter().zip(&self.scales).map(|(v, s)| v / s).collect()
    }

    pub fn denormalize(&self, scaled: &[f64]) -> Vec<f64> {
        scaled.iter().zip(&self.scales).map(|(v, s)| v * s).collect()
    }
}

/// Labels of `dataset` scaled into [-1, 1], with the map back.
pub fn normalize_labels(dataset: &Dataset) -> Result<(Vec<Vec<f64>>, LabelScaler), PoseError> {
    let scaler = LabelScaler::from_ranges(dataset.object_type(), &dataset.meta.label_ranges)?;
    let labels = dataset
        .samples
        .iter()
        .map(|s| scaler.normalize(&s.label.to_vec()))
        .collect();
    Ok((labels, scaler))
}
