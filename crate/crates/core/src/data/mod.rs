//! Synthetic shapes, point-cloud file formats, resampling and dataset
//! manifests.

mod io;
mod shapes;

pub use io::{load_cloud, load_ply, load_xyz, save_xyz, CloudFormat};
pub use shapes::{gen_shape, normalize, ShapeClass};

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, rotate_up, PointCloud};
use crate::seed::{self, Stream};

/// FPS-downsample, pad by sampling with replacement, or pass through.
pub fn resample(cloud: &PointCloud, n_points: usize, seed: u64) -> Result<PointCloud> {
    let n = cloud.len();
    let pts = cloud.points();
    let picked: Vec<[f64; 3]> = if n > n_points {
        farthest_point_sample(cloud, n_points, seed)?.into_iter().map(|i| pts[i]).collect()
    } else if n < n_points {
        let mut rng = seed::rng(seed, Stream::Data, 0);
        let mut out = pts.to_vec();
        out.extend((n..n_points).map(|_| pts[rng.random_range(0..n)]));
        out
    } else {
        return Ok(cloud.clone());
    };
    let mut out = PointCloud::new(picked)?;
    out.label = cloud.label;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Labelled clouds with a common point count.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub class_names: Vec<String>,
    pub clouds: Vec<PointCloud>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Result<Vec<usize>> {
        self.clouds
            .iter()
            .enumerate()
            .map(|(i, c)| match c.label {
                Some(l) if l < self.n_classes() => Ok(l),
                Some(l) => Err(Error::contract(format!("cloud {i} has label {l} but only {} classes", self.n_classes()))),
                None => Err(Error::contract(format!("cloud {i} has no label"))),
            })
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            class_names: self.class_names.clone(),
            clouds: indices.iter().map(|&i| self.clouds[i].clone()).collect(),
        }
    }
}

/// Parameters of a procedurally generated train/test pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub classes: Vec<ShapeClass>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub n_points: usize,
    pub noise: f64,
    /// Random rotation about the up axis per sample.
    pub rotate: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: vec![ShapeClass::Sphere, ShapeClass::Cube, ShapeClass::Torus, ShapeClass::Cone],
            train_per_class: 64,
            test_per_class: 25,
            n_points: 256,
            noise: 0.01,
            rotate: true,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::config("data.classes", "need at least one class"));
        }
        if self.n_points < 8 {
            return Err(Error::config("data.n_points", "need at least 8 points"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("data.noise", "must be non-negative"));
        }
        Ok(())
    }

    /// Train and test sets from disjoint seed ranges, interleaved by class.
    pub fn generate(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        self.validate()?;
        let make = |split: u64, per_class: usize| -> Result<Dataset> {
            let mut clouds = Vec::with_capacity(per_class * self.classes.len());
            for i in 0..per_class {
                for (label, &class) in self.classes.iter().enumerate() {
                    let index = (split << 40) | ((i as u64) << 8) | label as u64;
                    let s = seed::derive(seed, Stream::Data, index);
                    let mut c = gen_shape(class, self.n_points, self.noise, s)?;
                    if self.rotate {
                        let mut rng = seed::rng(s, Stream::Augment, 0);
                        c = rotate_up(&c, rng.random_range(0.0..std::f64::consts::TAU));
                    }
                    clouds.push(c.with_label(label));
                }
            }
            Ok(Dataset {
                name: "synthetic".into(),
                class_names: self.classes.iter().map(|c| c.name().to_string()).collect(),
                clouds,
            })
        };
        Ok((make(0, self.train_per_class)?, make(1, self.test_per_class)?))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
    pub split: Split,
}

/// Reads a `path,label,split` CSV; relative paths resolve against the
/// manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| csv_err(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, row) in r.deserialize::<ManifestEntry>().enumerate() {
        let mut entry = row.map_err(|e| Error::Parse { path: path.to_path_buf(), line: i + 2, message: e.to_string() })?;
        if entry.path.is_relative() {
            entry.path = base.join(&entry.path);
        }
        out.push(entry);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for e in entries {
        w.serialize(e).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse { path: path.to_path_buf(), line: 0, message: format!("{other:?}") },
    }
}

/// Loads every cloud listed in a manifest, resampled to `n_points`, into a
/// train and a test dataset.
pub fn load_manifest(path: &Path, n_points: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let entries = read_manifest(path)?;
    let n_classes = entries.iter().map(|e| e.label + 1).max().unwrap_or(0);
    let class_names: Vec<String> = (0..n_classes).map(|c| format!("class{c}")).collect();
    let mut train = Dataset { name: path.display().to_string(), class_names: class_names.clone(), clouds: vec![] };
    let mut test = Dataset { name: path.display().to_string(), class_names, clouds: vec![] };
    for (i, e) in entries.iter().enumerate() {
        let cloud = load_cloud(&e.path, None)?;
        let cloud = resample(&cloud, n_points, seed::derive(seed, Stream::Data, i as u64))?.with_label(e.label);
        match e.split {
            Split::Train => train.clouds.push(cloud),
            Split::Test => test.clouds.push(cloud),
        }
    }
    Ok((train, test))
}
