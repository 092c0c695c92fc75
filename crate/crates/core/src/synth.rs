//! Synthetic camera streams and the feature-file loader.
//!
//! Each global identity has a unit prototype. A camera sees a subset of the
//! identities through its own linear distortion `I + σ_cam·R_c`, plus
//! isotropic noise, and labels them locally in order of first appearance.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{IkeError, Result};
use crate::memory::normalized;
use crate::seeding::{self, Purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_global: usize,
    pub latent_dim: usize,
    pub obs_dim: usize,
    pub n_cameras: usize,
    pub ids_per_camera: usize,
    pub images_per_id: usize,
    pub test_images_per_id: usize,
    pub camera_shift: f64,
    pub noise: f64,
    pub overlap_bias: f64,
    /// Largest allowed cosine between two prototypes.
    pub max_prototype_cos: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_global: 300,
            latent_dim: 8,
            obs_dim: 8,
            n_cameras: 6,
            ids_per_camera: 150,
            images_per_id: 8,
            test_images_per_id: 2,
            camera_shift: 0.3,
            noise: 0.05,
            overlap_bias: 0.6,
            max_prototype_cos: 0.8,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(IkeError::Config(m));
        if self.n_global == 0 || self.n_cameras == 0 || self.ids_per_camera == 0 || self.images_per_id == 0 {
            return fail("identity, camera and image counts must be at least 1".into());
        }
        if self.latent_dim == 0 || self.obs_dim < self.latent_dim {
            return fail(format!(
                "need 1 <= latent_dim ({}) <= obs_dim ({})",
                self.latent_dim, self.obs_dim
            ));
        }
        if self.ids_per_camera > self.n_global {
            return fail(format!(
                "ids_per_camera ({}) exceeds n_global ({})",
                self.ids_per_camera, self.n_global
            ));
        }
        if !(self.camera_shift >= 0.0 && self.noise >= 0.0) {
            return fail("camera_shift and noise must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.overlap_bias) {
            return fail(format!("overlap_bias {} outside [0, 1]", self.overlap_bias));
        }
        if !(self.max_prototype_cos > -1.0 && self.max_prototype_cos <= 1.0) {
            return fail(format!("max_prototype_cos {} outside (-1, 1]", self.max_prototype_cos));
        }
        Ok(())
    }
}

/// Training images of one camera with contiguous local labels.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraDataset {
    camera_id: usize,
    inputs: Array2<f64>,
    labels: Vec<usize>,
    globals: Vec<Option<usize>>,
    n_ids: usize,
}

impl CameraDataset {
    /// Validates that labels cover `0..n` and that each label has a single
    /// global tag.
    pub fn new(camera_id: usize, inputs: Array2<f64>, labels: Vec<usize>, globals: Vec<Option<usize>>) -> Result<Self> {
        if inputs.nrows() != labels.len() || labels.len() != globals.len() {
            return Err(IkeError::ShapeMismatch(format!(
                "{} inputs, {} labels, {} global tags",
                inputs.nrows(),
                labels.len(),
                globals.len()
            )));
        }
        let n_ids = labels.iter().map(|&y| y + 1).max().unwrap_or(0);
        let mut tag: Vec<Option<Option<usize>>> = vec![None; n_ids];
        for (&y, &g) in labels.iter().zip(&globals) {
            match tag[y] {
                None => tag[y] = Some(g),
                Some(prev) if prev != g => {
                    return Err(IkeError::Config(format!(
                        "camera {camera_id}: local label {y} maps to two global identities"
                    )))
                }
                _ => {}
            }
        }
        if let Some(label) = tag.iter().position(Option::is_none) {
            return Err(IkeError::MissingLabel { label, n_ids });
        }
        Ok(Self {
            camera_id,
            inputs,
            labels,
            globals,
            n_ids,
        })
    }

    pub fn camera_id(&self) -> usize {
        self.camera_id
    }

    pub fn inputs(&self) -> &Array2<f64> {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn globals(&self) -> &[Option<usize>] {
        &self.globals
    }

    pub fn n_ids(&self) -> usize {
        self.n_ids
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    /// Global identity of every local label, when all are known.
    pub fn label_globals(&self) -> Option<Vec<usize>> {
        let mut out = vec![None; self.n_ids];
        for (&y, &g) in self.labels.iter().zip(&self.globals) {
            out[y] = g;
        }
        out.into_iter().collect()
    }

    /// Copy with the local labels replaced by global tags, relabelled
    /// contiguously in order of first appearance.
    pub fn relabel_by_global(&self) -> Result<Self> {
        Self::new(self.camera_id, self.inputs.clone(), global_labels(&self.globals)?, self.globals.clone())
    }

    /// Concatenation of several cameras under global labels. The result
    /// carries camera id `usize::MAX`.
    pub fn union_by_global(cameras: &[CameraDataset]) -> Result<Self> {
        let dim = cameras.first().map_or(0, |c| c.input_dim());
        let total: usize = cameras.iter().map(CameraDataset::len).sum();
        let mut inputs = Array2::zeros((total, dim));
        let mut globals = Vec::with_capacity(total);
        let mut offset = 0;
        for c in cameras {
            if c.input_dim() != dim {
                return Err(IkeError::ShapeMismatch("cameras disagree on input dimension".into()));
            }
            inputs.slice_mut(ndarray::s![offset..offset + c.len(), ..]).assign(&c.inputs);
            globals.extend_from_slice(&c.globals);
            offset += c.len();
        }
        Self::new(usize::MAX, inputs, global_labels(&globals)?, globals)
    }
}

fn global_labels(globals: &[Option<usize>]) -> Result<Vec<usize>> {
    let mut remap = HashMap::new();
    globals
        .iter()
        .map(|g| {
            let g = g.ok_or(IkeError::MissingProvenance)?;
            let next = remap.len();
            Ok(*remap.entry(g).or_insert(next))
        })
        .collect()
}

/// Held-out evaluation images from every camera.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSplit {
    pub inputs: Array2<f64>,
    pub cameras: Vec<usize>,
    pub globals: Vec<usize>,
}

impl TestSplit {
    pub fn len(&self) -> usize {
        self.globals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.globals.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamData {
    pub train: Vec<CameraDataset>,
    pub test: TestSplit,
}

impl StreamData {
    pub fn input_dim(&self) -> usize {
        self.train.first().map_or(0, CameraDataset::input_dim)
    }

    /// Number of distinct global identities across the training cameras.
    pub fn distinct_globals(&self) -> usize {
        let mut all: Vec<usize> = self.train.iter().flat_map(|c| c.globals().iter().flatten().copied()).collect();
        all.sort_unstable();
        all.dedup();
        all.len()
    }
}

fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Array1<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Orthonormal columns spanning a random `latent_dim` subspace of the
/// observation space.
fn random_lift<R: Rng + ?Sized>(rng: &mut R, obs_dim: usize, latent_dim: usize) -> Array2<f64> {
    let mut q = Array2::<f64>::zeros((obs_dim, latent_dim));
    let mut k = 0;
    while k < latent_dim {
        let mut v = gaussian_vec(rng, obs_dim);
        for j in 0..k {
            let col = q.column(j);
            let proj = col.dot(&v);
            v.scaled_add(-proj, &col);
        }
        if let Some(unit) = normalized(v.view()) {
            q.column_mut(k).assign(&unit);
            k += 1;
        }
    }
    q
}

fn sample_prototypes<R: Rng + ?Sized>(rng: &mut R, spec: &SyntheticSpec) -> Result<Array2<f64>> {
    const MAX_TRIES: usize = 100_000;
    let mut latent: Vec<Array1<f64>> = Vec::with_capacity(spec.n_global);
    let mut tries = 0;
    while latent.len() < spec.n_global {
        tries += 1;
        if tries > MAX_TRIES * spec.n_global.max(1) {
            return Err(IkeError::Config(format!(
                "could not place {} prototypes in {} dimensions with cosine <= {}",
                spec.n_global, spec.latent_dim, spec.max_prototype_cos
            )));
        }
        let Some(u) = normalized(gaussian_vec(rng, spec.latent_dim).view()) else {
            continue;
        };
        if latent.iter().all(|p| p.dot(&u) <= spec.max_prototype_cos) {
            latent.push(u);
        }
    }
    let lift = random_lift(rng, spec.obs_dim, spec.latent_dim);
    let mut protos = Array2::zeros((spec.n_global, spec.obs_dim));
    for (g, u) in latent.iter().enumerate() {
        let p = lift.dot(u);
        protos.row_mut(g).assign(&normalized(p.view()).expect("lift preserves norm"));
    }
    Ok(protos)
}

/// Draws a camera's identity subset. Each slot is filled from the already
/// seen identities with probability `overlap_bias`, otherwise from unseen ones.
fn choose_identities<R: Rng + ?Sized>(rng: &mut R, spec: &SyntheticSpec, seen: &mut [bool]) -> Vec<usize> {
    let mut old: Vec<usize> = (0..spec.n_global).filter(|&g| seen[g]).collect();
    let mut new: Vec<usize> = (0..spec.n_global).filter(|&g| !seen[g]).collect();
    let mut chosen = Vec::with_capacity(spec.ids_per_camera);
    for _ in 0..spec.ids_per_camera {
        let prefer_old = rng.random::<f64>() < spec.overlap_bias;
        let pool = match (prefer_old, old.is_empty(), new.is_empty()) {
            (true, false, _) | (false, false, true) => &mut old,
            _ => &mut new,
        };
        let pick = rng.random_range(0..pool.len());
        chosen.push(pool.swap_remove(pick));
    }
    for &g in &chosen {
        seen[g] = true;
    }
    chosen
}

fn camera_distortion<R: Rng + ?Sized>(rng: &mut R, spec: &SyntheticSpec) -> Array2<f64> {
    let d = spec.obs_dim;
    let mut a = Array2::<f64>::eye(d);
    for mut row in a.axis_iter_mut(Axis(0)) {
        let r = gaussian_vec(rng, d);
        let unit = normalized(r.view()).unwrap_or_else(|| Array1::zeros(d));
        row.scaled_add(spec.camera_shift, &unit);
    }
    a
}

fn observe<R: Rng + ?Sized>(rng: &mut R, spec: &SyntheticSpec, distortion: &Array2<f64>, proto: ArrayView1<f64>) -> Array1<f64> {
    let noise = gaussian_vec(rng, spec.obs_dim);
    if spec.camera_shift == 0.0 && spec.noise == 0.0 {
        return proto.to_owned();
    }
    let x = distortion.dot(&proto) + noise * spec.noise;
    normalized(x.view()).unwrap_or_else(|| proto.to_owned())
}

/// Generates the prototypes and the per-camera train and test images.
pub fn generate(spec: &SyntheticSpec) -> Result<StreamData> {
    Ok(generate_with_prototypes(spec)?.0)
}

/// Like [`generate`], also returning the identity prototypes (one per row).
pub fn generate_with_prototypes(spec: &SyntheticSpec) -> Result<(StreamData, Array2<f64>)> {
    spec.validate()?;
    let mut rng = seeding::stream(spec.seed, Purpose::Data, 0);
    let protos = sample_prototypes(&mut rng, spec)?;
    let mut seen = vec![false; spec.n_global];
    let mut train = Vec::with_capacity(spec.n_cameras);
    let mut test_rows = Vec::new();
    let mut test_cameras = Vec::new();
    let mut test_globals = Vec::new();

    for c in 0..spec.n_cameras {
        let ids = choose_identities(&mut rng, spec, &mut seen);
        let distortion = camera_distortion(&mut rng, spec);
        let n = ids.len() * spec.images_per_id;
        let mut inputs = Array2::zeros((n, spec.obs_dim));
        let mut labels = Vec::with_capacity(n);
        let mut globals = Vec::with_capacity(n);
        let mut row = 0;
        for (local, &g) in ids.iter().enumerate() {
            for _ in 0..spec.images_per_id {
                inputs.row_mut(row).assign(&observe(&mut rng, spec, &distortion, protos.row(g)));
                labels.push(local);
                globals.push(Some(g));
                row += 1;
            }
        }
        for &g in &ids {
            for _ in 0..spec.test_images_per_id {
                test_rows.push(observe(&mut rng, spec, &distortion, protos.row(g)));
                test_cameras.push(c);
                test_globals.push(g);
            }
        }
        train.push(CameraDataset::new(c, inputs, labels, globals)?);
    }

    let mut test_inputs = Array2::zeros((test_rows.len(), spec.obs_dim));
    for (i, r) in test_rows.iter().enumerate() {
        test_inputs.row_mut(i).assign(r);
    }
    let data = StreamData {
        train,
        test: TestSplit {
            inputs: test_inputs,
            cameras: test_cameras,
            globals: test_globals,
        },
    };
    Ok((data, protos))
}

/// Sidecar manifest of a feature dataset on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureManifest {
    pub cameras: Vec<usize>,
    pub dim: usize,
    pub normalize: bool,
    pub train: PathBuf,
    pub test: Option<PathBuf>,
}

const FIXED_COLUMNS: usize = 3;

fn header(dim: usize) -> Vec<String> {
    ["camera", "local_id", "global_id"]
        .iter()
        .map(|s| s.to_string())
        .chain((0..dim).map(|k| format!("f{k}")))
        .collect()
}

fn write_rows<'a>(
    path: &Path,
    dim: usize,
    rows: impl Iterator<Item = (usize, i64, i64, ArrayView1<'a, f64>)>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header(dim))?;
    for (camera, local, global, x) in rows {
        let mut rec = vec![camera.to_string(), local.to_string(), global.to_string()];
        rec.extend(x.iter().map(|v| format!("{v:.16e}")));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| IkeError::Io(e.into_error()))?;
    crate::json::write_atomic(path, &bytes)
}

/// Writes `data` as `train.csv`, `test.csv` and `manifest.json` under `dir`,
/// returning the manifest path.
pub fn write_dataset(dir: &Path, data: &StreamData) -> Result<PathBuf> {
    let dim = data.input_dim();
    let as_tag = |g: Option<usize>| g.map_or(-1, |g| g as i64);
    write_rows(
        &dir.join("train.csv"),
        dim,
        data.train.iter().flat_map(|c| {
            (0..c.len()).map(move |i| (c.camera_id(), c.labels()[i] as i64, as_tag(c.globals()[i]), c.inputs().row(i)))
        }),
    )?;
    write_rows(
        &dir.join("test.csv"),
        dim,
        (0..data.test.len()).map(|i| {
            (
                data.test.cameras[i],
                -1,
                data.test.globals[i] as i64,
                data.test.inputs.row(i),
            )
        }),
    )?;
    let manifest = FeatureManifest {
        cameras: data.train.iter().map(CameraDataset::camera_id).collect(),
        dim,
        normalize: false,
        train: "train.csv".into(),
        test: Some("test.csv".into()),
    };
    let path = dir.join("manifest.json");
    crate::json::write_json(&path, &manifest)?;
    Ok(path)
}

struct Row {
    camera: usize,
    local: i64,
    global: Option<usize>,
    values: Vec<f64>,
}

fn read_rows(path: &Path, dim: usize, normalize: bool) -> Result<Vec<Row>> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .has_headers(false)
        .from_path(path)?;
    let mut out = Vec::new();
    let mut width = None;
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let Some(w) = width else {
            let found = rec.len().saturating_sub(FIXED_COLUMNS);
            if rec.len() < FIXED_COLUMNS || rec.iter().take(FIXED_COLUMNS).ne(["camera", "local_id", "global_id"]) {
                return Err(IkeError::Parse {
                    line,
                    message: "header must start with camera,local_id,global_id".into(),
                });
            }
            if found != dim {
                return Err(IkeError::DimensionMismatch { line, expected: dim, found });
            }
            width = Some(rec.len());
            continue;
        };
        if rec.len() != w {
            return Err(IkeError::Parse {
                line,
                message: format!("expected {w} columns, found {}", rec.len()),
            });
        }
        let parse_err = |what: &str, field: &str| IkeError::Parse {
            line,
            message: format!("invalid {what} {field:?}"),
        };
        let camera: usize = rec[0].trim().parse().map_err(|_| parse_err("camera", &rec[0]))?;
        let local: i64 = rec[1].trim().parse().map_err(|_| parse_err("local_id", &rec[1]))?;
        let global: i64 = rec[2].trim().parse().map_err(|_| parse_err("global_id", &rec[2]))?;
        if global < -1 {
            return Err(parse_err("global_id", &rec[2]));
        }
        let mut values = rec
            .iter()
            .skip(FIXED_COLUMNS)
            .map(|f| f.trim().parse::<f64>().map_err(|_| parse_err("feature", f)))
            .collect::<Result<Vec<f64>>>()?;
        if normalize {
            values = normalized(ArrayView1::from(values.as_slice()))
                .ok_or_else(|| parse_err("zero-norm feature row", ""))?
                .to_vec();
        }
        out.push(Row {
            camera,
            local,
            global: (global >= 0).then_some(global as usize),
            values,
        });
    }
    if width.is_none() {
        return Err(IkeError::Parse {
            line: 1,
            message: "missing header".into(),
        });
    }
    Ok(out)
}

fn to_matrix(rows: &[&Row], dim: usize) -> Array2<f64> {
    let mut m = Array2::zeros((rows.len(), dim));
    for (i, r) in rows.iter().enumerate() {
        m.row_mut(i).assign(&ArrayView1::from(r.values.as_slice()));
    }
    m
}

/// Reads training cameras from one feature CSV. Local labels are re-mapped
/// per camera to `0..n_c` in order of first appearance.
pub fn load_train_csv(path: &Path, dim: usize, normalize: bool) -> Result<Vec<CameraDataset>> {
    let rows = read_rows(path, dim, normalize)?;
    let mut cameras: Vec<usize> = rows.iter().map(|r| r.camera).collect();
    cameras.sort_unstable();
    cameras.dedup();
    cameras
        .into_iter()
        .map(|cam| {
            let picked: Vec<&Row> = rows.iter().filter(|r| r.camera == cam).collect();
            let mut remap = HashMap::new();
            let labels = picked
                .iter()
                .map(|r| {
                    let next = remap.len();
                    *remap.entry(r.local).or_insert(next)
                })
                .collect();
            let globals = picked.iter().map(|r| r.global).collect();
            CameraDataset::new(cam, to_matrix(&picked, dim), labels, globals)
        })
        .collect()
}

pub fn load_test_csv(path: &Path, dim: usize, normalize: bool) -> Result<TestSplit> {
    let rows = read_rows(path, dim, normalize)?;
    let all: Vec<&Row> = rows.iter().collect();
    let globals = rows
        .iter()
        .map(|r| r.global.ok_or(IkeError::MissingProvenance))
        .collect::<Result<Vec<_>>>()?;
    Ok(TestSplit {
        inputs: to_matrix(&all, dim),
        cameras: rows.iter().map(|r| r.camera).collect(),
        globals,
    })
}

/// Loads a dataset described by a manifest; relative paths are resolved
/// against the manifest's directory.
pub fn load_dataset(manifest_path: &Path) -> Result<StreamData> {
    let text = std::fs::read_to_string(manifest_path)?;
    let manifest: FeatureManifest = serde_json::from_str(&text)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let train = load_train_csv(&base.join(&manifest.train), manifest.dim, manifest.normalize)?;
    let test = match &manifest.test {
        Some(p) => load_test_csv(&base.join(p), manifest.dim, manifest.normalize)?,
        None => TestSplit {
            inputs: Array2::zeros((0, manifest.dim)),
            cameras: vec![],
            globals: vec![],
        },
    };
    Ok(StreamData { train, test })
}

/// Shuffled index order for one epoch.
pub fn shuffled_indices<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}
