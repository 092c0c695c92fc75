use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{IkeError, Result};
use crate::eval::GalleryRule;
use crate::synth::{self, StreamData, SyntheticSpec};
use crate::trainer::{Hyperparams, Variant, DEFAULT_WIDTHS};

/// The five six-camera orders used for the ordering experiments, 1-based.
pub const ORDER_PRESETS: [(&str, [usize; 6]); 5] = [
    ("T1", [1, 2, 3, 4, 5, 6]),
    ("T2", [1, 6, 5, 2, 4, 3]),
    ("T3", [6, 3, 4, 5, 1, 2]),
    ("T4", [4, 2, 6, 5, 3, 1]),
    ("T5", [3, 1, 4, 5, 2, 6]),
];

/// Zero-based camera order of a named preset.
pub fn preset_order(name: &str) -> Option<Vec<usize>> {
    ORDER_PRESETS
        .iter()
        .find(|(n, _)| n.eq_ignore_ascii_case(name))
        .map(|(_, o)| o.iter().map(|c| c - 1).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    /// Path to a feature manifest; relative paths resolve against the config file.
    Features(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum OrderSpec {
    Preset(String),
    Explicit(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VariantSpec {
    /// `"ablation"` expands to all six variants.
    Named(String),
    List(Vec<Variant>),
}

impl VariantSpec {
    pub fn expand(&self) -> Result<Vec<Variant>> {
        match self {
            VariantSpec::Named(s) if s.eq_ignore_ascii_case("ablation") => Ok(Variant::ALL.to_vec()),
            VariantSpec::Named(s) => Variant::parse(s)
                .map(|v| vec![v])
                .ok_or_else(|| IkeError::Config(format!("unknown variant {s:?}"))),
            VariantSpec::List(v) if v.is_empty() => Err(IkeError::Config("variant list is empty".into())),
            VariantSpec::List(v) => Ok(v.clone()),
        }
    }
}

/// Hyperparameter grids; every combination becomes one sweep point.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepAxes {
    pub lambda: Option<Vec<f64>>,
    pub tau: Option<Vec<f64>>,
    pub omega: Option<Vec<f64>>,
}

/// One point of a sweep: the overridden values, by axis name.
pub type SweepPoint = BTreeMap<String, f64>;

impl SweepAxes {
    pub fn is_empty(&self) -> bool {
        self.lambda.is_none() && self.tau.is_none() && self.omega.is_none()
    }

    fn axes(&self) -> Vec<(&'static str, &Vec<f64>)> {
        [("lambda", &self.lambda), ("tau", &self.tau), ("omega", &self.omega)]
            .into_iter()
            .filter_map(|(n, v)| v.as_ref().map(|v| (n, v)))
            .collect()
    }

    /// Cartesian product of the grids, first axis slowest. A single empty
    /// point when no axis is set.
    pub fn points(&self) -> Vec<SweepPoint> {
        let mut points = vec![SweepPoint::new()];
        for (name, grid) in self.axes() {
            points = points
                .into_iter()
                .flat_map(|p| {
                    grid.iter().map(move |&v| {
                        let mut q = p.clone();
                        q.insert(name.to_string(), v);
                        q
                    })
                })
                .collect();
        }
        points
    }

    /// Parses `name=v1,v2,...` and sets that axis.
    pub fn set_from_arg(&mut self, arg: &str) -> Result<()> {
        let (name, values) = arg
            .split_once('=')
            .ok_or_else(|| IkeError::Config(format!("sweep axis {arg:?} is not of the form name=v1,v2")))?;
        let grid = values
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| IkeError::Config(format!("bad value {v:?} for sweep axis {name}")))
            })
            .collect::<Result<Vec<_>>>()?;
        match name.trim() {
            "lambda" => self.lambda = Some(grid),
            "tau" => self.tau = Some(grid),
            "omega" => self.omega = Some(grid),
            other => return Err(IkeError::Config(format!("unknown sweep axis {other:?}"))),
        }
        Ok(())
    }
}

pub fn apply_point(hyper: &Hyperparams, point: &SweepPoint) -> Hyperparams {
    let mut h = hyper.clone();
    for (name, &v) in point {
        match name.as_str() {
            "lambda" => h.lambda = v,
            "tau" => h.tau = v,
            "omega" => h.omega = v,
            _ => unreachable!("sweep axes are validated on parse"),
        }
    }
    h
}

pub fn point_tag(point: &SweepPoint) -> String {
    point.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(",")
}

fn default_variants() -> VariantSpec {
    VariantSpec::List(vec![Variant::Ike])
}

fn default_widths() -> Vec<usize> {
    DEFAULT_WIDTHS.to_vec()
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    /// Camera order; the dataset's natural order when absent.
    #[serde(default)]
    pub order: Option<OrderSpec>,
    #[serde(default = "default_variants")]
    pub variants: VariantSpec,
    #[serde(default)]
    pub hyper: Hyperparams,
    /// Encoder block widths after the input layer.
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub sweep: SweepAxes,
    #[serde(default)]
    pub gallery: GalleryRule,
    /// Also train the joint model and report forgetting curves against it.
    #[serde(default)]
    pub upper_bound: bool,
    /// Write encoder and memory snapshots after every camera.
    #[serde(default)]
    pub checkpoints: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::Synthetic(SyntheticSpec::default()),
            order: None,
            variants: default_variants(),
            hyper: Hyperparams::default(),
            widths: default_widths(),
            seeds: default_seeds(),
            output: default_output(),
            sweep: SweepAxes::default(),
            gallery: GalleryRule::default(),
            upper_bound: false,
            checkpoints: false,
        }
    }
}

impl ExperimentConfig {
    /// Reads a config, resolving a relative feature path against the
    /// config's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut config: Self =
            serde_json::from_str(&text).map_err(|e| IkeError::Config(format!("{}: {e}", path.display())))?;
        if let DatasetSource::Features(p) = &mut config.dataset {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(config)
    }

    pub fn n_cameras(&self) -> Result<usize> {
        match &self.dataset {
            DatasetSource::Synthetic(s) => Ok(s.n_cameras),
            DatasetSource::Features(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| IkeError::Config(format!("cannot read feature manifest {}: {e}", p.display())))?;
                let manifest: synth::FeatureManifest = serde_json::from_str(&text)
                    .map_err(|e| IkeError::Config(format!("bad feature manifest {}: {e}", p.display())))?;
                Ok(manifest.cameras.len())
            }
        }
    }

    /// Resolved order and its name.
    pub fn resolve_order(&self, n_cameras: usize) -> Result<(Vec<usize>, Option<String>)> {
        let (order, name) = match &self.order {
            None => ((0..n_cameras).collect(), None),
            Some(OrderSpec::Preset(p)) => {
                let order =
                    preset_order(p).ok_or_else(|| IkeError::Config(format!("unknown order preset {p:?}")))?;
                (order, Some(p.to_uppercase()))
            }
            Some(OrderSpec::Explicit(o)) => (o.clone(), None),
        };
        let mut sorted = order.clone();
        sorted.sort_unstable();
        if sorted != (0..n_cameras).collect::<Vec<_>>() {
            return Err(IkeError::Config(format!(
                "order {order:?} is not a permutation of the {n_cameras} cameras"
            )));
        }
        Ok((order, name))
    }

    /// Checks everything that can be checked without training.
    pub fn validate(&self) -> Result<()> {
        if let DatasetSource::Synthetic(s) = &self.dataset {
            s.validate()?;
        }
        self.resolve_order(self.n_cameras()?)?;
        self.variants.expand()?;
        self.hyper.validate()?;
        if self.widths.len() < 3 || self.widths.contains(&0) {
            return Err(IkeError::Config(format!(
                "encoder needs at least three non-zero block widths, got {:?}",
                self.widths
            )));
        }
        if self.seeds.is_empty() {
            return Err(IkeError::Config("seeds list is empty".into()));
        }
        for (name, grid) in self.sweep.axes() {
            if grid.is_empty() {
                return Err(IkeError::Config(format!("sweep grid for {name} is empty")));
            }
        }
        for point in self.sweep.points() {
            apply_point(&self.hyper, &point).validate()?;
        }
        Ok(())
    }

    /// The training data for one seed. Synthetic data is regenerated from
    /// the run seed; feature files are seed-independent.
    pub fn load_data(&self, seed: u64) -> Result<StreamData> {
        match &self.dataset {
            DatasetSource::Synthetic(s) => synth::generate(&SyntheticSpec { seed, ..s.clone() }),
            DatasetSource::Features(p) => synth::load_dataset(p),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_permutations() {
        for (name, _) in ORDER_PRESETS {
            let mut o = preset_order(name).unwrap();
            o.sort_unstable();
            assert_eq!(o, (0..6).collect::<Vec<_>>());
        }
        assert_eq!(preset_order("t2").unwrap(), vec![0, 5, 4, 1, 3, 2]);
        assert!(preset_order("T6").is_none());
    }

    #[test]
    fn sweep_points_are_a_product() {
        let mut axes = SweepAxes::default();
        assert_eq!(axes.points(), vec![SweepPoint::new()]);
        axes.set_from_arg("lambda=0,0.5").unwrap();
        axes.set_from_arg("tau=0.05,0.1,0.2").unwrap();
        let points = axes.points();
        assert_eq!(points.len(), 6);
        assert_eq!(point_tag(&points[1]), "lambda=0,tau=0.1");
        assert!(axes.set_from_arg("beta=1").is_err());
        assert!(axes.set_from_arg("lambda").is_err());
        assert!(axes.set_from_arg("lambda=a").is_err());
    }

    #[test]
    fn config_parses_with_defaults() {
        let c: ExperimentConfig = serde_json::from_str(r#"{"dataset": {"synthetic": {"n_cameras": 2}}}"#).unwrap();
        assert_eq!(c.variants.expand().unwrap(), vec![Variant::Ike]);
        assert!(c.validate().is_ok());
        let c: ExperimentConfig =
            serde_json::from_str(r#"{"dataset": {"synthetic": {}}, "variants": "ablation", "order": {"preset": "T3"}}"#)
                .unwrap();
        assert_eq!(c.variants.expand().unwrap().len(), 6);
        assert_eq!(c.resolve_order(6).unwrap().0, vec![5, 2, 3, 4, 0, 1]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            r#"{"dataset": {"synthetic": {}}, "seeds": []}"#,
            r#"{"dataset": {"synthetic": {}}, "order": {"explicit": [0, 1, 1, 2, 3, 4]}}"#,
            r#"{"dataset": {"synthetic": {"n_cameras": 3}}, "order": {"preset": "T1"}}"#,
            r#"{"dataset": {"synthetic": {}}, "variants": ["NOPE"]}"#,
            r#"{"dataset": {"synthetic": {}}, "variants": "nope"}"#,
            r#"{"dataset": {"synthetic": {}}, "sweep": {"lambda": []}}"#,
            r#"{"dataset": {"synthetic": {}}, "sweep": {"lambda": [2.0]}}"#,
            r#"{"dataset": {"synthetic": {"ids_per_camera": 400}}}"#,
            r#"{"dataset": {"synthetic": {}}, "widths": [4, 4]}"#,
            r#"{"dataset": {"features": "/nonexistent/manifest.json"}}"#,
        ];
        for text in bad {
            let parsed: std::result::Result<ExperimentConfig, _> = serde_json::from_str(text);
            let failed = match parsed {
                Ok(c) => c.validate().is_err(),
                Err(_) => true,
            };
            assert!(failed, "accepted {text}");
        }
    }
}
