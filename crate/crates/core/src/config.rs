//! Layered run configuration: built-in defaults, then a TOML file, then
//! `section.key=value` overrides. Every key is addressable and unknown keys
//! are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::backbone::BackboneConfig;
use crate::data::{
    load_dataset, AugmentConfig, CameraIntrinsics, DatasetFormat, HandModel, LoadOptions, MemoryDataset,
    SampleSource, SelectJoints, SynthDataset, SynthSettings, SYNTH_JOINTS,
};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::jgr::{GraphPolicy, Topology};
use crate::model::ModelConfig;
use crate::objective::LossConfig;
use crate::training::{GradCheckConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JgrConfig {
    pub enabled: bool,
    pub graph: GraphPolicy,
    /// Built-in topology name or path to an edge-list file.
    pub topology: String,
    pub joints: usize,
}

impl Default for JgrConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            graph: GraphPolicy::Skeleton,
            topology: "synth".into(),
            joints: SYNTH_JOINTS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub format: DatasetFormat,
    /// Split directory (native) or annotation file (ICVL) for training.
    pub train: String,
    pub test: String,
    /// Crop cube half-extent in mm.
    pub cube: f64,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Side of the rendered synthetic depth image.
    pub raw_size: usize,
    pub train_count: usize,
    pub test_count: usize,
    /// Seed of the synthetic generator; train and test use disjoint streams.
    pub seed: u64,
    /// Source joint indices kept, in order; empty keeps all.
    pub joint_subset: Vec<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        let cam = CameraIntrinsics::SYNTHETIC;
        Self {
            format: DatasetFormat::Synth,
            train: String::new(),
            test: String::new(),
            cube: 250.0,
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            raw_size: 96,
            train_count: 512,
            test_count: 128,
            seed: 1,
            joint_subset: Vec::new(),
        }
    }
}

/// Stream offset separating synthetic test samples from training samples.
pub const TEST_STREAM: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl DataConfig {
    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSection {
    pub enabled: bool,
    pub rotation_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub translation_mm: f64,
}

impl Default for AugmentSection {
    fn default() -> Self {
        let a = AugmentConfig::default();
        Self {
            enabled: true,
            rotation_deg: a.rotation_deg,
            scale_min: a.scale_min,
            scale_max: a.scale_max,
            translation_mm: a.translation_mm,
        }
    }
}

impl AugmentSection {
    /// Sampling ranges, or `None` when augmentation is off.
    pub fn ranges(&self) -> Option<AugmentConfig> {
        self.enabled.then_some(AugmentConfig {
            rotation_deg: self.rotation_deg,
            scale_min: self.scale_min,
            scale_max: self.scale_max,
            translation_mm: self.translation_mm,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub jgr: JgrConfig,
    pub loss: LossConfig,
    pub data: DataConfig,
    pub augment: AugmentSection,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub gradcheck: GradCheckConfig,
}

fn flatten(prefix: &str, table: &Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Table {
    let mut root = Table::new();
    for (key, v) in flat {
        let mut parts: Vec<&str> = key.split('.').collect();
        let leaf = parts.pop().expect("split yields at least one part");
        let mut node = &mut root;
        for p in parts {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Table(Table::new()))
                .as_table_mut()
                .expect("config sections are tables");
        }
        node.insert(leaf.to_string(), v.clone());
    }
    root
}

fn type_name(v: &Value) -> &'static str {
    v.type_str()
}

/// Converts `v` to the type of `default`, widening integers to floats.
fn coerce(key: &str, v: Value, default: &Value) -> Result<Value> {
    match (default, v) {
        (Value::Float(_), Value::Integer(i)) => Ok(Value::Float(i as f64)),
        (Value::Array(_), Value::Array(a)) => Ok(Value::Array(a)),
        (d, v) if std::mem::discriminant(d) == std::mem::discriminant(&v) => Ok(v),
        (d, v) => Err(Error::Config(format!(
            "config key {key} expects {}, got {}",
            type_name(d),
            type_name(&v)
        ))),
    }
}

/// Parses the right-hand side of an override the way a TOML value would be,
/// falling back to a bare string.
fn parse_override_value(raw: &str, default: &Value) -> Value {
    if let Value::String(_) = default {
        let trimmed = raw.trim();
        if let Ok(t) = format!("v = {trimmed}").parse::<Table>() {
            if let Some(Value::String(s)) = t.get("v") {
                return Value::String(s.clone());
            }
        }
        return Value::String(trimmed.to_string());
    }
    match format!("v = {}", raw.trim()).parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.trim().to_string()),
    }
}

impl RunConfig {
    fn default_flat() -> BTreeMap<String, Value> {
        let table = Table::try_from(RunConfig::default()).expect("default config serializes");
        let mut flat = BTreeMap::new();
        flatten("", &table, &mut flat);
        flat
    }

    /// Every addressable `section.key`, sorted.
    pub fn keys() -> Vec<String> {
        Self::default_flat().into_keys().collect()
    }

    /// Layers `text` (TOML) and then `overrides` onto the defaults.
    pub fn resolve(text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let defaults = Self::default_flat();
        let mut flat = defaults.clone();
        if let Some(text) = text {
            let table: Table = text
                .parse()
                .map_err(|e: toml::de::Error| Error::Config(format!("invalid config file: {}", e.message())))?;
            let mut file = BTreeMap::new();
            flatten("", &table, &mut file);
            for (k, v) in file {
                let d = defaults
                    .get(&k)
                    .ok_or_else(|| Error::Config(format!("unknown config key {k}")))?;
                flat.insert(k.clone(), coerce(&k, v, d)?);
            }
        }
        for o in overrides {
            let (k, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not of the form section.key=value")))?;
            let k = k.trim();
            let d = defaults
                .get(k)
                .ok_or_else(|| Error::Config(format!("unknown config key {k}")))?;
            let v = parse_override_value(raw, d);
            flat.insert(k.to_string(), coerce(k, v, d)?);
        }
        let cfg: RunConfig = unflatten(&flat)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        Self::resolve(text.as_deref(), overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes the resolved configuration as `config.toml` under `dir`.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.toml");
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.loss.stages != self.backbone.stages {
            return Err(Error::Config(format!(
                "loss.stages = {} but backbone.stages = {}",
                self.loss.stages, self.backbone.stages
            )));
        }
        if !(self.data.cube > 0.0) {
            return Err(Error::Config(format!("data.cube must be positive, got {}", self.data.cube)));
        }
        self.data.intrinsics().validate().map_err(|e| Error::Config(e.to_string()))?;
        let a = &self.augment;
        if !(a.scale_min > 0.0 && a.scale_min <= a.scale_max) {
            return Err(Error::Config(format!(
                "augment scale range [{}, {}] is invalid",
                a.scale_min, a.scale_max
            )));
        }
        if !self.data.joint_subset.is_empty() && self.data.joint_subset.len() != self.jgr.joints {
            return Err(Error::Config(format!(
                "data.joint_subset keeps {} joints but jgr.joints = {}",
                self.data.joint_subset.len(),
                self.jgr.joints
            )));
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            backbone: self.backbone.clone(),
            topology: Topology::resolve(&self.jgr.topology, self.jgr.joints)?,
            policy: self.jgr.graph,
            reasoning: self.jgr.enabled,
        })
    }

    pub fn synth_settings(&self) -> SynthSettings {
        SynthSettings {
            intrinsics: self.data.intrinsics(),
            raw_size: self.data.raw_size,
            cube: self.data.cube,
            out_size: self.backbone.input_size,
        }
    }

    /// The configured split, with the joint subset applied.
    pub fn dataset(&self, split: Split) -> Result<Box<dyn SampleSource>> {
        let d = &self.data;
        let source_joints = d.joint_subset.is_empty().then_some(self.jgr.joints);
        let inner: Box<dyn SampleSource> = match d.format {
            DatasetFormat::Synth => {
                let (stream, count) = match split {
                    Split::Train => (0, d.train_count),
                    Split::Test => (TEST_STREAM, d.test_count),
                };
                Box::new(SynthDataset {
                    model: HandModel::default(),
                    settings: self.synth_settings(),
                    seed: d.seed,
                    stream,
                    count,
                })
            }
            format => {
                let path = match split {
                    Split::Train => &d.train,
                    Split::Test => &d.test,
                };
                if path.is_empty() {
                    let key = if split == Split::Train { "data.train" } else { "data.test" };
                    return Err(Error::Config(format!("{key} must name a dataset path")));
                }
                let opts = LoadOptions {
                    joints: source_joints,
                    out_size: self.backbone.input_size,
                    intrinsics: d.intrinsics(),
                    cube: d.cube,
                };
                load_dataset(Path::new(path), format, &opts)?
            }
        };
        let source: Box<dyn SampleSource> = if d.joint_subset.is_empty() {
            inner
        } else {
            Box::new(SelectJoints::new(inner, d.joint_subset.clone())?)
        };
        if source.joints() != self.jgr.joints {
            return Err(Error::Validation(format!(
                "dataset has {} joints but jgr.joints = {}",
                source.joints(),
                self.jgr.joints
            )));
        }
        Ok(source)
    }

    /// The split loaded into memory.
    pub fn materialize(&self, split: Split) -> Result<MemoryDataset> {
        MemoryDataset::materialize(self.dataset(split)?.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let again = RunConfig::resolve(Some(&cfg.to_toml()), &[]).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.loss.beta, 1e-4);
        assert_eq!(cfg.loss.stages, 2);
    }

    #[test]
    fn file_then_overrides() {
        let text = "[backbone]\nchannels = 8\ninput_size = 32\nfeature_size = 8\n[loss]\nbeta = 1\n";
        let cfg = RunConfig::resolve(
            Some(text),
            &["backbone.channels=12".into(), "jgr.graph=similarity".into(), "train.seed=7".into()],
        )
        .unwrap();
        assert_eq!(cfg.backbone.channels, 12);
        assert_eq!(cfg.backbone.input_size, 32);
        assert_eq!(cfg.loss.beta, 1.0);
        assert_eq!(cfg.jgr.graph, GraphPolicy::Similarity);
        assert_eq!(cfg.train.seed, 7);
    }

    #[test]
    fn dotted_keys_are_accepted() {
        let cfg = RunConfig::resolve(Some("loss.delta = 0.5\ndata.joint_subset = []\n"), &[]).unwrap();
        assert_eq!(cfg.loss.delta, 0.5);
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_name() {
        let e = RunConfig::resolve(Some("[backbone]\nwidth = 3\n"), &[]).unwrap_err();
        assert!(e.to_string().contains("backbone.width"), "{e}");
        let e = RunConfig::resolve(None, &["nope.key=1".into()]).unwrap_err();
        assert!(e.to_string().contains("nope.key"), "{e}");
        let e = RunConfig::resolve(None, &["train.epochs=many".into()]).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
    }

    #[test]
    fn every_key_is_listed() {
        let keys = RunConfig::keys();
        for k in [
            "backbone.pool",
            "jgr.graph",
            "jgr.topology",
            "loss.beta",
            "data.cube",
            "train.learning_rate",
            "eval.max_threshold_mm",
            "gradcheck.tol",
        ] {
            assert!(keys.iter().any(|x| x == k), "missing {k}");
        }
    }

    #[test]
    fn joint_subset_must_match_joint_count() {
        let e = RunConfig::resolve(None, &["data.joint_subset=[0, 1]".into()]).unwrap_err();
        assert!(e.to_string().contains("joint_subset"), "{e}");
        let cfg = RunConfig::resolve(
            None,
            &[
                "data.joint_subset=[13, 1, 3, 5]".into(),
                "jgr.joints=4".into(),
                "jgr.topology=chain4".into(),
                "data.train_count=2".into(),
            ],
        )
        .unwrap();
        let ds = cfg.dataset(Split::Train).unwrap();
        assert_eq!(ds.joints(), 4);
        assert_eq!(ds.len(), 2);
    }
}
