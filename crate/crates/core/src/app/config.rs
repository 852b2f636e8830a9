//! Run configuration: a flat JSON object of dotted keys, overridable key by
//! key from the command line.
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `seed` | 7 | RNG seed for parameters and data |
//! | `model.width` | 32 | adapter channel width |
//! | `model.heads` | 2 | cascaded heads per injector/extractor |
//! | `model.stripe_size` | 2 | preferred stripe size in pixels |
//! | `model.attn` / `model.ffn` / `model.conv` | true | branch toggles |
//! | `model.cascade` | true | split into cascaded heads |
//! | `model.shared_ln` | true | one norm for attention and feed-forward |
//! | `model.activation` | `gelu-exact` | or `gelu-tanh` |
//! | `model.ln_order` | `after-projection` | or `before-projection` |
//! | `model.attn_impl` | `gather` | or `reshape` |
//! | `task.image_size` | 32 | synthetic image side, multiple of 32 |
//! | `task.classes` | 3 | classes including background |
//! | `task.batch` | 4 | images per training step |
//! | `task.steps` | 200 | training steps |
//! | `task.lr` | 0.001 | Adam learning rate |
//! | `task.freeze_backbone` | true | train only the adapter and head |
//! | `diag.bins` | 16 | histogram bins |
//! | `diag.size` | 8 | feature map side for the diagnostic |
//! | `bench.width` | 32 | block width in the sweep |
//! | `bench.sizes` | `[8, 16]` | feature map sides in the sweep |
//! | `bench.repeats` | 3 | timed repetitions per row (minimum kept) |
//! | `check.fault` | `none` | `ln-sign` negates layer norm output |
//! | `check.checkpoint` | none | checkpoint directory to verify |

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::adapter::AdapterConfig;
use crate::csa::{AttnImpl, LnOrder};
use crate::error::{Error, Result};
use crate::graph::{Activation, Fault};
use crate::mea::MeaConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Check,
    Bench,
    TrainToy,
    Diag,
}

impl Command {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "check" => Ok(Command::Check),
            "bench" => Ok(Command::Bench),
            "train-toy" => Ok(Command::TrainToy),
            "diag" => Ok(Command::Diag),
            _ => Err(Error::Config(format!("unknown command {s}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelConfig {
    pub width: usize,
    pub heads: usize,
    pub stripe_size: usize,
    pub attn: bool,
    pub ffn: bool,
    pub conv: bool,
    pub cascade: bool,
    pub shared_ln: bool,
    pub activation: Activation,
    pub ln_order: LnOrder,
    pub attn_impl: AttnImpl,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaskConfig {
    pub image_size: usize,
    pub classes: usize,
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub freeze_backbone: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiagConfig {
    pub bins: usize,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchConfig {
    pub width: usize,
    pub sizes: Vec<usize>,
    pub repeats: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckConfig {
    pub fault: Option<String>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub diag: DiagConfig,
    pub bench: BenchConfig,
    pub check: CheckConfig,
    /// Output location; not part of the config hash.
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            model: ModelConfig {
                width: 32,
                heads: 2,
                stripe_size: 2,
                attn: true,
                ffn: true,
                conv: true,
                cascade: true,
                shared_ln: true,
                activation: Activation::GeluExact,
                ln_order: LnOrder::AfterProjection,
                attn_impl: AttnImpl::Gather,
            },
            task: TaskConfig { image_size: 32, classes: 3, batch: 4, steps: 200, lr: 0.001, freeze_backbone: true },
            diag: DiagConfig { bins: 16, size: 8 },
            bench: BenchConfig { width: 32, sizes: vec![8, 16], repeats: 3 },
            check: CheckConfig { fault: None, checkpoint: None },
            out: None,
        }
    }
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    match v {
        Value::Number(n) => n.as_u64().map(|n| n as usize),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
    .ok_or_else(|| Error::Config(format!("{key}: expected a non-negative integer, got {v}")))
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
    .filter(|f: &f64| f.is_finite())
    .ok_or_else(|| Error::Config(format!("{key}: expected a number, got {v}")))
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    match v {
        Value::Bool(b) => Some(*b),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
    .ok_or_else(|| Error::Config(format!("{key}: expected true or false, got {v}")))
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str> {
    v.as_str().ok_or_else(|| Error::Config(format!("{key}: expected a string, got {v}")))
}

fn as_enum<T: serde::de::DeserializeOwned>(key: &str, v: &Value) -> Result<T> {
    serde_json::from_value(v.clone()).map_err(|_| Error::Config(format!("{key}: unrecognised value {v}")))
}

fn as_usize_list(key: &str, v: &Value) -> Result<Vec<usize>> {
    match v {
        Value::Array(items) => items.iter().map(|i| as_usize(key, i)).collect(),
        Value::String(s) => s.split(',').map(|p| as_usize(key, &Value::String(p.to_string()))).collect(),
        _ => Err(Error::Config(format!("{key}: expected a list of integers, got {v}"))),
    }
}

impl RunConfig {
    /// Sets one dotted key. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        match key {
            "seed" => self.seed = as_usize(key, v)? as u64,
            "model.width" => self.model.width = as_usize(key, v)?,
            "model.heads" => self.model.heads = as_usize(key, v)?,
            "model.stripe_size" => self.model.stripe_size = as_usize(key, v)?,
            "model.attn" => self.model.attn = as_bool(key, v)?,
            "model.ffn" => self.model.ffn = as_bool(key, v)?,
            "model.conv" => self.model.conv = as_bool(key, v)?,
            "model.cascade" => self.model.cascade = as_bool(key, v)?,
            "model.shared_ln" => self.model.shared_ln = as_bool(key, v)?,
            "model.activation" => self.model.activation = as_enum(key, v)?,
            "model.ln_order" => self.model.ln_order = as_enum(key, v)?,
            "model.attn_impl" => self.model.attn_impl = as_enum(key, v)?,
            "task.image_size" => self.task.image_size = as_usize(key, v)?,
            "task.classes" => self.task.classes = as_usize(key, v)?,
            "task.batch" => self.task.batch = as_usize(key, v)?,
            "task.steps" => self.task.steps = as_usize(key, v)?,
            "task.lr" => self.task.lr = as_f64(key, v)?,
            "task.freeze_backbone" => self.task.freeze_backbone = as_bool(key, v)?,
            "diag.bins" => self.diag.bins = as_usize(key, v)?,
            "diag.size" => self.diag.size = as_usize(key, v)?,
            "bench.width" => self.bench.width = as_usize(key, v)?,
            "bench.sizes" => self.bench.sizes = as_usize_list(key, v)?,
            "bench.repeats" => self.bench.repeats = as_usize(key, v)?,
            "check.fault" if v.is_null() => self.check.fault = None,
            "check.fault" => {
                let s = as_str(key, v)?;
                self.check.fault = (s != "none").then(|| s.to_string());
            }
            "check.checkpoint" if v.is_null() => self.check.checkpoint = None,
            "check.checkpoint" => self.check.checkpoint = Some(PathBuf::from(as_str(key, v)?)),
            _ => return Err(Error::Config(format!("unknown config key {key}"))),
        }
        Ok(())
    }

    /// `key=value` from the command line. The value is read as JSON when it
    /// parses, otherwise as a bare string.
    pub fn set_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        self.set(key.trim(), &v)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let map: BTreeMap<String, Value> =
            serde_json::from_str(s).map_err(|e| Error::Config(format!("config file is not a flat JSON object: {e}")))?;
        let mut cfg = RunConfig::default();
        for (k, v) in &map {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn mea(&self) -> MeaConfig {
        MeaConfig {
            width: self.model.width,
            head_count: self.model.heads,
            stripe_size: self.model.stripe_size,
            enable_attn: self.model.attn,
            enable_ffn: self.model.ffn,
            enable_conv: self.model.conv,
            enable_cascade: self.model.cascade,
            shared_ln: self.model.shared_ln,
            activation: self.model.activation,
            ln_order: self.model.ln_order,
            attn_impl: self.model.attn_impl,
            ..MeaConfig::default()
        }
    }

    pub fn adapter(&self) -> AdapterConfig {
        AdapterConfig { mea: self.mea(), in_channels: 3, classes: self.task.classes, freeze_backbone: self.task.freeze_backbone }
    }

    pub fn fault(&self) -> Result<Option<Fault>> {
        match self.check.fault.as_deref() {
            None => Ok(None),
            Some("ln-sign") => Ok(Some(Fault::LnSign)),
            Some(other) => Err(Error::Config(format!("unknown fault {other}"))),
        }
    }

    pub fn validate(&self, command: Command) -> Result<()> {
        self.mea().validate()?;
        self.fault()?;
        if self.task.image_size == 0 || !self.task.image_size.is_multiple_of(32) {
            return Err(Error::Config(format!("task.image_size {} must be a positive multiple of 32", self.task.image_size)));
        }
        if self.task.classes < 2 {
            return Err(Error::Config("task.classes must be at least 2".into()));
        }
        match command {
            Command::TrainToy => {
                if self.task.steps == 0 {
                    return Err(Error::Config("task.steps must be at least 1".into()));
                }
                if self.task.batch == 0 {
                    return Err(Error::Config("task.batch must be at least 1".into()));
                }
                if self.task.lr.is_nan() || self.task.lr <= 0.0 {
                    return Err(Error::Config("task.lr must be positive".into()));
                }
            }
            Command::Diag => {
                if self.diag.bins == 0 || self.diag.size == 0 {
                    return Err(Error::Config("diag.bins and diag.size must be positive".into()));
                }
                if !self.model.conv || !(self.model.attn || self.model.ffn) {
                    return Err(Error::Config("diag needs the conv branch and at least one of attn/ffn".into()));
                }
            }
            Command::Bench => {
                if self.bench.sizes.is_empty() || self.bench.sizes.contains(&0) || self.bench.width == 0 {
                    return Err(Error::Config("bench.sizes and bench.width must be positive".into()));
                }
            }
            Command::Check => {}
        }
        Ok(())
    }

    /// Flat dotted view of every setting, in key order.
    pub fn to_dotted(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        let tree = serde_json::to_value(self).expect("config serializes");
        flatten("", &tree, &mut out);
        out
    }

    /// First 16 hex digits of the SHA-256 of the dotted view.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(&self.to_dotted()).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}
