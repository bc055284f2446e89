//! Run configuration: JSON with strict validation. Unknown keys, duplicate
//! keys, type errors and out-of-range values are all reported together.
//!
//! Every key except `seed` is optional:
//!
//! | key                       | default    |
//! |---------------------------|------------|
//! | `num_clients`             | 2          |
//! | `domain.topology`         | `"chain"`  |
//! | `domain.d_in`             | 16         |
//! | `domain.hidden`           | 16         |
//! | `domain.d_out`            | 16         |
//! | `domain.teacher_rank`     | 2          |
//! | `domain.teacher_scale`    | 1.4        |
//! | `domain.overlap`          | 0.8        |
//! | `domain.noise`            | 0.1        |
//! | `domain.train_samples`    | 64         |
//! | `domain.test_samples`     | 64         |
//! | `domain.cross_samples`    | 64         |
//! | `prune.ratio`             | 0.6        |
//! | `prune.calibration_size`  | 0          |
//! | `lora.rank`               | 4          |
//! | `lora.alpha`              | 8.0        |
//! | `train.lr`                | 0.05       |
//! | `train.steps`             | 400        |
//! | `fusion.method`           | `"fedavg"` |
//! | `fusion.factor_avg`       | false      |
//! | `cr.enabled`              | true       |
//! | `cr.max_dirs`             | `lora.rank`|
//! | `cr.tol`                  | 1e-8       |
//! | `eval.hardness_floor`     | 0.01       |
//! | `output_dir`              | `"out"`    |

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::de::{self, Deserializer, MapAccess, SeqAccess, Visitor};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::backbone::Topology;
use crate::error::{Error, Result};
use crate::fusion::FusionMethod;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DomainConfig {
    pub topology: Topology,
    pub d_in: usize,
    pub hidden: usize,
    pub d_out: usize,
    pub teacher_rank: usize,
    pub teacher_scale: f64,
    pub overlap: f64,
    pub noise: f64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub cross_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruneConfig {
    pub ratio: f64,
    pub calibration_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSettings {
    pub lr: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FusionConfig {
    pub method: FusionMethod,
    pub factor_avg: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrConfig {
    pub enabled: bool,
    pub max_dirs: Option<usize>,
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalConfig {
    pub hardness_floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Config {
    pub seed: u64,
    pub num_clients: usize,
    pub domain: DomainConfig,
    pub prune: PruneConfig,
    pub lora: LoraConfig,
    pub train: TrainSettings,
    pub fusion: FusionConfig,
    pub cr: CrConfig,
    pub eval: EvalConfig,
    pub output_dir: String,
}

impl Config {
    /// All defaults with the given seed.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            num_clients: 2,
            domain: DomainConfig {
                topology: Topology::Chain,
                d_in: 16,
                hidden: 16,
                d_out: 16,
                teacher_rank: 2,
                teacher_scale: 1.4,
                overlap: 0.8,
                noise: 0.1,
                train_samples: 64,
                test_samples: 64,
                cross_samples: 64,
            },
            prune: PruneConfig {
                ratio: 0.6,
                calibration_size: 0,
            },
            lora: LoraConfig { rank: 4, alpha: 8.0 },
            train: TrainSettings { lr: 0.05, steps: 400 },
            fusion: FusionConfig {
                method: FusionMethod::Fedavg,
                factor_avg: false,
            },
            cr: CrConfig {
                enabled: true,
                max_dirs: None,
                tol: 1e-8,
            },
            eval: EvalConfig { hardness_floor: 0.01 },
            output_dir: "out".into(),
        }
    }

    /// Shared-subspace dimension cap; defaults to the adapter rank.
    pub fn max_dirs(&self) -> usize {
        self.cr.max_dirs.unwrap_or(self.lora.rank)
    }

    /// Range and consistency checks, reporting every problem found.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let d = &self.domain;
        let mut need = |ok: bool, msg: String| {
            if !ok {
                errs.push(msg);
            }
        };
        need(self.num_clients >= 1, "num_clients: must be at least 1".into());
        need(d.d_in >= 1, "domain.d_in: must be at least 1".into());
        need(d.d_out >= 1, "domain.d_out: must be at least 1".into());
        need(
            d.topology == Topology::Single || d.hidden >= 1,
            "domain.hidden: must be at least 1".into(),
        );
        need(d.teacher_rank >= 1, "domain.teacher_rank: must be at least 1".into());
        need(
            (self.num_clients + 1) * d.teacher_rank <= d.d_out,
            format!(
                "domain.teacher_rank: (num_clients + 1) * teacher_rank = {} exceeds d_out = {}",
                (self.num_clients + 1) * d.teacher_rank,
                d.d_out
            ),
        );
        need(
            d.teacher_rank <= d.d_in,
            format!("domain.teacher_rank: {} exceeds d_in = {}", d.teacher_rank, d.d_in),
        );
        need(
            d.teacher_scale > 0.0 && d.teacher_scale.is_finite(),
            format!("domain.teacher_scale: must be positive, got {}", d.teacher_scale),
        );
        need(
            (0.0..=1.0).contains(&d.overlap),
            format!("domain.overlap: {} outside [0, 1]", d.overlap),
        );
        need(
            d.noise >= 0.0 && d.noise.is_finite(),
            format!("domain.noise: must be nonnegative, got {}", d.noise),
        );
        need(d.train_samples >= 1, "domain.train_samples: must be at least 1".into());
        need(d.test_samples >= 1, "domain.test_samples: must be at least 1".into());
        need(d.cross_samples >= 1, "domain.cross_samples: must be at least 1".into());
        need(
            (0.0..=1.0).contains(&self.prune.ratio),
            format!("prune.ratio: {} outside [0, 1]", self.prune.ratio),
        );
        need(self.lora.rank >= 1, "lora.rank: must be at least 1".into());
        need(
            self.lora.alpha > 0.0 && self.lora.alpha.is_finite(),
            format!("lora.alpha: must be positive, got {}", self.lora.alpha),
        );
        need(
            self.train.lr > 0.0 && self.train.lr.is_finite(),
            format!("train.lr: must be positive, got {}", self.train.lr),
        );
        need(
            self.cr.max_dirs.is_none_or(|m| m >= 1),
            "cr.max_dirs: must be at least 1".into(),
        );
        need(
            self.cr.tol > 0.0 && self.cr.tol < 1.0,
            format!("cr.tol: {} outside (0, 1)", self.cr.tol),
        );
        need(
            self.eval.hardness_floor >= 0.0 && self.eval.hardness_floor.is_finite(),
            format!("eval.hardness_floor: must be nonnegative, got {}", self.eval.hardness_floor),
        );
        need(!self.output_dir.is_empty(), "output_dir: must not be empty".into());
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// JSON value whose deserialisation rejects duplicate object keys.
struct StrictValue(Value);

impl<'de> Deserialize<'de> for StrictValue {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        deserializer.deserialize_any(StrictVisitor).map(StrictValue)
    }
}

struct StrictVisitor;

impl<'de> Visitor<'de> for StrictVisitor {
    type Value = Value;

    fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("a JSON value")
    }

    fn visit_bool<E>(self, v: bool) -> std::result::Result<Value, E> {
        Ok(Value::Bool(v))
    }

    fn visit_i64<E>(self, v: i64) -> std::result::Result<Value, E> {
        Ok(Value::from(v))
    }

    fn visit_u64<E>(self, v: u64) -> std::result::Result<Value, E> {
        Ok(Value::from(v))
    }

    fn visit_f64<E>(self, v: f64) -> std::result::Result<Value, E> {
        Ok(Value::from(v))
    }

    fn visit_str<E>(self, v: &str) -> std::result::Result<Value, E> {
        Ok(Value::String(v.to_owned()))
    }

    fn visit_string<E>(self, v: String) -> std::result::Result<Value, E> {
        Ok(Value::String(v))
    }

    fn visit_unit<E>(self) -> std::result::Result<Value, E> {
        Ok(Value::Null)
    }

    fn visit_none<E>(self) -> std::result::Result<Value, E> {
        Ok(Value::Null)
    }

    fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> std::result::Result<Value, A::Error> {
        let mut out = Vec::new();
        while let Some(StrictValue(v)) = seq.next_element()? {
            out.push(v);
        }
        Ok(Value::Array(out))
    }

    fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<Value, A::Error> {
        let mut out = Map::new();
        while let Some(key) = map.next_key::<String>()? {
            if out.contains_key(&key) {
                return Err(de::Error::custom(format!("duplicate key `{key}`")));
            }
            let StrictValue(v) = map.next_value()?;
            out.insert(key, v);
        }
        Ok(Value::Object(out))
    }
}

/// Reads typed fields out of one JSON object, recording problems instead of
/// stopping at the first.
struct Section<'v, 'e> {
    path: String,
    obj: Option<&'v Map<String, Value>>,
    known: BTreeSet<&'static str>,
    errors: &'e mut Vec<String>,
}

impl<'v, 'e> Section<'v, 'e> {
    fn new(path: &str, value: Option<&'v Value>, errors: &'e mut Vec<String>) -> Self {
        let obj = match value {
            None => None,
            Some(Value::Object(m)) => Some(m),
            Some(_) => {
                errors.push(format!("{path}: expected an object"));
                None
            }
        };
        Self {
            path: path.to_string(),
            obj,
            known: BTreeSet::new(),
            errors,
        }
    }

    fn key(&self, key: &str) -> String {
        if self.path.is_empty() {
            key.to_string()
        } else {
            format!("{}.{key}", self.path)
        }
    }

    fn raw(&mut self, key: &'static str) -> Option<&'v Value> {
        self.known.insert(key);
        self.obj.and_then(|m| m.get(key))
    }

    fn child(&mut self, key: &'static str) -> Option<&'v Value> {
        self.raw(key)
    }

    fn f64(&mut self, key: &'static str, default: f64) -> f64 {
        match self.raw(key) {
            None => default,
            Some(v) => match v.as_f64() {
                Some(x) => x,
                None => {
                    let k = self.key(key);
                    self.errors.push(format!("{k}: expected a number"));
                    default
                }
            },
        }
    }

    fn u64(&mut self, key: &'static str, default: u64) -> u64 {
        match self.raw(key) {
            None => default,
            Some(v) => match v.as_u64() {
                Some(x) => x,
                None => {
                    let k = self.key(key);
                    self.errors.push(format!("{k}: expected a nonnegative integer"));
                    default
                }
            },
        }
    }

    fn usize(&mut self, key: &'static str, default: usize) -> usize {
        let v = self.u64(key, default as u64);
        usize::try_from(v).unwrap_or_else(|_| {
            let k = self.key(key);
            self.errors.push(format!("{k}: value too large"));
            default
        })
    }

    fn opt_usize(&mut self, key: &'static str) -> Option<usize> {
        match self.raw(key) {
            None | Some(Value::Null) => None,
            Some(v) => match v.as_u64().and_then(|x| usize::try_from(x).ok()) {
                Some(x) => Some(x),
                None => {
                    let k = self.key(key);
                    self.errors.push(format!("{k}: expected a nonnegative integer or null"));
                    None
                }
            },
        }
    }

    fn bool(&mut self, key: &'static str, default: bool) -> bool {
        match self.raw(key) {
            None => default,
            Some(Value::Bool(b)) => *b,
            Some(_) => {
                let k = self.key(key);
                self.errors.push(format!("{k}: expected true or false"));
                default
            }
        }
    }

    fn string(&mut self, key: &'static str, default: &str) -> String {
        match self.raw(key) {
            None => default.to_string(),
            Some(Value::String(s)) => s.clone(),
            Some(_) => {
                let k = self.key(key);
                self.errors.push(format!("{k}: expected a string"));
                default.to_string()
            }
        }
    }

    fn finish(self) {
        if let Some(obj) = self.obj {
            for k in obj.keys() {
                if !self.known.contains(k.as_str()) {
                    let full = if self.path.is_empty() {
                        k.clone()
                    } else {
                        format!("{}.{k}", self.path)
                    };
                    self.errors.push(format!("{full}: unknown key"));
                }
            }
        }
    }
}

/// Parse and validate a configuration document.
pub fn parse_config(text: &str) -> Result<Config> {
    let StrictValue(root) =
        serde_json::from_str(text).map_err(|e| Error::Config(vec![format!("invalid JSON: {e}")]))?;
    let mut errors = Vec::new();
    let d = Config::with_seed(0);

    let mut top = Section::new("", Some(&root), &mut errors);
    let seed_value = top.raw("seed");
    let num_clients = top.usize("num_clients", d.num_clients);
    let output_dir = top.string("output_dir", &d.output_dir);
    let domain_v = top.child("domain");
    let prune_v = top.child("prune");
    let lora_v = top.child("lora");
    let train_v = top.child("train");
    let fusion_v = top.child("fusion");
    let cr_v = top.child("cr");
    let eval_v = top.child("eval");
    top.finish();

    let seed = match seed_value {
        Some(v) => v.as_u64().unwrap_or_else(|| {
            errors.push("seed: expected a nonnegative integer".into());
            0
        }),
        None => {
            errors.push("seed: required".into());
            0
        }
    };

    let mut s = Section::new("domain", domain_v, &mut errors);
    let topology_name = s.string("topology", "chain");
    let mut domain = DomainConfig {
        topology: d.domain.topology,
        d_in: s.usize("d_in", d.domain.d_in),
        hidden: s.usize("hidden", d.domain.hidden),
        d_out: s.usize("d_out", d.domain.d_out),
        teacher_rank: s.usize("teacher_rank", d.domain.teacher_rank),
        teacher_scale: s.f64("teacher_scale", d.domain.teacher_scale),
        overlap: s.f64("overlap", d.domain.overlap),
        noise: s.f64("noise", d.domain.noise),
        train_samples: s.usize("train_samples", d.domain.train_samples),
        test_samples: s.usize("test_samples", d.domain.test_samples),
        cross_samples: s.usize("cross_samples", d.domain.cross_samples),
    };
    s.finish();
    match topology_name.as_str() {
        "chain" => domain.topology = Topology::Chain,
        "single" => domain.topology = Topology::Single,
        other => errors.push(format!("domain.topology: unknown topology `{other}` (expected chain or single)")),
    }

    let mut s = Section::new("prune", prune_v, &mut errors);
    let prune = PruneConfig {
        ratio: s.f64("ratio", d.prune.ratio),
        calibration_size: s.usize("calibration_size", d.prune.calibration_size),
    };
    s.finish();

    let mut s = Section::new("lora", lora_v, &mut errors);
    let lora = LoraConfig {
        rank: s.usize("rank", d.lora.rank),
        alpha: s.f64("alpha", d.lora.alpha),
    };
    s.finish();

    let mut s = Section::new("train", train_v, &mut errors);
    let train = TrainSettings {
        lr: s.f64("lr", d.train.lr),
        steps: s.usize("steps", d.train.steps),
    };
    s.finish();

    let mut s = Section::new("fusion", fusion_v, &mut errors);
    let method_name = s.string("method", d.fusion.method.as_str());
    let factor_avg = s.bool("factor_avg", d.fusion.factor_avg);
    s.finish();
    let method = method_name.parse::<FusionMethod>().unwrap_or_else(|msg| {
        errors.push(format!("fusion.method: {msg}"));
        d.fusion.method
    });
    let fusion = FusionConfig { method, factor_avg };

    let mut s = Section::new("cr", cr_v, &mut errors);
    let cr = CrConfig {
        enabled: s.bool("enabled", d.cr.enabled),
        max_dirs: s.opt_usize("max_dirs"),
        tol: s.f64("tol", d.cr.tol),
    };
    s.finish();

    let mut s = Section::new("eval", eval_v, &mut errors);
    let eval = EvalConfig {
        hardness_floor: s.f64("hardness_floor", d.eval.hardness_floor),
    };
    s.finish();

    let cfg = Config {
        seed,
        num_clients,
        domain,
        prune,
        lora,
        train,
        fusion,
        cr,
        eval,
        output_dir,
    };
    if let Err(Error::Config(more)) = cfg.validate() {
        errors.extend(more);
    }
    if errors.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(errors))
    }
}

pub fn load_config(path: &Path) -> Result<Config> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(msgs) => Error::Config(
            msgs.into_iter()
                .map(|m| format!("{}: {m}", path.display()))
                .collect(),
        ),
        other => other,
    })
}
