//! Run configuration.
//!
//! A config file holds one `dotted.key = value` pair per line. Values are
//! TOML scalars or flat arrays: quoted strings, integers, reals, `true` /
//! `false`, `[a, b, c]`. `#` starts a comment. Every key is optional and
//! unknown keys are rejected. Keys and defaults:
//!
//! ```text
//! dataset.name           = "drift"        # output subdirectory
//! dataset.kind           = "synthetic"    # or "csv"
//! dataset.path           = ""             # csv only
//! dataset.header         = false          # csv: skip the first line
//! dataset.drift_order    = true           # csv: sort rows along the first principal component
//!
//! stream.per_step        = 500            # rows per time step, gold set included
//! stream.test_count      = 150            # test rows per step (default 30% of per_step)
//! stream.steps           = 20             # synthetic: unlabeled steps after the gold set
//! stream.dims            = 2              # synthetic
//! stream.classes         = 2              # synthetic
//! stream.modes_per_class = 1              # synthetic
//! stream.separation      = 6.0            # synthetic: distance between class means
//! stream.speed           = 0.5            # synthetic: mean displacement per step
//! stream.direction       = [1.0, 1.0]     # synthetic
//! stream.std             = 1.0            # synthetic
//! stream.seed            = <cell seed>    # fixes the stream across seeds when set
//!
//! model.hidden           = 64
//! model.embed            = 64
//!
//! train.epochs           = 20             # gold pretraining and joint training
//! train.lr               = 0.01
//! train.batch_size       = 64
//! train.early_stop       = true
//!
//! gen.iterations         = 10             # clustering rounds K
//! gen.ils_weight         = 0.1
//! gen.lr                 = 0.01
//! gen.warmup_epochs      = 1
//! gen.change_tol         = 0.001
//! gen.center             = true
//! gen.label_energy       = 0.9
//!
//! replay.lookback        = 100
//! replay.eta1            = 0.01
//! replay.eta2            = 0.01
//! replay.epochs          = 20
//! replay.batch_size      = 64
//! replay.energy          = 0.97
//! replay.sample_rows     = 512
//!
//! mt.enabled             = false
//! mt.weight              = 1.0
//! mt.momentum            = 0.99
//!
//! methods                = ["ours", "ours-no-ils", "ours-no-fr", "ours-pl", "st", "jt", "pl-conf"]
//! seeds                  = [0, 1, 2, 3, 4]
//!
//! probe.enabled          = false
//! probe.bounds           = [0.0, 0.05, 0.1, 0.15, 0.2, 0.25]
//! probe.draws            = 20
//!
//! output.dir             = "runs"         # GENREPLAY_OUT overrides
//! output.checkpoints     = true
//! ```

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};

use genreplay_core::baselines::TeacherConfig;
use genreplay_core::pseudo_label::EmbeddingGeometry;
use genreplay_core::{DriftFamily, Method, PipelineConfig};
use toml::Value;

/// Environment variable that replaces `output.dir`.
pub const OUT_ENV: &str = "GENREPLAY_OUT";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub field: String,
    pub reason: String,
}

impl ConfigError {
    fn new(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.reason)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Synthetic(DriftFamily),
    Csv {
        path: PathBuf,
        header: bool,
        drift_order: bool,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub bounds: Vec<f64>,
    pub draws: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset_name: String,
    pub source: DatasetSource,
    pub per_step: usize,
    pub test_count: usize,
    /// Stream seed; `None` uses each cell's seed.
    pub stream_seed: Option<u64>,
    pub pipeline: PipelineConfig,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub probe: Option<ProbeConfig>,
    pub output_dir: PathBuf,
    pub checkpoints: bool,
}

const KEYS: &[&str] = &[
    "dataset.name",
    "dataset.kind",
    "dataset.path",
    "dataset.header",
    "dataset.drift_order",
    "stream.per_step",
    "stream.test_count",
    "stream.steps",
    "stream.dims",
    "stream.classes",
    "stream.modes_per_class",
    "stream.separation",
    "stream.speed",
    "stream.direction",
    "stream.std",
    "stream.seed",
    "model.hidden",
    "model.embed",
    "train.epochs",
    "train.lr",
    "train.batch_size",
    "train.early_stop",
    "gen.iterations",
    "gen.ils_weight",
    "gen.lr",
    "gen.warmup_epochs",
    "gen.change_tol",
    "gen.center",
    "gen.label_energy",
    "replay.lookback",
    "replay.eta1",
    "replay.eta2",
    "replay.epochs",
    "replay.batch_size",
    "replay.energy",
    "replay.sample_rows",
    "mt.enabled",
    "mt.weight",
    "mt.momentum",
    "methods",
    "seeds",
    "probe.enabled",
    "probe.bounds",
    "probe.draws",
    "output.dir",
    "output.checkpoints",
];

struct Fields(BTreeMap<String, Value>);

impl Fields {
    fn take(&mut self, key: &str) -> Option<Value> {
        self.0.remove(key)
    }

    fn count(&mut self, key: &str, default: usize) -> Result<usize, ConfigError> {
        match self.take(key) {
            None => Ok(default),
            Some(Value::Integer(v)) => {
                usize::try_from(v).map_err(|_| ConfigError::new(key, format!("{v} is negative")))
            }
            Some(v) => Err(ConfigError::new(key, format!("expected an integer, got {v}"))),
        }
    }

    fn real(&mut self, key: &str, default: f64) -> Result<f64, ConfigError> {
        let v = match self.take(key) {
            None => return Ok(default),
            Some(Value::Float(v)) => v,
            Some(Value::Integer(v)) => v as f64,
            Some(v) => return Err(ConfigError::new(key, format!("expected a number, got {v}"))),
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(ConfigError::new(key, "must be finite"))
        }
    }

    fn flag(&mut self, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.take(key) {
            None => Ok(default),
            Some(Value::Boolean(b)) => Ok(b),
            Some(v) => Err(ConfigError::new(key, format!("expected true or false, got {v}"))),
        }
    }

    fn text(&mut self, key: &str) -> Result<Option<String>, ConfigError> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s)),
            Some(v) => Err(ConfigError::new(key, format!("expected a string, got {v}"))),
        }
    }

    fn array(&mut self, key: &str) -> Result<Option<Vec<Value>>, ConfigError> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::Array(a)) => Ok(Some(a)),
            Some(v) => Err(ConfigError::new(key, format!("expected an array, got {v}"))),
        }
    }

    fn reals(&mut self, key: &str) -> Result<Option<Vec<f64>>, ConfigError> {
        let Some(items) = self.array(key)? else {
            return Ok(None);
        };
        items
            .into_iter()
            .map(|v| match v {
                Value::Float(x) if x.is_finite() => Ok(x),
                Value::Integer(x) => Ok(x as f64),
                other => Err(ConfigError::new(key, format!("{other} is not a finite number"))),
            })
            .collect::<Result<_, _>>()
            .map(Some)
    }
}

fn flatten(prefix: &str, table: toml::Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            v => {
                out.insert(key, v);
            }
        }
    }
}

pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::new("config", format!("{}: {e}", path.display())))?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<RunConfig, ConfigError> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| ConfigError::new("config", e.message().to_string()))?;
    let mut flat = BTreeMap::new();
    flatten("", table, &mut flat);
    if let Some(bad) = flat.keys().find(|k| !KEYS.contains(&k.as_str())) {
        return Err(ConfigError::new(bad.clone(), "unknown key"));
    }
    let mut f = Fields(flat);

    let kind = f.text("dataset.kind")?.unwrap_or_else(|| "synthetic".into());
    let per_step = f.count("stream.per_step", 500)?;
    if per_step == 0 {
        return Err(ConfigError::new("stream.per_step", "must be positive"));
    }
    let test_count = f.count("stream.test_count", (per_step * 3 + 5) / 10)?;
    if test_count >= per_step {
        return Err(ConfigError::new("stream.test_count", "must be smaller than stream.per_step"));
    }
    let path = f.text("dataset.path")?;
    let header = f.flag("dataset.header", false)?;
    let drift_order = f.flag("dataset.drift_order", true)?;
    let defaults = DriftFamily::default();
    let family = DriftFamily {
        dims: f.count("stream.dims", defaults.dims)?,
        classes: f.count("stream.classes", defaults.classes)?,
        modes_per_class: f.count("stream.modes_per_class", defaults.modes_per_class)?,
        separation: f.real("stream.separation", defaults.separation)?,
        speed: f.real("stream.speed", defaults.speed)?,
        direction: f.reals("stream.direction")?.unwrap_or(defaults.direction),
        std: f.real("stream.std", defaults.std)?,
        instances_per_step: per_step,
        steps: f.count("stream.steps", defaults.steps)?,
        test_fraction: test_count as f64 / per_step as f64,
        seed: 0,
    };
    let source = match kind.as_str() {
        "synthetic" => {
            family
                .to_spec()
                .map_err(|e| ConfigError::new("stream", e.to_string()))?;
            DatasetSource::Synthetic(family)
        }
        "csv" => DatasetSource::Csv {
            path: PathBuf::from(
                path.filter(|p| !p.is_empty())
                    .ok_or_else(|| ConfigError::new("dataset.path", "required for csv datasets"))?,
            ),
            header,
            drift_order,
        },
        other => {
            return Err(ConfigError::new(
                "dataset.kind",
                format!("expected \"synthetic\" or \"csv\", got \"{other}\""),
            ))
        }
    };
    let dataset_name = match f.text("dataset.name")? {
        Some(n) => n,
        None => match &source {
            DatasetSource::Synthetic(_) => "drift".into(),
            DatasetSource::Csv { path, .. } => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "csv".into()),
        },
    };
    if dataset_name.is_empty() || dataset_name.contains(['/', '\\']) || dataset_name.starts_with('.') {
        return Err(ConfigError::new("dataset.name", "must be a plain directory name"));
    }
    let stream_seed = match f.take("stream.seed") {
        None => None,
        Some(Value::Integer(v)) => Some(
            u64::try_from(v).map_err(|_| ConfigError::new("stream.seed", "must be nonnegative"))?,
        ),
        Some(v) => return Err(ConfigError::new("stream.seed", format!("expected an integer, got {v}"))),
    };

    let mut p = PipelineConfig::default();
    p.hidden = f.count("model.hidden", p.hidden)?;
    p.embed = f.count("model.embed", p.embed)?;
    p.pretrain.epochs = f.count("train.epochs", p.pretrain.epochs)?;
    p.pretrain.lr = f.real("train.lr", p.pretrain.lr)?;
    p.pretrain.batch_size = f.count("train.batch_size", p.pretrain.batch_size)?;
    p.pretrain.early_stop = f.flag("train.early_stop", p.pretrain.early_stop)?;
    p.generation.iterations = f.count("gen.iterations", p.generation.iterations)?;
    p.generation.ils_weight = f.real("gen.ils_weight", p.generation.ils_weight)?;
    p.generation.lr = f.real("gen.lr", p.generation.lr)?;
    p.generation.warmup.epochs = f.count("gen.warmup_epochs", p.generation.warmup.epochs)?;
    p.generation.change_tol = f.real("gen.change_tol", p.generation.change_tol)?;
    p.generation.geometry = EmbeddingGeometry {
        center: f.flag("gen.center", p.generation.geometry.center)?,
    };
    p.label_energy = f.real("gen.label_energy", p.label_energy)?;
    p.lookback = f.count("replay.lookback", p.lookback)?;
    p.replay.eta1 = f.real("replay.eta1", p.replay.eta1)?;
    p.replay.eta2 = f.real("replay.eta2", p.replay.eta2)?;
    p.replay.epochs = f.count("replay.epochs", p.replay.epochs)?;
    p.replay.batch_size = f.count("replay.batch_size", p.replay.batch_size)?;
    p.replay.energy = f.real("replay.energy", p.replay.energy)?;
    p.replay.sample_rows = f.count("replay.sample_rows", p.replay.sample_rows)?;
    let mt = f.flag("mt.enabled", false)?;
    let teacher = TeacherConfig {
        weight: f.real("mt.weight", 1.0)?,
        momentum: f.real("mt.momentum", 0.99)?,
    };
    p.teacher = mt.then_some(teacher);
    p.validate().map_err(|e| match e {
        genreplay_core::Error::InvalidParameter { name, reason } => {
            ConfigError::new(qualified(name), reason)
        }
        other => ConfigError::new("config", other.to_string()),
    })?;

    let methods = match f.array("methods")? {
        None => Method::ALL.to_vec(),
        Some(items) => {
            let mut out = Vec::new();
            for v in items {
                let Value::String(s) = v else {
                    return Err(ConfigError::new("methods", format!("{v} is not a string")));
                };
                let m: Method = s
                    .parse()
                    .map_err(|_| ConfigError::new("methods", format!("unknown method \"{s}\"")))?;
                if out.contains(&m) {
                    return Err(ConfigError::new("methods", format!("\"{s}\" listed twice")));
                }
                out.push(m);
            }
            out
        }
    };
    if methods.is_empty() {
        return Err(ConfigError::new("methods", "must name at least one method"));
    }
    let seeds = match f.array("seeds")? {
        None => (0..5).collect(),
        Some(items) => {
            let mut out: Vec<u64> = Vec::new();
            for v in items {
                match v {
                    Value::Integer(s) if s >= 0 && !out.contains(&(s as u64)) => out.push(s as u64),
                    other => {
                        return Err(ConfigError::new(
                            "seeds",
                            format!("{other} is not a distinct nonnegative integer"),
                        ))
                    }
                }
            }
            out
        }
    };
    if seeds.is_empty() {
        return Err(ConfigError::new("seeds", "must list at least one seed"));
    }

    let probe_enabled = f.flag("probe.enabled", false)?;
    let bounds = f
        .reals("probe.bounds")?
        .unwrap_or_else(|| vec![0.0, 0.05, 0.1, 0.15, 0.2, 0.25]);
    if bounds.iter().any(|b| *b < 0.0) {
        return Err(ConfigError::new("probe.bounds", "bounds must be nonnegative"));
    }
    let draws = f.count("probe.draws", 20)?;
    if draws == 0 {
        return Err(ConfigError::new("probe.draws", "must be at least 1"));
    }
    let probe = probe_enabled.then_some(ProbeConfig { bounds, draws });

    let output_dir = match std::env::var_os(OUT_ENV) {
        Some(dir) if !dir.is_empty() => {
            f.take("output.dir");
            PathBuf::from(dir)
        }
        _ => PathBuf::from(f.text("output.dir")?.unwrap_or_else(|| "runs".into())),
    };
    let checkpoints = f.flag("output.checkpoints", true)?;
    debug_assert!(f.0.is_empty(), "unconsumed keys {:?}", f.0.keys());

    Ok(RunConfig {
        dataset_name,
        source,
        per_step,
        test_count,
        stream_seed,
        pipeline: p,
        methods,
        seeds,
        probe,
        output_dir,
        checkpoints,
    })
}

fn qualified(name: &str) -> String {
    match name {
        "eta1" | "eta2" | "energy" => format!("replay.{name}"),
        "ils_weight" => "gen.ils_weight".into(),
        "label_energy" => "gen.label_energy".into(),
        "hidden" => "model.hidden".into(),
        "momentum" => "mt.momentum".into(),
        "epochs" | "lr" | "batch_size" => format!("train.{name}"),
        other => other.into(),
    }
}

fn real_text(v: f64) -> String {
    format!("{v:?}")
}

fn list<T, F: Fn(&T) -> String>(items: &[T], f: F) -> String {
    let parts: Vec<String> = items.iter().map(f).collect();
    format!("[{}]", parts.join(", "))
}

impl RunConfig {
    /// Every key with its resolved value, in the grammar above. Parsing the
    /// result gives back an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        line("dataset.name", format!("{:?}", self.dataset_name));
        match &self.source {
            DatasetSource::Synthetic(fam) => {
                line("dataset.kind", "\"synthetic\"".into());
                line("stream.steps", fam.steps.to_string());
                line("stream.dims", fam.dims.to_string());
                line("stream.classes", fam.classes.to_string());
                line("stream.modes_per_class", fam.modes_per_class.to_string());
                line("stream.separation", real_text(fam.separation));
                line("stream.speed", real_text(fam.speed));
                line("stream.direction", list(&fam.direction, |v| real_text(*v)));
                line("stream.std", real_text(fam.std));
            }
            DatasetSource::Csv {
                path,
                header,
                drift_order,
            } => {
                line("dataset.kind", "\"csv\"".into());
                line("dataset.path", format!("{:?}", path.display().to_string()));
                line("dataset.header", header.to_string());
                line("dataset.drift_order", drift_order.to_string());
            }
        }
        line("stream.per_step", self.per_step.to_string());
        line("stream.test_count", self.test_count.to_string());
        if let Some(seed) = self.stream_seed {
            line("stream.seed", seed.to_string());
        }
        let p = &self.pipeline;
        line("model.hidden", p.hidden.to_string());
        line("model.embed", p.embed.to_string());
        line("train.epochs", p.pretrain.epochs.to_string());
        line("train.lr", real_text(p.pretrain.lr));
        line("train.batch_size", p.pretrain.batch_size.to_string());
        line("train.early_stop", p.pretrain.early_stop.to_string());
        line("gen.iterations", p.generation.iterations.to_string());
        line("gen.ils_weight", real_text(p.generation.ils_weight));
        line("gen.lr", real_text(p.generation.lr));
        line("gen.warmup_epochs", p.generation.warmup.epochs.to_string());
        line("gen.change_tol", real_text(p.generation.change_tol));
        line("gen.center", p.generation.geometry.center.to_string());
        line("gen.label_energy", real_text(p.label_energy));
        line("replay.lookback", p.lookback.to_string());
        line("replay.eta1", real_text(p.replay.eta1));
        line("replay.eta2", real_text(p.replay.eta2));
        line("replay.epochs", p.replay.epochs.to_string());
        line("replay.batch_size", p.replay.batch_size.to_string());
        line("replay.energy", real_text(p.replay.energy));
        line("replay.sample_rows", p.replay.sample_rows.to_string());
        line("mt.enabled", p.teacher.is_some().to_string());
        if let Some(t) = p.teacher {
            line("mt.weight", real_text(t.weight));
            line("mt.momentum", real_text(t.momentum));
        }
        line("methods", list(&self.methods, |m| format!("\"{m}\"")));
        line("seeds", list(&self.seeds, |s| s.to_string()));
        line("probe.enabled", self.probe.is_some().to_string());
        if let Some(pr) = &self.probe {
            line("probe.bounds", list(&pr.bounds, |v| real_text(*v)));
            line("probe.draws", pr.draws.to_string());
        }
        line("output.dir", format!("{:?}", self.output_dir.display().to_string()));
        line("output.checkpoints", self.checkpoints.to_string());
        s
    }

    /// The same config restricted to one (method, seed) cell.
    pub fn cell(&self, method: Method, seed: u64) -> RunConfig {
        RunConfig {
            methods: vec![method],
            seeds: vec![seed],
            ..self.clone()
        }
    }
}
