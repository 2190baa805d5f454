//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Lists are comma
//! separated; hybrid block positions are written `stage:block`.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dkgh_core::model::ModelConfig;

use crate::augment::AugmentConfig;
use crate::error::{Error, IoContext, Result};

/// Parsed key/value pairs that remember their line numbers and which keys
/// were consumed, so that leftovers can be reported as typos.
#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    origin: PathBuf,
    entries: BTreeMap<String, (String, usize)>,
    used: std::cell::RefCell<std::collections::BTreeSet<String>>,
}

impl KeyValues {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(origin, Some(i + 1), "expected `key = value`"))?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(Error::parse(origin, Some(i + 1), "empty key"));
            }
            if entries.insert(key.clone(), (v.trim().to_string(), i + 1)).is_some() {
                return Err(Error::parse(origin, Some(i + 1), format!("`{key}` given twice")));
            }
        }
        Ok(KeyValues {
            origin: origin.to_path_buf(),
            entries,
            used: Default::default(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        Self::parse(&text, path)
    }

    fn raw(&self, key: &str) -> Option<&(String, usize)> {
        let e = self.entries.get(key);
        if e.is_some() {
            self.used.borrow_mut().insert(key.to_string());
        }
        e
    }

    pub fn get<V: FromStr>(&self, key: &str) -> Result<Option<V>> {
        match self.raw(key) {
            None => Ok(None),
            Some((v, line)) => v.parse().map(Some).map_err(|_| {
                Error::parse(&self.origin, Some(*line), format!("cannot parse `{key}` value `{v}`"))
            }),
        }
    }

    pub fn get_or<V: FromStr>(&self, key: &str, default: V) -> Result<V> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn list<V: FromStr>(&self, key: &str) -> Result<Option<Vec<V>>> {
        match self.raw(key) {
            None => Ok(None),
            Some((v, line)) => {
                if v.is_empty() || v == "none" {
                    return Ok(Some(Vec::new()));
                }
                v.split(',')
                    .map(|s| s.trim().parse())
                    .collect::<std::result::Result<Vec<V>, _>>()
                    .map(Some)
                    .map_err(|_| Error::parse(&self.origin, Some(*line), format!("cannot parse list `{key}` = `{v}`")))
            }
        }
    }

    fn positions(&self, key: &str) -> Result<Option<Vec<(usize, usize)>>> {
        let Some(items) = self.list::<String>(key)? else {
            return Ok(None);
        };
        let line = self.entries[key].1;
        items
            .iter()
            .map(|it| {
                let (s, b) = it.split_once(':').ok_or(())?;
                Ok((s.trim().parse().map_err(|_| ())?, b.trim().parse().map_err(|_| ())?))
            })
            .collect::<std::result::Result<Vec<_>, ()>>()
            .map(Some)
            .map_err(|_| Error::parse(&self.origin, Some(line), format!("`{key}` needs `stage:block` pairs")))
    }

    /// Fails on the first key nobody asked for.
    pub fn reject_unknown(&self) -> Result<()> {
        let used = self.used.borrow();
        match self.entries.iter().find(|(k, _)| !used.contains(*k)) {
            None => Ok(()),
            Some((k, (_, line))) => Err(Error::parse(&self.origin, Some(*line), format!("unknown key `{k}`"))),
        }
    }
}

fn join<V: fmt::Display>(items: &[V]) -> String {
    if items.is_empty() {
        return "none".into();
    }
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Reads model keys on top of a preset (`model = toy | default`).
/// The result is not validated.
pub fn model_from_kv(kv: &KeyValues) -> Result<ModelConfig> {
    let mut m = match kv.get_or("model", "toy".to_string())?.as_str() {
        "toy" => ModelConfig::toy(),
        "default" => ModelConfig::default(),
        other => return Err(Error::Config(format!("unknown model preset `{other}`"))),
    };
    m.in_channels = kv.get_or("in_channels", m.in_channels)?;
    m.stem_channels = kv.get_or("stem_channels", m.stem_channels)?;
    m.stem_stride = kv.get_or("stem_stride", m.stem_stride)?;
    if let Some(v) = kv.list("stage_channels")? {
        m.stage_channels = v;
    }
    if let Some(v) = kv.list("stage_blocks")? {
        m.stage_blocks = v;
    }
    if let Some(v) = kv.positions("dkgh_positions")? {
        m.dkgh_positions = v;
    }
    m.num_experts = kv.get_or("num_experts", m.num_experts)?;
    m.top_k = kv.get_or("top_k", m.top_k)?;
    if let Some(v) = kv.list("gaze_channels")? {
        m.gaze_channels = v;
    }
    m.gaze_dim = kv.get_or("gaze_dim", m.gaze_dim)?;
    m.num_classes = kv.get_or("num_classes", m.num_classes)?;
    m.seed = kv.get_or("seed", m.seed)?;
    Ok(m)
}

/// Every model key, fully spelled out (no preset needed to read it back).
pub fn model_to_kv(m: &ModelConfig) -> String {
    let pos: Vec<String> = m.dkgh_positions.iter().map(|(s, b)| format!("{s}:{b}")).collect();
    let mut s = String::new();
    writeln!(s, "in_channels = {}", m.in_channels).unwrap();
    writeln!(s, "stem_channels = {}", m.stem_channels).unwrap();
    writeln!(s, "stem_stride = {}", m.stem_stride).unwrap();
    writeln!(s, "stage_channels = {}", join(&m.stage_channels)).unwrap();
    writeln!(s, "stage_blocks = {}", join(&m.stage_blocks)).unwrap();
    writeln!(s, "dkgh_positions = {}", join(&pos)).unwrap();
    writeln!(s, "num_experts = {}", m.num_experts).unwrap();
    writeln!(s, "top_k = {}", m.top_k).unwrap();
    writeln!(s, "gaze_channels = {}", join(&m.gaze_channels)).unwrap();
    writeln!(s, "gaze_dim = {}", m.gaze_dim).unwrap();
    writeln!(s, "num_classes = {}", m.num_classes).unwrap();
    writeln!(s, "seed = {}", m.seed).unwrap();
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(()),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

/// Everything a training run depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub step_size: usize,
    pub gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    /// Seeds initialization, fold assignment, sampling and augmentation.
    pub seed: u64,
    pub fold: usize,
    pub folds: usize,
    pub precision: Precision,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = ModelConfig {
            num_experts: 4,
            ..ModelConfig::toy()
        };
        TrainConfig {
            lr: 5e-4,
            step_size: 10,
            gamma: 0.1,
            epochs: 30,
            batch_size: 64,
            lambda: 0.01,
            seed: 0,
            fold: 0,
            folds: 5,
            precision: Precision::F64,
            model,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = TrainConfig::default();
        let seed = kv.get_or("seed", d.seed)?;
        let mut model = model_from_kv(kv)?;
        // training runs four experts per branch whatever the preset says
        if kv.get::<usize>("num_experts")?.is_none() {
            model.num_experts = d.model.num_experts;
        }
        model.seed = seed;
        let aug = AugmentConfig {
            brightness_contrast_range: (
                kv.get_or("augment_lo", d.augment.brightness_contrast_range.0)?,
                kv.get_or("augment_hi", d.augment.brightness_contrast_range.1)?,
            ),
            noise_sigma: kv.get_or("noise_sigma", d.augment.noise_sigma)?,
            enabled: kv.get_or("augment", d.augment.enabled)?,
        };
        let cfg = TrainConfig {
            lr: kv.get_or("lr", d.lr)?,
            step_size: kv.get_or("step_size", d.step_size)?,
            gamma: kv.get_or("gamma", d.gamma)?,
            epochs: kv.get_or("epochs", d.epochs)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            lambda: kv.get_or("lambda", d.lambda)?,
            seed,
            fold: kv.get_or("fold", d.fold)?,
            folds: kv.get_or("folds", d.folds)?,
            precision: kv.get_or("precision", d.precision)?,
            model,
            augment: aug,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let kv = KeyValues::load(path)?;
        let cfg = Self::from_kv(&kv)?;
        kv.reject_unknown()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return fail(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if self.step_size == 0 || self.batch_size == 0 {
            return fail("step_size and batch_size must be positive".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.folds < 2 || self.fold >= self.folds {
            return fail(format!("fold {} is not in [0, {})", self.fold, self.folds));
        }
        self.augment.validate()?;
        self.model.validate()?;
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "lr = {}", self.lr).unwrap();
        writeln!(s, "step_size = {}", self.step_size).unwrap();
        writeln!(s, "gamma = {}", self.gamma).unwrap();
        writeln!(s, "epochs = {}", self.epochs).unwrap();
        writeln!(s, "batch_size = {}", self.batch_size).unwrap();
        writeln!(s, "lambda = {}", self.lambda).unwrap();
        writeln!(s, "fold = {}", self.fold).unwrap();
        writeln!(s, "folds = {}", self.folds).unwrap();
        writeln!(s, "precision = {}", self.precision).unwrap();
        writeln!(s, "augment = {}", self.augment.enabled).unwrap();
        writeln!(s, "augment_lo = {}", self.augment.brightness_contrast_range.0).unwrap();
        writeln!(s, "augment_hi = {}", self.augment.brightness_contrast_range.1).unwrap();
        writeln!(s, "noise_sigma = {}", self.augment.noise_sigma).unwrap();
        s.push_str(&model_to_kv(&self.model));
        s
    }
}
