//! Flat `key = value` run configuration shared by every command.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default, listed in [`KEYS`]; unknown keys are rejected.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::sparse::GridSpec;
use crate::tensor::Precision;
use crate::train::{ModelKind, SgdConfig, TrainConfig};

/// Threshold for gradient checks: per-block default or a fixed value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    Auto,
    Fixed(f64),
}

/// `(key, default, description)` for every accepted key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("c", "4", "channels of the check and equivalence problems (even)"),
    ("h", "5", "map height of the check and equivalence problems"),
    ("w", "5", "map width of the check and equivalence problems"),
    ("kh", "0", "window rows of the sparse block; 0 picks 3, or the full map for equiv"),
    ("kw", "0", "window columns of the sparse block; 0 picks 3, or the full map for equiv"),
    ("precision", "double", "single or double"),
    ("seed", "0", "base random seed"),
    ("seeds", "5", "number of seeds for gradcheck and equiv"),
    ("eps", "1e-5", "central-difference step"),
    ("threshold", "auto", "max relative gradient error; auto picks 1e-6 dense / 1e-5 sparse"),
    ("tolerance", "auto", "equiv max abs deviation; auto picks 1e-10 double / 1e-5 single"),
    ("grid", "16,32,64", "bench map sides (square maps)"),
    ("bench_k", "81", "bench samples per query"),
    ("bench_c", "64", "bench channels"),
    ("repeats", "5", "bench warm runs per point"),
    ("parallel", "false", "query-parallel execution"),
    ("size", "32", "beacon image side"),
    ("classes", "3", "beacon classes"),
    ("width", "16", "toy network channels"),
    ("train_kh", "7", "sampling window rows of the toy network"),
    ("train_kw", "7", "sampling window columns of the toy network"),
    ("model", "snl", "snl or local"),
    ("iters", "2000", "training iterations"),
    ("batch", "8", "images per iteration"),
    ("eval_size", "64", "held-out images"),
    ("base_lr", "0.005", "initial learning rate"),
    ("power", "0.9", "poly schedule exponent"),
    ("momentum", "0.9", "SGD momentum"),
    ("weight_decay", "0.0001", "L2 penalty inside the momentum buffer"),
    ("out", "-", "CSV output path; - for stdout"),
    ("log", "train_log.csv", "training log CSV"),
    ("params", "params.snlt", "parameter bundle written by train, read by dump-attention"),
    ("input", "", "input tensor for dump-attention (C x H x W)"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub precision: Precision,
    pub seed: u64,
    pub seeds: usize,
    pub eps: f64,
    pub threshold: Threshold,
    pub tolerance: Option<f64>,
    pub grid: Vec<usize>,
    pub bench_k: usize,
    pub bench_c: usize,
    pub repeats: usize,
    pub parallel: bool,
    pub size: usize,
    pub classes: usize,
    pub width: usize,
    pub train_kh: usize,
    pub train_kw: usize,
    pub model: ModelKind,
    pub iters: usize,
    pub batch: usize,
    pub eval_size: usize,
    pub base_lr: f64,
    pub power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub out: String,
    pub log: PathBuf,
    pub params: PathBuf,
    pub input: Option<PathBuf>,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key} = {value:?}: expected true or false"))),
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            c: 0,
            h: 0,
            w: 0,
            kh: 0,
            kw: 0,
            precision: Precision::Double,
            seed: 0,
            seeds: 0,
            eps: 0.0,
            threshold: Threshold::Auto,
            tolerance: None,
            grid: Vec::new(),
            bench_k: 0,
            bench_c: 0,
            repeats: 0,
            parallel: false,
            size: 0,
            classes: 0,
            width: 0,
            train_kh: 0,
            train_kw: 0,
            model: ModelKind::Snl,
            iters: 0,
            batch: 0,
            eval_size: 0,
            base_lr: 0.0,
            power: 0.0,
            momentum: 0.0,
            weight_decay: 0.0,
            out: String::new(),
            log: PathBuf::new(),
            params: PathBuf::new(),
            input: None,
        };
        for (key, value, _) in KEYS {
            cfg.set(key, value).expect("built-in defaults parse");
        }
        cfg
    }
}

impl RunConfig {
    /// Assign one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "c" => self.c = parse(key, value)?,
            "h" => self.h = parse(key, value)?,
            "w" => self.w = parse(key, value)?,
            "kh" => self.kh = parse(key, value)?,
            "kw" => self.kw = parse(key, value)?,
            "precision" => {
                self.precision = match value {
                    "single" => Precision::Single,
                    "double" => Precision::Double,
                    _ => return Err(Error::Config(format!("precision = {value:?}: expected single or double"))),
                }
            }
            "seed" => self.seed = parse(key, value)?,
            "seeds" => self.seeds = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "threshold" => {
                self.threshold = match value {
                    "auto" => Threshold::Auto,
                    v => Threshold::Fixed(parse(key, v)?),
                }
            }
            "tolerance" => {
                self.tolerance = match value {
                    "auto" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "grid" => {
                self.grid = value
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "bench_k" => self.bench_k = parse(key, value)?,
            "bench_c" => self.bench_c = parse(key, value)?,
            "repeats" => self.repeats = parse(key, value)?,
            "parallel" => self.parallel = parse_bool(key, value)?,
            "size" => self.size = parse(key, value)?,
            "classes" => self.classes = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "train_kh" => self.train_kh = parse(key, value)?,
            "train_kw" => self.train_kw = parse(key, value)?,
            "model" => self.model = parse(key, value)?,
            "iters" => self.iters = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "eval_size" => self.eval_size = parse(key, value)?,
            "base_lr" => self.base_lr = parse(key, value)?,
            "power" => self.power = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "out" => self.out = value.to_string(),
            "log" => self.log = PathBuf::from(value),
            "params" => self.params = PathBuf::from(value),
            "input" => self.input = (!value.is_empty()).then(|| PathBuf::from(value)),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Apply every `key = value` line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", lineno + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    pub fn exec(&self) -> Exec {
        if self.parallel {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            sgd: SgdConfig {
                base_lr: self.base_lr,
                power: self.power,
                momentum: self.momentum,
                weight_decay: self.weight_decay,
                max_iter: self.iters,
            },
            batch: self.batch,
            seed: self.seed,
            size: self.size,
            classes: self.classes,
            width: self.width,
            grid: GridSpec::new(self.train_kh, self.train_kw)?,
            model: self.model,
            eval_size: self.eval_size,
            exec: self.exec(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Render every key with its current value, one per line, in the
    /// format [`RunConfig::apply_text`] reads.
    pub fn to_text(&self) -> String {
        let grid: Vec<String> = self.grid.iter().map(|g| g.to_string()).collect();
        let values = [
            self.c.to_string(),
            self.h.to_string(),
            self.w.to_string(),
            self.kh.to_string(),
            self.kw.to_string(),
            match self.precision {
                Precision::Single => "single".into(),
                Precision::Double => "double".into(),
            },
            self.seed.to_string(),
            self.seeds.to_string(),
            self.eps.to_string(),
            match self.threshold {
                Threshold::Auto => "auto".into(),
                Threshold::Fixed(t) => t.to_string(),
            },
            self.tolerance.map_or("auto".into(), |t| t.to_string()),
            grid.join(","),
            self.bench_k.to_string(),
            self.bench_c.to_string(),
            self.repeats.to_string(),
            self.parallel.to_string(),
            self.size.to_string(),
            self.classes.to_string(),
            self.width.to_string(),
            self.train_kh.to_string(),
            self.train_kw.to_string(),
            self.model.name().into(),
            self.iters.to_string(),
            self.batch.to_string(),
            self.eval_size.to_string(),
            self.base_lr.to_string(),
            self.power.to_string(),
            self.momentum.to_string(),
            self.weight_decay.to_string(),
            self.out.clone(),
            self.log.display().to_string(),
            self.params.display().to_string(),
            self.input.as_ref().map_or(String::new(), |p| p.display().to_string()),
        ];
        KEYS.iter()
            .zip(values)
            .map(|((key, _, _), v)| format!("{key} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_key_table() {
        let cfg = RunConfig::default();
        assert_eq!((cfg.c, cfg.h, cfg.w, cfg.kh, cfg.kw), (4, 5, 5, 0, 0));
        assert_eq!(cfg.base_lr, 0.005);
        assert_eq!(cfg.grid, vec![16, 32, 64]);
        assert_eq!(cfg.threshold, Threshold::Auto);
        assert_eq!(cfg.input, None);
        assert_eq!(cfg.train_config().unwrap().sgd, SgdConfig::default());
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("threshold", "1e-7").unwrap();
        cfg.set("model", "local").unwrap();
        cfg.set("input", "x.snlt").unwrap();
        cfg.set("parallel", "true").unwrap();
        assert_eq!(RunConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(RunConfig::from_text(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
    }

    #[test]
    fn comments_and_whitespace() {
        let cfg = RunConfig::from_text("# a comment\n\n  c = 6 \nprecision=single\n").unwrap();
        assert_eq!(cfg.c, 6);
        assert_eq!(cfg.precision, Precision::Single);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(RunConfig::from_text("colour = red").is_err());
        assert!(RunConfig::from_text("c 4").is_err());
        assert!(RunConfig::from_text("c = four").is_err());
        assert!(RunConfig::from_text("precision = half").is_err());
        assert!(RunConfig::from_text("parallel = maybe").is_err());
        let err = RunConfig::from_text("c = 4\nh = x").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn every_key_documented_once() {
        let mut keys: Vec<&str> = KEYS.iter().map(|k| k.0).collect();
        keys.sort_unstable();
        keys.dedup();
        assert_eq!(keys.len(), KEYS.len());
        assert!(KEYS.iter().all(|k| !k.2.is_empty()));
    }
}
