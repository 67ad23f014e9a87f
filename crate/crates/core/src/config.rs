//! Flat `key = value` pipeline configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::dual_attn::{PredictorConfig, PredictorTrainConfig, StackConfig, VitConfig};
use crate::eval::ProbeConfig;
use crate::features::ExtractorTrainConfig;
use crate::patch_select::{Method, ThresholdRule};
use crate::slide_io::TileSpec;
use crate::synth::SynthConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid value {value:?} for {key}: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("config constraint `{rule}` violated: {detail}")]
    Constraint { rule: &'static str, detail: String },
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

const LOCATION_KEYS: [&str; 2] = ["work.dir", "data.dir"];

/// Every recognized key with its default.
const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("work.dir", "work"),
    ("data.dir", ""),
    ("synth.slides", "25"),
    ("synth.side", "1024"),
    ("synth.genes", "4"),
    ("synth.blob_min", "1"),
    ("synth.blob_max", "6"),
    ("synth.blob_cells_min", "1"),
    ("synth.blob_cells_max", "4"),
    ("synth.density_min", "0.25"),
    ("synth.density_max", "1.0"),
    ("synth.grain", "4"),
    ("synth.noise", "10.0"),
    ("tile.p", "64"),
    ("tile.q", "16"),
    ("select.method", "shannon"),
    ("select.rule", "adaptive"),
    ("select.sigma", "1.0"),
    ("select.threshold", "0"),
    ("select.level", "6"),
    ("extract.d", "32"),
    ("extract.steps", "500"),
    ("extract.lr", "0.001"),
    ("extract.momentum", "0.9"),
    ("extract.batch", "8"),
    ("extract.adversarial", "false"),
    ("extract.max_patches", "2048"),
    ("stack.blocks", "10"),
    ("stack.interval", "2"),
    ("stack.expansion", "4"),
    ("vit.layers", "2"),
    ("vit.heads", "4"),
    ("vit.token_cap", "256"),
    ("vit.positional", "true"),
    ("train.epochs", "30"),
    ("train.lr", "0.0003"),
    ("train.weight_decay", "0.0"),
    ("train.batch", "1"),
    ("train.clip", "1.0"),
    ("train.sample_tokens", "8"),
    ("eval.folds", "5"),
    ("eval.fold", "0"),
    ("eval.seed", "0"),
    ("probe.epochs", "300"),
    ("probe.lr", "0.01"),
    ("predict.slide", ""),
];

/// Parsed, validated configuration. `entries` holds the effective text
/// values of every key.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    entries: BTreeMap<String, String>,
    pub seed: u64,
    pub work_dir: PathBuf,
    pub data_dir: PathBuf,
    pub slides: usize,
    pub synth: SynthConfig,
    pub tile: TileSpec,
    pub method: Method,
    pub rule: ThresholdRule,
    pub level: u32,
    pub d: usize,
    pub extract: ExtractorTrainConfig,
    pub max_patches: usize,
    pub stack: StackConfig,
    pub vit: VitConfig,
    pub train: PredictorTrainConfig,
    pub folds: usize,
    pub holdout_fold: usize,
    pub eval_seed: u64,
    pub probe: ProbeConfig,
    pub predict_slide: Option<PathBuf>,
}

fn parse<T: FromStr>(m: &BTreeMap<String, String>, key: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    let v = &m[key];
    v.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.to_string(),
        value: v.clone(),
        reason: e.to_string(),
    })
}

fn constraint(ok: bool, rule: &'static str, detail: impl FnOnce() -> String) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError::Constraint { rule, detail: detail() })
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::Syntax { line: i + 1, text: raw.to_string() });
        };
        let k = k.trim();
        if k.is_empty() {
            return Err(ConfigError::Syntax { line: i + 1, text: raw.to_string() });
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Splits a `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String), ConfigError> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(ConfigError::Syntax { line: 0, text: s.to_string() }),
    }
}

impl PipelineConfig {
    /// Defaults overlaid with `pairs` in order.
    pub fn from_pairs<I, K, V>(pairs: I) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        let mut m: BTreeMap<String, String> = DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        for (k, v) in pairs {
            let k = k.into();
            if !m.contains_key(&k) {
                return Err(ConfigError::UnknownKey(k));
            }
            m.insert(k, v.into());
        }
        Self::build(m)
    }

    pub fn from_str_with(text: &str, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut pairs = parse_pairs(text)?;
        pairs.extend(overrides.iter().cloned());
        Self::from_pairs(pairs)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_str_with(&text, overrides)
    }

    /// A copy with one more override applied.
    pub fn with(&self, key: &str, value: &str) -> Result<Self, ConfigError> {
        let mut m = self.entries.clone();
        if !m.contains_key(key) {
            return Err(ConfigError::UnknownKey(key.to_string()));
        }
        m.insert(key.to_string(), value.to_string());
        Self::build(m)
    }

    fn build(m: BTreeMap<String, String>) -> Result<Self, ConfigError> {
        let seed: u64 = parse(&m, "seed")?;
        let work_dir = PathBuf::from(&m["work.dir"]);
        constraint(!m["work.dir"].is_empty(), "work.dir non-empty", || "work directory is empty".into())?;
        let data_dir = match m["data.dir"].as_str() {
            "" => work_dir.join("data"),
            d => PathBuf::from(d),
        };
        let p: usize = parse(&m, "tile.p")?;
        let q: usize = parse(&m, "tile.q")?;
        constraint(q > 0 && p >= q && p % q == 0, "tile.q divides tile.p", || format!("p={p}, q={q}"))?;
        constraint(p % 8 == 0 && q % 8 == 0, "tile sides multiple of 8", || format!("p={p}, q={q}"))?;
        let tile = TileSpec { p, q };

        let side: usize = parse(&m, "synth.side")?;
        let synth = SynthConfig {
            side,
            cell: p,
            genes: parse(&m, "synth.genes")?,
            blob_count: (parse(&m, "synth.blob_min")?, parse(&m, "synth.blob_max")?),
            blob_cells: (parse(&m, "synth.blob_cells_min")?, parse(&m, "synth.blob_cells_max")?),
            density: (parse(&m, "synth.density_min")?, parse(&m, "synth.density_max")?),
            grain: parse(&m, "synth.grain")?,
            noise_scale: parse(&m, "synth.noise")?,
            dataset_seed: crate::seeds::derive_seed(seed, "synth/dataset"),
        };
        constraint(side >= p && side % p == 0, "synth.side multiple of tile.p", || format!("side={side}, p={p}"))?;
        synth.validate().map_err(|e| ConfigError::Constraint { rule: "synth parameters", detail: e.to_string() })?;

        let method: Method = parse(&m, "select.method")?;
        let sigma: f64 = parse(&m, "select.sigma")?;
        let rule = match m["select.rule"].as_str() {
            "adaptive" => ThresholdRule::Adaptive { sigma_multiplier: sigma },
            "fixed" => ThresholdRule::Fixed { bits: parse(&m, "select.threshold")? },
            other => {
                return Err(ConfigError::BadValue {
                    key: "select.rule".into(),
                    value: other.into(),
                    reason: "expected adaptive or fixed".into(),
                })
            }
        };
        constraint(sigma.is_finite(), "select.sigma finite", || sigma.to_string())?;
        let level: u32 = parse(&m, "select.level")?;
        constraint(level <= 9, "select.level in 0..=9", || level.to_string())?;

        let d: usize = parse(&m, "extract.d")?;
        constraint(d > 0, "extract.d positive", || d.to_string())?;
        let extract = ExtractorTrainConfig {
            lr: parse(&m, "extract.lr")?,
            momentum: parse(&m, "extract.momentum")?,
            steps: parse(&m, "extract.steps")?,
            batch: parse(&m, "extract.batch")?,
            adversarial: parse(&m, "extract.adversarial")?,
            disc_lr: parse(&m, "extract.lr")?,
        };
        constraint(extract.batch > 0, "extract.batch positive", || "0".into())?;
        constraint(extract.lr >= 0.0 && extract.lr.is_finite(), "extract.lr non-negative", || extract.lr.to_string())?;
        let max_patches: usize = parse(&m, "extract.max_patches")?;
        constraint(
            max_patches >= crate::features::MIN_TRAIN_PATCHES,
            "extract.max_patches ≥ 64",
            || max_patches.to_string(),
        )?;

        let stack = StackConfig {
            blocks: parse(&m, "stack.blocks")?,
            interval: parse(&m, "stack.interval")?,
            expansion: parse(&m, "stack.expansion")?,
        };
        let vit = VitConfig {
            layers: parse(&m, "vit.layers")?,
            heads: parse(&m, "vit.heads")?,
            mlp_ratio: 4,
            token_cap: parse(&m, "vit.token_cap")?,
            positional: parse(&m, "vit.positional")?,
        };
        PredictorConfig { cube_side: tile.cube_side(), d, genes: synth.genes, stack, vit }
            .validate()
            .map_err(|e| ConfigError::Constraint { rule: "predictor shape", detail: e.to_string() })?;

        let train = PredictorTrainConfig {
            epochs: parse(&m, "train.epochs")?,
            lr: parse(&m, "train.lr")?,
            batch: parse(&m, "train.batch")?,
            clip: parse(&m, "train.clip")?,
            weight_decay: parse(&m, "train.weight_decay")?,
            sample_tokens: parse(&m, "train.sample_tokens")?,
            seed: crate::seeds::derive_seed(seed, "predictor/train"),
        };
        constraint(train.batch > 0, "train.batch positive", || "0".into())?;
        constraint(train.lr >= 0.0 && train.lr.is_finite(), "train.lr non-negative", || train.lr.to_string())?;

        let slides: usize = parse(&m, "synth.slides")?;
        let folds: usize = parse(&m, "eval.folds")?;
        let holdout_fold: usize = parse(&m, "eval.fold")?;
        constraint(folds >= 2, "eval.folds ≥ 2", || folds.to_string())?;
        constraint(holdout_fold < folds, "eval.fold < eval.folds", || format!("{holdout_fold} vs {folds}"))?;
        constraint(slides >= 2 * folds, "synth.slides ≥ 2·eval.folds", || format!("{slides} slides, {folds} folds"))?;
        let probe = ProbeConfig {
            folds,
            epochs: parse(&m, "probe.epochs")?,
            lr: parse(&m, "probe.lr")?,
            seed: crate::seeds::derive_seed(seed, "probe"),
        };
        let predict_slide = match m["predict.slide"].as_str() {
            "" => None,
            s => Some(PathBuf::from(s)),
        };
        Ok(PipelineConfig {
            seed,
            work_dir,
            data_dir,
            slides,
            synth,
            tile,
            method,
            rule,
            level,
            d,
            extract,
            max_patches,
            stack,
            vit,
            train,
            folds,
            holdout_fold,
            eval_seed: parse(&m, "eval.seed")?,
            probe,
            predict_slide,
            entries: m,
        })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn predictor(&self) -> PredictorConfig {
        PredictorConfig {
            cube_side: self.tile.cube_side(),
            d: self.d,
            genes: self.synth.genes,
            stack: self.stack,
            vit: self.vit,
        }
    }

    /// Effective configuration, one sorted `key = value` line per key.
    /// Location keys are left out so relocated runs hash identically.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries.iter().filter(|(k, _)| !LOCATION_KEYS.contains(&k.as_str())) {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = PipelineConfig::from_pairs(Vec::<(String, String)>::new()).unwrap();
        assert_eq!(c.tile, TileSpec { p: 64, q: 16 });
        assert_eq!(c.stack.fusion_count(), 5);
        assert_eq!(c.data_dir, PathBuf::from("work/data"));
        assert_eq!(c.hash(), PipelineConfig::from_str_with("", &[]).unwrap().hash());
    }

    #[test]
    fn parses_comments_and_overrides() {
        let text = "# run\nseed = 7  # root\n\ntile.q=32\n";
        let c = PipelineConfig::from_str_with(text, &[("seed".into(), "9".into())]).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.tile.q, 32);
        assert!(c.canonical().contains("tile.q = 32\n"));
        let moved = c.with("work.dir", "/elsewhere").unwrap();
        assert_eq!(moved.data_dir, PathBuf::from("/elsewhere/data"));
        assert_eq!(moved.hash(), c.hash());
    }

    #[test]
    fn rejects_violations() {
        let bad = |k: &str, v: &str| PipelineConfig::from_pairs([(k, v)]).unwrap_err();
        assert!(matches!(bad("nope", "1"), ConfigError::UnknownKey(_)));
        assert!(matches!(bad("tile.q", "24"), ConfigError::Constraint { .. }));
        assert!(matches!(bad("synth.side", "1000"), ConfigError::Constraint { .. }));
        assert!(matches!(bad("vit.heads", "5"), ConfigError::Constraint { .. }));
        assert!(matches!(bad("stack.interval", "11"), ConfigError::Constraint { .. }));
        assert!(matches!(bad("eval.fold", "5"), ConfigError::Constraint { .. }));
        assert!(matches!(bad("select.method", "fancy"), ConfigError::BadValue { .. }));
        assert!(matches!(bad("select.rule", "median"), ConfigError::BadValue { .. }));
        assert!(matches!(bad("extract.d", "x"), ConfigError::BadValue { .. }));
        assert!(matches!(
            PipelineConfig::from_str_with("seed 4", &[]).unwrap_err(),
            ConfigError::Syntax { line: 1, .. }
        ));
    }
}
