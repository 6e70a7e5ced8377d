//! Flat `key = value` configuration text with `#` comments: parsing with
//! line diagnostics, typed access, unknown-key detection, and canonical
//! rendering that round-trips exactly.

use std::cell::Cell;
use std::fmt::Write as _;

use crate::data::{FoldSplit, ShapeTaskConfig};
use crate::hpg::PrototypeCounts;
use crate::losses::LossWeights;
use crate::nets::NetConfig;
use crate::{CowError, Result};

#[derive(Debug)]
struct KvEntry {
    key: String,
    value: String,
    line: usize,
    consumed: Cell<bool>,
}

/// Parsed key/value file. Getters mark keys consumed so [`KvMap::finish`]
/// can reject leftovers as unknown keys.
#[derive(Debug)]
pub struct KvMap {
    entries: Vec<KvEntry>,
}

pub fn parse_kv(text: &str) -> Result<KvMap> {
    let mut entries: Vec<KvEntry> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let stripped = raw.split('#').next().unwrap_or("").trim();
        if stripped.is_empty() {
            continue;
        }
        let Some((key, value)) = stripped.split_once('=') else {
            return Err(CowError::Config(format!("line {line}: expected `key = value`, got `{raw}`")));
        };
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_') {
            return Err(CowError::Config(format!("line {line}: invalid key `{key}`")));
        }
        if value.is_empty() {
            return Err(CowError::Config(format!("line {line}: key `{key}` has no value")));
        }
        if let Some(prev) = entries.iter().find(|e| e.key == key) {
            return Err(CowError::Config(format!(
                "line {line}: duplicate key `{key}`, first set on line {}",
                prev.line
            )));
        }
        entries.push(KvEntry { key: key.to_string(), value: value.to_string(), line, consumed: Cell::new(false) });
    }
    Ok(KvMap { entries })
}

impl KvMap {
    pub fn require(&self, key: &str) -> Result<&str> {
        match self.entries.iter().find(|e| e.key == key) {
            Some(e) => {
                e.consumed.set(true);
                Ok(&e.value)
            }
            None => Err(CowError::Config(format!("missing required key `{key}`"))),
        }
    }

    pub fn require_f64(&self, key: &str) -> Result<f64> {
        let raw = self.require(key)?;
        raw.parse::<f64>()
            .map_err(|_| CowError::Config(format!("key `{key}`: `{raw}` is not a number")))
    }

    pub fn require_usize(&self, key: &str) -> Result<usize> {
        let raw = self.require(key)?;
        raw.parse::<usize>()
            .map_err(|_| CowError::Config(format!("key `{key}`: `{raw}` is not a non-negative integer")))
    }

    pub fn require_u64(&self, key: &str) -> Result<u64> {
        let raw = self.require(key)?;
        raw.parse::<u64>()
            .map_err(|_| CowError::Config(format!("key `{key}`: `{raw}` is not a non-negative integer")))
    }

    pub fn require_usize_list(&self, key: &str) -> Result<Vec<usize>> {
        let raw = self.require(key)?;
        raw.split(',')
            .map(|part| {
                part.trim()
                    .parse::<usize>()
                    .map_err(|_| CowError::Config(format!("key `{key}`: `{part}` is not a non-negative integer")))
            })
            .collect()
    }

    /// Errors if any parsed key was never consumed by a reader.
    pub fn finish(&self) -> Result<()> {
        let unknown: Vec<String> = self
            .entries
            .iter()
            .filter(|e| !e.consumed.get())
            .map(|e| format!("`{}` (line {})", e.key, e.line))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(CowError::Config(format!("unknown keys: {}", unknown.join(", "))))
        }
    }
}

fn join(list: &[usize]) -> String {
    list.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

pub fn net_from_kv(kv: &KvMap) -> Result<NetConfig> {
    let cfg = NetConfig {
        encoder_channels: kv.require_usize_list("encoder_channels")?,
        encoder_stride: kv.require_usize("encoder_stride")?,
        feature_dim: kv.require_usize("feature_dim")?,
        aspp_rates: kv.require_usize_list("aspp_rates")?,
        mlp_hidden: kv.require_usize("mlp_hidden")?,
        decoder_channels: kv.require_usize_list("decoder_channels")?,
        seed: kv.require_u64("net_seed")?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn net_to_text(cfg: &NetConfig, out: &mut String) {
    let _ = writeln!(out, "# networks");
    let _ = writeln!(out, "encoder_channels = {}", join(&cfg.encoder_channels));
    let _ = writeln!(out, "encoder_stride = {}", cfg.encoder_stride);
    let _ = writeln!(out, "feature_dim = {}", cfg.feature_dim);
    let _ = writeln!(out, "aspp_rates = {}", join(&cfg.aspp_rates));
    let _ = writeln!(out, "mlp_hidden = {}", cfg.mlp_hidden);
    let _ = writeln!(out, "decoder_channels = {}", join(&cfg.decoder_channels));
    let _ = writeln!(out, "net_seed = {}", cfg.seed);
}

pub fn counts_from_kv(kv: &KvMap) -> Result<PrototypeCounts> {
    let counts = PrototypeCounts {
        n_hf: kv.require_usize("n_hf")?,
        n_nf: kv.require_usize("n_nf")?,
        n_hb: kv.require_usize("n_hb")?,
        n_nb: kv.require_usize("n_nb")?,
    };
    counts.validate()?;
    Ok(counts)
}

pub fn counts_to_text(counts: &PrototypeCounts, out: &mut String) {
    let _ = writeln!(out, "# prototype budgets");
    let _ = writeln!(out, "n_hf = {}", counts.n_hf);
    let _ = writeln!(out, "n_nf = {}", counts.n_nf);
    let _ = writeln!(out, "n_hb = {}", counts.n_hb);
    let _ = writeln!(out, "n_nb = {}", counts.n_nb);
}

pub fn weights_from_kv(kv: &KvMap) -> Result<LossWeights> {
    let w = LossWeights { lambda0: kv.require_f64("lambda0")?, lambda1: kv.require_f64("lambda1")? };
    w.validate()?;
    Ok(w)
}

pub fn weights_to_text(w: &LossWeights, out: &mut String) {
    let _ = writeln!(out, "# loss weights");
    let _ = writeln!(out, "lambda0 = {}", w.lambda0);
    let _ = writeln!(out, "lambda1 = {}", w.lambda1);
}

pub fn shape_from_kv(kv: &KvMap) -> Result<ShapeTaskConfig> {
    let cfg = ShapeTaskConfig {
        image_size: kv.require_usize("image_size")?,
        size_min: kv.require_f64("size_min")?,
        size_max: kv.require_f64("size_max")?,
        boundary_roughness: kv.require_f64("boundary_roughness")?,
        intensity_contrast: kv.require_f64("intensity_contrast")?,
        noise_std: kv.require_f64("noise_std")?,
        n_classes_train: kv.require_usize("n_classes_train")?,
        n_classes_test: kv.require_usize("n_classes_test")?,
        seed: kv.require_u64("data_seed")?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn shape_to_text(cfg: &ShapeTaskConfig, out: &mut String) {
    let _ = writeln!(out, "# synthetic data");
    let _ = writeln!(out, "image_size = {}", cfg.image_size);
    let _ = writeln!(out, "size_min = {}", cfg.size_min);
    let _ = writeln!(out, "size_max = {}", cfg.size_max);
    let _ = writeln!(out, "boundary_roughness = {}", cfg.boundary_roughness);
    let _ = writeln!(out, "intensity_contrast = {}", cfg.intensity_contrast);
    let _ = writeln!(out, "noise_std = {}", cfg.noise_std);
    let _ = writeln!(out, "n_classes_train = {}", cfg.n_classes_train);
    let _ = writeln!(out, "n_classes_test = {}", cfg.n_classes_test);
    let _ = writeln!(out, "data_seed = {}", cfg.seed);
}

/// Everything one training run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay: f64,
    /// Iterations between multiplicative lr decays.
    pub decay_every: usize,
    pub iterations: usize,
    pub log_every: usize,
    pub ckpt_every: usize,
    pub counts: PrototypeCounts,
    pub weights: LossWeights,
    pub net: NetConfig,
    pub data: ShapeTaskConfig,
    pub fold: FoldSplit,
}

impl TrainConfig {
    pub fn desk_default() -> Self {
        let data = ShapeTaskConfig::desk_default();
        let fold = FoldSplit::for_fold(0, &data).expect("desk defaults are valid");
        Self {
            lr: 0.001,
            lr_decay: 0.9,
            decay_every: 500,
            iterations: 2000,
            log_every: 1,
            ckpt_every: 500,
            counts: PrototypeCounts::desk_default(),
            weights: LossWeights::standard(),
            net: NetConfig::desk_default(),
            data,
            fold,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CowError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(CowError::Config(format!("lr_decay must be in (0, 1], got {}", self.lr_decay)));
        }
        if self.iterations == 0 {
            return Err(CowError::Config("iterations must be at least 1".into()));
        }
        for (what, v) in [
            ("decay_every", self.decay_every),
            ("log_every", self.log_every),
            ("ckpt_every", self.ckpt_every),
        ] {
            if v == 0 {
                return Err(CowError::Config(format!("{what} must be at least 1")));
            }
        }
        self.counts.validate()?;
        self.weights.validate()?;
        self.net.validate()?;
        self.data.validate()?;
        self.fold.validate()?;
        // the feature grid must exist for the configured image size
        self.net.feature_hw(self.data.image_size, self.data.image_size)?;
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = parse_kv(text)?;
        let cfg = Self::from_kv(&kv)?;
        kv.finish()?;
        Ok(cfg)
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let data = shape_from_kv(kv)?;
        let fold = FoldSplit::for_fold(kv.require_usize("fold_id")?, &data)?;
        let cfg = Self {
            lr: kv.require_f64("lr")?,
            lr_decay: kv.require_f64("lr_decay")?,
            decay_every: kv.require_usize("decay_every")?,
            iterations: kv.require_usize("iterations")?,
            log_every: kv.require_usize("log_every")?,
            ckpt_every: kv.require_usize("ckpt_every")?,
            counts: counts_from_kv(kv)?,
            weights: weights_from_kv(kv)?,
            net: net_from_kv(kv)?,
            data,
            fold,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# training");
        let _ = writeln!(out, "lr = {}", self.lr);
        let _ = writeln!(out, "lr_decay = {}", self.lr_decay);
        let _ = writeln!(out, "decay_every = {}", self.decay_every);
        let _ = writeln!(out, "iterations = {}", self.iterations);
        let _ = writeln!(out, "log_every = {}", self.log_every);
        let _ = writeln!(out, "ckpt_every = {}", self.ckpt_every);
        let _ = writeln!(out, "fold_id = {}", self.fold.fold_id);
        counts_to_text(&self.counts, &mut out);
        weights_to_text(&self.weights, &mut out);
        net_to_text(&self.net, &mut out);
        shape_to_text(&self.data, &mut out);
        out
    }
}

/// Settings for materializing episode files and a manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct GenDataConfig {
    pub data: ShapeTaskConfig,
    pub episodes_per_class: usize,
}

impl GenDataConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let kv = parse_kv(text)?;
        let data = shape_from_kv(&kv)?;
        let episodes_per_class = kv.require_usize("episodes_per_class")?;
        kv.finish()?;
        if episodes_per_class == 0 {
            return Err(CowError::Config("episodes_per_class must be at least 1".into()));
        }
        Ok(Self { data, episodes_per_class })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        shape_to_text(&self.data, &mut out);
        let _ = writeln!(out, "episodes_per_class = {}", self.episodes_per_class);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_config_round_trips_through_text() {
        let cfg = TrainConfig::desk_default();
        let text = cfg.to_text();
        let back = TrainConfig::from_text(&text).unwrap();
        assert_eq!(cfg, back);
        // canonical render is stable
        assert_eq!(text, back.to_text());
    }

    #[test]
    fn gen_data_config_round_trips() {
        let cfg = GenDataConfig { data: ShapeTaskConfig::desk_default(), episodes_per_class: 3 };
        let back = GenDataConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let text = "\n# heading\n  lr = 0.5   # trailing note\n\nx_y2 = 3\n";
        let kv = parse_kv(text).unwrap();
        assert_eq!(kv.require_f64("lr").unwrap(), 0.5);
        assert_eq!(kv.require_usize("x_y2").unwrap(), 3);
        kv.finish().unwrap();
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        match parse_kv("a = 1\nnot a kv line\n") {
            Err(CowError::Config(msg)) => assert!(msg.contains("line 2"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
        match parse_kv("a = 1\na = 2\n") {
            Err(CowError::Config(msg)) => {
                assert!(msg.contains("duplicate key `a`") && msg.contains("line 1"), "{msg}");
            }
            other => panic!("expected config error, got {other:?}"),
        }
        match parse_kv("BadKey = 1\n") {
            Err(CowError::Config(msg)) => assert!(msg.contains("invalid key"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
        match parse_kv("a =\n") {
            Err(CowError::Config(msg)) => assert!(msg.contains("no value"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_and_missing_keys_are_reported() {
        let text = TrainConfig::desk_default().to_text() + "mystery = 1\n";
        match TrainConfig::from_text(&text) {
            Err(CowError::Config(msg)) => assert!(msg.contains("`mystery`"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }

        let without_lr: String =
            TrainConfig::desk_default().to_text().lines().filter(|l| !l.starts_with("lr =")).collect::<Vec<_>>().join("\n");
        match TrainConfig::from_text(&without_lr) {
            Err(CowError::Config(msg)) => assert!(msg.contains("`lr`"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn typed_getters_reject_malformed_values() {
        let kv = parse_kv("a = twelve\nb = -3\nc = 1,2,x\n").unwrap();
        assert!(matches!(kv.require_f64("a"), Err(CowError::Config(_))));
        assert!(matches!(kv.require_usize("b"), Err(CowError::Config(_))));
        assert!(matches!(kv.require_usize_list("c"), Err(CowError::Config(_))));
    }

    #[test]
    fn semantic_validation_runs_on_parse() {
        let mut bad = TrainConfig::desk_default();
        bad.lr = 0.0;
        assert!(matches!(TrainConfig::from_text(&bad.to_text()), Err(CowError::Config(_))));

        let mut bad = TrainConfig::desk_default();
        bad.net.encoder_stride = 3;
        assert!(TrainConfig::from_text(&bad.to_text()).is_err());

        // image size that the encoder stride cannot divide
        let mut bad = TrainConfig::desk_default();
        bad.data.image_size = 66;
        assert!(TrainConfig::from_text(&bad.to_text()).is_err());
    }
}
