//! Training configuration and its flat `key = value` file format.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use crate::bims::{BimsConfig, DEFAULT_FUSION_EPS};
use crate::error::{Error, Result};
use crate::extractor::ExtractorConfig;
use crate::geometry::AugmentConfig;
use crate::losses::LossConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Full,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "full" => Ok(Preset::Full),
            _ => Err(Error::Config(format!("unknown preset {s:?} (expected desk or full)"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Desk => "desk",
            Preset::Full => "full",
        })
    }
}

/// Every recognised key with a one-line description, in file order.
pub const KEYS: &[(&str, &str)] = &[
    ("preset", "architecture preset: desk or full (required)"),
    ("ratio", "upsampling ratio r, a power of two >= 2 (required)"),
    ("epochs", "number of training epochs (required)"),
    ("patch_size", "input patch size N; ground-truth patches hold r*N points"),
    ("k", "neighbours per point in the feature extractor"),
    ("entry_width", "width of the extractor's per-point entry layer"),
    ("growth", "channels added by each dense edge-convolution unit (even)"),
    ("units", "number of dense edge-convolution units"),
    ("channels", "feature width inside the expansion module"),
    ("head_hidden", "hidden width of each coordinate head"),
    ("fusion_eps", "epsilon in the normalised fusion denominator"),
    ("residual", "use residual blocks (false: plain two-layer MLPs)"),
    ("fusion", "use the middle and right pathways (false: left pathway only)"),
    ("multiscale", "supervise intermediate scales (false: finest scale only)"),
    ("alphas", "comma-separated per-scale loss weights, coarsest first"),
    ("lambda", "repulsion loss weight"),
    ("repulsion_k", "neighbours in the repulsion loss"),
    ("repulsion_h", "repulsion kernel width"),
    ("lr", "initial learning rate"),
    ("decay_factor", "learning-rate decay factor in (0, 1]"),
    ("decay_every", "epochs between learning-rate decays"),
    ("batch_size", "patches per optimisation step"),
    ("seed", "master random seed"),
    ("augment", "randomly rotate, scale and shift training pairs"),
    ("rotate", "include random rotations in augmentation"),
    ("scale_min", "lower bound of the random scale"),
    ("scale_max", "upper bound of the random scale"),
    ("shift", "half-width of the random per-axis shift"),
    ("resample", "draw a fresh input subsample every epoch (false: one fixed subsample per patch)"),
    ("checkpoint_every", "epochs between periodic checkpoints (0: only at the end)"),
];

const REQUIRED: &[&str] = &["preset", "ratio", "epochs"];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub preset: Preset,
    pub ratio: usize,
    pub epochs: usize,
    pub patch_size: usize,
    pub extractor: ExtractorConfig,
    pub channels: usize,
    pub head_hidden: usize,
    pub fusion_eps: f64,
    pub residual: bool,
    pub fusion: bool,
    pub multiscale: bool,
    /// Per-scale weights before the `multiscale` switch is applied.
    pub alphas: Vec<f64>,
    pub lambda: f64,
    pub repulsion_k: usize,
    pub repulsion_h: f64,
    pub lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: bool,
    pub augmentation: AugmentConfig,
    pub resample: bool,
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn preset(preset: Preset, ratio: usize, epochs: usize) -> Self {
        let (patch_size, extractor, channels, head_hidden, batch_size) = match preset {
            Preset::Desk => (64, ExtractorConfig::desk(), 32, 32, 4),
            Preset::Full => (256, ExtractorConfig::full(), 128, 64, 28),
        };
        let loss = LossConfig::for_levels(levels_of(ratio).unwrap_or(1));
        TrainConfig {
            preset,
            ratio,
            epochs,
            patch_size,
            extractor,
            channels,
            head_hidden,
            fusion_eps: DEFAULT_FUSION_EPS,
            residual: true,
            fusion: true,
            multiscale: true,
            alphas: loss.alphas,
            lambda: loss.lambda,
            repulsion_k: loss.repulsion_k,
            repulsion_h: loss.repulsion_h,
            lr: 1e-3,
            decay_factor: 0.7,
            decay_every: 40,
            batch_size,
            seed: 0,
            augment: true,
            augmentation: AugmentConfig::default(),
            resample: true,
            checkpoint_every: 0,
        }
    }

    pub fn desk(ratio: usize, epochs: usize) -> Self {
        Self::preset(Preset::Desk, ratio, epochs)
    }

    pub fn full(ratio: usize, epochs: usize) -> Self {
        Self::preset(Preset::Full, ratio, epochs)
    }

    /// Changes the ratio and resets the scale weights to that depth's defaults.
    pub fn with_ratio(mut self, ratio: usize) -> Self {
        self.ratio = ratio;
        self.alphas = LossConfig::default_alphas(levels_of(ratio).unwrap_or(1));
        self
    }

    pub fn levels(&self) -> usize {
        levels_of(self.ratio).unwrap_or(0)
    }

    pub fn gt_patch_size(&self) -> usize {
        self.ratio * self.patch_size
    }

    pub fn bims(&self) -> BimsConfig {
        BimsConfig {
            levels: self.levels(),
            in_channels: self.extractor.output_channels(),
            channels: self.channels,
            eps: self.fusion_eps,
            residual: self.residual,
            fusion: self.fusion,
        }
    }

    /// Loss weights with the `multiscale` switch applied.
    pub fn loss(&self) -> LossConfig {
        let mut alphas = self.alphas.clone();
        if !self.multiscale {
            let last = alphas.len().saturating_sub(1);
            for a in &mut alphas[..last] {
                *a = 0.0;
            }
        }
        LossConfig {
            alphas,
            lambda: self.lambda,
            repulsion_k: self.repulsion_k,
            repulsion_h: self.repulsion_h,
        }
    }

    /// `lr0 · decay_factor^floor(epoch / decay_every)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        crate::optim::lr_at(epoch, self.lr, self.decay_factor, self.decay_every)
    }

    pub fn validate(&self) -> Result<()> {
        let l = levels_of(self.ratio).ok_or_else(|| {
            Error::Config(format!("ratio must be a power of two >= 2, got {}", self.ratio))
        })?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        self.extractor.validate()?;
        self.bims().validate()?;
        if self.patch_size < self.extractor.k {
            return Err(Error::Config(format!(
                "patch_size {} is smaller than k = {}",
                self.patch_size, self.extractor.k
            )));
        }
        if self.repulsion_k >= self.patch_size {
            return Err(Error::Config(format!(
                "repulsion_k {} must be below patch_size {}",
                self.repulsion_k, self.patch_size
            )));
        }
        if self.head_hidden == 0 {
            return Err(Error::Config("head_hidden must be positive".into()));
        }
        if self.alphas.len() != l {
            return Err(Error::Config(format!(
                "alphas has {} entries but ratio {} needs {l}",
                self.alphas.len(),
                self.ratio
            )));
        }
        self.loss().validate()?;
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "decay_factor must lie in (0, 1], got {}",
                self.decay_factor
            )));
        }
        if self.decay_every == 0 || self.batch_size == 0 {
            return Err(Error::Config("decay_every and batch_size must be positive".into()));
        }
        self.augmentation.validate()
    }

    /// Parses a config file, applying its keys over the named preset.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut entries: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let ln = i + 1;
            let l = line.split('#').next().unwrap_or("").trim();
            if l.is_empty() {
                continue;
            }
            let (k, v) = l.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: ln,
                msg: format!("expected `key = value`, got {l:?}"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.iter().any(|(name, _)| *name == k) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: ln,
                    msg: format!("unknown key `{k}`"),
                });
            }
            if entries.insert(k.to_string(), (ln, v.to_string())).is_some() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: ln,
                    msg: format!("duplicate key `{k}`"),
                });
            }
        }
        for key in REQUIRED {
            if !entries.contains_key(*key) {
                return Err(Error::Config(format!(
                    "{}: missing required key `{key}`",
                    path.display()
                )));
            }
        }
        let get = |key: &str| -> Result<(usize, &str)> {
            let (ln, v) = &entries[key];
            Ok((*ln, v.as_str()))
        };
        fn typed<T: FromStr>(path: &Path, key: &str, (ln, v): (usize, &str)) -> Result<T> {
            v.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: ln,
                msg: format!("invalid value {v:?} for `{key}`"),
            })
        }
        let preset: Preset = {
            let (ln, v) = get("preset")?;
            v.parse().map_err(|e: Error| Error::Parse {
                path: path.to_path_buf(),
                line: ln,
                msg: e.to_string(),
            })?
        };
        let ratio = typed(path, "ratio", get("ratio")?)?;
        let epochs = typed(path, "epochs", get("epochs")?)?;
        let mut c = TrainConfig::preset(preset, ratio, epochs);
        for (key, (ln, v)) in &entries {
            let at = (*ln, v.as_str());
            match key.as_str() {
                "preset" | "ratio" | "epochs" => {}
                "patch_size" => c.patch_size = typed(path, key, at)?,
                "k" => c.extractor.k = typed(path, key, at)?,
                "entry_width" => c.extractor.entry_width = typed(path, key, at)?,
                "growth" => c.extractor.growth = typed(path, key, at)?,
                "units" => c.extractor.units = typed(path, key, at)?,
                "channels" => c.channels = typed(path, key, at)?,
                "head_hidden" => c.head_hidden = typed(path, key, at)?,
                "fusion_eps" => c.fusion_eps = typed(path, key, at)?,
                "residual" => c.residual = typed(path, key, at)?,
                "fusion" => c.fusion = typed(path, key, at)?,
                "multiscale" => c.multiscale = typed(path, key, at)?,
                "alphas" => {
                    c.alphas = v
                        .split(',')
                        .map(|a| typed(path, key, (*ln, a.trim())))
                        .collect::<Result<_>>()?
                }
                "lambda" => c.lambda = typed(path, key, at)?,
                "repulsion_k" => c.repulsion_k = typed(path, key, at)?,
                "repulsion_h" => c.repulsion_h = typed(path, key, at)?,
                "lr" => c.lr = typed(path, key, at)?,
                "decay_factor" => c.decay_factor = typed(path, key, at)?,
                "decay_every" => c.decay_every = typed(path, key, at)?,
                "batch_size" => c.batch_size = typed(path, key, at)?,
                "seed" => c.seed = typed(path, key, at)?,
                "augment" => c.augment = typed(path, key, at)?,
                "rotate" => c.augmentation.rotate = typed(path, key, at)?,
                "scale_min" => c.augmentation.scale_min = typed(path, key, at)?,
                "scale_max" => c.augmentation.scale_max = typed(path, key, at)?,
                "shift" => c.augmentation.shift = typed(path, key, at)?,
                "resample" => c.resample = typed(path, key, at)?,
                "checkpoint_every" => c.checkpoint_every = typed(path, key, at)?,
                other => unreachable!("key {other} passed the allow-list"),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Every key in fixed order; `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let alphas: Vec<String> = self.alphas.iter().map(f64::to_string).collect();
        let a = &self.augmentation;
        let values: Vec<String> = vec![
            self.preset.to_string(),
            self.ratio.to_string(),
            self.epochs.to_string(),
            self.patch_size.to_string(),
            self.extractor.k.to_string(),
            self.extractor.entry_width.to_string(),
            self.extractor.growth.to_string(),
            self.extractor.units.to_string(),
            self.channels.to_string(),
            self.head_hidden.to_string(),
            self.fusion_eps.to_string(),
            self.residual.to_string(),
            self.fusion.to_string(),
            self.multiscale.to_string(),
            alphas.join(","),
            self.lambda.to_string(),
            self.repulsion_k.to_string(),
            self.repulsion_h.to_string(),
            self.lr.to_string(),
            self.decay_factor.to_string(),
            self.decay_every.to_string(),
            self.batch_size.to_string(),
            self.seed.to_string(),
            self.augment.to_string(),
            a.rotate.to_string(),
            a.scale_min.to_string(),
            a.scale_max.to_string(),
            a.shift.to_string(),
            self.resample.to_string(),
            self.checkpoint_every.to_string(),
        ];
        let mut s = String::new();
        for ((key, _), v) in KEYS.iter().zip(values) {
            writeln!(s, "{key} = {v}").unwrap();
        }
        s
    }
}

/// `log2(r)` for powers of two `r >= 2`.
pub fn levels_of(ratio: usize) -> Option<usize> {
    (ratio >= 2 && ratio.is_power_of_two()).then(|| ratio.trailing_zeros() as usize)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("run.cfg")
    }

    #[test]
    fn presets() {
        let d = TrainConfig::desk(4, 10);
        assert_eq!((d.patch_size, d.channels, d.batch_size), (64, 32, 4));
        assert_eq!(d.extractor.output_channels(), 80);
        assert_eq!(d.alphas, vec![0.6, 1.0]);
        assert_eq!(d.gt_patch_size(), 256);
        let f = TrainConfig::full(16, 400);
        assert_eq!((f.patch_size, f.channels, f.batch_size), (256, 128, 28));
        assert_eq!(f.extractor.output_channels(), 648);
        assert_eq!(f.levels(), 4);
        assert_eq!(f.alphas, vec![0.0, 0.6, 0.8, 1.0]);
        d.validate().unwrap();
        f.validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::desk(4, 7);
        c.lr = 3.3e-4;
        c.multiscale = false;
        c.augmentation.shift = 0.05;
        let back = TrainConfig::parse(&c.to_text(), p()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), c.to_text());
    }

    #[test]
    fn missing_key_is_named() {
        let err = TrainConfig::parse("preset = desk\nratio = 4\n", p()).unwrap_err();
        assert!(err.to_string().contains("`epochs`"), "{err}");
    }

    #[test]
    fn unknown_and_bad_values_carry_lines() {
        let err = TrainConfig::parse("preset = desk\nratio = 4\nepochs = 1\nlearning_rate = 1\n", p()).unwrap_err();
        assert!(err.to_string().contains("run.cfg:4") && err.to_string().contains("learning_rate"));
        let err = TrainConfig::parse("preset = desk\nratio = four\nepochs = 1\n", p()).unwrap_err();
        assert!(err.to_string().contains("run.cfg:2"), "{err}");
        assert!(TrainConfig::parse("preset = desk\nratio = 3\nepochs = 1\n", p()).is_err());
        assert!(TrainConfig::parse("preset = huge\nratio = 4\nepochs = 1\n", p()).is_err());
    }

    #[test]
    fn multiscale_switch_zeroes_coarse_weights() {
        let mut c = TrainConfig::desk(16, 1);
        c.multiscale = false;
        assert_eq!(c.loss().alphas, vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn levels() {
        assert_eq!(levels_of(4), Some(2));
        assert_eq!(levels_of(16), Some(4));
        assert_eq!(levels_of(1), None);
        assert_eq!(levels_of(6), None);
    }
}
