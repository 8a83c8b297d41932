//! Plain-text run configuration.
//!
//! One `key = value` pair per line; blank lines and lines starting with `#`
//! are ignored. Keys live under `model.`, `train.`, `degrade.`, `eval.` and
//! `paths.`; anything else is rejected, as are duplicates. Missing keys take
//! their defaults. [`RunConfig::to_text`] writes every key, so a serialized
//! config documents every default.
//!
//! A few keys record fixed modelling choices and accept a single value
//! (`model.init`, `model.padding`, `model.inference_pad`, `model.loss`,
//! `degrade.jpeg_table`, `eval.color`, `eval.ssim_border`).
//!
//! The degradation section carries only the fields of its kind: `sigma` for
//! `awgn`, `sigma_s`/`sigma_c` for `hetero`, `quality` for `jpeg`.

use std::collections::HashMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::degradation::{Degradation, DegradationSpec};
use crate::error::{config_err, Result};
use crate::network::{ModelConfig, Variant};
use crate::training::TrainConfig;

const FIXED: &[(&str, &str)] = &[
    ("model.init", "he_normal"),
    ("model.padding", "zeros"),
    ("model.inference_pad", "reflect"),
    ("model.loss", "mse"),
    ("degrade.jpeg_table", "annex_k_luma"),
    ("eval.color", "joint_psnr_luma_ssim"),
    ("eval.ssim_border", "valid"),
];

/// Input and output locations; empty means unset.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Paths {
    pub train: String,
    pub test: String,
    pub output: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub degrade: DegradationSpec,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::basic(),
            train: TrainConfig::default(),
            degrade: DegradationSpec { kind: Degradation::Awgn { sigma: 25.0 }, seed: 0, clip: false },
            paths: Paths::default(),
        }
    }
}

struct Entries {
    map: HashMap<String, (usize, String)>,
}

impl Entries {
    fn parse(text: &str) -> Result<Self> {
        let mut map = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err!("line {}: expected key = value, got '{line}'", i + 1))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if let Some((first, _)) = map.insert(k.clone(), (i + 1, v)) {
                return Err(config_err!("line {}: duplicate key '{k}' (first set on line {first})", i + 1));
            }
        }
        Ok(Self { map })
    }

    fn raw(&mut self, key: &str) -> Option<(usize, String)> {
        self.map.remove(key)
    }

    fn get<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some((line, v)) => v.parse().map_err(|e| config_err!("line {line}: bad value '{v}' for {key}: {e}")),
        }
    }

    fn string(&mut self, key: &str, default: &str) -> String {
        self.raw(key).map_or_else(|| default.to_string(), |(_, v)| v)
    }

    fn fixed(&mut self) -> Result<()> {
        for (key, want) in FIXED {
            if let Some((line, v)) = self.raw(key) {
                if v != *want {
                    return Err(config_err!("line {line}: {key} only supports '{want}', got '{v}'"));
                }
            }
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        let mut left: Vec<(usize, String)> = self.map.into_iter().map(|(k, (line, _))| (line, k)).collect();
        left.sort();
        match left.first() {
            None => Ok(()),
            Some((line, k)) => Err(config_err!("line {line}: unknown key '{k}'")),
        }
    }
}

fn read_model(e: &mut Entries) -> Result<ModelConfig> {
    let d = ModelConfig::basic();
    let variant = Variant::parse(&e.string("model.variant", d.variant.as_str()))?;
    let cfg = ModelConfig {
        variant,
        num_cab: e.get("model.num_cab", d.num_cab)?,
        channels: e.get("model.channels", d.channels)?,
        in_channels: e.get("model.in_channels", d.in_channels)?,
        fem_depth: e.get("model.fem_depth", variant.default_depth())?,
        patch_size: e.get("model.patch_size", d.patch_size)?,
        patch_stride: e.get("model.patch_stride", d.patch_stride)?,
        ca_reduction: e.get("model.ca_reduction", d.ca_reduction)?,
        attn_scaled: e.get("model.attn_scaled", d.attn_scaled)?,
        share_local_ca: e.get("model.share_local_ca", d.share_local_ca)?,
        bn_eps: e.get("model.bn_eps", d.bn_eps)?,
        bn_momentum: e.get("model.bn_momentum", d.bn_momentum)?,
        tile: e.get("model.tile", d.tile)?,
        tile_overlap: e.get("model.tile_overlap", d.tile_overlap)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn read_train(e: &mut Entries) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    Ok(TrainConfig {
        base_lr: e.get("train.base_lr", d.base_lr)?,
        halving_period_epochs: e.get("train.halving_period_epochs", d.halving_period_epochs)?,
        steps_per_epoch: e.get("train.steps_per_epoch", d.steps_per_epoch)?,
        batch_size: e.get("train.batch_size", d.batch_size)?,
        crop: e.get("train.crop", d.crop)?,
        beta1: e.get("train.beta1", d.beta1)?,
        beta2: e.get("train.beta2", d.beta2)?,
        adam_eps: e.get("train.adam_eps", d.adam_eps)?,
        total_epochs: e.get("train.total_epochs", d.total_epochs)?,
        seed: e.get("train.seed", d.seed)?,
        augment: e.get("train.augment", d.augment)?,
        grad_clip: e.get("train.grad_clip", d.grad_clip)?,
        checkpoint_every: e.get("train.checkpoint_every", d.checkpoint_every)?,
        blind: e.get("train.blind", d.blind)?,
        blind_sigma_min: e.get("train.blind_sigma_min", d.blind_sigma_min)?,
        blind_sigma_max: e.get("train.blind_sigma_max", d.blind_sigma_max)?,
        hetero_sigma_s_max: e.get("train.hetero_sigma_s_max", d.hetero_sigma_s_max)?,
        hetero_sigma_c_max: e.get("train.hetero_sigma_c_max", d.hetero_sigma_c_max)?,
    })
}

const KIND_KEYS: &[(&str, &[&str])] = &[
    ("awgn", &["degrade.sigma"]),
    ("hetero", &["degrade.sigma_s", "degrade.sigma_c"]),
    ("jpeg", &["degrade.quality"]),
];

fn read_degrade(e: &mut Entries) -> Result<DegradationSpec> {
    let kind_name = e.string("degrade.kind", "awgn");
    let kind = match kind_name.as_str() {
        "awgn" => Degradation::Awgn { sigma: e.get("degrade.sigma", 25.0)? },
        "hetero" => Degradation::Hetero { sigma_s: e.get("degrade.sigma_s", 0.08)?, sigma_c: e.get("degrade.sigma_c", 0.03)? },
        "jpeg" => Degradation::Jpeg { quality: e.get("degrade.quality", 10)? },
        other => return Err(config_err!("unknown degrade.kind '{other}' (expected awgn|hetero|jpeg)")),
    };
    for (name, keys) in KIND_KEYS {
        if *name == kind_name {
            continue;
        }
        for k in *keys {
            if let Some((line, _)) = e.raw(k) {
                return Err(config_err!("line {line}: {k} does not apply to degrade.kind = {kind_name}"));
            }
        }
    }
    let spec = DegradationSpec { kind, seed: e.get("degrade.seed", 0)?, clip: e.get("degrade.clip", false)? };
    spec.validate()?;
    Ok(spec)
}

fn write_fixed(out: &mut String, section: &str) {
    for (k, v) in FIXED.iter().filter(|(k, _)| k.starts_with(section)) {
        out.push_str(&format!("{k} = {v}\n"));
    }
}

fn write_model(out: &mut String, m: &ModelConfig) {
    let lines: [(&str, String); 14] = [
        ("variant", m.variant.as_str().to_string()),
        ("num_cab", m.num_cab.to_string()),
        ("channels", m.channels.to_string()),
        ("in_channels", m.in_channels.to_string()),
        ("fem_depth", m.fem_depth.to_string()),
        ("patch_size", m.patch_size.to_string()),
        ("patch_stride", m.patch_stride.to_string()),
        ("ca_reduction", m.ca_reduction.to_string()),
        ("attn_scaled", m.attn_scaled.to_string()),
        ("share_local_ca", m.share_local_ca.to_string()),
        ("bn_eps", m.bn_eps.to_string()),
        ("bn_momentum", m.bn_momentum.to_string()),
        ("tile", m.tile.to_string()),
        ("tile_overlap", m.tile_overlap.to_string()),
    ];
    for (k, v) in lines {
        out.push_str(&format!("model.{k} = {v}\n"));
    }
    write_fixed(out, "model.");
}

/// The `model.*` section alone, as stored in checkpoints.
pub fn model_to_text(m: &ModelConfig) -> String {
    let mut s = String::new();
    write_model(&mut s, m);
    s
}

/// Parse text that may contain only `model.*` keys.
pub fn model_from_text(text: &str) -> Result<ModelConfig> {
    let mut e = Entries::parse(text)?;
    let m = read_model(&mut e)?;
    e.fixed()?;
    e.finish()?;
    Ok(m)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut e = Entries::parse(text)?;
        let model = read_model(&mut e)?;
        let train = read_train(&mut e)?;
        let degrade = read_degrade(&mut e)?;
        let paths = Paths {
            train: e.string("paths.train", ""),
            test: e.string("paths.test", ""),
            output: e.string("paths.output", ""),
        };
        e.fixed()?;
        e.finish()?;
        train.validate(&model)?;
        Ok(Self { model, train, degrade, paths })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        write_model(&mut s, &self.model);
        let t = &self.train;
        let lines: [(&str, String); 18] = [
            ("base_lr", t.base_lr.to_string()),
            ("halving_period_epochs", t.halving_period_epochs.to_string()),
            ("steps_per_epoch", t.steps_per_epoch.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("crop", t.crop.to_string()),
            ("beta1", t.beta1.to_string()),
            ("beta2", t.beta2.to_string()),
            ("adam_eps", t.adam_eps.to_string()),
            ("total_epochs", t.total_epochs.to_string()),
            ("seed", t.seed.to_string()),
            ("augment", t.augment.to_string()),
            ("grad_clip", t.grad_clip.to_string()),
            ("checkpoint_every", t.checkpoint_every.to_string()),
            ("blind", t.blind.to_string()),
            ("blind_sigma_min", t.blind_sigma_min.to_string()),
            ("blind_sigma_max", t.blind_sigma_max.to_string()),
            ("hetero_sigma_s_max", t.hetero_sigma_s_max.to_string()),
            ("hetero_sigma_c_max", t.hetero_sigma_c_max.to_string()),
        ];
        for (k, v) in lines {
            s.push_str(&format!("train.{k} = {v}\n"));
        }
        match self.degrade.kind {
            Degradation::Awgn { sigma } => s.push_str(&format!("degrade.kind = awgn\ndegrade.sigma = {sigma}\n")),
            Degradation::Hetero { sigma_s, sigma_c } => s.push_str(&format!(
                "degrade.kind = hetero\ndegrade.sigma_s = {sigma_s}\ndegrade.sigma_c = {sigma_c}\n"
            )),
            Degradation::Jpeg { quality } => s.push_str(&format!("degrade.kind = jpeg\ndegrade.quality = {quality}\n")),
        }
        s.push_str(&format!("degrade.seed = {}\ndegrade.clip = {}\n", self.degrade.seed, self.degrade.clip));
        write_fixed(&mut s, "degrade.");
        write_fixed(&mut s, "eval.");
        s.push_str(&format!(
            "paths.train = {}\npaths.test = {}\npaths.output = {}\n",
            self.paths.train, self.paths.test, self.paths.output
        ));
        s
    }
}
