//! Training and model configuration in `key = value` form.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use crate::autodiff::Precision;
use crate::error::{Error, Result};
use crate::model::{DiscriminatorSpec, EncoderSpec};
use crate::quantizer::{PreActivation, QuantConfig};

/// Architecture and quantizer settings; everything needed to rebuild a model
/// from a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub quant: QuantConfig,
    pub tau: f64,
    pub arch: EncoderSpec,
    /// `n_z`; `None` means "same as d".
    pub noise_channels: Option<usize>,
    pub disc_base_channels: usize,
    pub disc_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let quant = QuantConfig::new(2, 4).expect("static config");
        Self {
            tau: 1.0,
            arch: EncoderSpec {
                image_channels: 3,
                base_channels: 16,
                channel_mult: vec![1, 2],
                n_res_blocks: 1,
                downsample: 4,
                latent_channels: quant.channels(),
            },
            quant,
            noise_channels: None,
            disc_base_channels: 16,
            disc_layers: 3,
        }
    }
}

impl ModelConfig {
    pub fn noise_channels(&self) -> usize {
        self.noise_channels.unwrap_or(self.quant.channels())
    }

    pub fn discriminator_spec(&self) -> DiscriminatorSpec {
        DiscriminatorSpec {
            image_channels: self.arch.image_channels,
            base_channels: self.disc_base_channels,
            n_layers: self.disc_layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.arch.latent_channels != self.quant.channels() {
            return Err(Error::Config(format!(
                "latent channels {} != g*d' = {}",
                self.arch.latent_channels,
                self.quant.channels()
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        self.arch.validate()
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let mult: Vec<String> = self.arch.channel_mult.iter().map(|m| m.to_string()).collect();
        let mut out = vec![
            ("g", self.quant.groups().to_string()),
            ("d_prime", self.quant.group_channels().to_string()),
            ("pre_activation", self.quant.pre_activation.to_string()),
            ("tau", self.tau.to_string()),
            ("image_channels", self.arch.image_channels.to_string()),
            ("base_channels", self.arch.base_channels.to_string()),
            ("channel_mult", mult.join(",")),
            ("n_res_blocks", self.arch.n_res_blocks.to_string()),
            ("downsample", self.arch.downsample.to_string()),
            ("disc_base_channels", self.disc_base_channels.to_string()),
            ("disc_layers", self.disc_layers.to_string()),
        ];
        // left out when it follows d
        if let Some(nz) = self.noise_channels {
            out.push(("noise_channels", nz.to_string()));
        }
        out
    }

    pub fn to_meta(&self) -> BTreeMap<String, String> {
        self.entries()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect()
    }

    pub fn from_meta(meta: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = Self::default();
        let mut g = cfg.quant.groups();
        let mut dp = cfg.quant.group_channels();
        let mut pre = PreActivation::None;
        for (k, v) in meta {
            match k.as_str() {
                "g" => g = parse(k, v)?,
                "d_prime" => dp = parse(k, v)?,
                "pre_activation" => pre = v.parse()?,
                _ => {
                    cfg.set_arch(k, v)?;
                }
            }
        }
        cfg.set_quant(g, dp, pre)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn set_quant(&mut self, g: usize, dp: usize, pre: PreActivation) -> Result<()> {
        let mut q = QuantConfig::new(g, dp).map_err(|e| Error::Config(e.to_string()))?;
        q.pre_activation = pre;
        self.quant = q;
        self.arch.latent_channels = q.channels();
        Ok(())
    }

    /// Architecture keys; returns whether `key` was recognized.
    fn set_arch(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "tau" => self.tau = parse(key, v)?,
            "image_channels" => self.arch.image_channels = parse(key, v)?,
            "base_channels" => self.arch.base_channels = parse(key, v)?,
            "channel_mult" => {
                self.arch.channel_mult = v
                    .split(',')
                    .map(|s| parse::<usize>(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "n_res_blocks" => self.arch.n_res_blocks = parse(key, v)?,
            "downsample" => self.arch.downsample = parse(key, v)?,
            "noise_channels" => self.noise_channels = Some(parse(key, v)?),
            "disc_base_channels" => self.disc_base_channels = parse(key, v)?,
            "disc_layers" => self.disc_layers = parse(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {v:?}: {e}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true/false, got {v:?}"))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: u8,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub recon_weight: f64,
    pub entropy_weight: f64,
    pub zeta: f64,
    /// `gamma`, weight of the generator GAN term in stage 2.
    pub gan_weight: f64,
    /// `alpha`, weight of the optional commitment term.
    pub commit_weight: f64,
    pub non_saturating: bool,
    pub seed: u64,
    pub ema: bool,
    pub ema_decay: f64,
    pub precision: Precision,
    pub model: ModelConfig,
    pub image_size: usize,
    pub dataset_size: usize,
    pub init_checkpoint: Option<PathBuf>,
    pub out: PathBuf,
    pub loss_csv: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            batch_size: 8,
            steps: 1000,
            recon_weight: 1.0,
            entropy_weight: 0.1,
            zeta: 1.0,
            gan_weight: 0.1,
            commit_weight: 0.0,
            non_saturating: false,
            seed: 0,
            ema: false,
            ema_decay: 0.999,
            precision: Precision::F32,
            model: ModelConfig::default(),
            image_size: 16,
            dataset_size: 8,
            init_checkpoint: None,
            out: PathBuf::from("model.ckpt"),
            loss_csv: PathBuf::from("loss.csv"),
        }
    }
}

impl TrainConfig {
    /// Parse `key = value` lines on top of the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply one `key = value`; unknown keys are rejected.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "stage" => self.stage = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "recon_weight" => self.recon_weight = parse(key, v)?,
            "entropy_weight" => self.entropy_weight = parse(key, v)?,
            "zeta" => self.zeta = parse(key, v)?,
            "gan_weight" => self.gan_weight = parse(key, v)?,
            "commit_weight" => self.commit_weight = parse(key, v)?,
            "non_saturating" => self.non_saturating = parse_bool(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "ema" => self.ema = parse_bool(key, v)?,
            "ema_decay" => self.ema_decay = parse(key, v)?,
            "precision" => {
                self.precision = match v {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(Error::Config(format!("precision must be f32|f64, got {v:?}"))),
                }
            }
            "image_size" => self.image_size = parse(key, v)?,
            "dataset_size" => self.dataset_size = parse(key, v)?,
            "init_checkpoint" => self.init_checkpoint = Some(PathBuf::from(v)),
            "out" => self.out = PathBuf::from(v),
            "loss_csv" => self.loss_csv = PathBuf::from(v),
            "g" => {
                let q = self.model.quant;
                self.model.set_quant(parse(key, v)?, q.group_channels(), q.pre_activation)?
            }
            "d_prime" => {
                let q = self.model.quant;
                self.model.set_quant(q.groups(), parse(key, v)?, q.pre_activation)?
            }
            "pre_activation" => {
                let q = self.model.quant;
                self.model.set_quant(q.groups(), q.group_channels(), v.parse()?)?
            }
            other => {
                if !self.model.set_arch(other, v)? {
                    return Err(Error::Config(format!("unknown key {other:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage != 1 && self.stage != 2 {
            return Err(Error::Config(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.dataset_size == 0 {
            return Err(Error::Config("batch_size and dataset_size must be positive".into()));
        }
        if self.zeta < 0.0 || self.entropy_weight < 0.0 || self.commit_weight < 0.0 || self.gan_weight < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must lie in [0, 1]".into()));
        }
        if self.stage == 2 && self.init_checkpoint.is_none() {
            return Err(Error::Config("stage 2 requires init_checkpoint".into()));
        }
        if self.image_size % self.model.arch.downsample != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by downsample {}",
                self.image_size, self.model.arch.downsample
            )));
        }
        self.model.validate()
    }

    /// Resolved configuration as `key = value` lines, in a fixed order.
    pub fn to_lines(&self) -> Vec<String> {
        let precision = match self.precision {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        };
        let mut out = vec![
            format!("stage = {}", self.stage),
            format!("lr = {}", self.lr),
            format!("beta1 = {}", self.beta1),
            format!("beta2 = {}", self.beta2),
            format!("batch_size = {}", self.batch_size),
            format!("steps = {}", self.steps),
            format!("recon_weight = {}", self.recon_weight),
            format!("entropy_weight = {}", self.entropy_weight),
            format!("zeta = {}", self.zeta),
            format!("gan_weight = {}", self.gan_weight),
            format!("commit_weight = {}", self.commit_weight),
            format!("non_saturating = {}", self.non_saturating),
            format!("seed = {}", self.seed),
            format!("ema = {}", self.ema),
            format!("ema_decay = {}", self.ema_decay),
            format!("precision = {precision}"),
            format!("image_size = {}", self.image_size),
            format!("dataset_size = {}", self.dataset_size),
        ];
        for (k, v) in self.model.entries() {
            out.push(format!("{k} = {v}"));
        }
        if let Some(p) = &self.init_checkpoint {
            out.push(format!("init_checkpoint = {}", p.display()));
        }
        out.push(format!("out = {}", self.out.display()));
        out.push(format!("loss_csv = {}", self.loss_csv.display()));
        out
    }
}
