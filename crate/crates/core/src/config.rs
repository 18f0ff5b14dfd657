//! Run configuration: every tunable with its default, plus the `key = value`
//! config-file format (UTF-8, `#` comments, unknown keys rejected).

use crate::error::{Error, Result};
use crate::unet::UNetConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VolumeMode {
    /// Volume built from the noised reference plus the current noisy target.
    Both,
    /// Volume built from the noised reference only.
    ReferenceOnly,
}

impl VolumeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            VolumeMode::Both => "both",
            VolumeMode::ReferenceOnly => "reference-only",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Diffusion steps T for training.
    pub t_steps: usize,
    pub beta_start: f32,
    pub beta_end: f32,
    /// Column-bias decay rate.
    pub sigma: f32,
    /// Probability of masking the condition during training (CFG).
    pub mask_prob: f32,
    /// Guidance scale at inference.
    pub guidance: f32,
    /// Denoising steps at inference.
    pub sample_steps: usize,
    pub lr: f32,
    pub batch: usize,
    pub image_size: usize,
    pub seed: u64,
    // Model shape (desk-scale defaults).
    pub base_channels: usize,
    pub ch_mult: Vec<usize>,
    pub heads: usize,
    pub groups: usize,
    pub emb_dim: usize,
    pub refine_hidden: usize,
    pub volume_mode: VolumeMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            t_steps: 200,
            beta_start: 8.5e-4,
            beta_end: 0.012,
            sigma: 5.0,
            mask_prob: 0.1,
            guidance: 3.0,
            sample_steps: 50,
            lr: 1e-4,
            batch: 16,
            image_size: 32,
            seed: 0,
            base_channels: 16,
            ch_mult: vec![1, 2, 4],
            heads: 4,
            groups: 8,
            emb_dim: 64,
            refine_hidden: 8,
            volume_mode: VolumeMode::Both,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.t_steps == 0 {
            return err("t_steps must be >= 1".into());
        }
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return err(format!(
                "betas must satisfy 0 < beta_start <= beta_end < 1, got ({}, {})",
                self.beta_start, self.beta_end
            ));
        }
        if !(self.sigma > 0.0) {
            return err("sigma must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return err("mask_prob must lie in [0,1]".into());
        }
        if self.guidance < 0.0 {
            return err("guidance must be >= 0".into());
        }
        if self.sample_steps == 0 || self.sample_steps > self.t_steps {
            return err(format!(
                "sample_steps must lie in [1, t_steps={}]",
                self.t_steps
            ));
        }
        if !(self.lr > 0.0) {
            return err("lr must be positive".into());
        }
        if self.batch == 0 {
            return err("batch must be >= 1".into());
        }
        if self.ch_mult.is_empty() || self.ch_mult.iter().any(|&m| m == 0) {
            return err("ch_mult must be a non-empty list of positive factors".into());
        }
        let down = 1usize << (self.ch_mult.len() - 1);
        if self.image_size < 8 || self.image_size % down != 0 {
            return err(format!(
                "image_size {} must be >= 8 and divisible by {down}",
                self.image_size
            ));
        }
        if self.emb_dim < 4 || self.emb_dim % 2 != 0 {
            return err("emb_dim must be an even number >= 4".into());
        }
        if self.refine_hidden == 0 {
            return err("refine_hidden must be >= 1".into());
        }
        for &m in &self.ch_mult {
            let c = self.base_channels * m;
            if self.groups == 0 || c % self.groups != 0 {
                return err(format!("channel width {c} not divisible by {} groups", self.groups));
            }
            if self.heads == 0 || c % self.heads != 0 {
                return err(format!("channel width {c} not divisible by {} heads", self.heads));
            }
        }
        Ok(())
    }

    pub fn unet_config(&self) -> UNetConfig {
        let levels = self.ch_mult.len();
        let attn_levels = if levels >= 2 {
            vec![levels - 2, levels - 1]
        } else {
            vec![0]
        };
        UNetConfig {
            image_size: self.image_size,
            in_channels: 1,
            base_channels: self.base_channels,
            ch_mult: self.ch_mult.clone(),
            attn_levels,
            groups: self.groups,
            heads: self.heads,
            sigma: self.sigma,
            emb_dim: self.emb_dim,
            refine_hidden: self.refine_hidden,
            caca_enabled: true,
            im3d_enabled: true,
        }
    }

    /// Emit the full config with every field materialized. `parse(emit(c))`
    /// reproduces `c` exactly.
    pub fn emit(&self) -> String {
        let mult = self
            .ch_mult
            .iter()
            .map(|m| m.to_string())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "# diffusion\n\
             t_steps = {}\n\
             beta_start = {}\n\
             beta_end = {}\n\
             sigma = {}\n\
             mask_prob = {}\n\
             guidance = {}\n\
             sample_steps = {}\n\
             # training\n\
             lr = {}\n\
             batch = {}\n\
             image_size = {}\n\
             seed = {}\n\
             # model\n\
             base_channels = {}\n\
             ch_mult = {}\n\
             heads = {}\n\
             groups = {}\n\
             emb_dim = {}\n\
             refine_hidden = {}\n\
             volume_mode = {}\n",
            self.t_steps,
            self.beta_start,
            self.beta_end,
            self.sigma,
            self.mask_prob,
            self.guidance,
            self.sample_steps,
            self.lr,
            self.batch,
            self.image_size,
            self.seed,
            self.base_channels,
            mult,
            self.heads,
            self.groups,
            self.emb_dim,
            self.refine_hidden,
            self.volume_mode.as_str(),
        )
    }

    /// Parse `key = value` lines over the defaults. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected 'key = value', got '{raw}'",
                    ln + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| Error::Config(format!("line {}: bad {what} '{value}'", ln + 1));
            match key {
                "t_steps" => cfg.t_steps = value.parse().map_err(|_| bad("integer"))?,
                "beta_start" => cfg.beta_start = value.parse().map_err(|_| bad("float"))?,
                "beta_end" => cfg.beta_end = value.parse().map_err(|_| bad("float"))?,
                "sigma" => cfg.sigma = value.parse().map_err(|_| bad("float"))?,
                "mask_prob" => cfg.mask_prob = value.parse().map_err(|_| bad("float"))?,
                "guidance" => cfg.guidance = value.parse().map_err(|_| bad("float"))?,
                "sample_steps" => cfg.sample_steps = value.parse().map_err(|_| bad("integer"))?,
                "lr" => cfg.lr = value.parse().map_err(|_| bad("float"))?,
                "batch" => cfg.batch = value.parse().map_err(|_| bad("integer"))?,
                "image_size" => cfg.image_size = value.parse().map_err(|_| bad("integer"))?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad("integer"))?,
                "base_channels" => cfg.base_channels = value.parse().map_err(|_| bad("integer"))?,
                "ch_mult" => {
                    cfg.ch_mult = value
                        .split(',')
                        .map(|s| s.trim().parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad("multiplier list"))?;
                }
                "heads" => cfg.heads = value.parse().map_err(|_| bad("integer"))?,
                "groups" => cfg.groups = value.parse().map_err(|_| bad("integer"))?,
                "emb_dim" => cfg.emb_dim = value.parse().map_err(|_| bad("integer"))?,
                "refine_hidden" => cfg.refine_hidden = value.parse().map_err(|_| bad("integer"))?,
                "volume_mode" => {
                    cfg.volume_mode = match value {
                        "both" => VolumeMode::Both,
                        "reference-only" => VolumeMode::ReferenceOnly,
                        _ => return Err(bad("volume mode (both | reference-only)")),
                    }
                }
                other => {
                    return Err(Error::Config(format!("line {}: unknown key '{other}'", ln + 1)))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        RunConfig::parse(&std::fs::read_to_string(path)?)
    }
}
