use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::optim::{AdamConfig, GroupSettings, Schedule};
use crate::sampler::{FrequencyKind, FrequencyParams, FrequencySpec};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    /// n = 10240, width-scaled learning rate.
    Large,
    /// n = 1000, flat learning rate.
    #[default]
    Small,
    /// Every required field given explicitly.
    Custom,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    #[default]
    Full,
    /// Preset steps, batch size and warm-up divided by 4.
    Fast,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrRule {
    #[default]
    Flat,
    /// `base_lr * (8 / m)^0.25`
    ScaledPowQuarter,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// i.i.d. normal entries with std `init_scale / sqrt(m)`, zero bias.
    #[default]
    Gaussian,
}

/// A fully resolved, validated experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub recipe: Recipe,
    pub profile: Profile,
    pub spec: FrequencyParams,
    pub m: usize,
    pub batch_size: usize,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub base_lr: f64,
    pub lr_rule: LrRule,
    /// Bias learning rate is `bias_lr_scale / m`.
    pub bias_lr_scale: f64,
    pub gamma: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub eval_multiplier: usize,
    pub init_scheme: InitScheme,
    pub init_scale: f64,
    pub compute_ambiguity: bool,
}

/// Config file contents: a recipe preset plus optional overrides.
///
/// Preset values are scaled by the profile; fields given explicitly are
/// used as written.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub recipe: Recipe,
    #[serde(default)]
    pub profile: Profile,
    pub spec: Option<FrequencyParams>,
    pub m: Option<usize>,
    pub batch_size: Option<usize>,
    pub total_steps: Option<u64>,
    pub warmup_steps: Option<u64>,
    pub base_lr: Option<f64>,
    pub lr_rule: Option<LrRule>,
    pub bias_lr_scale: Option<f64>,
    pub gamma: Option<f64>,
    pub adam: Option<AdamConfig>,
    pub seed: Option<u64>,
    pub eval_multiplier: Option<usize>,
    pub init_scheme: Option<InitScheme>,
    pub init_scale: Option<f64>,
    pub compute_ambiguity: Option<bool>,
}

struct Preset {
    spec: FrequencyParams,
    batch_size: usize,
    total_steps: u64,
    warmup_steps: u64,
    base_lr: f64,
    lr_rule: LrRule,
}

fn preset(recipe: Recipe) -> Option<Preset> {
    match recipe {
        Recipe::Large => Some(Preset {
            spec: FrequencyParams {
                n: 10240,
                kind: FrequencyKind::Power { alpha: 1.2 },
                density: 1.0,
            },
            batch_size: 2048,
            total_steps: 20_000,
            warmup_steps: 1000,
            base_lr: 0.02,
            lr_rule: LrRule::ScaledPowQuarter,
        }),
        Recipe::Small => Some(Preset {
            spec: FrequencyParams {
                n: 1000,
                kind: FrequencyKind::Power { alpha: 1.0 },
                density: 1.0,
            },
            batch_size: 2048,
            total_steps: 20_000,
            warmup_steps: 2000,
            base_lr: 1e-2,
            lr_rule: LrRule::Flat,
        }),
        Recipe::Custom => None,
    }
}

fn required<T>(v: Option<T>, field: &str) -> Result<T> {
    v.ok_or_else(|| Error::invalid(format!("config is missing required field `{field}`")))
}

impl ConfigFile {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// The frequency profile this file resolves to.
    pub fn resolve_spec(&self) -> Result<FrequencyParams> {
        required(self.spec.or(preset(self.recipe).map(|p| p.spec)), "spec")
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        let base = preset(self.recipe).map(|mut p| {
            if self.profile == Profile::Fast {
                p.batch_size = (p.batch_size / 4).max(1);
                p.total_steps = (p.total_steps / 4).max(1);
                p.warmup_steps /= 4;
            }
            p
        });
        let pick = |name: &str, explicit: Option<f64>, preset: Option<f64>| required(explicit.or(preset), name);
        let cfg = RunConfig {
            recipe: self.recipe,
            profile: self.profile,
            spec: required(self.spec.or(base.as_ref().map(|p| p.spec)), "spec")?,
            m: required(self.m, "m")?,
            batch_size: required(self.batch_size.or(base.as_ref().map(|p| p.batch_size)), "batch_size")?,
            total_steps: required(self.total_steps.or(base.as_ref().map(|p| p.total_steps)), "total_steps")?,
            warmup_steps: self
                .warmup_steps
                .or(base.as_ref().map(|p| p.warmup_steps))
                .unwrap_or(0),
            base_lr: pick("base_lr", self.base_lr, base.as_ref().map(|p| p.base_lr))?,
            lr_rule: self
                .lr_rule
                .or(base.as_ref().map(|p| p.lr_rule))
                .unwrap_or_default(),
            bias_lr_scale: self.bias_lr_scale.unwrap_or(2.0),
            gamma: self.gamma.unwrap_or(0.0),
            adam: self.adam.unwrap_or_default(),
            seed: self.seed.unwrap_or(0),
            eval_multiplier: self.eval_multiplier.unwrap_or(100),
            init_scheme: self.init_scheme.unwrap_or_default(),
            init_scale: self.init_scale.unwrap_or(1.0),
            compute_ambiguity: self.compute_ambiguity.unwrap_or(true),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("spec.n", self.spec.n as u64),
            ("m", self.m as u64),
            ("batch_size", self.batch_size as u64),
            ("total_steps", self.total_steps),
            ("eval_multiplier", self.eval_multiplier as u64),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be at least 1")));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::invalid("warmup_steps exceeds total_steps"));
        }
        for (name, v) in [
            ("base_lr", self.base_lr),
            ("bias_lr_scale", self.bias_lr_scale),
            ("init_scale", self.init_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and non-negative")));
            }
        }
        if !self.gamma.is_finite() {
            return Err(Error::invalid("gamma must be finite"));
        }
        self.spec.build()?;
        Ok(())
    }

    pub fn frequencies(&self) -> Result<FrequencySpec> {
        self.spec.build()
    }

    pub fn w_group(&self) -> GroupSettings {
        let peak_lr = match self.lr_rule {
            LrRule::Flat => self.base_lr,
            LrRule::ScaledPowQuarter => self.base_lr * (8.0 / self.m as f64).powf(0.25),
        };
        GroupSettings {
            peak_lr,
            weight_decay: self.gamma,
        }
    }

    pub fn b_group(&self) -> GroupSettings {
        GroupSettings {
            peak_lr: self.bias_lr_scale / self.m as f64,
            weight_decay: 0.0,
        }
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::new(self.total_steps, self.warmup_steps, 1.0)
    }

    /// Stable identifier: hex prefix of the SHA-256 of the canonical JSON.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        hex::encode(&digest[..8])
    }
}
