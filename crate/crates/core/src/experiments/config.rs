use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::driver::{Controller, DriverSettings};
use crate::ensemble::PerturbMode;
use crate::error::{EkiError, Result};
use crate::fields::{AmplitudeScaling, ZETA_R_NU2, ZETA_R_NU3};
use crate::schedules::LmConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentId {
    /// Smooth conductivity, Whittle–Matérn parameterisation.
    Exp1,
    /// Three-phase conductivity, level-set parameterisation.
    Exp2,
    /// Scalar linear-Gaussian problem with a known posterior.
    Toy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Dmc,
    Lm,
    Esmda,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    pub kind: ControllerKind,
    /// LM only.
    pub rho: f64,
    /// LM only; 0 selects 1/ρ + 10⁻⁶.
    pub tau: f64,
    pub alpha0: f64,
    pub growth: f64,
    pub max_doublings: usize,
    /// LM only: stop when Σα⁻¹ reaches 1 instead of at the discrepancy.
    pub sum_stop: bool,
    /// ES-MDA only.
    pub steps: usize,
    pub max_iterations: usize,
    pub perturb_mode: PerturbMode,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            kind: ControllerKind::Dmc,
            rho: 0.7,
            tau: 0.0,
            alpha0: 1.0,
            growth: 2.0,
            max_doublings: 60,
            sum_stop: false,
            steps: 10,
            max_iterations: 100,
            perturb_mode: PerturbMode::PerParticle,
        }
    }
}

impl ControllerConfig {
    pub fn lm_config(&self) -> Result<LmConfig> {
        let tau = if self.tau > 0.0 { self.tau } else { 1.0 / self.rho + 1e-6 };
        LmConfig::new(self.rho, tau, self.alpha0, self.growth, self.max_doublings)
    }

    pub fn driver_settings(&self) -> Result<DriverSettings> {
        let controller = match self.kind {
            ControllerKind::Dmc => Controller::Dmc,
            ControllerKind::Lm => Controller::Lm {
                config: self.lm_config()?,
                sum_stop: self.sum_stop,
            },
            ControllerKind::Esmda => Controller::EsMda { steps: self.steps },
        };
        let mut s = DriverSettings::new(controller);
        s.perturb_mode = self.perturb_mode;
        s.max_iterations = self.max_iterations;
        Ok(s)
    }

    pub fn label(&self) -> String {
        match self.kind {
            ControllerKind::Dmc => "dmc".into(),
            ControllerKind::Lm => format!("lm_rho{}", self.rho),
            ControllerKind::Esmda => format!("esmda{}", self.steps),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForwardConfig {
    pub data_elements: usize,
    pub inversion_elements: usize,
    pub electrodes: usize,
    pub coverage: f64,
    pub contact_impedance: f64,
    pub current: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Multiplies |V†_m|.
    pub relative: f64,
    /// Multiplies max V† − min V†.
    pub floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    pub nu: f64,
    pub sigma: f64,
    pub zeta_r: f64,
    pub amplitude: AmplitudeScaling,
    pub lambda: [f64; 2],
    pub l1: [f64; 2],
    pub l2: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelSetConfig {
    pub nu: f64,
    pub sigma: f64,
    pub zeta_r: f64,
    pub amplitude: AmplitudeScaling,
    pub zeta1: f64,
    pub zeta2: f64,
    pub kappa_l: [f64; 2],
    pub kappa_b: [f64; 2],
    pub kappa_h: [f64; 2],
    pub l1: [f64; 2],
    pub l2: [f64; 2],
}

/// log κ†(x) = base + Σ amp·exp(−½((x−cx)²/sx² + (y−cy)²/sy²)).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothTruth {
    pub base: f64,
    /// Rows of [cx, cy, sx, sy, amp].
    pub bumps: Vec<[f64; 5]>,
}

/// Axis-aligned ellipse [cx, cy, ax, ay].
pub type Ellipse = [f64; 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseTruth {
    pub kappa_l: f64,
    pub kappa_b: f64,
    pub kappa_h: f64,
    pub low: Vec<Ellipse>,
    pub high: Vec<Ellipse>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthConfig {
    pub exp1: SmoothTruth,
    pub exp2: PhaseTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfig {
    pub m0: f64,
    pub c0: f64,
    pub g: f64,
    pub gamma: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub experiment: ExperimentId,
    pub ensemble_size: usize,
    pub repeats: usize,
    /// Seed of repeat 0; repeat r uses seed + r.
    pub seed: u64,
    /// Seed of the synthetic noise, shared by all repeats.
    pub data_seed: u64,
    pub output_dir: PathBuf,
    /// Grid cells per side on [−1, 1]².
    pub grid: usize,
    pub controller: ControllerConfig,
    pub forward: ForwardConfig,
    pub noise: NoiseConfig,
    pub field: FieldConfig,
    pub level_set: LevelSetConfig,
    pub truth: TruthConfig,
    pub toy: ToyConfig,
}

pub const PRESETS: &[&str] = &["full-exp1", "full-exp2", "desk-exp1", "desk-exp2", "toy"];

impl ExperimentConfig {
    /// Full-size settings for the smooth-conductivity experiment.
    pub fn full_exp1() -> Self {
        ExperimentConfig {
            name: "full-exp1".into(),
            experiment: ExperimentId::Exp1,
            ensemble_size: 200,
            repeats: 30,
            seed: 1,
            data_seed: 20_210_101,
            output_dir: PathBuf::from("runs"),
            grid: 100,
            controller: ControllerConfig::default(),
            forward: ForwardConfig {
                data_elements: 9216,
                inversion_elements: 7744,
                electrodes: 16,
                coverage: 0.5,
                contact_impedance: 0.01,
                current: 0.1,
            },
            noise: NoiseConfig {
                relative: 0.01,
                floor: 0.001,
            },
            field: FieldConfig {
                nu: 3.0,
                sigma: 1.5,
                zeta_r: ZETA_R_NU3,
                amplitude: AmplitudeScaling::MaternVariance,
                lambda: [5e-3, 1.0],
                l1: [0.15, 0.6],
                l2: [0.15, 0.6],
            },
            level_set: LevelSetConfig {
                nu: 2.0,
                sigma: 0.5,
                zeta_r: ZETA_R_NU2,
                amplitude: AmplitudeScaling::MaternVariance,
                zeta1: -0.5,
                zeta2: 0.5,
                kappa_l: [0.015, 0.075],
                kappa_b: [0.1, 0.4],
                kappa_h: [0.65, 1.1],
                l1: [0.15, 0.6],
                l2: [0.15, 0.6],
            },
            truth: TruthConfig {
                exp1: SmoothTruth {
                    base: -1.0,
                    bumps: vec![
                        [-0.45, 0.05, 0.13, 0.38, -1.6],
                        [0.05, -0.05, 0.13, 0.38, -1.6],
                        [0.5, 0.3, 0.22, 0.22, 1.4],
                    ],
                },
                exp2: PhaseTruth {
                    kappa_l: 0.025,
                    kappa_b: 0.125,
                    kappa_h: 1.0,
                    low: vec![[-0.35, 0.3, 0.22, 0.38]],
                    high: vec![[0.35, -0.3, 0.3, 0.25]],
                },
            },
            toy: ToyConfig {
                m0: 0.5,
                c0: 1.0,
                g: 1.0,
                gamma: 0.1,
                y: 2.0,
            },
        }
    }

    pub fn full_exp2() -> Self {
        ExperimentConfig {
            name: "full-exp2".into(),
            experiment: ExperimentId::Exp2,
            ..Self::full_exp1()
        }
    }

    /// Reduced grid and meshes for quick runs.
    fn desk(mut c: Self, name: &str) -> Self {
        c.name = name.into();
        c.grid = 50;
        c.repeats = 10;
        c.forward.data_elements = 2304;
        c.forward.inversion_elements = 1936;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name {
            "full-exp1" => Self::full_exp1(),
            "full-exp2" => Self::full_exp2(),
            "desk-exp1" => Self::desk(Self::full_exp1(), "desk-exp1"),
            "desk-exp2" => Self::desk(Self::full_exp2(), "desk-exp2"),
            "toy" => ExperimentConfig {
                name: "toy".into(),
                experiment: ExperimentId::Toy,
                ensemble_size: 10_000,
                repeats: 5,
                ..Self::full_exp1()
            },
            other => {
                return Err(EkiError::Config(format!(
                    "unknown preset {other:?}; available: {}",
                    PRESETS.join(", ")
                )))
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.ensemble_size < 2 {
            return Err(EkiError::Config("ensemble_size must be at least 2".into()));
        }
        if self.repeats < 1 {
            return Err(EkiError::Config("repeats must be at least 1".into()));
        }
        if self.experiment != ExperimentId::Toy {
            if self.forward.data_elements == self.forward.inversion_elements {
                return Err(EkiError::Config(
                    "data and inversion meshes must differ (inverse crime)".into(),
                ));
            }
            if self.grid < 2 {
                return Err(EkiError::Config("grid must have at least 2 cells per side".into()));
            }
        }
        if !(self.noise.relative >= 0.0 && self.noise.floor >= 0.0) {
            return Err(EkiError::Config("noise factors must be nonnegative".into()));
        }
        if self.controller.kind == ControllerKind::Lm {
            self.controller.lm_config().map_err(|e| EkiError::Config(e.to_string()))?;
        }
        if self.controller.kind == ControllerKind::Esmda && self.controller.steps == 0 {
            return Err(EkiError::Config("ES-MDA needs at least one step".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| EkiError::Config(e.to_string()))
    }

    /// Resolves a configuration: a preset (named in the file as `preset`,
    /// or given explicitly, default `desk-exp1`), then the file's keys, then
    /// dotted `key=value` overrides.
    pub fn resolve(file: Option<&Path>, preset: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut user = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| EkiError::Config(format!("cannot read {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| EkiError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        let from_file = match user.remove("preset") {
            Some(toml::Value::String(s)) => Some(s),
            Some(_) => return Err(EkiError::Config("preset must be a string".into())),
            None => None,
        };
        let name = preset.map(str::to_string).or(from_file).unwrap_or_else(|| "desk-exp1".into());
        let base = Self::preset(&name)?;
        let mut value = toml::Table::try_from(&base).map_err(|e| EkiError::Config(e.to_string()))?;
        merge(&mut value, user, "")?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(value)
            .try_into()
            .map_err(|e: toml::de::Error| EkiError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Recursively overwrites `base` with `top`; keys absent from `base` are errors.
fn merge(base: &mut toml::Table, top: toml::Table, prefix: &str) -> Result<()> {
    for (k, v) in top {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t, &path)?,
            (Some(slot), v) => *slot = v,
            (None, _) => return Err(EkiError::Config(format!("unknown configuration key {path:?}"))),
        }
    }
    Ok(())
}

/// `a.b.c=value`, where value is parsed as a TOML literal and otherwise
/// taken as a string.
pub fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| EkiError::Config(format!("override {item:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for (i, part) in parts.iter().enumerate() {
        if i + 1 == parts.len() {
            match cur.get_mut(*part) {
                Some(slot) => {
                    *slot = coerce(slot, value);
                    return Ok(());
                }
                None => break,
            }
        }
        match cur.get_mut(*part) {
            Some(toml::Value::Table(t)) => cur = t,
            _ => break,
        }
    }
    Err(EkiError::Config(format!("unknown configuration key {key:?}")))
}

/// Integer literals given for float keys are widened.
fn coerce(slot: &toml::Value, v: toml::Value) -> toml::Value {
    match (slot, v) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (_, v) => v,
    }
}
