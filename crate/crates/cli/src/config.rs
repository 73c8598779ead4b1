use std::path::{Path, PathBuf};

use klprior::actorcritic::TrainConfig;
use klprior::diagnostics::{GridSpec, DEFAULT_CONSTANTS};
use klprior::envs::{EnvName, EnvSpec};
use klprior::gp::{GpFitConfig, KernelKind};
use klprior::policies::{DropoutConfig, EnsembleConfig, MleConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// One JSON document describing an experiment. Every section is optional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub name: String,
    pub env: EnvName,
    pub outdir: PathBuf,
    pub seeds: Vec<u64>,
    /// Demonstrations to read; otherwise `<run dir>/demos.csv`.
    pub demo_path: Option<PathBuf>,
    /// Reference policy to read; otherwise `<run dir>/reference.json`.
    pub reference_path: Option<PathBuf>,
    pub demos: DemoSection,
    pub reference: ReferenceSection,
    pub gp: GpFitConfig,
    pub clone: MleConfig,
    pub ensemble: EnsembleConfig,
    pub dropout: DropoutConfig,
    pub train: TrainConfig,
    pub ablation: AblationSection,
    /// Defaults to the two position axes over the workspace.
    pub grid: Option<GridSpec>,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: "run".into(),
            env: EnvName::Pointmass2dSparse,
            outdir: PathBuf::from("runs"),
            seeds: vec![0],
            demo_path: None,
            reference_path: None,
            demos: DemoSection::default(),
            reference: ReferenceSection::default(),
            gp: GpFitConfig::default(),
            clone: MleConfig::default(),
            ensemble: EnsembleConfig::default(),
            dropout: DropoutConfig::default(),
            train: TrainConfig::default(),
            ablation: AblationSection::default(),
            grid: None,
            eval: EvalSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoSection {
    pub trajectories: usize,
    /// Std of Gaussian noise added to the scripted expert's actions.
    pub noise_std: f64,
}

impl Default for DemoSection {
    fn default() -> Self {
        DemoSection {
            trajectories: 1,
            noise_std: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Gp,
    MleGaussian,
    MleEntropy,
    MleTikhonov,
    Ensemble,
    McDropout,
    Laplace,
    ConstantVariance,
}

impl std::str::FromStr for Variant {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        serde_json::from_value(serde_json::Value::String(s.into()))
            .map_err(|_| CliError::config(Some("reference.variant"), format!("unknown reference variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReferenceSection {
    pub variant: Variant,
    pub kernel: KernelKind,
    /// Entropy bonus weight for `mle-entropy`.
    pub beta: f64,
    /// Tikhonov weight for `mle-tikhonov`.
    pub lambda: f64,
    /// Variance for `constant-variance`.
    pub constant: f64,
    /// Where `constant-variance` takes its mean from.
    pub mean: Variant,
}

impl Default for ReferenceSection {
    fn default() -> Self {
        ReferenceSection {
            variant: Variant::Gp,
            kernel: KernelKind::Matern52,
            beta: 0.1,
            lambda: 1e-3,
            constant: 1e-2,
            mean: Variant::Gp,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub constants: Vec<f64>,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            constants: DEFAULT_CONSTANTS.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub episodes: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { episodes: 100 }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let key = (path != ".").then_some(path);
            CliError::Config {
                key,
                message: e.into_inner().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn env_spec(&self) -> EnvSpec {
        EnvSpec::named(self.env)
    }

    pub fn grid_spec(&self) -> GridSpec {
        self.grid.clone().unwrap_or_else(|| {
            let w = self.env_spec().workspace;
            let d = self.env_spec().state_dim();
            if d == 2 {
                // corridor1d: position against velocity.
                GridSpec {
                    axes: [0, 1],
                    min: [-w, -1.0],
                    max: [w, 1.0],
                    resolution: [41, 41],
                    fixed: vec![0.0; d],
                }
            } else {
                GridSpec::square(d, -w, w, 41)
            }
        })
    }

    pub fn run_id(&self, seed: u64) -> String {
        format!("{}-s{seed}", self.name)
    }

    pub fn run_dir(&self, seed: u64) -> PathBuf {
        self.outdir.join(self.run_id(seed))
    }

    /// The config as seen by a single seed.
    pub fn for_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seeds = vec![seed];
        c.train.seed = seed;
        c
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |key: &str, msg: &str| Err(CliError::config(Some(key), msg.to_string()));
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad("name", "must be a non-empty file name");
        }
        if self.seeds.is_empty() {
            return bad("seeds", "must list at least one seed");
        }
        if self.demos.trajectories == 0 {
            return bad("demos.trajectories", "must be at least 1");
        }
        if !(self.demos.noise_std.is_finite() && self.demos.noise_std >= 0.0) {
            return bad("demos.noise_std", "must be non-negative");
        }
        let r = &self.reference;
        if !(r.beta.is_finite() && r.beta >= 0.0) {
            return bad("reference.beta", "must be non-negative");
        }
        if !(r.lambda.is_finite() && r.lambda >= 0.0) {
            return bad("reference.lambda", "must be non-negative");
        }
        if !(r.constant.is_finite() && r.constant > 0.0) {
            return bad("reference.constant", "must be positive");
        }
        if r.mean == Variant::ConstantVariance {
            return bad("reference.mean", "must name a variant other than constant-variance");
        }
        if self.ablation.constants.is_empty() || self.ablation.constants.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return bad("ablation.constants", "must be a non-empty list of positive values");
        }
        if self.eval.episodes == 0 {
            return bad("eval.episodes", "must be at least 1");
        }
        if let Some(p) = &self.demo_path {
            if !p.exists() {
                return bad("demo_path", &format!("{} does not exist", p.display()));
            }
        }
        if let Some(p) = &self.reference_path {
            if !p.exists() {
                return bad("reference_path", &format!("{} does not exist", p.display()));
            }
        }
        self.gp.validate().map_err(CliError::from_section)?;
        self.clone.validate().map_err(CliError::from_section)?;
        self.train.validate().map_err(CliError::from_section)?;
        if let Some(g) = &self.grid {
            g.validate(self.env_spec().state_dim()).map_err(|e| CliError::config(Some("grid"), e.to_string()))?;
        }
        Ok(())
    }
}
