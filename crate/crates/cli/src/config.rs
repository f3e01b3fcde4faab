//! Run configuration: a human-editable TOML file exposing every pipeline
//! knob with the published defaults pre-filled, plus strict validation so
//! invalid combinations are rejected before any output is produced.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::CliError;
use adanat_core::ppo::PpoConfig;
use adanat_core::sampler::ScheduleConfig;

/// How the per-step generation parameters are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyMode {
    /// Learned network conditioned on step index and backbone features.
    Adaptive,
    /// Learned network conditioned on the step index only.
    LearnableNonAdaptive,
    /// Fixed cosine mask schedule with default temperature and guidance
    /// ramps; nothing is trained.
    StaticCosine,
    /// Fixed schedule with configured ramp parameters.
    StaticCustom,
}

impl PolicyMode {
    pub fn is_learned(self) -> bool {
        matches!(self, PolicyMode::Adaptive | PolicyMode::LearnableNonAdaptive)
    }

    pub fn name(self) -> &'static str {
        match self {
            PolicyMode::Adaptive => "adaptive",
            PolicyMode::LearnableNonAdaptive => "learnable-non-adaptive",
            PolicyMode::StaticCosine => "static-cosine",
            PolicyMode::StaticCustom => "static-custom",
        }
    }
}

/// Which reward drives policy search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardChoice {
    Adversarial,
    FidBatch,
    External,
}

impl RewardChoice {
    pub fn name(self) -> &'static str {
        match self {
            RewardChoice::Adversarial => "adversarial",
            RewardChoice::FidBatch => "fid-batch",
            RewardChoice::External => "external",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSection {
    /// World description file, relative paths resolved against the output
    /// directory.
    pub spec_path: PathBuf,
    /// Built-in world written to `spec_path` when the file does not exist
    /// yet: "desk" or "tiny".
    pub kind: String,
}

impl Default for WorldSection {
    fn default() -> Self {
        Self { spec_path: PathBuf::from("world.toml"), kind: "desk".into() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    pub checkpoint: PathBuf,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub width: usize,
    pub class_dropout: f64,
}

impl Default for BackboneSection {
    fn default() -> Self {
        let d = adanat_core::backbone::PretrainConfig::default();
        Self {
            checkpoint: PathBuf::from("backbone.ckpt"),
            steps: d.steps,
            batch: d.batch,
            lr: d.lr,
            width: d.width,
            class_dropout: d.class_dropout,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub mode: PolicyMode,
    /// Decode steps T.
    pub horizon: usize,
    pub width: usize,
    /// Trained policy checkpoint (written by train, read by sample/eval).
    pub checkpoint: PathBuf,
    /// Static-custom ramp parameters.
    pub remask_temp_scale: f64,
    pub guidance_slope: f64,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            mode: PolicyMode::Adaptive,
            horizon: 4,
            width: 64,
            checkpoint: PathBuf::from("policy_final.ckpt"),
            remask_temp_scale: 1.0,
            guidance_slope: 3.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSection {
    pub kind: RewardChoice,
    pub disc_width: usize,
    /// Reference statistics file for the batch-statistical reward; built
    /// from the world when absent.
    pub reference_stats: Option<PathBuf>,
    /// External scorer command line (program followed by arguments).
    pub external_cmd: Vec<String>,
}

impl Default for RewardSection {
    fn default() -> Self {
        Self {
            kind: RewardChoice::Adversarial,
            disc_width: adanat_core::reward::DISC_WIDTH,
            reference_stats: None,
            external_cmd: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoSection {
    pub loops: usize,
    pub batch_size: usize,
    pub updates_per_loop: usize,
    pub epsilon: f64,
    pub value_coef: f64,
    pub policy_lr: f64,
    pub sigma_early: f64,
    pub sigma_late: f64,
    pub sigma_switch: usize,
    pub normalize_advantages: bool,
    pub real_batch: usize,
    pub disc_updates_per_loop: usize,
    pub checkpoint_every: usize,
}

impl Default for PpoSection {
    fn default() -> Self {
        let d = PpoConfig::default();
        Self {
            loops: d.loops,
            batch_size: d.batch_size,
            updates_per_loop: d.updates_per_loop,
            epsilon: d.epsilon,
            value_coef: d.value_coef,
            policy_lr: d.policy_lr,
            sigma_early: d.sigma_early,
            sigma_late: d.sigma_late,
            sigma_switch: d.sigma_switch,
            normalize_advantages: d.normalize_advantages,
            real_batch: d.real_batch,
            disc_updates_per_loop: d.disc_updates_per_loop,
            checkpoint_every: d.checkpoint_every,
        }
    }
}

impl PpoSection {
    pub fn to_ppo_config(&self, seed: u64, out_dir: Option<PathBuf>) -> PpoConfig {
        PpoConfig {
            loops: self.loops,
            batch_size: self.batch_size,
            updates_per_loop: self.updates_per_loop,
            epsilon: self.epsilon,
            value_coef: self.value_coef,
            policy_lr: self.policy_lr,
            sigma_early: self.sigma_early,
            sigma_late: self.sigma_late,
            sigma_switch: self.sigma_switch,
            normalize_advantages: self.normalize_advantages,
            real_batch: self.real_batch,
            disc_updates_per_loop: self.disc_updates_per_loop,
            checkpoint_every: self.checkpoint_every,
            seed,
            out_dir,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Sample count for end-of-training metric reports.
    pub train_samples: usize,
    /// Sample count for the full evaluation protocol (`eval` default).
    pub final_samples: usize,
    /// Samples generated by the in-training metric hook.
    pub hook_samples: usize,
    /// Metric hook cadence in loops (0 disables).
    pub every: usize,
    /// Real samples behind the reference statistics.
    pub reference_samples: usize,
    /// Seed of the frozen feature embedding.
    pub embed_seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            train_samples: 5000,
            final_samples: 50000,
            hook_samples: 1000,
            every: 100,
            reference_samples: 20000,
            embed_seed: 32,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub seed: u64,
    /// Worker threads for parallel sections; 0 means all available cores.
    pub workers: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out"), seed: 0, workers: 0 }
    }
}

/// Complete run configuration.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldSection,
    pub backbone: BackboneSection,
    pub policy: PolicySection,
    pub reward: RewardSection,
    pub ppo: PpoSection,
    pub eval: EvalSection,
    pub output: OutputSection,
}

/// Command-line and environment overrides applied after parsing.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
}

impl RunConfig {
    /// Parse a config file and apply overrides. The ADANAT_OUT environment
    /// variable takes precedence over the --out flag, which takes
    /// precedence over the file.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml(&text, overrides)
    }

    pub fn from_toml(text: &str, overrides: &Overrides) -> Result<Self, CliError> {
        let mut cfg: RunConfig = toml::from_str(text)
            .map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
        if let Some(seed) = overrides.seed {
            cfg.output.seed = seed;
        }
        if let Some(out) = &overrides.out {
            cfg.output.dir = out.clone();
        }
        if let Ok(out) = std::env::var("ADANAT_OUT") {
            if !out.is_empty() {
                cfg.output.dir = PathBuf::from(out);
            }
        }
        if let Some(w) = overrides.workers {
            cfg.output.workers = w;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reject invalid combinations with a named reason. Runs before any
    /// output directory is created.
    pub fn validate(&self) -> Result<(), CliError> {
        let err = |m: String| Err(CliError::Config(m));
        if self.policy.horizon < 1 {
            return err("policy.horizon must be at least 1".into());
        }
        if self.reward.kind == RewardChoice::FidBatch
            && self.policy.mode == PolicyMode::Adaptive
        {
            return err(
                "the batch-statistical reward has no per-trajectory attribution and \
                 destabilizes feature-conditioned policies; use policy.mode = \
                 \"learnable-non-adaptive\" with reward.kind = \"fid-batch\""
                    .into(),
            );
        }
        if self.reward.kind == RewardChoice::External && self.reward.external_cmd.is_empty() {
            return err("reward.kind = \"external\" requires reward.external_cmd".into());
        }
        if self.ppo.epsilon <= 0.0 || !self.ppo.epsilon.is_finite() {
            return err(format!("ppo.epsilon must be positive, got {}", self.ppo.epsilon));
        }
        if self.ppo.loops < 1 || self.ppo.batch_size < 1 || self.ppo.updates_per_loop < 1 {
            return err("ppo.loops, ppo.batch_size, ppo.updates_per_loop must be ≥ 1".into());
        }
        if self.ppo.sigma_early <= 0.0 || self.ppo.sigma_late <= 0.0 {
            return err("ppo exploration scales must be positive".into());
        }
        if self.eval.train_samples < 2 || self.eval.final_samples < 2 {
            return err("eval sample counts must be at least 2".into());
        }
        if self.world.kind != "desk" && self.world.kind != "tiny" {
            return err(format!("world.kind must be \"desk\" or \"tiny\", got {}", self.world.kind));
        }
        if self.policy.width < 1 || self.backbone.width < 1 || self.reward.disc_width < 1 {
            return err("network widths must be at least 1".into());
        }
        Ok(())
    }

    /// Resolve a configured path against the output directory.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.output.dir.join(p)
        }
    }

    pub fn schedule_config(&self) -> ScheduleConfig {
        match self.policy.mode {
            PolicyMode::StaticCustom => ScheduleConfig {
                steps: self.policy.horizon,
                remask_temp_scale: self.policy.remask_temp_scale,
                guidance_slope: self.policy.guidance_slope,
            },
            _ => ScheduleConfig::new(self.policy.horizon),
        }
    }

    /// Human-readable dump of every resolved setting, written into the
    /// output directory so a finished run documents its own recipe.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let mut line = |l: String| {
            s.push_str(&l);
            s.push('\n');
        };
        line("[world]".into());
        line(format!("spec_path = {:?}", self.world.spec_path.display().to_string()));
        line(format!("kind = {:?}", self.world.kind));
        line(String::new());
        line("[backbone]".into());
        line(format!("checkpoint = {:?}", self.backbone.checkpoint.display().to_string()));
        line(format!("steps = {}", self.backbone.steps));
        line(format!("batch = {}", self.backbone.batch));
        line(format!("lr = {}", self.backbone.lr));
        line(format!("width = {}", self.backbone.width));
        line(format!("class_dropout = {}", self.backbone.class_dropout));
        line(String::new());
        line("[policy]".into());
        line(format!("mode = {:?}", self.policy.mode.name()));
        line(format!("horizon = {}", self.policy.horizon));
        line(format!("width = {}", self.policy.width));
        line(format!("checkpoint = {:?}", self.policy.checkpoint.display().to_string()));
        line(format!("remask_temp_scale = {}", self.policy.remask_temp_scale));
        line(format!("guidance_slope = {}", self.policy.guidance_slope));
        line(String::new());
        line("[reward]".into());
        line(format!("kind = {:?}", self.reward.kind.name()));
        line(format!("disc_width = {}", self.reward.disc_width));
        line(format!("disc_lr = {}", adanat_core::reward::DISC_LR));
        line(format!("disc_beta1 = {}", adanat_core::reward::DISC_BETA1));
        line(format!("disc_beta2 = {}", adanat_core::reward::DISC_BETA2));
        if let Some(p) = &self.reward.reference_stats {
            line(format!("reference_stats = {:?}", p.display().to_string()));
        }
        if !self.reward.external_cmd.is_empty() {
            line(format!("external_cmd = {:?}", self.reward.external_cmd));
        }
        line(String::new());
        line("[ppo]".into());
        line(format!("loops = {}", self.ppo.loops));
        line(format!("batch_size = {}", self.ppo.batch_size));
        line(format!("updates_per_loop = {}", self.ppo.updates_per_loop));
        line(format!("epsilon = {}", self.ppo.epsilon));
        line(format!("value_coef = {}", self.ppo.value_coef));
        line(format!("policy_lr = {}", self.ppo.policy_lr));
        line(format!("sigma_early = {}", self.ppo.sigma_early));
        line(format!("sigma_late = {}", self.ppo.sigma_late));
        line(format!("sigma_switch = {}", self.ppo.sigma_switch));
        line(format!("normalize_advantages = {}", self.ppo.normalize_advantages));
        line(format!("real_batch = {}", self.ppo.real_batch));
        line(format!("disc_updates_per_loop = {}", self.ppo.disc_updates_per_loop));
        line(format!("checkpoint_every = {}", self.ppo.checkpoint_every));
        line(String::new());
        line("[eval]".into());
        line(format!("train_samples = {}", self.eval.train_samples));
        line(format!("final_samples = {}", self.eval.final_samples));
        line(format!("hook_samples = {}", self.eval.hook_samples));
        line(format!("every = {}", self.eval.every));
        line(format!("reference_samples = {}", self.eval.reference_samples));
        line(format!("embed_seed = {}", self.eval.embed_seed));
        line(String::new());
        line("[output]".into());
        line(format!("dir = {:?}", self.output.dir.display().to_string()));
        line(format!("seed = {}", self.output.seed));
        line(format!("workers = {}", self.output.workers));
        s
    }
}
