//! The adaptive per-step policy.
//!
//! A small conditioned network maps the generation state (step index plus
//! predictor features of the current grid) to a 4-component action mean and
//! a scalar value estimate. Exploration adds isotropic Gaussian noise in
//! pre-squash space; a logistic squash then maps each component into its
//! valid range, so every sampled action is a legal set of step parameters.
//! Taking the mean instead of sampling gives the deterministic test-time
//! policy.

use std::collections::BTreeMap;
use std::path::Path;

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::backbone::{BackboneError, MaskedPredictor};
use crate::math::logistic;
use crate::rng::stream_rng;
use crate::sampler::{PolicyProvider, PolicyStepParams, ProviderAction, SamplerError};
use crate::smallnet::{checkpoint, LayerSpec, NetError, SmallNet};
use crate::token_world::TokenSequence;

/// Squash ranges: temperatures live in (TAU_MIN, TAU_MAX), guidance in
/// (0, W_MAX), the re-mask ratio in (0, 1).
pub const TAU_MIN: f64 = 0.05;
pub const TAU_MAX: f64 = 4.0;
pub const W_MAX: f64 = 8.0;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("checkpoint is missing entry '{0}'")]
    MissingEntry(String),
    #[error("checkpoint entry '{key}' has malformed value '{value}'")]
    BadEntry { key: String, value: String },
}

/// What the policy sees at step t: the step index, the predictor's feature
/// vector for the current grid, and the grid itself for diagnostics.
#[derive(Debug, Clone)]
pub struct GenerationState {
    pub t: usize,
    pub features: Vec<f64>,
    pub tokens: TokenSequence,
}

/// Build the policy state for grid `v` at step `t`.
pub fn encode_state(
    pred: &MaskedPredictor,
    v: &TokenSequence,
    class: Option<u32>,
    t: usize,
) -> Result<GenerationState, BackboneError> {
    Ok(GenerationState { t, features: pred.features(v, class)?, tokens: v.clone() })
}

/// Map an unbounded 4-vector to valid step parameters:
/// m = logistic(r0), τ = TAU_MIN + (TAU_MAX−TAU_MIN)·logistic(r),
/// w = W_MAX·logistic(r3).
pub fn squash(raw: &[f64; 4]) -> PolicyStepParams {
    let temp = |r: f64| TAU_MIN + (TAU_MAX - TAU_MIN) * logistic(r);
    PolicyStepParams {
        mask_ratio: logistic(raw[0]),
        tau1: temp(raw[1]),
        tau2: temp(raw[2]),
        guidance: W_MAX * logistic(raw[3]),
    }
}

/// Gaussian log-density of `raw` under N(mean, σ²I), 4 independent
/// components.
pub fn gaussian_logprob(mean: &[f64; 4], raw: &[f64; 4], sigma: f64) -> f64 {
    let var = sigma * sigma;
    let norm = -0.5 * (2.0 * std::f64::consts::PI * var).ln();
    mean.iter()
        .zip(raw)
        .map(|(&m, &r)| norm - (r - m) * (r - m) / (2.0 * var))
        .sum()
}

/// Policy network: a conditioned trunk ending in a 5-wide head (4 action
/// components pre-squash, then the value estimate). The step index drives
/// the conditioned-norm layers; the head starts zeroed so the initial policy
/// sits at the squash midpoint with value 0.
#[derive(Debug, Clone)]
pub struct PolicyNet {
    net: SmallNet,
    sigma: f64,
    horizon: usize,
    feature_dim: usize,
    use_features: bool,
}

impl PolicyNet {
    /// Fresh policy for feature vectors of length `feature_dim` and
    /// generation horizon `horizon`, with exploration scale `sigma`.
    pub fn new(feature_dim: usize, horizon: usize, width: usize, sigma: f64, seed: u64) -> Self {
        assert!(horizon >= 1, "horizon must be at least 1");
        assert!(sigma > 0.0, "exploration scale must be positive");
        let mut rng = stream_rng(seed, &[11]);
        let mut net = SmallNet::new(
            feature_dim,
            vec![
                LayerSpec::Affine { inputs: feature_dim, outputs: width },
                LayerSpec::CondLayerNorm { dim: width, conditions: horizon },
                LayerSpec::Tanh,
                LayerSpec::Affine { inputs: width, outputs: width },
                LayerSpec::CondLayerNorm { dim: width, conditions: horizon },
                LayerSpec::Tanh,
                LayerSpec::Affine { inputs: width, outputs: 5 },
            ],
            &mut rng,
        );
        net.zero_last_affine();
        Self { net, sigma, horizon, feature_dim, use_features: true }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn set_sigma(&mut self, sigma: f64) {
        assert!(sigma > 0.0, "exploration scale must be positive");
        self.sigma = sigma;
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn use_features(&self) -> bool {
        self.use_features
    }

    /// Disable the feature input (ablation): the net then sees a zero
    /// vector, so actions depend only on the step index.
    pub fn set_use_features(&mut self, on: bool) {
        self.use_features = on;
    }

    /// The underlying differentiable net (read access for optimizers).
    pub fn net(&self) -> &SmallNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut SmallNet {
        &mut self.net
    }

    /// Network input for a state: the feature vector, zeroed in the
    /// non-adaptive ablation.
    pub fn policy_input(&self, state: &GenerationState) -> Vec<f64> {
        assert_eq!(state.features.len(), self.feature_dim, "feature length mismatch");
        if self.use_features {
            state.features.clone()
        } else {
            vec![0.0; self.feature_dim]
        }
    }

    /// Head outputs for a state: 4 pre-squash action means then the value.
    pub fn heads(&self, state: &GenerationState) -> [f64; 5] {
        assert!(state.t < self.horizon, "step {} beyond horizon {}", state.t, self.horizon);
        let out = self.net.forward(&self.policy_input(state), state.t);
        [out[0], out[1], out[2], out[3], out[4]]
    }

    /// Pre-squash action mean η(s).
    pub fn action_mean(&self, state: &GenerationState) -> [f64; 4] {
        let h = self.heads(state);
        [h[0], h[1], h[2], h[3]]
    }

    /// Sample an exploratory action: raw ~ N(η(s), σ²I), squashed into
    /// range. Returns the squashed action, the Gaussian log-density of the
    /// raw draw, and the raw draw itself. Consumes 4 normal draws in
    /// component order.
    pub fn act_stochastic(
        &self,
        state: &GenerationState,
        rng: &mut dyn RngCore,
    ) -> (PolicyStepParams, f64, [f64; 4]) {
        let mean = self.action_mean(state);
        let mut raw = [0.0; 4];
        for (r, &m) in raw.iter_mut().zip(&mean) {
            let z: f64 = StandardNormal.sample(rng);
            *r = m + self.sigma * z;
        }
        let logprob = gaussian_logprob(&mean, &raw, self.sigma);
        (squash(&raw), logprob, raw)
    }

    /// Deterministic test-time action: squash(η(s)).
    pub fn act_deterministic(&self, state: &GenerationState) -> PolicyStepParams {
        squash(&self.action_mean(state))
    }

    /// State-value estimate V(s).
    pub fn value(&self, state: &GenerationState) -> f64 {
        self.heads(state)[4]
    }

    /// Persist parameters plus sigma/shape metadata.
    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        let mut meta = BTreeMap::new();
        meta.insert("sigma".to_string(), format!("{:?}", self.sigma));
        meta.insert("horizon".to_string(), self.horizon.to_string());
        meta.insert("feature_dim".to_string(), self.feature_dim.to_string());
        meta.insert("use_features".to_string(), (self.use_features as u8).to_string());
        meta.insert("tau_min".to_string(), format!("{TAU_MIN:?}"));
        meta.insert("tau_max".to_string(), format!("{TAU_MAX:?}"));
        meta.insert("w_max".to_string(), format!("{W_MAX:?}"));
        checkpoint::save(path, &meta, &[checkpoint::Section::from_net("net", &self.net)])?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let (meta, sections) = checkpoint::load(path)?;
        let get = |key: &str| {
            meta.get(key).cloned().ok_or_else(|| PolicyError::MissingEntry(key.to_string()))
        };
        let parse_f64 = |key: &str| -> Result<f64, PolicyError> {
            let v = get(key)?;
            v.parse().map_err(|_| PolicyError::BadEntry { key: key.into(), value: v })
        };
        let parse_usize = |key: &str| -> Result<usize, PolicyError> {
            let v = get(key)?;
            v.parse().map_err(|_| PolicyError::BadEntry { key: key.into(), value: v })
        };
        let sec = sections
            .iter()
            .find(|s| s.name == "net")
            .ok_or_else(|| PolicyError::MissingEntry("net".into()))?;
        Ok(Self {
            net: sec.to_net()?,
            sigma: parse_f64("sigma")?,
            horizon: parse_usize("horizon")?,
            feature_dim: parse_usize("feature_dim")?,
            use_features: get("use_features")? != "0",
        })
    }
}

/// Generation-time adapter plugging a [`PolicyNet`] into the sampler.
#[derive(Clone, Copy)]
pub struct LearnedProvider<'a> {
    pub net: &'a PolicyNet,
    /// Sample exploratory actions when true; use the mean otherwise.
    pub stochastic: bool,
}

impl PolicyProvider for LearnedProvider<'_> {
    fn act(
        &self,
        state: &GenerationState,
        rng: &mut dyn RngCore,
    ) -> Result<ProviderAction, SamplerError> {
        let value = Some(self.net.value(state));
        if self.stochastic {
            let (params, logprob, raw) = self.net.act_stochastic(state, rng);
            Ok(ProviderAction { params, raw: Some(raw), logprob: Some(logprob), value })
        } else {
            Ok(ProviderAction {
                params: self.net.act_deterministic(state),
                raw: None,
                logprob: None,
                value,
            })
        }
    }
}
