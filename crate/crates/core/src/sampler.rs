//! Parallel decode-and-re-mask generation.
//!
//! One step takes a partially masked token grid, asks the frozen predictor
//! for per-position logits, extrapolates them with classifier-free guidance,
//! samples every masked position at once, then re-masks the least confident
//! of the fresh picks. Iterating for T steps from an all-MASK canvas yields a
//! complete sequence. The per-step knobs (re-mask ratio, two temperatures,
//! guidance weight) come from a [`PolicyProvider`]: either a fixed schedule
//! or a learned policy network.

use rand::{Rng, RngCore};
use thiserror::Error;

use crate::backbone::{BackboneError, MaskedPredictor};
use crate::math::{ceil_ratio_count, gumbel, log_softmax_at, softmax_into};
use crate::policy::GenerationState;
use crate::token_world::TokenSequence;

/// Lower bound applied to a schedule-produced re-mask temperature when the
/// formula degenerates to zero.
const TAU2_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid step parameters: {0}")]
    InvalidParams(String),
    #[error("schedule step {t} out of range (horizon {horizon})")]
    StepOutOfRange { t: usize, horizon: usize },
    #[error("logit vector has {got} entries, expected {want}")]
    LogitShape { got: usize, want: usize },
    #[error("non-finite logit at position {0}")]
    NonFiniteLogit(usize),
    #[error("generation horizon must be at least 1")]
    EmptyHorizon,
    #[error(transparent)]
    Backbone(#[from] BackboneError),
}

/// The four knobs controlling one decode-and-re-mask step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyStepParams {
    /// Fraction of the grid to re-mask after decoding, in [0, 1].
    pub mask_ratio: f64,
    /// Sampling temperature for the parallel decode, > 0.
    pub tau1: f64,
    /// Re-masking (confidence) temperature, > 0.
    pub tau2: f64,
    /// Guidance weight for conditional extrapolation, ≥ 0.
    pub guidance: f64,
}

impl PolicyStepParams {
    pub fn validate(&self) -> Result<(), SamplerError> {
        let err = |msg: String| Err(SamplerError::InvalidParams(msg));
        if !self.mask_ratio.is_finite() || !(0.0..=1.0).contains(&self.mask_ratio) {
            return err(format!("mask_ratio {} outside [0, 1]", self.mask_ratio));
        }
        if !self.tau1.is_finite() || self.tau1 <= 0.0 {
            return err(format!("tau1 {} must be positive", self.tau1));
        }
        if !self.tau2.is_finite() || self.tau2 <= 0.0 {
            return err(format!("tau2 {} must be positive", self.tau2));
        }
        if !self.guidance.is_finite() || self.guidance < 0.0 {
            return err(format!("guidance {} must be non-negative", self.guidance));
        }
        Ok(())
    }
}

/// Result of a single decode-and-re-mask step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    /// Grid after re-masking; kept positions carry `guess` values.
    pub tokens: TokenSequence,
    /// The full decode before re-masking.
    pub guess: TokenSequence,
    /// Per-position confidences; +∞ at positions committed before the step.
    pub confidences: Vec<f64>,
    /// Sorted indices of the kept positions.
    pub keep_set: Vec<usize>,
    /// How many positions were re-masked.
    pub remasked: usize,
}

/// Constants for the fixed baseline schedules: cosine mask ratio, constant
/// unit sampling temperature, linearly decaying re-mask temperature with
/// scale `remask_temp_scale`, linearly growing guidance with slope
/// `guidance_slope`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub remask_temp_scale: f64,
    pub guidance_slope: f64,
}

impl ScheduleConfig {
    pub fn new(steps: usize) -> Self {
        Self { steps, remask_temp_scale: 1.0, guidance_slope: 3.0 }
    }
}

/// Baseline step parameters at step `t`:
/// m = cos(π(t+1)/2T), τ1 = 1, τ2 = λ(T−t)/T (floored), w = k(t+1)/T.
pub fn static_schedule(cfg: &ScheduleConfig, t: usize) -> Result<PolicyStepParams, SamplerError> {
    if cfg.steps == 0 {
        return Err(SamplerError::EmptyHorizon);
    }
    if t >= cfg.steps {
        return Err(SamplerError::StepOutOfRange { t, horizon: cfg.steps });
    }
    let tt = cfg.steps as f64;
    let frac = (t + 1) as f64 / tt;
    Ok(PolicyStepParams {
        mask_ratio: (std::f64::consts::FRAC_PI_2 * frac).cos().max(0.0),
        tau1: 1.0,
        tau2: (cfg.remask_temp_scale * (tt - t as f64) / tt).max(TAU2_FLOOR),
        guidance: cfg.guidance_slope * frac,
    })
}

/// Guidance extrapolation: cond + w·(cond − uncond), elementwise.
pub fn cfg_logits(
    l_cond: &[f64],
    l_uncond: &[f64],
    w: f64,
) -> Result<Vec<f64>, SamplerError> {
    if l_cond.len() != l_uncond.len() {
        return Err(SamplerError::LogitShape { got: l_uncond.len(), want: l_cond.len() });
    }
    Ok(l_cond
        .iter()
        .zip(l_uncond)
        .map(|(&c, &u)| c + w * (c - u))
        .collect())
}

/// Decode every masked position at once.
///
/// Masked positions sample from softmax(logits/τ1); committed positions are
/// copied through. The returned confidence at a freshly decoded position is
/// the log of the unscaled predictive probability of the chosen token (τ1
/// shapes sampling only, not scoring); committed positions get +∞.
/// Consumes exactly one uniform draw per masked position, in index order.
pub fn parallel_decode<R: Rng + ?Sized>(
    v: &TokenSequence,
    logits: &[f64],
    tau1: f64,
    rng: &mut R,
) -> Result<(TokenSequence, Vec<f64>), SamplerError> {
    let n = v.len();
    let k = logits.len() / n.max(1);
    if n == 0 || logits.len() != n * k {
        return Err(SamplerError::LogitShape { got: logits.len(), want: n * k });
    }
    if !tau1.is_finite() || tau1 <= 0.0 {
        return Err(SamplerError::InvalidParams(format!("tau1 {tau1} must be positive")));
    }
    if let Some(i) = logits.iter().position(|l| !l.is_finite()) {
        return Err(SamplerError::NonFiniteLogit(i / k));
    }

    let mut guess = v.clone();
    let mut confidences = vec![f64::INFINITY; n];
    let mut scaled = vec![0.0; k];
    let mut probs = vec![0.0; k];
    for i in 0..n {
        if !v.is_masked(i) {
            continue;
        }
        let row = &logits[i * k..(i + 1) * k];
        for (s, &l) in scaled.iter_mut().zip(row) {
            *s = l / tau1;
        }
        softmax_into(&scaled, &mut probs);
        let u: f64 = rng.gen();
        let mut chosen = k - 1;
        let mut cum = 0.0;
        for (j, &p) in probs.iter().enumerate() {
            cum += p;
            if u < cum {
                chosen = j;
                break;
            }
        }
        guess.set(i, chosen as u32);
        confidences[i] = log_softmax_at(row, chosen);
    }
    Ok((guess, confidences))
}

/// Re-mask the least confident fresh picks.
///
/// The keep-count starts at N − ⌈m·N⌉ and is raised so every +∞-confidence
/// (previously committed) position stays kept. Among fresh picks the keep
/// set is chosen by perturbing confidences with scaled Gumbel noise
/// (c + τ2·g) and keeping the highest scores, which samples keep sets
/// without replacement from softmax(c/τ2). Randomness is consumed only when
/// the decision is non-trivial (some but not all fresh picks kept): then one
/// Gumbel draw per finite-confidence position, in index order.
pub fn remask<R: Rng + ?Sized>(
    guess: &TokenSequence,
    confidences: &[f64],
    m: f64,
    tau2: f64,
    rng: &mut R,
) -> Result<StepOutcome, SamplerError> {
    let n = guess.len();
    if confidences.len() != n {
        return Err(SamplerError::LogitShape { got: confidences.len(), want: n });
    }
    if !m.is_finite() || !(0.0..=1.0).contains(&m) {
        return Err(SamplerError::InvalidParams(format!("mask_ratio {m} outside [0, 1]")));
    }
    if !tau2.is_finite() || tau2 <= 0.0 {
        return Err(SamplerError::InvalidParams(format!("tau2 {tau2} must be positive")));
    }

    let committed: Vec<usize> = (0..n).filter(|&i| confidences[i].is_infinite()).collect();
    let keep_count = (n - ceil_ratio_count(m, n)).max(committed.len());
    let fresh_keep = keep_count - committed.len();

    let mut keep_set = committed;
    let fresh: Vec<usize> = (0..n).filter(|&i| confidences[i].is_finite()).collect();
    if fresh_keep >= fresh.len() {
        keep_set.extend(&fresh);
    } else if fresh_keep > 0 {
        let mut scored: Vec<(f64, usize)> = fresh
            .iter()
            .map(|&i| (confidences[i] + tau2 * gumbel(rng), i))
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        keep_set.extend(scored[..fresh_keep].iter().map(|&(_, i)| i));
    }
    keep_set.sort_unstable();

    let mut tokens = TokenSequence::all_mask(guess.height(), guess.width());
    for &i in &keep_set {
        tokens.set(i, guess.get(i));
    }
    let remasked = n - keep_set.len();
    Ok(StepOutcome { tokens, guess: guess.clone(), confidences: confidences.to_vec(), keep_set, remasked })
}

/// What a provider hands back for one step: the executed knobs plus, for
/// stochastic policies, the pre-squash draw, its log-density and the value
/// estimate.
#[derive(Debug, Clone)]
pub struct ProviderAction {
    pub params: PolicyStepParams,
    pub raw: Option<[f64; 4]>,
    pub logprob: Option<f64>,
    pub value: Option<f64>,
}

/// Source of per-step parameters during generation. Implementations must be
/// safe for concurrent read-only use.
pub trait PolicyProvider: Sync {
    fn act(
        &self,
        state: &GenerationState,
        rng: &mut dyn RngCore,
    ) -> Result<ProviderAction, SamplerError>;
}

/// Fixed-baseline provider evaluating [`static_schedule`].
#[derive(Debug, Clone, Copy)]
pub struct StaticProvider {
    pub cfg: ScheduleConfig,
}

impl StaticProvider {
    pub fn new(cfg: ScheduleConfig) -> Self {
        Self { cfg }
    }
}

impl PolicyProvider for StaticProvider {
    fn act(
        &self,
        state: &GenerationState,
        _rng: &mut dyn RngCore,
    ) -> Result<ProviderAction, SamplerError> {
        Ok(ProviderAction {
            params: static_schedule(&self.cfg, state.t)?,
            raw: None,
            logprob: None,
            value: None,
        })
    }
}

/// One recorded generation step.
#[derive(Debug, Clone)]
pub struct TrajectoryStep {
    pub t: usize,
    pub state: GenerationState,
    /// Executed knobs (after any final-step override).
    pub params: PolicyStepParams,
    pub raw: Option<[f64; 4]>,
    pub logprob: Option<f64>,
    pub value: Option<f64>,
    /// MASK count after the step.
    pub masked_after: usize,
}

/// A full generation rollout: T steps, the finished sequence, and (once
/// scored) a single terminal reward.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
    pub output: TokenSequence,
    pub class: Option<u32>,
    reward: Option<f64>,
}

impl Trajectory {
    pub fn reward(&self) -> Option<f64> {
        self.reward
    }

    /// Attach the terminal reward; a trajectory is scored exactly once.
    pub fn attach_reward(&mut self, reward: f64) {
        assert!(self.reward.is_none(), "trajectory already carries a reward");
        self.reward = Some(reward);
    }

    /// CSV dump with one row per step; optional fields stay empty for
    /// deterministic providers.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,m,tau1,tau2,w,masked_count,logprob,value\n");
        for s in &self.steps {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                s.t,
                s.params.mask_ratio,
                s.params.tau1,
                s.params.tau2,
                s.params.guidance,
                s.masked_after,
                opt(s.logprob),
                opt(s.value),
            ));
        }
        out
    }
}

/// Run the full T-step loop from an all-MASK canvas.
///
/// Each step: encode the state, ask the provider for knobs (rejecting
/// invalid ones), guide the conditional logits, decode, re-mask. The final
/// step always executes with m = 0 so the output is complete.
pub fn generate(
    pred: &MaskedPredictor,
    provider: &dyn PolicyProvider,
    horizon: usize,
    class: Option<u32>,
    rng: &mut dyn RngCore,
) -> Result<Trajectory, SamplerError> {
    if horizon == 0 {
        return Err(SamplerError::EmptyHorizon);
    }
    let (h, w) = pred.grid();
    let mut v = TokenSequence::all_mask(h, w);
    let mut steps = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let (cond, features) = pred.logits_and_features(&v, class)?;
        let state = GenerationState { t, features, tokens: v.clone() };
        let action = provider.act(&state, rng)?;
        action.params.validate()?;
        let mut params = action.params;
        if t + 1 == horizon {
            params.mask_ratio = 0.0;
        }
        let logits = if params.guidance != 0.0 {
            let uncond = pred.predict_logits(&v, None)?;
            cfg_logits(&cond, &uncond, params.guidance)?
        } else {
            cond
        };
        let (guess, confidences) = parallel_decode(&v, &logits, params.tau1, rng)?;
        let outcome = remask(&guess, &confidences, params.mask_ratio, params.tau2, rng)?;
        v = outcome.tokens;
        steps.push(TrajectoryStep {
            t,
            state,
            params,
            raw: action.raw,
            logprob: action.logprob,
            value: action.value,
            masked_after: v.masked_count(),
        });
    }
    debug_assert!(v.is_complete(), "generation must terminate fully decoded");
    Ok(Trajectory { steps, output: v, class, reward: None })
}
