//! The frozen masked-token predictor.
//!
//! Two interchangeable variants sit behind [`MaskedPredictor`]: a neural net
//! trained once with the masked-language-modeling objective, and an exact
//! tabular predictor for worlds small enough to enumerate. Both map a
//! partially masked token grid plus an optional class label to per-position
//! logits over the codebook, and both expose a state feature vector for the
//! policy. After construction neither variant can be mutated; the training
//! pipeline treats the predictor as a fixed generator.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::math::{ceil_ratio_count, entropy, softmax, softmax_into};
use crate::rng::stream_rng;
use crate::smallnet::{checkpoint, Adam, LayerSpec, NetError, SmallNet};
use crate::token_world::{
    exact_statistics, sample_world, TokenSequence, WorldError, WorldSpec, WorldTable, MASK,
};

/// Probability floor before taking logs; keeps logits finite while leaving
/// zero-probability tokens unreachable in practice.
const PROB_FLOOR: f64 = 1e-300;

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("pre-training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },
    #[error("class {class} out of range ({classes} classes)")]
    ClassOutOfRange { class: u32, classes: usize },
    #[error("sequence shape {got} does not match predictor ({want})")]
    ShapeMismatch { got: usize, want: usize },
    #[error("checkpoint world fingerprint {got} does not match expected {want}")]
    FingerprintMismatch { got: String, want: String },
    #[error("checkpoint is missing entry '{0}'")]
    MissingEntry(String),
}

/// Hyperparameters for MLM pre-training.
#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub width: usize,
    pub class_dropout: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch: 64, lr: 1e-3, width: 256, class_dropout: 0.1, seed: 0 }
    }
}

/// Frozen masked-token predictor: neural or exact-tabular.
#[derive(Debug, Clone)]
pub enum MaskedPredictor {
    Neural(NeuralPredictor),
    Tabular(TabularPredictor),
}

impl MaskedPredictor {
    pub fn n(&self) -> usize {
        match self {
            MaskedPredictor::Neural(p) => p.n,
            MaskedPredictor::Tabular(p) => p.n,
        }
    }

    pub fn k(&self) -> usize {
        match self {
            MaskedPredictor::Neural(p) => p.k,
            MaskedPredictor::Tabular(p) => p.k,
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            MaskedPredictor::Neural(p) => p.n_classes,
            MaskedPredictor::Tabular(p) => p.n_classes,
        }
    }

    /// Token grid shape (rows, columns).
    pub fn grid(&self) -> (usize, usize) {
        match self {
            MaskedPredictor::Neural(p) => (p.grid_h, p.grid_w),
            MaskedPredictor::Tabular(p) => (p.grid_h, p.grid_w),
        }
    }

    pub fn fingerprint_hex(&self) -> &str {
        match self {
            MaskedPredictor::Neural(p) => &p.fingerprint_hex,
            MaskedPredictor::Tabular(p) => &p.fingerprint_hex,
        }
    }

    /// Length of the feature vector [`Self::features`] returns.
    pub fn feature_dim(&self) -> usize {
        match self {
            MaskedPredictor::Neural(p) => p.width,
            MaskedPredictor::Tabular(p) => 2 * p.n,
        }
    }

    /// N×K logits (row-major per position). `class` None selects the
    /// unconditional branch.
    pub fn predict_logits(
        &self,
        v: &TokenSequence,
        class: Option<u32>,
    ) -> Result<Vec<f64>, BackboneError> {
        self.check(v, class)?;
        Ok(match self {
            MaskedPredictor::Neural(p) => p.logits(v, class),
            MaskedPredictor::Tabular(p) => {
                p.position_probs(v, class).iter().map(|p| p.max(PROB_FLOOR).ln()).collect()
            }
        })
    }

    /// Policy state features: penultimate activations for the neural
    /// variant; per-position posterior entropies followed by max
    /// probabilities for the tabular one.
    pub fn features(
        &self,
        v: &TokenSequence,
        class: Option<u32>,
    ) -> Result<Vec<f64>, BackboneError> {
        self.check(v, class)?;
        Ok(match self {
            MaskedPredictor::Neural(p) => {
                let enc = p.encode(v, class);
                let (_, penultimate) = p.net.forward_with_penultimate(&enc, 0);
                penultimate
            }
            MaskedPredictor::Tabular(p) => {
                let probs = p.position_probs(v, class);
                let mut out = Vec::with_capacity(2 * p.n);
                for i in 0..p.n {
                    out.push(entropy(&probs[i * p.k..(i + 1) * p.k]));
                }
                for i in 0..p.n {
                    out.push(
                        probs[i * p.k..(i + 1) * p.k].iter().cloned().fold(0.0, f64::max),
                    );
                }
                out
            }
        })
    }

    /// Logits and features from a single evaluation; identical to calling
    /// [`Self::predict_logits`] and [`Self::features`] separately.
    pub fn logits_and_features(
        &self,
        v: &TokenSequence,
        class: Option<u32>,
    ) -> Result<(Vec<f64>, Vec<f64>), BackboneError> {
        self.check(v, class)?;
        Ok(match self {
            MaskedPredictor::Neural(p) => {
                let enc = p.encode(v, class);
                p.net.forward_with_penultimate(&enc, 0)
            }
            MaskedPredictor::Tabular(p) => {
                let probs = p.position_probs(v, class);
                let logits = probs.iter().map(|p| p.max(PROB_FLOOR).ln()).collect();
                let mut feats = Vec::with_capacity(2 * p.n);
                for i in 0..p.n {
                    feats.push(entropy(&probs[i * p.k..(i + 1) * p.k]));
                }
                for i in 0..p.n {
                    feats.push(
                        probs[i * p.k..(i + 1) * p.k].iter().cloned().fold(0.0, f64::max),
                    );
                }
                (logits, feats)
            }
        })
    }

    fn check(&self, v: &TokenSequence, class: Option<u32>) -> Result<(), BackboneError> {
        if v.len() != self.n() {
            return Err(BackboneError::ShapeMismatch { got: v.len(), want: self.n() });
        }
        if let Some(c) = class {
            if c as usize >= self.n_classes() {
                return Err(BackboneError::ClassOutOfRange {
                    class: c,
                    classes: self.n_classes(),
                });
            }
        }
        Ok(())
    }

    /// Write the predictor with its world fingerprint.
    pub fn save(&self, path: &Path) -> Result<(), BackboneError> {
        let mut meta = BTreeMap::new();
        meta.insert("world_fp".to_string(), self.fingerprint_hex().to_string());
        meta.insert("n".to_string(), self.n().to_string());
        meta.insert("k".to_string(), self.k().to_string());
        meta.insert("classes".to_string(), self.n_classes().to_string());
        match self {
            MaskedPredictor::Neural(p) => {
                meta.insert("kind".to_string(), "neural".to_string());
                checkpoint::save(path, &meta, &[checkpoint::Section::from_net("net", &p.net)])?;
            }
            MaskedPredictor::Tabular(p) => {
                meta.insert("kind".to_string(), "tabular".to_string());
                let mut secs = Vec::new();
                for (c, table) in p.table.per_class.iter().enumerate() {
                    secs.push(checkpoint::Section::raw(&format!("class_{c}"), table.clone()));
                }
                secs.push(checkpoint::Section::raw("marginal", p.table.marginal.clone()));
                checkpoint::save(path, &meta, &secs)?;
            }
        }
        Ok(())
    }

    /// Load a predictor and verify it was trained for `spec`.
    pub fn load(path: &Path, spec: &WorldSpec) -> Result<Self, BackboneError> {
        let (meta, sections) = checkpoint::load(path)?;
        let want = spec.fingerprint_hex();
        let got = meta
            .get("world_fp")
            .ok_or_else(|| BackboneError::MissingEntry("world_fp".into()))?;
        if *got != want {
            return Err(BackboneError::FingerprintMismatch { got: got.clone(), want });
        }
        let kind =
            meta.get("kind").ok_or_else(|| BackboneError::MissingEntry("kind".into()))?;
        let n = spec.n_tokens;
        let k = spec.codebook_size;
        let n_classes = spec.n_classes;
        match kind.as_str() {
            "neural" => {
                let sec = sections
                    .iter()
                    .find(|s| s.name == "net")
                    .ok_or_else(|| BackboneError::MissingEntry("net".into()))?;
                let net = sec.to_net()?;
                let width = match net.layers().first() {
                    Some(LayerSpec::Affine { outputs, .. }) => *outputs,
                    _ => return Err(BackboneError::MissingEntry("first affine".into())),
                };
                Ok(MaskedPredictor::Neural(NeuralPredictor {
                    net,
                    n,
                    k,
                    n_classes,
                    grid_h: spec.grid_height,
                    grid_w: spec.grid_width,
                    width,
                    fingerprint_hex: want,
                }))
            }
            "tabular" => {
                let size = sections
                    .iter()
                    .find(|s| s.name == "marginal")
                    .ok_or_else(|| BackboneError::MissingEntry("marginal".into()))?
                    .params
                    .len();
                let mut per_class = Vec::with_capacity(n_classes);
                for c in 0..n_classes {
                    let sec = sections
                        .iter()
                        .find(|s| s.name == format!("class_{c}"))
                        .ok_or_else(|| BackboneError::MissingEntry(format!("class_{c}")))?;
                    per_class.push(sec.params.clone());
                }
                let marginal = sections
                    .iter()
                    .find(|s| s.name == "marginal")
                    .unwrap()
                    .params
                    .clone();
                if per_class.iter().any(|t| t.len() != size) {
                    return Err(BackboneError::MissingEntry("consistent table sizes".into()));
                }
                Ok(MaskedPredictor::Tabular(TabularPredictor {
                    table: WorldTable { k, n, per_class, marginal },
                    n,
                    k,
                    n_classes,
                    grid_h: spec.grid_height,
                    grid_w: spec.grid_width,
                    fingerprint_hex: want,
                }))
            }
            other => Err(BackboneError::MissingEntry(format!("known kind (got '{other}')"))),
        }
    }
}

/// Exact conditional predictor backed by the enumerated world table.
#[derive(Debug, Clone)]
pub struct TabularPredictor {
    table: WorldTable,
    n: usize,
    k: usize,
    n_classes: usize,
    grid_h: usize,
    grid_w: usize,
    fingerprint_hex: String,
}

impl TabularPredictor {
    pub fn from_spec(spec: &WorldSpec) -> Result<Self, BackboneError> {
        let table = exact_statistics(spec)?;
        Ok(Self {
            n: spec.n_tokens,
            k: spec.codebook_size,
            n_classes: spec.n_classes,
            grid_h: spec.grid_height,
            grid_w: spec.grid_width,
            fingerprint_hex: spec.fingerprint_hex(),
            table,
        })
    }

    /// Per-position conditional P(v_i = k | observed unmasked tokens),
    /// flattened N×K. Conditioning includes position i itself when it is
    /// unmasked, so committed positions get a delta on their own token.
    fn position_probs(&self, v: &TokenSequence, class: Option<u32>) -> Vec<f64> {
        let table = match class {
            Some(c) => &self.table.per_class[c as usize],
            None => &self.table.marginal,
        };
        let (n, k) = (self.n, self.k);
        let mut acc = vec![0.0f64; n * k];
        let mut digits = vec![0u32; n];
        for (idx, &p) in table.iter().enumerate() {
            if idx > 0 {
                for d in digits.iter_mut() {
                    if (*d as usize) + 1 < k {
                        *d += 1;
                        break;
                    }
                    *d = 0;
                }
            }
            if p == 0.0 {
                continue;
            }
            let consistent =
                (0..n).all(|i| v.is_masked(i) || v.get(i) == digits[i]);
            if consistent {
                for i in 0..n {
                    acc[i * k + digits[i] as usize] += p;
                }
            }
        }
        // normalize each position; zero-mass conditioning falls back to
        // uniform (can only happen on observations outside the support)
        for i in 0..n {
            let row = &mut acc[i * k..(i + 1) * k];
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|x| *x /= s);
            } else {
                row.fill(1.0 / k as f64);
            }
        }
        acc
    }
}

/// Neural masked predictor: one-hot token grid plus class embedding in, N×K
/// logits out.
#[derive(Debug, Clone)]
pub struct NeuralPredictor {
    net: SmallNet,
    n: usize,
    k: usize,
    n_classes: usize,
    grid_h: usize,
    grid_w: usize,
    width: usize,
    fingerprint_hex: String,
}

impl NeuralPredictor {
    /// Input encoding: per position a (K+1)-way one-hot (MASK last), then an
    /// (n_classes+1)-way class one-hot (null last).
    fn encode(&self, v: &TokenSequence, class: Option<u32>) -> Vec<f64> {
        encode_input(v, class, self.n, self.k, self.n_classes)
    }

    fn logits(&self, v: &TokenSequence, class: Option<u32>) -> Vec<f64> {
        self.net.forward(&self.encode(v, class), 0)
    }
}

fn encode_input(
    v: &TokenSequence,
    class: Option<u32>,
    n: usize,
    k: usize,
    n_classes: usize,
) -> Vec<f64> {
    let mut enc = vec![0.0; n * (k + 1) + n_classes + 1];
    for i in 0..n {
        let t = v.get(i);
        let slot = if t == MASK { k } else { t as usize };
        enc[i * (k + 1) + slot] = 1.0;
    }
    let class_slot = class.map(|c| c as usize).unwrap_or(n_classes);
    enc[n * (k + 1) + class_slot] = 1.0;
    enc
}

fn input_dim(spec: &WorldSpec) -> usize {
    spec.n_tokens * (spec.codebook_size + 1) + spec.n_classes + 1
}

/// Train a neural predictor with the masked-token objective and freeze it.
/// Returns the predictor and the per-step training loss curve.
pub fn mlm_pretrain(
    spec: &WorldSpec,
    cfg: &PretrainConfig,
) -> Result<(MaskedPredictor, Vec<f64>), BackboneError> {
    let n = spec.n_tokens;
    let k = spec.codebook_size;
    let enc_dim = input_dim(spec);
    let out_dim = n * k;
    let mut init_rng = stream_rng(cfg.seed, &[1]);
    let mut net = SmallNet::new(
        enc_dim,
        vec![
            LayerSpec::Affine { inputs: enc_dim, outputs: cfg.width },
            LayerSpec::Tanh,
            LayerSpec::Affine { inputs: cfg.width, outputs: cfg.width },
            LayerSpec::Tanh,
            LayerSpec::Affine { inputs: cfg.width, outputs: out_dim },
        ],
        &mut init_rng,
    );
    let mut adam = Adam::new(cfg.lr, 0.9, 0.999, net.param_count());
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut grads = vec![0.0; net.param_count()];
    let mut upstream = vec![0.0; out_dim];
    let mut probs = vec![0.0; k];

    for step in 0..cfg.steps {
        let mut rng = stream_rng(cfg.seed, &[2, step as u64]);
        grads.fill(0.0);
        let mut loss = 0.0;
        for _ in 0..cfg.batch {
            let class = rng.gen_range(0..spec.n_classes as u32);
            let target = sample_world(spec, class, &mut rng)?;
            let class_in =
                if rng.gen::<f64>() < cfg.class_dropout { None } else { Some(class) };
            let masked = mask_example(&target, &mut rng);
            let masked_positions: Vec<usize> = masked.masked_positions();

            let enc = encode_input(&masked, class_in, n, k, spec.n_classes);
            let trace = net.forward_trace(&enc, 0);
            let logits = trace.output();
            upstream.fill(0.0);
            let scale = 1.0 / (masked_positions.len() * cfg.batch) as f64;
            for &i in &masked_positions {
                softmax_into(&logits[i * k..(i + 1) * k], &mut probs);
                let t = target.get(i) as usize;
                loss -= probs[t].max(PROB_FLOOR).ln() * scale;
                for (j, &p) in probs.iter().enumerate() {
                    upstream[i * k + j] = (p - if j == t { 1.0 } else { 0.0 }) * scale;
                }
            }
            net.backward_into(&trace, &upstream, &mut grads);
        }
        if !loss.is_finite() {
            return Err(BackboneError::Diverged { step, loss });
        }
        adam.step(net.params_mut(), &grads)?;
        losses.push(loss);
    }

    let pred = MaskedPredictor::Neural(NeuralPredictor {
        net,
        n,
        k,
        n_classes: spec.n_classes,
        grid_h: spec.grid_height,
        grid_w: spec.grid_width,
        width: cfg.width,
        fingerprint_hex: spec.fingerprint_hex(),
    });
    Ok((pred, losses))
}

/// Mask a sampled example with a cosine-weighted ratio: r = cos(πu/2) for
/// uniform u, biased toward heavy masking, at least one position masked.
fn mask_example<R: Rng>(target: &TokenSequence, rng: &mut R) -> TokenSequence {
    let n = target.len();
    let u: f64 = rng.gen();
    let ratio = (std::f64::consts::FRAC_PI_2 * u).cos();
    let n_mask = ceil_ratio_count(ratio, n).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    // partial Fisher–Yates for the first n_mask slots
    for i in 0..n_mask {
        let j = rng.gen_range(i..n);
        order.swap(i, j);
    }
    let mut masked = target.clone();
    for &i in &order[..n_mask] {
        masked.set(i, MASK);
    }
    masked
}

/// Average masked-token cross-entropy on fresh held-out examples.
pub fn heldout_masked_ce(
    pred: &MaskedPredictor,
    spec: &WorldSpec,
    examples: usize,
    seed: u64,
) -> Result<f64, BackboneError> {
    let mut rng = stream_rng(seed, &[3]);
    let k = spec.codebook_size;
    let mut total = 0.0;
    for _ in 0..examples {
        let class = rng.gen_range(0..spec.n_classes as u32);
        let target = sample_world(spec, class, &mut rng)?;
        let masked = mask_example(&target, &mut rng);
        let logits = pred.predict_logits(&masked, Some(class))?;
        let positions = masked.masked_positions();
        let mut ce = 0.0;
        for &i in &positions {
            let p = softmax(&logits[i * k..(i + 1) * k]);
            ce -= p[target.get(i) as usize].max(PROB_FLOOR).ln();
        }
        total += ce / positions.len() as f64;
    }
    Ok(total / examples as f64)
}

/// Pooled unigram entropy estimate: the entropy of the overall token
/// frequency distribution, a ceiling any context-aware predictor should
/// beat.
pub fn unigram_entropy_estimate(
    spec: &WorldSpec,
    samples: usize,
    seed: u64,
) -> Result<f64, BackboneError> {
    let mut rng = stream_rng(seed, &[4]);
    let mut counts = vec![0usize; spec.codebook_size];
    for _ in 0..samples {
        let class = rng.gen_range(0..spec.n_classes as u32);
        let v = sample_world(spec, class, &mut rng)?;
        for &t in v.tokens() {
            counts[t as usize] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    let p: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    Ok(entropy(&p))
}
