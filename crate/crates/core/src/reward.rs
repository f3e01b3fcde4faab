//! Reward designs for policy search.
//!
//! Three interchangeable sources: an adversarial discriminator trained
//! jointly with the policy (scores are the probability an image is real), a
//! batch-level statistical reward (negative Fréchet distance against fixed
//! reference statistics, broadcast to every trajectory in the batch), and a
//! pluggable external scorer for pre-trained or user-supplied judges.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Stdio};

use thiserror::Error;

use crate::eval::{fit_stats, frechet_distance, Embedder, EvalError, GaussianStats};
use crate::math::logistic;
use crate::rng::stream_rng;
use crate::smallnet::{checkpoint, Adam, LayerSpec, NetError, SmallNet};
use crate::token_world::Image;

/// Discriminator scores are clamped to [CLAMP, 1−CLAMP] before logs.
pub const SCORE_CLAMP: f64 = 1e-7;

/// Default discriminator shape and optimizer settings.
pub const DISC_WIDTH: usize = 128;
pub const DISC_LR: f64 = 1e-4;
pub const DISC_BETA1: f64 = 0.5;
pub const DISC_BETA2: f64 = 0.999;

/// Minimum reference sample count for the statistical batch reward.
pub const MIN_REFERENCE_COUNT: usize = 1000;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("image has {got} values, discriminator expects {want}")]
    ShapeMismatch { got: usize, want: usize },
    #[error("score batch is empty")]
    EmptyBatch,
    #[error("reference statistics cover {got} samples, need at least {need}")]
    ReferenceTooSmall { got: usize, need: usize },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("external scorer unavailable: {0}")]
    ScorerUnavailable(String),
    #[error("checkpoint is missing entry '{0}'")]
    MissingEntry(String),
}

/// GAN-style image judge: flattened pixels through a 3-layer MLP to one
/// logit, squashed to a probability of being real.
///
/// Pixels are shifted to [-0.5, 0.5] before the first affine layer. Raw
/// [0, 1] inputs are all positive, so every first-layer weight gradient
/// carries the sign of its upstream signal; under a scale-free optimizer
/// those coherent steps move the logit orders of magnitude faster than the
/// real/fake separation signal and the score collapses to a constant.
/// Centering removes the shared component.
#[derive(Debug, Clone)]
pub struct Discriminator {
    net: SmallNet,
    input_dim: usize,
}

const PIXEL_CENTER: f64 = 0.5;

impl Discriminator {
    pub fn new(input_dim: usize, width: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, &[31]);
        let net = SmallNet::new(
            input_dim,
            vec![
                LayerSpec::Affine { inputs: input_dim, outputs: width },
                LayerSpec::Tanh,
                LayerSpec::Affine { inputs: width, outputs: width },
                LayerSpec::Tanh,
                LayerSpec::Affine { inputs: width, outputs: 1 },
            ],
            &mut rng,
        );
        Self { net, input_dim }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn net(&self) -> &SmallNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut SmallNet {
        &mut self.net
    }

    /// Centered input vector for one image, shape-checked.
    fn centered(&self, image: &Image) -> Result<Vec<f64>, RewardError> {
        let x = image.flat();
        if x.len() != self.input_dim {
            return Err(RewardError::ShapeMismatch { got: x.len(), want: self.input_dim });
        }
        Ok(x.iter().map(|&p| p - PIXEL_CENTER).collect())
    }

    /// Probability in (0,1) that `image` is real.
    pub fn score(&self, image: &Image) -> Result<f64, RewardError> {
        Ok(logistic(self.net.forward(&self.centered(image)?, 0)[0]))
    }

    pub fn save(&self, path: &Path) -> Result<(), RewardError> {
        let mut meta = BTreeMap::new();
        meta.insert("input_dim".to_string(), self.input_dim.to_string());
        checkpoint::save(path, &meta, &[checkpoint::Section::from_net("net", &self.net)])?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RewardError> {
        let (meta, sections) = checkpoint::load(path)?;
        let input_dim = meta
            .get("input_dim")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| RewardError::MissingEntry("input_dim".into()))?;
        let sec = sections
            .iter()
            .find(|s| s.name == "net")
            .ok_or_else(|| RewardError::MissingEntry("net".into()))?;
        Ok(Self { net: sec.to_net()?, input_dim })
    }
}

fn clamp_score(r: f64) -> f64 {
    r.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP)
}

/// Discriminator objective, minimized in its parameters:
/// mean(ln fake) + mean(ln(1 − real)). Driving it down pushes fake scores
/// to 0 and real scores to 1.
pub fn disc_loss(fake_scores: &[f64], real_scores: &[f64]) -> Result<f64, RewardError> {
    if fake_scores.is_empty() || real_scores.is_empty() {
        return Err(RewardError::EmptyBatch);
    }
    let fake: f64 =
        fake_scores.iter().map(|&r| clamp_score(r).ln()).sum::<f64>() / fake_scores.len() as f64;
    let real: f64 = real_scores
        .iter()
        .map(|&r| (1.0 - clamp_score(r)).ln())
        .sum::<f64>()
        / real_scores.len() as f64;
    Ok(fake + real)
}

/// Outcome of one discriminator step.
#[derive(Debug, Clone, Copy)]
pub struct DiscUpdateStats {
    pub loss: f64,
    /// Mean of [fake < 0.5] and [real > 0.5], measured before the step.
    pub accuracy: f64,
}

/// One optimizer step on [`disc_loss`] over the given batches.
pub fn disc_update(
    d: &mut Discriminator,
    real: &[Image],
    fake: &[Image],
    adam: &mut Adam,
) -> Result<DiscUpdateStats, RewardError> {
    if real.is_empty() || fake.is_empty() {
        return Err(RewardError::EmptyBatch);
    }
    let mut grads = vec![0.0; d.net.param_count()];
    let mut fake_scores = Vec::with_capacity(fake.len());
    let mut real_scores = Vec::with_capacity(real.len());

    for image in fake {
        let x = d.centered(image)?;
        let trace = d.net.forward_trace(&x, 0);
        let r = logistic(trace.output()[0]);
        fake_scores.push(r);
        // d/dz ln r = 1 − r; zero once the clamp is pinned
        let g = if r < SCORE_CLAMP { 0.0 } else { (1.0 - r) / fake.len() as f64 };
        d.net.backward_into(&trace, &[g], &mut grads);
    }
    for image in real {
        let x = d.centered(image)?;
        let trace = d.net.forward_trace(&x, 0);
        let r = logistic(trace.output()[0]);
        real_scores.push(r);
        // d/dz ln(1 − r) = −r
        let g = if r > 1.0 - SCORE_CLAMP { 0.0 } else { -r / real.len() as f64 };
        d.net.backward_into(&trace, &[g], &mut grads);
    }

    let loss = disc_loss(&fake_scores, &real_scores)?;
    let fake_acc =
        fake_scores.iter().filter(|&&r| r < 0.5).count() as f64 / fake_scores.len() as f64;
    let real_acc =
        real_scores.iter().filter(|&&r| r > 0.5).count() as f64 / real_scores.len() as f64;
    adam.step(d.net.params_mut(), &grads)?;
    Ok(DiscUpdateStats { loss, accuracy: 0.5 * (fake_acc + real_acc) })
}

/// Batch-level statistical reward: −d²(batch, reference). The same scalar
/// applies to every trajectory that produced the batch; no per-image
/// attribution exists.
pub fn fid_batch_reward(
    images: &[Image],
    embedder: &Embedder,
    reference: &GaussianStats,
) -> Result<f64, RewardError> {
    if reference.count < MIN_REFERENCE_COUNT {
        return Err(RewardError::ReferenceTooSmall {
            got: reference.count,
            need: MIN_REFERENCE_COUNT,
        });
    }
    let stats = fit_stats(embedder, images)?;
    Ok(-frechet_distance(&stats, reference)?)
}

/// A total scoring map from one image to one scalar.
pub trait ImageScorer: Sync {
    fn score(&self, image: &Image) -> Result<f64, RewardError>;
}

impl<F: Fn(&Image) -> Result<f64, RewardError> + Sync> ImageScorer for F {
    fn score(&self, image: &Image) -> Result<f64, RewardError> {
        self(image)
    }
}

/// External scorer invoked as a subprocess per image. Protocol: stdin gets
/// three little-endian u32 values (height, width, channels) followed by the
/// pixels as little-endian f64; stdout must print one decimal scalar.
pub struct SubprocessScorer {
    pub program: String,
    pub args: Vec<String>,
}

impl ImageScorer for SubprocessScorer {
    fn score(&self, image: &Image) -> Result<f64, RewardError> {
        let fail = |msg: String| RewardError::ScorerUnavailable(msg);
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| fail(format!("spawn {}: {e}", self.program)))?;
        {
            let stdin = child.stdin.as_mut().expect("piped stdin");
            let mut buf = Vec::with_capacity(12 + image.data.len() * 8);
            for dim in [image.height, image.width, image.channels] {
                buf.extend_from_slice(&(dim as u32).to_le_bytes());
            }
            for &p in &image.data {
                buf.extend_from_slice(&p.to_le_bytes());
            }
            stdin.write_all(&buf).map_err(|e| fail(format!("write: {e}")))?;
        }
        let out = child.wait_with_output().map_err(|e| fail(format!("wait: {e}")))?;
        if !out.status.success() {
            return Err(fail(format!("hook exited with {}", out.status)));
        }
        let text = String::from_utf8_lossy(&out.stdout);
        let value: f64 = text
            .trim()
            .parse()
            .map_err(|_| fail(format!("unparseable hook output '{}'", text.trim())))?;
        if !value.is_finite() {
            return Err(fail(format!("non-finite hook output {value}")));
        }
        Ok(value)
    }
}

/// Kind tag for a reward source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardKind {
    Adversarial,
    FidBatch,
    External,
}

/// A configured reward source. Adversarial and external sources score each
/// image; the statistical source scores the batch as a whole and broadcasts.
pub enum RewardSource {
    Adversarial(Discriminator),
    FidBatch { embedder: Embedder, reference: GaussianStats },
    External(Box<dyn ImageScorer + Send>),
}

impl RewardSource {
    pub fn kind(&self) -> RewardKind {
        match self {
            RewardSource::Adversarial(_) => RewardKind::Adversarial,
            RewardSource::FidBatch { .. } => RewardKind::FidBatch,
            RewardSource::External(_) => RewardKind::External,
        }
    }

    /// Score a batch, one value per image (broadcast for the batch-level
    /// source).
    pub fn score_batch(&self, images: &[Image]) -> Result<Vec<f64>, RewardError> {
        if images.is_empty() {
            return Err(RewardError::EmptyBatch);
        }
        match self {
            RewardSource::Adversarial(d) => {
                images.iter().map(|im| d.score(im)).collect()
            }
            RewardSource::FidBatch { embedder, reference } => {
                let r = fid_batch_reward(images, embedder, reference)?;
                Ok(vec![r; images.len()])
            }
            RewardSource::External(hook) => {
                images.iter().map(|im| hook.score(im)).collect()
            }
        }
    }

    pub fn discriminator(&self) -> Option<&Discriminator> {
        match self {
            RewardSource::Adversarial(d) => Some(d),
            _ => None,
        }
    }

    pub fn discriminator_mut(&mut self) -> Option<&mut Discriminator> {
        match self {
            RewardSource::Adversarial(d) => Some(d),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn image(values: &[f64]) -> Image {
        Image { height: 1, width: values.len(), channels: 1, data: values.to_vec() }
    }

    fn gray(dim: usize, v: f64) -> Image {
        Image { height: 1, width: dim, channels: 1, data: vec![v; dim] }
    }

    #[test]
    fn zeroed_discriminator_scores_half() {
        let mut d = Discriminator::new(4, 8, 1);
        d.net_mut().params_mut().fill(0.0);
        assert_eq!(d.score(&gray(4, 0.3)).unwrap(), 0.5);
        assert_eq!(d.score(&gray(4, 0.9)).unwrap(), 0.5);
    }

    #[test]
    fn logit_ln_three_scores_three_quarters() {
        let mut d = Discriminator::new(2, 4, 2);
        d.net_mut().params_mut().fill(0.0);
        // leave only the final bias: logit = ln 3 for every input
        let count = d.net().param_count();
        d.net_mut().params_mut()[count - 1] = 3.0f64.ln();
        let s = d.score(&gray(2, 0.0)).unwrap();
        assert!((s - 0.75).abs() < 1e-12);
    }

    #[test]
    fn score_rejects_wrong_shape() {
        let d = Discriminator::new(4, 8, 3);
        assert!(matches!(
            d.score(&gray(5, 0.1)),
            Err(RewardError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn score_gradient_matches_finite_differences() {
        let mut d = Discriminator::new(3, 6, 5);
        let im = image(&[0.2, 0.8, 0.5]);
        let x = d.centered(&im).unwrap();
        let trace = d.net().forward_trace(&x, 0);
        let r = logistic(trace.output()[0]);
        let mut grads = vec![0.0; d.net().param_count()];
        // d score / d logit = r(1 − r)
        d.net().backward_into(&trace, &[r * (1.0 - r)], &mut grads);

        let eps = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..d.net().param_count() {
            let orig = d.net().params()[i];
            d.net_mut().params_mut()[i] = orig + eps;
            let up = d.score(&im).unwrap();
            d.net_mut().params_mut()[i] = orig - eps;
            let down = d.score(&im).unwrap();
            d.net_mut().params_mut()[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            let denom = fd.abs().max(grads[i].abs()).max(1e-6);
            worst = worst.max((fd - grads[i]).abs() / denom);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn loss_anchors() {
        // symmetric half scores
        let l = disc_loss(&[0.5], &[0.5]).unwrap();
        assert!((l - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        assert!((l - (-1.3863)).abs() < 1e-4);

        // perfect discrimination saturates at the clamp
        let l = disc_loss(&[0.0], &[1.0]).unwrap();
        assert!((l - 2.0 * 1e-7f64.ln()).abs() < 1e-9);
        assert!((l - (-32.24)).abs() < 0.01);

        // poor discriminator: fake scored high, real scored low
        let l = disc_loss(&[0.9], &[0.1]).unwrap();
        assert!((l - (0.9f64.ln() + 0.9f64.ln())).abs() < 1e-12);
        assert!((l - (-0.2107)).abs() < 1e-4);

        assert!(matches!(disc_loss(&[], &[0.5]), Err(RewardError::EmptyBatch)));
    }

    #[test]
    fn update_with_zero_learning_rate_changes_nothing() {
        let mut d = Discriminator::new(4, 8, 7);
        let before = d.net().params().to_vec();
        let mut adam = Adam::new(0.0, DISC_BETA1, DISC_BETA2, d.net().param_count());
        disc_update(&mut d, &[gray(4, 1.0)], &[gray(4, 0.0)], &mut adam).unwrap();
        assert_eq!(d.net().params(), before.as_slice());
    }

    /// Separable toy data: all-white real images against all-black fakes.
    /// The paper-default optimizer must reach high accuracy quickly, and the
    /// loss must fall over 10-step windows.
    #[test]
    fn separable_batches_converge_and_loss_decreases() {
        // realistic shape: 8x8x3 images into the default width
        let dim = 192;
        let mut d = Discriminator::new(dim, DISC_WIDTH, 11);
        let mut adam = Adam::new(DISC_LR, DISC_BETA1, DISC_BETA2, d.net().param_count());
        let real: Vec<Image> = (0..8).map(|_| gray(dim, 1.0)).collect();
        let fake: Vec<Image> = (0..8).map(|_| gray(dim, 0.0)).collect();
        let mut losses = Vec::new();
        let mut last_acc = 0.0;
        for _ in 0..200 {
            let stats = disc_update(&mut d, &real, &fake, &mut adam).unwrap();
            losses.push(stats.loss);
            last_acc = stats.accuracy;
        }
        assert!(last_acc >= 0.95, "accuracy {last_acc}");
        for i in 0..losses.len() - 10 {
            assert!(
                losses[i + 10] < losses[i],
                "loss failed to decrease: {} -> {} at step {i}",
                losses[i],
                losses[i + 10]
            );
        }
    }

    /// Identical real and fake distributions: accuracy hovers at chance.
    #[test]
    fn indistinguishable_batches_stay_near_chance() {
        let mut d = Discriminator::new(4, 16, 13);
        let mut adam = Adam::new(DISC_LR, DISC_BETA1, DISC_BETA2, d.net().param_count());
        let mut rng = stream_rng(17, &[1]);
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Image> {
            (0..64)
                .map(|_| image(&[rng.gen(), rng.gen(), rng.gen(), rng.gen()]))
                .collect()
        };
        let mut accs = Vec::new();
        for _ in 0..100 {
            let real = draw(&mut rng);
            let fake = draw(&mut rng);
            accs.push(disc_update(&mut d, &real, &fake, &mut adam).unwrap().accuracy);
        }
        let tail = &accs[80..];
        let mean: f64 = tail.iter().sum::<f64>() / tail.len() as f64;
        assert!((mean - 0.5).abs() < 0.05, "tail accuracy {mean}");
    }

    #[test]
    fn discriminator_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("disc.ckpt");
        let d = Discriminator::new(5, 8, 19);
        d.save(&path).unwrap();
        let loaded = Discriminator::load(&path).unwrap();
        let im = image(&[0.1, 0.9, 0.4, 0.6, 0.5]);
        assert_eq!(d.score(&im).unwrap(), loaded.score(&im).unwrap());
    }

    #[test]
    fn fid_reward_anchors() {
        let reference = GaussianStats { mean: vec![0.0], cov: vec![0.7], count: 2000 };
        // identical stats → reward 0 through the distance path
        assert_eq!(frechet_distance(&reference, &reference).unwrap(), 0.0);

        // unit mean shift at equal covariance → reward −1
        let shifted = GaussianStats { mean: vec![1.0], cov: vec![0.7], count: 2000 };
        let d2 = frechet_distance(&shifted, &reference).unwrap();
        assert!((d2 - 1.0).abs() < 1e-9);

        // the guard on thin references
        let thin = GaussianStats { mean: vec![0.0], cov: vec![1.0], count: 10 };
        let e = Embedder::new(4, 1);
        let images: Vec<Image> = (0..4).map(|i| gray(4, i as f64 / 4.0)).collect();
        assert!(matches!(
            fid_batch_reward(&images, &e, &thin),
            Err(RewardError::ReferenceTooSmall { .. })
        ));
    }

    #[test]
    fn fid_reward_is_order_invariant_and_broadcast() {
        let e = Embedder::new(4, 23);
        let mut rng = stream_rng(29, &[2]);
        let mut images: Vec<Image> =
            (0..32).map(|_| image(&[rng.gen(), rng.gen(), rng.gen(), rng.gen()])).collect();
        let reference = {
            let refs: Vec<Image> = (0..1500)
                .map(|_| image(&[rng.gen(), rng.gen(), rng.gen(), rng.gen()]))
                .collect();
            let mut s = fit_stats(&e, &refs).unwrap();
            s.count = refs.len();
            s
        };
        let a = fid_batch_reward(&images, &e, &reference).unwrap();
        images.reverse();
        let b = fid_batch_reward(&images, &e, &reference).unwrap();
        // identical up to summation-order roundoff in the moment estimates
        assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{a} vs {b}");
        assert!(a <= 0.0);

        let source = RewardSource::FidBatch { embedder: e, reference };
        let scores = source.score_batch(&images).unwrap();
        assert!(scores.iter().all(|&s| s == b));
        assert_eq!(source.kind(), RewardKind::FidBatch);
    }

    #[test]
    fn closure_scorer_and_brightness_hook() {
        let constant = |_: &Image| Ok(0.3);
        let source = RewardSource::External(Box::new(constant));
        let scores = source.score_batch(&[gray(3, 0.0), gray(3, 1.0)]).unwrap();
        assert_eq!(scores, vec![0.3, 0.3]);

        let brightness =
            |im: &Image| Ok(im.data.iter().sum::<f64>() / im.data.len() as f64);
        let dark = brightness.score(&gray(3, 0.0)).unwrap();
        let bright = brightness.score(&gray(3, 1.0)).unwrap();
        assert_eq!(bright, 1.0);
        assert!(bright > dark);
    }

    #[test]
    fn subprocess_scorer_protocol_and_failure() {
        let hook = SubprocessScorer {
            program: "sh".into(),
            args: vec!["-c".into(), "cat >/dev/null && echo 0.3".into()],
        };
        let s = hook.score(&gray(4, 0.5)).unwrap();
        assert_eq!(s, 0.3);

        let crash = SubprocessScorer {
            program: "sh".into(),
            args: vec!["-c".into(), "exit 3".into()],
        };
        assert!(matches!(
            crash.score(&gray(4, 0.5)),
            Err(RewardError::ScorerUnavailable(_))
        ));

        let garbage = SubprocessScorer {
            program: "sh".into(),
            args: vec!["-c".into(), "cat >/dev/null && echo not-a-number".into()],
        };
        assert!(crash.score(&gray(4, 0.5)).is_err());
        assert!(garbage.score(&gray(4, 0.5)).is_err());
    }
}
