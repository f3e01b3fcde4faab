//! The five pipeline commands. Each takes a validated [`RunConfig`], reads
//! and writes only inside the configured paths, and fails with a typed
//! [`CliError`] before producing partial output whenever the request itself
//! is bad.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde_json::json;

use crate::config::{PolicyMode, RewardChoice, RunConfig};
use crate::svg::{line_chart, Series};
use crate::CliError;
use adanat_core::backbone::{mlm_pretrain, BackboneError, MaskedPredictor, PretrainConfig};
use adanat_core::eval::{
    diversity_metric, exact_divergence, fit_stats, frechet_distance, load_reference,
    save_reference, Embedder, ReferenceStats,
};
use adanat_core::policy::{LearnedProvider, PolicyNet};
use adanat_core::ppo::{update_loop, EvalHook, LoopLog, PpoError};
use adanat_core::reward::{
    Discriminator, RewardSource, SubprocessScorer, MIN_REFERENCE_COUNT,
};
use adanat_core::rng::stream_rng;
use adanat_core::sampler::{generate, PolicyProvider, StaticProvider, Trajectory};
use adanat_core::token_world::{
    decode_tokens, sample_world, Codebook, Image, TokenSequence, WorldSpec, CHANNELS, PATCH,
};

/// Largest enumerable state space the evaluation report computes exact
/// divergences for.
pub const MAX_EXACT_STATES: u128 = 1 << 16;
/// Image count cap for the O(n²) pairwise diversity metric.
pub const DIVERSITY_CAP: usize = 2048;

// seed-stream tags, disjoint from everything the core library uses
const TAG_REPORT: u64 = 51;
const TAG_SAMPLE: u64 = 53;
const TAG_REFERENCE: u64 = 61;
const TAG_HOOK: u64 = 71;

fn other<E: std::error::Error + Send + Sync + 'static>(e: E) -> CliError {
    CliError::Other(anyhow::Error::new(e))
}

fn map_ppo(e: PpoError) -> CliError {
    match e {
        PpoError::Diverged { .. } | PpoError::AllDropped { .. } => {
            CliError::Numeric(e.to_string())
        }
        e => other(e),
    }
}

/// Flat pixel count of decoded images for this world.
pub fn image_dim(world: &WorldSpec) -> usize {
    world.grid_height * PATCH * world.grid_width * PATCH * CHANNELS
}

fn load_world(cfg: &RunConfig) -> Result<WorldSpec, CliError> {
    let path = cfg.resolve(&cfg.world.spec_path);
    if !path.exists() {
        return Err(CliError::Missing(format!(
            "world spec {} (run pretrain first)",
            path.display()
        )));
    }
    WorldSpec::load(&path)
        .map_err(|e| CliError::Config(format!("world spec {}: {e}", path.display())))
}

fn load_backbone(cfg: &RunConfig, world: &WorldSpec) -> Result<MaskedPredictor, CliError> {
    let path = cfg.resolve(&cfg.backbone.checkpoint);
    if !path.exists() {
        return Err(CliError::Missing(format!(
            "backbone checkpoint {} (run pretrain first)",
            path.display()
        )));
    }
    MaskedPredictor::load(&path, world)
        .map_err(|e| CliError::Config(format!("backbone checkpoint {}: {e}", path.display())))
}

fn load_policy_net(cfg: &RunConfig) -> Result<PolicyNet, CliError> {
    let path = cfg.resolve(&cfg.policy.checkpoint);
    if !path.exists() {
        return Err(CliError::Missing(format!(
            "policy checkpoint {} (run train first)",
            path.display()
        )));
    }
    PolicyNet::load(&path)
        .map_err(|e| CliError::Config(format!("policy checkpoint {}: {e}", path.display())))
}

fn reference_path(cfg: &RunConfig) -> PathBuf {
    match &cfg.reward.reference_stats {
        Some(p) => cfg.resolve(p),
        None => cfg.output.dir.join("ref_stats.ckpt"),
    }
}

/// Load the reference statistics, or build and cache them from fresh world
/// samples when the file does not exist yet.
fn ensure_reference(
    cfg: &RunConfig,
    world: &WorldSpec,
    codebook: &Codebook,
    embedder: &Embedder,
) -> Result<ReferenceStats, CliError> {
    let path = reference_path(cfg);
    if path.exists() {
        return load_checked_reference(&path, embedder);
    }
    let n = cfg.eval.reference_samples;
    let n_classes = world.n_classes.max(1) as u32;
    let seed = cfg.output.seed;
    let images: Vec<Image> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, &[TAG_REFERENCE, i as u64]);
            let class = rng.gen_range(0..n_classes);
            let tokens = sample_world(world, class, &mut rng)?;
            decode_tokens(&tokens, codebook)
        })
        .collect::<Result<_, _>>()
        .map_err(other)?;
    let stats = fit_stats(embedder, &images).map_err(other)?;
    let r = ReferenceStats {
        stats,
        embed_seed: embedder.seed(),
        embed_input_dim: embedder.input_dim(),
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    save_reference(&path, &r).map_err(other)?;
    println!("built reference statistics from {n} world samples: {}", path.display());
    Ok(r)
}

fn load_checked_reference(path: &Path, embedder: &Embedder) -> Result<ReferenceStats, CliError> {
    let r = load_reference(path)
        .map_err(|e| CliError::Config(format!("reference stats {}: {e}", path.display())))?;
    if r.embed_seed != embedder.seed() || r.embed_input_dim != embedder.input_dim() {
        return Err(CliError::Config(format!(
            "reference stats {} were computed under embedding seed {} / input {}, but this \
             run uses seed {} / input {}",
            path.display(),
            r.embed_seed,
            r.embed_input_dim,
            embedder.seed(),
            embedder.input_dim()
        )));
    }
    Ok(r)
}

fn write_config_dump(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(&cfg.output.dir)?;
    let path = cfg.output.dir.join("config_resolved.toml");
    std::fs::write(&path, cfg.dump())?;
    Ok(path)
}

/// Deterministic-policy rollouts: one seeded stream per image, classes
/// round-robin unless fixed.
fn rollout(
    pred: &MaskedPredictor,
    provider: &(dyn PolicyProvider + Sync),
    horizon: usize,
    n: usize,
    fixed_class: Option<u32>,
    seed: u64,
    tag: &[u64],
) -> Result<Vec<Trajectory>, CliError> {
    let n_classes = pred.n_classes().max(1) as u32;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut tags = tag.to_vec();
            tags.push(i as u64);
            let mut rng = stream_rng(seed, &tags);
            let class = fixed_class.unwrap_or(i as u32 % n_classes);
            generate(pred, provider, horizon, Some(class), &mut rng)
                .map_err(|e| CliError::Numeric(e.to_string()))
        })
        .collect()
}

fn decode_all(traj: &[Trajectory], codebook: &Codebook) -> Result<Vec<Image>, CliError> {
    traj.iter().map(|t| decode_tokens(&t.output, codebook).map_err(other)).collect()
}

/// Metric block shared by train, eval and ablate: feature-space Frechet
/// distance to the reference, capped pairwise diversity, and exact TV/KL
/// when the world is small enough to enumerate.
fn metric_report(
    world: &WorldSpec,
    codebook: &Codebook,
    embedder: &Embedder,
    reference: &ReferenceStats,
    sequences: &[TokenSequence],
) -> Result<serde_json::Value, CliError> {
    let images: Vec<Image> = sequences
        .par_iter()
        .map(|s| decode_tokens(s, codebook))
        .collect::<Result<_, _>>()
        .map_err(other)?;
    let stats = fit_stats(embedder, &images).map_err(other)?;
    let toy_fid = frechet_distance(&stats, &reference.stats).map_err(other)?;
    let div_n = images.len().min(DIVERSITY_CAP);
    let diversity = diversity_metric(embedder, &images[..div_n]).map_err(other)?;
    let enumerable = world.state_space().map(|s| s <= MAX_EXACT_STATES).unwrap_or(false);
    let (tv, kl) = if enumerable {
        let d = exact_divergence(sequences, world).map_err(other)?;
        (Some(d.tv), Some(d.kl))
    } else {
        (None, None)
    };
    Ok(json!({
        "samples": sequences.len(),
        "toy_fid": toy_fid,
        "diversity": diversity,
        "diversity_sample_count": div_n,
        "tv": tv,
        "kl": kl,
    }))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Other(anyhow::Error::new(e)))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Create the world file if needed, pre-train the masked-token predictor on
/// it, and store the frozen checkpoint plus the loss curve.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<(), CliError> {
    write_config_dump(cfg)?;
    let world_path = cfg.resolve(&cfg.world.spec_path);
    let world = if world_path.exists() {
        WorldSpec::load(&world_path)
            .map_err(|e| CliError::Config(format!("world spec {}: {e}", world_path.display())))?
    } else {
        let world = match cfg.world.kind.as_str() {
            "tiny" => WorldSpec::tiny_enumerable(cfg.output.seed),
            _ => WorldSpec::desk_default(cfg.output.seed),
        };
        if let Some(dir) = world_path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        world.save(&world_path).map_err(other)?;
        println!("created {} world: {}", cfg.world.kind, world_path.display());
        world
    };

    let pcfg = PretrainConfig {
        steps: cfg.backbone.steps,
        batch: cfg.backbone.batch,
        lr: cfg.backbone.lr,
        width: cfg.backbone.width,
        class_dropout: cfg.backbone.class_dropout,
        seed: cfg.output.seed,
    };
    let (pred, losses) = mlm_pretrain(&world, &pcfg).map_err(|e| match e {
        BackboneError::Diverged { .. } => CliError::Numeric(e.to_string()),
        e => other(e),
    })?;

    let ckpt = cfg.resolve(&cfg.backbone.checkpoint);
    if let Some(dir) = ckpt.parent() {
        std::fs::create_dir_all(dir)?;
    }
    pred.save(&ckpt).map_err(other)?;

    let mut csv = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    std::fs::write(cfg.output.dir.join("pretrain_loss.csv"), csv)?;
    let series = [Series {
        name: "loss".into(),
        points: losses.iter().enumerate().map(|(i, &l)| (i as f64, l)).collect(),
    }];
    line_chart(
        "masked-token pre-training",
        "step",
        "cross-entropy",
        &series,
        &cfg.output.dir.join("pretrain_loss.svg"),
    )?;
    println!(
        "pre-trained predictor on a {}x{} grid over {} codes ({} steps, final loss {:.4}): {}",
        world.grid_height,
        world.grid_width,
        world.codebook_size,
        losses.len(),
        losses.last().copied().unwrap_or(f64::NAN),
        ckpt.display()
    );
    Ok(())
}

fn build_reward_source(
    cfg: &RunConfig,
    dim: usize,
    embedder: &Embedder,
    reference: &ReferenceStats,
) -> Result<RewardSource, CliError> {
    match cfg.reward.kind {
        RewardChoice::Adversarial => Ok(RewardSource::Adversarial(Discriminator::new(
            dim,
            cfg.reward.disc_width,
            cfg.output.seed,
        ))),
        RewardChoice::FidBatch => {
            if reference.stats.count < MIN_REFERENCE_COUNT {
                return Err(CliError::Config(format!(
                    "the batch-statistical reward needs at least {MIN_REFERENCE_COUNT} \
                     reference samples, got {}; raise eval.reference_samples",
                    reference.stats.count
                )));
            }
            Ok(RewardSource::FidBatch {
                embedder: embedder.clone(),
                reference: reference.stats.clone(),
            })
        }
        RewardChoice::External => {
            let mut parts = cfg.reward.external_cmd.iter();
            let program = parts.next().expect("validated non-empty").clone();
            Ok(RewardSource::External(Box::new(SubprocessScorer {
                program,
                args: parts.cloned().collect(),
            })))
        }
    }
}

fn chart_logs(out: &Path, logs: &[LoopLog]) -> Result<(), CliError> {
    let pts = |f: &dyn Fn(&LoopLog) -> Option<f64>| -> Vec<(f64, f64)> {
        logs.iter().filter_map(|l| f(l).map(|v| (l.loop_idx as f64, v))).collect()
    };
    line_chart(
        "mean terminal reward",
        "loop",
        "reward",
        &[Series { name: "reward".into(), points: pts(&|l| Some(l.mean_reward)) }],
        &out.join("reward.svg"),
    )?;
    line_chart(
        "policy objective and value loss",
        "loop",
        "value",
        &[
            Series { name: "objective".into(), points: pts(&|l| Some(l.ppo_objective)) },
            Series { name: "value loss".into(), points: pts(&|l| Some(l.value_loss)) },
        ],
        &out.join("objective.svg"),
    )?;
    let acc = pts(&|l| l.disc_acc);
    if !acc.is_empty() {
        line_chart(
            "reward-model accuracy",
            "loop",
            "accuracy",
            &[Series { name: "accuracy".into(), points: acc }],
            &out.join("disc_acc.svg"),
        )?;
    }
    let fid = pts(&|l| l.toy_fid);
    if !fid.is_empty() {
        line_chart(
            "feature-space distance during training",
            "loop",
            "toy FID",
            &[Series { name: "toy FID".into(), points: fid }],
            &out.join("toy_fid.svg"),
        )?;
    }
    Ok(())
}

/// Train the configured policy against the configured reward and write the
/// final evaluation report. Static modes skip training and only evaluate.
pub fn cmd_train(cfg: &RunConfig) -> Result<serde_json::Value, CliError> {
    write_config_dump(cfg)?;
    let world = load_world(cfg)?;
    let codebook = Codebook::standard(world.codebook_size);
    let pred = load_backbone(cfg, &world)?;
    let dim = image_dim(&world);
    let embedder = Embedder::new(dim, cfg.eval.embed_seed);
    let reference = ensure_reference(cfg, &world, &codebook, &embedder)?;
    let out = cfg.output.dir.clone();
    let seed = cfg.output.seed;
    let horizon = cfg.policy.horizon;

    let report = if cfg.policy.mode.is_learned() {
        let mut net = PolicyNet::new(
            pred.feature_dim(),
            horizon,
            cfg.policy.width,
            cfg.ppo.sigma_early,
            seed,
        );
        net.set_use_features(cfg.policy.mode == PolicyMode::Adaptive);
        let mut source = build_reward_source(cfg, dim, &embedder, &reference)?;
        let ppo_cfg = cfg.ppo.to_ppo_config(seed, Some(out.clone()));

        let every = cfg.eval.every;
        let hook_samples = cfg.eval.hook_samples;
        let mut hook = |loop_idx: usize, net: &PolicyNet, _batch: &[Image]| -> Option<f64> {
            if every == 0 || (loop_idx + 1) % every != 0 {
                return None;
            }
            let provider = LearnedProvider { net, stochastic: false };
            let traj = rollout(
                &pred,
                &provider,
                net.horizon(),
                hook_samples,
                None,
                seed,
                &[TAG_HOOK, loop_idx as u64],
            )
            .ok()?;
            let images = decode_all(&traj, &codebook).ok()?;
            let stats = fit_stats(&embedder, &images).ok()?;
            frechet_distance(&stats, &reference.stats).ok()
        };
        let hook_ref: Option<EvalHook> = Some(&mut hook);

        println!(
            "training {} policy against {} reward for {} loops (batch {})",
            cfg.policy.mode.name(),
            cfg.reward.kind.name(),
            cfg.ppo.loops,
            cfg.ppo.batch_size
        );
        let logs =
            update_loop(&mut net, &pred, &world, &codebook, &mut source, &ppo_cfg, hook_ref)
                .map_err(map_ppo)?;
        net.save(&cfg.resolve(&cfg.policy.checkpoint)).map_err(other)?;
        chart_logs(&out, &logs)?;

        let provider = LearnedProvider { net: &net, stochastic: false };
        let traj = rollout(
            &pred,
            &provider,
            net.horizon(),
            cfg.eval.train_samples,
            None,
            seed,
            &[TAG_REPORT],
        )?;
        let sequences: Vec<TokenSequence> = traj.into_iter().map(|t| t.output).collect();
        let mut report = metric_report(&world, &codebook, &embedder, &reference, &sequences)?;
        let tail = logs.len().saturating_sub(10);
        let final_reward =
            logs[tail..].iter().map(|l| l.mean_reward).sum::<f64>() / (logs.len() - tail) as f64;
        let dropped: usize = logs.iter().map(|l| l.dropped).sum();
        let obj = report.as_object_mut().expect("metric report is an object");
        obj.insert("mode".into(), json!(cfg.policy.mode.name()));
        obj.insert("reward".into(), json!(cfg.reward.kind.name()));
        obj.insert("loops".into(), json!(logs.len()));
        obj.insert("final_mean_reward".into(), json!(final_reward));
        obj.insert("dropped_trajectories".into(), json!(dropped));
        obj.insert("seed".into(), json!(seed));
        report
    } else {
        println!(
            "{} policy has no trainable parameters; evaluating the fixed schedule",
            cfg.policy.mode.name()
        );
        let provider = StaticProvider::new(cfg.schedule_config());
        let traj =
            rollout(&pred, &provider, horizon, cfg.eval.train_samples, None, seed, &[TAG_REPORT])?;
        let sequences: Vec<TokenSequence> = traj.into_iter().map(|t| t.output).collect();
        let mut report = metric_report(&world, &codebook, &embedder, &reference, &sequences)?;
        let obj = report.as_object_mut().expect("metric report is an object");
        obj.insert("mode".into(), json!(cfg.policy.mode.name()));
        obj.insert("reward".into(), json!(cfg.reward.kind.name()));
        obj.insert("loops".into(), json!(0));
        obj.insert("seed".into(), json!(seed));
        report
    };

    write_json(&out.join("report.json"), &report)?;
    println!("report: {}", serde_json::to_string(&report).expect("serializable"));
    Ok(report)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_png(image: &Image, path: &Path) -> Result<(), CliError> {
    if image.channels != CHANNELS {
        return Err(CliError::Config(format!(
            "PNG export expects {CHANNELS}-channel images, got {}",
            image.channels
        )));
    }
    let mut buf = image::RgbImage::new(image.width as u32, image.height as u32);
    for y in 0..image.height {
        for x in 0..image.width {
            let p = image.pixel(y, x);
            buf.put_pixel(x as u32, y as u32, image::Rgb([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])]));
        }
    }
    buf.save(path).map_err(|e| CliError::Other(anyhow::Error::new(e)))?;
    Ok(())
}

/// Provider selection for generation-time commands: learned modes load the
/// trained checkpoint, static modes evaluate the fixed schedule.
enum SamplePolicy {
    Learned(PolicyNet),
    Static(StaticProvider),
}

impl SamplePolicy {
    fn build(cfg: &RunConfig) -> Result<Self, CliError> {
        if cfg.policy.mode.is_learned() {
            Ok(SamplePolicy::Learned(load_policy_net(cfg)?))
        } else {
            Ok(SamplePolicy::Static(StaticProvider::new(cfg.schedule_config())))
        }
    }

    fn horizon(&self, cfg: &RunConfig) -> usize {
        match self {
            SamplePolicy::Learned(net) => net.horizon(),
            SamplePolicy::Static(_) => cfg.policy.horizon,
        }
    }
}

/// Generate images with the trained (or static) policy at its deterministic
/// action mean, and record every per-step action.
pub fn cmd_sample(cfg: &RunConfig, n: usize, class: Option<u32>) -> Result<(), CliError> {
    let world = load_world(cfg)?;
    let codebook = Codebook::standard(world.codebook_size);
    let pred = load_backbone(cfg, &world)?;
    if let Some(c) = class {
        if c as usize >= world.n_classes {
            return Err(CliError::Config(format!(
                "class {c} out of range: the world has {} classes",
                world.n_classes
            )));
        }
    }
    let policy = SamplePolicy::build(cfg)?;
    let horizon = policy.horizon(cfg);
    let learned_provider;
    let provider: &(dyn PolicyProvider + Sync) = match &policy {
        SamplePolicy::Learned(net) => {
            learned_provider = LearnedProvider { net, stochastic: false };
            &learned_provider
        }
        SamplePolicy::Static(p) => p,
    };

    let dir = cfg.output.dir.join("samples");
    std::fs::create_dir_all(&dir)?;
    let trajectories =
        rollout(&pred, provider, horizon, n, class, cfg.output.seed, &[TAG_SAMPLE])?;

    let mut traces = std::fs::File::create(dir.join("traces.csv"))?;
    writeln!(traces, "sample,t,m,tau1,tau2,w,masked_after")?;
    let mut tokens = std::fs::File::create(dir.join("tokens.csv"))?;
    writeln!(tokens, "sample,class,tokens")?;
    for (i, traj) in trajectories.iter().enumerate() {
        let image = decode_tokens(&traj.output, &codebook).map_err(other)?;
        write_png(&image, &dir.join(format!("sample_{i:04}.png")))?;
        std::fs::write(dir.join(format!("sample_{i:04}.ppm")), image.to_ppm())?;
        for s in &traj.steps {
            writeln!(
                traces,
                "{i},{},{},{},{},{},{}",
                s.t, s.params.mask_ratio, s.params.tau1, s.params.tau2, s.params.guidance,
                s.masked_after
            )?;
        }
        let toks: Vec<String> = traj.output.tokens().iter().map(|t| t.to_string()).collect();
        writeln!(tokens, "{i},{},{}", traj.class.expect("class is always set"), toks.join(" "))?;
    }
    println!("wrote {n} samples to {}", dir.display());
    Ok(())
}

fn read_token_csv(path: &Path, world: &WorldSpec) -> Result<Vec<TokenSequence>, CliError> {
    let bad = |msg: String| CliError::Config(format!("{}: {msg}", path.display()));
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Missing(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.splitn(3, ',').collect();
        if fields.len() != 3 {
            return Err(bad(format!("line {}: expected sample,class,tokens", lineno + 1)));
        }
        let toks: Result<Vec<u32>, _> =
            fields[2].split_whitespace().map(|t| t.parse::<u32>()).collect();
        let toks = toks.map_err(|e| bad(format!("line {}: {e}", lineno + 1)))?;
        if toks.len() != world.n_tokens {
            return Err(bad(format!(
                "line {}: {} tokens, world has {}",
                lineno + 1,
                toks.len(),
                world.n_tokens
            )));
        }
        if let Some(&t) = toks.iter().find(|&&t| t as usize >= world.codebook_size) {
            return Err(bad(format!(
                "line {}: token {t} outside codebook of size {}",
                lineno + 1,
                world.codebook_size
            )));
        }
        out.push(TokenSequence::from_tokens(toks, world.grid_height, world.grid_width));
    }
    if out.is_empty() {
        return Err(bad("no samples".into()));
    }
    Ok(out)
}

/// Score samples against the reference statistics and, on enumerable
/// worlds, the exact sequence law. Reads a previous sample run when
/// `samples_dir` is given, otherwise generates fresh samples.
pub fn cmd_eval(
    cfg: &RunConfig,
    n: Option<usize>,
    samples_dir: Option<&Path>,
) -> Result<serde_json::Value, CliError> {
    let world = load_world(cfg)?;
    let codebook = Codebook::standard(world.codebook_size);
    let embedder = Embedder::new(image_dim(&world), cfg.eval.embed_seed);
    let ref_path = reference_path(cfg);
    if !ref_path.exists() {
        return Err(CliError::Missing(format!(
            "reference statistics file {} (run train to build it)",
            ref_path.display()
        )));
    }
    let reference = load_checked_reference(&ref_path, &embedder)?;

    let (sequences, source) = match samples_dir {
        Some(dir) => {
            let path = dir.join("tokens.csv");
            (read_token_csv(&path, &world)?, path.display().to_string())
        }
        None => {
            let pred = load_backbone(cfg, &world)?;
            let policy = SamplePolicy::build(cfg)?;
            let horizon = policy.horizon(cfg);
            let learned_provider;
            let provider: &(dyn PolicyProvider + Sync) = match &policy {
                SamplePolicy::Learned(net) => {
                    learned_provider = LearnedProvider { net, stochastic: false };
                    &learned_provider
                }
                SamplePolicy::Static(p) => p,
            };
            let count = n.unwrap_or(cfg.eval.final_samples);
            let traj =
                rollout(&pred, provider, horizon, count, None, cfg.output.seed, &[TAG_REPORT])?;
            (
                traj.into_iter().map(|t| t.output).collect(),
                format!("{} generated samples", count),
            )
        }
    };

    let mut report = metric_report(&world, &codebook, &embedder, &reference, &sequences)?;
    let obj = report.as_object_mut().expect("metric report is an object");
    obj.insert("mode".into(), json!(cfg.policy.mode.name()));
    obj.insert("source".into(), json!(source));
    obj.insert("seed".into(), json!(cfg.output.seed));
    std::fs::create_dir_all(&cfg.output.dir)?;
    write_json(&cfg.output.dir.join("eval_report.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
    Ok(report)
}

/// One ablation arm: a policy mode paired with a reward.
const ABLATION_ARMS: [(&str, PolicyMode, RewardChoice); 4] = [
    ("adaptive", PolicyMode::Adaptive, RewardChoice::Adversarial),
    ("learnable-non-adaptive", PolicyMode::LearnableNonAdaptive, RewardChoice::Adversarial),
    ("static-cosine", PolicyMode::StaticCosine, RewardChoice::Adversarial),
    ("fid-batch", PolicyMode::LearnableNonAdaptive, RewardChoice::FidBatch),
];

/// Run the policy-mode grid and the reward grid sequentially, sharing the
/// world, backbone and reference statistics, and tabulate the results.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<(), CliError> {
    let world = load_world(cfg)?;
    let codebook = Codebook::standard(world.codebook_size);
    load_backbone(cfg, &world)?;
    let embedder = Embedder::new(image_dim(&world), cfg.eval.embed_seed);
    ensure_reference(cfg, &world, &codebook, &embedder)?;

    // freeze shared artifact paths before redirecting per-arm output
    let world_abs = std::path::absolute(cfg.resolve(&cfg.world.spec_path))?;
    let backbone_abs = std::path::absolute(cfg.resolve(&cfg.backbone.checkpoint))?;
    let ref_abs = std::path::absolute(reference_path(cfg))?;

    let mut rows = Vec::new();
    for (name, mode, reward) in ABLATION_ARMS {
        let mut arm = cfg.clone();
        arm.world.spec_path = world_abs.clone();
        arm.backbone.checkpoint = backbone_abs.clone();
        arm.reward.reference_stats = Some(ref_abs.clone());
        arm.policy.mode = mode;
        arm.reward.kind = reward;
        arm.output.dir = cfg.output.dir.join("ablate").join(name);
        arm.validate()?;
        println!("=== ablation arm: {name} ===");
        let report = cmd_train(&arm)?;
        rows.push((name, report));
    }

    let field = |r: &serde_json::Value, k: &str| -> String {
        match &r[k] {
            serde_json::Value::Null => "-".to_string(),
            serde_json::Value::Number(v) => format!("{:.6}", v.as_f64().unwrap_or(f64::NAN)),
            v => v.to_string().trim_matches('"').to_string(),
        }
    };
    let mut csv = String::from("arm,mode,reward,toy_fid,diversity,tv,kl,final_mean_reward\n");
    let mut table = format!(
        "{:<24} {:<24} {:<12} {:>12} {:>12} {:>10}\n",
        "arm", "mode", "reward", "toy_fid", "diversity", "tv"
    );
    for (name, r) in &rows {
        csv.push_str(&format!(
            "{name},{},{},{},{},{},{},{}\n",
            field(r, "mode"),
            field(r, "reward"),
            field(r, "toy_fid"),
            field(r, "diversity"),
            field(r, "tv"),
            field(r, "kl"),
            field(r, "final_mean_reward"),
        ));
        table.push_str(&format!(
            "{:<24} {:<24} {:<12} {:>12} {:>12} {:>10}\n",
            name,
            field(r, "mode"),
            field(r, "reward"),
            field(r, "toy_fid"),
            field(r, "diversity"),
            field(r, "tv"),
        ));
    }
    let ablate_dir = cfg.output.dir.join("ablate");
    std::fs::create_dir_all(&ablate_dir)?;
    std::fs::write(ablate_dir.join("comparison.csv"), csv)?;
    print!("{table}");
    Ok(())
}
