//! Table and ablation runs over a model zoo and a set of scenarios.

use std::path::Path;

use rayon::prelude::*;

use super::config::BenchConfig;
use super::report::{AblationReport, Micros, PairedEffect, ScoreReport, ScoreRow, SeedRow};
use super::{derive_toy_threshold, stats, toy_scenario, zoo_model, Scenario};
use crate::attack::{digital_scores, run_attack, top, AttackConfig, Mode, Scale};
use crate::channelsim::{physical_score, ChannelSimConfig};
use crate::embedder::{EmbeddingModel, FeatureVector, Variant};
use crate::error::{Error, Result};
use crate::imaging::{load_image, load_mask, Image, ViewSet};
use crate::rng::RngStream;

/// Seed of the identity population used to derive thresholds.
pub const THRESHOLD_SEED: u64 = 7;
pub const BOOTSTRAP_RESAMPLES: usize = 4000;

#[derive(Debug, Clone)]
pub struct Zoo {
    pub variants: Vec<Variant>,
    pub models: Vec<EmbeddingModel>,
    pub thresholds: Vec<f64>,
}

impl Zoo {
    /// Builds every model of `cfg.zoo`, deriving thresholds on `size × size`
    /// synthetic faces where none are configured.
    pub fn build(cfg: &BenchConfig) -> Result<Self> {
        let spec = &cfg.zoo;
        let models = spec
            .variants
            .par_iter()
            .map(|&v| zoo_model(spec.seed, v))
            .collect::<Result<Vec<_>>>()?;
        let thresholds = if spec.thresholds.is_empty() {
            models
                .par_iter()
                .map(|m| Ok(derive_toy_threshold(m, spec.threshold_identities, THRESHOLD_SEED, cfg.bench.size)?.threshold))
                .collect::<Result<Vec<_>>>()?
        } else {
            spec.thresholds.clone()
        };
        Ok(Self {
            variants: spec.variants.clone(),
            models,
            thresholds,
        })
    }

    pub fn index(&self, v: Variant) -> Result<usize> {
        self.variants
            .iter()
            .position(|&x| x == v)
            .ok_or_else(|| Error::Config(format!("variant {v} is not in the zoo")))
    }

    fn threshold_pairs(&self) -> Vec<(Variant, f64)> {
        self.variants.iter().copied().zip(self.thresholds.iter().copied()).collect()
    }
}

/// Adversary views of `dir`: every PNG, PPM or PGM file, in file-name order.
pub fn load_views(dir: &Path) -> Result<ViewSet> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("png" | "ppm" | "pgm")) {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::format(dir, "no PNG, PPM or PGM views"));
    }
    ViewSet::new(files.iter().map(load_image).collect::<Result<Vec<Image>>>()?)
}

/// Scenarios and their seeds: `n_seeds` synthetic pairs, or the configured
/// files repeated with a different attack seed each time.
pub fn scenarios(cfg: &BenchConfig) -> Result<Vec<(u64, Scenario)>> {
    let run = &cfg.bench;
    let seeds = (0..run.n_seeds as u64).map(|s| run.seed + s);
    match cfg.paths.inputs()? {
        Some((views, target, mask)) => {
            let scenario = Scenario {
                views: load_views(views)?,
                target: load_image(target)?,
                mask: load_mask(mask)?,
            };
            Ok(seeds.map(|s| (s, scenario.clone())).collect())
        }
        None => seeds.map(|s| Ok((s, toy_scenario(s, run.views, run.size)?))).collect(),
    }
}

/// Top digital and simulated-physical scores of one mask under one model.
/// The physical score is the best of `n_capture` captures of every view, so
/// an identity channel reproduces the digital score exactly.
#[allow(clippy::too_many_arguments)]
pub fn score_mask(
    adv: &Image,
    scenario: &Scenario,
    model: &EmbeddingModel,
    target: &FeatureVector,
    channel: &ChannelSimConfig,
    n_capture: usize,
    rng: &mut RngStream,
) -> Result<(f64, f64)> {
    let dig = top(&digital_scores(&scenario.views, &scenario.mask, adv, model, target)?);
    let mut phy = f64::NEG_INFINITY;
    for view in scenario.views.iter() {
        phy = phy.max(physical_score(adv, view, &scenario.mask, target, model, channel, n_capture, rng)?);
    }
    Ok((dig, phy))
}

/// Channel noise for one scenario and eval model; independent of the mode
/// and substitute so that compared cells see the same captures.
fn channel_rng(channel: &ChannelSimConfig, scenario_seed: u64, eval: usize) -> RngStream {
    RngStream::new(channel.seed).fork(scenario_seed).fork(eval as u64)
}

fn attack_config(cfg: &BenchConfig, mode: Mode, scale: Scale, scenario_seed: u64) -> AttackConfig {
    AttackConfig {
        mode,
        scale,
        seed: cfg.attack.seed.wrapping_add(scenario_seed),
        ..cfg.attack.clone()
    }
}

fn attack_mask(
    cfg: &BenchConfig,
    zoo: &Zoo,
    substitute: usize,
    mode: Mode,
    scale: Scale,
    seed: u64,
    scenario: &Scenario,
) -> Result<Image> {
    let acfg = attack_config(cfg, mode, scale, seed);
    let models = std::slice::from_ref(&zoo.models[substitute]);
    Ok(run_attack(&scenario.views, &scenario.target, &scenario.mask, models, &acfg)?.mask)
}

/// Scores of `adv` on zoo model `eval` through the configured channel.
fn score_on(cfg: &BenchConfig, zoo: &Zoo, eval: usize, seed: u64, scenario: &Scenario, adv: &Image) -> Result<(f64, f64)> {
    let model = &zoo.models[eval];
    let target = model.embed(&scenario.target)?;
    let mut rng = channel_rng(&cfg.channel, seed, eval);
    score_mask(adv, scenario, model, &target, &cfg.channel, cfg.bench.n_capture, &mut rng)
}

fn mean_row(
    substitute: Variant,
    eval: Variant,
    mode: Mode,
    scale: Scale,
    scores: &[(f64, f64)],
    threshold: f64,
) -> Result<ScoreRow> {
    let dig: Vec<f64> = scores.iter().map(|s| s.0).collect();
    let phy: Vec<f64> = scores.iter().map(|s| s.1).collect();
    Ok(ScoreRow {
        substitute,
        eval,
        mode,
        scale,
        dig: Micros::from_f64(stats::mean(&dig)),
        phy: Micros::from_f64(stats::mean(&phy)),
        asr: stats::compute_asr(&phy, threshold)?,
    })
}

/// A table run that stopped at a failing cell; `partial` holds every row
/// whose cells all completed.
#[derive(Debug, thiserror::Error)]
#[error("{source}")]
pub struct Aborted {
    pub partial: ScoreReport,
    #[source]
    pub source: Error,
}

/// For each scale and substitute, attacks every scenario in
/// `cfg.attack.mode` and scores the mask on every zoo model. Rows are means
/// over scenarios.
pub fn run_table(cfg: &BenchConfig, zoo: &Zoo) -> std::result::Result<ScoreReport, Box<Aborted>> {
    let abort = |source: Error, partial: ScoreReport| Box::new(Aborted { partial, source });
    let mut report = ScoreReport {
        rows: Vec::new(),
        thresholds: zoo.threshold_pairs(),
        config_echo: cfg.echo(),
    };
    let scenarios = match scenarios(cfg) {
        Ok(s) => s,
        Err(e) => return Err(abort(e, report)),
    };
    let mut groups = Vec::new();
    for &scale in &cfg.bench.scales {
        for &sub in &cfg.zoo.substitutes {
            match zoo.index(sub) {
                Ok(i) => groups.push((scale, i)),
                Err(e) => return Err(abort(e, report)),
            }
        }
    }
    let evals: Vec<usize> = (0..zoo.models.len()).collect();
    let jobs: Vec<(usize, usize)> = (0..groups.len())
        .flat_map(|g| (0..scenarios.len()).map(move |s| (g, s)))
        .collect();
    let results: Vec<Result<Vec<(f64, f64)>>> = jobs
        .par_iter()
        .map(|&(g, s)| {
            let (scale, sub) = groups[g];
            let (seed, scenario) = &scenarios[s];
            let adv = attack_mask(cfg, zoo, sub, cfg.attack.mode, scale, *seed, scenario)?;
            evals.iter().map(|&e| score_on(cfg, zoo, e, *seed, scenario, &adv)).collect()
        })
        .collect();

    let mut results = results.into_iter();
    let mut failure = None;
    for &(scale, sub) in &groups {
        let group: Vec<Result<Vec<(f64, f64)>>> = results.by_ref().take(scenarios.len()).collect();
        if failure.is_some() {
            continue;
        }
        let cells = match group.into_iter().collect::<Result<Vec<_>>>() {
            Ok(c) => c,
            Err(e) => {
                failure = Some(e);
                continue;
            }
        };
        for &e in &evals {
            let scores: Vec<(f64, f64)> = cells.iter().map(|c| c[e]).collect();
            match mean_row(zoo.variants[sub], zoo.variants[e], cfg.attack.mode, scale, &scores, zoo.thresholds[e]) {
                Ok(row) => report.rows.push(row),
                Err(err) => failure = Some(err),
            }
        }
    }
    match failure {
        Some(e) => Err(abort(e, report)),
        None => Ok(report),
    }
}

/// Modes compared by the ablation, baseline first.
pub const ABLATION_MODES: [Mode; 4] = [Mode::Baseline, Mode::ResAware, Mode::ColorAware, Mode::Full];

/// Attacks every scenario in each ablation mode with the first substitute
/// and scores it white-box. Every mode sees the same scenarios, attack
/// seeds and channel noise.
pub fn run_ablation(cfg: &BenchConfig, zoo: &Zoo) -> Result<AblationReport> {
    let sub = zoo.index(cfg.zoo.substitutes[0])?;
    let scale = cfg.attack.scale;
    let scenarios = scenarios(cfg)?;
    let pooling = ChannelSimConfig::pooling_only(cfg.channel.resolution_ratio);
    let jobs: Vec<(usize, Mode)> = (0..scenarios.len())
        .flat_map(|s| ABLATION_MODES.map(|m| (s, m)))
        .collect();
    let seeds = jobs
        .par_iter()
        .map(|&(s, mode)| {
            let (seed, scenario) = &scenarios[s];
            let adv = attack_mask(cfg, zoo, sub, mode, scale, *seed, scenario)?;
            let (dig, phy) = score_on(cfg, zoo, sub, *seed, scenario, &adv)?;
            let model = &zoo.models[sub];
            let target = model.embed(&scenario.target)?;
            // Pooling is deterministic; the rng is never drawn.
            let mut rng = RngStream::new(0);
            let (_, pooled) = score_mask(&adv, scenario, model, &target, &pooling, 1, &mut rng)?;
            Ok(SeedRow {
                seed: *seed,
                mode,
                dig: Micros::from_f64(dig),
                phy: Micros::from_f64(phy),
                pooled: Micros::from_f64(pooled),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let variant = zoo.variants[sub];
    let mut summary = ScoreReport {
        rows: Vec::new(),
        thresholds: vec![(variant, zoo.thresholds[sub])],
        config_echo: cfg.echo(),
    };
    let of = |mode: Mode| seeds.iter().filter(move |r| r.mode == mode);
    for mode in ABLATION_MODES {
        let scores: Vec<(f64, f64)> = of(mode).map(|r| (r.dig.to_f64(), r.phy.to_f64())).collect();
        summary
            .rows
            .push(mean_row(variant, variant, mode, scale, &scores, zoo.thresholds[sub])?);
    }
    let mut effects = Vec::new();
    for (k, mode) in ABLATION_MODES.into_iter().enumerate().skip(1) {
        let paired = |f: fn(&SeedRow) -> Micros| -> Vec<f64> {
            of(Mode::Baseline).zip(of(mode)).map(|(b, m)| (f(b) - f(m)).to_f64()).collect()
        };
        let diffs = paired(SeedRow::diff);
        let drops = paired(SeedRow::pool_drop);
        effects.push(PairedEffect {
            mode,
            diff_reduction: stats::mean(&diffs),
            diff_reduction_ci: stats::bootstrap_mean_ci(&diffs, BOOTSTRAP_RESAMPLES, 0.95, k as u64)?,
            pool_drop_reduction: stats::mean(&drops),
            pool_drop_reduction_ci: stats::bootstrap_mean_ci(&drops, BOOTSTRAP_RESAMPLES, 0.95, k as u64)?,
        });
    }
    Ok(AblationReport {
        summary,
        seeds,
        effects,
    })
}
