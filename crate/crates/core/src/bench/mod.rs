//! Experiment harness: synthetic scenarios, toy verification thresholds,
//! score tables and the ablation study.

pub mod cli;
pub mod config;
pub mod report;
pub mod run;
pub mod stats;
pub mod synth;

use rayon::prelude::*;

use crate::embedder::{build_reference_model, cosine, EmbeddingModel, Variant};
use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, Image, ViewSet};
use crate::rng::RngStream;

use synth::{face_mask, FaceParams, ViewJitter};

/// Population seed of the faces used to fit zoo model heads.
pub const CALIBRATION_SEED: u64 = 0xCA11_B8A7;
/// Number of calibration faces per zoo model.
pub const CALIBRATION_FACES: usize = 1000;
/// Whitening ridge, relative to the mean feature variance.
pub const WHITENING_RIDGE: f64 = 1e-4;

/// A reference embedder whose projection head is whitened on the synthetic
/// face population, so impostor similarities spread around zero.
pub fn zoo_model(seed: u64, variant: Variant) -> Result<EmbeddingModel> {
    let mut model = build_reference_model(seed, variant);
    let size = model.input_size;
    let faces = synth::synth_faces(CALIBRATION_SEED, CALIBRATION_FACES, size, size);
    model.fit_whitening_head(&faces, WHITENING_RIDGE, seed)?;
    Ok(model)
}

/// Adversary views, target face and projection region for one trial.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub views: ViewSet,
    pub target: Image,
    pub mask: BinaryMask,
}

/// A fresh adversary/target pair of synthetic identities with `k` jittered
/// adversary views.
pub fn toy_scenario(seed: u64, k: usize, size: usize) -> Result<Scenario> {
    let root = RngStream::new(seed);
    let adversary = FaceParams::sample(&mut root.fork(1));
    let target = FaceParams::sample(&mut root.fork(2));
    let mut jitter = root.fork(3);
    Ok(Scenario {
        views: ViewSet::new(synth::synth_views(&adversary, k, size, size, &mut jitter))?,
        target: target.render(size, size, ViewJitter::NONE),
        mask: face_mask(size, size),
    })
}

/// Impostor and genuine similarity statistics of a model on the synthetic
/// population.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyThreshold {
    /// Impostor mean plus three standard deviations.
    pub threshold: f64,
    pub impostor_mean: f64,
    pub impostor_std: f64,
    pub genuine_mean: f64,
}

/// Verification threshold from `n_identities` synthetic identities:
/// impostor pairs are all pairs of distinct canonical faces, genuine pairs
/// are two jittered views of the same identity.
pub fn derive_toy_threshold(model: &EmbeddingModel, n_identities: usize, seed: u64, size: usize) -> Result<ToyThreshold> {
    if n_identities < 50 {
        return Err(Error::InvalidArgument(format!(
            "threshold needs at least 50 identities, got {n_identities}"
        )));
    }
    let root = RngStream::new(seed);
    let per_identity: Vec<_> = (0..n_identities)
        .into_par_iter()
        .map(|i| -> Result<_> {
            let face = FaceParams::sample(&mut root.fork(2 * i as u64));
            let mut jitter = root.fork(2 * i as u64 + 1);
            let canonical = model.embed(&face.render(size, size, ViewJitter::NONE))?;
            let views = synth::synth_views(&face, 2, size, size, &mut jitter);
            let genuine = cosine(&model.embed(&views[0])?, &model.embed(&views[1])?)?;
            Ok((canonical, genuine))
        })
        .collect::<Result<_>>()?;
    let mut impostor = Vec::new();
    for i in 0..n_identities {
        for j in i + 1..n_identities {
            impostor.push(cosine(&per_identity[i].0, &per_identity[j].0)?);
        }
    }
    let genuine: Vec<f64> = per_identity.iter().map(|p| p.1).collect();
    let impostor_mean = stats::mean(&impostor);
    let impostor_std = stats::std_dev(&impostor);
    let threshold = impostor_mean + 3.0 * impostor_std;
    if !(impostor_std > 0.0) || !(threshold > -1.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "degenerate impostor distribution (mean {impostor_mean}, std {impostor_std})"
        )));
    }
    Ok(ToyThreshold {
        threshold,
        impostor_mean,
        impostor_std,
        genuine_mean: stats::mean(&genuine),
    })
}
