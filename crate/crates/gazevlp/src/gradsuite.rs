//! Central finite-difference verification of every training objective and
//! of the full encoder, at toy dimensions, across many seeds. Used by the
//! `gradcheck` subcommand and the acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::NUM_OBSERVATIONS;
use crate::error::{Error, Result};
use crate::gaze::GazePrior;
use crate::loss::{
    class_balanced_focal, contrastive_loss, contrastive_loss_single_positive,
    build_positive_structure, cross_modal_cls_loss, gaze_loss, GazeBatch, GazeLossKind,
};
use crate::model::{BatchEntry, Model, ModelConfig};
use crate::synth::{generate, SyntheticSpec};
use crate::tensor::{gradcheck, Tensor};

const TOY_D: usize = 8;
const TOY_M: usize = 4;
const TOY_B: usize = 4;
const REL_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

pub struct SuiteOutcome {
    pub checks: usize,
    pub max_rel_err: f64,
    pub failures: Vec<String>,
    pub elapsed: std::time::Duration,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(data, shape).unwrap()
}

fn rand_prior(rng: &mut ChaCha8Rng, rows: usize, patches: usize) -> GazePrior {
    let mut matrix = Vec::with_capacity(rows * patches);
    for _ in 0..rows {
        let mut row: Vec<f64> = (0..patches)
            .map(|_| if rng.gen_bool(0.5) { rng.gen_range(0.1..1.0) } else { 0.0 })
            .collect();
        if row.iter().all(|v| *v == 0.0) {
            row[rng.gen_range(0..patches)] = 1.0;
        }
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= total);
        matrix.extend(row);
    }
    GazePrior {
        rows,
        patches,
        mask: matrix.iter().map(|v| *v != 0.0).collect(),
        matrix,
        kept_segments: (0..rows).collect(),
        dropped_segments: vec![],
    }
}

/// Check d(loss)/d(input) against central differences for one input slot,
/// holding the others fixed.
fn check_input<F>(name: &str, build: F, input: &Tensor, outcome: &mut SuiteOutcome)
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let wrapped = |x: &Tensor| -> crate::tensor::Result<Tensor> {
        build(x).map_err(|_| crate::tensor::TensorError::NonFinite("loss"))
    };
    match gradcheck::check(wrapped, input, FD_STEP) {
        Ok(err) => {
            outcome.checks += 1;
            outcome.max_rel_err = outcome.max_rel_err.max(err);
            if err > REL_TOL {
                outcome.failures.push(format!("{name}: rel err {err:.3e}"));
            }
        }
        Err(e) => outcome.failures.push(format!("{name}: {e}")),
    }
}

fn check_losses(seed: u64, outcome: &mut SuiteOutcome) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vision = rand_tensor(&mut rng, &[TOY_B, TOY_D]);
    let reports = rand_tensor(&mut rng, &[TOY_B, TOY_D]);
    let log_scale = Tensor::from_vec(vec![rng.gen_range(0.5..2.5)], &[1]).unwrap();
    let ids: Vec<String> = vec!["a".into(), "a".into(), "b".into(), "c".into()];
    let pos = build_positive_structure(&ids).unwrap();

    check_input(
        &format!("contrastive_hybrid/vision seed {seed}"),
        |x| contrastive_loss(x, &reports, &pos, &log_scale),
        &vision,
        outcome,
    );
    check_input(
        &format!("contrastive_hybrid/report seed {seed}"),
        |x| contrastive_loss(&vision, x, &pos, &log_scale),
        &reports,
        outcome,
    );
    check_input(
        &format!("contrastive_hybrid/log_scale seed {seed}"),
        |x| contrastive_loss(&vision, &reports, &pos, x),
        &log_scale,
        outcome,
    );
    check_input(
        &format!("contrastive_single/vision seed {seed}"),
        |x| contrastive_loss_single_positive(x, &reports, &ids, &log_scale),
        &vision,
        outcome,
    );

    let logits_v = rand_tensor(&mut rng, &[TOY_B, NUM_OBSERVATIONS]).scale(3.0);
    let logits_t = rand_tensor(&mut rng, &[TOY_B, NUM_OBSERVATIONS]).scale(3.0);
    let labels: Vec<u8> = (0..TOY_B * NUM_OBSERVATIONS).map(|_| rng.gen_range(0..2)).collect();
    let counts: Vec<f64> = (0..NUM_OBSERVATIONS).map(|_| rng.gen_range(0..30) as f64).collect();
    check_input(
        &format!("class_balanced_focal seed {seed}"),
        |x| class_balanced_focal(x, &labels, &counts, 0.99, 2.0, 0.25),
        &logits_v,
        outcome,
    );
    check_input(
        &format!("cross_modal_cls/vision seed {seed}"),
        |x| cross_modal_cls_loss(x, &logits_t, &labels, &counts, 0.99, 2.0, 0.25),
        &logits_v,
        outcome,
    );
    check_input(
        &format!("cross_modal_cls/text seed {seed}"),
        |x| cross_modal_cls_loss(&logits_v, x, &labels, &counts, 0.99, 2.0, 0.25),
        &logits_t,
        outcome,
    );

    let patches = 16;
    let segments = 3;
    let prior = rand_prior(&mut rng, segments, patches);
    let transcript = rand_tensor(&mut rng, &[segments, TOY_D]);
    let patch_feats = rand_tensor(&mut rng, &[patches, TOY_D]);
    for kind in [GazeLossKind::Jsd, GazeLossKind::Mse, GazeLossKind::Iou, GazeLossKind::Mask] {
        let lambda = 0.8;
        check_input(
            &format!("gaze_{kind:?}/transcript seed {seed}"),
            |x| {
                let batch = GazeBatch {
                    prior: &prior,
                    transcript_global: x,
                    patch_features: &patch_feats,
                };
                Ok(gaze_loss(&[batch], kind, &log_scale, lambda)?.unwrap())
            },
            &transcript,
            outcome,
        );
        check_input(
            &format!("gaze_{kind:?}/patches seed {seed}"),
            |x| {
                let batch = GazeBatch {
                    prior: &prior,
                    transcript_global: &transcript,
                    patch_features: x,
                };
                Ok(gaze_loss(&[batch], kind, &log_scale, lambda)?.unwrap())
            },
            &patch_feats,
            outcome,
        );
        check_input(
            &format!("gaze_{kind:?}/log_scale seed {seed}"),
            |x| {
                let batch = GazeBatch {
                    prior: &prior,
                    transcript_global: &transcript,
                    patch_features: &patch_feats,
                };
                Ok(gaze_loss(&[batch], kind, x, lambda)?.unwrap())
            },
            &log_scale,
            outcome,
        );
    }
}

fn check_encoder(seed: u64, coords_per_param: usize, outcome: &mut SuiteOutcome) -> Result<()> {
    let cfg = ModelConfig {
        d: TOY_D,
        m: TOY_M,
        patch_size: 8,
        layers: 2,
        heads: 2,
        vocab_size: 256,
        image_size: 32,
        max_seq_len: 48,
    };
    let model = Model::new(cfg, false, seed)?;
    let spec = SyntheticSpec {
        n_studies: TOY_B,
        context_fraction: 1.0,
        gaze_fraction: 0.0,
        multi_view_fraction: 0.0,
        seed,
        ..Default::default()
    };
    let corpus = generate(&spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let weights: Vec<Tensor> = (0..TOY_B).map(|_| rand_tensor(&mut rng, &[TOY_M, TOY_D])).collect();
    let report_weights = rand_tensor(&mut rng, &[TOY_B, TOY_D]);

    // Drive every encoder path: images with context, report text, pooling.
    let forward = || -> crate::tensor::Result<Tensor> {
        let entries: Vec<BatchEntry> = corpus
            .iter()
            .map(|s| BatchEntry { study: s, image_ix: 0, prior: None })
            .collect();
        let batch = model.encode_batch(&entries, true).expect("encode");
        let mut loss = batch.report_global.mul(&report_weights)?.sum();
        for (lat, w) in batch.vision_latents.iter().zip(&weights) {
            loss = loss.add(&lat.mul(w)?.sum())?;
        }
        loss = loss.add(&batch.vision_logits.sum())?.add(&batch.text_logits.sum())?;
        Ok(loss)
    };

    let loss = forward().map_err(|e| Error::numeric(format!("encoder forward failed: {e}")))?;
    loss.backward().map_err(|e| Error::numeric(e.to_string()))?;

    for p in model.params().iter() {
        let Some(analytic) = p.grad() else { continue };
        let n = p.numel();
        let coords: Vec<usize> = (0..coords_per_param.min(n)).map(|_| rng.gen_range(0..n)).collect();
        match gradcheck::finite_diff_wrt_param(forward, p, &coords, FD_STEP) {
            Ok(numeric) => {
                for (c, fd) in coords.iter().zip(&numeric) {
                    let err = gradcheck::rel_err(analytic[*c], *fd);
                    outcome.checks += 1;
                    outcome.max_rel_err = outcome.max_rel_err.max(err);
                    if err > REL_TOL {
                        outcome.failures.push(format!(
                            "encoder seed {seed} {} coord {c}: rel err {err:.3e}",
                            p.name()
                        ));
                    }
                }
            }
            Err(e) => outcome
                .failures
                .push(format!("encoder seed {seed} {}: {e}", p.name())),
        }
    }
    Ok(())
}

/// Run the whole suite over `seeds` seeds. Loss inputs are checked on every
/// coordinate; encoder parameters on `coords_per_param` sampled coordinates
/// each.
pub fn run(seeds: u64, coords_per_param: usize) -> Result<SuiteOutcome> {
    let start = std::time::Instant::now();
    let mut outcome = SuiteOutcome {
        checks: 0,
        max_rel_err: 0.0,
        failures: Vec::new(),
        elapsed: std::time::Duration::ZERO,
    };
    for seed in 0..seeds {
        check_losses(seed, &mut outcome);
        check_encoder(seed, coords_per_param, &mut outcome)?;
    }
    outcome.elapsed = start.elapsed();
    Ok(outcome)
}
