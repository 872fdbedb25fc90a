//! Multi-level supervision: hybrid-positive contrastive alignment,
//! class-balanced focal classification over both modalities, and soft gaze
//! guidance matching transcript-to-patch similarities against fixation
//! priors (with MSE / IoU / binary-mask ablation variants).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaze::GazePrior;
use crate::model::EncodedBatch;
use crate::tensor::{cosine_sim_matrix, log_softmax_rows, softmax_rows, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GazeLossKind {
    Jsd,
    Mse,
    Iou,
    Mask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContrastiveKind {
    Hybrid,
    Single,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SupervisionConfig {
    /// Balance between transcript-to-patch and patch-to-transcript terms.
    pub lambda: f64,
    /// Fraction of non-zero heatmap cells retained per prior row.
    pub rho: f64,
    /// Class-balance exponent base.
    pub beta: f64,
    /// Focal focusing exponent.
    pub gamma: f64,
    /// Focal positive-class weight.
    pub alpha: f64,
    pub gaze_loss: GazeLossKind,
    pub contrastive: ContrastiveKind,
    pub temperature_literal: bool,
    pub use_context: bool,
    pub con_weight: f64,
    pub cls_weight: f64,
    pub gaze_weight: f64,
}

impl Default for SupervisionConfig {
    fn default() -> Self {
        SupervisionConfig {
            lambda: 0.8,
            rho: 0.25,
            beta: 0.99,
            gamma: 2.0,
            alpha: 0.25,
            gaze_loss: GazeLossKind::Jsd,
            contrastive: ContrastiveKind::Hybrid,
            temperature_literal: false,
            use_context: true,
            con_weight: 1.0,
            cls_weight: 1.0,
            gaze_weight: 1.0,
        }
    }
}

impl SupervisionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::config(format!("rho must lie in (0, 1], got {}", self.rho)));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::config(format!("beta must lie in [0, 1), got {}", self.beta)));
        }
        if self.gamma < 0.0 {
            return Err(Error::config(format!("gamma must be non-negative, got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Row-stochastic target distribution over batch pairs: entry (i, j) is
/// positive iff image i and report j come from the same study, normalized
/// by the number of positives in the row.
#[derive(Debug, Clone, PartialEq)]
pub struct PositiveStructure {
    pub size: usize,
    /// Row-major `size x size`.
    pub matrix: Vec<f64>,
    pub study_ids: Vec<String>,
}

pub fn build_positive_structure(study_ids: &[String]) -> Result<PositiveStructure> {
    let b = study_ids.len();
    if b == 0 {
        return Err(Error::data("positive structure needs at least one entry"));
    }
    let mut matrix = vec![0.0; b * b];
    for i in 0..b {
        let count = study_ids.iter().filter(|s| **s == study_ids[i]).count();
        debug_assert!(count >= 1, "a row always matches its own study");
        for j in 0..b {
            if study_ids[i] == study_ids[j] {
                matrix[i * b + j] = 1.0 / count as f64;
            }
        }
    }
    Ok(PositiveStructure { size: b, matrix, study_ids: study_ids.to_vec() })
}

fn identity_structure(study_ids: &[String]) -> PositiveStructure {
    let b = study_ids.len();
    let mut matrix = vec![0.0; b * b];
    for i in 0..b {
        matrix[i * b + i] = 1.0;
    }
    PositiveStructure { size: b, matrix, study_ids: study_ids.to_vec() }
}

/// Multiply a matrix by a scalar tensor (e.g. an exp'd log-scale), keeping
/// the scalar differentiable.
fn scale_by(x: &Tensor, scalar: &Tensor) -> Result<Tensor> {
    let rows = x.shape()[0];
    let col = Tensor::ones(&[rows, 1]).matmul(&scalar.reshape(&[1, 1])?)?;
    Ok(x.mul_colvec(&col)?)
}

/// Symmetric cross-entropy between the positive structure and the softmaxed
/// cosine-similarity distributions in both retrieval directions.
pub fn contrastive_loss(
    vision_global: &Tensor,
    report_global: &Tensor,
    positives: &PositiveStructure,
    log_scale: &Tensor,
) -> Result<Tensor> {
    let b = positives.size;
    if vision_global.shape()[0] != b || report_global.shape()[0] != b {
        return Err(Error::numeric(format!(
            "contrastive batch mismatch: embeddings {}x / {}x vs positives {b}",
            vision_global.shape()[0],
            report_global.shape()[0],
        )));
    }
    let sims = cosine_sim_matrix(vision_global, report_global)?;
    if !sims.is_finite() {
        return Err(Error::numeric("non-finite similarities in contrastive loss"));
    }
    let scaled = scale_by(&sims, &log_scale.exp())?;
    let log_q_i2r = log_softmax_rows(&scaled)?;
    let log_q_r2i = log_softmax_rows(&scaled.transpose()?)?;
    // p is symmetric in construction (one id list indexes both sides), so
    // p_ij weights log q^R2I_ij directly.
    let p = Tensor::from_vec(positives.matrix.clone(), &[b, b])?;
    let cross = p.mul(&log_q_i2r.add(&log_q_r2i.transpose()?)?)?;
    Ok(cross.sum().scale(-0.5 / b as f64))
}

/// Ablation: positives forced to the identity regardless of study ids.
pub fn contrastive_loss_single_positive(
    vision_global: &Tensor,
    report_global: &Tensor,
    study_ids: &[String],
    log_scale: &Tensor,
) -> Result<Tensor> {
    contrastive_loss(
        vision_global,
        report_global,
        &identity_structure(study_ids),
        log_scale,
    )
}

/// Per-class reweighting factor `(1 - beta) / (1 - beta^count)`; classes
/// with no positives get weight 1 (the formula is undefined at beta^0).
pub fn class_balance_weight(beta: f64, count: f64) -> f64 {
    if count <= 0.0 {
        1.0
    } else {
        (1.0 - beta) / (1.0 - beta.powf(count))
    }
}

/// Class-balanced focal loss over multi-label logits:
/// `cb_l * -alpha_t * (1 - p_t)^gamma * log(p_t)`, mean over batch and
/// classes. `labels` is the flat row-major binarized matrix.
pub fn class_balanced_focal(
    logits: &Tensor,
    labels: &[u8],
    counts: &[f64],
    beta: f64,
    gamma: f64,
    alpha: f64,
) -> Result<Tensor> {
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b * c || counts.len() != c {
        return Err(Error::numeric(format!(
            "focal loss shape mismatch: logits {b}x{c}, {} labels, {} counts",
            labels.len(),
            counts.len()
        )));
    }
    let y = Tensor::from_vec(labels.iter().map(|v| *v as f64).collect(), &[b, c])?;
    let one_minus_y = y.neg().add_scalar(1.0);
    // log p_t, assembled from the stable log-sigmoid of +/- logits.
    let log_pt = y
        .mul(&logits.log_sigmoid())?
        .add(&one_minus_y.mul(&logits.neg().log_sigmoid())?)?;
    let focus = log_pt.exp().neg().add_scalar(1.0).pow_scalar(gamma);
    let alpha_t = y.scale(alpha).add(&one_minus_y.scale(1.0 - alpha))?;
    let focal = alpha_t.mul(&focus)?.mul(&log_pt)?.neg();
    let weights: Vec<f64> = counts.iter().map(|w| class_balance_weight(beta, *w)).collect();
    let weighted = focal.mul_rowvec(&Tensor::from_vec(weights, &[1, c])?)?;
    Ok(weighted.mean())
}

/// Average of the per-modality class-balanced focal losses.
#[allow(clippy::too_many_arguments)]
pub fn cross_modal_cls_loss(
    vision_logits: &Tensor,
    text_logits: &Tensor,
    labels: &[u8],
    counts: &[f64],
    beta: f64,
    gamma: f64,
    alpha: f64,
) -> Result<Tensor> {
    let v = class_balanced_focal(vision_logits, labels, counts, beta, gamma, alpha)?;
    let t = class_balanced_focal(text_logits, labels, counts, beta, gamma, alpha)?;
    Ok(v.add(&t)?.scale(0.5))
}

/// Pairwise transcript-to-patch cosine similarities scaled by the exp'd
/// log temperature: `n x p`.
pub fn t2p_similarity(
    transcript_global: &Tensor,
    patch_features: &Tensor,
    log_scale: &Tensor,
) -> Result<Tensor> {
    let sims = cosine_sim_matrix(transcript_global, patch_features)?;
    scale_by(&sims, &log_scale.exp())
}

fn check_distribution_rows(x: &Tensor, what: &'static str) -> Result<()> {
    if x.data().iter().any(|v| *v < 0.0) {
        return Err(Error::numeric(format!("{what} has negative entries")));
    }
    Ok(())
}

/// Row-wise Jensen-Shannon divergence between two stacks of distribution
/// rows, natural log, with `0 * log 0 = 0`; output `m x 1`.
pub fn js_divergence_rows(p: &Tensor, q: &Tensor) -> Result<Tensor> {
    if p.shape() != q.shape() {
        return Err(Error::numeric(format!(
            "js_divergence shapes differ: {:?} vs {:?}",
            p.shape(),
            q.shape()
        )));
    }
    check_distribution_rows(p, "js_divergence lhs")?;
    check_distribution_rows(q, "js_divergence rhs")?;
    let mix = p.add(q)?.scale(0.5);
    let kl_p = kl_rows_vs_mix(p, &mix)?;
    let kl_q = kl_rows_vs_mix(q, &mix)?;
    Ok(kl_p.add(&kl_q)?.scale(0.5))
}

/// `sum_j a_j (ln a_j - ln m_j)` per row, restricted to the support of `a`.
fn kl_rows_vs_mix(a: &Tensor, mix: &Tensor) -> Result<Tensor> {
    let zero_mask: Vec<bool> = a.data().iter().map(|v| *v == 0.0).collect();
    // Fill zeros with 1 before the log so masked entries contribute
    // exactly 0 instead of 0 * -inf.
    let a_safe = a.masked_fill(&zero_mask, 1.0)?;
    let mix_safe = mix.masked_fill(&zero_mask, 1.0)?;
    let log_ratio = a_safe.log().sub(&mix_safe.log())?;
    Ok(a.mul(&log_ratio)?.sum_rows()?)
}

/// Scalar Jensen-Shannon divergence between two single-row distributions.
pub fn js_divergence(p: &Tensor, q: &Tensor) -> Result<Tensor> {
    Ok(js_divergence_rows(p, q)?.sum())
}

/// Soft intersection-over-union loss `1 - sum(min) / sum(max)`.
pub fn soft_iou_loss(target: &Tensor, predicted: &Tensor) -> Result<Tensor> {
    let overlap = target.minimum(predicted)?.sum();
    let union = target.maximum(predicted)?.sum();
    Ok(overlap.div(&union)?.neg().add_scalar(1.0))
}

/// The gaze supervision inputs for one study.
pub struct GazeBatch<'a> {
    pub prior: &'a GazePrior,
    pub transcript_global: &'a Tensor,
    pub patch_features: &'a Tensor,
}

fn prior_tensor(prior: &GazePrior) -> Result<Tensor> {
    Ok(Tensor::from_vec(prior.matrix.clone(), &[prior.rows, prior.patches])?)
}

/// Per-patch target distributions: prior columns renormalized; patches with
/// zero prior mass are excluded (their indices are not returned).
fn patch_targets(prior: &GazePrior) -> (Vec<usize>, Vec<f64>) {
    let mass = prior.patch_mass();
    let included: Vec<usize> = (0..prior.patches).filter(|j| mass[*j] > 0.0).collect();
    let mut rows = Vec::with_capacity(included.len() * prior.rows);
    for &j in &included {
        for i in 0..prior.rows {
            rows.push(prior.row(i)[j] / mass[j]);
        }
    }
    (included, rows)
}

/// Uniform-over-support replacement of each prior row (binary-mask ablation).
pub fn binarize_prior(prior: &GazePrior) -> GazePrior {
    let mut out = prior.clone();
    for i in 0..out.rows {
        let start = i * out.patches;
        let row = &mut out.matrix[start..start + out.patches];
        let support = row.iter().filter(|v| **v > 0.0).count().max(1);
        for v in row.iter_mut() {
            if *v > 0.0 {
                *v = 1.0 / support as f64;
            }
        }
    }
    out
}

fn bidirectional_jsd(batch: &GazeBatch<'_>, prior: &GazePrior, log_scale: &Tensor, lambda: f64) -> Result<Tensor> {
    let sims = t2p_similarity(batch.transcript_global, batch.patch_features, log_scale)?;
    let target = prior_tensor(prior)?;
    let s_t2p = softmax_rows(&sims)?;
    let t2p_term = js_divergence_rows(&target, &s_t2p)?.mean();

    let (included, target_rows) = patch_targets(prior);
    if included.is_empty() || lambda >= 1.0 {
        return Ok(t2p_term.scale(lambda));
    }
    let s_p2t = softmax_rows(&sims.transpose()?)?.gather_rows(&included)?;
    let patch_target = Tensor::from_vec(target_rows, &[included.len(), prior.rows])?;
    let p2t_term = js_divergence_rows(&patch_target, &s_p2t)?.mean();
    Ok(t2p_term.scale(lambda).add(&p2t_term.scale(1.0 - lambda))?)
}

fn study_gaze_loss(
    batch: &GazeBatch<'_>,
    kind: GazeLossKind,
    log_scale: &Tensor,
    lambda: f64,
) -> Result<Tensor> {
    match kind {
        GazeLossKind::Jsd => bidirectional_jsd(batch, batch.prior, log_scale, lambda),
        GazeLossKind::Mask => {
            let binarized = binarize_prior(batch.prior);
            bidirectional_jsd(batch, &binarized, log_scale, lambda)
        }
        GazeLossKind::Mse => {
            let sims = t2p_similarity(batch.transcript_global, batch.patch_features, log_scale)?;
            let s_t2p = softmax_rows(&sims)?;
            let target = prior_tensor(batch.prior)?;
            let diff = target.sub(&s_t2p)?;
            Ok(diff.mul(&diff)?.mean())
        }
        GazeLossKind::Iou => {
            let sims = t2p_similarity(batch.transcript_global, batch.patch_features, log_scale)?;
            let s_t2p = softmax_rows(&sims)?;
            soft_iou_loss(&prior_tensor(batch.prior)?, &s_t2p)
        }
    }
}

/// Mean gaze-guidance loss over the gaze studies of a batch; `None` when the
/// batch has no gaze supervision.
pub fn gaze_loss(
    batches: &[GazeBatch<'_>],
    kind: GazeLossKind,
    log_scale: &Tensor,
    lambda: f64,
) -> Result<Option<Tensor>> {
    if batches.is_empty() {
        return Ok(None);
    }
    let mut total: Option<Tensor> = None;
    for batch in batches {
        let term = study_gaze_loss(batch, kind, log_scale, lambda)?;
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    Ok(Some(total.unwrap().scale(1.0 / batches.len() as f64)))
}

/// Scalar total plus per-term values for logging.
pub struct LossTerms {
    pub total: Tensor,
    pub contrastive: f64,
    pub classification: f64,
    pub gaze: f64,
    pub gaze_studies: usize,
}

/// Compose the pretraining objective. Terms with zero weight are skipped
/// entirely; a batch without gaze studies contributes a zero gaze term.
pub fn pretrain_loss(
    batch: &EncodedBatch,
    labels: &[u8],
    counts: &[f64],
    cfg: &SupervisionConfig,
    log_scale_con: &Tensor,
    log_scale_gaze: &Tensor,
) -> Result<LossTerms> {
    let mut total: Option<Tensor> = None;
    let add_term = |acc: &mut Option<Tensor>, term: Tensor| -> Result<()> {
        *acc = Some(match acc.take() {
            Some(t) => t.add(&term)?,
            None => term,
        });
        Ok(())
    };

    let mut con_value = 0.0;
    if cfg.con_weight != 0.0 {
        let con = match cfg.contrastive {
            ContrastiveKind::Hybrid => {
                let pos = build_positive_structure(&batch.study_ids)?;
                contrastive_loss(&batch.vision_global, &batch.report_global, &pos, log_scale_con)?
            }
            ContrastiveKind::Single => contrastive_loss_single_positive(
                &batch.vision_global,
                &batch.report_global,
                &batch.study_ids,
                log_scale_con,
            )?,
        };
        con_value = con.item();
        if !con_value.is_finite() {
            return Err(Error::numeric("contrastive term is non-finite"));
        }
        add_term(&mut total, con.scale(cfg.con_weight))?;
    }

    let mut cls_value = 0.0;
    if cfg.cls_weight != 0.0 {
        let cls = cross_modal_cls_loss(
            &batch.vision_logits,
            &batch.text_logits,
            labels,
            counts,
            cfg.beta,
            cfg.gamma,
            cfg.alpha,
        )?;
        cls_value = cls.item();
        if !cls_value.is_finite() {
            return Err(Error::numeric("classification term is non-finite"));
        }
        add_term(&mut total, cls.scale(cfg.cls_weight))?;
    }

    let mut gaze_value = 0.0;
    let gaze_studies = batch.gaze.len();
    if cfg.gaze_weight != 0.0 {
        let views: Vec<GazeBatch<'_>> = batch
            .gaze
            .iter()
            .map(|g| GazeBatch {
                prior: &g.prior,
                transcript_global: &g.transcript_global,
                patch_features: &g.patch_features,
            })
            .collect();
        if let Some(g) = gaze_loss(&views, cfg.gaze_loss, log_scale_gaze, cfg.lambda)? {
            gaze_value = g.item();
            if !gaze_value.is_finite() {
                return Err(Error::numeric("gaze term is non-finite"));
            }
            add_term(&mut total, g.scale(cfg.gaze_weight))?;
        }
    }

    let total = total.ok_or_else(|| Error::config("all loss terms disabled"))?;
    Ok(LossTerms {
        total,
        contrastive: con_value,
        classification: cls_value,
        gaze: gaze_value,
        gaze_studies,
    })
}
