//! Context-infused vision encoder, role-token language encoder, and the
//! batch encoding that feeds the training objectives.

pub mod blocks;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::data::{Study, StudyImage, NUM_OBSERVATIONS};
use crate::error::{Error, Result};
use crate::gaze::GazePrior;
use crate::param::{uniform_init, ParamSet, Parameter};
use crate::tensor::{normalize_rows, Tensor};

use blocks::{Linear, Perceiver, SelfAttentionBlock};

/// Initial effective contrastive scale follows the common CLIP setup:
/// log-scale parameters start at ln(1/0.07).
const LOG_SCALE_INIT: f64 = 2.659_260_036_932_778;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d: usize,
    pub m: usize,
    pub patch_size: usize,
    pub layers: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub image_size: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 32,
            m: 8,
            patch_size: 8,
            layers: 2,
            heads: 2,
            vocab_size: 256,
            image_size: 32,
            max_seq_len: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d % self.heads != 0 {
            return Err(Error::config(format!(
                "model.d ({}) must be divisible by model.heads ({})",
                self.d, self.heads
            )));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "model.image_size ({}) must be divisible by model.patch_size ({})",
                self.image_size, self.patch_size
            )));
        }
        if self.layers == 0 || self.m == 0 || self.vocab_size == 0 {
            return Err(Error::config("model.layers, model.m, model.vocab_size must be positive"));
        }
        Ok(())
    }

    pub fn patch_grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn patches(&self) -> usize {
        self.patch_grid() * self.patch_grid()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Findings,
    Transcript,
    Indication,
    History,
}

impl Role {
    fn index(self) -> usize {
        match self {
            Role::Findings => 0,
            Role::Transcript => 1,
            Role::Indication => 2,
            Role::History => 3,
        }
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    params: ParamSet,

    // Shared language encoder.
    token_embed: Parameter,
    position_embed: Parameter,
    role_embed: Parameter,
    text_blocks: Vec<SelfAttentionBlock>,

    // Vision encoder.
    patch_embed: Linear,
    patch_row_embed: Parameter,
    patch_col_embed: Parameter,
    view_embed: Parameter,
    patch_project: Linear,
    vision_blocks: Vec<SelfAttentionBlock>,

    // Context-adaptive fusion.
    context_latents: Parameter,
    image_latent: Parameter,
    fusion_latents: Parameter,
    context_perceiver: Perceiver,
    fusion_perceiver: Perceiver,

    // Disease heads and learnable log temperature scales.
    vision_head: Linear,
    text_head: Linear,
    log_scale_contrastive: Parameter,
    log_scale_gaze: Parameter,
}

impl Model {
    /// Build with deterministic init from the seed. `temperature_literal`
    /// flips the contrastive scale from the exp-of-log convention
    /// (effective multiplier exp(l), init 1/0.07) to the literal reading
    /// where the initial temperature value itself is ln(1/0.07).
    pub fn new(cfg: ModelConfig, temperature_literal: bool, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        let d = cfg.d;
        let grid = cfg.patch_grid();

        let token_embed = set.register(Parameter::new(
            "text.token_embed",
            uniform_init(&mut rng, cfg.vocab_size, d, d),
            &[cfg.vocab_size, d],
        ));
        let position_embed = set.register(Parameter::new(
            "text.position_embed",
            uniform_init(&mut rng, cfg.max_seq_len, d, d),
            &[cfg.max_seq_len, d],
        ));
        let role_embed = set.register(Parameter::new(
            "text.role_embed",
            uniform_init(&mut rng, 4, d, d),
            &[4, d],
        ));
        let text_blocks = (0..cfg.layers)
            .map(|i| SelfAttentionBlock::new(&mut set, &mut rng, &format!("text.block{i}"), d, cfg.heads))
            .collect();

        let patch_dim = cfg.patch_size * cfg.patch_size;
        let patch_embed = Linear::new(&mut set, &mut rng, "vision.patch_embed", patch_dim, d);
        let patch_row_embed = set.register(Parameter::new(
            "vision.patch_row_embed",
            uniform_init(&mut rng, grid, d, d),
            &[grid, d],
        ));
        let patch_col_embed = set.register(Parameter::new(
            "vision.patch_col_embed",
            uniform_init(&mut rng, grid, d, d),
            &[grid, d],
        ));
        let view_embed = set.register(Parameter::new(
            "vision.view_embed",
            uniform_init(&mut rng, 4, d, d),
            &[4, d],
        ));
        let patch_project = Linear::new(&mut set, &mut rng, "vision.patch_project", d, d);
        let vision_blocks = (0..cfg.layers)
            .map(|i| SelfAttentionBlock::new(&mut set, &mut rng, &format!("vision.block{i}"), d, cfg.heads))
            .collect();

        let context_latents = set.register(Parameter::new(
            "fusion.context_latents",
            uniform_init(&mut rng, cfg.m, d, d),
            &[cfg.m, d],
        ));
        let image_latent = set.register(Parameter::new(
            "fusion.image_latent",
            uniform_init(&mut rng, cfg.m, d, d),
            &[cfg.m, d],
        ));
        let fusion_latents = set.register(Parameter::new(
            "fusion.fusion_latents",
            uniform_init(&mut rng, cfg.m, d, d),
            &[cfg.m, d],
        ));
        let context_perceiver =
            Perceiver::new(&mut set, &mut rng, "fusion.context_perceiver", d, cfg.heads, cfg.layers);
        let fusion_perceiver =
            Perceiver::new(&mut set, &mut rng, "fusion.fusion_perceiver", d, cfg.heads, cfg.layers);

        let vision_head = Linear::new(&mut set, &mut rng, "heads.vision", d, NUM_OBSERVATIONS);
        let text_head = Linear::new(&mut set, &mut rng, "heads.text", d, NUM_OBSERVATIONS);

        let (init, lo, hi) = if temperature_literal {
            // Multiply-by-1/tau with tau itself starting at ln(1/0.07).
            ((1.0 / LOG_SCALE_INIT).ln(), 0.01f64.ln(), 100f64.ln())
        } else {
            (LOG_SCALE_INIT, 0.0, 100f64.ln())
        };
        let log_scale_contrastive = set.register(
            Parameter::scalar("scales.contrastive_log_scale", init).with_bounds(lo, hi),
        );
        let log_scale_gaze =
            set.register(Parameter::scalar("scales.gaze_log_scale", init).with_bounds(lo, hi));

        Ok(Model {
            cfg,
            params: set,
            token_embed,
            position_embed,
            role_embed,
            text_blocks,
            patch_embed,
            patch_row_embed,
            patch_col_embed,
            view_embed,
            patch_project,
            vision_blocks,
            context_latents,
            image_latent,
            fusion_latents,
            context_perceiver,
            fusion_perceiver,
            vision_head,
            text_head,
            log_scale_contrastive,
            log_scale_gaze,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn log_scale_contrastive(&self) -> &Parameter {
        &self.log_scale_contrastive
    }

    pub fn log_scale_gaze(&self) -> &Parameter {
        &self.log_scale_gaze
    }

    /// Parameters that exist only for the clinical-context pathway; they
    /// must receive no gradient on context-free batches.
    pub fn context_parameter_names(&self) -> Vec<String> {
        self.params
            .iter()
            .map(|p| p.name().to_string())
            .filter(|n| n.starts_with("fusion.context_"))
            .collect()
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|&t| {
                let ix = t as usize;
                if ix >= self.cfg.vocab_size {
                    Err(Error::data(format!(
                        "unknown token id {t} (vocab size {})",
                        self.cfg.vocab_size
                    )))
                } else {
                    Ok(ix)
                }
            })
            .collect()
    }

    fn run_text_blocks(&self, rows: Tensor) -> Result<Tensor> {
        let len = rows.shape()[0];
        if len > self.cfg.max_seq_len {
            return Err(Error::data(format!(
                "sequence of {len} rows exceeds max_seq_len {}",
                self.cfg.max_seq_len
            )));
        }
        let positions: Vec<usize> = (0..len).collect();
        let mut x = rows.add(&self.position_embed.tensor().gather_rows(&positions)?)?;
        for block in &self.text_blocks {
            x = block.forward(&x)?;
        }
        Ok(x)
    }

    /// Role token prepended, then token + position embeddings through the
    /// self-attention stack. Empty text yields the single role-token row.
    pub fn encode_text(&self, tokens: &[u32], role: Role) -> Result<Tensor> {
        let ids = self.check_tokens(tokens)?;
        let role_row = self.role_embed.tensor().gather_rows(&[role.index()])?;
        let rows = if ids.is_empty() {
            role_row
        } else {
            let tok = self.token_embed.tensor().gather_rows(&ids)?;
            Tensor::concat_rows(&[role_row, tok])?
        };
        self.run_text_blocks(rows)
    }

    /// Indication and history concatenated into one sequence, each span led
    /// by its own role token; either span may be empty.
    pub fn encode_context(&self, indication: &[u32], history: &[u32]) -> Result<Tensor> {
        let ind_ids = self.check_tokens(indication)?;
        let hist_ids = self.check_tokens(history)?;
        let role = self.role_embed.tensor();
        let mut parts = vec![role.gather_rows(&[Role::Indication.index()])?];
        if !ind_ids.is_empty() {
            parts.push(self.token_embed.tensor().gather_rows(&ind_ids)?);
        }
        parts.push(role.gather_rows(&[Role::History.index()])?);
        if !hist_ids.is_empty() {
            parts.push(self.token_embed.tensor().gather_rows(&hist_ids)?);
        }
        self.run_text_blocks(Tensor::concat_rows(&parts)?)
    }

    /// Patch features: linear patch embedding plus 2-D position and view
    /// embeddings (added before the final projection), then the
    /// self-attention stack.
    pub fn encode_image(&self, image: &StudyImage) -> Result<Tensor> {
        let ps = self.cfg.patch_size;
        if image.size != self.cfg.image_size {
            return Err(Error::data(format!(
                "image size {} does not match configured {}",
                image.size, self.cfg.image_size
            )));
        }
        let grid = self.cfg.patch_grid();
        let mut raw = Vec::with_capacity(grid * grid * ps * ps);
        for pr in 0..grid {
            for pc in 0..grid {
                for i in 0..ps {
                    for j in 0..ps {
                        let pix = image.pixels[(pr * ps + i) * image.size + (pc * ps + j)];
                        raw.push(pix as f64 / 255.0);
                    }
                }
            }
        }
        let raw = Tensor::from_vec(raw, &[grid * grid, ps * ps])?;
        let mut x = self.patch_embed.forward(&raw)?;

        let row_ids: Vec<usize> = (0..grid * grid).map(|p| p / grid).collect();
        let col_ids: Vec<usize> = (0..grid * grid).map(|p| p % grid).collect();
        x = x.add(&self.patch_row_embed.tensor().gather_rows(&row_ids)?)?;
        x = x.add(&self.patch_col_embed.tensor().gather_rows(&col_ids)?)?;
        let view_row = self.view_embed.tensor().gather_rows(&[image.view.index()])?;
        x = x.add_rowvec(&view_row)?;

        x = self.patch_project.forward(&x)?;
        for block in &self.vision_blocks {
            x = block.forward(&x)?;
        }
        Ok(x)
    }

    /// Compress an encoded context sequence into the latent summary; absent
    /// context falls back to the dedicated image latent, bit-for-bit.
    pub fn fuse_context(&self, context_seq: Option<&Tensor>) -> Result<Tensor> {
        match context_seq {
            Some(seq) => self.context_perceiver.forward(&self.context_latents.tensor(), seq),
            None => Ok(self.image_latent.tensor()),
        }
    }

    /// Vision latents: fusion latents cross-attend to the patch sequence
    /// extended with the context summary rows.
    pub fn fuse_vision(&self, patch_features: &Tensor, context_summary: &Tensor) -> Result<Tensor> {
        let inputs = Tensor::concat_rows(&[patch_features.clone(), context_summary.clone()])?;
        self.fusion_perceiver.forward(&self.fusion_latents.tensor(), &inputs)
    }

    /// Mean over rows then L2-normalize; `1 x d`.
    pub fn global_pool(&self, seq: &Tensor) -> Result<Tensor> {
        let k = seq.shape()[0];
        if k == 0 {
            return Err(Error::numeric("global_pool on empty sequence"));
        }
        let weights = Tensor::from_vec(vec![1.0 / k as f64; k], &[1, k])?;
        let mean = weights.matmul(seq)?;
        Ok(normalize_rows(&mean)?)
    }

    /// Independent linear disease heads per modality.
    pub fn disease_logits(&self, vision_global: &Tensor, report_global: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((
            self.vision_head.forward(vision_global)?,
            self.text_head.forward(report_global)?,
        ))
    }

    /// Encode one image of a study end to end.
    pub fn encode_study_image(
        &self,
        study: &Study,
        image_ix: usize,
        use_context: bool,
    ) -> Result<VisionEncoding> {
        let patch_features = self.encode_image(&study.images[image_ix])?;
        let context_seq = match (&study.context, use_context) {
            (Some(tokens), true) => Some(self.encode_context(tokens, &[])?),
            _ => None,
        };
        let summary = self.fuse_context(context_seq.as_ref())?;
        let latents = self.fuse_vision(&patch_features, &summary)?;
        let global = self.global_pool(&latents)?;
        Ok(VisionEncoding { patch_features, latents, global })
    }

    /// Per-segment transcript rows (mean of each encoded segment), stacked
    /// in `kept` order so they align with surviving prior rows.
    pub fn transcript_globals(&self, study: &Study, kept: &[usize]) -> Result<Tensor> {
        let session = study
            .gaze
            .as_ref()
            .ok_or_else(|| Error::data(format!("study {} has no gaze session", study.study_id)))?;
        let mut rows = Vec::with_capacity(kept.len());
        for &seg_ix in kept {
            let seg = &session.segments[seg_ix];
            let seq = self.encode_text(&seg.text, Role::Transcript)?;
            let k = seq.shape()[0];
            let weights = Tensor::from_vec(vec![1.0 / k as f64; k], &[1, k])?;
            rows.push(weights.matmul(&seq)?);
        }
        Ok(Tensor::concat_rows(&rows)?)
    }

    /// Encode a training batch: one entry per image, sharing report
    /// encodings within a study. Gaze attachments are built for entries
    /// that carry a prior.
    pub fn encode_batch(&self, entries: &[BatchEntry<'_>], use_context: bool) -> Result<EncodedBatch> {
        if entries.is_empty() {
            return Err(Error::data("cannot encode an empty batch"));
        }
        let mut report_cache: BTreeMap<&str, Tensor> = BTreeMap::new();
        let mut study_ids = Vec::with_capacity(entries.len());
        let mut vision_globals = Vec::with_capacity(entries.len());
        let mut report_globals = Vec::with_capacity(entries.len());
        let mut vision_latents = Vec::with_capacity(entries.len());
        let mut patch_features = Vec::with_capacity(entries.len());
        let mut gaze = Vec::new();

        for entry in entries {
            let study = entry.study;
            let enc = self.encode_study_image(study, entry.image_ix, use_context)?;
            let report_global = match report_cache.get(study.study_id.as_str()) {
                Some(t) => t.clone(),
                None => {
                    let seq = self.encode_text(&study.report, Role::Findings)?;
                    let pooled = self.global_pool(&seq)?;
                    report_cache.insert(study.study_id.as_str(), pooled.clone());
                    pooled
                }
            };
            if let Some(prior) = entry.prior {
                let transcript_global = self.transcript_globals(study, &prior.kept_segments)?;
                gaze.push(GazeAttachment {
                    prior: prior.clone(),
                    transcript_global,
                    patch_features: enc.patch_features.clone(),
                });
            }
            study_ids.push(study.study_id.clone());
            vision_globals.push(enc.global);
            report_globals.push(report_global);
            vision_latents.push(enc.latents);
            patch_features.push(enc.patch_features);
        }

        let vision_global = Tensor::concat_rows(&vision_globals)?;
        let report_global = Tensor::concat_rows(&report_globals)?;
        let (vision_logits, text_logits) = self.disease_logits(&vision_global, &report_global)?;
        Ok(EncodedBatch {
            study_ids,
            vision_global,
            report_global,
            vision_logits,
            text_logits,
            vision_latents,
            patch_features,
            gaze,
        })
    }
}

pub struct VisionEncoding {
    pub patch_features: Tensor,
    pub latents: Tensor,
    pub global: Tensor,
}

pub struct BatchEntry<'a> {
    pub study: &'a Study,
    pub image_ix: usize,
    pub prior: Option<&'a GazePrior>,
}

/// Everything a training step needs from one gaze study.
pub struct GazeAttachment {
    pub prior: GazePrior,
    pub transcript_global: Tensor,
    pub patch_features: Tensor,
}

pub struct EncodedBatch {
    pub study_ids: Vec<String>,
    pub vision_global: Tensor,
    pub report_global: Tensor,
    pub vision_logits: Tensor,
    pub text_logits: Tensor,
    pub vision_latents: Vec<Tensor>,
    pub patch_features: Vec<Tensor>,
    pub gaze: Vec<GazeAttachment>,
}
