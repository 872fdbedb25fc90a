//! Pretraining loop: deterministic batching, AdamW with plateau LR
//! scheduling, per-step loss logging, epoch checkpoints, and bit-exact
//! resume.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, RawRecord};
use crate::config::RunConfig;
use crate::data::{read_corpus, study_id_hash, Study, NUM_OBSERVATIONS};
use crate::error::{Error, Result};
use crate::gaze::{build_gaze_prior, GazePrior};
use crate::loss::{pretrain_loss, LossTerms};
use crate::model::{BatchEntry, Model, ModelConfig};
use crate::optim::{AdamW, PlateauScheduler};
use crate::param::ParamSet;
use crate::synth;

/// Every tenth study (by id hash) is held out for validation.
const VAL_MODULUS: u64 = 10;

pub fn mix_seed(master: u64, salt: u64) -> u64 {
    let mut x = master ^ salt.wrapping_mul(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Read the configured corpus, or generate the synthetic one.
pub fn load_corpus(cfg: &RunConfig) -> Result<Vec<Study>> {
    match (&cfg.data.corpus, &cfg.data.synthetic) {
        (Some(path), _) => read_corpus(path),
        (None, Some(spec)) => synth::generate(spec),
        (None, None) => synth::generate(&synth::SyntheticSpec {
            seed: cfg.seed,
            ..Default::default()
        }),
    }
}

/// Corpus with priors, label statistics, and the train/validation split.
pub struct PreparedCorpus {
    pub studies: Vec<Study>,
    pub priors: Vec<Option<GazePrior>>,
    pub class_counts: Vec<f64>,
    pub train_entries: Vec<(usize, usize)>,
    pub val_entries: Vec<(usize, usize)>,
    /// Gaze sessions whose prior came out empty and were dropped.
    pub dropped_gaze_studies: usize,
}

pub fn prepare_corpus(cfg: &RunConfig, studies: Vec<Study>, model_cfg: &ModelConfig) -> Result<PreparedCorpus> {
    let grid = model_cfg.patch_grid();
    let mut priors: Vec<Option<GazePrior>> = Vec::with_capacity(studies.len());
    let mut dropped = 0usize;
    for study in &studies {
        let prior = match &study.gaze {
            Some(session) => match build_gaze_prior(
                session,
                model_cfg.image_size,
                model_cfg.image_size,
                grid,
                grid,
                cfg.supervision.rho,
                &cfg.gaze,
            ) {
                Ok(p) => Some(p),
                Err(_) => {
                    dropped += 1;
                    None
                }
            },
            None => None,
        };
        priors.push(prior);
    }

    let mut train_entries = Vec::new();
    let mut val_entries = Vec::new();
    let mut class_counts = vec![0.0; NUM_OBSERVATIONS];
    for (ix, study) in studies.iter().enumerate() {
        let is_val = study_id_hash(&study.study_id) % VAL_MODULUS == 0;
        for img in 0..study.images.len() {
            if is_val {
                val_entries.push((ix, img));
            } else {
                train_entries.push((ix, img));
            }
        }
        if !is_val {
            for (c, bit) in study.labels.binarized().iter().enumerate() {
                class_counts[c] += *bit as f64;
            }
        }
    }
    Ok(PreparedCorpus {
        studies,
        priors,
        class_counts,
        train_entries,
        val_entries,
        dropped_gaze_studies: dropped,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainStateFile {
    epoch: usize,
    step: u64,
    adam_step: u64,
    scheduler: PlateauScheduler,
    config_hash: String,
    /// Hash with the epoch budget neutralized; extending `epochs` on resume
    /// is legal, any other config change is not.
    resume_hash: String,
    seed: u64,
}

fn resume_hash(cfg: &RunConfig) -> String {
    let mut neutral = cfg.clone();
    neutral.optimizer.epochs = 0;
    neutral.hash()
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    config_hash: String,
    seed: u64,
    epoch: usize,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::data(format!("serialize {}: {e}", path.display())))?;
    std::fs::write(path, text).map_err(|e| Error::data(format!("write {}: {e}", path.display())))
}

fn save_model(path: &Path, params: &ParamSet, meta: &CheckpointMeta) -> Result<()> {
    checkpoint::save(path, params)?;
    write_json(&path.with_extension("cgz.meta.json"), meta)
}

fn save_optimizer(path: &Path, optimizer: &AdamW, params: &ParamSet) -> Result<()> {
    let (step, moments) = optimizer.state();
    let mut records = vec![RawRecord {
        name: "adam.step".into(),
        shape: vec![1],
        data: vec![step as f64],
    }];
    for (p, (m, v)) in params.iter().zip(moments) {
        records.push(RawRecord {
            name: format!("adam.m.{}", p.name()),
            shape: p.shape(),
            data: m.clone(),
        });
        records.push(RawRecord {
            name: format!("adam.v.{}", p.name()),
            shape: p.shape(),
            data: v.clone(),
        });
    }
    checkpoint::save_records(path, &records)
}

fn load_optimizer(path: &Path, optimizer: &mut AdamW, params: &ParamSet) -> Result<()> {
    let records = checkpoint::read_raw(path)?;
    let find = |name: &str| -> Result<Vec<f64>> {
        records
            .iter()
            .find(|r| r.name == name)
            .map(|r| r.data.clone())
            .ok_or_else(|| Error::data(format!("optimizer state missing `{name}`")))
    };
    let step = find("adam.step")?[0] as u64;
    let mut moments = Vec::with_capacity(params.len());
    for p in params.iter() {
        moments.push((find(&format!("adam.m.{}", p.name()))?, find(&format!("adam.v.{}", p.name()))?));
    }
    optimizer.restore(step, moments);
    Ok(())
}

#[derive(Debug)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub steps: u64,
    pub final_val_loss: Option<f64>,
    pub best_val_loss: f64,
    pub model_path: PathBuf,
    pub best_path: Option<PathBuf>,
}

struct StepBatch<'a> {
    entries: Vec<BatchEntry<'a>>,
    labels: Vec<u8>,
}

fn assemble_batch<'a>(corpus: &'a PreparedCorpus, chunk: &[(usize, usize)]) -> StepBatch<'a> {
    let mut entries = Vec::with_capacity(chunk.len());
    let mut labels = Vec::with_capacity(chunk.len() * NUM_OBSERVATIONS);
    for &(study_ix, image_ix) in chunk {
        let study = &corpus.studies[study_ix];
        // Gaze priors supervise the study's primary view only.
        let prior = if image_ix == 0 { corpus.priors[study_ix].as_ref() } else { None };
        entries.push(BatchEntry { study, image_ix, prior });
        labels.extend_from_slice(&study.labels.binarized());
    }
    StepBatch { entries, labels }
}

fn batch_loss(model: &Model, cfg: &RunConfig, corpus: &PreparedCorpus, chunk: &[(usize, usize)]) -> Result<LossTerms> {
    let batch = assemble_batch(corpus, chunk);
    let encoded = model.encode_batch(&batch.entries, cfg.supervision.use_context)?;
    pretrain_loss(
        &encoded,
        &batch.labels,
        &corpus.class_counts,
        &cfg.supervision,
        &model.log_scale_contrastive().tensor(),
        &model.log_scale_gaze().tensor(),
    )
}

fn validation_loss(model: &Model, cfg: &RunConfig, corpus: &PreparedCorpus) -> Result<Option<f64>> {
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in corpus.val_entries.chunks(cfg.optimizer.batch_size) {
        if chunk.len() < 2 {
            continue;
        }
        let terms = batch_loss(model, cfg, corpus, chunk)?;
        total += terms.total.item();
        batches += 1;
    }
    Ok((batches > 0).then(|| total / batches as f64))
}

/// Run (or resume) pretraining. Writes `model.cgz`, `optim.cgz`,
/// `state.json`, `best.cgz`, and `loss_log.jsonl` under `cfg.out_dir`.
pub fn pretrain(cfg: &RunConfig, resume: bool) -> Result<TrainSummary> {
    cfg.validate()?;
    let out_dir = &cfg.out_dir;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::data(format!("cannot create {}: {e}", out_dir.display())))?;
    let hash = cfg.hash();

    let model = Model::new(cfg.model.clone(), cfg.supervision.temperature_literal, mix_seed(cfg.seed, 1))?;
    let corpus = prepare_corpus(cfg, load_corpus(cfg)?, &model.cfg)?;
    if corpus.train_entries.is_empty() && cfg.optimizer.epochs > 0 {
        return Err(Error::data("training split is empty"));
    }

    let mut optimizer = AdamW::new(model.params(), cfg.optimizer.adamw.clone());
    let mut scheduler = PlateauScheduler::new(
        cfg.optimizer.lr,
        cfg.optimizer.factor,
        cfg.optimizer.patience,
        cfg.optimizer.min_lr,
    );
    let mut start_epoch = 0usize;
    let mut step: u64 = 0;

    let model_path = out_dir.join("model.cgz");
    let optim_path = out_dir.join("optim.cgz");
    let state_path = out_dir.join("state.json");
    let best_path = out_dir.join("best.cgz");

    if resume {
        let text = std::fs::read_to_string(&state_path).map_err(|e| {
            Error::data(format!("cannot resume: missing {}: {e}", state_path.display()))
        })?;
        let state: TrainStateFile = serde_json::from_str(&text)
            .map_err(|e| Error::data(format!("corrupt train state: {e}")))?;
        if state.resume_hash != resume_hash(cfg) {
            return Err(Error::config(format!(
                "resume config {} is incompatible with saved state {}",
                resume_hash(cfg),
                state.resume_hash
            )));
        }
        checkpoint::load(&model_path, model.params())?;
        load_optimizer(&optim_path, &mut optimizer, model.params())?;
        scheduler = state.scheduler;
        start_epoch = state.epoch;
        step = state.step;
    }

    let log_path = out_dir.join("loss_log.jsonl");
    let log_file = if resume {
        std::fs::OpenOptions::new().append(true).create(true).open(&log_path)
    } else {
        File::create(&log_path)
    }
    .map_err(|e| Error::data(format!("cannot open {}: {e}", log_path.display())))?;
    let mut log = BufWriter::new(log_file);
    if !resume {
        writeln!(log, "{}", serde_json::json!({"config_hash": hash, "seed": cfg.seed}))
            .map_err(|e| Error::data(format!("log write failed: {e}")))?;
    }

    let save_state = |epoch: usize,
                      step: u64,
                      optimizer: &AdamW,
                      scheduler: &PlateauScheduler|
     -> Result<()> {
        let meta = CheckpointMeta { config_hash: hash.clone(), seed: cfg.seed, epoch };
        save_model(&model_path, model.params(), &meta)?;
        save_optimizer(&optim_path, optimizer, model.params())?;
        write_json(
            &state_path,
            &TrainStateFile {
                epoch,
                step,
                adam_step: optimizer.step_count(),
                scheduler: scheduler.clone(),
                config_hash: hash.clone(),
                resume_hash: resume_hash(cfg),
                seed: cfg.seed,
            },
        )
    };

    if cfg.optimizer.epochs == 0 || start_epoch >= cfg.optimizer.epochs {
        save_state(start_epoch, step, &optimizer, &scheduler)?;
        return Ok(TrainSummary {
            epochs_run: 0,
            steps: step,
            final_val_loss: None,
            best_val_loss: scheduler.best,
            model_path,
            best_path: best_path.exists().then_some(best_path),
        });
    }

    let mut final_val = None;
    let mut epochs_run = 0usize;
    for epoch in start_epoch..cfg.optimizer.epochs {
        let mut order = corpus.train_entries.clone();
        let mut epoch_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 1000 + epoch as u64));
        order.shuffle(&mut epoch_rng);

        let mut epoch_total = 0.0;
        let mut epoch_batches = 0usize;
        for chunk in order.chunks(cfg.optimizer.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let terms = batch_loss(&model, cfg, &corpus, chunk)?;
            terms
                .total
                .backward()
                .map_err(|e| Error::numeric(format!("backward failed: {e}")))?;
            optimizer.step(model.params(), scheduler.lr);
            epoch_total += terms.total.item();
            epoch_batches += 1;
            step += 1;
            writeln!(
                log,
                "{}",
                serde_json::json!({
                    "epoch": epoch,
                    "step": step,
                    "total": terms.total.item(),
                    "con": terms.contrastive,
                    "cls": terms.classification,
                    "gaze": terms.gaze,
                    "gaze_studies": terms.gaze_studies,
                    "lr": scheduler.lr,
                })
            )
            .map_err(|e| Error::data(format!("log write failed: {e}")))?;
        }

        let train_mean = if epoch_batches > 0 { epoch_total / epoch_batches as f64 } else { 0.0 };
        let val = validation_loss(&model, cfg, &corpus)?.unwrap_or(train_mean);
        if !val.is_finite() {
            return Err(Error::numeric("validation loss is non-finite"));
        }
        if val < scheduler.best {
            let meta = CheckpointMeta { config_hash: hash.clone(), seed: cfg.seed, epoch: epoch + 1 };
            save_model(&best_path, model.params(), &meta)?;
        }
        let lr = scheduler.observe(val);
        final_val = Some(val);
        epochs_run += 1;
        writeln!(
            log,
            "{}",
            serde_json::json!({"epoch": epoch, "val_loss": val, "lr": lr})
        )
        .map_err(|e| Error::data(format!("log write failed: {e}")))?;
        save_state(epoch + 1, step, &optimizer, &scheduler)?;
    }
    log.flush().map_err(|e| Error::data(format!("log flush failed: {e}")))?;

    Ok(TrainSummary {
        epochs_run,
        steps: step,
        final_val_loss: final_val,
        best_val_loss: scheduler.best,
        model_path,
        best_path: best_path.exists().then_some(best_path),
    })
}

/// Build a model and load checkpoint weights into it.
pub fn model_from_checkpoint(cfg: &RunConfig, ckpt: &Path) -> Result<Model> {
    let model = Model::new(cfg.model.clone(), cfg.supervision.temperature_literal, mix_seed(cfg.seed, 1))?;
    checkpoint::load(ckpt, model.params())?;
    Ok(model)
}
