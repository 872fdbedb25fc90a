//! Subcommand implementations shared by the CLI and the acceptance tests:
//! retrieval evaluation, prompt-ensemble zero-shot classification, and gaze
//! prior export. Gaze data never enters these paths; it supervises
//! pretraining only.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::Study;
use crate::error::{Error, Result};
use crate::eval::{
    auroc, build_balanced_split, f1_scores, precision_recall_at_k, write_bar_chart_svg,
    zero_shot_classify, ClassPrototype, MetricReport, RetrievalIndex,
};
use crate::gaze::{build_gaze_prior, filter_fixations, render_heatmap};
use crate::model::{Model, Role};
use crate::train::{load_corpus, mix_seed, model_from_checkpoint};

fn embed_image(model: &Model, study: &Study, use_context: bool) -> Result<Vec<f64>> {
    let enc = model.encode_study_image(study, 0, use_context)?;
    Ok(enc.global.data().to_vec())
}

fn embed_text(model: &Model, tokens: &[u32], role: Role) -> Result<Vec<f64>> {
    let seq = model.encode_text(tokens, role)?;
    Ok(model.global_pool(&seq)?.data().to_vec())
}

fn effective_k(k: usize, n: usize, clamp: bool) -> Result<usize> {
    if k <= n {
        Ok(k)
    } else if clamp {
        Ok(n)
    } else {
        Err(Error::data(format!(
            "K={k} exceeds index size {n}; set eval.clamp_k=true to clamp"
        )))
    }
}

/// Balanced image-to-report retrieval over single-class studies.
pub fn eval_retrieval(cfg: &RunConfig, ckpt: &Path) -> Result<MetricReport> {
    let model = model_from_checkpoint(cfg, ckpt)?;
    let corpus = load_corpus(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 2));
    let split = build_balanced_split(&corpus, cfg.eval.n_classes, cfg.eval.per_class, &mut rng)?;

    let mut images = Vec::with_capacity(split.len());
    let mut reports = Vec::with_capacity(split.len());
    let mut labels = Vec::with_capacity(split.len());
    for (study_ix, class) in &split {
        let study = &corpus[*study_ix];
        images.push(embed_image(&model, study, cfg.supervision.use_context)?);
        reports.push(embed_text(&model, &study.report, Role::Findings)?);
        labels.push(*class);
    }
    let index = RetrievalIndex::new(images, reports, labels)?;

    let mut report = MetricReport {
        seed: cfg.seed,
        config_hash: cfg.hash(),
        ..Default::default()
    };
    for &k in &cfg.eval.precision_ks {
        let k = effective_k(k, index.len(), cfg.eval.clamp_k)?;
        let (p, _) = precision_recall_at_k(&index, k, cfg.eval.recall_mode)?;
        report.p_at_k.insert(k, p);
    }
    for &k in &cfg.eval.recall_ks {
        let k = effective_k(k, index.len(), cfg.eval.clamp_k)?;
        let (_, r) = precision_recall_at_k(&index, k, cfg.eval.recall_mode)?;
        report.r_at_k.insert(k, r);
    }
    Ok(report)
}

/// Prompt file: JSON object mapping class id (as a string) to one or more
/// prompt token lists.
pub type PromptFile = BTreeMap<String, Vec<Vec<u32>>>;

pub fn read_prompt_file(path: &Path) -> Result<PromptFile> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read prompts {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::data(format!("malformed prompt file: {e}")))
}

/// Zero-shot classification against prompt-ensemble prototypes; per-class
/// AUROC plus micro/macro F1 of the argmax predictions.
pub fn eval_zeroshot(cfg: &RunConfig, ckpt: &Path, prompts: &PromptFile) -> Result<MetricReport> {
    let model = model_from_checkpoint(cfg, ckpt)?;
    let corpus = load_corpus(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 2));
    let split = build_balanced_split(&corpus, cfg.eval.n_classes, cfg.eval.per_class, &mut rng)?;

    let mut prototypes = Vec::with_capacity(cfg.eval.n_classes);
    for class in 0..cfg.eval.n_classes {
        let lists = prompts
            .get(&class.to_string())
            .ok_or_else(|| Error::data(format!("prompt file is missing class {class}")))?;
        if lists.is_empty() {
            return Err(Error::data(format!("class {class} has zero prompts")));
        }
        let embedded: Vec<Vec<f64>> = lists
            .iter()
            .map(|tokens| embed_text(&model, tokens, Role::Findings))
            .collect::<Result<_>>()?;
        prototypes.push(ClassPrototype::from_prompt_embeddings(class, &embedded)?);
    }

    let mut images = Vec::with_capacity(split.len());
    let mut gold_classes = Vec::with_capacity(split.len());
    for (study_ix, class) in &split {
        images.push(embed_image(&model, &corpus[*study_ix], cfg.supervision.use_context)?);
        gold_classes.push(*class);
    }
    let scores = zero_shot_classify(&images, &prototypes)?;

    let mut report = MetricReport {
        seed: cfg.seed,
        config_hash: cfg.hash(),
        ..Default::default()
    };
    for class in 0..cfg.eval.n_classes {
        let class_scores: Vec<f64> = scores.iter().map(|row| row[class]).collect();
        let labels: Vec<u8> = gold_classes.iter().map(|g| (*g == class) as u8).collect();
        report.auroc_per_class.insert(class, auroc(&class_scores, &labels)?);
    }
    let pred: Vec<Vec<bool>> = scores
        .iter()
        .map(|row| {
            let best = (0..row.len())
                .max_by(|a, b| row[*a].partial_cmp(&row[*b]).unwrap())
                .unwrap();
            (0..row.len()).map(|c| c == best).collect()
        })
        .collect();
    let gold: Vec<Vec<bool>> = gold_classes
        .iter()
        .map(|g| (0..cfg.eval.n_classes).map(|c| c == *g).collect())
        .collect();
    let (micro, macro_f1) = f1_scores(&pred, &gold)?;
    report.f1_micro = Some(micro);
    report.f1_macro = Some(macro_f1);
    Ok(report)
}

pub fn emit_retrieval_plots(report: &MetricReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::data(format!("cannot create {}: {e}", out_dir.display())))?;
    let mut written = Vec::new();
    let p_bars: Vec<(String, f64)> = report
        .p_at_k
        .iter()
        .map(|(k, v)| (format!("P@{k}"), *v))
        .collect();
    if !p_bars.is_empty() {
        let path = out_dir.join("precision_at_k.svg");
        write_bar_chart_svg(&path, &format!("Precision@K ({})", report.config_hash), &p_bars)?;
        written.push(path);
    }
    let r_bars: Vec<(String, f64)> = report
        .r_at_k
        .iter()
        .map(|(k, v)| (format!("R@{k}"), *v))
        .collect();
    if !r_bars.is_empty() {
        let path = out_dir.join("recall_at_k.svg");
        write_bar_chart_svg(&path, &format!("Recall@K ({})", report.config_hash), &r_bars)?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Serialize)]
struct PriorExport<'a> {
    study_id: &'a str,
    config_hash: &'a str,
    seed: u64,
    rows: usize,
    patches: usize,
    matrix: &'a [f64],
    mask: &'a [bool],
    kept_segments: &'a [usize],
    dropped_segments: &'a [usize],
}

/// Binary PGM (P5) of a non-negative map scaled to its maximum.
fn write_pgm(path: &Path, map: &[f64], h: usize, w: usize) -> Result<()> {
    let peak = map.iter().copied().fold(0.0, f64::max);
    let file = std::fs::File::create(path)
        .map_err(|e| Error::data(format!("create {}: {e}", path.display())))?;
    let mut out = std::io::BufWriter::new(file);
    let io = |e: std::io::Error| Error::data(format!("pgm write failed: {e}"));
    write!(out, "P5\n{w} {h}\n255\n").map_err(io)?;
    let bytes: Vec<u8> = map
        .iter()
        .map(|v| if peak > 0.0 { (v / peak * 255.0).round() as u8 } else { 0 })
        .collect();
    out.write_all(&bytes).map_err(io)?;
    Ok(())
}

/// Write each gaze study's prior rows as JSON plus per-segment heatmap PGMs.
pub fn gaze_export(cfg: &RunConfig, out_dir: &Path) -> Result<usize> {
    let corpus = load_corpus(cfg)?;
    let grid = cfg.model.patch_grid();
    let hash = cfg.hash();
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::data(format!("cannot create {}: {e}", out_dir.display())))?;
    let mut exported = 0usize;
    for study in &corpus {
        let Some(session) = &study.gaze else { continue };
        let prior = match build_gaze_prior(
            session,
            cfg.model.image_size,
            cfg.model.image_size,
            grid,
            grid,
            cfg.supervision.rho,
            &cfg.gaze,
        ) {
            Ok(p) => p,
            Err(e) => {
                eprintln!("skipping study {}: {e}", study.study_id);
                continue;
            }
        };
        let export = PriorExport {
            study_id: &study.study_id,
            config_hash: &hash,
            seed: cfg.seed,
            rows: prior.rows,
            patches: prior.patches,
            matrix: &prior.matrix,
            mask: &prior.mask,
            kept_segments: &prior.kept_segments,
            dropped_segments: &prior.dropped_segments,
        };
        let json = serde_json::to_string_pretty(&export)
            .map_err(|e| Error::data(format!("serialize prior: {e}")))?;
        let json_path = out_dir.join(format!("{}.prior.json", study.study_id));
        std::fs::write(&json_path, json)
            .map_err(|e| Error::data(format!("write {}: {e}", json_path.display())))?;

        let stable = filter_fixations(&session.fixations, cfg.gaze.min_duration);
        for &seg_ix in &prior.kept_segments {
            let seg = &session.segments[seg_ix];
            let subset: Vec<_> = match seg.level {
                crate::gaze::SegmentLevel::Paragraph => stable.clone(),
                crate::gaze::SegmentLevel::Sentence => stable
                    .iter()
                    .filter(|f| f.t_start <= seg.t_end && f.t_end >= seg.t_start)
                    .cloned()
                    .collect(),
            };
            let heat = render_heatmap(&subset, cfg.model.image_size, cfg.model.image_size, cfg.gaze.sigma)
                .map_err(|e| Error::data(format!("heatmap failed: {e}")))?;
            let pgm_path = out_dir.join(format!("{}.seg{}.pgm", study.study_id, seg_ix));
            write_pgm(&pgm_path, &heat, cfg.model.image_size, cfg.model.image_size)?;
        }
        exported += 1;
    }
    if exported == 0 {
        return Err(Error::data("no gaze sessions in corpus"));
    }
    Ok(exported)
}

/// Generate the configured synthetic corpus and write it as JSONL.
pub fn gen_corpus(cfg: &RunConfig, out: &Path) -> Result<usize> {
    let corpus = match (&cfg.data.corpus, &cfg.data.synthetic) {
        (Some(_), _) => {
            return Err(Error::config(
                "gen-corpus needs data.synthetic, but data.corpus is set",
            ))
        }
        (None, Some(spec)) => crate::synth::generate(spec)?,
        (None, None) => crate::synth::generate(&crate::synth::SyntheticSpec {
            seed: cfg.seed,
            ..Default::default()
        })?,
    };
    crate::data::write_corpus(&corpus, out)?;
    Ok(corpus.len())
}
