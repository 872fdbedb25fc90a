//! Training-free evaluation: label-relevance retrieval (P@K / R@K),
//! prompt-ensemble zero-shot classification, AUROC with tie handling, and
//! micro/macro F1. Each metric has a brute-force oracle twin in the tests.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Study;
use crate::error::{Error, Result};

/// Aligned image/report embeddings with one disease class per row;
/// embeddings are L2-normalized at construction.
pub struct RetrievalIndex {
    pub image_embeddings: Vec<Vec<f64>>,
    pub report_embeddings: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|x| x / norm).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl RetrievalIndex {
    pub fn new(
        image_embeddings: Vec<Vec<f64>>,
        report_embeddings: Vec<Vec<f64>>,
        labels: Vec<usize>,
    ) -> Result<RetrievalIndex> {
        if image_embeddings.len() != report_embeddings.len()
            || image_embeddings.len() != labels.len()
        {
            return Err(Error::data("retrieval index rows are misaligned"));
        }
        if image_embeddings.is_empty() {
            return Err(Error::data("retrieval index is empty"));
        }
        Ok(RetrievalIndex {
            image_embeddings: image_embeddings.iter().map(|v| l2_normalize(v)).collect(),
            report_embeddings: report_embeddings.iter().map(|v| l2_normalize(v)).collect(),
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Recall convention for label-based retrieval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RecallMode {
    /// Fraction of queries with at least one relevant report in the top K.
    #[default]
    HitRate,
    /// Fraction of all relevant reports retrieved in the top K.
    FractionOfRelevant,
}

/// Rank reports per image query by cosine similarity (ties break toward the
/// lower index) and score relevance as label equality.
pub fn precision_recall_at_k(
    index: &RetrievalIndex,
    k: usize,
    mode: RecallMode,
) -> Result<(f64, f64)> {
    let n = index.len();
    if k == 0 || k > n {
        return Err(Error::data(format!("K={k} out of range for index of {n}")));
    }
    let mut precision_sum = 0.0;
    let mut recall_sum = 0.0;
    for (q, query) in index.image_embeddings.iter().enumerate() {
        let mut order: Vec<usize> = (0..n).collect();
        let scores: Vec<f64> = index.report_embeddings.iter().map(|r| dot(query, r)).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let label = index.labels[q];
        let hits = order[..k].iter().filter(|&&r| index.labels[r] == label).count();
        precision_sum += hits as f64 / k as f64;
        recall_sum += match mode {
            RecallMode::HitRate => {
                if hits > 0 {
                    1.0
                } else {
                    0.0
                }
            }
            RecallMode::FractionOfRelevant => {
                let relevant = index.labels.iter().filter(|l| **l == label).count();
                hits as f64 / relevant as f64
            }
        };
    }
    Ok((precision_sum / n as f64, recall_sum / n as f64))
}

/// The L2-normalized mean embedding of one class's prompt set.
#[derive(Debug, Clone)]
pub struct ClassPrototype {
    pub class_id: usize,
    pub embedding: Vec<f64>,
    pub prompt_count: usize,
}

impl ClassPrototype {
    pub fn from_prompt_embeddings(class_id: usize, prompts: &[Vec<f64>]) -> Result<ClassPrototype> {
        if prompts.is_empty() {
            return Err(Error::data(format!("class {class_id} has no prompts")));
        }
        let d = prompts[0].len();
        let mut mean = vec![0.0; d];
        for p in prompts {
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v / prompts.len() as f64;
            }
        }
        Ok(ClassPrototype {
            class_id,
            embedding: l2_normalize(&mean),
            prompt_count: prompts.len(),
        })
    }
}

/// Cosine scores of each image against each class prototype, `M x C`.
pub fn zero_shot_classify(
    images: &[Vec<f64>],
    prototypes: &[ClassPrototype],
) -> Result<Vec<Vec<f64>>> {
    if prototypes.len() < 2 {
        return Err(Error::data("zero-shot classification needs at least two prototypes"));
    }
    Ok(images
        .iter()
        .map(|img| {
            let img = l2_normalize(img);
            prototypes.iter().map(|p| dot(&img, &p.embedding)).collect()
        })
        .collect())
}

/// AUROC by the rank-sum (Mann-Whitney U) formulation with 0.5 credit for
/// ties. Errors when only one class is present.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::data("auroc inputs are misaligned"));
    }
    let pos = labels.iter().filter(|l| **l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::data("auroc undefined: only one class present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // Average ranks across tie runs (1-based ranks).
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &ix in &order[i..=j] {
            ranks[ix] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = labels
        .iter()
        .zip(&ranks)
        .filter(|(l, _)| **l == 1)
        .map(|(_, r)| r)
        .sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Micro- and macro-averaged F1 over binary prediction / gold matrices.
/// Micro pools TP/FP/FN across classes; macro averages per-class F1 with
/// degenerate classes (no gold positives and no predictions) scored 0.
pub fn f1_scores(pred: &[Vec<bool>], gold: &[Vec<bool>]) -> Result<(f64, f64)> {
    if pred.len() != gold.len() {
        return Err(Error::data("f1 inputs are misaligned"));
    }
    if pred.is_empty() {
        return Ok((0.0, 0.0));
    }
    let c = pred[0].len();
    let mut tp = vec![0usize; c];
    let mut fp = vec![0usize; c];
    let mut fneg = vec![0usize; c];
    for (p_row, g_row) in pred.iter().zip(gold) {
        if p_row.len() != c || g_row.len() != c {
            return Err(Error::data("f1 rows have inconsistent widths"));
        }
        for j in 0..c {
            match (p_row[j], g_row[j]) {
                (true, true) => tp[j] += 1,
                (true, false) => fp[j] += 1,
                (false, true) => fneg[j] += 1,
                (false, false) => {}
            }
        }
    }
    let micro = {
        let tp_all: usize = tp.iter().sum();
        let denom = 2 * tp_all + fp.iter().sum::<usize>() + fneg.iter().sum::<usize>();
        if denom == 0 {
            0.0
        } else {
            2.0 * tp_all as f64 / denom as f64
        }
    };
    let macro_f1 = (0..c)
        .map(|j| {
            let denom = 2 * tp[j] + fp[j] + fneg[j];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[j] as f64 / denom as f64
            }
        })
        .sum::<f64>()
        / c as f64;
    Ok((micro, macro_f1))
}

/// Pick `per_class` single-class studies for each of the first `classes`
/// disease columns; deterministic given the RNG. Returns (study index,
/// class) pairs grouped by class.
pub fn build_balanced_split(
    corpus: &[Study],
    classes: usize,
    per_class: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(usize, usize)>> {
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (ix, study) in corpus.iter().enumerate() {
        if let Some(c) = study.single_class(classes) {
            buckets[c].push(ix);
        }
    }
    let mut out = Vec::with_capacity(classes * per_class);
    for (c, bucket) in buckets.iter_mut().enumerate() {
        if bucket.len() < per_class {
            return Err(Error::data(format!(
                "class {c} has only {} unambiguous studies, need {per_class}",
                bucket.len()
            )));
        }
        bucket.shuffle(rng);
        for &ix in bucket.iter().take(per_class) {
            out.push((ix, c));
        }
    }
    Ok(out)
}

/// Serializable evaluation output with stable key order.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct MetricReport {
    pub p_at_k: BTreeMap<usize, f64>,
    pub r_at_k: BTreeMap<usize, f64>,
    pub auroc_per_class: BTreeMap<usize, f64>,
    pub f1_micro: Option<f64>,
    pub f1_macro: Option<f64>,
    pub seed: u64,
    pub config_hash: String,
}

impl MetricReport {
    pub fn validate_ranges(&self) -> Result<()> {
        let all = self
            .p_at_k
            .values()
            .chain(self.r_at_k.values())
            .chain(self.auroc_per_class.values())
            .chain(self.f1_micro.iter())
            .chain(self.f1_macro.iter());
        for v in all {
            if !(0.0..=1.0).contains(v) {
                return Err(Error::numeric(format!("metric value {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        self.validate_ranges()?;
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::data(format!("serialize metric report: {e}")))?;
        std::fs::write(path, json)
            .map_err(|e| Error::data(format!("write {}: {e}", path.display())))
    }
}

/// Minimal SVG bar chart for metric values in [0, 1].
pub fn write_bar_chart_svg(path: &Path, title: &str, bars: &[(String, f64)]) -> Result<()> {
    let bar_w = 60usize;
    let gap = 20usize;
    let height = 240usize;
    let plot_h = 180usize;
    let width = gap + bars.len() * (bar_w + gap);
    let file = std::fs::File::create(path)
        .map_err(|e| Error::data(format!("create {}: {e}", path.display())))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e: std::io::Error| Error::data(format!("write svg: {e}"));
    writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">"#
    )
    .map_err(io)?;
    writeln!(w, r#"<text x="{}" y="16" text-anchor="middle" font-size="14">{title}</text>"#, width / 2)
        .map_err(io)?;
    for (i, (label, value)) in bars.iter().enumerate() {
        let x = gap + i * (bar_w + gap);
        let h = (value.clamp(0.0, 1.0) * plot_h as f64).round() as usize;
        let y = 30 + plot_h - h;
        writeln!(
            w,
            r##"<rect x="{x}" y="{y}" width="{bar_w}" height="{h}" fill="#4878a8"/>"##
        )
        .map_err(io)?;
        writeln!(
            w,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="11">{label}</text>"#,
            x + bar_w / 2,
            30 + plot_h + 14
        )
        .map_err(io)?;
        writeln!(
            w,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="11">{value:.3}</text>"#,
            x + bar_w / 2,
            y.saturating_sub(4).max(28)
        )
        .map_err(io)?;
    }
    writeln!(w, "</svg>").map_err(io)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn one_hot(c: usize, d: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[c] = 1.0;
        v
    }

    // ---- retrieval ----

    #[test]
    fn orthogonal_classes_retrieve_perfectly() {
        let labels = vec![0, 0, 1, 1, 2, 2];
        let embeds: Vec<Vec<f64>> = labels.iter().map(|c| one_hot(*c, 3)).collect();
        let index = RetrievalIndex::new(embeds.clone(), embeds, labels).unwrap();
        let (p1, r1) = precision_recall_at_k(&index, 1, RecallMode::HitRate).unwrap();
        assert_eq!(p1, 1.0);
        assert_eq!(r1, 1.0);
    }

    #[test]
    fn chance_level_precision_on_random_labels() {
        let mut r = rng(40);
        let n = 600;
        let classes = 5;
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..classes)).collect();
        let rand_vec = |r: &mut ChaCha8Rng| -> Vec<f64> {
            (0..8).map(|_| r.gen_range(-1.0..1.0)).collect()
        };
        let images: Vec<Vec<f64>> = (0..n).map(|_| rand_vec(&mut r)).collect();
        let reports: Vec<Vec<f64>> = (0..n).map(|_| rand_vec(&mut r)).collect();
        let index = RetrievalIndex::new(images, reports, labels).unwrap();
        let (p5, _) = precision_recall_at_k(&index, 5, RecallMode::HitRate).unwrap();
        assert!((p5 - 0.2).abs() < 0.05, "P@5 = {p5}, expected near chance 0.2");
    }

    #[test]
    fn k_equals_n_gives_class_prior() {
        let mut r = rng(41);
        let n = 60;
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let rand_vec = |r: &mut ChaCha8Rng| -> Vec<f64> {
            (0..6).map(|_| r.gen_range(-1.0..1.0)).collect()
        };
        let images: Vec<Vec<f64>> = (0..n).map(|_| rand_vec(&mut r)).collect();
        let reports: Vec<Vec<f64>> = (0..n).map(|_| rand_vec(&mut r)).collect();
        let index = RetrievalIndex::new(images, reports, labels).unwrap();
        let (p, _) = precision_recall_at_k(&index, n, RecallMode::HitRate).unwrap();
        // Every class holds exactly a third of the corpus.
        assert!((p - 1.0 / 3.0).abs() < 1e-12);
    }

    /// Brute-force ranking oracle: explicit scan for the top-K.
    fn pr_at_k_oracle(index: &RetrievalIndex, k: usize, mode: RecallMode) -> (f64, f64) {
        let n = index.len();
        let mut psum = 0.0;
        let mut rsum = 0.0;
        for q in 0..n {
            let scores: Vec<f64> = index
                .report_embeddings
                .iter()
                .map(|r| dot(&index.image_embeddings[q], r))
                .collect();
            let mut remaining: Vec<usize> = (0..n).collect();
            let mut top = Vec::with_capacity(k);
            for _ in 0..k {
                let mut best = 0;
                for (pos, &cand) in remaining.iter().enumerate() {
                    let b = remaining[best];
                    if scores[cand] > scores[b] || (scores[cand] == scores[b] && cand < b) {
                        best = pos;
                    }
                }
                top.push(remaining.remove(best));
            }
            let hits = top.iter().filter(|&&r| index.labels[r] == index.labels[q]).count();
            psum += hits as f64 / k as f64;
            rsum += match mode {
                RecallMode::HitRate => (hits > 0) as usize as f64,
                RecallMode::FractionOfRelevant => {
                    let rel = index.labels.iter().filter(|l| **l == index.labels[q]).count();
                    hits as f64 / rel as f64
                }
            };
        }
        (psum / n as f64, rsum / n as f64)
    }

    #[test]
    fn precision_recall_match_brute_force_oracle() {
        let mut r = rng(42);
        for trial in 0..20 {
            let n = r.gen_range(5..=60);
            let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..4)).collect();
            let quantized = |r: &mut ChaCha8Rng| -> Vec<f64> {
                // Coarse values provoke score ties to exercise tie-breaking.
                (0..4).map(|_| r.gen_range(-2..=2) as f64).collect()
            };
            let images: Vec<Vec<f64>> = (0..n).map(|_| quantized(&mut r)).collect();
            let reports: Vec<Vec<f64>> = (0..n).map(|_| quantized(&mut r)).collect();
            let index = RetrievalIndex::new(images, reports, labels).unwrap();
            for k in [1, 2, n.min(5), n] {
                for mode in [RecallMode::HitRate, RecallMode::FractionOfRelevant] {
                    let got = precision_recall_at_k(&index, k, mode).unwrap();
                    let expect = pr_at_k_oracle(&index, k, mode);
                    assert_eq!(got, expect, "trial {trial}, k={k}, mode {mode:?}");
                }
            }
        }
    }

    /// Hit-rate recall never falls as K grows (a theorem for any index);
    /// precision is nonincreasing whenever each query ranks all of its
    /// relevant reports above the irrelevant ones, which the separated
    /// index guarantees.
    #[test]
    fn recall_monotone_everywhere_precision_monotone_when_separated() {
        let mut r = rng(43);
        let n = 40;
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..3)).collect();
        let images: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..5).map(|_| r.gen_range(-1.0..1.0)).collect())
            .collect();
        let reports: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..5).map(|_| r.gen_range(-1.0..1.0)).collect())
            .collect();
        let index = RetrievalIndex::new(images, reports, labels.clone()).unwrap();
        let mut prev_r = -1.0;
        for k in 1..=n {
            let (_, rec) = precision_recall_at_k(&index, k, RecallMode::HitRate).unwrap();
            assert!(rec >= prev_r - 1e-12, "R@K fell at k={k}");
            prev_r = rec.max(prev_r);
        }

        let separated: Vec<Vec<f64>> = labels.iter().map(|c| one_hot(*c, 3)).collect();
        let index = RetrievalIndex::new(separated.clone(), separated, labels).unwrap();
        let mut prev_p = f64::INFINITY;
        for k in 1..=n {
            let (p, _) = precision_recall_at_k(&index, k, RecallMode::HitRate).unwrap();
            assert!(p <= prev_p + 1e-12, "P@K rose at k={k}");
            prev_p = p.min(prev_p);
        }
    }

    #[test]
    fn k_out_of_range_is_an_error() {
        let index = RetrievalIndex::new(
            vec![vec![1.0, 0.0]],
            vec![vec![1.0, 0.0]],
            vec![0],
        )
        .unwrap();
        assert!(precision_recall_at_k(&index, 2, RecallMode::HitRate).is_err());
        assert!(precision_recall_at_k(&index, 0, RecallMode::HitRate).is_err());
    }

    // ---- zero-shot ----

    #[test]
    fn image_equal_to_prototype_wins() {
        let protos = vec![
            ClassPrototype::from_prompt_embeddings(0, &[one_hot(0, 4)]).unwrap(),
            ClassPrototype::from_prompt_embeddings(1, &[one_hot(1, 4)]).unwrap(),
        ];
        let scores = zero_shot_classify(&[one_hot(1, 4)], &protos).unwrap();
        assert!(scores[0][1] > scores[0][0]);
    }

    #[test]
    fn duplicate_prompts_leave_prototype_unchanged() {
        let p = vec![0.3, -0.4, 0.8];
        let one = ClassPrototype::from_prompt_embeddings(0, &[p.clone()]).unwrap();
        let ten = ClassPrototype::from_prompt_embeddings(0, &vec![p; 10]).unwrap();
        for (a, b) in one.embedding.iter().zip(&ten.embedding) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(ten.prompt_count, 10);
    }

    #[test]
    fn two_class_scores_match_manual_cosine() {
        let protos = vec![
            ClassPrototype::from_prompt_embeddings(0, &[vec![1.0, 0.0]]).unwrap(),
            ClassPrototype::from_prompt_embeddings(1, &[vec![1.0, 1.0]]).unwrap(),
        ];
        let scores = zero_shot_classify(&[vec![2.0, 0.0]], &protos).unwrap();
        assert!((scores[0][0] - 1.0).abs() < 1e-12);
        assert!((scores[0][1] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn argmax_invariant_to_image_rescaling() {
        let mut r = rng(44);
        let protos: Vec<ClassPrototype> = (0..4)
            .map(|c| {
                let prompts: Vec<Vec<f64>> = (0..3)
                    .map(|_| (0..6).map(|_| r.gen_range(-1.0..1.0)).collect())
                    .collect();
                ClassPrototype::from_prompt_embeddings(c, &prompts).unwrap()
            })
            .collect();
        let images: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..6).map(|_| r.gen_range(-1.0..1.0)).collect())
            .collect();
        let argmax = |scores: &[Vec<f64>]| -> Vec<usize> {
            scores
                .iter()
                .map(|row| {
                    (0..row.len())
                        .max_by(|a, b| row[*a].partial_cmp(&row[*b]).unwrap())
                        .unwrap()
                })
                .collect()
        };
        let base = argmax(&zero_shot_classify(&images, &protos).unwrap());
        for c in [0.01, 3.0, 250.0] {
            let scaled: Vec<Vec<f64>> = images
                .iter()
                .map(|v| v.iter().map(|x| x * c).collect())
                .collect();
            assert_eq!(base, argmax(&zero_shot_classify(&scaled, &protos).unwrap()));
        }
    }

    #[test]
    fn single_prototype_rejected() {
        let protos = vec![ClassPrototype::from_prompt_embeddings(0, &[one_hot(0, 2)]).unwrap()];
        assert!(zero_shot_classify(&[one_hot(0, 2)], &protos).is_err());
    }

    // ---- AUROC ----

    /// O(N^2) pairwise oracle with explicit 0.5 tie credit.
    fn auroc_oracle(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn perfect_ranking_scores_one() {
        assert_eq!(auroc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
    }

    #[test]
    fn all_ties_score_half() {
        assert_eq!(auroc(&[0.5, 0.5, 0.5, 0.5], &[1, 0, 1, 0]).unwrap(), 0.5);
    }

    #[test]
    fn auroc_matches_pairwise_oracle_exactly() {
        let mut r = rng(45);
        for _ in 0..100 {
            let n = r.gen_range(5..=200);
            // Quantized scores force plenty of ties.
            let scores: Vec<f64> = (0..n).map(|_| r.gen_range(0..20) as f64 / 20.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| r.gen_range(0..2)).collect();
            labels[0] = 1;
            labels[1] = 0;
            let got = auroc(&scores, &labels).unwrap();
            let expect = auroc_oracle(&scores, &labels);
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn auroc_invariant_under_monotone_transform() {
        let mut r = rng(46);
        let scores: Vec<f64> = (0..50).map(|_| r.gen_range(-2.0..2.0)).collect();
        let mut labels: Vec<u8> = (0..50).map(|_| r.gen_range(0..2)).collect();
        labels[0] = 1;
        labels[1] = 0;
        let base = auroc(&scores, &labels).unwrap();
        let squashed: Vec<f64> = scores.iter().map(|s| s.tanh()).collect();
        let shifted: Vec<f64> = scores.iter().map(|s| 3.0 * s + 11.0).collect();
        assert_eq!(base, auroc(&squashed, &labels).unwrap());
        assert_eq!(base, auroc(&shifted, &labels).unwrap());
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(auroc(&[0.1, 0.9], &[1, 1]).is_err());
    }

    // ---- F1 ----

    #[test]
    fn exact_predictions_score_one() {
        let gold = vec![vec![true, false], vec![false, true]];
        let (micro, macro_f1) = f1_scores(&gold, &gold).unwrap();
        assert_eq!(micro, 1.0);
        assert_eq!(macro_f1, 1.0);
    }

    #[test]
    fn all_negative_predictions_score_zero_micro() {
        let gold = vec![vec![true, false], vec![true, true]];
        let pred = vec![vec![false, false], vec![false, false]];
        let (micro, _) = f1_scores(&pred, &gold).unwrap();
        assert_eq!(micro, 0.0);
    }

    #[test]
    fn confusion_counts_hand_case() {
        // class 0: TP=1, FP=1, FN=1 -> F1 = 2/(2+1+1) = 0.5
        // class 1: TP=1, FP=0, FN=0 -> F1 = 1
        let gold = vec![vec![true, true], vec![true, false], vec![false, false]];
        let pred = vec![vec![true, true], vec![false, false], vec![true, false]];
        let (micro, macro_f1) = f1_scores(&pred, &gold).unwrap();
        // Pooled: TP=2, FP=1, FN=1 -> 2*2/(4+1+1)
        assert!((micro - 4.0 / 6.0).abs() < 1e-15);
        assert!((macro_f1 - 0.75).abs() < 1e-15);
    }

    #[test]
    fn micro_equals_macro_with_one_class() {
        let mut r = rng(47);
        for _ in 0..20 {
            let n = r.gen_range(1..30);
            let gold: Vec<Vec<bool>> = (0..n).map(|_| vec![r.gen_bool(0.5)]).collect();
            let pred: Vec<Vec<bool>> = (0..n).map(|_| vec![r.gen_bool(0.5)]).collect();
            let (micro, macro_f1) = f1_scores(&pred, &gold).unwrap();
            assert_eq!(micro, macro_f1);
        }
    }

    // ---- balanced split ----

    fn corpus_with_classes(per_class: usize, classes: usize) -> Vec<Study> {
        let spec = crate::synth::SyntheticSpec {
            n_studies: per_class * classes,
            n_classes: classes,
            off_positive_fraction: 0.0,
            uncertain_fraction: 0.0,
            gaze_fraction: 0.0,
            seed: 3,
            ..Default::default()
        };
        crate::synth::generate(&spec).unwrap()
    }

    #[test]
    fn split_is_balanced_and_sized() {
        let corpus = corpus_with_classes(10, 5);
        let split = build_balanced_split(&corpus, 5, 4, &mut rng(1)).unwrap();
        assert_eq!(split.len(), 20);
        for c in 0..5 {
            assert_eq!(split.iter().filter(|(_, cls)| *cls == c).count(), 4);
        }
    }

    #[test]
    fn different_seeds_select_differently() {
        let corpus = corpus_with_classes(12, 5);
        let a = build_balanced_split(&corpus, 5, 4, &mut rng(1)).unwrap();
        let b = build_balanced_split(&corpus, 5, 4, &mut rng(2)).unwrap();
        assert_ne!(a, b);
        let classes = |s: &[(usize, usize)]| -> Vec<usize> {
            let mut v: Vec<usize> = s.iter().map(|(_, c)| *c).collect();
            v.sort();
            v
        };
        assert_eq!(classes(&a), classes(&b));
    }

    #[test]
    fn per_class_one_gives_one_row_each() {
        let corpus = corpus_with_classes(3, 5);
        let split = build_balanced_split(&corpus, 5, 1, &mut rng(9)).unwrap();
        assert_eq!(split.len(), 5);
    }

    #[test]
    fn insufficient_class_counts_error() {
        let corpus = corpus_with_classes(2, 5);
        assert!(build_balanced_split(&corpus, 5, 100, &mut rng(1)).is_err());
    }

    // ---- report / plots ----

    #[test]
    fn metric_report_serializes_with_stable_keys() {
        let mut report = MetricReport {
            seed: 7,
            config_hash: "abc".into(),
            ..Default::default()
        };
        report.p_at_k.insert(10, 0.5);
        report.p_at_k.insert(1, 0.9);
        report.p_at_k.insert(5, 0.7);
        let json = serde_json::to_string(&report).unwrap();
        let p1 = json.find("\"1\"").unwrap();
        let p5 = json.find("\"5\"").unwrap();
        let p10 = json.find("\"10\"").unwrap();
        assert!(p1 < p5 && p5 < p10);
        assert_eq!(json, serde_json::to_string(&report).unwrap());
    }

    #[test]
    fn out_of_range_metrics_rejected() {
        let mut report = MetricReport::default();
        report.p_at_k.insert(1, 1.5);
        assert!(report.validate_ranges().is_err());
    }

    #[test]
    fn svg_chart_writes_valid_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p_at_k.svg");
        write_bar_chart_svg(
            &path,
            "P@K",
            &[("P@1".into(), 0.9), ("P@5".into(), 0.7)],
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.contains("P@5"));
        assert!(text.trim_end().ends_with("</svg>"));
    }
}
