//! Eye-tracking fixations to patch-level probability priors.
//!
//! Each transcript segment gets a heatmap built from the fixations that
//! overlap its time window (the paragraph segment uses all of them), which
//! is then pooled to patch granularity, masked outside fixation regions,
//! sharpened to the top-rho fraction of non-zero cells, and normalized into
//! a probability distribution. Segments whose rows come out empty are
//! dropped and their indices recorded so downstream consumers can align
//! transcript embeddings with the surviving rows.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GazeError {
    #[error("empty prior: no mass left after masking/sharpening")]
    EmptyPrior,
    #[error("gaze session has no segments")]
    NoSegments,
    #[error("all prior rows are empty")]
    AllRowsEmpty,
    #[error("sigma must be positive, got {0}")]
    InvalidSigma(f64),
    #[error("rho must lie in (0, 1], got {0}")]
    InvalidRho(f64),
    #[error("heatmap grid must be at least 1x1")]
    EmptyGrid,
}

pub type Result<T> = std::result::Result<T, GazeError>;

/// A stable gaze dwell in normalized image coordinates.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Fixation {
    pub x: f64,
    pub y: f64,
    pub t_start: f64,
    pub t_end: f64,
}

impl Fixation {
    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentLevel {
    Sentence,
    Paragraph,
}

/// A time-stamped transcript span (a sentence or the full paragraph).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TranscriptSegment {
    pub text: Vec<u32>,
    pub t_start: f64,
    pub t_end: f64,
    pub level: SegmentLevel,
}

/// One recording: fixations plus the synchronized transcript segments.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GazeSession {
    pub fixations: Vec<Fixation>,
    pub segments: Vec<TranscriptSegment>,
}

/// Line format for standalone gaze-session JSONL files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GazeSessionRecord {
    pub study_id: String,
    pub image_id: String,
    pub fixations: Vec<Fixation>,
    pub segments: Vec<TranscriptSegment>,
}

/// Per-segment probability distributions over patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GazePrior {
    pub rows: usize,
    pub patches: usize,
    /// Row-major `rows x patches`; each row sums to 1.
    pub matrix: Vec<f64>,
    /// True where a cell was retained by masking + sharpening.
    pub mask: Vec<bool>,
    /// Indices into the original segment list for rows that survived.
    pub kept_segments: Vec<usize>,
    /// Indices of segments dropped for having no prior mass.
    pub dropped_segments: Vec<usize>,
}

impl GazePrior {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.matrix[i * self.patches..(i + 1) * self.patches]
    }

    /// Column sums (total prior mass landing on each patch).
    pub fn patch_mass(&self) -> Vec<f64> {
        let mut mass = vec![0.0; self.patches];
        for r in 0..self.rows {
            for (j, v) in self.row(r).iter().enumerate() {
                mass[j] += v;
            }
        }
        mass
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GazePipelineConfig {
    /// Gaussian spread as a fraction of image width.
    pub sigma: f64,
    /// Fixations shorter than this are discarded (seconds).
    pub min_duration: f64,
    /// Patches farther than this many patch widths from every fixation are
    /// zeroed.
    pub mask_radius: f64,
}

impl Default for GazePipelineConfig {
    fn default() -> Self {
        GazePipelineConfig {
            sigma: 0.05,
            min_duration: 0.1,
            mask_radius: 1.5,
        }
    }
}

/// Keep only fixations with duration >= `min_duration`, preserving order.
pub fn filter_fixations(raw: &[Fixation], min_duration: f64) -> Vec<Fixation> {
    raw.iter()
        .filter(|f| f.duration() >= min_duration)
        .cloned()
        .collect()
}

/// Sum of duration-weighted isotropic Gaussians over an `h x w` cell grid.
/// Cell centers live at ((col+0.5)/w, (row+0.5)/h) in normalized coordinates.
pub fn render_heatmap(fixations: &[Fixation], h: usize, w: usize, sigma: f64) -> Result<Vec<f64>> {
    if sigma <= 0.0 {
        return Err(GazeError::InvalidSigma(sigma));
    }
    if h == 0 || w == 0 {
        return Err(GazeError::EmptyGrid);
    }
    let mut map = vec![0.0; h * w];
    let inv_two_sigma_sq = 1.0 / (2.0 * sigma * sigma);
    for f in fixations {
        let amp = f.duration();
        for row in 0..h {
            let cy = (row as f64 + 0.5) / h as f64;
            let dy = cy - f.y;
            for col in 0..w {
                let cx = (col as f64 + 0.5) / w as f64;
                let dx = cx - f.x;
                map[row * w + col] += amp * (-(dx * dx + dy * dy) * inv_two_sigma_sq).exp();
            }
        }
    }
    Ok(map)
}

/// Bilinear resize of an `h x w` map to `out_h x out_w`.
pub fn resize_bilinear(map: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let mut out = vec![0.0; out_h * out_w];
    for i in 0..out_h {
        // Map output cell centers onto input cell-center coordinates.
        let sy = ((i as f64 + 0.5) * h as f64 / out_h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for j in 0..out_w {
            let sx = ((j as f64 + 0.5) * w as f64 / out_w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            let top = map[y0 * w + x0] * (1.0 - fx) + map[y0 * w + x1] * fx;
            let bot = map[y1 * w + x0] * (1.0 - fx) + map[y1 * w + x1] * fx;
            out[i * out_w + j] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Mean-pool an `h x w` map down to `rows x cols` patches. Dimensions that
/// do not divide evenly are bilinearly resized first.
pub fn pool_to_patches(map: &[f64], h: usize, w: usize, rows: usize, cols: usize) -> Vec<f64> {
    let (map, h, w) = if h % rows == 0 && w % cols == 0 {
        (map.to_vec(), h, w)
    } else {
        let oh = rows * h.div_ceil(rows);
        let ow = cols * w.div_ceil(cols);
        (resize_bilinear(map, h, w, oh, ow), oh, ow)
    };
    let ph = h / rows;
    let pw = w / cols;
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let mut s = 0.0;
            for i in 0..ph {
                for j in 0..pw {
                    s += map[(r * ph + i) * w + (c * pw + j)];
                }
            }
            out[r * cols + c] = s / (ph * pw) as f64;
        }
    }
    out
}

/// Zero patches whose centers lie farther than `radius` (in patch widths)
/// from every fixation.
pub fn mask_fixation_regions(
    patch_map: &[f64],
    rows: usize,
    cols: usize,
    fixations: &[Fixation],
    radius: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; patch_map.len()];
    for r in 0..rows {
        for c in 0..cols {
            let center = (c as f64 + 0.5, r as f64 + 0.5);
            let near = fixations.iter().any(|f| {
                let fx = f.x * cols as f64;
                let fy = f.y * rows as f64;
                let d2 = (center.0 - fx).powi(2) + (center.1 - fy).powi(2);
                d2 <= radius * radius
            });
            if near {
                out[r * cols + c] = patch_map[r * cols + c];
            }
        }
    }
    out
}

/// Keep the `ceil(rho * nnz)` largest non-zero entries, zero the rest.
/// Ties break toward the lower patch index.
pub fn top_rho_sharpen(patch_map: &[f64], rho: f64) -> Result<Vec<f64>> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(GazeError::InvalidRho(rho));
    }
    let nnz: Vec<usize> = (0..patch_map.len()).filter(|&i| patch_map[i] != 0.0).collect();
    if nnz.is_empty() {
        return Err(GazeError::EmptyPrior);
    }
    let keep = (rho * nnz.len() as f64).ceil() as usize;
    let mut ranked = nnz;
    // Descending by value; equal values prefer the lower index.
    ranked.sort_by(|&a, &b| {
        patch_map[b]
            .partial_cmp(&patch_map[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut out = vec![0.0; patch_map.len()];
    for &i in ranked.iter().take(keep) {
        out[i] = patch_map[i];
    }
    Ok(out)
}

/// Scale a non-negative map into a probability vector.
pub fn normalize_prior(patch_map: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = patch_map.iter().sum();
    if total <= 0.0 {
        return Err(GazeError::EmptyPrior);
    }
    Ok(patch_map.iter().map(|v| v / total).collect())
}

fn overlaps(f: &Fixation, seg: &TranscriptSegment) -> bool {
    f.t_start <= seg.t_end && f.t_end >= seg.t_start
}

/// Full per-segment pipeline. `heat_h`/`heat_w` set the heatmap render grid;
/// `patch_rows`/`patch_cols` the pooled patch grid.
#[allow(clippy::too_many_arguments)]
pub fn build_gaze_prior(
    session: &GazeSession,
    heat_h: usize,
    heat_w: usize,
    patch_rows: usize,
    patch_cols: usize,
    rho: f64,
    cfg: &GazePipelineConfig,
) -> Result<GazePrior> {
    if session.segments.is_empty() {
        return Err(GazeError::NoSegments);
    }
    let stable = filter_fixations(&session.fixations, cfg.min_duration);
    let patches = patch_rows * patch_cols;
    let mut matrix = Vec::new();
    let mut mask = Vec::new();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (i, seg) in session.segments.iter().enumerate() {
        let subset: Vec<Fixation> = match seg.level {
            SegmentLevel::Paragraph => stable.clone(),
            SegmentLevel::Sentence => {
                stable.iter().filter(|f| overlaps(f, seg)).cloned().collect()
            }
        };
        let row = segment_row(&subset, heat_h, heat_w, patch_rows, patch_cols, rho, cfg);
        match row {
            Ok(r) => {
                mask.extend(r.iter().map(|v| *v != 0.0));
                matrix.extend(r);
                kept.push(i);
            }
            Err(GazeError::EmptyPrior) => dropped.push(i),
            Err(e) => return Err(e),
        }
    }
    if kept.is_empty() {
        return Err(GazeError::AllRowsEmpty);
    }
    Ok(GazePrior {
        rows: kept.len(),
        patches,
        matrix,
        mask,
        kept_segments: kept,
        dropped_segments: dropped,
    })
}

fn segment_row(
    fixations: &[Fixation],
    heat_h: usize,
    heat_w: usize,
    patch_rows: usize,
    patch_cols: usize,
    rho: f64,
    cfg: &GazePipelineConfig,
) -> Result<Vec<f64>> {
    if fixations.is_empty() {
        return Err(GazeError::EmptyPrior);
    }
    let heat = render_heatmap(fixations, heat_h, heat_w, cfg.sigma)?;
    let pooled = pool_to_patches(&heat, heat_h, heat_w, patch_rows, patch_cols);
    let masked = mask_fixation_regions(&pooled, patch_rows, patch_cols, fixations, cfg.mask_radius);
    let sharpened = top_rho_sharpen(&masked, rho)?;
    normalize_prior(&sharpened)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fix(x: f64, y: f64, t0: f64, t1: f64) -> Fixation {
        Fixation { x, y, t_start: t0, t_end: t1 }
    }

    #[test]
    fn filter_empty_input() {
        assert!(filter_fixations(&[], 0.1).is_empty());
    }

    #[test]
    fn filter_threshold_case() {
        let raw = vec![fix(0.5, 0.5, 0.0, 0.05), fix(0.2, 0.2, 1.0, 1.30)];
        let kept = filter_fixations(&raw, 0.1);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0], raw[1]);
    }

    #[test]
    fn filter_keeps_all_above_threshold() {
        let raw = vec![fix(0.5, 0.5, 0.0, 0.5), fix(0.2, 0.2, 1.0, 1.3)];
        assert_eq!(filter_fixations(&raw, 0.1), raw);
    }

    #[test]
    fn heatmap_no_fixations_is_zero() {
        let map = render_heatmap(&[], 4, 4, 0.05).unwrap();
        assert!(map.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn heatmap_delta_limit_concentrates_mass() {
        // Fixation at the center of cell (1, 2) on a 4x4 grid.
        let f = fix((2.0 + 0.5) / 4.0, (1.0 + 0.5) / 4.0, 0.0, 1.0);
        let map = render_heatmap(&[f], 4, 4, 1e-4).unwrap();
        let argmax = map
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, 4 + 2);
        assert!((map[argmax] - 1.0).abs() < 1e-12);
        assert!(map.iter().enumerate().all(|(i, v)| i == argmax || *v < 1e-12));
    }

    #[test]
    fn heatmap_is_linear_in_duplicated_fixations() {
        let f = fix(0.3, 0.7, 0.0, 0.4);
        let single = render_heatmap(&[f.clone()], 8, 8, 0.05).unwrap();
        let double = render_heatmap(&[f.clone(), f], 8, 8, 0.05).unwrap();
        for (s, d) in single.iter().zip(&double) {
            assert_eq!(*d, 2.0 * s);
        }
    }

    #[test]
    fn heatmap_rejects_bad_sigma() {
        assert_eq!(render_heatmap(&[], 4, 4, 0.0), Err(GazeError::InvalidSigma(0.0)));
    }

    #[test]
    fn pool_uniform_map_stays_uniform() {
        let map = vec![3.0; 8 * 8];
        let pooled = pool_to_patches(&map, 8, 8, 2, 2);
        assert_eq!(pooled, vec![3.0; 4]);
    }

    #[test]
    fn pool_mean_hand_case() {
        let map = vec![4.0, 0.0, 0.0, 0.0];
        assert_eq!(pool_to_patches(&map, 2, 2, 1, 1), vec![1.0]);
    }

    #[test]
    fn pool_identity_when_shapes_match() {
        let map = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(pool_to_patches(&map, 2, 2, 2, 2), map);
    }

    #[test]
    fn pool_resizes_when_not_divisible() {
        let map = vec![1.0; 3 * 3];
        let pooled = pool_to_patches(&map, 3, 3, 2, 2);
        // A constant map stays constant through bilinear resize + mean pool.
        for v in pooled {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_large_radius_is_identity() {
        let map = vec![1.0, 2.0, 3.0, 4.0];
        let f = fix(0.1, 0.1, 0.0, 1.0);
        assert_eq!(mask_fixation_regions(&map, 2, 2, &[f], 100.0), map);
    }

    #[test]
    fn mask_no_fixations_zeroes_everything() {
        let map = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(mask_fixation_regions(&map, 2, 2, &[], 1.5), vec![0.0; 4]);
    }

    #[test]
    fn mask_radius_zero_keeps_containing_patch_only() {
        let map = vec![1.0; 4];
        // Fixation exactly at the center of patch (0, 0) on a 2x2 grid.
        let f = fix(0.25, 0.25, 0.0, 1.0);
        let masked = mask_fixation_regions(&map, 2, 2, &[f], 0.0);
        assert_eq!(masked, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn top_rho_identity_at_one() {
        let map = vec![0.4, 0.0, 0.2, 0.1];
        assert_eq!(top_rho_sharpen(&map, 1.0).unwrap(), map);
    }

    #[test]
    fn top_rho_half_keeps_two_of_four() {
        let map = vec![0.4, 0.3, 0.2, 0.1];
        assert_eq!(top_rho_sharpen(&map, 0.5).unwrap(), vec![0.4, 0.3, 0.0, 0.0]);
    }

    #[test]
    fn top_rho_quarter_keeps_one() {
        let map = vec![0.4, 0.3, 0.2, 0.1];
        assert_eq!(top_rho_sharpen(&map, 0.25).unwrap(), vec![0.4, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn top_rho_breaks_ties_by_lower_index() {
        let map = vec![0.2, 0.4, 0.4, 0.1];
        assert_eq!(top_rho_sharpen(&map, 0.25).unwrap(), vec![0.0, 0.4, 0.0, 0.0]);
    }

    #[test]
    fn top_rho_all_zero_signals_empty() {
        assert_eq!(top_rho_sharpen(&[0.0; 4], 0.5), Err(GazeError::EmptyPrior));
    }

    #[test]
    fn normalize_hand_case() {
        let out = normalize_prior(&[0.4, 0.3, 0.0, 0.0]).unwrap();
        assert!((out[0] - 4.0 / 7.0).abs() < 1e-15);
        assert!((out[1] - 3.0 / 7.0).abs() < 1e-15);
        assert_eq!(&out[2..], &[0.0, 0.0]);
    }

    #[test]
    fn normalize_one_hot_unchanged() {
        assert_eq!(normalize_prior(&[0.0, 1.0, 0.0]).unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn normalize_all_zero_errors() {
        assert_eq!(normalize_prior(&[0.0; 3]), Err(GazeError::EmptyPrior));
    }

    fn sample_session(rng: &mut ChaCha8Rng, n_fix: usize, n_sent: usize) -> GazeSession {
        let total = 10.0;
        let fixations = (0..n_fix)
            .map(|_| {
                let t0 = rng.gen_range(0.0..total - 0.6);
                let dur = rng.gen_range(0.05..0.5);
                fix(rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), t0, t0 + dur)
            })
            .collect();
        let mut segments: Vec<TranscriptSegment> = (0..n_sent)
            .map(|i| TranscriptSegment {
                text: vec![i as u32],
                t_start: total * i as f64 / n_sent as f64,
                t_end: total * (i + 1) as f64 / n_sent as f64,
                level: SegmentLevel::Sentence,
            })
            .collect();
        segments.push(TranscriptSegment {
            text: vec![99],
            t_start: 0.0,
            t_end: total,
            level: SegmentLevel::Paragraph,
        });
        GazeSession { fixations, segments }
    }

    #[test]
    fn paragraph_row_matches_covering_sentence() {
        // A sentence window covering every fixation sees the same fixation
        // set as the paragraph row, so the two rows must be identical.
        let fixations = vec![fix(0.3, 0.3, 0.0, 0.4), fix(0.7, 0.6, 1.0, 1.5)];
        let session = GazeSession {
            fixations,
            segments: vec![
                TranscriptSegment { text: vec![1], t_start: 0.0, t_end: 2.0, level: SegmentLevel::Sentence },
                TranscriptSegment { text: vec![2], t_start: 0.0, t_end: 2.0, level: SegmentLevel::Paragraph },
            ],
        };
        let prior =
            build_gaze_prior(&session, 16, 16, 4, 4, 1.0, &GazePipelineConfig::default()).unwrap();
        assert_eq!(prior.rows, 2);
        assert_eq!(prior.row(0), prior.row(1));
    }

    #[test]
    fn disjoint_windows_partition_fixations() {
        let fixations = vec![fix(0.2, 0.2, 0.0, 0.4), fix(0.8, 0.8, 5.0, 5.4)];
        let session = GazeSession {
            fixations: fixations.clone(),
            segments: vec![
                TranscriptSegment { text: vec![1], t_start: 0.0, t_end: 1.0, level: SegmentLevel::Sentence },
                TranscriptSegment { text: vec![2], t_start: 4.0, t_end: 6.0, level: SegmentLevel::Sentence },
            ],
        };
        let cfg = GazePipelineConfig::default();
        let prior = build_gaze_prior(&session, 16, 16, 4, 4, 1.0, &cfg).unwrap();
        // Oracle: rows built directly from the timestamp partition.
        for (row_ix, f) in [(0usize, &fixations[0]), (1usize, &fixations[1])] {
            let heat = render_heatmap(std::slice::from_ref(f), 16, 16, cfg.sigma).unwrap();
            let pooled = pool_to_patches(&heat, 16, 16, 4, 4);
            let masked =
                mask_fixation_regions(&pooled, 4, 4, std::slice::from_ref(f), cfg.mask_radius);
            let expect = normalize_prior(&top_rho_sharpen(&masked, 1.0).unwrap()).unwrap();
            assert_eq!(prior.row(row_ix), expect.as_slice());
        }
    }

    #[test]
    fn single_fixation_full_pipeline_composition() {
        // rho = 1 and a huge mask radius reduce the pipeline to
        // normalize(pool(render(...))) on a 2x2 patch grid.
        let f = fix(0.3, 0.6, 0.0, 0.5);
        let session = GazeSession {
            fixations: vec![f.clone()],
            segments: vec![TranscriptSegment {
                text: vec![0],
                t_start: 0.0,
                t_end: 1.0,
                level: SegmentLevel::Sentence,
            }],
        };
        let cfg = GazePipelineConfig { mask_radius: 1e9, ..Default::default() };
        let prior = build_gaze_prior(&session, 8, 8, 2, 2, 1.0, &cfg).unwrap();
        let heat = render_heatmap(&[f], 8, 8, cfg.sigma).unwrap();
        let pooled = pool_to_patches(&heat, 8, 8, 2, 2);
        let expect = normalize_prior(&pooled).unwrap();
        assert_eq!(prior.row(0), expect.as_slice());
    }

    #[test]
    fn rows_are_distributions_and_sharpening_shrinks_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let session = sample_session(&mut rng, 6, 3);
            let cfg = GazePipelineConfig::default();
            let Ok(prior) = build_gaze_prior(&session, 16, 16, 4, 4, 0.25, &cfg) else {
                continue;
            };
            for r in 0..prior.rows {
                let row = prior.row(r);
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() <= 1e-9);
                assert!(row.iter().all(|v| *v >= 0.0));
                assert!(row.iter().any(|v| *v > 0.0));
            }
        }
    }

    #[test]
    fn duration_scaling_by_power_of_two_is_bit_exact() {
        // Dilating the whole time axis by a power of two scales every
        // duration exactly and preserves all comparisons, so the normalized
        // prior must be bit-identical.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let c = 4.0;
        for _ in 0..20 {
            let session = sample_session(&mut rng, 6, 3);
            let scaled = GazeSession {
                fixations: session
                    .fixations
                    .iter()
                    .map(|f| fix(f.x, f.y, f.t_start * c, f.t_end * c))
                    .collect(),
                segments: session
                    .segments
                    .iter()
                    .map(|s| TranscriptSegment {
                        text: s.text.clone(),
                        t_start: s.t_start * c,
                        t_end: s.t_end * c,
                        level: s.level,
                    })
                    .collect(),
            };
            let cfg = GazePipelineConfig::default();
            let cfg_scaled = GazePipelineConfig { min_duration: cfg.min_duration * c, ..cfg.clone() };
            let a = build_gaze_prior(&session, 16, 16, 4, 4, 0.25, &cfg);
            let b = build_gaze_prior(&scaled, 16, 16, 4, 4, 0.25, &cfg_scaled);
            match (a, b) {
                (Ok(a), Ok(b)) => {
                    assert_eq!(a.matrix, b.matrix);
                    assert_eq!(a.kept_segments, b.kept_segments);
                }
                (Err(ea), Err(eb)) => assert_eq!(ea, eb),
                other => panic!("scaling changed outcome: {other:?}"),
            }
        }
    }

    #[test]
    fn filtering_commutes_with_rendering_on_retained_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let all: Vec<Fixation> = (0..8)
                .map(|_| {
                    let t0 = rng.gen_range(0.0..5.0);
                    fix(
                        rng.gen_range(0.0..1.0),
                        rng.gen_range(0.0..1.0),
                        t0,
                        t0 + rng.gen_range(0.02..0.4),
                    )
                })
                .collect();
            let kept = filter_fixations(&all, 0.1);
            let a = render_heatmap(&kept, 8, 8, 0.05).unwrap();
            let b = render_heatmap(&filter_fixations(&kept, 0.1), 8, 8, 0.05).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn empty_session_reports_no_segments() {
        let session = GazeSession { fixations: vec![], segments: vec![] };
        assert_eq!(
            build_gaze_prior(&session, 8, 8, 2, 2, 1.0, &GazePipelineConfig::default()),
            Err(GazeError::NoSegments)
        );
    }

    #[test]
    fn all_rows_empty_errors() {
        let session = GazeSession {
            fixations: vec![],
            segments: vec![TranscriptSegment {
                text: vec![0],
                t_start: 0.0,
                t_end: 1.0,
                level: SegmentLevel::Sentence,
            }],
        };
        assert_eq!(
            build_gaze_prior(&session, 8, 8, 2, 2, 1.0, &GazePipelineConfig::default()),
            Err(GazeError::AllRowsEmpty)
        );
    }
}
