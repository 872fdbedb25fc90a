//! Clinical study records and the corpus JSONL format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaze::GazeSession;

/// Number of observation columns in the shared disease label space
/// (13 four-state observations plus the binary no-finding column).
pub const NUM_OBSERVATIONS: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ViewPosition {
    Pa,
    Ap,
    Lateral,
    Unknown,
}

impl ViewPosition {
    pub fn index(self) -> usize {
        match self {
            ViewPosition::Pa => 0,
            ViewPosition::Ap => 1,
            ViewPosition::Lateral => 2,
            ViewPosition::Unknown => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ObservationState {
    Blank,
    Negative,
    Uncertain,
    Positive,
}

/// Blank and negative collapse to 0; uncertain counts as positive.
pub fn binarize_state(state: ObservationState) -> u8 {
    match state {
        ObservationState::Blank | ObservationState::Negative => 0,
        ObservationState::Uncertain | ObservationState::Positive => 1,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DiseaseLabels {
    /// One state per observation column; the last column mirrors no_finding.
    pub states: Vec<ObservationState>,
    /// Binary no-finding flag, passed through binarization untouched.
    pub no_finding: u8,
}

impl DiseaseLabels {
    /// Deterministic 0/1 vector: the first 13 observations go through the
    /// state table, the final column is the no-finding flag itself.
    pub fn binarized(&self) -> [u8; NUM_OBSERVATIONS] {
        let mut out = [0u8; NUM_OBSERVATIONS];
        for (i, slot) in out.iter_mut().enumerate().take(NUM_OBSERVATIONS - 1) {
            *slot = binarize_state(self.states[i]);
        }
        out[NUM_OBSERVATIONS - 1] = self.no_finding;
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyImage {
    /// Row-major grayscale bytes, square (`size x size`).
    pub pixels: Vec<u8>,
    pub size: usize,
    pub view: ViewPosition,
}

/// One clinical unit: 1..k images sharing a report, with optional context
/// and an optional gaze session.
#[derive(Debug, Clone, PartialEq)]
pub struct Study {
    pub study_id: String,
    pub images: Vec<StudyImage>,
    pub report: Vec<u32>,
    pub context: Option<Vec<u32>>,
    pub labels: DiseaseLabels,
    pub gaze: Option<GazeSession>,
}

impl Study {
    /// Exactly one positive among the first `n_classes` observations; used
    /// by the balanced retrieval split.
    pub fn single_class(&self, n_classes: usize) -> Option<usize> {
        let bin = self.labels.binarized();
        let mut found = None;
        for (c, b) in bin.iter().enumerate().take(n_classes) {
            if *b == 1 {
                if found.is_some() {
                    return None;
                }
                found = Some(c);
            }
        }
        found
    }
}

// ---- JSONL wire format ----

#[derive(Serialize, Deserialize)]
struct ImageRecord {
    pixels: String,
    view: ViewPosition,
}

#[derive(Serialize, Deserialize)]
struct LabelRecord {
    states: Vec<ObservationState>,
    no_finding: u8,
}

#[derive(Serialize, Deserialize)]
struct StudyRecord {
    study_id: String,
    images: Vec<ImageRecord>,
    report: Vec<u32>,
    context: Option<Vec<u32>>,
    labels: LabelRecord,
    gaze: Option<GazeSession>,
}

fn encode_study(study: &Study) -> StudyRecord {
    StudyRecord {
        study_id: study.study_id.clone(),
        images: study
            .images
            .iter()
            .map(|img| ImageRecord {
                pixels: BASE64.encode(&img.pixels),
                view: img.view,
            })
            .collect(),
        report: study.report.clone(),
        context: study.context.clone(),
        labels: LabelRecord {
            states: study.labels.states.clone(),
            no_finding: study.labels.no_finding,
        },
        gaze: study.gaze.clone(),
    }
}

fn decode_study(rec: StudyRecord, line: usize) -> Result<Study> {
    let mut images = Vec::with_capacity(rec.images.len());
    for img in rec.images {
        let pixels = BASE64
            .decode(img.pixels.as_bytes())
            .map_err(|e| Error::data(format!("line {line}: bad pixel base64: {e}")))?;
        let size = (pixels.len() as f64).sqrt() as usize;
        if size * size != pixels.len() {
            return Err(Error::data(format!(
                "line {line}: image has {} bytes, expected a square pixel grid",
                pixels.len()
            )));
        }
        images.push(StudyImage { pixels, size, view: img.view });
    }
    if rec.labels.states.len() != NUM_OBSERVATIONS {
        return Err(Error::data(format!(
            "line {line}: expected {NUM_OBSERVATIONS} label states, got {}",
            rec.labels.states.len()
        )));
    }
    if rec.labels.no_finding > 1 {
        return Err(Error::data(format!(
            "line {line}: no_finding must be 0 or 1, got {}",
            rec.labels.no_finding
        )));
    }
    Ok(Study {
        study_id: rec.study_id,
        images,
        report: rec.report,
        context: rec.context,
        labels: DiseaseLabels {
            states: rec.labels.states,
            no_finding: rec.labels.no_finding,
        },
        gaze: rec.gaze,
    })
}

pub fn write_corpus(corpus: &[Study], path: &Path) -> Result<()> {
    let file = File::create(path)
        .map_err(|e| Error::data(format!("cannot create {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    for study in corpus {
        let line = serde_json::to_string(&encode_study(study))
            .map_err(|e| Error::data(format!("serialize study {}: {e}", study.study_id)))?;
        writeln!(w, "{line}").map_err(|e| Error::data(format!("write failed: {e}")))?;
    }
    w.flush().map_err(|e| Error::data(format!("write failed: {e}")))?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<Study>> {
    let file = File::open(path)
        .map_err(|e| Error::data(format!("cannot open corpus {}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    let mut corpus = Vec::new();
    for (ix, line) in reader.lines().enumerate() {
        let line_no = ix + 1;
        let line = line.map_err(|e| Error::data(format!("line {line_no}: read failed: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: StudyRecord = serde_json::from_str(&line)
            .map_err(|e| Error::data(format!("line {line_no}: malformed record: {e}")))?;
        corpus.push(decode_study(rec, line_no)?);
    }
    Ok(corpus)
}

/// FNV-1a over a study id; drives the deterministic validation split.
pub fn study_id_hash(id: &str) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in id.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}
