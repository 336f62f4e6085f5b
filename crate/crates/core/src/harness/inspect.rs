//! Attention maps of one (caption, image) pair as JSON and PGM graymaps.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::coarse::{local_similarities, select};
use crate::error::Result;
use crate::params::{Ctx, ParamGroup};
use crate::text::{tokenize, TextBatch};
use crate::visual::{ImageBatch, PersonImage, COLUMNS, PARTS, PART_LABELS, REGIONS, STRIPES};

use super::model::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaAttention {
    /// Softmax weight of each region, stripe-major (6 stripes × 4 columns).
    pub weights: Vec<f64>,
    pub mask: Vec<bool>,
    pub selected: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaAttention {
    pub parts: Vec<String>,
    /// Per part, weights over the phrases.
    pub phrase_weights: Vec<Vec<f64>>,
    /// Per part, weights over the 24 regions.
    pub region_weights: Vec<Vec<f64>>,
    pub part_similarities: Vec<f64>,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub caption: String,
    pub phrases: Vec<String>,
    pub identity: usize,
    pub ca: CaAttention,
    pub fa: Option<FaAttention>,
}

fn rows(data: &[f64], width: usize) -> Vec<Vec<f64>> {
    data.chunks(width).map(<[f64]>::to_vec).collect()
}

pub fn inspect_attention(model: &Model, image: &PersonImage, caption: &str) -> Result<AttentionReport> {
    let enc = model.encode_text(caption)?;
    let tokens = tokenize(caption);
    let spans = if model.config.fa_mode == crate::fine::FaMode::NoPhrase {
        crate::text::word_spans(tokens.len())
    } else {
        enc.spans.clone()
    };
    let phrases = spans.iter().map(|&(s, e)| tokens[s..e].join(" ")).collect();
    let texts = TextBatch::new(std::slice::from_ref(&enc))?;
    let images = ImageBatch::new(&[image], model.config.con_pose, &model.grouping)?;

    let tape = Tape::new();
    let bound = model.store.bind(&tape, &[ParamGroup::VisualCnn, ParamGroup::Alignment]);
    let ctx = Ctx::new(&tape, &bound);
    let img = model.image_side(&ctx, &images)?;
    let txt = model.text_side(&ctx, &texts)?;
    let s = local_similarities(&ctx, txt.sentence, img.ca_regions)?;
    let sel = select(tape.value(s).data(), model.config.tau, model.config.attention);
    let ca = CaAttention { weights: sel.q.clone(), selected: sel.count(), mask: sel.mask, score: sel.score };
    let scores = model.score(&ctx, &txt, &img)?;
    let fa = match &scores.fa {
        Some(out) => {
            let score = tape.value(out.scores).item();
            Some(match &out.pose {
                Some(p) => {
                    let m = tape.shape(p.alpha_text)[2];
                    FaAttention {
                        parts: PART_LABELS.iter().map(|s| s.to_string()).collect(),
                        phrase_weights: rows(tape.value(p.alpha_text).data(), m),
                        region_weights: rows(tape.value(p.alpha_vis).data(), REGIONS),
                        part_similarities: tape.value(p.part_sims).data().to_vec(),
                        score,
                    }
                }
                None => FaAttention {
                    parts: vec![],
                    phrase_weights: vec![],
                    region_weights: vec![],
                    part_similarities: vec![],
                    score,
                },
            })
        }
        None => None,
    };
    Ok(AttentionReport { caption: caption.to_string(), phrases, identity: image.identity, ca, fa })
}

/// Binary PGM of a `rows × cols` grid scaled to `[0, 255]` by its maximum, each cell `cell × cell` pixels.
pub fn pgm(values: &[f64], rows: usize, cols: usize, cell: usize) -> Vec<u8> {
    let max = values.iter().copied().fold(0.0f64, f64::max);
    let (h, w) = (rows * cell, cols * cell);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            let v = values[(y / cell) * cols + x / cell];
            let g = if max > 0.0 { (v.max(0.0) / max * 255.0).round() } else { 0.0 };
            out.push(g as u8);
        }
    }
    out
}

/// Writes `attention.json` plus one graymap per attention matrix; returns the paths.
pub fn write_report(report: &AttentionReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: &str, bytes: Vec<u8>| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, bytes)?;
        written.push(p);
        Ok(())
    };
    put("attention.json", serde_json::to_vec_pretty(report)?)?;
    let cell = 16;
    put("ca_weights.pgm", pgm(&report.ca.weights, STRIPES, COLUMNS, cell))?;
    let mask: Vec<f64> = report.ca.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    put("ca_mask.pgm", pgm(&mask, STRIPES, COLUMNS, cell))?;
    if let Some(fa) = report.fa.as_ref().filter(|f| !f.phrase_weights.is_empty()) {
        let m = fa.phrase_weights[0].len();
        let flat: Vec<f64> = fa.phrase_weights.concat();
        put("fa_phrases.pgm", pgm(&flat, PARTS, m, cell))?;
        for (k, w) in fa.region_weights.iter().enumerate() {
            put(&format!("fa_regions_{}.pgm", fa.parts[k].replace(' ', "_")), pgm(w, STRIPES, COLUMNS, cell))?;
        }
    }
    Ok(written)
}
