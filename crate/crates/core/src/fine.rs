//! Pose-guided soft attention over noun phrases and image regions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::coarse::transform_regions;
use crate::error::{Error, Result};
use crate::params::{glorot_bound, Ctx, ParamGroup, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::visual::{PARTS, STRIPES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum FaMode {
    Full,
    /// Phrases attend straight over regions; part vectors unused.
    NoPose,
    /// Every word is a phrase of length one.
    NoPhrase,
}

impl fmt::Display for FaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::NoPose => "no_pose",
            Self::NoPhrase => "no_phrase",
        })
    }
}

impl FromStr for FaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "no_pose" => Ok(Self::NoPose),
            "no_phrase" => Ok(Self::NoPhrase),
            _ => Err(Error::Config(format!("fa mode `{s}` is not full, no_pose or no_phrase"))),
        }
    }
}

impl TryFrom<String> for FaMode {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<FaMode> for String {
    fn from(m: FaMode) -> String {
        m.to_string()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FaParams {
    /// `[2d, b]`, shared by all parts.
    pub phrase: ParamId,
    /// `[6, C, b]`, separate from the coarse-alignment transforms.
    pub region: ParamId,
}

impl FaParams {
    pub fn init(store: &mut ParamStore, rng: &mut Rng, channels: usize, text_dim: usize, b: usize) -> Self {
        let g = ParamGroup::Alignment;
        let phrase = store.add_uniform("fa.phrase", g, &[text_dim, b], glorot_bound(text_dim, b), rng);
        let region = store.add_uniform("fa.region", g, &[STRIPES, channels, b], glorot_bound(channels, b), rng);
        Self { phrase, region }
    }
}

/// Phrase vectors ẽ^n: `[Q, M, 2d]` to `[Q, M, b]`.
pub fn transform_phrases(ctx: &Ctx, params: &FaParams, phrases: Var) -> Result<Var> {
    let t = ctx.tape;
    let s = t.shape(phrases);
    if s.len() != 3 {
        return Err(Error::Data(format!("phrases must be [Q, M, 2d], got {s:?}")));
    }
    let flat = t.matmul(t.reshape(phrases, &[s[0] * s[1], s[2]])?, ctx.p(params.phrase))?;
    let b = t.shape(flat)[1];
    Ok(t.reshape(flat, &[s[0], s[1], b])?)
}

fn check_mask(mask: &[bool], q: usize, m: usize) -> Result<()> {
    if mask.len() != q * m {
        return Err(Error::Data(format!("phrase mask has {} entries, expected {}", mask.len(), q * m)));
    }
    if let Some(row) = (0..q).find(|&r| !mask[r * m..(r + 1) * m].iter().any(|&v| v)) {
        return Err(Error::Data(format!("caption {row} has every phrase masked")));
    }
    Ok(())
}

/// Every part of every image attends over each caption's phrases.
///
/// `parts: [G, 6, b]`, `phrases: [Q, M, b]`; returns `e_pn: [Q, G·6, b]` and `alpha: [Q, G·6, M]`.
pub fn attend_phrases(ctx: &Ctx, parts: Var, phrases: Var, mask: &[bool]) -> Result<(Var, Var)> {
    let t = ctx.tape;
    let (sp, se) = (t.shape(parts), t.shape(phrases));
    if sp.len() != 3 || se.len() != 3 || sp[2] != se[2] {
        return Err(Error::Data(format!("parts {sp:?} and phrases {se:?} do not align")));
    }
    let (g, k, b) = (sp[0], sp[1], sp[2]);
    let (q, m) = (se[0], se[1]);
    check_mask(mask, q, m)?;
    let pn = t.normalize(t.reshape(parts, &[g * k, b])?)?;
    let en = t.normalize(t.reshape(phrases, &[q * m, b])?)?;
    let cos = t.matmul(en, t.transpose(pn)?)?;
    let cos = t.permute(t.reshape(cos, &[q, m, g * k])?, &[0, 2, 1])?;
    let full_mask: Vec<bool> = (0..q).flat_map(|r| mask[r * m..(r + 1) * m].repeat(g * k)).collect();
    let alpha = t.masked_softmax(cos, 2, Some(&full_mask))?;
    let e_pn = t.bmm(alpha, phrases)?;
    Ok((e_pn, alpha))
}

/// Each image's parts attend over its own transformed regions.
///
/// `parts: [G, 6, b]`, `regions: [G, R, b]`; returns `phi_p: [G, 6, b]` and `alpha: [G, 6, R]`.
pub fn attend_regions(ctx: &Ctx, parts: Var, regions: Var) -> Result<(Var, Var)> {
    let t = ctx.tape;
    let (sp, sr) = (t.shape(parts), t.shape(regions));
    if sp.len() != 3 || sr.len() != 3 || sp[0] != sr[0] || sp[2] != sr[2] {
        return Err(Error::Data(format!("parts {sp:?} and regions {sr:?} do not align")));
    }
    let pn = t.normalize(parts)?;
    let rn = t.normalize(regions)?;
    let cos = t.bmm(pn, t.transpose(rn)?)?;
    let alpha = t.softmax(cos, 2)?;
    let phi_p = t.bmm(alpha, regions)?;
    Ok((phi_p, alpha))
}

/// Part similarities `[Q, G, 6]` and their sum S^fa `[Q, G]`.
pub fn fa_score(ctx: &Ctx, e_pn: Var, phi_p: Var) -> Result<(Var, Var)> {
    let t = ctx.tape;
    let (se, sp) = (t.shape(e_pn), t.shape(phi_p));
    if se.len() != 3 || sp.len() != 3 || se[1] != sp[0] * sp[1] || se[2] != sp[2] {
        return Err(Error::Data(format!("attended phrases {se:?} and regions {sp:?} do not align")));
    }
    let (q, g, k) = (se[0], sp[0], sp[1]);
    let vis = t.broadcast(t.reshape(phi_p, &[g * k, sp[2]])?, q)?;
    let s = t.reshape(t.cosine(e_pn, vis)?, &[q, g, k])?;
    let total = t.sum(s, 2)?;
    Ok((s, total))
}

pub struct PoseAttention {
    /// `[Q, G·6, b]`
    pub e_pn: Var,
    /// `[Q, G·6, M]`
    pub alpha_text: Var,
    /// `[G, 6, b]`
    pub phi_p: Var,
    /// `[G, 6, 24]`
    pub alpha_vis: Var,
    /// `[Q, G, 6]`
    pub part_sims: Var,
}

pub struct FaOutput {
    /// `[Q, G]`
    pub scores: Var,
    /// Absent in the pose-free ablation.
    pub pose: Option<PoseAttention>,
    /// `[Q, M, b]`
    pub phrases: Var,
    /// `[G, 24, b]`
    pub regions: Var,
    pub mask: Vec<bool>,
}

impl FaOutput {
    /// Text-side identity features `[Q, b]`: caption q paired with image `pairs[q]`.
    pub fn text_features(&self, ctx: &Ctx, pairs: &[usize]) -> Result<Var> {
        let t = ctx.tape;
        let sp = t.shape(self.phrases);
        let (q, m, b) = (sp[0], sp[1], sp[2]);
        if pairs.len() != q {
            return Err(Error::Data(format!("{} pairs for {q} captions", pairs.len())));
        }
        match &self.pose {
            Some(p) => {
                let g = t.shape(self.regions)[0];
                if let Some(&bad) = pairs.iter().find(|&&i| i >= g) {
                    return Err(Error::Data(format!("pair index {bad} outside {g} images")));
                }
                let rows: Vec<usize> = pairs.iter().enumerate().map(|(r, &i)| r * g + i).collect();
                let flat = t.reshape(p.e_pn, &[q * g, PARTS * b])?;
                let diag = t.reshape(t.gather(flat, &rows)?, &[q, PARTS, b])?;
                Ok(t.mean(diag, 1)?)
            }
            None => {
                let w = masked_mean_weights(&self.mask, q, m);
                let w = t.constant(Tensor::from_parts(vec![q, 1, m], w));
                Ok(t.reshape(t.bmm(w, self.phrases)?, &[q, b])?)
            }
        }
    }

    /// Image-side identity features `[G, b]`.
    pub fn image_features(&self, ctx: &Ctx) -> Result<Var> {
        let src = self.pose.as_ref().map_or(self.regions, |p| p.phi_p);
        Ok(ctx.tape.mean(src, 1)?)
    }
}

fn masked_mean_weights(mask: &[bool], q: usize, m: usize) -> Vec<f64> {
    let mut w = vec![0.0; q * m];
    for r in 0..q {
        let row = &mask[r * m..(r + 1) * m];
        let n = row.iter().filter(|&&v| v).count() as f64;
        for (dst, &on) in w[r * m..(r + 1) * m].iter_mut().zip(row) {
            if on {
                *dst = 1.0 / n;
            }
        }
    }
    w
}

/// Pose-free variant: each phrase attends over each image's regions and is
/// compared with what it attended to; S^fa is 6 times the mean phrase cosine
/// so that it spans the same [−6, 6] range.
fn no_pose_scores(ctx: &Ctx, phrases: Var, mask: &[bool], regions: Var) -> Result<Var> {
    let t = ctx.tape;
    let (se, sr) = (t.shape(phrases), t.shape(regions));
    let (q, m, b) = (se[0], se[1], se[2]);
    let (g, r) = (sr[0], sr[1]);
    let flat_e = t.reshape(phrases, &[q * m, b])?;
    let en = t.normalize(flat_e)?;
    let rn = t.normalize(t.reshape(regions, &[g * r, b])?)?;
    let cos = t.reshape(t.matmul(en, t.transpose(rn)?)?, &[q * m, g, r])?;
    let alpha = t.softmax(cos, 2)?;
    let alpha = t.permute(alpha, &[1, 0, 2])?;
    let attended = t.bmm(alpha, regions)?;
    let sims = t.cosine(attended, t.broadcast(flat_e, g)?)?;
    let sims = t.permute(t.reshape(sims, &[g, q, m])?, &[1, 0, 2])?;
    let w = masked_mean_weights(mask, q, m);
    let w: Vec<f64> = (0..q).flat_map(|row| w[row * m..(row + 1) * m].repeat(g)).collect();
    let w = t.constant(Tensor::from_parts(vec![q, g, m], w));
    Ok(t.scale(t.sum(t.mul(sims, w)?, 2)?, PARTS as f64)?)
}

/// FA region transforms ẽ^φ: `[G, 6, 4, C]` to `[G, 24, b]`.
pub fn fa_regions(ctx: &Ctx, params: &FaParams, phi: Var) -> Result<Var> {
    transform_regions(ctx, ctx.p(params.region), phi)
}

/// Fine alignment over all (caption, image) pairs.
///
/// `parts: [G, 6, b]` part vectors (ignored without pose), `phrases: [Q, M, 2d]`
/// with `mask: [Q·M]`, `regions: [G, 24, b]` from [`fa_regions`]. The
/// no-phrase ablation is applied by the caller when it builds the phrase spans.
pub fn fa_forward(
    ctx: &Ctx,
    params: &FaParams,
    mode: FaMode,
    parts: Option<Var>,
    phrases: Var,
    mask: &[bool],
    regions: Var,
) -> Result<FaOutput> {
    let phrases = transform_phrases(ctx, params, phrases)?;
    let sp = ctx.tape.shape(phrases);
    check_mask(mask, sp[0], sp[1])?;
    if mode == FaMode::NoPose {
        let scores = no_pose_scores(ctx, phrases, mask, regions)?;
        return Ok(FaOutput { scores, pose: None, phrases, regions, mask: mask.to_vec() });
    }
    let parts = parts.ok_or_else(|| Error::Data("pose-guided fine alignment needs part vectors".into()))?;
    let (e_pn, alpha_text) = attend_phrases(ctx, parts, phrases, mask)?;
    let (phi_p, alpha_vis) = attend_regions(ctx, parts, regions)?;
    let (part_sims, scores) = fa_score(ctx, e_pn, phi_p)?;
    Ok(FaOutput {
        scores,
        pose: Some(PoseAttention { e_pn, alpha_text, phi_p, alpha_vis, part_sims }),
        phrases,
        regions,
        mask: mask.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn rand_t(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), rng.uniform_vec(n, -1.0, 1.0))
    }

    fn run<R>(f: impl FnOnce(&Tape) -> R) -> R {
        let tape = Tape::new();
        f(&tape)
    }

    fn ctx_of<'a>(tape: &'a Tape, bound: &'a crate::params::Bound) -> Ctx<'a> {
        Ctx::new(tape, bound)
    }

    #[test]
    fn single_phrase_gets_all_attention() {
        let mut rng = Rng::new(1);
        let parts = rand_t(&mut rng, &[2, 6, 4]);
        let phrases = rand_t(&mut rng, &[1, 1, 4]);
        run(|t| {
            let store = ParamStore::new();
            let bound = store.bind(t, &[]);
            let ctx = ctx_of(t, &bound);
            let (e, a) = attend_phrases(&ctx, t.constant(parts), t.constant(phrases.clone()), &[true]).unwrap();
            assert!(t.value(a).data().iter().all(|&v| v == 1.0));
            for row in t.value(e).data().chunks(4) {
                assert_eq!(row, phrases.data());
            }
        });
    }

    #[test]
    fn aligned_and_orthogonal_phrases_match_scalar_softmax() {
        let parts = Tensor::from_parts(vec![1, 6, 2], [1.0, 0.0].repeat(6));
        let phrases = Tensor::from_parts(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let alpha = run(|t| {
            let store = ParamStore::new();
            let bound = store.bind(t, &[]);
            let ctx = ctx_of(t, &bound);
            let (_, a) = attend_phrases(&ctx, t.constant(parts), t.constant(phrases), &[true, true]).unwrap();
            let v = t.value(a).clone();
            v
        });
        let e = std::f64::consts::E;
        let (w1, w2) = (e / (e + 1.0), 1.0 / (e + 1.0));
        assert!((w1 - 0.7310585786300049).abs() < 1e-15);
        for row in alpha.data().chunks(2) {
            assert!((row[0] - w1).abs() < 1e-15 && (row[1] - w2).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_slot_leaves_attended_phrases_bit_identical() {
        let mut rng = Rng::new(2);
        let parts = rand_t(&mut rng, &[3, 6, 5]);
        let phrases = rand_t(&mut rng, &[2, 3, 5]);
        let mut padded_data = Vec::new();
        for q in 0..2 {
            padded_data.extend_from_slice(&phrases.data()[q * 15..(q + 1) * 15]);
            padded_data.extend(rng.uniform_vec(5, -1.0, 1.0));
        }
        let padded = Tensor::from_parts(vec![2, 4, 5], padded_data);
        let mask = [true, true, false, true, true, true];
        let padded_mask = [true, true, false, false, true, true, true, false];
        let go = |ph: Tensor, m: &[bool]| {
            run(|t| {
                let store = ParamStore::new();
                let bound = store.bind(t, &[]);
                let ctx = ctx_of(t, &bound);
                let (e, _) = attend_phrases(&ctx, t.constant(parts.clone()), t.constant(ph), m).unwrap();
                let v = t.value(e).clone();
                v
            })
        };
        let (a, b) = (go(phrases, &mask), go(padded, &padded_mask));
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn fully_masked_caption_is_rejected() {
        run(|t| {
            let store = ParamStore::new();
            let bound = store.bind(t, &[]);
            let ctx = ctx_of(t, &bound);
            let p = t.constant(Tensor::full(&[1, 6, 2], 1.0));
            let e = t.constant(Tensor::full(&[2, 2, 2], 1.0));
            assert!(attend_phrases(&ctx, p, e, &[true, false, false, false]).is_err());
        });
    }

    #[test]
    fn identical_regions_give_uniform_attention() {
        let mut rng = Rng::new(3);
        let parts = rand_t(&mut rng, &[2, 6, 3]);
        let one = rng.uniform_vec(3, -1.0, 1.0);
        let regions = Tensor::from_parts(vec![2, 24, 3], one.repeat(48));
        run(|t| {
            let store = ParamStore::new();
            let bound = store.bind(t, &[]);
            let ctx = ctx_of(t, &bound);
            let (phi_p, a) = attend_regions(&ctx, t.constant(parts), t.constant(regions)).unwrap();
            assert!(t.value(a).data().iter().all(|&v| (v - 1.0 / 24.0).abs() < 1e-15));
            for row in t.value(phi_p).data().chunks(3) {
                for (x, y) in row.iter().zip(&one) {
                    assert!((x - y).abs() < 1e-14);
                }
            }
        });
    }

    #[test]
    fn region_attention_matches_loop_oracle() {
        let mut rng = Rng::new(4);
        let parts = rand_t(&mut rng, &[2, 6, 3]);
        let regions = rand_t(&mut rng, &[2, 24, 3]);
        let (phi_p, alpha) = run(|t| {
            let store = ParamStore::new();
            let bound = store.bind(t, &[]);
            let ctx = ctx_of(t, &bound);
            let (p, a) = attend_regions(&ctx, t.constant(parts.clone()), t.constant(regions.clone())).unwrap();
            let r = (t.value(p).clone(), t.value(a).clone());
            r
        });
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        for g in 0..2 {
            for k in 0..6 {
                let p = &parts.data()[(g * 6 + k) * 3..(g * 6 + k + 1) * 3];
                let mut w = [0.0; 24];
                for j in 0..24 {
                    w[j] = cos(p, &regions.data()[(g * 24 + j) * 3..(g * 24 + j + 1) * 3]).exp();
                }
                let z: f64 = w.iter().sum();
                let mut want = [0.0; 3];
                for j in 0..24 {
                    let a = w[j] / z;
                    assert!((alpha.get(&[g, k, j]) - a).abs() < 1e-14);
                    for c in 0..3 {
                        want[c] += a * regions.get(&[g, j, c]);
                    }
                }
                for c in 0..3 {
                    assert!((phi_p.get(&[g, k, c]) - want[c]).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn score_extremes() {
        let mut rng = Rng::new(5);
        let phi = rand_t(&mut rng, &[1, 6, 4]);
        let e_same = Tensor::from_parts(vec![1, 6, 4], phi.data().to_vec());
        let e_orth = Tensor::from_parts(vec![1, 6, 2], [1.0, 0.0].repeat(6));
        let phi_orth = Tensor::from_parts(vec![1, 6, 2], [0.0, 2.0].repeat(6));
        run(|t| {
            let store = ParamStore::new();
            let bound = store.bind(t, &[]);
            let ctx = ctx_of(t, &bound);
            let (_, s) = fa_score(&ctx, t.constant(e_same), t.constant(phi)).unwrap();
            assert!((t.item(s) - 6.0).abs() < 1e-12);
            let (_, s) = fa_score(&ctx, t.constant(e_orth), t.constant(phi_orth)).unwrap();
            assert_eq!(t.item(s), 0.0);
        });
    }

    #[test]
    fn modes_parse() {
        for m in ["full", "no_pose", "no_phrase"] {
            assert_eq!(m.parse::<FaMode>().unwrap().to_string(), m);
        }
        assert!("nopose".parse::<FaMode>().is_err());
        assert!("Full".parse::<FaMode>().is_err());
    }

    fn forward(mode: FaMode, seed: u64) -> (Tensor, Option<(Tensor, Tensor)>) {
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let params = FaParams::init(&mut store, &mut rng, 5, 6, 4);
        let parts = rand_t(&mut rng, &[3, 6, 4]);
        let phrases = rand_t(&mut rng, &[2, 3, 6]);
        let phi = rand_t(&mut rng, &[3, 6, 4, 5]);
        let mask = [true, true, true, true, false, false];
        let tape = Tape::new();
        let bound = store.bind(&tape, &[]);
        let ctx = Ctx::new(&tape, &bound);
        let regions = fa_regions(&ctx, &params, tape.constant(phi)).unwrap();
        let parts = Some(tape.constant(parts));
        let out = fa_forward(&ctx, &params, mode, parts, tape.constant(phrases), &mask, regions).unwrap();
        assert_eq!(tape.shape(out.scores), vec![2, 3]);
        assert_eq!(tape.shape(out.text_features(&ctx, &[0, 2]).unwrap()), vec![2, 4]);
        assert_eq!(tape.shape(out.image_features(&ctx).unwrap()), vec![3, 4]);
        let att = out.pose.as_ref().map(|p| (tape.value(p.alpha_text).clone(), tape.value(p.alpha_vis).clone()));
        let s = tape.value(out.scores).clone();
        (s, att)
    }

    #[test]
    fn scores_are_bounded_and_attention_rows_are_distributions() {
        for seed in 0..20 {
            for mode in [FaMode::Full, FaMode::NoPose] {
                let (s, att) = forward(mode, seed);
                assert!(s.data().iter().all(|v| v.abs() <= 6.0 + 1e-12));
                if let Some((at, av)) = att {
                    for row in at.data().chunks(3).chain(av.data().chunks(24)) {
                        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                        assert!(row.iter().all(|&v| v >= 0.0));
                    }
                }
            }
        }
    }

    #[test]
    fn no_pose_with_one_phrase_compares_it_with_its_attended_regions() {
        let mut rng = Rng::new(6);
        let phrases = rand_t(&mut rng, &[1, 1, 3]);
        let regions = rand_t(&mut rng, &[1, 24, 3]);
        let s = run(|t| {
            let store = ParamStore::new();
            let bound = store.bind(t, &[]);
            let ctx = ctx_of(t, &bound);
            let s = no_pose_scores(&ctx, t.constant(phrases.clone()), &[true], t.constant(regions.clone())).unwrap();
            t.item(s)
        });
        let e = phrases.data();
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        let w: Vec<f64> = regions.data().chunks(3).map(|r| cos(e, r).exp()).collect();
        let z: f64 = w.iter().sum();
        let mut v = [0.0; 3];
        for (wj, r) in w.iter().zip(regions.data().chunks(3)) {
            for c in 0..3 {
                v[c] += wj / z * r[c];
            }
        }
        assert!((s - 6.0 * cos(e, &v)).abs() < 1e-12);
    }

    #[test]
    fn perturbing_one_part_changes_only_its_attention_rows() {
        let mut rng = Rng::new(7);
        let parts = rand_t(&mut rng, &[1, 6, 3]);
        let phrases = rand_t(&mut rng, &[1, 4, 3]);
        let regions = rand_t(&mut rng, &[1, 24, 3]);
        let go = |p: Tensor| {
            run(|t| {
                let store = ParamStore::new();
                let bound = store.bind(t, &[]);
                let ctx = ctx_of(t, &bound);
                let p = t.constant(p);
                let (_, at) = attend_phrases(&ctx, p, t.constant(phrases.clone()), &[true; 4]).unwrap();
                let (_, av) = attend_regions(&ctx, p, t.constant(regions.clone())).unwrap();
                let r = (t.value(at).clone(), t.value(av).clone());
                r
            })
        };
        let (a0, v0) = go(parts.clone());
        let mut changed = parts;
        for c in 0..3 {
            changed.set(&[0, 2, c], 0.0);
        }
        let (a1, v1) = go(changed);
        for k in 0..6 {
            assert_eq!(a0.data()[k * 4..(k + 1) * 4] != a1.data()[k * 4..(k + 1) * 4], k == 2);
            assert_eq!(v0.data()[k * 24..(k + 1) * 24] != v1.data()[k * 24..(k + 1) * 24], k == 2);
        }
    }
}
