//! Sentence-to-region matching with similarity-based hard attention.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{glorot_bound, Ctx, ParamGroup, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::visual::{REGIONS, STRIPES};

pub const DEFAULT_TAU: f64 = 1.0 / REGIONS as f64;

/// How region similarities are pooled into one score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum AttentionMode {
    /// Sum of `s` over regions whose softmax weight is at least τ.
    Hard,
    /// Softmax-weighted sum of all `s`.
    Soft,
    /// Sum of the `m` largest `s`.
    TopM(usize),
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Hard => f.write_str("hard"),
            Self::Soft => f.write_str("soft"),
            Self::TopM(m) => write!(f, "top{m}"),
        }
    }
}

impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(Self::Hard),
            "soft" => Ok(Self::Soft),
            _ => s
                .strip_prefix("top")
                .and_then(|m| m.parse().ok())
                .filter(|m| (1..=REGIONS).contains(m))
                .map(Self::TopM)
                .ok_or_else(|| Error::Config(format!("attention mode `{s}` is not hard, soft or top1..top24"))),
        }
    }
}

impl TryFrom<String> for AttentionMode {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<AttentionMode> for String {
    fn from(m: AttentionMode) -> String {
        m.to_string()
    }
}

/// Selection outcome for one 24-entry similarity grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub q: Vec<f64>,
    pub mask: Vec<bool>,
    pub score: f64,
}

impl Selection {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

fn softmax(s: &[f64]) -> Vec<f64> {
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Plain-value selection used to build masks and for inspection.
pub fn select(s: &[f64], tau: f64, mode: AttentionMode) -> Selection {
    let q = softmax(s);
    let (mask, score) = match mode {
        AttentionMode::Hard => {
            let mask: Vec<bool> = q.iter().map(|&w| w >= tau).collect();
            let score = s.iter().zip(&mask).filter(|(_, &m)| m).map(|(v, _)| v).sum();
            (mask, score)
        }
        AttentionMode::Soft => (vec![true; s.len()], s.iter().zip(&q).map(|(v, w)| v * w).sum()),
        AttentionMode::TopM(m) => {
            let mut order: Vec<usize> = (0..s.len()).collect();
            // Stable sort keeps the lower index first on ties.
            order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
            let mut mask = vec![false; s.len()];
            for &i in order.iter().take(m) {
                mask[i] = true;
            }
            let score = s.iter().zip(&mask).filter(|(_, &m)| m).map(|(v, _)| v).sum();
            (mask, score)
        }
    };
    Selection { q, mask, score }
}

#[derive(Clone, Copy, Debug)]
pub struct CaParams {
    /// `[6, C, b]`: one transform per stripe.
    pub region: ParamId,
    /// `[2d, b]`
    pub text: ParamId,
    pub feature_dim: usize,
}

impl CaParams {
    pub fn init(store: &mut ParamStore, rng: &mut Rng, channels: usize, text_dim: usize, b: usize) -> Self {
        let g = ParamGroup::Alignment;
        let region = store.add_uniform("ca.region", g, &[STRIPES, channels, b], glorot_bound(channels, b), rng);
        let text = store.add_uniform("ca.text", g, &[text_dim, b], glorot_bound(text_dim, b), rng);
        Self { region, text, feature_dim: b }
    }
}

/// Per-stripe linear maps: `[N, 6, 4, C]` to `[N, 24, b]` (stripe-major).
pub fn transform_regions(ctx: &Ctx, weights: Var, phi: Var) -> Result<Var> {
    let t = ctx.tape;
    let s = t.shape(phi);
    let ws = t.shape(weights);
    if s.len() != 4 || s[1] != STRIPES || ws.len() != 3 || ws[0] != STRIPES || ws[1] != s[3] {
        return Err(Error::Data(format!("cannot transform regions {s:?} with weights {ws:?}")));
    }
    let (n, cols, c, b) = (s[0], s[2], s[3], ws[2]);
    let by_stripe = t.permute(phi, &[1, 0, 2, 3])?;
    let by_stripe = t.reshape(by_stripe, &[STRIPES, n * cols, c])?;
    let out = t.bmm(by_stripe, weights)?;
    let out = t.reshape(out, &[STRIPES, n, cols, b])?;
    let out = t.permute(out, &[1, 0, 2, 3])?;
    Ok(t.reshape(out, &[n, STRIPES * cols, b])?)
}

/// Cosine between every text row and every region: `[Q, b] × [G, R, b]` to `[Q, G, R]`.
pub fn local_similarities(ctx: &Ctx, text: Var, regions: Var) -> Result<Var> {
    let t = ctx.tape;
    let (st, sr) = (t.shape(text), t.shape(regions));
    if st.len() != 2 || sr.len() != 3 || st[1] != sr[2] {
        return Err(Error::Data(format!("text {st:?} and regions {sr:?} do not align")));
    }
    let tn = t.normalize(text)?;
    let rn = t.normalize(t.reshape(regions, &[sr[0] * sr[1], sr[2]])?)?;
    let s = t.matmul(tn, t.transpose(rn)?)?;
    Ok(t.reshape(s, &[st[0], sr[0], sr[1]])?)
}

pub struct CaOutput {
    /// `[Q, G]`
    pub scores: Var,
    /// Per (query, image) selection, row-major over `[Q, G]`.
    pub selections: Vec<Selection>,
}

/// Pools `s: [Q, G, 24]` into `[Q, G]`; hard and top-m masks are constants.
pub fn pool_similarities(ctx: &Ctx, s: Var, tau: f64, mode: AttentionMode) -> Result<CaOutput> {
    let t = ctx.tape;
    let shape = t.shape(s);
    let r = *shape.last().unwrap_or(&0);
    if r == 0 || !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!("invalid selection: {r} regions, tau {tau}")));
    }
    let selections: Vec<Selection> = t.value(s).data().chunks_exact(r).map(|row| select(row, tau, mode)).collect();
    let last = shape.len() - 1;
    let scores = match mode {
        AttentionMode::Soft => {
            let q = t.softmax(s, last)?;
            t.sum(t.mul(q, s)?, last)?
        }
        _ => {
            let m = selections.iter().flat_map(|sel| sel.mask.iter().map(|&b| if b { 1.0 } else { 0.0 }));
            let m = t.constant(Tensor::from_parts(shape.clone(), m.collect()));
            t.sum(t.mul(s, m)?, last)?
        }
    };
    Ok(CaOutput { scores, selections })
}

/// Transformed sentence vectors ẽ^t: `[Q, 2d]` to `[Q, b]`.
pub fn transform_text(ctx: &Ctx, params: &CaParams, e_t: Var) -> Result<Var> {
    Ok(ctx.tape.matmul(e_t, ctx.p(params.text))?)
}

/// Hard/soft/top-m coarse alignment over all (caption, image) pairs.
pub fn ca_scores(ctx: &Ctx, text: Var, regions: Var, tau: f64, mode: AttentionMode) -> Result<CaOutput> {
    let s = local_similarities(ctx, text, regions)?;
    pool_similarities(ctx, s, tau, mode)
}

/// Average of the 24 transformed regions: `[G, 24, b]` to `[G, b]`.
pub fn pooled_regions(ctx: &Ctx, regions: Var) -> Result<Var> {
    Ok(ctx.tape.mean(regions, 1)?)
}

/// Global matching without region selection: `cos(pooled regions, ẽ^t)` for all pairs.
pub fn global_scores(ctx: &Ctx, text: Var, regions: Var) -> Result<Var> {
    let t = ctx.tape;
    let pooled = pooled_regions(ctx, regions)?;
    let g = t.shape(pooled)[0];
    let b = t.shape(pooled)[1];
    let s = local_similarities(ctx, text, t.reshape(pooled, &[g, 1, b])?)?;
    Ok(t.reshape(s, &[t.shape(text)[0], g])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::params::Bound;

    fn empty() -> (Tape, ParamStore) {
        (Tape::new(), ParamStore::new())
    }

    fn with_ctx<R>(f: impl FnOnce(&Ctx) -> R) -> R {
        let (tape, store) = empty();
        let bound: Bound = store.bind(&tape, &[]);
        let ctx = Ctx::new(&tape, &bound);
        f(&ctx)
    }

    fn rand_t(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), rng.uniform_vec(n, -1.0, 1.0))
    }

    #[test]
    fn identity_and_zero_transforms() {
        let mut rng = Rng::new(1);
        let phi = rand_t(&mut rng, &[2, 6, 4, 3]);
        let mut eye = Tensor::zeros(&[6, 3, 3]);
        for s in 0..6 {
            for i in 0..3 {
                eye.set(&[s, i, i], 1.0);
            }
        }
        with_ctx(|ctx| {
            let t = ctx.tape;
            let x = t.constant(phi.clone());
            let out = transform_regions(ctx, t.constant(eye), x).unwrap();
            assert_eq!(t.value(out).data(), phi.data());
            let z = transform_regions(ctx, t.constant(Tensor::zeros(&[6, 3, 5])), x).unwrap();
            assert_eq!(t.shape(z), vec![2, 24, 5]);
            assert!(t.value(z).data().iter().all(|&v| v == 0.0));
        });
    }

    #[test]
    fn stripe_weights_are_isolated() {
        let mut rng = Rng::new(2);
        let phi = rand_t(&mut rng, &[1, 6, 4, 3]);
        let w = rand_t(&mut rng, &[6, 3, 2]);
        let mut w2 = w.clone();
        w2.set(&[0, 1, 1], w.get(&[0, 1, 1]) + 0.5);
        let run = |w: Tensor| with_ctx(|ctx| {
            let out = transform_regions(ctx, ctx.tape.constant(w), ctx.tape.constant(phi.clone())).unwrap();
            let v = ctx.tape.value(out).clone();
            v
        });
        let (a, b) = (run(w), run(w2));
        for r in 0..24 {
            let changed = a.data()[r * 2..r * 2 + 2] != b.data()[r * 2..r * 2 + 2];
            assert_eq!(changed, r < 4, "region {r}");
        }
        with_ctx(|ctx| {
            let bad = ctx.tape.constant(Tensor::zeros(&[6, 4, 2]));
            assert!(transform_regions(ctx, bad, ctx.tape.constant(phi.clone())).is_err());
        });
    }

    #[test]
    fn similarities_match_loop_oracle() {
        let mut rng = Rng::new(3);
        let text = rand_t(&mut rng, &[3, 5]);
        let regions = rand_t(&mut rng, &[2, 24, 5]);
        let s = with_ctx(|ctx| {
            let out = local_similarities(ctx, ctx.tape.constant(text.clone()), ctx.tape.constant(regions.clone())).unwrap();
            let v = ctx.tape.value(out).clone();
            v
        });
        for q in 0..3 {
            for g in 0..2 {
                for r in 0..24 {
                    let (mut dot, mut nt, mut nr) = (0.0, 0.0, 0.0);
                    for k in 0..5 {
                        let (a, b) = (text.get(&[q, k]), regions.get(&[g, r, k]));
                        dot += a * b;
                        nt += a * a;
                        nr += b * b;
                    }
                    let want = dot / (nt.sqrt() * nr.sqrt());
                    assert!((s.get(&[q, g, r]) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn equal_and_orthogonal_regions() {
        let text = Tensor::from_parts(vec![1, 2], vec![1.0, 0.0]);
        let same = Tensor::from_parts(vec![1, 24, 2], [1.0, 0.0].repeat(24));
        let orth = Tensor::from_parts(vec![1, 24, 2], [0.0, 3.0].repeat(24));
        with_ctx(|ctx| {
            let t = ctx.tape;
            let a = local_similarities(ctx, t.constant(text.clone()), t.constant(same)).unwrap();
            assert!(t.value(a).data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
            let b = local_similarities(ctx, t.constant(text.clone()), t.constant(orth)).unwrap();
            assert!(t.value(b).data().iter().all(|&v| v == 0.0));
        });
    }

    #[test]
    fn uniform_grid_selects_everything() {
        let sel = select(&[0.3; 24], DEFAULT_TAU, AttentionMode::Hard);
        assert_eq!(sel.count(), 24);
        assert!((sel.score - 24.0 * 0.3).abs() < 1e-12);
        let soft = select(&[0.3; 24], DEFAULT_TAU, AttentionMode::Soft);
        assert!((soft.score - 0.3).abs() < 1e-12);
    }

    #[test]
    fn single_peak_selects_only_the_peak() {
        let mut s = [0.0; 24];
        s[7] = 10.0;
        let sel = select(&s, DEFAULT_TAU, AttentionMode::Hard);
        // q_7 = e^10 / (e^10 + 23) and every other q = 1 / (e^10 + 23), far below 1/24.
        let z = 10f64.exp() + 23.0;
        assert!((sel.q[7] - 10f64.exp() / z).abs() < 1e-15);
        assert!((sel.q[0] - 1.0 / z).abs() < 1e-15);
        assert_eq!(sel.count(), 1);
        assert!(sel.mask[7]);
        assert_eq!(sel.score, 10.0);
    }

    #[test]
    fn selection_is_never_empty() {
        let mut rng = Rng::new(4);
        for _ in 0..500 {
            let s = rng.uniform_vec(24, -1.0, 1.0);
            assert!(select(&s, DEFAULT_TAU, AttentionMode::Hard).count() >= 1);
        }
    }

    #[test]
    fn top_m_breaks_ties_by_index() {
        let mut s = vec![0.0; 24];
        s[3] = 1.0;
        s[9] = 1.0;
        s[20] = 0.5;
        let sel = select(&s, DEFAULT_TAU, AttentionMode::TopM(2));
        assert!(sel.mask[3] && sel.mask[9] && !sel.mask[20]);
        let sel = select(&[0.1; 24], DEFAULT_TAU, AttentionMode::TopM(5));
        assert_eq!(sel.mask.iter().position(|&m| !m), Some(5));
        assert!((sel.score - 0.5).abs() < 1e-12);
    }

    #[test]
    fn modes_parse_and_print() {
        for m in ["hard", "soft", "top5", "top24"] {
            assert_eq!(m.parse::<AttentionMode>().unwrap().to_string(), m);
        }
        for m in ["", "top0", "top25", "Hard", "topx"] {
            assert!(m.parse::<AttentionMode>().is_err());
        }
        let json = serde_json::to_string(&AttentionMode::TopM(10)).unwrap();
        assert_eq!(json, "\"top10\"");
    }

    #[test]
    fn hard_gradient_is_the_mask() {
        let mut rng = Rng::new(5);
        let s = rand_t(&mut rng, &[2, 3, 24]);
        let tape = Tape::new();
        let store = ParamStore::new();
        let bound = store.bind(&tape, &[]);
        let ctx = Ctx::new(&tape, &bound);
        let v = tape.param(s.clone());
        let out = pool_similarities(&ctx, v, DEFAULT_TAU, AttentionMode::Hard).unwrap();
        let l = tape.sum_all(out.scores).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(v).unwrap();
        let mask: Vec<f64> = out.selections.iter().flat_map(|s| s.mask.iter().map(|&m| if m { 1.0 } else { 0.0 })).collect();
        assert_eq!(g.data(), &mask[..]);
        for (k, sel) in out.selections.iter().enumerate() {
            assert_eq!(tape.value(out.scores).data()[k], sel.score);
        }
    }

    #[test]
    fn unselected_perturbation_leaves_score() {
        let mut s: Vec<f64> = (0..24).map(|i| if i < 3 { 2.0 } else { 0.0 }).collect();
        let base = select(&s, DEFAULT_TAU, AttentionMode::Hard);
        assert!(!base.mask[10]);
        s[10] = 0.01;
        let after = select(&s, DEFAULT_TAU, AttentionMode::Hard);
        assert_eq!(base.mask, after.mask);
        assert_eq!(base.score, after.score);
    }

    #[test]
    fn global_scores_use_pooled_regions() {
        let mut rng = Rng::new(6);
        let text = rand_t(&mut rng, &[2, 4]);
        let regions = rand_t(&mut rng, &[3, 24, 4]);
        let g = with_ctx(|ctx| {
            let out = global_scores(ctx, ctx.tape.constant(text.clone()), ctx.tape.constant(regions.clone())).unwrap();
            let v = ctx.tape.value(out).clone();
            v
        });
        assert_eq!(g.shape(), [2, 3]);
        for q in 0..2 {
            for im in 0..3 {
                let pooled: Vec<f64> = (0..4).map(|k| (0..24).map(|r| regions.get(&[im, r, k])).sum::<f64>() / 24.0).collect();
                let tv: Vec<f64> = (0..4).map(|k| text.get(&[q, k])).collect();
                let dot: f64 = pooled.iter().zip(&tv).map(|(a, b)| a * b).sum();
                let n = pooled.iter().map(|v| v * v).sum::<f64>().sqrt() * tv.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((g.get(&[q, im]) - dot / n).abs() < 1e-12);
            }
        }
    }
}
