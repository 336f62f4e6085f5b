//! Ranking, identification and part losses and their weighted total.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::coarse::DEFAULT_TAU;
use crate::error::{Error, Result};
use crate::params::{glorot_bound, Ctx, ParamGroup, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::visual::PARTS;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub margin: f64,
    pub tau: f64,
    /// Include identification losses on the fine-alignment features.
    pub fa_identity: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 1.0, lambda3: 1.0, lambda4: 1.0, margin: 0.2, tau: DEFAULT_TAU, fa_identity: true }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let l = [self.lambda1, self.lambda2, self.lambda3, self.lambda4];
        if l.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("margin must be positive, got {}", self.margin)));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        Ok(())
    }
}

/// Identity classifiers, each shared by the image and text branch, plus the part classifier.
#[derive(Clone, Copy, Debug)]
pub struct IdentityHead {
    /// `[b, identities]`
    pub ca: ParamId,
    /// `[b, identities]`
    pub fa: ParamId,
    /// `[b, 6]`
    pub part: ParamId,
    pub identities: usize,
}

impl IdentityHead {
    pub fn init(store: &mut ParamStore, rng: &mut Rng, b: usize, identities: usize) -> Self {
        let g = ParamGroup::Alignment;
        let bound = glorot_bound(b, identities);
        let ca = store.add_uniform("id.ca", g, &[b, identities], bound, rng);
        let fa = store.add_uniform("id.fa", g, &[b, identities], bound, rng);
        let part = store.add_uniform("id.part", g, &[b, PARTS], glorot_bound(b, PARTS), rng);
        Self { ca, fa, part, identities }
    }
}

/// Bidirectional hardest-negative hinge, averaged over the batch.
///
/// `scores[i][j]` scores caption i against image j; the diagonal holds the
/// positives. Pairs flagged in `exclude` (row-major, e.g. other images of the
/// same person) are never used as negatives. A row or column with no
/// admissible negative contributes zero.
pub fn ranking_loss(ctx: &Ctx, scores: Var, margin: f64, exclude: Option<&[bool]>) -> Result<Var> {
    let t = ctx.tape;
    let s = t.shape(scores);
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::Data(format!("ranking loss needs a square score matrix, got {s:?}")));
    }
    let n = s[0];
    if n < 2 {
        return Err(Error::Data(format!("ranking loss needs a batch of at least 2, got {n}")));
    }
    if exclude.is_some_and(|e| e.len() != n * n) {
        return Err(Error::Data("exclusion mask does not match the score matrix".into()));
    }
    let idx: Vec<usize> = (0..n).collect();
    let pos = t.pick(scores, &idx)?;
    let mut total = None;
    for transpose in [false, true] {
        let m = if transpose { t.transpose(scores)? } else { scores };
        let mut allowed = vec![true; n * n];
        for i in 0..n {
            for j in 0..n {
                let (r, c) = if transpose { (j, i) } else { (i, j) };
                allowed[i * n + j] = i != j && !exclude.is_some_and(|e| e[r * n + c]);
            }
        }
        let mut weight = vec![1.0; n];
        for i in 0..n {
            if !allowed[i * n..(i + 1) * n].iter().any(|&a| a) {
                allowed[i * n + i] = true;
                weight[i] = 0.0;
            }
        }
        let neg = t.masked_max(m, Some(&allowed))?;
        let hinge = t.relu(t.add_scalar(t.sub(neg, pos)?, margin)?)?;
        let w = t.constant(Tensor::from_parts(vec![n], weight));
        let part = t.sum_all(t.mul(hinge, w)?)?;
        total = Some(match total {
            None => part,
            Some(prev) => t.add(prev, part)?,
        });
    }
    Ok(t.scale(total.expect("two directions"), 1.0 / n as f64)?)
}

/// Mean cross-entropy of `features [N, b] · weights [b, K]` against `labels`.
pub fn id_loss(ctx: &Ctx, features: Var, weights: Var, labels: &[usize]) -> Result<Var> {
    let t = ctx.tape;
    let k = t.shape(weights)[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Data(format!("identity label {bad} outside {k} classes")));
    }
    let logits = t.matmul(features, weights)?;
    let lp = t.pick(t.log_softmax(logits)?, labels)?;
    Ok(t.scale(t.sum_all(lp)?, -1.0 / labels.len() as f64)?)
}

/// Classifies every part vector `[N, 6, b]` as its own part index.
pub fn part_loss(ctx: &Ctx, parts: Var, weights: Var) -> Result<Var> {
    let t = ctx.tape;
    let s = t.shape(parts);
    if s.len() != 3 || s[1] != PARTS {
        return Err(Error::Data(format!("part vectors must be [N, {PARTS}, b], got {s:?}")));
    }
    let flat = t.reshape(parts, &[s[0] * PARTS, s[2]])?;
    let labels: Vec<usize> = (0..s[0] * PARTS).map(|i| i % PARTS).collect();
    id_loss(ctx, flat, weights, &labels)
}

/// Predicted part index for every part vector, row-major `[N, 6]`.
pub fn part_predictions(ctx: &Ctx, parts: Var, weights: Var) -> Result<Vec<usize>> {
    let t = ctx.tape;
    let s = t.shape(parts);
    let flat = t.reshape(parts, &[s[0] * s[1], s[2]])?;
    let logits = t.value(t.matmul(flat, weights)?).clone();
    let k = logits.shape()[1];
    Ok(logits
        .data()
        .chunks_exact(k)
        .map(|row| row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best }))
        .collect())
}

/// S = S^ca + λ₃·S^fa.
pub fn fused_score(ca: f64, fa: f64, lambda3: f64) -> f64 {
    ca + lambda3 * fa
}

/// One granularity's batch quantities for the loss.
pub struct BranchInputs {
    /// `[B, B]` caption × image scores.
    pub scores: Var,
    /// `[B, b]`
    pub image_features: Var,
    /// `[B, b]`
    pub text_features: Var,
}

pub struct LossInputs<'a> {
    pub ca: BranchInputs,
    pub fa: Option<BranchInputs>,
    /// `[B, 6, b]`
    pub parts: Option<Var>,
    /// Classifier label of each batch pair.
    pub labels: &'a [usize],
    /// Off-diagonal pairs that must not serve as negatives.
    pub exclude: Option<&'a [bool]>,
    /// Include the ranking terms; off during identification-only warm-up.
    pub ranking: bool,
}

/// Loss components; zero for disabled branches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "L")]
    pub total: f64,
    #[serde(rename = "L_r_ca")]
    pub rank_ca: f64,
    #[serde(rename = "L_id_i_ca")]
    pub id_image_ca: f64,
    #[serde(rename = "L_id_t_ca")]
    pub id_text_ca: f64,
    #[serde(rename = "L_r_fa")]
    pub rank_fa: f64,
    #[serde(rename = "L_id_i_fa")]
    pub id_image_fa: f64,
    #[serde(rename = "L_id_t_fa")]
    pub id_text_fa: f64,
    #[serde(rename = "L_p")]
    pub part: f64,
}

impl LossBreakdown {
    /// Recomputes the weighted total from the components.
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        let ca = self.rank_ca + w.lambda1 * self.id_image_ca + w.lambda2 * self.id_text_ca;
        let fa = self.rank_fa + w.lambda1 * self.id_image_fa + w.lambda2 * self.id_text_fa;
        ca + w.lambda3 * fa + w.lambda4 * self.part
    }
}

fn branch(
    ctx: &Ctx,
    b: &BranchInputs,
    classifier: Var,
    identity: bool,
    w: &LossWeights,
    inputs: &LossInputs,
) -> Result<Option<(Var, [f64; 3])>> {
    let t = ctx.tape;
    let mut parts = [0.0; 3];
    let mut total = None;
    if inputs.ranking {
        let rank = ranking_loss(ctx, b.scores, w.margin, inputs.exclude)?;
        parts[0] = t.item(rank);
        total = Some(rank);
    }
    if identity {
        let idi = id_loss(ctx, b.image_features, classifier, inputs.labels)?;
        let idt = id_loss(ctx, b.text_features, classifier, inputs.labels)?;
        parts[1] = t.item(idi);
        parts[2] = t.item(idt);
        let id = t.add(t.scale(idi, w.lambda1)?, t.scale(idt, w.lambda2)?)?;
        total = Some(match total {
            Some(r) => t.add(r, id)?,
            None => id,
        });
    }
    Ok(total.map(|v| (v, parts)))
}

/// L = L^ca + λ₃·L^fa + λ₄·L_p with every component reported.
pub fn total_loss(ctx: &Ctx, head: &IdentityHead, w: &LossWeights, inputs: &LossInputs) -> Result<(Var, LossBreakdown)> {
    let t = ctx.tape;
    let (mut total, ca) = branch(ctx, &inputs.ca, ctx.p(head.ca), true, w, inputs)?.expect("identity terms are always on");
    let mut out = LossBreakdown { rank_ca: ca[0], id_image_ca: ca[1], id_text_ca: ca[2], ..Default::default() };
    if let Some(fa_in) = &inputs.fa {
        if w.lambda3 != 0.0 {
            if let Some((l_fa, fa)) = branch(ctx, fa_in, ctx.p(head.fa), w.fa_identity, w, inputs)? {
                total = t.add(total, t.scale(l_fa, w.lambda3)?)?;
                out.rank_fa = fa[0];
                out.id_image_fa = fa[1];
                out.id_text_fa = fa[2];
            }
        }
    }
    if let Some(parts) = inputs.parts {
        if w.lambda4 != 0.0 {
            let lp = part_loss(ctx, parts, ctx.p(head.part))?;
            out.part = t.item(lp);
            total = t.add(total, t.scale(lp, w.lambda4)?)?;
        }
    }
    out.total = t.item(total);
    Ok((total, out))
}
