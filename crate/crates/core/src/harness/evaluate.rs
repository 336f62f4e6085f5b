//! Caption-to-image retrieval: score matrices, rankings and top-k accuracy.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::corpus::{Corpus, Split};
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamGroup};
use crate::tensor::Tensor;
use crate::text::{EncodedCaption, TextBatch};
use crate::visual::{ImageBatch, PersonImage, REGIONS};

use super::model::{ImageSide, Model};

pub const TOP_K: [usize; 3] = [1, 5, 10];

/// Cached image-side tensors for a gallery.
#[derive(Clone, Debug, PartialEq)]
pub struct GalleryFeatures {
    pub ca_regions: Tensor,
    pub fa_regions: Option<Tensor>,
    pub parts: Option<Tensor>,
}

impl GalleryFeatures {
    pub fn len(&self) -> usize {
        self.ca_regions.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn append(acc: &mut Option<(Vec<usize>, Vec<f64>)>, t: &Tensor) {
    match acc {
        Some((shape, data)) => {
            shape[0] += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        None => *acc = Some((t.shape().to_vec(), t.data().to_vec())),
    }
}

fn finish(acc: Option<(Vec<usize>, Vec<f64>)>) -> Option<Tensor> {
    acc.map(|(s, d)| Tensor::from_parts(s, d))
}

/// Runs the image side once per chunk with every parameter frozen.
pub fn gallery_features(model: &Model, images: &[&PersonImage]) -> Result<GalleryFeatures> {
    if images.is_empty() {
        return Err(Error::Data("gallery is empty".into()));
    }
    let (mut ca, mut fa, mut parts) = (None, None, None);
    for chunk in images.chunks(model.config.eval_chunk) {
        let batch = ImageBatch::new(chunk, model.config.con_pose, &model.grouping)?;
        let tape = Tape::new();
        let bound = model.store.bind(&tape, &[ParamGroup::VisualCnn, ParamGroup::Alignment]);
        let ctx = Ctx::new(&tape, &bound);
        let side = model.image_side(&ctx, &batch)?;
        append(&mut ca, &tape.value(side.ca_regions));
        if let Some(v) = side.fa_regions {
            append(&mut fa, &tape.value(v));
        }
        if let Some(v) = side.parts {
            append(&mut parts, &tape.value(v));
        }
    }
    Ok(GalleryFeatures { ca_regions: finish(ca).expect("non-empty gallery"), fa_regions: finish(fa), parts: finish(parts) })
}

/// Row-major `[Q, G]` scores of each branch.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub queries: usize,
    pub gallery: usize,
    pub ca: Vec<f64>,
    pub fa: Option<Vec<f64>>,
    /// Selected-region count of each pair under hard or top-m coarse alignment.
    pub selected: Option<Vec<u8>>,
}

impl ScoreMatrix {
    /// S = S^ca + λ₃·S^fa, or S^ca alone when the fine branch is absent or ablated.
    pub fn fused(&self, lambda3: f64, use_fa: bool) -> Vec<f64> {
        match (&self.fa, use_fa) {
            (Some(fa), true) => self.ca.iter().zip(fa).map(|(c, f)| c + lambda3 * f).collect(),
            _ => self.ca.clone(),
        }
    }
}

pub fn score_captions(model: &Model, gallery: &GalleryFeatures, captions: &[EncodedCaption]) -> Result<ScoreMatrix> {
    let g = gallery.len();
    let mut ca = Vec::with_capacity(captions.len() * g);
    let mut fa: Option<Vec<f64>> = None;
    let mut selected: Option<Vec<u8>> = None;
    for chunk in captions.chunks(model.config.eval_chunk) {
        let texts = TextBatch::new(chunk)?;
        let tape = Tape::new();
        let bound = model.store.bind(&tape, &[ParamGroup::VisualCnn, ParamGroup::Alignment]);
        let ctx = Ctx::new(&tape, &bound);
        let image = ImageSide {
            ca_regions: tape.constant(gallery.ca_regions.clone()),
            fa_regions: gallery.fa_regions.as_ref().map(|t| tape.constant(t.clone())),
            parts: gallery.parts.as_ref().map(|t| tape.constant(t.clone())),
        };
        let text = model.text_side(&ctx, &texts)?;
        let scores = model.score(&ctx, &text, &image)?;
        ca.extend_from_slice(tape.value(scores.ca).data());
        if let Some(out) = &scores.fa {
            fa.get_or_insert_with(Vec::new).extend_from_slice(tape.value(out.scores).data());
        }
        if let Some(sel) = &scores.selections {
            selected.get_or_insert_with(Vec::new).extend(sel.iter().map(|s| s.count() as u8));
        }
    }
    Ok(ScoreMatrix { queries: captions.len(), gallery: g, ca, fa, selected })
}

/// Gallery positions by descending score; ties go to the smaller image id.
pub fn rank_gallery(scores: &[f64], ids: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(ids[a].cmp(&ids[b])));
    order
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub image: usize,
    pub caption: usize,
    pub identity: usize,
}

/// Selected-region counts split by whether caption and image show the same person.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionStats {
    pub positive_mean: f64,
    pub negative_mean: f64,
    /// Index k counts pairs with k selected regions.
    pub positive_histogram: Vec<usize>,
    pub negative_histogram: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    /// Corpus image ids forming the gallery.
    pub gallery: Vec<usize>,
    pub queries: Vec<Query>,
    /// Per query, gallery image ids from best to worst.
    pub rankings: Vec<Vec<usize>>,
    /// Per query, whether the top 1, 5 and 10 contain the described person.
    pub hits: Vec<[bool; 3]>,
    pub top1: f64,
    pub top5: f64,
    pub top10: f64,
    pub selection: Option<SelectionStats>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub lambda3: f64,
    /// Score by S^ca alone.
    pub ablate_fa: bool,
}

impl EvalOptions {
    pub fn for_model(model: &Model) -> Self {
        Self { lambda3: model.config.lambda3, ablate_fa: false }
    }
}

fn selection_stats(selected: &[u8], queries: &[Query], identities: &[usize]) -> SelectionStats {
    let mut pos = vec![0usize; REGIONS + 1];
    let mut neg = vec![0usize; REGIONS + 1];
    let g = identities.len();
    for (qi, q) in queries.iter().enumerate() {
        for (j, &id) in identities.iter().enumerate() {
            let n = selected[qi * g + j] as usize;
            if id == q.identity {
                pos[n] += 1;
            } else {
                neg[n] += 1;
            }
        }
    }
    let mean = |h: &[usize]| {
        let total: usize = h.iter().sum();
        let s: usize = h.iter().enumerate().map(|(k, c)| k * c).sum();
        if total == 0 { 0.0 } else { s as f64 / total as f64 }
    };
    SelectionStats { positive_mean: mean(&pos), negative_mean: mean(&neg), positive_histogram: pos, negative_histogram: neg }
}

/// Every caption of every image in `split` queries the split's images.
pub fn evaluate(model: &Model, corpus: &Corpus, split: Split, opts: EvalOptions) -> Result<RetrievalResult> {
    let gallery = corpus.split_images(split);
    if gallery.is_empty() {
        return Err(Error::Data(format!("split {split:?} has no images")));
    }
    let images: Vec<&PersonImage> = gallery.iter().map(|&i| &corpus.images[i].image).collect();
    let identities: Vec<usize> = images.iter().map(|im| im.identity).collect();
    let mut queries = Vec::new();
    let mut captions = Vec::new();
    for &i in &gallery {
        for c in 0..corpus.images[i].captions.len() {
            queries.push(Query { image: i, caption: c, identity: corpus.images[i].image.identity });
            captions.push(corpus.encode(i, c));
        }
    }
    let features = gallery_features(model, &images)?;
    let matrix = score_captions(model, &features, &captions)?;
    let fused = matrix.fused(opts.lambda3, !opts.ablate_fa);
    let g = gallery.len();
    let mut rankings = Vec::with_capacity(queries.len());
    let mut hits = Vec::with_capacity(queries.len());
    for (qi, q) in queries.iter().enumerate() {
        let order = rank_gallery(&fused[qi * g..(qi + 1) * g], &gallery);
        let first = order.iter().position(|&j| identities[j] == q.identity).unwrap_or(usize::MAX);
        hits.push(TOP_K.map(|k| first < k));
        rankings.push(order.iter().map(|&j| gallery[j]).collect());
    }
    let rate = |k: usize| hits.iter().filter(|h| h[k]).count() as f64 / hits.len() as f64;
    let selection = matrix.selected.as_deref().map(|s| selection_stats(s, &queries, &identities));
    Ok(RetrievalResult { top1: rate(0), top5: rate(1), top10: rate(2), gallery, queries, rankings, hits, selection })
}

/// One gallery image returned for a free-text query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Retrieved {
    pub image: usize,
    pub identity: usize,
    pub score: f64,
    pub ca: f64,
    pub fa: Option<f64>,
}

/// Ranks the images of `split` (or the whole corpus) against a free-text caption.
pub fn retrieve(
    model: &Model,
    corpus: &Corpus,
    split: Option<Split>,
    text: &str,
    top: usize,
    opts: EvalOptions,
) -> Result<Vec<Retrieved>> {
    let gallery: Vec<usize> = match split {
        Some(s) => corpus.split_images(s),
        None => (0..corpus.images.len()).collect(),
    };
    if gallery.is_empty() {
        return Err(Error::Data("gallery is empty".into()));
    }
    let images: Vec<&PersonImage> = gallery.iter().map(|&i| &corpus.images[i].image).collect();
    let features = gallery_features(model, &images)?;
    let matrix = score_captions(model, &features, &[model.encode_text(text)?])?;
    let fused = matrix.fused(opts.lambda3, !opts.ablate_fa);
    let order = rank_gallery(&fused, &gallery);
    Ok(order
        .into_iter()
        .take(top)
        .map(|j| Retrieved {
            image: gallery[j],
            identity: images[j].identity,
            score: fused[j],
            ca: matrix.ca[j],
            fa: matrix.fa.as_ref().filter(|_| !opts.ablate_fa).map(|f| f[j]),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::model::tests::{tiny_config, tiny_corpus};

    #[test]
    fn equal_scores_rank_by_id() {
        assert_eq!(rank_gallery(&[0.5; 4], &[10, 3, 7, 1]), [3, 1, 2, 0]);
        assert_eq!(rank_gallery(&[0.1, 0.9, 0.5], &[0, 1, 2]), [1, 2, 0]);
    }

    #[test]
    fn results_are_consistent_and_repeatable() {
        let corpus = tiny_corpus();
        let model = Model::new(tiny_config(), corpus.vocab.clone(), corpus.split_identities(Split::Train)).unwrap();
        let opts = EvalOptions::for_model(&model);
        let a = evaluate(&model, &corpus, Split::Train, opts).unwrap();
        let b = evaluate(&model, &corpus, Split::Train, opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.queries.len(), 16);
        for r in &a.rankings {
            let mut s = r.clone();
            s.sort_unstable();
            assert_eq!(s, a.gallery);
        }
        assert!(a.top1 <= a.top5 && a.top5 <= a.top10 && a.top10 <= 1.0);
        let sel = a.selection.unwrap();
        assert_eq!(sel.positive_histogram.iter().sum::<usize>(), 16 * 2);
        assert_eq!(sel.negative_histogram.iter().sum::<usize>(), 16 * 6);
    }

    #[test]
    fn chunking_does_not_change_scores() {
        let corpus = tiny_corpus();
        let ids = corpus.split_identities(Split::Train);
        let m1 = Model::new(tiny_config(), corpus.vocab.clone(), ids.clone()).unwrap();
        let m3 = Model::new(crate::harness::TrainConfig { eval_chunk: 3, ..tiny_config() }, corpus.vocab.clone(), ids).unwrap();
        let opts = EvalOptions::for_model(&m1);
        let a = evaluate(&m1, &corpus, Split::Train, opts).unwrap();
        let b = evaluate(&m3, &corpus, Split::Train, opts).unwrap();
        assert_eq!(a.rankings, b.rankings);
    }

    #[test]
    fn retrieve_returns_the_requested_rows() {
        let corpus = tiny_corpus();
        let model = Model::new(tiny_config(), corpus.vocab.clone(), corpus.split_identities(Split::Train)).unwrap();
        let opts = EvalOptions::for_model(&model);
        let rows = retrieve(&model, &corpus, None, "a person in red shoes", 10, opts).unwrap();
        assert_eq!(rows.len(), 10);
        assert!(rows.windows(2).all(|w| w[0].score >= w[1].score));
        let r = &rows[0];
        assert!((r.score - (r.ca + model.config.lambda3 * r.fa.unwrap())).abs() < 1e-12);
        let test = retrieve(&model, &corpus, Some(Split::Test), "red shoes", 10, opts).unwrap();
        assert_eq!(test.len(), 4);
    }

    #[test]
    fn ablating_fa_scores_by_ca_alone() {
        let m = ScoreMatrix { queries: 1, gallery: 2, ca: vec![0.1, 0.2], fa: Some(vec![1.0, -1.0]), selected: None };
        assert_eq!(m.fused(1.0, true), [1.1, -0.8]);
        assert_eq!(m.fused(1.0, false), [0.1, 0.2]);
    }
}
