//! The assembled network: text and visual encoders, both alignments and the heads.

use crate::autodiff::Var;
use crate::coarse::{ca_scores, global_scores, pooled_regions, transform_regions, transform_text, CaParams, Selection};
use crate::error::{Error, Result};
use crate::fine::{fa_forward, fa_regions, FaMode, FaOutput, FaParams};
use crate::objectives::{total_loss, BranchInputs, IdentityHead, LossBreakdown, LossInputs};
use crate::params::{Ctx, ParamStore};
use crate::rng::Rng;
use crate::text::{
    chunk, encode_captions, encode_phrases, tokenize, EncodedCaption, PhraseEncoding, TextBatch, TextParams, Vocabulary,
};
use crate::visual::{pose_cnn, region_features, ImageBatch, PartGrouping, VisualParams};

use super::config::TrainConfig;

/// Stream of the root seed used for parameter initialization.
const INIT_STREAM: u64 = 0x1417;

#[derive(Clone, Debug)]
pub struct Model {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    /// Training identities; the classifier label of identity `identities[k]` is `k`.
    pub identities: Vec<usize>,
    pub grouping: PartGrouping,
    pub store: ParamStore,
    pub text: TextParams,
    pub visual: VisualParams,
    pub ca: CaParams,
    pub fa: FaParams,
    pub head: IdentityHead,
}

/// Image-side quantities that do not depend on the captions.
#[derive(Clone, Copy, Debug)]
pub struct ImageSide {
    /// `[G, 24, b]` coarse-alignment region vectors.
    pub ca_regions: Var,
    /// `[G, 24, b]`, present when fine alignment is on.
    pub fa_regions: Option<Var>,
    /// `[G, 6, b]`, present when fine alignment uses pose.
    pub parts: Option<Var>,
}

pub struct TextSide {
    /// `[Q, b]` transformed sentence vectors.
    pub sentence: Var,
    pub phrases: Option<PhraseEncoding>,
}

pub struct Scores {
    /// `[Q, G]`
    pub ca: Var,
    /// Present for hard and top-m coarse alignment.
    pub selections: Option<Vec<Selection>>,
    pub fa: Option<FaOutput>,
}

impl Model {
    pub fn new(config: TrainConfig, vocab: Vocabulary, identities: Vec<usize>) -> Result<Self> {
        config.validate()?;
        if identities.is_empty() {
            return Err(Error::Config("the identity classifier needs at least one identity".into()));
        }
        if identities.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("classifier identities must be strictly ascending".into()));
        }
        let mut rng = Rng::new(config.seed).fork(INIT_STREAM);
        let mut store = ParamStore::new();
        let vis = config.visual();
        let text = TextParams::init(&mut store, &mut rng, vocab.len(), config.emb_dim, config.hidden);
        let visual = VisualParams::init(&mut store, &mut rng, &vis)?;
        let c = vis.region_channels();
        let b = config.feature_dim;
        let ca = CaParams::init(&mut store, &mut rng, c, text.output_dim(), b);
        let fa = FaParams::init(&mut store, &mut rng, c, text.output_dim(), b);
        let head = IdentityHead::init(&mut store, &mut rng, b, identities.len());
        Ok(Self { config, vocab, identities, grouping: PartGrouping::default(), store, text, visual, ca, fa, head })
    }

    /// Tokens, ids and noun-phrase spans of a free-text caption.
    pub fn encode_text(&self, text: &str) -> Result<EncodedCaption> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::Data("caption has no tokens".into()));
        }
        Ok(EncodedCaption { ids: self.vocab.encode(&tokens), spans: chunk(&tokens), identity: 0 })
    }

    pub fn label_of(&self, identity: usize) -> Option<usize> {
        self.identities.binary_search(&identity).ok()
    }

    fn uses_pose(&self) -> bool {
        self.config.fa && self.config.fa_mode != FaMode::NoPose
    }

    pub fn image_side(&self, ctx: &Ctx, batch: &ImageBatch) -> Result<ImageSide> {
        let t = ctx.tape;
        let phi = region_features(ctx, &self.visual, t.constant(batch.input.clone()))?;
        let ca_regions = transform_regions(ctx, ctx.p(self.ca.region), phi)?;
        let fa_regions = if self.config.fa { Some(fa_regions(ctx, &self.fa, phi)?) } else { None };
        let parts =
            if self.uses_pose() { Some(pose_cnn(ctx, &self.visual, t.constant(batch.parts.clone()))?) } else { None };
        Ok(ImageSide { ca_regions, fa_regions, parts })
    }

    pub fn text_side(&self, ctx: &Ctx, batch: &TextBatch) -> Result<TextSide> {
        let e_t = encode_captions(ctx, &self.text, batch)?;
        let sentence = transform_text(ctx, &self.ca, e_t)?;
        let phrases = if !self.config.fa {
            None
        } else if self.config.fa_mode == FaMode::NoPhrase {
            Some(encode_phrases(ctx, &self.text, &batch.with_word_spans())?)
        } else {
            Some(encode_phrases(ctx, &self.text, batch)?)
        };
        Ok(TextSide { sentence, phrases })
    }

    /// Scores every caption against every image.
    pub fn score(&self, ctx: &Ctx, text: &TextSide, image: &ImageSide) -> Result<Scores> {
        let (ca, selections) = if self.config.ca {
            let out = ca_scores(ctx, text.sentence, image.ca_regions, self.config.tau, self.config.attention)?;
            let keep = !matches!(self.config.attention, crate::coarse::AttentionMode::Soft);
            (out.scores, keep.then_some(out.selections))
        } else {
            (global_scores(ctx, text.sentence, image.ca_regions)?, None)
        };
        let fa = match (&text.phrases, image.fa_regions) {
            (Some(p), Some(regions)) if self.config.fa => {
                Some(fa_forward(ctx, &self.fa, self.config.fa_mode, image.parts, p.vectors, &p.mask, regions)?)
            }
            _ => None,
        };
        Ok(Scores { ca, selections, fa })
    }

    /// Training loss for a batch where caption i describes image i.
    pub fn loss(
        &self,
        ctx: &Ctx,
        texts: &TextBatch,
        images: &ImageBatch,
        labels: &[usize],
        exclude: Option<&[bool]>,
        ranking: bool,
    ) -> Result<(Var, LossBreakdown)> {
        if texts.len() != images.len() || labels.len() != images.len() {
            return Err(Error::Data(format!(
                "{} captions, {} images and {} labels in one batch",
                texts.len(),
                images.len(),
                labels.len()
            )));
        }
        let image = self.image_side(ctx, images)?;
        let text = self.text_side(ctx, texts)?;
        let scores = self.score(ctx, &text, &image)?;
        let ca = BranchInputs {
            scores: scores.ca,
            image_features: pooled_regions(ctx, image.ca_regions)?,
            text_features: text.sentence,
        };
        let fa = match &scores.fa {
            Some(out) => {
                let pairs: Vec<usize> = (0..texts.len()).collect();
                Some(BranchInputs {
                    scores: out.scores,
                    image_features: out.image_features(ctx)?,
                    text_features: out.text_features(ctx, &pairs)?,
                })
            }
            None => None,
        };
        let inputs = LossInputs { ca, fa, parts: image.parts, labels, exclude, ranking };
        total_loss(ctx, &self.head, &self.config.loss_weights(), &inputs)
    }
}
