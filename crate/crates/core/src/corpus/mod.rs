//! Procedural "doll" corpus: attribute-defined identities, rendered stick
//! figures with keypoints, and template captions.

pub mod caption;
pub mod io;
pub mod render;
pub mod spec;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

pub use caption::{caption, Caption, GRAMMAR_VERSION};
pub use io::{read_corpus, write_corpus, FORMAT_VERSION};
pub use render::{confidence_maps, render, Occlusion, RenderConfig};
pub use spec::{sample_persons, Attributes, Bottoms, Color, PersonSpec, Sleeve};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::text::{EncodedCaption, Vocabulary};
use crate::visual::PersonImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub train_identities: usize,
    pub val_identities: usize,
    pub test_identities: usize,
    pub images_per_identity: usize,
    pub captions_per_image: usize,
    /// Probability that a caption mentions a given clothing item or the bag.
    pub mention_prob: f64,
    pub render: RenderConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_identities: 200,
            val_identities: 0,
            test_identities: 50,
            images_per_identity: 4,
            captions_per_image: 2,
            mention_prob: 0.6,
            render: RenderConfig::default(),
        }
    }
}

impl CorpusConfig {
    pub fn total_identities(&self) -> usize {
        self.train_identities + self.val_identities + self.test_identities
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_identities() == 0 || self.images_per_identity == 0 {
            return Err(Error::Config("corpus needs at least one identity and one image each".into()));
        }
        if self.captions_per_image < 2 {
            return Err(Error::Config("every image needs at least 2 captions".into()));
        }
        if self.total_identities() > Attributes::SPACE {
            return Err(Error::Config(format!("at most {} identities are distinguishable", Attributes::SPACE)));
        }
        if !(0.0..=1.0).contains(&self.mention_prob) {
            return Err(Error::Config("mention probability must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.render.occlusion_prob) {
            return Err(Error::Config("occlusion probability must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn split_of(&self, identity: usize) -> Split {
        if identity < self.train_identities {
            Split::Train
        } else if identity < self.train_identities + self.val_identities {
            Split::Val
        } else {
            Split::Test
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub image: PersonImage,
    pub split: Split,
    pub occlusion: Occlusion,
    pub captions: Vec<Caption>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub persons: Vec<PersonSpec>,
    pub images: Vec<ImageRecord>,
    pub vocab: Vocabulary,
}

impl Corpus {
    /// Builds the corpus; identities are numbered train, then val, then test.
    pub fn generate(config: &CorpusConfig) -> Result<Self> {
        config.validate()?;
        let root = Rng::new(config.seed);
        let persons = sample_persons(config.total_identities(), &mut root.fork(0));
        let mut images = Vec::with_capacity(persons.len() * config.images_per_identity);
        for p in &persons {
            for i in 0..config.images_per_identity {
                let idx = (p.identity * config.images_per_identity + i) as u64;
                let (image, occlusion) = render(p, &mut root.fork(1 + 2 * idx), &config.render);
                let captions = caption::distinct_captions(&p.attributes, config.captions_per_image, config.mention_prob, &mut root.fork(2 + 2 * idx));
                images.push(ImageRecord { image, split: config.split_of(p.identity), occlusion, captions });
            }
        }
        let train_tokens: Vec<Vec<String>> = images
            .iter()
            .filter(|r| r.split == Split::Train)
            .flat_map(|r| r.captions.iter().map(Caption::tokens))
            .collect();
        let vocab = Vocabulary::build(train_tokens.iter().map(Vec::as_slice), 1);
        let corpus = Self { config: config.clone(), persons, images, vocab };
        corpus.validate()?;
        Ok(corpus)
    }

    /// Checks split disjointness, caption counts and span bounds.
    pub fn validate(&self) -> Result<()> {
        let mut owner: Vec<Option<Split>> = vec![None; self.persons.len()];
        for (i, r) in self.images.iter().enumerate() {
            let id = r.image.identity;
            let slot = owner.get_mut(id).ok_or_else(|| Error::Data(format!("image {i} has unknown identity {id}")))?;
            match slot {
                Some(s) if *s != r.split => {
                    return Err(Error::Data(format!("identity {id} appears in both {s:?} and {:?}", r.split)))
                }
                _ => *slot = Some(r.split),
            }
            if r.captions.len() < 2 {
                return Err(Error::Data(format!("image {i} has {} captions, need at least 2", r.captions.len())));
            }
            for c in &r.captions {
                let n = c.tokens().len();
                let mut end = 0;
                for &(s, e) in &c.spans {
                    if s < end || s >= e || e > n {
                        return Err(Error::Data(format!("image {i}: bad phrase span ({s}, {e})")));
                    }
                    end = e;
                }
            }
        }
        Ok(())
    }

    /// Indices of the images in `split`.
    pub fn split_images(&self, split: Split) -> Vec<usize> {
        (0..self.images.len()).filter(|&i| self.images[i].split == split).collect()
    }

    /// Distinct identities in `split`, ascending.
    pub fn split_identities(&self, split: Split) -> Vec<usize> {
        let set: HashSet<usize> = self.images.iter().filter(|r| r.split == split).map(|r| r.image.identity).collect();
        let mut ids: Vec<usize> = set.into_iter().collect();
        ids.sort_unstable();
        ids
    }

    /// Token ids and phrase spans of one caption.
    pub fn encode(&self, image: usize, caption: usize) -> EncodedCaption {
        let r = &self.images[image];
        let c = &r.captions[caption];
        EncodedCaption { ids: self.vocab.encode(&c.tokens()), spans: c.spans.clone(), identity: r.image.identity }
    }
}
