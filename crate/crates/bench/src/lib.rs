//! Fixtures shared by the benchmarks.

use pma_core::corpus::{Corpus, CorpusConfig, Split};
use pma_core::harness::{Model, TrainConfig};
use pma_core::text::TextBatch;
use pma_core::visual::ImageBatch;

/// A small corpus and an untrained model sized like the desk defaults.
pub fn desk_fixture(train_identities: usize) -> (Corpus, Model) {
    let corpus = Corpus::generate(&CorpusConfig {
        seed: 1,
        train_identities,
        test_identities: 4,
        images_per_identity: 2,
        ..Default::default()
    })
    .expect("corpus");
    let ids = corpus.split_identities(Split::Train);
    let model = Model::new(TrainConfig::default(), corpus.vocab.clone(), ids).expect("model");
    (corpus, model)
}

/// The first `n` training images with their first captions.
pub fn batch(corpus: &Corpus, model: &Model, n: usize) -> (TextBatch, ImageBatch, Vec<usize>) {
    let idx: Vec<usize> = corpus.split_images(Split::Train).into_iter().take(n).collect();
    let captions: Vec<_> = idx.iter().map(|&i| corpus.encode(i, 0)).collect();
    let images: Vec<_> = idx.iter().map(|&i| &corpus.images[i].image).collect();
    let texts = TextBatch::new(&captions).expect("text batch");
    let imgs = ImageBatch::new(&images, model.config.con_pose, &model.grouping).expect("image batch");
    let labels = idx.iter().map(|&i| model.label_of(corpus.images[i].image.identity).expect("label")).collect();
    (texts, imgs, labels)
}
