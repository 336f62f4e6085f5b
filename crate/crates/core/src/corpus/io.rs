//! On-disk corpus: `manifest.json`, `images.pmat` and `vocab.txt`.
//!
//! The blob holds two PMAT tensor records per image: pixels `[3, H, W]` and
//! keypoints `[14, 3]` (x, y, visible). Confidence maps are a deterministic
//! function of keypoints and occlusion and are rebuilt on load.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::caption::{Caption, GRAMMAR_VERSION};
use super::render::{confidence_maps, Occlusion};
use super::spec::PersonSpec;
use super::{Corpus, CorpusConfig, ImageRecord, Split};
use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;
use crate::text::Vocabulary;
use crate::visual::{Keypoint, PersonImage, KEYPOINTS};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "images.pmat";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Splits {
    train: Vec<usize>,
    val: Vec<usize>,
    test: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobInfo {
    file: String,
    bytes: u64,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageEntry {
    identity: usize,
    split: Split,
    offset: u64,
    length: u64,
    occlusion: Occlusion,
    captions: Vec<Caption>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    grammar_version: u32,
    config: CorpusConfig,
    splits: Splits,
    persons: Vec<PersonSpec>,
    blob: BlobInfo,
    images: Vec<ImageEntry>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn keypoint_tensor(kps: &[Keypoint]) -> Tensor {
    let data = kps.iter().flat_map(|k| [k.x, k.y, if k.visible { 1.0 } else { 0.0 }]).collect();
    Tensor::from_parts(vec![kps.len(), 3], data)
}

pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(corpus.images.len());
    for r in &corpus.images {
        let offset = blob.len() as u64;
        r.image.pixels.write_to(&mut blob)?;
        keypoint_tensor(&r.image.keypoints).write_to(&mut blob)?;
        entries.push(ImageEntry {
            identity: r.image.identity,
            split: r.split,
            offset,
            length: blob.len() as u64 - offset,
            occlusion: r.occlusion,
            captions: r.captions.clone(),
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        grammar_version: GRAMMAR_VERSION,
        config: corpus.config.clone(),
        splits: Splits {
            train: corpus.split_identities(Split::Train),
            val: corpus.split_identities(Split::Val),
            test: corpus.split_identities(Split::Test),
        },
        persons: corpus.persons.clone(),
        blob: BlobInfo { file: BLOB_FILE.into(), bytes: blob.len() as u64, sha256: hex(&Sha256::digest(&blob)) },
        images: entries,
    };
    fs::write(dir.join(BLOB_FILE), &blob)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    corpus.vocab.write(&dir.join(VOCAB_FILE))?;
    Ok(())
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(FormatError::from)?;
    let found = raw.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion { found, expected: FORMAT_VERSION }.into());
    }
    let m: Manifest = serde_json::from_value(raw).map_err(FormatError::from)?;
    if m.grammar_version != GRAMMAR_VERSION {
        return Err(FormatError::UnsupportedVersion { found: m.grammar_version, expected: GRAMMAR_VERSION }.into());
    }
    let blob = fs::read(dir.join(&m.blob.file))?;
    if (blob.len() as u64) < m.blob.bytes {
        return Err(FormatError::Truncated.into());
    }
    let found = hex(&Sha256::digest(&blob));
    if blob.len() as u64 != m.blob.bytes || found != m.blob.sha256 {
        return Err(FormatError::ChecksumMismatch { expected: m.blob.sha256, found }.into());
    }
    let cfg = &m.config;
    let (h, w) = (cfg.render.height, cfg.render.width);
    let mut images = Vec::with_capacity(m.images.len());
    for e in m.images {
        let end = e.offset.checked_add(e.length).filter(|&end| end <= blob.len() as u64).ok_or(FormatError::Truncated)?;
        let mut cur = Cursor::new(&blob[e.offset as usize..end as usize]);
        let pixels = Tensor::read_from(&mut cur)?;
        let kp = Tensor::read_from(&mut cur)?;
        if pixels.shape() != [3, h, w] || kp.shape() != [KEYPOINTS, 3] {
            return Err(FormatError::Corrupt(format!("image record of identity {} has wrong shape", e.identity)).into());
        }
        let keypoints: Vec<Keypoint> =
            kp.data().chunks_exact(3).map(|c| Keypoint { x: c[0], y: c[1], visible: c[2] != 0.0 }).collect();
        let confidence = confidence_maps(&keypoints, e.occlusion, h, w, cfg.render.sigma());
        images.push(ImageRecord {
            image: PersonImage { pixels, confidence, identity: e.identity, keypoints },
            split: e.split,
            occlusion: e.occlusion,
            captions: e.captions,
        });
    }
    let vocab = Vocabulary::read(&dir.join(VOCAB_FILE))?;
    let corpus = Corpus { config: m.config, persons: m.persons, images, vocab };
    corpus.validate()?;
    let listed = [(Split::Train, &m.splits.train), (Split::Val, &m.splits.val), (Split::Test, &m.splits.test)];
    for (split, ids) in listed {
        if &corpus.split_identities(split) != ids {
            return Err(Error::Data(format!("manifest {split:?} identities disagree with the image records")));
        }
    }
    let (train, test) = (&m.splits.train, &m.splits.test);
    if train.iter().any(|i| test.contains(i)) {
        return Err(Error::Data("train and test identities overlap".into()));
    }
    Ok(corpus)
}
