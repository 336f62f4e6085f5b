//! Checkpoint file: magic, version, a JSON header (config, step, vocabulary,
//! identities, parameter names) and one PMAT record per parameter.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FormatError, Result};
use crate::tensor::Tensor;
use crate::text::Vocabulary;

use super::config::TrainConfig;
use super::model::Model;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PMAC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TrainConfig,
    step: u64,
    vocab: String,
    identities: Vec<usize>,
    params: Vec<String>,
}

pub fn to_bytes(model: &Model, step: u64) -> Vec<u8> {
    let header = Header {
        config: model.config.clone(),
        step,
        vocab: model.vocab.to_text(),
        identities: model.identities.clone(),
        params: model.store.ids().map(|id| model.store.name(id).to_string()).collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in model.store.values() {
        t.write_to(&mut out).expect("writing to a Vec cannot fail");
    }
    out
}

/// Returns the model and the step counter it was saved at.
pub fn from_bytes(bytes: &[u8]) -> Result<(Model, u64)> {
    let mut cur = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    read_exact(&mut cur, &mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(FormatError::BadMagic(magic).into());
    }
    let mut word = [0u8; 4];
    read_exact(&mut cur, &mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::UnsupportedVersion { found: version, expected: CHECKPOINT_VERSION }.into());
    }
    let mut len = [0u8; 8];
    read_exact(&mut cur, &mut len)?;
    let len = u64::from_le_bytes(len);
    if len > bytes.len() as u64 {
        return Err(FormatError::Truncated.into());
    }
    let mut json = vec![0u8; len as usize];
    read_exact(&mut cur, &mut json)?;
    let header: Header = serde_json::from_slice(&json).map_err(FormatError::from)?;
    let vocab = Vocabulary::from_text(&header.vocab)?;
    let mut model = Model::new(header.config, vocab, header.identities)?;
    let mut entries = Vec::with_capacity(header.params.len());
    for name in header.params {
        entries.push((name, Tensor::read_from(&mut cur)?));
    }
    if (cur.position() as usize) != bytes.len() {
        return Err(FormatError::Corrupt("trailing bytes after the last parameter".into()).into());
    }
    model.store.load_values(entries)?;
    Ok((model, header.step))
}

fn read_exact(cur: &mut Cursor<&[u8]>, buf: &mut [u8]) -> Result<()> {
    cur.read_exact(buf).map_err(|_| FormatError::Truncated)?;
    Ok(())
}

/// Writes through a temporary file so an interrupted save never clobbers the previous checkpoint.
pub fn save(model: &Model, step: u64, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&to_bytes(model, step))?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Model, u64)> {
    from_bytes(&fs::read(path)?)
}
