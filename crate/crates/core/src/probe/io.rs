use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{build_embedding_with, EmbeddingType, ProbeModel};
use crate::error::{Error, Result};
use crate::gateway::{collect_all, Gateway};
use crate::model::Claim;

const SCHEMA_VERSION: u32 = 1;
const FORMAT: &str = "claimcheck-probe";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightEncoding {
    /// Decimal JSON numbers (shortest round-trip representation).
    Text,
    /// Base64 of little-endian IEEE-754 doubles.
    Base64F64Le,
}

/// Provenance stored next to the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeMeta {
    pub embedding_type: Option<EmbeddingType>,
    #[serde(default)]
    pub include_embedding_layer: bool,
    pub validation_bacc: Option<f64>,
    pub best_epoch: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Array {
    Text(Vec<f64>),
    Raw(String),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProbeFile {
    format: String,
    schema_version: u32,
    encoding: WeightEncoding,
    input_width: usize,
    hidden_width: usize,
    seed: u64,
    w1: Array,
    b1: Array,
    w2: Array,
    b2: Array,
    #[serde(default)]
    meta: ProbeMeta,
}

fn encode(v: &[f64], enc: WeightEncoding) -> Array {
    match enc {
        WeightEncoding::Text => Array::Text(v.to_vec()),
        WeightEncoding::Base64F64Le => {
            let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
            Array::Raw(B64.encode(bytes))
        }
    }
}

fn decode(a: Array, enc: WeightEncoding, name: &str, len: usize) -> Result<Vec<f64>> {
    let v = match (a, enc) {
        (Array::Text(v), WeightEncoding::Text) => v,
        (Array::Raw(s), WeightEncoding::Base64F64Le) => {
            let bytes = B64
                .decode(s.as_bytes())
                .map_err(|e| Error::Probe(format!("{name}: bad base64: {e}")))?;
            if bytes.len() % 8 != 0 {
                return Err(Error::Probe(format!("{name}: byte length not a multiple of 8")));
            }
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect()
        }
        _ => return Err(Error::Probe(format!("{name}: array does not match declared encoding"))),
    };
    if v.len() != len {
        return Err(Error::Probe(format!("{name}: expected {len} values, found {}", v.len())));
    }
    Ok(v)
}

pub fn save_probe(
    model: &ProbeModel,
    meta: &ProbeMeta,
    encoding: WeightEncoding,
    path: impl AsRef<Path>,
) -> Result<()> {
    model.validate()?;
    let file = ProbeFile {
        format: FORMAT.into(),
        schema_version: SCHEMA_VERSION,
        encoding,
        input_width: model.input_width,
        hidden_width: model.hidden_width,
        seed: model.seed,
        w1: encode(&model.w1, encoding),
        b1: encode(&model.b1, encoding),
        w2: encode(&model.w2, encoding),
        b2: encode(&[model.b2], encoding),
        meta: meta.clone(),
    };
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    std::fs::write(path.as_ref(), text).map_err(|e| Error::io(path.as_ref(), e))
}

pub fn load_probe(path: impl AsRef<Path>) -> Result<(ProbeModel, ProbeMeta)> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    let f: ProbeFile = serde_json::from_str(&text)?;
    if f.format != FORMAT {
        return Err(Error::Probe(format!("not a probe model file (format {:?})", f.format)));
    }
    if f.schema_version != SCHEMA_VERSION {
        return Err(Error::Probe(format!("unsupported schema version {}", f.schema_version)));
    }
    let (n, h, enc) = (f.input_width, f.hidden_width, f.encoding);
    let model = ProbeModel {
        input_width: n,
        hidden_width: h,
        w1: decode(f.w1, enc, "w1", n * h)?,
        b1: decode(f.b1, enc, "b1", h)?,
        w2: decode(f.w2, enc, "w2", h)?,
        b2: decode(f.b2, enc, "b2", 1)?[0],
        seed: f.seed,
    };
    model.validate()?;
    Ok((model, f.meta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CacheRecord {
    claim_id: String,
    embedding_type: EmbeddingType,
    vector: Vec<f64>,
}

/// Embeddings keyed by (claim id, embedding type), persisted as JSON Lines
/// sorted by key.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingCache {
    entries: BTreeMap<(String, EmbeddingType), Vec<f64>>,
}

impl EmbeddingCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Loads a cache file; a missing file yields an empty cache.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        if !path.as_ref().exists() {
            return Ok(Self::new());
        }
        let records: Vec<CacheRecord> = crate::jsonl::read(path)?;
        Ok(EmbeddingCache {
            entries: records
                .into_iter()
                .map(|r| ((r.claim_id, r.embedding_type), r.vector))
                .collect(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let records: Vec<CacheRecord> = self
            .entries
            .iter()
            .map(|((id, t), v)| CacheRecord {
                claim_id: id.clone(),
                embedding_type: *t,
                vector: v.clone(),
            })
            .collect();
        crate::jsonl::write(path, &records)
    }

    pub fn get(&self, claim_id: &str, t: EmbeddingType) -> Option<&Vec<f64>> {
        self.entries.get(&(claim_id.to_string(), t))
    }

    pub fn insert(&mut self, claim_id: &str, t: EmbeddingType, v: Vec<f64>) {
        self.entries.insert((claim_id.to_string(), t), v);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Fills `cache` with every requested embedding type for each claim text,
/// fetching hidden states concurrently only for claims with missing entries.
pub fn embed_claims(
    gateway: &Gateway,
    claims: &[Claim],
    types: &[EmbeddingType],
    include_embedding_layer: bool,
    cache: &mut EmbeddingCache,
) -> Result<()> {
    let missing: Vec<&Claim> = claims
        .iter()
        .filter(|c| types.iter().any(|t| cache.get(&c.id, *t).is_none()))
        .collect();
    let built = gateway.map_concurrent(&missing, |_, c| {
        let h = gateway.hidden_states(&c.text)?;
        types
            .iter()
            .map(|t| Ok((*t, build_embedding_with(&h, *t, include_embedding_layer)?)))
            .collect::<Result<Vec<_>>>()
    });
    for (c, vectors) in missing.iter().zip(collect_all(built)?) {
        for (t, v) in vectors {
            cache.insert(&c.id, t, v);
        }
    }
    Ok(())
}
