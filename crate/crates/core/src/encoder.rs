//! Fixed-dimension text embeddings with two interchangeable modes.
//!
//! `hash` mode is the offline default: feature-hashed character n-gram
//! (n = 3..5) counts with a sign hash, L2-normalized. It is deterministic and
//! dependency-free, which makes the whole pipeline runnable without model
//! files. `checkpoint` mode loads an embedding export produced offline by a
//! frozen pretrained encoder (text -> vector table); the encoder itself is
//! never trained here.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::RwLock;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What a vector was computed from; carried for bookkeeping only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Utterance,
    History,
    Persona,
    Strategy,
}

/// A fixed-dimension embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub vector: Array1<f64>,
    pub source_kind: SourceKind,
}

impl Embedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Encoder configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// `hash` or `checkpoint`.
    pub mode: String,
    /// Export file for checkpoint mode.
    pub checkpoint_name: Option<PathBuf>,
    /// Output dimension (hash mode; checkpoint mode takes it from the file).
    pub dim: usize,
    pub cache_capacity: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { mode: "hash".into(), checkpoint_name: None, dim: 256, cache_capacity: 1 << 16 }
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointExport {
    dim: usize,
    entries: HashMap<String, Vec<f64>>,
}

enum Backend {
    Hash { dim: usize },
    Checkpoint { dim: usize, table: HashMap<String, Array1<f64>> },
}

/// Frozen sentence encoder. Read-only after construction; encodes may run
/// concurrently (the cache is behind an `RwLock`).
pub struct TextEncoder {
    backend: Backend,
    cache: RwLock<HashMap<String, Array1<f64>>>,
    cache_capacity: usize,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl TextEncoder {
    pub fn new(config: &EncoderConfig) -> Result<Self> {
        let backend = match config.mode.as_str() {
            "hash" => {
                if config.dim == 0 {
                    return Err(Error::Config("encoder.dim must be positive".into()));
                }
                Backend::Hash { dim: config.dim }
            }
            "checkpoint" => {
                let path = config.checkpoint_name.as_ref().ok_or_else(|| {
                    Error::Config("encoder.checkpoint_name required in checkpoint mode".into())
                })?;
                let bytes = std::fs::read(path).map_err(|e| {
                    Error::Config(format!("cannot open encoder export {}: {e}", path.display()))
                })?;
                let export: CheckpointExport = serde_json::from_slice(&bytes)
                    .map_err(|e| Error::Config(format!("bad encoder export: {e}")))?;
                let table = export
                    .entries
                    .into_iter()
                    .map(|(k, v)| (k, Array1::from_vec(v)))
                    .collect();
                Backend::Checkpoint { dim: export.dim, table }
            }
            other => return Err(Error::Config(format!("unknown encoder mode `{other}`"))),
        };
        Ok(TextEncoder {
            backend,
            cache: RwLock::new(HashMap::new()),
            cache_capacity: config.cache_capacity,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        })
    }

    /// Offline hash encoder of the given dimension.
    pub fn hash_mode(dim: usize) -> Self {
        TextEncoder::new(&EncoderConfig { dim, ..EncoderConfig::default() }).unwrap()
    }

    pub fn dim(&self) -> usize {
        match &self.backend {
            Backend::Hash { dim } => *dim,
            Backend::Checkpoint { dim, .. } => *dim,
        }
    }

    pub fn cache_stats(&self) -> (u64, u64) {
        (self.hits.load(Ordering::Relaxed), self.misses.load(Ordering::Relaxed))
    }

    /// Encode one text. Deterministic per mode; cached.
    pub fn encode_text(&self, text: &str, kind: SourceKind) -> Result<Embedding> {
        if text.is_empty() {
            return Err(Error::Argument("cannot encode empty text".into()));
        }
        if let Some(v) = self.cache.read().unwrap().get(text) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(Embedding { vector: v.clone(), source_kind: kind });
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let vector = match &self.backend {
            Backend::Hash { dim } => hash_embed(text, *dim),
            Backend::Checkpoint { table, .. } => table
                .get(text)
                .cloned()
                .ok_or_else(|| Error::Argument(format!("text not in encoder export: {text:?}")))?,
        };
        let mut cache = self.cache.write().unwrap();
        if cache.len() < self.cache_capacity {
            cache.insert(text.to_string(), vector.clone());
        }
        Ok(Embedding { vector, source_kind: kind })
    }

    /// Encode a dialogue condition: the mean of per-utterance embeddings.
    pub fn encode_condition(&self, utterances: &[&str]) -> Result<Embedding> {
        if utterances.is_empty() {
            return Err(Error::Argument("condition requires at least one utterance".into()));
        }
        let mut sum = Array1::<f64>::zeros(self.dim());
        for u in utterances {
            sum += &self.encode_text(u, SourceKind::Utterance)?.vector;
        }
        sum /= utterances.len() as f64;
        Ok(Embedding { vector: sum, source_kind: SourceKind::History })
    }
}

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Signed feature hashing over char n-grams (n = 3..=5), L2-normalized.
fn hash_embed(text: &str, dim: usize) -> Array1<f64> {
    let chars: Vec<char> = text.chars().collect();
    let mut v = vec![0.0f64; dim];
    let mut any = false;
    let mut buf = String::new();
    for n in 3..=5usize {
        if chars.len() < n {
            continue;
        }
        for window in chars.windows(n) {
            buf.clear();
            buf.extend(window.iter());
            let h = fnv1a(buf.as_bytes());
            let idx = (h % dim as u64) as usize;
            let sign = if (h >> 63) & 1 == 0 { 1.0 } else { -1.0 };
            v[idx] += sign;
            any = true;
        }
    }
    if !any {
        // Texts shorter than the smallest n-gram hash as a single feature.
        let h = fnv1a(text.as_bytes());
        v[(h % dim as u64) as usize] = 1.0;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    Array1::from_vec(v)
}

/// Write a checkpoint export usable by `checkpoint` mode (test/tooling aid).
pub fn write_checkpoint_export(
    path: &Path,
    dim: usize,
    entries: &[(String, Vec<f64>)],
) -> Result<()> {
    let export =
        CheckpointExport { dim, entries: entries.iter().cloned().collect::<HashMap<_, _>>() };
    let bytes = serde_json::to_vec(&export).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn cosine_similarity(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(b) / (na * nb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::persona::{enumerate_personas, Task};

    #[test]
    fn same_text_gives_identical_vectors() {
        let enc = TextEncoder::hash_mode(256);
        let a = enc.encode_text("hello there world", SourceKind::Utterance).unwrap();
        let b = enc.encode_text("hello there world", SourceKind::Utterance).unwrap();
        assert_eq!(a.vector, b.vector);
    }

    #[test]
    fn configured_dim_is_respected() {
        let enc = TextEncoder::hash_mode(256);
        let e = enc.encode_text("dimension probe", SourceKind::Utterance).unwrap();
        assert_eq!(e.dim(), 256);
        let enc64 = TextEncoder::hash_mode(64);
        assert_eq!(enc64.encode_text("dimension probe", SourceKind::Utterance).unwrap().dim(), 64);
    }

    #[test]
    fn empty_text_is_an_error() {
        let enc = TextEncoder::hash_mode(32);
        assert!(matches!(
            enc.encode_text("", SourceKind::Utterance),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn persona_descriptions_are_distinct() {
        let enc = TextEncoder::hash_mode(256);
        let personas = enumerate_personas(Task::P4g);
        let embs: Vec<_> = personas
            .iter()
            .map(|p| enc.encode_text(&p.description(), SourceKind::Persona).unwrap().vector)
            .collect();
        for i in 0..embs.len() {
            for j in (i + 1)..embs.len() {
                let cos = cosine_similarity(&embs[i], &embs[j]);
                assert!(cos < 1.0 - 1e-6, "personas {i} and {j} collide: cos={cos}");
            }
        }
    }

    #[test]
    fn condition_pooling_is_mean() {
        let enc = TextEncoder::hash_mode(128);
        let u = "I am not sure about this";
        let single = enc.encode_condition(&[u]).unwrap();
        let direct = enc.encode_text(u, SourceKind::Utterance).unwrap();
        assert_eq!(single.vector, direct.vector);

        let doubled = enc.encode_condition(&[u, u]).unwrap();
        for (a, b) in doubled.vector.iter().zip(direct.vector.iter()) {
            assert!((a - b).abs() < 1e-12);
        }

        let v = "that makes sense to me";
        let ab = enc.encode_condition(&[u, v]).unwrap();
        let ba = enc.encode_condition(&[v, u]).unwrap();
        assert_eq!(ab.vector, ba.vector);
    }

    #[test]
    fn one_token_difference_changes_embedding() {
        let enc = TextEncoder::hash_mode(256);
        let a = enc.encode_text("the quick brown fox jumps", SourceKind::Utterance).unwrap();
        let b = enc.encode_text("the quick brown cat jumps", SourceKind::Utterance).unwrap();
        assert_ne!(a.vector, b.vector);
    }

    #[test]
    fn collision_rate_below_one_percent() {
        let enc = TextEncoder::hash_mode(256);
        let texts: Vec<String> =
            (0..1000).map(|i| format!("sample utterance number {i} with filler words")).collect();
        let mut seen: Vec<Vec<u64>> = Vec::new();
        let mut collisions = 0usize;
        for t in &texts {
            let v = enc.encode_text(t, SourceKind::Utterance).unwrap().vector;
            let bits: Vec<u64> = v.iter().map(|x| x.to_bits()).collect();
            if seen.contains(&bits) {
                collisions += 1;
            } else {
                seen.push(bits);
            }
        }
        assert!(collisions < 10, "collision rate too high: {collisions}/1000");
    }

    #[test]
    fn cache_is_transparent() {
        let enc = TextEncoder::hash_mode(64);
        let a = enc.encode_text("cached text", SourceKind::Utterance).unwrap();
        let b = enc.encode_text("cached text", SourceKind::Utterance).unwrap();
        assert_eq!(a.vector, b.vector);
        let (hits, misses) = enc.cache_stats();
        assert_eq!((hits, misses), (1, 1));
    }

    #[test]
    fn checkpoint_mode_round_trips_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("export.json");
        write_checkpoint_export(&path, 3, &[("hello".into(), vec![1.0, 2.0, 3.0])]).unwrap();
        let enc = TextEncoder::new(&EncoderConfig {
            mode: "checkpoint".into(),
            checkpoint_name: Some(path),
            ..EncoderConfig::default()
        })
        .unwrap();
        assert_eq!(enc.dim(), 3);
        let e = enc.encode_text("hello", SourceKind::Utterance).unwrap();
        assert_eq!(e.vector, Array1::from_vec(vec![1.0, 2.0, 3.0]));
        assert!(enc.encode_text("unknown", SourceKind::Utterance).is_err());

        // missing file is an initialization error
        let missing = TextEncoder::new(&EncoderConfig {
            mode: "checkpoint".into(),
            checkpoint_name: Some(dir.path().join("nope.json")),
            ..EncoderConfig::default()
        });
        assert!(matches!(missing, Err(Error::Config(_))));
    }
}
