//! Raw textual and structural feature matrices: the KGTF binary format, an
//! offline hashed-trigram text encoder, and a caching client for remote
//! embedding services.
//!
//! KGTF layout (all little-endian): `b"KGTF"`, `u32` version (1), `u64` rows,
//! `u64` cols, then `rows * cols` `f32` values in row-major order.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{KgtError, Result};
use crate::kg_store::KnowledgeGraph;

pub const KGTF_MAGIC: &[u8; 4] = b"KGTF";
pub const KGTF_VERSION: u32 = 1;
pub const KGTF_HEADER_LEN: usize = 24;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(KgtError::Dimension {
                what: "feature matrix data".into(),
                expected: rows * cols,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(KgtError::NonFinite("feature matrix".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_array(a: &Array2<f64>) -> Result<Self> {
        Self::new(a.nrows(), a.ncols(), a.iter().map(|&v| v as f32).collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_array(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.rows, self.cols), |(i, j)| {
            self.data[i * self.cols + j] as f64
        })
    }

    /// Per-row L2 normalization; zero rows stay zero.
    pub fn l2_normalized(&self) -> Self {
        let mut out = self.clone();
        for r in out.data.chunks_mut(self.cols.max(1)) {
            let n = r.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt();
            if n > 0.0 {
                for v in r {
                    *v = (*v as f64 / n) as f32;
                }
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(KGTF_HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(KGTF_MAGIC);
        out.extend_from_slice(&KGTF_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.cols as u64).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < KGTF_HEADER_LEN {
            return Err(KgtError::Format(format!(
                "truncated header ({} bytes)",
                bytes.len()
            )));
        }
        if &bytes[0..4] != KGTF_MAGIC {
            return Err(KgtError::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != KGTF_VERSION {
            return Err(KgtError::Format(format!("unsupported version {version}")));
        }
        let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| KgtError::Format("shape overflow".into()))?;
        let payload = &bytes[KGTF_HEADER_LEN..];
        if payload.len() != n {
            return Err(KgtError::Format(format!(
                "payload is {} bytes, header implies {n}",
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(rows, cols, data)
    }
}

/// Writes via a temporary file and rename so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension(format!(
        "tmp.{}.{:?}",
        std::process::id(),
        std::thread::current().id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_features(m: &FeatureMatrix, path: &Path) -> Result<()> {
    write_atomic(path, &m.to_bytes())
}

pub fn load_features(path: &Path) -> Result<FeatureMatrix> {
    FeatureMatrix::from_bytes(&fs::read(path)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

// ---------------------------------------------------------------------------
// Offline encoder

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Character trigrams of `^text$`, each hashed with 64-bit FNV-1a over its
/// UTF-8 bytes. Texts shorter than one character yield no trigrams.
pub fn trigram_hashes(text: &str) -> Vec<u64> {
    if text.is_empty() {
        return Vec::new();
    }
    let chars: Vec<char> = std::iter::once('^')
        .chain(text.chars())
        .chain(std::iter::once('$'))
        .collect();
    chars
        .windows(3)
        .map(|w| {
            let s: String = w.iter().collect();
            fnv1a(s.as_bytes())
        })
        .collect()
}

/// Entry `(gram, col)` of the seeded random sign matrix.
fn sign(gram: u64, col: usize, seed: u64) -> i64 {
    let h = splitmix64(gram ^ splitmix64(seed ^ (col as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)));
    if h & 1 == 1 {
        1
    } else {
        -1
    }
}

/// Deterministic offline text features: a bag of hashed character trigrams
/// projected through a seeded ±1 matrix, then L2-normalized per row.
pub fn encode_text_deterministic<S: AsRef<str>>(
    texts: &[S],
    dim: usize,
    seed: u64,
) -> Result<FeatureMatrix> {
    if dim == 0 {
        return Err(KgtError::Invalid("text dimension must be positive".into()));
    }
    let mut data = Vec::with_capacity(texts.len() * dim);
    for t in texts {
        let grams = trigram_hashes(t.as_ref());
        let mut acc = vec![0i64; dim];
        for g in &grams {
            for (j, a) in acc.iter_mut().enumerate() {
                *a += sign(*g, j, seed);
            }
        }
        let norm = acc.iter().map(|&v| (v * v) as f64).sum::<f64>().sqrt();
        if norm == 0.0 {
            data.extend(acc.iter().map(|_| 0.0f32));
        } else {
            data.extend(acc.iter().map(|&v| (v as f64 / norm) as f32));
        }
    }
    FeatureMatrix::new(texts.len(), dim, data)
}

// ---------------------------------------------------------------------------
// Remote encoder

/// An OpenAI-style `/embeddings` endpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmbeddingEndpoint {
    pub url: String,
    pub model: String,
    pub token: Option<String>,
    pub dim: usize,
    pub batch_size: usize,
    pub concurrency: usize,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
}

impl EmbeddingEndpoint {
    pub fn new(url: impl Into<String>, model: impl Into<String>, dim: usize) -> Self {
        Self {
            url: url.into(),
            model: model.into(),
            token: None,
            dim,
            batch_size: 64,
            concurrency: 4,
            max_retries: 3,
            backoff_ms: 200,
            timeout_secs: 60,
        }
    }

    /// Reads `KGT_EMBED_URL`, `KGT_EMBED_MODEL` and `KGT_EMBED_TOKEN`.
    pub fn from_env(dim: usize) -> Option<Self> {
        let url = std::env::var("KGT_EMBED_URL").ok()?;
        let model = std::env::var("KGT_EMBED_MODEL")
            .unwrap_or_else(|_| "text-embedding-3-small".to_string());
        let mut e = Self::new(url, model, dim);
        e.token = std::env::var("KGT_EMBED_TOKEN").ok();
        Some(e)
    }

    fn cache_path(&self, cache_dir: &Path, text: &str) -> PathBuf {
        let key = sha256_hex(format!("{}\n{}", self.model, text).as_bytes());
        cache_dir.join(format!("{key}.kgtf"))
    }

    fn request(&self, agent: &ureq::Agent, batch: &[&str]) -> std::result::Result<Vec<Vec<f32>>, String> {
        #[derive(Serialize)]
        struct Req<'a> {
            model: &'a str,
            input: &'a [&'a str],
        }
        #[derive(Deserialize)]
        struct Item {
            index: Option<usize>,
            embedding: Vec<f32>,
        }
        #[derive(Deserialize)]
        struct Resp {
            data: Vec<Item>,
        }
        let mut req = agent.post(&self.url);
        if let Some(tok) = &self.token {
            req = req.set("Authorization", &format!("Bearer {tok}"));
        }
        let resp: Resp = req
            .send_json(Req {
                model: &self.model,
                input: batch,
            })
            .map_err(|e| e.to_string())?
            .into_json()
            .map_err(|e| e.to_string())?;
        if resp.data.len() != batch.len() {
            return Err(format!(
                "expected {} embeddings, got {}",
                batch.len(),
                resp.data.len()
            ));
        }
        let mut out = vec![Vec::new(); batch.len()];
        for (pos, item) in resp.data.into_iter().enumerate() {
            let i = item.index.unwrap_or(pos);
            if i >= out.len() {
                return Err(format!("response index {i} out of range"));
            }
            out[i] = item.embedding;
        }
        Ok(out)
    }

    fn request_with_retry(&self, agent: &ureq::Agent, batch: &[&str]) -> std::result::Result<Vec<Vec<f32>>, String> {
        let mut last = String::new();
        for attempt in 0..=self.max_retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(self.backoff_ms << (attempt - 1)));
            }
            match self.request(agent, batch) {
                Ok(v) => return Ok(v),
                Err(e) => last = e,
            }
        }
        Err(format!("{last} (after {} attempts)", self.max_retries + 1))
    }
}

/// Encodes `texts` through a remote service, one cache file per distinct
/// text. Texts already cached never hit the network.
pub fn encode_text_remote<S: AsRef<str>>(
    texts: &[S],
    endpoint: &EmbeddingEndpoint,
    cache_dir: &Path,
) -> Result<FeatureMatrix> {
    fs::create_dir_all(cache_dir)?;
    let mut vectors: HashMap<&str, Vec<f32>> = HashMap::new();
    let mut missing: Vec<&str> = Vec::new();
    for t in texts {
        let t = t.as_ref();
        if vectors.contains_key(t) || missing.contains(&t) {
            continue;
        }
        let p = endpoint.cache_path(cache_dir, t);
        if p.exists() {
            let m = load_features(&p)?;
            if m.cols() != endpoint.dim || m.rows() != 1 {
                return Err(KgtError::Dimension {
                    what: format!("cached embedding {}", p.display()),
                    expected: endpoint.dim,
                    got: m.cols(),
                });
            }
            vectors.insert(t, m.data().to_vec());
        } else {
            missing.push(t);
        }
    }

    if !missing.is_empty() {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(endpoint.timeout_secs))
            .build();
        let batches: Vec<&[&str]> = missing.chunks(endpoint.batch_size.max(1)).collect();
        let workers = endpoint.concurrency.max(1);
        let mut results: Vec<Option<std::result::Result<Vec<Vec<f32>>, String>>> =
            (0..batches.len()).map(|_| None).collect();
        for (group_idx, group) in batches.chunks(workers).enumerate() {
            let out: Vec<_> = std::thread::scope(|s| {
                let handles: Vec<_> = group
                    .iter()
                    .map(|b| {
                        let agent = &agent;
                        s.spawn(move || endpoint.request_with_retry(agent, b))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|_| Err("worker panicked".into())))
                    .collect()
            });
            for (k, r) in out.into_iter().enumerate() {
                results[group_idx * workers + k] = Some(r);
            }
        }
        for (bi, (batch, res)) in batches.iter().zip(results).enumerate() {
            let vecs = res
                .unwrap()
                .map_err(|msg| KgtError::Remote { batch: bi, msg })?;
            for (text, v) in batch.iter().zip(vecs) {
                if v.len() != endpoint.dim {
                    return Err(KgtError::Dimension {
                        what: format!("embedding returned for batch {bi}"),
                        expected: endpoint.dim,
                        got: v.len(),
                    });
                }
                let m = FeatureMatrix::new(1, endpoint.dim, v)?;
                save_features(&m, &endpoint.cache_path(cache_dir, text))?;
                vectors.insert(text, m.data);
            }
        }
    }

    let mut data = Vec::with_capacity(texts.len() * endpoint.dim);
    for t in texts {
        data.extend_from_slice(&vectors[t.as_ref()]);
    }
    FeatureMatrix::new(texts.len(), endpoint.dim, data)
}

// ---------------------------------------------------------------------------

/// The four raw feature matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    pub entity_text: FeatureMatrix,
    pub entity_struct: FeatureMatrix,
    pub relation_text: FeatureMatrix,
    pub relation_struct: FeatureMatrix,
}

pub const ENTITY_TEXT_FILE: &str = "entity_text.kgtf";
pub const ENTITY_STRUCT_FILE: &str = "entity_struct.kgtf";
pub const RELATION_TEXT_FILE: &str = "relation_text.kgtf";
pub const RELATION_STRUCT_FILE: &str = "relation_struct.kgtf";

impl FeatureBank {
    pub fn text_dim(&self) -> usize {
        self.entity_text.cols()
    }

    pub fn struct_dim(&self) -> usize {
        self.entity_struct.cols()
    }

    /// Row counts must match the (augmented) vocabularies and dims must agree
    /// between entities and relations.
    pub fn validate(&self, kg: &KnowledgeGraph) -> Result<()> {
        let checks = [
            ("entity text rows", kg.num_entities(), self.entity_text.rows()),
            ("entity struct rows", kg.num_entities(), self.entity_struct.rows()),
            ("relation text rows", kg.num_relations(), self.relation_text.rows()),
            ("relation struct rows", kg.num_relations(), self.relation_struct.rows()),
            ("relation text dim", self.entity_text.cols(), self.relation_text.cols()),
            ("relation struct dim", self.entity_struct.cols(), self.relation_struct.cols()),
        ];
        for (what, expected, got) in checks {
            if expected != got {
                return Err(KgtError::Dimension {
                    what: what.into(),
                    expected,
                    got,
                });
            }
        }
        Ok(())
    }

    pub fn l2_normalized(&self) -> Self {
        Self {
            entity_text: self.entity_text.l2_normalized(),
            entity_struct: self.entity_struct.l2_normalized(),
            relation_text: self.relation_text.l2_normalized(),
            relation_struct: self.relation_struct.l2_normalized(),
        }
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        save_features(&self.entity_text, &dir.join(ENTITY_TEXT_FILE))?;
        save_features(&self.entity_struct, &dir.join(ENTITY_STRUCT_FILE))?;
        save_features(&self.relation_text, &dir.join(RELATION_TEXT_FILE))?;
        save_features(&self.relation_struct, &dir.join(RELATION_STRUCT_FILE))
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        Ok(Self {
            entity_text: load_features(&dir.join(ENTITY_TEXT_FILE))?,
            entity_struct: load_features(&dir.join(ENTITY_STRUCT_FILE))?,
            relation_text: load_features(&dir.join(RELATION_TEXT_FILE))?,
            relation_struct: load_features(&dir.join(RELATION_STRUCT_FILE))?,
        })
    }
}

/// Entity descriptions (or names) and relation names, in id order.
pub fn graph_texts(kg: &KnowledgeGraph) -> (Vec<String>, Vec<String>) {
    (
        kg.entity_texts().map(str::to_string).collect(),
        kg.relation_texts().map(str::to_string).collect(),
    )
}
