//! The concept memory: word → {filter, encoder, decoder, prototype}.
//!
//! A store is a directory with `index.json` and one binary file per concept
//! under `concepts/`. Concept files are named by content hash, so a save only
//! writes concepts that changed and the index rename is the commit point.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Linear, Params, Real, Vec32};

pub const STORE_MAGIC: &str = "WLX1";
pub const STORE_VERSION: u32 = 1;
const CONCEPT_MAGIC: &[u8; 4] = b"WLC1";
pub const INDEX_FILE: &str = "index.json";
pub const CONCEPT_DIR: &str = "concepts";

/// Layer widths shared by every concept in a lexicon.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub embedding: usize,
    pub hidden: usize,
    pub latent: usize,
    /// Hidden widths of the decoder between latent and embedding.
    pub decoder_hidden: Vec<usize>,
}

impl Dims {
    pub fn with_embedding(embedding: usize) -> Self {
        Self {
            embedding,
            hidden: 128,
            latent: 16,
            decoder_hidden: vec![64, 64, 96],
        }
    }

    pub fn decoder_widths(&self) -> Vec<usize> {
        let mut w = vec![self.latent];
        w.extend(&self.decoder_hidden);
        w.push(self.embedding);
        w
    }
}

impl Default for Dims {
    fn default() -> Self {
        Self::with_embedding(512)
    }
}

/// Filter plus two-layer encoder: `r = W2 (W1 (e ⊙ σ(f)) + b1) + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptNet<T> {
    pub filter_raw: Array1<T>,
    pub grad_filter: Array1<T>,
    pub enc1: Linear<T>,
    pub enc2: Linear<T>,
}

/// Intermediate activations of a batch pass, kept for the backward pass.
pub struct EncodeCache<T> {
    pub mask: Array1<T>,
    pub masked: Array2<T>,
    pub hidden: Array2<T>,
}

impl<T: Real> ConceptNet<T> {
    pub fn init(dims: &Dims, rng: &mut ChaCha8Rng) -> Self {
        Self {
            filter_raw: Array1::zeros(dims.embedding),
            grad_filter: Array1::zeros(dims.embedding),
            enc1: Linear::init(dims.embedding, dims.hidden, rng),
            enc2: Linear::init(dims.hidden, dims.latent, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.filter_raw.len()
    }

    pub fn mask(&self) -> Array1<T> {
        self.filter_raw.mapv(sigmoid)
    }

    pub fn forward_batch(&self, x: ArrayView2<T>) -> Result<(Array2<T>, EncodeCache<T>)> {
        if x.ncols() != self.dim() {
            return Err(Error::shape("encode", self.dim(), x.ncols()));
        }
        let mask = self.mask();
        let masked = &x * &mask;
        let hidden = self.enc1.forward_batch(masked.view())?;
        let out = self.enc2.forward_batch(hidden.view())?;
        Ok((out, EncodeCache { mask, masked, hidden }))
    }

    pub fn encode(&self, x: ArrayView1<T>) -> Result<Array1<T>> {
        if x.len() != self.dim() {
            return Err(Error::shape("encode", self.dim(), x.len()));
        }
        let masked = &x * &self.mask();
        let hidden = self.enc1.forward(masked.view())?;
        self.enc2.forward(hidden.view())
    }

    /// Accumulates gradients of all parameters given `d loss / d out`.
    pub fn backward_batch(&mut self, x: ArrayView2<T>, cache: &EncodeCache<T>, grad_out: ArrayView2<T>) -> Result<()> {
        let g_hidden = self.enc2.backward_batch(cache.hidden.view(), grad_out)?;
        let g_masked = self.enc1.backward_batch(cache.masked.view(), g_hidden.view())?;
        // d masked[i,j] / d raw[j] = x[i,j] * s_j (1 - s_j)
        let mut g_mask = Array1::<T>::zeros(self.dim());
        for (gm_row, x_row) in g_masked.rows().into_iter().zip(x.rows()) {
            g_mask.zip_mut_with(&(&gm_row * &x_row), |a, &b| *a = *a + b);
        }
        let one = T::one();
        for ((g, &m), acc) in g_mask.iter().zip(cache.mask.iter()).zip(self.grad_filter.iter_mut()) {
            *acc = *acc + *g * m * (one - m);
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ConceptNet<U> {
        let c = |v: &T| U::lit(v.to_f64().unwrap());
        ConceptNet {
            filter_raw: self.filter_raw.map(c),
            grad_filter: self.grad_filter.map(c),
            enc1: self.enc1.cast(),
            enc2: self.enc2.cast(),
        }
    }
}

impl<T: Real> Params<T> for ConceptNet<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [T], &mut [T])) {
        f(
            self.filter_raw.as_slice_mut().expect("contiguous"),
            self.grad_filter.as_slice_mut().expect("contiguous"),
        );
        self.enc1.visit_params(f);
        self.enc2.visit_params(f);
    }
}

/// Chain of fully connected layers from latent back to embedding width.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderNet<T> {
    pub layers: Vec<Linear<T>>,
}

impl<T: Real> DecoderNet<T> {
    pub fn init(dims: &Dims, rng: &mut ChaCha8Rng) -> Self {
        let w = dims.decoder_widths();
        Self {
            layers: w.windows(2).map(|p| Linear::init(p[0], p[1], rng)).collect(),
        }
    }

    pub fn dim_in(&self) -> usize {
        self.layers[0].dim_in()
    }

    pub fn dim_out(&self) -> usize {
        self.layers.last().expect("decoder has layers").dim_out()
    }

    /// Inference forward (dropout off).
    pub fn forward(&self, rep: ArrayView1<T>) -> Result<Array1<T>> {
        let mut h = rep.to_owned();
        for l in &self.layers {
            h = l.forward(h.view())?;
        }
        Ok(h)
    }

    pub fn cast<U: Real>(&self) -> DecoderNet<U> {
        DecoderNet {
            layers: self.layers.iter().map(Linear::cast).collect(),
        }
    }
}

impl<T: Real> Params<T> for DecoderNet<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [T], &mut [T])) {
        for l in &mut self.layers {
            l.visit_params(f);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptEntry {
    pub label: String,
    pub category: String,
    pub net: ConceptNet<f32>,
    pub decoder: Option<DecoderNet<f32>>,
    pub rep: Option<Vec32>,
    pub sample_count: u64,
    pub trained_rounds: u64,
}

impl ConceptEntry {
    pub fn is_trained(&self) -> bool {
        self.rep.is_some() && self.sample_count > 0
    }

    pub fn rep(&self) -> Result<&Vec32> {
        self.rep.as_ref().ok_or_else(|| Error::NotReady {
            label: self.label.clone(),
            reason: "no prototype representation".into(),
        })
    }

    pub fn decoder(&self) -> Result<&DecoderNet<f32>> {
        self.decoder.as_ref().ok_or_else(|| Error::NotReady {
            label: self.label.clone(),
            reason: "no decoder".into(),
        })
    }

    /// `σ(filter_raw)`.
    pub fn filter_mask(&self) -> Vec<f32> {
        self.net.mask().to_vec()
    }

    /// Serialized concept file; also the input of [`ConceptEntry::hash`].
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = ConceptHeader {
            label: self.label.clone(),
            category: self.category.clone(),
            sample_count: self.sample_count,
            trained_rounds: self.trained_rounds,
            embedding: self.net.dim(),
            hidden: self.net.enc1.dim_out(),
            latent: self.net.enc2.dim_out(),
            has_rep: self.rep.is_some(),
            decoder_widths: self.decoder.as_ref().map(|d| {
                let mut w = vec![d.dim_in()];
                w.extend(d.layers.iter().map(|l| l.dim_out()));
                w
            }),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CONCEPT_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        let mut put = |xs: &mut dyn Iterator<Item = f32>| {
            for x in xs {
                out.extend_from_slice(&x.to_le_bytes());
            }
        };
        put(&mut self.net.filter_raw.iter().copied());
        for l in [&self.net.enc1, &self.net.enc2] {
            put(&mut l.weight.iter().copied());
            put(&mut l.bias.iter().copied());
        }
        if let Some(rep) = &self.rep {
            put(&mut rep.as_slice().iter().copied());
        }
        if let Some(d) = &self.decoder {
            for l in &d.layers {
                put(&mut l.weight.iter().copied());
                put(&mut l.bias.iter().copied());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let field = |m: &str| Error::format("concept file", m.to_string());
        if bytes.len() < 12 || &bytes[..4] != CONCEPT_MAGIC {
            return Err(field("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != STORE_VERSION {
            return Err(Error::format("version", format!("concept file version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = bytes.get(12..12 + hlen).ok_or_else(|| field("truncated header"))?;
        let h: ConceptHeader = serde_json::from_slice(body).map_err(|e| field(&e.to_string()))?;
        let payload = &bytes[12 + hlen..];
        if !payload.len().is_multiple_of(4) {
            return Err(field("payload is not a whole number of f32 values"));
        }
        let mut r = F32Reader {
            vals: payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            pos: 0,
        };
        let filter_raw = Array1::from(r.take(h.embedding)?);
        let enc1 = r.layer(h.embedding, h.hidden)?;
        let enc2 = r.layer(h.hidden, h.latent)?;
        let rep = if h.has_rep { Some(Vec32::new(r.take(h.latent)?)?) } else { None };
        let decoder = match &h.decoder_widths {
            Some(w) => Some(DecoderNet {
                layers: w
                    .windows(2)
                    .map(|p| r.layer(p[0], p[1]))
                    .collect::<Result<Vec<_>>>()?,
            }),
            None => None,
        };
        if r.pos != r.vals.len() {
            return Err(field("trailing payload"));
        }
        Ok(Self {
            label: h.label,
            category: h.category,
            net: ConceptNet {
                grad_filter: Array1::zeros(filter_raw.len()),
                filter_raw,
                enc1,
                enc2,
            },
            decoder,
            rep,
            sample_count: h.sample_count,
            trained_rounds: h.trained_rounds,
        })
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

struct F32Reader {
    vals: Vec<f32>,
    pos: usize,
}

impl F32Reader {
    fn take(&mut self, n: usize) -> Result<Vec<f32>> {
        let v = self
            .vals
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::format("concept file", "payload truncated"))?;
        self.pos += n;
        Ok(v.to_vec())
    }

    fn layer(&mut self, dim_in: usize, dim_out: usize) -> Result<Linear<f32>> {
        let w = Array2::from_shape_vec((dim_out, dim_in), self.take(dim_out * dim_in)?).expect("sized");
        Linear::from_parts(w, Array1::from(self.take(dim_out)?))
    }
}

#[derive(Serialize, Deserialize)]
struct ConceptHeader {
    label: String,
    category: String,
    sample_count: u64,
    trained_rounds: u64,
    embedding: usize,
    hidden: usize,
    latent: usize,
    has_rep: bool,
    decoder_widths: Option<Vec<usize>>,
}

/// Per-concept initialization seed: independent of insertion order.
fn concept_rng(seed: u64, label: &str, purpose: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(purpose.as_bytes());
    h.update([0]);
    h.update(label.as_bytes());
    let digest = h.finalize();
    ChaCha8Rng::from_seed(digest[..32].try_into().expect("sha256 is 32 bytes"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Lexicon {
    pub entries: BTreeMap<String, ConceptEntry>,
    pub dims: Dims,
    pub seed: u64,
    pub config_hash: String,
}

impl Lexicon {
    pub fn new(dims: Dims, seed: u64) -> Self {
        let config_hash = hex::encode(Sha256::digest(
            serde_json::to_vec(&(&dims, seed)).expect("dims serialize"),
        ));
        Self {
            entries: BTreeMap::new(),
            dims,
            seed,
            config_hash,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn get(&self, label: &str) -> Result<&ConceptEntry> {
        self.entries
            .get(label)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }

    pub fn get_mut(&mut self, label: &str) -> Result<&mut ConceptEntry> {
        self.entries
            .get_mut(label)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }

    pub fn contains(&self, label: &str) -> bool {
        self.entries.contains_key(label)
    }

    /// Adds a freshly initialized concept; existing entries are untouched.
    pub fn add_concept(&mut self, label: &str, category: &str) -> Result<&mut ConceptEntry> {
        if self.entries.contains_key(label) {
            return Err(Error::DuplicateLabel(label.to_string()));
        }
        let mut rng = concept_rng(self.seed, label, "concept");
        let entry = ConceptEntry {
            label: label.to_string(),
            category: category.to_string(),
            net: ConceptNet::init(&self.dims, &mut rng),
            decoder: None,
            rep: None,
            sample_count: 0,
            trained_rounds: 0,
        };
        Ok(self.entries.entry(label.to_string()).or_insert(entry))
    }

    /// Gives `label` a freshly initialized decoder if it has none.
    pub fn ensure_decoder(&mut self, label: &str) -> Result<&mut ConceptEntry> {
        let (seed, dims) = (self.seed, self.dims.clone());
        let entry = self.get_mut(label)?;
        if entry.decoder.is_none() {
            let mut rng = concept_rng(seed, label, "decoder");
            entry.decoder = Some(DecoderNet::init(&dims, &mut rng));
        }
        Ok(entry)
    }

    /// Hash over all entries in label order.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.config_hash.as_bytes());
        for e in self.entries.values() {
            h.update(e.hash().as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn entry_hashes(&self) -> BTreeMap<String, String> {
        self.entries.iter().map(|(k, e)| (k.clone(), e.hash())).collect()
    }
}

/// `Enc(F(e))` for a single embedding.
pub fn encode(entry: &ConceptEntry, e: &Vec32) -> Result<Vec32> {
    Vec32::from_array(entry.net.encode(e.view())?)
}

#[derive(Serialize, Deserialize)]
struct StoreIndex {
    magic: String,
    version: u32,
    dims: Dims,
    seed: u64,
    config_hash: String,
    concepts: Vec<IndexEntry>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    label: String,
    file: String,
    sha256: String,
}

fn concept_file_name(label: &str, digest: &str) -> String {
    let safe: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .collect();
    format!("{safe}-{}.bin", &digest[..16])
}

/// Writes only concept files whose content changed, then atomically
/// replaces the index and removes files it no longer references.
pub fn save_store(lexicon: &Lexicon, dir: &Path) -> Result<()> {
    let concept_dir = dir.join(CONCEPT_DIR);
    fs::create_dir_all(&concept_dir)?;
    let mut concepts = Vec::with_capacity(lexicon.len());
    for e in lexicon.entries.values() {
        let bytes = e.to_bytes();
        let digest = hex::encode(Sha256::digest(&bytes));
        let file = concept_file_name(&e.label, &digest);
        let path = concept_dir.join(&file);
        let unchanged = fs::read(&path)
            .map(|old| hex::encode(Sha256::digest(&old)) == digest)
            .unwrap_or(false);
        if !unchanged {
            write_atomic(&path, &bytes)?;
        }
        concepts.push(IndexEntry {
            label: e.label.clone(),
            file,
            sha256: digest,
        });
    }
    let index = StoreIndex {
        magic: STORE_MAGIC.into(),
        version: STORE_VERSION,
        dims: lexicon.dims.clone(),
        seed: lexicon.seed,
        config_hash: lexicon.config_hash.clone(),
        concepts,
    };
    let mut json = serde_json::to_vec_pretty(&index)?;
    json.push(b'\n');
    write_atomic(&dir.join(INDEX_FILE), &json)?;

    let live: std::collections::HashSet<&str> = index.concepts.iter().map(|c| c.file.as_str()).collect();
    for f in fs::read_dir(&concept_dir)? {
        let f = f?;
        let name = f.file_name();
        if !live.contains(name.to_string_lossy().as_ref()) {
            fs::remove_file(f.path())?;
        }
    }
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp: PathBuf = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_store(dir: &Path) -> Result<Lexicon> {
    let raw = fs::read(dir.join(INDEX_FILE))
        .map_err(|e| Error::format("index", format!("{}: {e}", dir.join(INDEX_FILE).display())))?;
    let value: serde_json::Value =
        serde_json::from_slice(&raw).map_err(|e| Error::format("index", e.to_string()))?;
    if value.get("magic").and_then(|v| v.as_str()) != Some(STORE_MAGIC) {
        return Err(Error::format("magic", format!("store index is not {STORE_MAGIC}")));
    }
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == STORE_VERSION as u64 => {}
        other => {
            return Err(Error::format(
                "version",
                format!("expected store version {STORE_VERSION}, found {other:?}"),
            ))
        }
    }
    let index: StoreIndex = serde_json::from_value(value).map_err(|e| Error::format("index", e.to_string()))?;
    let mut lex = Lexicon::new(index.dims, index.seed);
    lex.config_hash = index.config_hash;
    for c in index.concepts {
        let path = dir.join(CONCEPT_DIR).join(&c.file);
        let bytes = fs::read(&path).map_err(|_| Error::MissingConcept {
            label: c.label.clone(),
            path: path.clone(),
        })?;
        if hex::encode(Sha256::digest(&bytes)) != c.sha256 {
            return Err(Error::Checksum(format!("concept `{}` ({})", c.label, path.display())));
        }
        let entry = ConceptEntry::from_bytes(&bytes)?;
        if entry.label != c.label {
            return Err(Error::format("label", format!("{} holds `{}`", c.file, entry.label)));
        }
        if entry.net.dim() != lex.dims.embedding || entry.net.enc2.dim_out() != lex.dims.latent {
            return Err(Error::format("dims", format!("concept `{}` has mismatched widths", c.label)));
        }
        lex.entries.insert(c.label, entry);
    }
    Ok(lex)
}
