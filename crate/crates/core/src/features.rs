//! Feature extractor contract and its two backends.
//!
//! An extractor maps a 224x224 tile to per-layer patch-token matrices with the
//! class token removed. [`SeededEncoder`] is a ViT-style encoder whose weights
//! come from a seeded generator; [`ExternalFeatures`] replays tokens exported
//! offline from another model.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{GrayImage, TILE_SIZE};
use crate::store::{self, FeatureRecord};

pub const DEFAULT_SEED: u64 = 20240001;

/// Canonical (ascending, deduplicated) set of zero-based block indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "Vec<usize>", from = "Vec<usize>")]
pub struct LayerSet(Vec<usize>);

impl LayerSet {
    pub fn new(layers: impl IntoIterator<Item = usize>) -> Self {
        let mut v: Vec<usize> = layers.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        LayerSet(v)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max(&self) -> Option<usize> {
        self.0.last().copied()
    }
}

impl Default for LayerSet {
    fn default() -> Self {
        LayerSet::new([3, 5, 7, 11])
    }
}

impl From<Vec<usize>> for LayerSet {
    fn from(v: Vec<usize>) -> Self {
        LayerSet::new(v)
    }
}

impl From<LayerSet> for Vec<usize> {
    fn from(l: LayerSet) -> Self {
        l.0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorProfile {
    pub num_layers: usize,
    /// Tokens per grid axis; every layer has `grid_side^2` patch tokens.
    pub grid_side: usize,
    pub channels_per_layer: Vec<usize>,
    pub has_class_token: bool,
}

impl ExtractorProfile {
    pub fn builtin() -> Self {
        Self {
            num_layers: 12,
            grid_side: TILE_SIZE / PATCH,
            channels_per_layer: vec![WIDTH; 12],
            has_class_token: true,
        }
    }

    pub fn tokens(&self) -> usize {
        self.grid_side * self.grid_side
    }

    pub fn check_layers(&self, layers: &LayerSet) -> Result<()> {
        if layers.is_empty() {
            return Err(Error::Parameter("layer set is empty".into()));
        }
        match layers.max() {
            Some(m) if m >= self.num_layers => Err(Error::Range(format!(
                "layer {m} outside [0, {})",
                self.num_layers
            ))),
            _ => Ok(()),
        }
    }

    pub fn descriptor_len(&self, layers: &LayerSet) -> usize {
        layers
            .as_slice()
            .iter()
            .map(|&l| self.channels_per_layer[l])
            .sum()
    }
}

/// Dense row-major `T x C` matrix of token features.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TokenMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} token matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Range("non-finite token feature".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged token rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Column means (average pooling over tokens).
    pub fn column_mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        let n = self.rows as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }
}

/// Per-layer token matrices for one tile, in ascending layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenFeatures {
    pub layers: Vec<(usize, TokenMatrix)>,
}

impl TokenFeatures {
    pub fn layer(&self, index: usize) -> Option<&TokenMatrix> {
        self.layers
            .iter()
            .find(|(l, _)| *l == index)
            .map(|(_, m)| m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalDescriptor {
    pub values: Vec<f64>,
    pub layers: LayerSet,
    /// Set when the pooled vector was exactly zero and could not be normalized.
    pub degenerate: bool,
}

impl GlobalDescriptor {
    /// Concatenates pooled layer means and L2-normalizes the result.
    pub fn from_features(features: &TokenFeatures, layers: &LayerSet) -> Result<Self> {
        let mut values = Vec::new();
        for &l in layers.as_slice() {
            let m = features
                .layer(l)
                .ok_or_else(|| Error::Range(format!("layer {l} missing from features")))?;
            values.extend(m.column_mean());
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        let degenerate = norm == 0.0;
        if degenerate {
            log::warn!("zero pooled descriptor; leaving it unnormalized");
        } else {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(Self {
            values,
            layers: layers.clone(),
            degenerate,
        })
    }
}

pub trait FeatureExtractor: Send + Sync {
    fn profile(&self) -> &ExtractorProfile;

    /// Identity of the feature space; banks fit with one fingerprint cannot
    /// be scored with another.
    fn fingerprint(&self) -> String;

    fn extract(&self, img224: &GrayImage, layers: &LayerSet) -> Result<TokenFeatures>;

    fn global_descriptor(&self, img224: &GrayImage, layers: &LayerSet) -> Result<GlobalDescriptor> {
        let f = self.extract(img224, layers)?;
        GlobalDescriptor::from_features(&f, layers)
    }
}

fn check_tile(img: &GrayImage) -> Result<()> {
    if img.dims() != (TILE_SIZE, TILE_SIZE) {
        return Err(Error::Shape(format!(
            "extractor expects {TILE_SIZE}x{TILE_SIZE}, got {}x{}",
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

const PATCH: usize = 16;
const WIDTH: usize = 64;
const HEADS: usize = 4;
const MLP_RATIO: usize = 4;
const DEPTH: usize = 12;
const LN_EPS: f32 = 1e-5;
const ARCH_TAG: &str = "vit-p16-w64-h4-mlp4-d12-prenorm-v1";

struct Block {
    ln1_g: Array1<f32>,
    ln1_b: Array1<f32>,
    qkv_w: Array2<f32>,
    qkv_b: Array1<f32>,
    proj_w: Array2<f32>,
    proj_b: Array1<f32>,
    ln2_g: Array1<f32>,
    ln2_b: Array1<f32>,
    fc1_w: Array2<f32>,
    fc1_b: Array1<f32>,
    fc2_w: Array2<f32>,
    fc2_b: Array1<f32>,
}

/// 12-block pre-norm transformer encoder with 16x16 patches and width 64.
///
/// Weights are drawn once from a ChaCha8 stream seeded with `seed`, in a
/// fixed order, so the feature space is a pure function of the seed.
pub struct SeededEncoder {
    seed: u64,
    profile: ExtractorProfile,
    patch_w: Array2<f32>,
    patch_b: Array1<f32>,
    cls: Array1<f32>,
    pos: Array2<f32>,
    blocks: Vec<Block>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, n: usize, std: f32) -> Vec<f32> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                z as f32 * std
            })
            .collect()
    }

    fn matrix(&mut self, fan_in: usize, fan_out: usize) -> Array2<f32> {
        let std = (fan_in as f32).sqrt().recip();
        Array2::from_shape_vec((fan_in, fan_out), self.normal(fan_in * fan_out, std))
            .expect("shape")
    }

    fn vector(&mut self, n: usize, mean: f32, std: f32) -> Array1<f32> {
        Array1::from_vec(self.normal(n, std).into_iter().map(|v| v + mean).collect())
    }
}

impl SeededEncoder {
    pub fn new(seed: u64) -> Self {
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let tokens = (TILE_SIZE / PATCH).pow(2);
        let patch_w = init.matrix(PATCH * PATCH, WIDTH);
        let patch_b = init.vector(WIDTH, 0.0, 0.1);
        let cls = init.vector(WIDTH, 0.0, 0.5);
        let pos = Array2::from_shape_vec((tokens + 1, WIDTH), init.normal((tokens + 1) * WIDTH, 0.1))
            .expect("shape");
        let hidden = WIDTH * MLP_RATIO;
        let blocks = (0..DEPTH)
            .map(|_| Block {
                ln1_g: init.vector(WIDTH, 1.0, 0.1),
                ln1_b: init.vector(WIDTH, 0.0, 0.1),
                qkv_w: init.matrix(WIDTH, 3 * WIDTH),
                qkv_b: init.vector(3 * WIDTH, 0.0, 0.1),
                proj_w: init.matrix(WIDTH, WIDTH),
                proj_b: init.vector(WIDTH, 0.0, 0.1),
                ln2_g: init.vector(WIDTH, 1.0, 0.1),
                ln2_b: init.vector(WIDTH, 0.0, 0.1),
                fc1_w: init.matrix(WIDTH, hidden),
                fc1_b: init.vector(hidden, 0.0, 0.1),
                fc2_w: init.matrix(hidden, WIDTH),
                fc2_b: init.vector(WIDTH, 0.0, 0.1),
            })
            .collect();
        Self {
            seed,
            profile: ExtractorProfile::builtin(),
            patch_w,
            patch_b,
            cls,
            pos,
            blocks,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn embed(&self, img: &GrayImage) -> Array2<f32> {
        let side = TILE_SIZE / PATCH;
        let mut patches = Array2::<f32>::zeros((side * side, PATCH * PATCH));
        for pr in 0..side {
            for pc in 0..side {
                let mut row = patches.row_mut(pr * side + pc);
                for y in 0..PATCH {
                    for x in 0..PATCH {
                        let v = img.get(pr * PATCH + y, pc * PATCH + x);
                        row[y * PATCH + x] = ((v - 0.5) * 2.0) as f32;
                    }
                }
            }
        }
        let tokens = patches.dot(&self.patch_w) + &self.patch_b;
        let mut h = Array2::<f32>::zeros((side * side + 1, WIDTH));
        h.row_mut(0).assign(&self.cls);
        h.slice_mut(s![1.., ..]).assign(&tokens);
        h + &self.pos
    }

    fn forward(&self, img: &GrayImage, keep: &LayerSet) -> Vec<(usize, Array2<f32>)> {
        let mut h = self.embed(img);
        let mut out = Vec::with_capacity(keep.len());
        let last = keep.max().unwrap_or(0);
        for (i, b) in self.blocks.iter().enumerate().take(last + 1) {
            let a = attention(&layer_norm(&h, &b.ln1_g, &b.ln1_b), b);
            h += &a;
            let n = layer_norm(&h, &b.ln2_g, &b.ln2_b);
            let mut hidden = n.dot(&b.fc1_w) + &b.fc1_b;
            hidden.mapv_inplace(gelu);
            h += &(hidden.dot(&b.fc2_w) + &b.fc2_b);
            if keep.as_slice().contains(&i) {
                out.push((i, h.slice(s![1.., ..]).to_owned()));
            }
        }
        out
    }
}

fn layer_norm(x: &Array2<f32>, g: &Array1<f32>, b: &Array1<f32>) -> Array2<f32> {
    let mut out = x.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let n = row.len() as f32;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
        let inv = (var + LN_EPS).sqrt().recip();
        for ((v, gi), bi) in row.iter_mut().zip(g).zip(b) {
            *v = (*v - mean) * inv * gi + bi;
        }
    }
    out
}

fn attention(x: &Array2<f32>, b: &Block) -> Array2<f32> {
    let n = x.nrows();
    let head = WIDTH / HEADS;
    let qkv = x.dot(&b.qkv_w) + &b.qkv_b;
    let scale = (head as f32).sqrt().recip();
    let mut merged = Array2::<f32>::zeros((n, WIDTH));
    for hd in 0..HEADS {
        let q = qkv.slice(s![.., hd * head..(hd + 1) * head]);
        let k = qkv.slice(s![.., WIDTH + hd * head..WIDTH + (hd + 1) * head]);
        let v = qkv.slice(s![.., 2 * WIDTH + hd * head..2 * WIDTH + (hd + 1) * head]);
        let mut logits = q.dot(&k.t()) * scale;
        softmax_rows(&mut logits);
        merged
            .slice_mut(s![.., hd * head..(hd + 1) * head])
            .assign(&logits.dot(&v));
    }
    merged.dot(&b.proj_w) + &b.proj_b
}

fn softmax_rows(m: &mut Array2<f32>) {
    for mut row in m.axis_iter_mut(Axis(0)) {
        let max = row.fold(f32::NEG_INFINITY, |a, &v| a.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

// tanh approximation
fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn to_token_matrix(m: ArrayView2<f32>) -> TokenMatrix {
    let (rows, cols) = m.dim();
    let data = m.iter().map(|&v| f64::from(v)).collect();
    TokenMatrix { rows, cols, data }
}

impl FeatureExtractor for SeededEncoder {
    fn profile(&self) -> &ExtractorProfile {
        &self.profile
    }

    fn fingerprint(&self) -> String {
        fingerprint("builtin-seeded", &self.seed.to_string(), &self.profile)
    }

    fn extract(&self, img224: &GrayImage, layers: &LayerSet) -> Result<TokenFeatures> {
        check_tile(img224)?;
        self.profile.check_layers(layers)?;
        let layers = self
            .forward(img224, layers)
            .into_iter()
            .map(|(l, m)| (l, to_token_matrix(m.view())))
            .collect();
        Ok(TokenFeatures { layers })
    }
}

pub(crate) fn fingerprint(identity: &str, key: &str, profile: &ExtractorProfile) -> String {
    let mut h = Sha256::new();
    h.update(identity.as_bytes());
    h.update([0]);
    h.update(key.as_bytes());
    h.update([0]);
    if identity == "builtin-seeded" {
        h.update(ARCH_TAG.as_bytes());
    }
    h.update(serde_json::to_vec(profile).expect("profile serializes"));
    let digest = hex::encode(h.finalize());
    format!("{identity}:{key}:{}", &digest[..16])
}

/// Content key that external feature files use to identify a tile:
/// hex SHA-256 over `"{h}x{w}:"` followed by the 8-bit quantized pixels.
pub fn image_key(img: &GrayImage) -> String {
    let mut h = Sha256::new();
    h.update(format!("{}x{}:", img.height(), img.width()).as_bytes());
    h.update(img.to_u8());
    hex::encode(h.finalize())
}

/// Token features precomputed offline, looked up by [`image_key`].
pub struct ExternalFeatures {
    profile: ExtractorProfile,
    digest: String,
    records: BTreeMap<String, BTreeMap<usize, TokenMatrix>>,
}

impl ExternalFeatures {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_records(store::decode_features(&bytes)?, &bytes)
    }

    pub fn from_records(records: Vec<FeatureRecord>, raw: &[u8]) -> Result<Self> {
        let mut map: BTreeMap<String, BTreeMap<usize, TokenMatrix>> = BTreeMap::new();
        let mut channels: BTreeMap<usize, usize> = BTreeMap::new();
        let mut tokens = None;
        for rec in records {
            let entry = map.entry(rec.image_id.clone()).or_default();
            for (layer, m) in rec.layers {
                if *tokens.get_or_insert(m.rows()) != m.rows() {
                    return Err(Error::Shape(format!(
                        "{}: layer {layer} has {} tokens, expected {}",
                        rec.image_id,
                        m.rows(),
                        tokens.unwrap_or(0)
                    )));
                }
                if *channels.entry(layer).or_insert(m.cols()) != m.cols() {
                    return Err(Error::Shape(format!(
                        "{}: layer {layer} has {} channels, inconsistent with other images",
                        rec.image_id,
                        m.cols()
                    )));
                }
                entry.insert(layer, m);
            }
        }
        let tokens = tokens.ok_or_else(|| Error::InsufficientData("feature file is empty".into()))?;
        let grid_side = (tokens as f64).sqrt().round() as usize;
        if grid_side * grid_side != tokens {
            return Err(Error::Shape(format!("{tokens} tokens is not a square grid")));
        }
        let num_layers = channels.keys().max().map_or(0, |m| m + 1);
        let channels_per_layer = (0..num_layers)
            .map(|l| channels.get(&l).copied().unwrap_or(0))
            .collect();
        let digest = hex::encode(Sha256::digest(raw));
        Ok(Self {
            profile: ExtractorProfile {
                num_layers,
                grid_side,
                channels_per_layer,
                has_class_token: true,
            },
            digest,
            records: map,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl FeatureExtractor for ExternalFeatures {
    fn profile(&self) -> &ExtractorProfile {
        &self.profile
    }

    fn fingerprint(&self) -> String {
        fingerprint("external", &self.digest[..16], &self.profile)
    }

    fn extract(&self, img224: &GrayImage, layers: &LayerSet) -> Result<TokenFeatures> {
        check_tile(img224)?;
        self.profile.check_layers(layers)?;
        let key = image_key(img224);
        let rec = self
            .records
            .get(&key)
            .ok_or_else(|| Error::Range(format!("no external features for tile {key}")))?;
        let layers = layers
            .as_slice()
            .iter()
            .map(|&l| {
                rec.get(&l)
                    .cloned()
                    .map(|m| (l, m))
                    .ok_or_else(|| Error::Range(format!("layer {l} missing for tile {key}")))
            })
            .collect::<Result<_>>()?;
        Ok(TokenFeatures { layers })
    }
}
