//! Byte-level layouts for everything the toolkit persists.
//!
//! Bank file:
//!
//! ```text
//! "USQMBANK"            8-byte magic
//! u32 LE                header length H
//! H bytes               JSON header (version "usqm-bank/1", fingerprint, shapes, organ list, block table)
//! f32 LE blocks         in block-table order:
//!                         pca.mean (D), pca.components (d*D), pca.variances (d),
//!                         then per organ: gmm.<organ>.weights (K), .means (K*d), .variances (K*d)
//! ```
//!
//! Feature file:
//!
//! ```text
//! "USQF1"
//! repeated until EOF:
//!   u32 id length, id bytes (UTF-8)
//!   u16 layer count
//!   per layer: u16 layer index, u32 T, u32 C, T*C f32
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{LayerSet, TokenMatrix};
use crate::nr::{DiagGmm, OrganModelBank, PcaModel, BANK_VERSION};

pub const BANK_MAGIC: &[u8; 8] = b"USQMBANK";
pub const FEATURE_MAGIC: &[u8; 5] = b"USQF1";

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Short stable hash of any serializable configuration.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    hex::encode(Sha256::digest(bytes))[..16].to_string()
}

/// Creation time recorded in artifact headers. Taken from
/// `SOURCE_DATE_EPOCH` when set, otherwise 0, so artifacts stay reproducible.
pub fn artifact_timestamp() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankHeader {
    pub version: String,
    pub created_unix: u64,
    pub config_hash: String,
    pub fingerprint: String,
    pub input_dim: usize,
    pub d: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub layers: LayerSet,
    pub tile_size: usize,
    pub stride: usize,
    pub worst_fraction: f64,
    pub variance_floor: f64,
    pub organs: Vec<String>,
    pub blocks: Vec<BlockInfo>,
}

fn push_f32(out: &mut Vec<u8>, values: impl IntoIterator<Item = f64>) {
    for v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn encode_bank(bank: &OrganModelBank) -> Result<Vec<u8>> {
    let k = bank.organs.values().next().map_or(0, DiagGmm::components);
    if bank.organs.values().any(|g| g.components() != k) {
        return Err(Error::Parameter("all organ mixtures must share K".into()));
    }
    let (dd, d) = (bank.pca.input_dim, bank.pca.output_dim);
    let mut blocks = vec![
        BlockInfo { name: "pca.mean".into(), len: dd },
        BlockInfo { name: "pca.components".into(), len: d * dd },
        BlockInfo { name: "pca.variances".into(), len: d },
    ];
    for name in bank.organs.keys() {
        blocks.push(BlockInfo { name: format!("gmm.{name}.weights"), len: k });
        blocks.push(BlockInfo { name: format!("gmm.{name}.means"), len: k * d });
        blocks.push(BlockInfo { name: format!("gmm.{name}.variances"), len: k * d });
    }
    let header = BankHeader {
        version: bank.version.clone(),
        created_unix: artifact_timestamp(),
        config_hash: bank.config_hash.clone(),
        fingerprint: bank.fingerprint.clone(),
        input_dim: dd,
        d,
        k,
        layers: bank.layers.clone(),
        tile_size: bank.tile_size,
        stride: bank.stride,
        worst_fraction: bank.worst_fraction,
        variance_floor: bank.variance_floor,
        organs: bank.organs.keys().cloned().collect(),
        blocks,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(BANK_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    push_f32(&mut out, bank.pca.mean.iter().copied());
    push_f32(&mut out, bank.pca.components.iter().copied());
    push_f32(&mut out, bank.pca.variances.iter().copied());
    for g in bank.organs.values() {
        push_f32(&mut out, g.weights.iter().copied());
        push_f32(&mut out, g.means.iter().flatten().copied());
        push_f32(&mut out, g.variances.iter().flatten().copied());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Decode(format!(
                "truncated {what}: needs {n} bytes, {} available",
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| Error::Decode(format!("{what}: size overflow")))?;
        let raw = self.take(bytes, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect())
    }
}

pub fn decode_bank(bytes: &[u8]) -> Result<OrganModelBank> {
    let mut r = Reader::new(bytes);
    if r.take(8, "magic")? != BANK_MAGIC {
        return Err(Error::Decode("not a bank file (bad magic)".into()));
    }
    let hlen = r.u32("header length")? as usize;
    let raw_header = r.take(hlen, "header")?;
    let value: serde_json::Value = serde_json::from_slice(raw_header)
        .map_err(|e| Error::Decode(format!("header is not JSON: {e}")))?;
    let version = value.get("version").and_then(|v| v.as_str()).unwrap_or("<missing>");
    if version != BANK_VERSION {
        return Err(Error::UnsupportedVersion(version.to_string()));
    }
    let header: BankHeader = serde_json::from_value(value)
        .map_err(|e| Error::Decode(format!("bad bank header: {e}")))?;
    let (dd, d, k) = (header.input_dim, header.d, header.k);
    let mut expected = vec![
        ("pca.mean".to_string(), dd),
        ("pca.components".to_string(), d * dd),
        ("pca.variances".to_string(), d),
    ];
    for name in &header.organs {
        expected.push((format!("gmm.{name}.weights"), k));
        expected.push((format!("gmm.{name}.means"), k * d));
        expected.push((format!("gmm.{name}.variances"), k * d));
    }
    let declared: Vec<(String, usize)> = header.blocks.iter().map(|b| (b.name.clone(), b.len)).collect();
    if declared != expected {
        return Err(Error::Decode("block table disagrees with declared shapes".into()));
    }
    let mut blocks: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (name, len) in &expected {
        let vals = r.f32s(*len, &format!("block `{name}`"))?;
        blocks.insert(name.clone(), vals);
    }
    if !r.at_end() {
        return Err(Error::Decode(format!("{} trailing bytes after last block", r.remaining())));
    }
    let mut take = |n: &str| blocks.remove(n).expect("block decoded above");
    let pca = PcaModel {
        input_dim: dd,
        output_dim: d,
        mean: take("pca.mean"),
        components: take("pca.components"),
        variances: take("pca.variances"),
    };
    let rows = |flat: Vec<f64>| -> Vec<Vec<f64>> { flat.chunks(d.max(1)).map(<[f64]>::to_vec).collect() };
    let mut organs = BTreeMap::new();
    for name in &header.organs {
        let weights = take(&format!("gmm.{name}.weights"));
        let means = rows(take(&format!("gmm.{name}.means")));
        let variances = rows(take(&format!("gmm.{name}.variances")));
        organs.insert(name.clone(), DiagGmm { weights, means, variances });
    }
    let bank = OrganModelBank {
        version: header.version,
        fingerprint: header.fingerprint,
        config_hash: header.config_hash,
        layers: header.layers,
        tile_size: header.tile_size,
        stride: header.stride,
        worst_fraction: header.worst_fraction,
        variance_floor: header.variance_floor,
        pca,
        organs,
    };
    bank.validate()?;
    Ok(bank)
}

pub fn save_bank(bank: &OrganModelBank, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_bank(bank)?)
}

pub fn load_bank(path: impl AsRef<Path>) -> Result<OrganModelBank> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bank(&bytes)
}

/// Token features for one image in an external feature file.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub image_id: String,
    pub layers: Vec<(usize, TokenMatrix)>,
}

pub fn encode_features(records: &[FeatureRecord]) -> Vec<u8> {
    let mut out = FEATURE_MAGIC.to_vec();
    for rec in records {
        out.extend_from_slice(&(rec.image_id.len() as u32).to_le_bytes());
        out.extend_from_slice(rec.image_id.as_bytes());
        out.extend_from_slice(&(rec.layers.len() as u16).to_le_bytes());
        for (layer, m) in &rec.layers {
            out.extend_from_slice(&(*layer as u16).to_le_bytes());
            out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            push_f32(&mut out, m.data().iter().copied());
        }
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<Vec<FeatureRecord>> {
    let mut r = Reader::new(bytes);
    if r.take(FEATURE_MAGIC.len(), "magic")? != FEATURE_MAGIC {
        return Err(Error::Decode("not a feature file (bad magic)".into()));
    }
    let mut out = Vec::new();
    while !r.at_end() {
        let n = r.u32("image id length")? as usize;
        let image_id = String::from_utf8(r.take(n, "image id")?.to_vec())
            .map_err(|_| Error::Decode("image id is not UTF-8".into()))?;
        let count = r.u16("layer count")?;
        let mut layers = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let layer = r.u16("layer index")? as usize;
            let t = r.u32("token count")? as usize;
            let c = r.u32("channel count")? as usize;
            let n = t
                .checked_mul(c)
                .ok_or_else(|| Error::Decode("layer size overflow".into()))?;
            let data = r.f32s(n, &format!("layer {layer} of `{image_id}`"))?;
            layers.push((layer, TokenMatrix::new(t, c, data)?));
        }
        out.push(FeatureRecord { image_id, layers });
    }
    Ok(out)
}

pub fn save_features(records: &[FeatureRecord], path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_features(records))
}

/// Reads JSON lines, naming the offending line on a schema violation.
/// Blank lines are skipped.
pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text, &path.display().to_string())
}

pub fn parse_jsonl<T: DeserializeOwned>(text: &str, source_name: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Schema {
                source_name: source_name.to_string(),
                row: i + 1,
                detail: e.to_string(),
            })
        })
        .collect()
}

pub fn to_jsonl<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn write_jsonl<T: Serialize>(rows: &[T], path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), to_jsonl(rows)?.as_bytes())
}

pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path.as_ref(), &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Schema {
        source_name: path.display().to_string(),
        row: e.line(),
        detail: e.to_string(),
    })
}

/// One line of a bank-fitting manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitManifestEntry {
    pub path: String,
    pub organ: String,
}

/// One row of `degradations.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationRecord {
    pub source: String,
    pub kind: String,
    pub theta: f64,
    pub seed: u64,
    pub achieved_psnr: crate::image::Psnr,
    pub output_path: String,
}

/// Resolves `p` relative to the directory holding `manifest`.
pub fn resolve(manifest: &Path, p: &str) -> std::path::PathBuf {
    let candidate = Path::new(p);
    if candidate.is_absolute() {
        candidate.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(candidate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nr::VARIANCE_FLOOR;

    pub(crate) fn small_bank() -> OrganModelBank {
        let pca = PcaModel {
            input_dim: 3,
            output_dim: 2,
            mean: vec![0.25, -0.5, 0.125],
            components: vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0],
            variances: vec![2.0, 0.5],
        };
        let mut organs = BTreeMap::new();
        organs.insert(
            "kidney".to_string(),
            DiagGmm {
                weights: vec![0.25, 0.75],
                means: vec![vec![0.5, 1.5], vec![-1.0, 0.0]],
                variances: vec![vec![1.0, 0.5], vec![0.25, 2.0]],
            },
        );
        organs.insert(
            "thyroid".to_string(),
            DiagGmm {
                weights: vec![0.5, 0.5],
                means: vec![vec![0.0, 0.0], vec![1.0, -1.0]],
                variances: vec![vec![0.125, 0.5], vec![1.0, 1.0]],
            },
        );
        OrganModelBank {
            version: BANK_VERSION.into(),
            fingerprint: "builtin-seeded:1:abcd".into(),
            config_hash: "0011".into(),
            layers: LayerSet::default(),
            tile_size: 224,
            stride: 112,
            worst_fraction: 0.15,
            variance_floor: VARIANCE_FLOOR,
            pca,
            organs,
        }
    }

    #[test]
    fn bank_round_trip_is_byte_stable() {
        let bank = small_bank();
        let a = encode_bank(&bank).unwrap();
        let back = decode_bank(&a).unwrap();
        assert_eq!(back, bank);
        assert_eq!(encode_bank(&back).unwrap(), a);
    }

    #[test]
    fn truncated_bank_names_block() {
        let bytes = encode_bank(&small_bank()).unwrap();
        let cut = &bytes[..bytes.len() - 6];
        match decode_bank(cut) {
            Err(Error::Decode(msg)) => assert!(msg.contains("gmm.thyroid.variances"), "{msg}"),
            other => panic!("expected decode error, got {other:?}"),
        }
    }

    fn rewrite_header(bytes: &[u8], f: impl FnOnce(&mut serde_json::Value)) -> Vec<u8> {
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + hlen]).unwrap();
        f(&mut header);
        let json = serde_json::to_vec(&header).unwrap();
        let mut out = BANK_MAGIC.to_vec();
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&bytes[12 + hlen..]);
        out
    }

    #[test]
    fn future_version_rejected() {
        let bytes = encode_bank(&small_bank()).unwrap();
        let v2 = rewrite_header(&bytes, |h| h["version"] = "usqm-bank/2".into());
        assert!(matches!(decode_bank(&v2), Err(Error::UnsupportedVersion(v)) if v == "usqm-bank/2"));
    }

    #[test]
    fn corrupt_weights_rejected() {
        let bytes = encode_bank(&small_bank()).unwrap();
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        // first kidney weight sits after mean(3) + components(6) + variances(2)
        let off = 12 + hlen + 4 * 11;
        let mut bad = bytes.clone();
        bad[off..off + 4].copy_from_slice(&0.9f32.to_le_bytes());
        assert!(matches!(decode_bank(&bad), Err(Error::CorruptModel(_))));
    }

    #[test]
    fn variance_below_floor_rejected() {
        let mut bank = small_bank();
        bank.organs.get_mut("kidney").unwrap().variances[0][0] = 1e-9;
        let bytes = encode_bank(&bank).unwrap();
        assert!(matches!(decode_bank(&bytes), Err(Error::CorruptModel(_))));
    }

    #[test]
    fn bad_magic_and_trailing_bytes() {
        let mut bytes = encode_bank(&small_bank()).unwrap();
        bytes.push(0);
        assert!(matches!(decode_bank(&bytes), Err(Error::Decode(_))));
        assert!(matches!(decode_bank(b"NOTABANKxxxx"), Err(Error::Decode(_))));
    }

    #[test]
    fn feature_file_layout() {
        let m = TokenMatrix::new(1, 2, vec![1.5, -2.0]).unwrap();
        let rec = FeatureRecord {
            image_id: "ab".into(),
            layers: vec![(3, m)],
        };
        let bytes = encode_features(std::slice::from_ref(&rec));
        let mut expected = b"USQF1".to_vec();
        expected.extend_from_slice(&[2, 0, 0, 0, b'a', b'b', 1, 0, 3, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        expected.extend_from_slice(&1.5f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, expected);
        assert_eq!(decode_features(&bytes).unwrap(), vec![rec]);
        assert!(decode_features(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn jsonl_reports_row() {
        let text = "{\"path\":\"a.png\",\"organ\":\"liver\"}\n\n{\"path\":\"b.png\"}\n";
        match parse_jsonl::<FitManifestEntry>(text, "m.jsonl") {
            Err(Error::Schema { row, .. }) => assert_eq!(row, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/x.bin");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
