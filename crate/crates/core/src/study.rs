//! Two-alternative forced-choice study: pair generation and agreement analysis.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evalstats::{binomial_test_two_sided, wilson_ci};
use crate::store::DegradationRecord;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairClass {
    /// Same source, matched PSNR, different kinds.
    CrossDegradation,
    /// Same source and kind, different PSNR; the higher-PSNR image is correct.
    Sanity,
    /// Repeat of an earlier pair, for consistency checks.
    Duplicate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Choice {
    A,
    B,
}

impl fmt::Display for Choice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Choice::A => "A",
            Choice::B => "B",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    pub path: String,
    pub source: String,
    pub kind: String,
    pub theta: f64,
    pub achieved_psnr: f64,
}

impl ImageRef {
    fn from_record(r: &DegradationRecord) -> Option<Self> {
        Some(Self {
            path: r.output_path.clone(),
            source: r.source.clone(),
            kind: r.kind.clone(),
            theta: r.theta,
            achieved_psnr: r.achieved_psnr.finite()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair_id: String,
    pub class: PairClass,
    pub a: ImageRef,
    pub b: ImageRef,
    /// When set, image B is presented on the left.
    pub swap: bool,
    /// Reader the pair is allocated to; `None` means every reader sees it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reader: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duplicate_of: Option<String>,
}

/// One line of the response log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponseRecord {
    pub pair_id: String,
    pub reader: String,
    pub choice: Choice,
    pub unix_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairgenConfig {
    pub n_pairs: usize,
    pub sanity_fraction: f64,
    pub seed: u64,
    pub psnr_tolerance: f64,
    /// Duplicates per reader session (at least 1).
    pub duplicates: usize,
    /// Round-robin over kind pairs instead of uniform sampling.
    pub balanced: bool,
    /// Reader allocation; empty means one shared pool.
    pub readers: Vec<String>,
}

impl Default for PairgenConfig {
    fn default() -> Self {
        Self {
            n_pairs: 540,
            sanity_fraction: 0.1,
            seed: 0,
            psnr_tolerance: 0.1,
            duplicates: 1,
            balanced: true,
            readers: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairgenSummary {
    pub cross: usize,
    pub sanity: usize,
    pub duplicate: usize,
    /// Cross pairs per unordered kind pair `"k1|k2"`.
    pub per_kind_pair: BTreeMap<String, usize>,
    pub available_per_kind_pair: BTreeMap<String, usize>,
}

fn kind_pair_key(a: &ImageRef, b: &ImageRef) -> String {
    if a.kind <= b.kind {
        format!("{}|{}", a.kind, b.kind)
    } else {
        format!("{}|{}", b.kind, a.kind)
    }
}

fn candidates(records: &[DegradationRecord], tol: f64) -> (Vec<(ImageRef, ImageRef)>, Vec<(ImageRef, ImageRef)>) {
    let mut by_source: BTreeMap<&str, Vec<ImageRef>> = BTreeMap::new();
    for r in records {
        if let Some(img) = ImageRef::from_record(r) {
            by_source.entry(r.source.as_str()).or_default().push(img);
        }
    }
    let mut cross = Vec::new();
    let mut sanity = Vec::new();
    for imgs in by_source.values_mut() {
        imgs.sort_by(|a, b| a.path.cmp(&b.path));
        for i in 0..imgs.len() {
            for j in i + 1..imgs.len() {
                let (a, b) = (&imgs[i], &imgs[j]);
                let gap = (a.achieved_psnr - b.achieved_psnr).abs();
                if a.kind != b.kind && gap <= tol {
                    cross.push((a.clone(), b.clone()));
                } else if a.kind == b.kind && gap > tol {
                    sanity.push((a.clone(), b.clone()));
                }
            }
        }
    }
    (cross, sanity)
}

fn per_kind_counts(records: &[DegradationRecord]) -> String {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records {
        *counts.entry(r.kind.as_str()).or_default() += 1;
    }
    counts
        .iter()
        .map(|(k, n)| format!("{k}={n}"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Builds a blinded pair manifest from a degradation manifest.
pub fn pairgen(records: &[DegradationRecord], cfg: &PairgenConfig) -> Result<(Vec<PairRecord>, PairgenSummary)> {
    if !(0.0..1.0).contains(&cfg.sanity_fraction) {
        return Err(Error::Parameter(format!(
            "sanity fraction {} not in [0, 1)",
            cfg.sanity_fraction
        )));
    }
    if cfg.n_pairs == 0 {
        return Err(Error::Parameter("n_pairs must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut cross, mut sanity) = candidates(records, cfg.psnr_tolerance);

    let mut available: BTreeMap<String, Vec<(ImageRef, ImageRef)>> = BTreeMap::new();
    for (a, b) in cross.drain(..) {
        available.entry(kind_pair_key(&a, &b)).or_default().push((a, b));
    }
    let available_counts: BTreeMap<String, usize> = available.iter().map(|(k, v)| (k.clone(), v.len())).collect();
    let total: usize = available_counts.values().sum();
    if total < cfg.n_pairs {
        return Err(Error::InsufficientData(format!(
            "{total} PSNR-matched cross pairs available, {} requested; images per kind: {}; pairs per kind pair: {}",
            cfg.n_pairs,
            per_kind_counts(records),
            available_counts
                .iter()
                .map(|(k, n)| format!("{k}={n}"))
                .collect::<Vec<_>>()
                .join(", ")
        )));
    }
    for v in available.values_mut() {
        v.shuffle(&mut rng);
    }
    let mut chosen: Vec<(ImageRef, ImageRef)> = Vec::with_capacity(cfg.n_pairs);
    if cfg.balanced {
        let mut queues: Vec<std::vec::IntoIter<(ImageRef, ImageRef)>> =
            available.into_values().map(|v| v.into_iter()).collect();
        while chosen.len() < cfg.n_pairs {
            for q in queues.iter_mut() {
                if chosen.len() == cfg.n_pairs {
                    break;
                }
                if let Some(p) = q.next() {
                    chosen.push(p);
                }
            }
        }
    } else {
        let mut all: Vec<_> = available.into_values().flatten().collect();
        all.shuffle(&mut rng);
        all.truncate(cfg.n_pairs);
        chosen = all;
    }

    let n_sanity = (cfg.sanity_fraction * cfg.n_pairs as f64 / (1.0 - cfg.sanity_fraction)).round() as usize;
    if sanity.len() < n_sanity {
        return Err(Error::InsufficientData(format!(
            "{} sanity pairs available (same kind, different PSNR), {n_sanity} requested; images per kind: {}",
            sanity.len(),
            per_kind_counts(records)
        )));
    }
    sanity.shuffle(&mut rng);
    sanity.truncate(n_sanity);

    let mut per_kind_pair = BTreeMap::new();
    for (a, b) in &chosen {
        *per_kind_pair.entry(kind_pair_key(a, b)).or_insert(0) += 1;
    }

    let mut base: Vec<(PairClass, ImageRef, ImageRef)> = chosen
        .into_iter()
        .map(|(a, b)| (PairClass::CrossDegradation, a, b))
        .chain(sanity.into_iter().map(|(a, b)| (PairClass::Sanity, a, b)))
        .collect();
    base.shuffle(&mut rng);

    let sessions: Vec<Option<String>> = if cfg.readers.is_empty() {
        vec![None]
    } else {
        cfg.readers.iter().cloned().map(Some).collect()
    };
    let mut out: Vec<PairRecord> = Vec::new();
    let mut n_dup = 0;
    for (s, reader) in sessions.iter().enumerate() {
        let mine: Vec<(PairClass, ImageRef, ImageRef)> = base
            .iter()
            .enumerate()
            .filter(|(i, _)| i % sessions.len() == s)
            .map(|(_, p)| p.clone())
            .collect();
        let session: Vec<PairRecord> = mine
            .into_iter()
            .map(|(class, a, b)| PairRecord {
                pair_id: String::new(),
                class,
                a,
                b,
                swap: rng.random_bool(0.5),
                reader: reader.clone(),
                duplicate_of: None,
            })
            .collect();
        let originals: Vec<usize> = (0..session.len())
            .filter(|&i| session[i].class == PairClass::CrossDegradation)
            .collect();
        if originals.is_empty() {
            continue;
        }
        // (index into session, is duplicate); duplicates go after their original
        let mut order: Vec<(usize, bool)> = (0..session.len()).map(|i| (i, false)).collect();
        for _ in 0..cfg.duplicates.max(1) {
            let src = originals[rng.random_range(0..originals.len())];
            let at = order.iter().position(|&e| e == (src, false)).expect("original present");
            let pos = rng.random_range(at + 1..=order.len());
            order.insert(pos, (src, true));
            n_dup += 1;
        }
        let id = |k: usize| format!("p{:05}", out.len() + k + 1);
        let mut original_id = vec![String::new(); session.len()];
        for (k, &(i, dup)) in order.iter().enumerate() {
            if !dup {
                original_id[i] = id(k);
            }
        }
        let mut records = Vec::with_capacity(order.len());
        for (k, &(i, dup)) in order.iter().enumerate() {
            let mut p = session[i].clone();
            p.pair_id = id(k);
            if dup {
                p.class = PairClass::Duplicate;
                p.swap = rng.random_bool(0.5);
                p.duplicate_of = Some(original_id[i].clone());
            }
            records.push(p);
        }
        out.extend(records);
    }

    let summary = PairgenSummary {
        cross: out.iter().filter(|p| p.class == PairClass::CrossDegradation).count(),
        sanity: out.iter().filter(|p| p.class == PairClass::Sanity).count(),
        duplicate: n_dup,
        per_kind_pair,
        available_per_kind_pair: available_counts,
    };
    Ok((out, summary))
}

/// Opaque image token: reveals nothing about the path it stands for.
pub fn image_token(salt: u64, path: &str) -> String {
    let mut h = Sha256::new();
    h.update(salt.to_le_bytes());
    h.update(path.as_bytes());
    hex::encode(h.finalize())[..24].to_string()
}

/// Token salt derived from the pair manifest bytes.
pub fn manifest_salt(manifest: &[u8]) -> u64 {
    let d = Sha256::digest(manifest);
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossAgreement {
    pub n: u64,
    pub agree: u64,
    pub ties_excluded: u64,
    pub accuracy: Option<f64>,
    pub ci: Option<(f64, f64)>,
    pub p_value: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SanityCheck {
    pub n: u64,
    pub correct: u64,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DuplicateCheck {
    pub n: u64,
    pub consistent: u64,
    pub consistency: Option<f64>,
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub responses: u64,
    pub level: f64,
    pub tie_policy: String,
    pub cross: CrossAgreement,
    pub sanity: SanityCheck,
    pub duplicates: DuplicateCheck,
}

fn ratio(a: u64, n: u64) -> Option<f64> {
    (n > 0).then(|| a as f64 / n as f64)
}

/// Agreement of NRQ-predicted preference (higher score wins) with reader
/// choices on cross-degradation pairs. `scores` maps image paths to NRQ.
pub fn analyze(
    pairs: &[PairRecord],
    responses: &[ResponseRecord],
    scores: &HashMap<String, f64>,
    level: f64,
    p0: f64,
) -> Result<AgreementReport> {
    let by_id: HashMap<&str, &PairRecord> = pairs.iter().map(|p| (p.pair_id.as_str(), p)).collect();
    let mut seen: HashMap<(&str, &str), Choice> = HashMap::new();
    for (row, r) in responses.iter().enumerate() {
        if !by_id.contains_key(r.pair_id.as_str()) {
            return Err(Error::Schema {
                source_name: "responses".into(),
                row: row + 1,
                detail: format!("unknown pair `{}`", r.pair_id),
            });
        }
        if seen.insert((r.reader.as_str(), r.pair_id.as_str()), r.choice).is_some() {
            return Err(Error::Schema {
                source_name: "responses".into(),
                row: row + 1,
                detail: format!("second response by `{}` to `{}`", r.reader, r.pair_id),
            });
        }
    }
    let score = |path: &str| {
        scores
            .get(path)
            .copied()
            .ok_or_else(|| Error::InsufficientData(format!("no NRQ score for `{path}`")))
    };

    let (mut n, mut agree, mut ties) = (0u64, 0u64, 0u64);
    let (mut sanity_n, mut sanity_ok) = (0u64, 0u64);
    let (mut dup_n, mut dup_ok) = (0u64, 0u64);
    for r in responses {
        let p = by_id[r.pair_id.as_str()];
        match p.class {
            PairClass::CrossDegradation => {
                let (sa, sb) = (score(&p.a.path)?, score(&p.b.path)?);
                if sa == sb {
                    ties += 1;
                    continue;
                }
                let predicted = if sa > sb { Choice::A } else { Choice::B };
                n += 1;
                agree += u64::from(predicted == r.choice);
            }
            PairClass::Sanity => {
                let correct = if p.a.achieved_psnr > p.b.achieved_psnr { Choice::A } else { Choice::B };
                sanity_n += 1;
                sanity_ok += u64::from(correct == r.choice);
            }
            PairClass::Duplicate => {
                let original = p.duplicate_of.as_deref().unwrap_or_default();
                if let Some(&first) = seen.get(&(r.reader.as_str(), original)) {
                    dup_n += 1;
                    dup_ok += u64::from(first == r.choice);
                }
            }
        }
    }
    let (ci, p_value) = if n > 0 {
        (Some(wilson_ci(agree, n, level)?), Some(binomial_test_two_sided(agree, n, p0)?))
    } else {
        (None, None)
    };
    Ok(AgreementReport {
        responses: responses.len() as u64,
        level,
        tie_policy: "excluded".into(),
        cross: CrossAgreement {
            n,
            agree,
            ties_excluded: ties,
            accuracy: ratio(agree, n),
            ci,
            p_value,
        },
        sanity: SanityCheck {
            n: sanity_n,
            correct: sanity_ok,
            accuracy: ratio(sanity_ok, sanity_n),
        },
        duplicates: DuplicateCheck {
            n: dup_n,
            consistent: dup_ok,
            consistency: ratio(dup_ok, dup_n),
            flagged: dup_ok < dup_n,
        },
    })
}
