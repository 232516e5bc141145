use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{iqr, kendall_tau, kendall_w, spearman};
use crate::error::{Error, Result};
use crate::store::{config_hash, read_json, read_jsonl, resolve};
use crate::study::{analyze, PairRecord, ResponseRecord};

pub const QUANTILE_METHOD: &str = "inclusive-linear";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    TaskAnchor,
    CrossOrgan,
    NrMonotonicity,
    AfcAgreement,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::TaskAnchor => "task-anchor",
            Protocol::CrossOrgan => "cross-organ",
            Protocol::NrMonotonicity => "nr-monotonicity",
            Protocol::AfcAgreement => "afc-agreement",
        }
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Protocol::TaskAnchor,
            Protocol::CrossOrgan,
            Protocol::NrMonotonicity,
            Protocol::AfcAgreement,
        ]
        .into_iter()
        .find(|p| p.name() == s)
        .ok_or_else(|| Error::Parameter(format!("unknown protocol `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Confidence level of interval estimates.
    pub level: f64,
    /// Null proportion of the binomial test.
    pub p0: f64,
    /// Seeds of the runs that produced the inputs, recorded for provenance.
    #[serde(default)]
    pub seeds: Vec<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            level: 0.95,
            p0: 0.5,
            seeds: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionStats {
    pub condition: String,
    pub n: usize,
    pub stats: BTreeMap<String, Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
    pub rows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub inputs: Vec<InputDigest>,
    pub config: EvalConfig,
    pub config_hash: String,
    pub quantile_method: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub protocol: Protocol,
    pub conditions: Vec<ConditionStats>,
    pub aggregate: BTreeMap<String, Value>,
    pub provenance: Provenance,
}

fn fmt_value(v: &Value) -> String {
    match v {
        Value::Number(n) => match n.as_f64() {
            Some(f) if n.is_f64() => format!("{f:.4}"),
            _ => n.to_string(),
        },
        Value::Null => "-".into(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl ProtocolReport {
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {}\n", self.protocol.name());
        let _ = writeln!(
            s,
            "config `{}`, quantiles {}\n",
            self.provenance.config_hash, self.provenance.quantile_method
        );
        let keys: BTreeSet<&String> = self.conditions.iter().flat_map(|c| c.stats.keys()).collect();
        if !self.conditions.is_empty() {
            let _ = write!(s, "| condition | n |");
            for k in &keys {
                let _ = write!(s, " {k} |");
            }
            let _ = write!(s, "\n|---|---|");
            for _ in &keys {
                let _ = write!(s, "---|");
            }
            s.push('\n');
            for c in &self.conditions {
                let _ = write!(s, "| {} | {} |", c.condition, c.n);
                for k in &keys {
                    let _ = write!(s, " {} |", c.stats.get(*k).map(fmt_value).unwrap_or_else(|| "-".into()));
                }
                s.push('\n');
            }
            s.push('\n');
        }
        let _ = writeln!(s, "| aggregate | value |\n|---|---|");
        for (k, v) in &self.aggregate {
            let _ = writeln!(s, "| {k} | {} |", fmt_value(v));
        }
        s.push_str("\ninputs:\n");
        for i in &self.provenance.inputs {
            let _ = writeln!(s, "- {} ({} rows, sha256 {})", i.path, i.rows, &i.sha256[..16]);
        }
        s
    }

    /// One-line summary of the aggregate statistics.
    pub fn summary_row(&self) -> String {
        let parts: Vec<String> = self
            .aggregate
            .iter()
            .map(|(k, v)| format!("{k}={}", fmt_value(v)))
            .collect();
        format!("{} {}", self.protocol.name(), parts.join(" "))
    }
}

/// One row of a task-anchor CSV. `anchor` is optional; without it every
/// input file is one anchor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskAnchorRow {
    pub image_id: String,
    pub distortion: String,
    pub theta: f64,
    pub metric_value: f64,
    pub anchor_damage: f64,
    #[serde(default)]
    pub anchor: Option<String>,
}

/// One row of an NRQ score CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NrScoreRow {
    pub image_id: String,
    pub organ: String,
    pub distortion: String,
    pub severity_rank: f64,
    pub nrq: f64,
}

/// One row of a cross-organ CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossOrganRow {
    pub organ: String,
    pub distortion: String,
    pub metric_value: f64,
}

/// Rows whose numeric fields must be finite.
pub trait CsvRow {
    fn numbers(&self) -> Vec<(&'static str, f64)>;
}

impl CsvRow for TaskAnchorRow {
    fn numbers(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("theta", self.theta),
            ("metric_value", self.metric_value),
            ("anchor_damage", self.anchor_damage),
        ]
    }
}

impl CsvRow for NrScoreRow {
    fn numbers(&self) -> Vec<(&'static str, f64)> {
        vec![("severity_rank", self.severity_rank), ("nrq", self.nrq)]
    }
}

impl CsvRow for CrossOrganRow {
    fn numbers(&self) -> Vec<(&'static str, f64)> {
        vec![("metric_value", self.metric_value)]
    }
}

/// Parses CSV with a header row. Schema errors carry the 1-based line.
pub fn read_csv<T: DeserializeOwned + CsvRow>(text: &str, source_name: &str) -> Result<Vec<T>> {
    let schema = |row: usize, detail: String| Error::Schema {
        source_name: source_name.to_string(),
        row,
        detail,
    };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| schema(1, e.to_string()))?.clone();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| schema(e.position().map_or(1, |p| p.line() as usize), e.to_string()))?;
        let line = rec.position().map_or(1, |p| p.line() as usize);
        let row: T = rec.deserialize(Some(&headers)).map_err(|e| schema(line, e.to_string()))?;
        if let Some((field, v)) = row.numbers().into_iter().find(|(_, v)| !v.is_finite()) {
            return Err(schema(line, format!("{field} is not finite ({v})")));
        }
        out.push(row);
    }
    Ok(out)
}

fn num(v: f64) -> Value {
    json!(v)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Per-anchor Spearman and Kendall correlation between metric values and
/// anchor damage. `files` pairs a default anchor name with its rows.
pub fn task_anchor(files: &[(String, Vec<TaskAnchorRow>)]) -> Result<(Vec<ConditionStats>, BTreeMap<String, Value>)> {
    let mut by_anchor: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (default, rows) in files {
        for r in rows {
            let name = r.anchor.clone().unwrap_or_else(|| default.clone());
            let e = by_anchor.entry(name).or_default();
            e.0.push(r.metric_value);
            e.1.push(r.anchor_damage);
        }
    }
    if by_anchor.is_empty() {
        return Err(Error::InsufficientData("task-anchor input has no rows".into()));
    }
    let mut conditions = Vec::new();
    let (mut rhos, mut taus) = (Vec::new(), Vec::new());
    for (anchor, (m, d)) in &by_anchor {
        let rho = spearman(m, d).map_err(|e| context(e, anchor))?;
        let tau = kendall_tau(m, d).map_err(|e| context(e, anchor))?;
        rhos.push(rho);
        taus.push(tau);
        conditions.push(ConditionStats {
            condition: anchor.clone(),
            n: m.len(),
            stats: BTreeMap::from([("spearman".into(), num(rho)), ("kendall_tau".into(), num(tau))]),
        });
    }
    let aggregate = BTreeMap::from([
        ("anchors".into(), json!(by_anchor.len())),
        ("mean_spearman".into(), num(mean(&rhos))),
        ("mean_kendall_tau".into(), num(mean(&taus))),
    ]);
    Ok((conditions, aggregate))
}

fn context(e: Error, condition: &str) -> Error {
    match e {
        Error::Undefined(d) => Error::Undefined(format!("{condition}: {d}")),
        Error::InsufficientData(d) => Error::InsufficientData(format!("{condition}: {d}")),
        other => other,
    }
}

/// Kendall W over per-organ rankings of the distortions (by mean metric
/// value), plus the IQR across organs of each distortion's mean.
pub fn cross_organ(rows: &[CrossOrganRow]) -> Result<(Vec<ConditionStats>, BTreeMap<String, Value>)> {
    let mut cells: BTreeMap<(&str, &str), Vec<f64>> = BTreeMap::new();
    let mut organs = BTreeSet::new();
    let mut distortions = BTreeSet::new();
    for r in rows {
        cells.entry((&r.organ, &r.distortion)).or_default().push(r.metric_value);
        organs.insert(r.organ.as_str());
        distortions.insert(r.distortion.as_str());
    }
    let mut rankings = Vec::new();
    for &o in &organs {
        let mut scores = Vec::new();
        for &d in &distortions {
            let v = cells.get(&(o, d)).ok_or_else(|| {
                Error::InsufficientData(format!("organ `{o}` has no rows for distortion `{d}`"))
            })?;
            scores.push(mean(v));
        }
        rankings.push(scores);
    }
    let w = kendall_w(&rankings)?;
    let mut conditions = Vec::new();
    let mut iqrs = Vec::new();
    for (j, &d) in distortions.iter().enumerate() {
        let across: Vec<f64> = rankings.iter().map(|r| r[j]).collect();
        let spread = iqr(&across)?;
        iqrs.push(spread);
        let n = organs.iter().map(|&o| cells[&(o, d)].len()).sum();
        conditions.push(ConditionStats {
            condition: d.to_string(),
            n,
            stats: BTreeMap::from([
                ("iqr".into(), num(spread)),
                ("mean".into(), num(mean(&across))),
            ]),
        });
    }
    let aggregate = BTreeMap::from([
        ("kendall_w".into(), num(w)),
        ("organs".into(), json!(organs.len())),
        ("distortions".into(), json!(distortions.len())),
        ("mean_iqr".into(), num(mean(&iqrs))),
    ]);
    Ok((conditions, aggregate))
}

/// Per (organ, distortion) Spearman correlation between NRQ and severity
/// rank. NRQ is higher-is-better and severity higher-is-worse, so the
/// positively oriented agreement is `-rho`.
pub fn nr_monotonicity(rows: &[NrScoreRow]) -> Result<(Vec<ConditionStats>, BTreeMap<String, Value>)> {
    let mut groups: BTreeMap<(&str, &str), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        let e = groups.entry((&r.organ, &r.distortion)).or_default();
        e.0.push(r.nrq);
        e.1.push(r.severity_rank);
    }
    if groups.is_empty() {
        return Err(Error::InsufficientData("nr-monotonicity input has no rows".into()));
    }
    let mut conditions = Vec::new();
    let mut rhos = Vec::new();
    for ((organ, kind), (nrq, sev)) in &groups {
        let name = format!("{organ}/{kind}");
        let rho = spearman(nrq, sev).map_err(|e| context(e, &name))?;
        rhos.push(rho);
        conditions.push(ConditionStats {
            condition: name,
            n: nrq.len(),
            stats: BTreeMap::from([("spearman".into(), num(rho)), ("agreement".into(), num(-rho))]),
        });
    }
    let m = mean(&rhos);
    let aggregate = BTreeMap::from([
        ("conditions".into(), json!(groups.len())),
        ("mean_spearman".into(), num(m)),
        ("mean_agreement".into(), num(-m)),
    ]);
    Ok((conditions, aggregate))
}

/// NRQ score line as printed by the scoring command; extra fields ignored.
#[derive(Deserialize)]
struct ScoreLine {
    path: String,
    #[serde(rename = "final")]
    final_score: f64,
}

fn digest(path: &Path, rows: usize) -> Result<InputDigest> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(InputDigest {
        path: path.display().to_string(),
        sha256: hex::encode(Sha256::digest(&bytes)),
        rows,
    })
}

fn canonical(p: &Path) -> String {
    std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf()).display().to_string()
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn afc(inputs: &[PathBuf], cfg: &EvalConfig) -> Result<(Vec<ConditionStats>, BTreeMap<String, Value>, Vec<InputDigest>)> {
    let [pairs_path, responses_path, scores_path] = inputs else {
        return Err(Error::Parameter(
            "afc-agreement takes three inputs: pair manifest, response log, NRQ scores".into(),
        ));
    };
    let mut pairs: Vec<PairRecord> = read_json(pairs_path)?;
    let responses: Vec<ResponseRecord> = read_jsonl(responses_path)?;
    let lines: Vec<ScoreLine> = read_jsonl(scores_path)?;
    // pair images are relative to the pair manifest, scored paths to the
    // working directory; both are compared in canonical form
    for p in pairs.iter_mut() {
        for img in [&mut p.a, &mut p.b] {
            img.path = canonical(&resolve(pairs_path, &img.path));
        }
    }
    let scores: HashMap<String, f64> = lines
        .iter()
        .map(|l| (canonical(Path::new(&l.path)), l.final_score))
        .collect();
    let rep = analyze(&pairs, &responses, &scores, cfg.level, cfg.p0)?;
    let opt = |v: Option<f64>| v.map(num).unwrap_or(Value::Null);
    let conditions = vec![
        ConditionStats {
            condition: "cross-degradation".into(),
            n: rep.cross.n as usize,
            stats: BTreeMap::from([
                ("agree".into(), json!(rep.cross.agree)),
                ("accuracy".into(), opt(rep.cross.accuracy)),
                ("ci_low".into(), opt(rep.cross.ci.map(|c| c.0))),
                ("ci_high".into(), opt(rep.cross.ci.map(|c| c.1))),
                ("p_value".into(), opt(rep.cross.p_value)),
                ("ties_excluded".into(), json!(rep.cross.ties_excluded)),
            ]),
        },
        ConditionStats {
            condition: "sanity".into(),
            n: rep.sanity.n as usize,
            stats: BTreeMap::from([
                ("agree".into(), json!(rep.sanity.correct)),
                ("accuracy".into(), opt(rep.sanity.accuracy)),
            ]),
        },
        ConditionStats {
            condition: "duplicate".into(),
            n: rep.duplicates.n as usize,
            stats: BTreeMap::from([
                ("agree".into(), json!(rep.duplicates.consistent)),
                ("accuracy".into(), opt(rep.duplicates.consistency)),
                ("flagged".into(), json!(rep.duplicates.flagged)),
            ]),
        },
    ];
    let aggregate = BTreeMap::from([
        ("accuracy".into(), opt(rep.cross.accuracy)),
        ("ci_low".into(), opt(rep.cross.ci.map(|c| c.0))),
        ("ci_high".into(), opt(rep.cross.ci.map(|c| c.1))),
        ("p_value".into(), opt(rep.cross.p_value)),
        ("tie_policy".into(), json!(rep.tie_policy)),
    ]);
    let digests = vec![
        digest(pairs_path, pairs.len())?,
        digest(responses_path, responses.len())?,
        digest(scores_path, lines.len())?,
    ];
    Ok((conditions, aggregate, digests))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Runs one evaluation protocol over input files.
///
/// - task-anchor: one or more CSVs (`image_id,distortion,theta,metric_value,anchor_damage[,anchor]`)
/// - cross-organ: one CSV (`organ,distortion,metric_value`)
/// - nr-monotonicity: one CSV (`image_id,organ,distortion,severity_rank,nrq`)
/// - afc-agreement: pair manifest (JSON), response log (JSON lines), NRQ scores (JSON lines)
pub fn run_protocol(protocol: Protocol, inputs: &[PathBuf], cfg: &EvalConfig) -> Result<ProtocolReport> {
    if inputs.is_empty() {
        return Err(Error::Parameter(format!("{} needs at least one input", protocol.name())));
    }
    let single = |inputs: &[PathBuf]| -> Result<PathBuf> {
        match inputs {
            [p] => Ok(p.clone()),
            _ => Err(Error::Parameter(format!("{} takes exactly one input", protocol.name()))),
        }
    };
    let (conditions, aggregate, digests) = match protocol {
        Protocol::TaskAnchor => {
            let mut files = Vec::new();
            let mut digests = Vec::new();
            for p in inputs {
                let rows: Vec<TaskAnchorRow> = read_csv(&read_text(p)?, &p.display().to_string())?;
                digests.push(digest(p, rows.len())?);
                files.push((stem(p), rows));
            }
            let (c, a) = task_anchor(&files)?;
            (c, a, digests)
        }
        Protocol::CrossOrgan => {
            let p = single(inputs)?;
            let rows: Vec<CrossOrganRow> = read_csv(&read_text(&p)?, &p.display().to_string())?;
            let (c, a) = cross_organ(&rows)?;
            (c, a, vec![digest(&p, rows.len())?])
        }
        Protocol::NrMonotonicity => {
            let p = single(inputs)?;
            let rows: Vec<NrScoreRow> = read_csv(&read_text(&p)?, &p.display().to_string())?;
            let (c, a) = nr_monotonicity(&rows)?;
            (c, a, vec![digest(&p, rows.len())?])
        }
        Protocol::AfcAgreement => afc(inputs, cfg)?,
    };
    Ok(ProtocolReport {
        protocol,
        conditions,
        aggregate,
        provenance: Provenance {
            inputs: digests,
            config: cfg.clone(),
            config_hash: config_hash(cfg),
            quantile_method: QUANTILE_METHOD.into(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_errors_name_the_line() {
        let text = "image_id,organ,distortion,severity_rank,nrq\na,liver,blur,1,0.5\nb,liver,blur,two,0.4\n";
        let err = read_csv::<NrScoreRow>(text, "scores.csv").unwrap_err();
        match err {
            Error::Schema { row, source_name, .. } => {
                assert_eq!(row, 3);
                assert_eq!(source_name, "scores.csv");
            }
            e => panic!("{e}"),
        }
        let text = "image_id,organ,distortion,nrq\na,liver,blur,0.5\n";
        assert!(matches!(read_csv::<NrScoreRow>(text, "s"), Err(Error::Schema { .. })));
        let text = "organ,distortion,metric_value\nliver,blur,NaN\n";
        assert!(matches!(read_csv::<CrossOrganRow>(text, "s"), Err(Error::Schema { row: 2, .. })));
    }

    #[test]
    fn optional_anchor_column() {
        let text = "image_id,distortion,theta,metric_value,anchor_damage\nx,blur,1,0.2,0.1\n";
        let rows: Vec<TaskAnchorRow> = read_csv(text, "a").unwrap();
        assert_eq!(rows[0].anchor, None);
        let text = "image_id,distortion,theta,metric_value,anchor_damage,anchor\nx,blur,1,0.2,0.1,seg\n";
        let rows: Vec<TaskAnchorRow> = read_csv(text, "a").unwrap();
        assert_eq!(rows[0].anchor.as_deref(), Some("seg"));
    }

    #[test]
    fn oracle_score_gives_perfect_monotonicity() {
        let mut rows = Vec::new();
        for organ in ["liver", "kidney"] {
            for kind in ["blur", "speckle"] {
                for rank in 1..=5 {
                    let theta = rank as f64 * 0.3;
                    rows.push(NrScoreRow {
                        image_id: format!("{organ}{kind}{rank}"),
                        organ: organ.into(),
                        distortion: kind.into(),
                        severity_rank: rank as f64,
                        nrq: -theta,
                    });
                }
            }
        }
        let (c, a) = nr_monotonicity(&rows).unwrap();
        assert_eq!(c.len(), 4);
        assert!(c.iter().all(|c| c.stats["spearman"] == json!(-1.0)));
        assert_eq!(a["mean_agreement"], json!(1.0));
    }

    #[test]
    fn shared_ordering_gives_unit_w() {
        let mut rows = Vec::new();
        for organ in ["a", "b", "c"] {
            for (i, d) in ["blur", "noise", "shadow", "clip"].iter().enumerate() {
                rows.push(CrossOrganRow {
                    organ: organ.into(),
                    distortion: d.to_string(),
                    metric_value: i as f64,
                });
            }
        }
        let (c, a) = cross_organ(&rows).unwrap();
        assert_eq!(a["kendall_w"], json!(1.0));
        assert!(c.iter().all(|c| c.stats["iqr"] == json!(0.0)));
        rows.pop();
        assert!(matches!(cross_organ(&rows), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn markdown_has_one_row_per_condition() {
        let rows: Vec<TaskAnchorRow> = (0..5)
            .map(|i| TaskAnchorRow {
                image_id: i.to_string(),
                distortion: "blur".into(),
                theta: i as f64,
                metric_value: i as f64,
                anchor_damage: (i * i) as f64,
                anchor: None,
            })
            .collect();
        let (c, a) = task_anchor(&[("seg".into(), rows)]).unwrap();
        assert_eq!(a["mean_spearman"], json!(1.0));
        let report = ProtocolReport {
            protocol: Protocol::TaskAnchor,
            conditions: c,
            aggregate: a,
            provenance: Provenance {
                inputs: vec![],
                config: EvalConfig::default(),
                config_hash: config_hash(&EvalConfig::default()),
                quantile_method: QUANTILE_METHOD.into(),
            },
        };
        let md = report.to_markdown();
        assert!(md.contains("| seg | 5 | 1.0000 | 1.0000 |"), "{md}");
        assert!(report.summary_row().starts_with("task-anchor anchors=1"));
    }
}
