//! Rating-inconsistency audit over latent neighbourhoods.
//!
//! A reference building is flagged when one of its `k` nearest labeled
//! neighbours carries a level at least `spread_threshold` ordinal steps away
//! from its own. "Inconsistent" has no fixed definition beyond this rule:
//! the default threshold of 3 equals one full coarse band (e.g. B1 to C1).

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{fmt_f64, write_csv_with, write_json};
use crate::latent::{EmbeddingStore, Metric, DEFAULT_K};
use crate::preprocess::{quantile_sorted, PreprocessorState};
use crate::tabular::{BerLevel, Cell, DataTable, N_FINE};

pub const DEFAULT_SPREAD_THRESHOLD: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuditConfig {
    pub k: usize,
    /// Only neighbours within this latent distance count.
    pub radius: Option<f64>,
    pub spread_threshold: usize,
    pub metric: Metric,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            k: DEFAULT_K,
            radius: None,
            spread_threshold: DEFAULT_SPREAD_THRESHOLD,
            metric: Metric::Euclidean,
        }
    }
}

impl AuditConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("audit k must be at least 1".into()));
        }
        if self.spread_threshold == 0 {
            return Err(Error::Config("spread threshold must be at least 1".into()));
        }
        if let Some(r) = self.radius {
            if !(r >= 0.0) {
                return Err(Error::Config(format!("radius must be non-negative, got {r}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditNeighbor {
    pub id: String,
    pub level: BerLevel,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditFinding {
    pub ref_id: String,
    pub ref_level: BerLevel,
    /// Ascending distance.
    pub neighbors: Vec<AuditNeighbor>,
    /// Largest ordinal gap between the reference and a counted neighbour.
    pub spread: usize,
    pub flagged: bool,
}

impl AuditFinding {
    /// Re-evaluate the flag under another threshold.
    pub fn flagged_at(&self, threshold: usize) -> bool {
        self.spread >= threshold
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub n_audited: usize,
    pub n_flagged: usize,
    pub flag_rate: f64,
    /// Count of findings per spread value `0..=14`.
    pub spread_histogram: Vec<usize>,
    pub config: AuditConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub findings: Vec<AuditFinding>,
    pub summary: AuditSummary,
}

pub fn audit_one(store: &EmbeddingStore, ref_id: &str, config: &AuditConfig) -> Result<AuditFinding> {
    config.validate()?;
    let pos = store.position(ref_id)?;
    let ref_level = store
        .label(pos)
        .ok_or_else(|| Error::Data(format!("reference {ref_id:?} has no label")))?;
    let neighbors: Vec<AuditNeighbor> = store
        .knn_where(ref_id, config.k, config.metric, |i| store.label(i).is_some())?
        .into_iter()
        .filter(|n| config.radius.is_none_or(|r| n.distance <= r))
        .map(|n| AuditNeighbor {
            level: store.label(n.position).expect("filtered to labeled"),
            id: n.id,
            distance: n.distance,
        })
        .collect();
    let spread = neighbors.iter().map(|n| n.level.gap(ref_level)).max().unwrap_or(0);
    Ok(AuditFinding {
        ref_id: ref_id.to_string(),
        ref_level,
        neighbors,
        spread,
        flagged: spread >= config.spread_threshold,
    })
}

fn summarize(findings: &[AuditFinding], config: &AuditConfig) -> AuditSummary {
    let mut hist = vec![0usize; N_FINE];
    for f in findings {
        hist[f.spread] += 1;
    }
    let n_flagged = findings.iter().filter(|f| f.flagged).count();
    AuditSummary {
        n_audited: findings.len(),
        n_flagged,
        flag_rate: if findings.is_empty() {
            0.0
        } else {
            n_flagged as f64 / findings.len() as f64
        },
        spread_histogram: hist,
        config: *config,
    }
}

/// Audit every labeled record, ordered by id.
pub fn audit_all(store: &EmbeddingStore, config: &AuditConfig) -> Result<AuditReport> {
    config.validate()?;
    let mut ids: Vec<&String> = store
        .ids()
        .iter()
        .enumerate()
        .filter(|(i, _)| store.label(*i).is_some())
        .map(|(_, id)| id)
        .collect();
    ids.sort();
    let findings = ids
        .par_iter()
        .map(|id| audit_one(store, id, config))
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(&findings, config);
    Ok(AuditReport { findings, summary })
}

impl AuditReport {
    pub fn flagged_ids(&self) -> Vec<&str> {
        self.findings
            .iter()
            .filter(|f| f.flagged)
            .map(|f| f.ref_id.as_str())
            .collect()
    }

    pub fn n_flagged_at(&self, threshold: usize) -> usize {
        self.findings.iter().filter(|f| f.flagged_at(threshold)).count()
    }

    /// `ref_id,ref_level,spread,flagged,neighbor_ids,neighbor_levels,neighbor_distances`
    /// with the neighbour lists semicolon-joined.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv_with(path, |w| {
            w.write_record([
                "ref_id",
                "ref_level",
                "spread",
                "flagged",
                "neighbor_ids",
                "neighbor_levels",
                "neighbor_distances",
            ])?;
            for f in &self.findings {
                let join = |g: &dyn Fn(&AuditNeighbor) -> String| {
                    f.neighbors.iter().map(g).collect::<Vec<_>>().join(";")
                };
                w.write_record([
                    f.ref_id.clone(),
                    f.ref_level.fine().to_string(),
                    f.spread.to_string(),
                    f.flagged.to_string(),
                    join(&|n| n.id.clone()),
                    join(&|n| n.level.fine().to_string()),
                    join(&|n| fmt_f64(n.distance)),
                ])?;
            }
            Ok(())
        })
    }

    pub fn write_summary(&self, path: &Path) -> Result<()> {
        write_json(path, &self.summary)
    }
}

/// Recall and precision of the flagged set against known-noisy ids.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionScore {
    pub n_flagged: usize,
    pub n_noisy: usize,
    pub true_positives: usize,
    pub recall: f64,
    pub precision: f64,
    pub base_rate: f64,
}

pub fn score_detection(report: &AuditReport, noisy: &HashSet<String>) -> DetectionScore {
    score_flags(&report.flagged_ids(), report.findings.len(), noisy)
}

pub fn score_flags(flagged: &[&str], n_audited: usize, noisy: &HashSet<String>) -> DetectionScore {
    let tp = flagged.iter().filter(|id| noisy.contains(**id)).count();
    DetectionScore {
        n_flagged: flagged.len(),
        n_noisy: noisy.len(),
        true_positives: tp,
        recall: if noisy.is_empty() { 0.0 } else { tp as f64 / noisy.len() as f64 },
        precision: if flagged.is_empty() { 0.0 } else { tp as f64 / flagged.len() as f64 },
        base_rate: if n_audited == 0 { 0.0 } else { noisy.len() as f64 / n_audited as f64 },
    }
}

/// `(ref_id, flagged)` pairs from a report CSV written by [`AuditReport::write_csv`].
pub fn read_report_flags(path: &Path) -> Result<Vec<(String, bool)>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header = rdr.headers()?.clone();
    let pos = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("audit report lacks column {name:?}")))
    };
    let (id_pos, flag_pos) = (pos("ref_id")?, pos("flagged")?);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let flagged = match rec.get(flag_pos) {
            Some("true") => true,
            Some("false") => false,
            other => {
                return Err(Error::Row {
                    row: i + 1,
                    msg: format!("bad flagged value {other:?}"),
                })
            }
        };
        out.push((rec.get(id_pos).unwrap_or_default().to_string(), flagged));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OutlierMark {
    None,
    Low,
    High,
}

impl OutlierMark {
    fn as_str(self) -> &'static str {
        match self {
            OutlierMark::None => "",
            OutlierMark::Low => "low",
            OutlierMark::High => "high",
        }
    }
}

/// `(lower, upper)` IQR fences per numeric column.
pub type Fences = BTreeMap<String, (f64, f64)>;

pub fn fences_from_state(state: &PreprocessorState) -> Fences {
    state
        .numeric
        .iter()
        .map(|(k, v)| (k.clone(), (v.lower_fence, v.upper_fence)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RowRole {
    Reference,
    Neighbor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub role: RowRole,
    pub id: String,
    pub level: BerLevel,
    pub distance: f64,
    pub values: Vec<String>,
    pub marks: Vec<OutlierMark>,
}

/// Raw feature values of a reference building and its neighbours.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub columns: Vec<String>,
    pub rows: Vec<FeatureRow>,
}

pub fn feature_table(raw: &DataTable, finding: &AuditFinding, columns: &[String], fences: &Fences) -> Result<FeatureTable> {
    let schema = raw.schema();
    let col_idx = columns
        .iter()
        .map(|c| {
            schema
                .column_index(c)
                .ok_or_else(|| Error::Schema(format!("unknown column {c:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let members = std::iter::once((RowRole::Reference, &finding.ref_id, finding.ref_level, 0.0)).chain(
        finding
            .neighbors
            .iter()
            .map(|n| (RowRole::Neighbor, &n.id, n.level, n.distance)),
    );
    let mut rows = Vec::new();
    for (role, id, level, distance) in members {
        let pos = raw.index_of(id).ok_or_else(|| Error::UnknownId(id.clone()))?;
        let rec = &raw.rows()[pos];
        let mut values = Vec::with_capacity(columns.len());
        let mut marks = Vec::with_capacity(columns.len());
        for (name, &c) in columns.iter().zip(&col_idx) {
            let cell = &rec.values[c];
            values.push(match cell {
                Cell::Num(Some(v)) => fmt_f64(*v),
                Cell::Cat(Some(s)) => s.clone(),
                _ => String::new(),
            });
            let mark = match (cell.as_num(), fences.get(name)) {
                (Some(v), Some(&(_, hi))) if v > hi => OutlierMark::High,
                (Some(v), Some(&(lo, _))) if v < lo => OutlierMark::Low,
                _ => OutlierMark::None,
            };
            marks.push(mark);
        }
        rows.push(FeatureRow {
            role,
            id: id.clone(),
            level,
            distance,
            values,
            marks,
        });
    }
    Ok(FeatureTable {
        columns: columns.to_vec(),
        rows,
    })
}

impl FeatureTable {
    /// `role,id,level,distance,<col>,<col>_outlier,...`
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv_with(path, |w| {
            let mut header: Vec<String> = ["role", "id", "level", "distance"].iter().map(|s| s.to_string()).collect();
            for c in &self.columns {
                header.push(c.clone());
                header.push(format!("{c}_outlier"));
            }
            w.write_record(&header)?;
            for r in &self.rows {
                let mut rec = vec![
                    match r.role {
                        RowRole::Reference => "reference".to_string(),
                        RowRole::Neighbor => "neighbor".to_string(),
                    },
                    r.id.clone(),
                    r.level.fine().to_string(),
                    fmt_f64(r.distance),
                ];
                for (v, m) in r.values.iter().zip(&r.marks) {
                    rec.push(v.clone());
                    rec.push(m.as_str().to_string());
                }
                w.write_record(&rec)?;
            }
            Ok(())
        })
    }
}

/// Five-number summary of one numeric column.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoxStats {
    pub column: String,
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

pub fn box_plot_summary(raw: &DataTable, columns: &[String]) -> Result<Vec<BoxStats>> {
    let schema = raw.schema();
    columns
        .iter()
        .filter_map(|c| match schema.column_index(c) {
            None => Some(Err(Error::Schema(format!("unknown column {c:?}")))),
            Some(i) => {
                let mut v: Vec<f64> = raw.rows().iter().filter_map(|r| r.values[i].as_num()).collect();
                if v.is_empty() {
                    return None;
                }
                v.sort_by(f64::total_cmp);
                Some(Ok(BoxStats {
                    column: c.clone(),
                    n: v.len(),
                    min: v[0],
                    q1: quantile_sorted(&v, 0.25),
                    median: quantile_sorted(&v, 0.5),
                    q3: quantile_sorted(&v, 0.75),
                    max: v[v.len() - 1],
                }))
            }
        })
        .collect()
}

pub fn write_box_plot_csv(path: &Path, stats: &[BoxStats]) -> Result<()> {
    write_csv_with(path, |w| {
        w.write_record(["column", "n", "min", "q1", "median", "q3", "max"])?;
        for s in stats {
            w.write_record([
                s.column.clone(),
                s.n.to_string(),
                fmt_f64(s.min),
                fmt_f64(s.q1),
                fmt_f64(s.median),
                fmt_f64(s.q3),
                fmt_f64(s.max),
            ])?;
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use crate::tabular::{parse_ber, ColumnSpec, FeatureSchema, Record};
    use proptest::prelude::*;

    fn lvl(s: &str) -> BerLevel {
        parse_ber(s).unwrap()
    }

    fn store(points: &[(&str, f64, Option<&str>)]) -> EmbeddingStore {
        let ids = points.iter().map(|p| p.0.to_string()).collect();
        let m = Matrix::from_rows(&points.iter().map(|p| vec![p.1, 0.0]).collect::<Vec<_>>()).unwrap();
        let labels = points.iter().map(|p| p.2.map(lvl)).collect();
        EmbeddingStore::new(ids, m, Some(labels)).unwrap()
    }

    #[test]
    fn a3_with_d1_neighbor_is_flagged() {
        let s = store(&[("ref", 0.0, Some("A3")), ("n1", 0.1, Some("A3")), ("n2", 0.2, Some("D1"))]);
        let f = audit_one(&s, "ref", &AuditConfig::default()).unwrap();
        assert_eq!(f.spread, 7);
        assert!(f.flagged);
    }

    #[test]
    fn a3_with_near_identical_c2_is_flagged() {
        let s = store(&[("ref", 0.0, Some("A3")), ("twin", 1e-9, Some("C2"))]);
        let f = audit_one(&s, "ref", &AuditConfig::default()).unwrap();
        assert_eq!(f.neighbors[0].id, "twin");
        // A3 is ordinal 2, C2 ordinal 7.
        assert_eq!(f.spread, 5);
        assert!(f.flagged);
    }

    #[test]
    fn same_level_unflagged() {
        let s = store(&[("a", 0.0, Some("B2")), ("b", 1.0, Some("B2")), ("c", 2.0, Some("B2"))]);
        let f = audit_one(&s, "a", &AuditConfig::default()).unwrap();
        assert_eq!(f.spread, 0);
        assert!(!f.flagged);
    }

    #[test]
    fn unlabeled_reference_errors_and_unlabeled_neighbors_skipped() {
        let s = store(&[("a", 0.0, None), ("b", 0.1, None), ("c", 5.0, Some("G"))]);
        assert!(audit_one(&s, "a", &AuditConfig::default()).is_err());
        let f = audit_one(&s, "c", &AuditConfig::default()).unwrap();
        assert!(f.neighbors.is_empty());
        assert_eq!(f.spread, 0);
        assert!(!f.flagged);
        let report = audit_all(&s, &AuditConfig::default()).unwrap();
        assert_eq!(report.findings.len(), 1);
    }

    #[test]
    fn radius_filters_neighbors() {
        let s = store(&[("a", 0.0, Some("A1")), ("b", 0.5, Some("A2")), ("c", 3.0, Some("G"))]);
        let cfg = AuditConfig {
            radius: Some(1.0),
            ..AuditConfig::default()
        };
        let f = audit_one(&s, "a", &cfg).unwrap();
        assert_eq!(f.neighbors.len(), 1);
        assert_eq!(f.spread, 1);
        assert!(!f.flagged);
    }

    #[test]
    fn identical_vectors_same_label_zero_flags() {
        let pts: Vec<(String, f64, Option<&str>)> = (0..12).map(|i| (format!("r{i:02}"), 1.0, Some("B2"))).collect();
        let s = store(&pts.iter().map(|(a, b, c)| (a.as_str(), *b, *c)).collect::<Vec<_>>());
        let r = audit_all(&s, &AuditConfig::default()).unwrap();
        assert_eq!(r.summary.n_flagged, 0);
        assert_eq!(r.summary.spread_histogram[0], 12);
    }

    #[test]
    fn identical_vectors_full_scale() {
        let pts: Vec<(String, f64, Option<&str>)> = BerLevel::all()
            .map(|l| (format!("r{:02}", l.ordinal()), 1.0, Some(l.fine())))
            .collect();
        let s = store(&pts.iter().map(|(a, b, c)| (a.as_str(), *b, *c)).collect::<Vec<_>>());
        // every other record is a neighbour, so each reference sees both scale ends
        let cfg = AuditConfig {
            k: 14,
            ..AuditConfig::default()
        };
        let r = audit_all(&s, &cfg).unwrap();
        assert_eq!(r.summary.n_flagged, 15);
        for f in &r.findings {
            let o = f.ref_level.ordinal();
            assert_eq!(f.spread, o.max(14 - o));
        }
        assert_eq!(r.findings[0].spread, 14);
        assert_eq!(r.findings[14].spread, 14);
    }

    #[test]
    fn report_files() {
        let s = store(&[("a", 0.0, Some("A3")), ("b", 0.1, Some("D1")), ("c", 0.3, Some("A2"))]);
        let r = audit_all(&s, &AuditConfig { k: 2, ..AuditConfig::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("report.csv");
        r.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let first = text.lines().nth(1).unwrap();
        assert_eq!(first, "a,A3,7,true,b;c,D1;A2,0.1;0.3");
        let j = dir.path().join("summary.json");
        r.write_summary(&j).unwrap();
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&j).unwrap()).unwrap();
        assert_eq!(v["n_audited"], 3);
    }

    fn raw_table() -> DataTable {
        let schema = FeatureSchema::new(
            vec![ColumnSpec::numeric("water"), ColumnSpec::categorical("btype").group_key()],
            "id",
            "ber",
        )
        .unwrap();
        let rows = (0..12)
            .map(|i| Record {
                id: format!("r{i:02}"),
                values: vec![
                    Cell::Num(Some(if i == 3 { 9000.0 } else { 100.0 + i as f64 })),
                    Cell::Cat(Some("house".into())),
                ],
                label: Some(lvl("B1")),
            })
            .collect();
        DataTable::new(schema, rows).unwrap()
    }

    #[test]
    fn feature_table_rows_and_marks() {
        let raw = raw_table();
        let state = crate::preprocess::fit(&raw, 1.5).unwrap();
        let finding = AuditFinding {
            ref_id: "r00".into(),
            ref_level: lvl("A3"),
            neighbors: (1..11)
                .map(|i| AuditNeighbor {
                    id: format!("r{i:02}"),
                    level: lvl("D1"),
                    distance: i as f64,
                })
                .collect(),
            spread: 7,
            flagged: true,
        };
        let cols = vec!["water".to_string(), "btype".to_string()];
        let t = feature_table(&raw, &finding, &cols, &fences_from_state(&state)).unwrap();
        assert_eq!(t.rows.len(), 11);
        assert_eq!(t.rows[0].role, RowRole::Reference);
        assert_eq!(t.rows[3].marks[0], OutlierMark::High);
        assert_eq!(t.rows[2].marks[0], OutlierMark::None);

        let mut missing = finding.clone();
        missing.neighbors[0].id = "nope".into();
        assert!(feature_table(&raw, &missing, &cols, &Fences::new()).is_err());
    }

    #[test]
    fn box_stats() {
        let raw = raw_table();
        let s = box_plot_summary(&raw, &["water".to_string()]).unwrap();
        assert_eq!(s[0].n, 12);
        assert_eq!(s[0].min, 100.0);
        assert_eq!(s[0].max, 9000.0);
        assert!(s[0].q1 <= s[0].median && s[0].median <= s[0].q3);
    }

    proptest! {
        #[test]
        fn flag_count_monotone_in_threshold(
            xs in proptest::collection::vec((0.0f64..10.0, 0usize..15), 3..40),
        ) {
            let ids: Vec<String> = (0..xs.len()).map(|i| format!("r{i:03}")).collect();
            let m = Matrix::from_rows(&xs.iter().map(|(x, _)| vec![*x]).collect::<Vec<_>>()).unwrap();
            let labels = xs.iter().map(|(_, l)| BerLevel::from_ordinal(*l)).collect();
            let s = EmbeddingStore::new(ids, m, Some(labels)).unwrap();
            let mut prev = usize::MAX;
            for t in 1..=14 {
                let r = audit_all(&s, &AuditConfig { k: 5, spread_threshold: t, ..AuditConfig::default() }).unwrap();
                prop_assert!(r.summary.n_flagged <= prev);
                prop_assert_eq!(r.summary.n_flagged, r.findings.iter().filter(|f| f.flagged).count());
                prev = r.summary.n_flagged;
            }
        }

        #[test]
        fn spread_symmetric(a in 0usize..15, b in 0usize..15) {
            let (la, lb) = (BerLevel::from_ordinal(a).unwrap(), BerLevel::from_ordinal(b).unwrap());
            prop_assert_eq!(la.gap(lb), lb.gap(la));
        }
    }

    #[test]
    fn report_flags_round_trip() {
        let s = store(&[("a", 0.0, Some("A1")), ("b", 0.1, Some("D1")), ("c", 0.2, Some("A2"))]);
        let report = audit_all(&s, &AuditConfig { k: 1, ..AuditConfig::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        report.write_csv(&path).unwrap();
        let flags = read_report_flags(&path).unwrap();
        let expect: Vec<(String, bool)> = report.findings.iter().map(|f| (f.ref_id.clone(), f.flagged)).collect();
        assert_eq!(flags, expect);
        let noisy: HashSet<String> = ["b".to_string()].into();
        let ids: Vec<&str> = flags.iter().filter(|f| f.1).map(|f| f.0.as_str()).collect();
        assert_eq!(score_flags(&ids, flags.len(), &noisy), score_detection(&report, &noisy));
    }
}
