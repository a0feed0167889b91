//! Outlier clipping, building-type-grouped imputation, standard scaling and
//! one-hot encoding. Statistics are fitted on a training table and replayed
//! on any table with the same schema.
//!
//! Per-row transform order: clip numerics to the IQR fences, impute missing
//! numerics with the group mean (global mean for unseen groups), impute
//! missing categoricals with the group mode, standardize numerics, one-hot
//! encode categoricals. Encoded column order is every numeric column in
//! schema order followed by the one-hot blocks in schema order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_to_string, write_json};
use crate::matrix::Matrix;
use crate::tabular::{Cell, ColumnKind, DataTable, FeatureSchema};

pub const STATE_VERSION: u32 = 1;
pub const DEFAULT_IQR_MULTIPLIER: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericStats {
    pub q1: f64,
    pub q3: f64,
    pub lower_fence: f64,
    pub upper_fence: f64,
    pub group_means: BTreeMap<String, f64>,
    pub global_mean: f64,
    pub scale_mean: f64,
    pub scale_std: f64,
    /// Zero variance after clipping and imputation; `scale_std` is forced to 1.
    pub constant: bool,
}

impl NumericStats {
    pub fn clip(&self, x: f64) -> f64 {
        x.clamp(self.lower_fence, self.upper_fence)
    }

    fn impute(&self, group: Option<&str>) -> f64 {
        group
            .and_then(|g| self.group_means.get(g))
            .copied()
            .unwrap_or(self.global_mean)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalStats {
    pub group_modes: BTreeMap<String, String>,
    pub global_mode: String,
    /// Sorted, non-empty.
    pub vocabulary: Vec<String>,
}

impl CategoricalStats {
    fn impute(&self, group: Option<&str>) -> &str {
        group
            .and_then(|g| self.group_modes.get(g))
            .unwrap_or(&self.global_mode)
    }
}

/// Fitted preprocessing statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessorState {
    pub version: u32,
    pub schema_hash: String,
    pub iqr_multiplier: f64,
    pub fitted_on: usize,
    pub column_order: Vec<String>,
    pub numeric: BTreeMap<String, NumericStats>,
    pub categorical: BTreeMap<String, CategoricalStats>,
}

/// Counts of categories never seen during fit, per column.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TransformSummary {
    pub unseen: BTreeMap<String, usize>,
}

impl TransformSummary {
    pub fn total_unseen(&self) -> usize {
        self.unseen.values().sum()
    }
}

/// Linear-interpolation quantile at position `p·(n−1)` of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

fn sorted_copy(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Most frequent token; ties go to the lexicographically smallest.
fn mode<'a>(tokens: impl Iterator<Item = &'a str>) -> Option<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in tokens {
        *counts.entry(t).or_default() += 1;
    }
    let mut best: Option<(&str, usize)> = None;
    for (t, c) in counts {
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((t, c));
        }
    }
    best.map(|(t, _)| t.to_string())
}

fn group_of(row: &[Cell], group_idx: Option<usize>) -> Option<&str> {
    group_idx.and_then(|g| row[g].as_cat())
}

pub fn fit(train: &DataTable, multiplier: f64) -> Result<PreprocessorState> {
    if train.is_empty() {
        return Err(Error::Data("cannot fit preprocessing on an empty table".into()));
    }
    if !(multiplier.is_finite() && multiplier >= 0.0) {
        return Err(Error::Config(format!(
            "IQR multiplier must be finite and non-negative, got {multiplier}"
        )));
    }
    let schema = train.schema();
    let group_idx = schema.group_key_index();
    if group_idx.is_none() {
        return Err(Error::Schema(
            "preprocessing needs a group_key (building type) column".into(),
        ));
    }
    let rows = train.rows();

    let mut numeric = BTreeMap::new();
    let mut categorical = BTreeMap::new();
    for (c, col) in schema.columns.iter().enumerate() {
        match col.kind {
            ColumnKind::Numeric => {
                let present: Vec<f64> = rows.iter().filter_map(|r| r.values[c].as_num()).collect();
                if present.is_empty() {
                    return Err(Error::Data(format!(
                        "numeric column {:?} is entirely missing",
                        col.name
                    )));
                }
                let sorted = sorted_copy(&present);
                let q1 = quantile_sorted(&sorted, 0.25);
                let q3 = quantile_sorted(&sorted, 0.75);
                let iqr = q3 - q1;
                let lower_fence = q1 - multiplier * iqr;
                let upper_fence = q3 + multiplier * iqr;
                let clip = |x: f64| x.clamp(lower_fence, upper_fence);

                let mut by_group: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
                let mut clipped_present = Vec::with_capacity(present.len());
                for r in rows {
                    if let Some(v) = r.values[c].as_num() {
                        clipped_present.push(clip(v));
                        if let Some(g) = group_of(&r.values, group_idx) {
                            by_group.entry(g).or_default().push(clip(v));
                        }
                    }
                }
                let global_mean = mean(&clipped_present);
                let group_means: BTreeMap<String, f64> = by_group
                    .into_iter()
                    .map(|(g, v)| (g.to_string(), mean(&v)))
                    .collect();

                let mut stats = NumericStats {
                    q1,
                    q3,
                    lower_fence,
                    upper_fence,
                    group_means,
                    global_mean,
                    scale_mean: 0.0,
                    scale_std: 1.0,
                    constant: false,
                };
                let filled: Vec<f64> = rows
                    .iter()
                    .map(|r| match r.values[c].as_num() {
                        Some(v) => stats.clip(v),
                        None => stats.impute(group_of(&r.values, group_idx)),
                    })
                    .collect();
                let mu = mean(&filled);
                let var = filled.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / filled.len() as f64;
                let sd = var.sqrt();
                stats.scale_mean = mu;
                if sd <= 1e-12 * mu.abs().max(1.0) {
                    stats.scale_std = 1.0;
                    stats.constant = true;
                } else {
                    stats.scale_std = sd;
                }
                numeric.insert(col.name.clone(), stats);
            }
            ColumnKind::Categorical => {
                let present = rows.iter().filter_map(|r| r.values[c].as_cat());
                let global_mode = mode(present).ok_or_else(|| {
                    Error::Data(format!(
                        "categorical column {:?} is entirely missing",
                        col.name
                    ))
                })?;
                let mut by_group: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
                let mut vocab: Vec<String> = Vec::new();
                for r in rows {
                    if let Some(t) = r.values[c].as_cat() {
                        vocab.push(t.to_string());
                        if let Some(g) = group_of(&r.values, group_idx) {
                            by_group.entry(g).or_default().push(t);
                        }
                    }
                }
                vocab.sort();
                vocab.dedup();
                let group_modes = by_group
                    .into_iter()
                    .filter_map(|(g, v)| mode(v.into_iter()).map(|m| (g.to_string(), m)))
                    .collect();
                categorical.insert(
                    col.name.clone(),
                    CategoricalStats {
                        group_modes,
                        global_mode,
                        vocabulary: vocab,
                    },
                );
            }
        }
    }

    Ok(PreprocessorState {
        version: STATE_VERSION,
        schema_hash: schema.hash(),
        iqr_multiplier: multiplier,
        fitted_on: train.n(),
        column_order: schema.columns.iter().map(|c| c.name.clone()).collect(),
        numeric,
        categorical,
    })
}

impl PreprocessorState {
    fn check_table(&self, table: &DataTable) -> Result<()> {
        let schema = table.schema();
        if schema.hash() != self.schema_hash {
            let names: Vec<&str> = schema.columns.iter().map(|c| c.name.as_str()).collect();
            return Err(Error::Shape(format!(
                "table columns {names:?} do not match the fitted layout {:?}",
                self.column_order
            )));
        }
        Ok(())
    }

    fn numeric_names(&self) -> impl Iterator<Item = &String> {
        self.column_order
            .iter()
            .filter(|n| self.numeric.contains_key(*n))
    }

    fn categorical_names(&self) -> impl Iterator<Item = &String> {
        self.column_order
            .iter()
            .filter(|n| self.categorical.contains_key(*n))
    }

    /// Encoded column names: numerics, then `column=token` one-hot entries.
    pub fn encoded_names(&self) -> Vec<String> {
        self.column_sources().into_iter().map(|(e, _)| e).collect()
    }

    /// `(encoded column, source column)` for every encoded column.
    pub fn column_sources(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> =
            self.numeric_names().map(|n| (n.clone(), n.clone())).collect();
        for n in self.categorical_names() {
            for tok in &self.categorical[n].vocabulary {
                out.push((format!("{n}={tok}"), n.clone()));
            }
        }
        out
    }

    pub fn encoded_width(&self) -> usize {
        self.numeric.len()
            + self
                .categorical
                .values()
                .map(|c| c.vocabulary.len())
                .sum::<usize>()
    }

    /// Clipped and imputed numerics (before scaling), one `Vec` per row in
    /// numeric column order, plus imputed categorical tokens.
    pub fn clean_rows(&self, table: &DataTable) -> Result<(Vec<Vec<f64>>, Vec<Vec<String>>)> {
        self.check_table(table)?;
        let schema = table.schema();
        let group_idx = schema.group_key_index();
        let num_cols: Vec<(usize, &NumericStats)> = self
            .numeric_names()
            .map(|n| (schema.column_index(n).expect("hash-checked"), &self.numeric[n]))
            .collect();
        let cat_cols: Vec<(usize, &CategoricalStats)> = self
            .categorical_names()
            .map(|n| {
                (
                    schema.column_index(n).expect("hash-checked"),
                    &self.categorical[n],
                )
            })
            .collect();
        let mut nums = Vec::with_capacity(table.n());
        let mut cats = Vec::with_capacity(table.n());
        for r in table.rows() {
            let group = group_of(&r.values, group_idx);
            nums.push(
                num_cols
                    .iter()
                    .map(|&(c, st)| match r.values[c].as_num() {
                        Some(v) => st.clip(v),
                        None => st.impute(group),
                    })
                    .collect(),
            );
            cats.push(
                cat_cols
                    .iter()
                    .map(|&(c, st)| match r.values[c].as_cat() {
                        Some(t) => t.to_string(),
                        None => st.impute(group).to_string(),
                    })
                    .collect(),
            );
        }
        Ok((nums, cats))
    }

    pub fn transform(&self, table: &DataTable) -> Result<Matrix> {
        self.transform_with_summary(table).map(|(m, _)| m)
    }

    pub fn transform_with_summary(&self, table: &DataTable) -> Result<(Matrix, TransformSummary)> {
        let (nums, cats) = self.clean_rows(table)?;
        let num_stats: Vec<&NumericStats> = self.numeric_names().map(|n| &self.numeric[n]).collect();
        let cat_stats: Vec<(&String, &CategoricalStats)> = self
            .categorical_names()
            .map(|n| (n, &self.categorical[n]))
            .collect();
        let width = self.encoded_width();
        let mut values = Vec::with_capacity(table.n() * width);
        let mut summary = TransformSummary::default();
        for (row_nums, row_cats) in nums.iter().zip(&cats) {
            for (x, st) in row_nums.iter().zip(&num_stats) {
                values.push((x - st.scale_mean) / st.scale_std);
            }
            for (tok, (name, st)) in row_cats.iter().zip(&cat_stats) {
                let hit = st.vocabulary.binary_search(tok).ok();
                if hit.is_none() {
                    *summary.unseen.entry((*name).clone()).or_default() += 1;
                }
                values.extend((0..st.vocabulary.len()).map(|k| f64::from(u8::from(hit == Some(k)))));
            }
        }
        let m = Matrix::from_vec(table.n(), width, values)?.with_col_names(self.encoded_names())?;
        Ok((m, summary))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    /// Load a state file and check it was fitted on `schema`.
    pub fn load(path: &Path, schema: &FeatureSchema) -> Result<Self> {
        let state = Self::from_json(&read_to_string(path)?)?;
        if state.schema_hash != schema.hash() {
            return Err(Error::Schema(format!(
                "state in {} was fitted on a different schema",
                path.display()
            )));
        }
        Ok(state)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        match raw.get("version") {
            Some(v) if v.as_u64() == Some(u64::from(STATE_VERSION)) => {}
            Some(v) => {
                return Err(Error::Version {
                    expected: STATE_VERSION,
                    found: v.to_string(),
                })
            }
            None => {
                return Err(Error::Version {
                    expected: STATE_VERSION,
                    found: "no version key".into(),
                })
            }
        }
        Ok(serde_json::from_value(raw)?)
    }
}
