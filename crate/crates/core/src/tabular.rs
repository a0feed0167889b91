//! Record model, CSV ingestion, the 15-level BER scale and seeded splitting.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{fmt_f64, read_to_string, write_csv_with, write_json};
use crate::rng::Rng;

/// Fine-grained levels, best to worst.
pub const BER_LEVELS: [&str; 15] = [
    "A1", "A2", "A3", "B1", "B2", "B3", "C1", "C2", "C3", "D1", "D2", "E1", "E2", "F", "G",
];

/// Coarse bands, best to worst.
pub const COARSE_LEVELS: [&str; 5] = ["A", "B", "C", "D", "EFG"];

pub const N_FINE: usize = BER_LEVELS.len();
pub const N_COARSE: usize = COARSE_LEVELS.len();

/// One of the 15 fine Building Energy Rating levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct BerLevel(u8);

impl BerLevel {
    pub fn from_ordinal(ordinal: usize) -> Option<Self> {
        (ordinal < N_FINE).then_some(BerLevel(ordinal as u8))
    }

    /// 0 = A1 (best) .. 14 = G (worst).
    pub fn ordinal(self) -> usize {
        usize::from(self.0)
    }

    pub fn fine(self) -> &'static str {
        BER_LEVELS[self.ordinal()]
    }

    pub fn coarse(self) -> CoarseLevel {
        CoarseLevel::from_fine(self)
    }

    pub fn all() -> impl Iterator<Item = BerLevel> {
        (0..N_FINE as u8).map(BerLevel)
    }

    /// Absolute ordinal gap between two levels.
    pub fn gap(self, other: BerLevel) -> usize {
        self.ordinal().abs_diff(other.ordinal())
    }
}

impl fmt::Display for BerLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.fine())
    }
}

impl From<BerLevel> for String {
    fn from(level: BerLevel) -> String {
        level.fine().to_string()
    }
}

impl TryFrom<String> for BerLevel {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        parse_ber(&s)
    }
}

impl FromStr for BerLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_ber(s)
    }
}

/// Case-insensitive parse of a fine level token such as `"b2"`.
pub fn parse_ber(token: &str) -> Result<BerLevel> {
    let t = token.trim();
    BER_LEVELS
        .iter()
        .position(|l| l.eq_ignore_ascii_case(t))
        .map(|i| BerLevel(i as u8))
        .ok_or_else(|| Error::UnknownLevel {
            token: token.to_string(),
            valid: BER_LEVELS.join(","),
        })
}

pub fn format_ber(level: BerLevel) -> &'static str {
    level.fine()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CoarseLevel {
    A,
    B,
    C,
    D,
    Efg,
}

impl CoarseLevel {
    pub fn from_fine(level: BerLevel) -> Self {
        match level.fine().as_bytes()[0] {
            b'A' => CoarseLevel::A,
            b'B' => CoarseLevel::B,
            b'C' => CoarseLevel::C,
            b'D' => CoarseLevel::D,
            _ => CoarseLevel::Efg,
        }
    }

    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        COARSE_LEVELS[self.ordinal()]
    }
}

impl fmt::Display for CoarseLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    #[serde(default)]
    pub group_key: bool,
}

impl ColumnSpec {
    pub fn numeric(name: &str) -> Self {
        ColumnSpec {
            name: name.to_string(),
            kind: ColumnKind::Numeric,
            group_key: false,
        }
    }

    pub fn categorical(name: &str) -> Self {
        ColumnSpec {
            name: name.to_string(),
            kind: ColumnKind::Categorical,
            group_key: false,
        }
    }

    pub fn group_key(mut self) -> Self {
        self.group_key = true;
        self
    }
}

pub fn default_missing_tokens() -> Vec<String> {
    ["", "NA", "NaN", "null"].iter().map(|s| s.to_string()).collect()
}

/// Typed column layout of a building-record CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub columns: Vec<ColumnSpec>,
    pub label_column: String,
    pub id_column: String,
    #[serde(default = "default_missing_tokens")]
    pub missing_tokens: Vec<String>,
}

impl FeatureSchema {
    pub fn new(columns: Vec<ColumnSpec>, id_column: &str, label_column: &str) -> Result<Self> {
        let s = FeatureSchema {
            columns,
            label_column: label_column.to_string(),
            id_column: id_column.to_string(),
            missing_tokens: default_missing_tokens(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.columns.is_empty() {
            return Err(Error::Schema("no feature columns".into()));
        }
        let mut seen = HashSet::new();
        for name in self
            .columns
            .iter()
            .map(|c| c.name.as_str())
            .chain([self.id_column.as_str(), self.label_column.as_str()])
        {
            if name.is_empty() {
                return Err(Error::Schema("empty column name".into()));
            }
            if !seen.insert(name) {
                return Err(Error::Schema(format!("column {name:?} declared twice")));
            }
        }
        let groups: Vec<_> = self.columns.iter().filter(|c| c.group_key).collect();
        if groups.len() > 1 {
            return Err(Error::Schema("more than one group_key column".into()));
        }
        if let Some(g) = groups.first() {
            if g.kind != ColumnKind::Categorical {
                return Err(Error::Schema(format!(
                    "group_key column {:?} must be categorical",
                    g.name
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s: FeatureSchema = serde_json::from_str(&read_to_string(path)?)?;
        s.validate()?;
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn group_key_index(&self) -> Option<usize> {
        self.columns.iter().position(|c| c.group_key)
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn is_missing(&self, raw: &str) -> bool {
        let t = raw.trim();
        self.missing_tokens.iter().any(|m| m.eq_ignore_ascii_case(t))
    }

    /// Stable fingerprint of the column layout (missing tokens excluded).
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.columns {
            let kind = match c.kind {
                ColumnKind::Numeric => "numeric",
                ColumnKind::Categorical => "categorical",
            };
            h.update(format!("{}\x1f{}\x1f{}\x1e", c.name, kind, c.group_key).as_bytes());
        }
        h.update(format!("id={}\x1elabel={}", self.id_column, self.label_column).as_bytes());
        hex::encode(h.finalize())
    }

    /// Same layout restricted to `keep` (schema order preserved).
    pub fn restrict(&self, keep: &[String]) -> Result<Self> {
        for k in keep {
            if self.column_index(k).is_none() {
                return Err(Error::Schema(format!("unknown column {k:?}")));
            }
        }
        let s = FeatureSchema {
            columns: self
                .columns
                .iter()
                .filter(|c| keep.contains(&c.name))
                .cloned()
                .collect(),
            ..self.clone()
        };
        s.validate()?;
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(Option<f64>),
    Cat(Option<String>),
}

impl Cell {
    pub fn is_missing(&self) -> bool {
        matches!(self, Cell::Num(None) | Cell::Cat(None))
    }

    pub fn as_num(&self) -> Option<f64> {
        match self {
            Cell::Num(v) => *v,
            Cell::Cat(_) => None,
        }
    }

    pub fn as_cat(&self) -> Option<&str> {
        match self {
            Cell::Cat(v) => v.as_deref(),
            Cell::Num(_) => None,
        }
    }

    fn to_field(&self) -> String {
        match self {
            Cell::Num(Some(v)) => fmt_f64(*v),
            Cell::Cat(Some(s)) => s.clone(),
            _ => String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: String,
    pub values: Vec<Cell>,
    pub label: Option<BerLevel>,
}

/// Schema-conforming collection of records with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct DataTable {
    schema: FeatureSchema,
    rows: Vec<Record>,
}

impl DataTable {
    pub fn new(schema: FeatureSchema, rows: Vec<Record>) -> Result<Self> {
        schema.validate()?;
        let mut ids = HashSet::with_capacity(rows.len());
        for (i, r) in rows.iter().enumerate() {
            if r.values.len() != schema.columns.len() {
                return Err(Error::Row {
                    row: i + 1,
                    msg: format!(
                        "{} values, schema has {} columns",
                        r.values.len(),
                        schema.columns.len()
                    ),
                });
            }
            for (cell, col) in r.values.iter().zip(&schema.columns) {
                let ok = matches!(
                    (cell, col.kind),
                    (Cell::Num(_), ColumnKind::Numeric) | (Cell::Cat(_), ColumnKind::Categorical)
                );
                if !ok {
                    return Err(Error::Row {
                        row: i + 1,
                        msg: format!("cell kind does not match column {:?}", col.name),
                    });
                }
                if let Cell::Num(Some(v)) = cell {
                    if !v.is_finite() {
                        return Err(Error::Row {
                            row: i + 1,
                            msg: format!("non-finite value in column {:?}", col.name),
                        });
                    }
                }
            }
            if !ids.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
        }
        Ok(DataTable { schema, rows })
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn rows(&self) -> &[Record] {
        &self.rows
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.rows.iter().map(|r| r.id.clone()).collect()
    }

    pub fn labels(&self) -> Vec<Option<BerLevel>> {
        self.rows.iter().map(|r| r.label).collect()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.rows.iter().position(|r| r.id == id)
    }

    /// Sub-table of the given row positions, in the given order.
    pub fn select(&self, idx: &[usize]) -> DataTable {
        DataTable {
            schema: self.schema.clone(),
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    /// Sub-table of the given ids, in the given order.
    pub fn select_ids(&self, ids: &[String]) -> Result<DataTable> {
        let pos: std::collections::HashMap<&str, usize> = self
            .rows
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.as_str(), i))
            .collect();
        let idx = ids
            .iter()
            .map(|id| {
                pos.get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::UnknownId(id.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.select(&idx))
    }

    /// Re-type the table under a narrower schema with the same id/label columns.
    pub fn project(&self, schema: &FeatureSchema) -> Result<DataTable> {
        let idx = schema
            .columns
            .iter()
            .map(|c| {
                self.schema
                    .column_index(&c.name)
                    .ok_or_else(|| Error::Schema(format!("unknown column {:?}", c.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        let rows = self
            .rows
            .iter()
            .map(|r| Record {
                id: r.id.clone(),
                values: idx.iter().map(|&i| r.values[i].clone()).collect(),
                label: r.label,
            })
            .collect();
        DataTable::new(schema.clone(), rows)
    }

    pub fn load_csv(path: &Path, schema: &FeatureSchema) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(file, schema)
    }

    pub fn from_reader<R: std::io::Read>(reader: R, schema: &FeatureSchema) -> Result<Self> {
        schema.validate()?;
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(reader);
        let header = rdr.headers()?.clone();
        let find = |name: &str| {
            header
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| Error::Schema(format!("CSV header lacks required column {name:?}")))
        };
        let id_pos = find(&schema.id_column)?;
        let label_pos = find(&schema.label_column)?;
        let col_pos = schema
            .columns
            .iter()
            .map(|c| find(&c.name))
            .collect::<Result<Vec<_>>>()?;

        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 1;
            let rec = rec?;
            if rec.len() != header.len() {
                return Err(Error::Row {
                    row,
                    msg: format!("{} fields, header has {}", rec.len(), header.len()),
                });
            }
            let id = rec[id_pos].trim().to_string();
            if id.is_empty() {
                return Err(Error::Row {
                    row,
                    msg: "empty id".into(),
                });
            }
            let mut values = Vec::with_capacity(col_pos.len());
            for (col, &p) in schema.columns.iter().zip(&col_pos) {
                let raw = &rec[p];
                let cell = match col.kind {
                    _ if schema.is_missing(raw) => match col.kind {
                        ColumnKind::Numeric => Cell::Num(None),
                        ColumnKind::Categorical => Cell::Cat(None),
                    },
                    ColumnKind::Numeric => {
                        let v: f64 = raw.trim().parse().map_err(|_| Error::Row {
                            row,
                            msg: format!("column {:?}: {raw:?} is not a number", col.name),
                        })?;
                        if !v.is_finite() {
                            return Err(Error::Row {
                                row,
                                msg: format!("column {:?}: non-finite value", col.name),
                            });
                        }
                        Cell::Num(Some(v))
                    }
                    ColumnKind::Categorical => Cell::Cat(Some(raw.trim().to_string())),
                };
                values.push(cell);
            }
            let raw_label = &rec[label_pos];
            let label = if schema.is_missing(raw_label) {
                None
            } else {
                Some(parse_ber(raw_label).map_err(|e| Error::Row {
                    row,
                    msg: e.to_string(),
                })?)
            };
            rows.push(Record { id, values, label });
        }
        DataTable::new(schema.clone(), rows)
    }

    /// Header `id, <feature columns>, label`; missing cells written empty.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv_with(path, |w| {
            let mut header = vec![self.schema.id_column.clone()];
            header.extend(self.schema.columns.iter().map(|c| c.name.clone()));
            header.push(self.schema.label_column.clone());
            w.write_record(&header)?;
            for r in &self.rows {
                let mut rec = Vec::with_capacity(header.len());
                rec.push(r.id.clone());
                rec.extend(r.values.iter().map(Cell::to_field));
                rec.push(r.label.map(|l| l.fine().to_string()).unwrap_or_default());
                w.write_record(&rec)?;
            }
            Ok(())
        })
    }
}

/// Train/validation/test fractions plus the shuffle seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_frac: 0.8,
            val_frac: 0.1,
            test_frac: 0.1,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fr = [self.train_frac, self.val_frac, self.test_frac];
        if fr.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            return Err(Error::Config(format!(
                "split fractions must lie in (0,1), got {fr:?}"
            )));
        }
        // Decimal fractions such as 0.8 + 0.1 + 0.1 are not exact in binary.
        if (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must sum to 1, got {fr:?}"
            )));
        }
        Ok(())
    }

    /// `(n_train, n_val, n_test)`: val and test round half up, train takes the rest.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let share = |f: f64| (f * n as f64 + 0.5).floor() as usize;
        let n_val = share(self.val_frac);
        let n_test = share(self.test_frac);
        (n.saturating_sub(n_val + n_test), n_val, n_test)
    }
}

/// Row positions of each partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<SplitIndices> {
    spec.validate()?;
    if n < 3 {
        return Err(Error::Data(format!("cannot split {n} rows three ways")));
    }
    let (n_train, n_val, n_test) = spec.sizes(n);
    if n_train == 0 || n_val == 0 || n_test == 0 || n_val + n_test > n {
        return Err(Error::Data(format!(
            "split of {n} rows leaves an empty partition ({n_train}/{n_val}/{n_test})"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    Rng::new(spec.seed).shuffle(&mut perm);
    let test = perm.split_off(n_train + n_val);
    let val = perm.split_off(n_train);
    Ok(SplitIndices {
        train: perm,
        val,
        test,
    })
}

pub fn split(table: &DataTable, spec: &SplitSpec) -> Result<(DataTable, DataTable, DataTable)> {
    let s = split_indices(table.n(), spec)?;
    Ok((table.select(&s.train), table.select(&s.val), table.select(&s.test)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl Partition {
    fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
        }
    }
}

/// `id,partition` assignment file written by the preprocess stage.
pub fn write_split_ids(path: &Path, table: &DataTable, s: &SplitIndices) -> Result<()> {
    write_csv_with(path, |w| {
        w.write_record(["id", "partition"])?;
        for (part, idx) in [
            (Partition::Train, &s.train),
            (Partition::Val, &s.val),
            (Partition::Test, &s.test),
        ] {
            for &i in idx {
                w.write_record([table.rows()[i].id.as_str(), part.as_str()])?;
            }
        }
        Ok(())
    })
}

/// Inverse of [`write_split_ids`]: `(train, val, test)` id lists in file order.
pub fn read_split_ids(path: &Path) -> Result<(Vec<String>, Vec<String>, Vec<String>)> {
    let mut rdr = csv::Reader::from_path(path)?;
    let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != 2 {
            return Err(Error::Row {
                row: i + 1,
                msg: "expected id,partition".into(),
            });
        }
        let id = rec[0].to_string();
        match &rec[1] {
            "train" => tr.push(id),
            "val" => va.push(id),
            "test" => te.push(id),
            other => {
                return Err(Error::Row {
                    row: i + 1,
                    msg: format!("unknown partition {other:?}"),
                })
            }
        }
    }
    Ok((tr, va, te))
}
