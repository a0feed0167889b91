//! Seeded synthetic building stock with known label noise and abnormal
//! feature values.

use std::collections::HashSet;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::write_csv_with;
use crate::rng::{derive_seed, Rng};
use crate::tabular::{
    parse_ber, BerLevel, Cell, ColumnSpec, DataTable, FeatureSchema, Record, N_FINE,
};

pub const AREA_COLUMNS: [&str; 5] = ["wall_area", "roof_area", "floor_area", "window_area", "door_area"];
pub const U_COLUMNS: [&str; 5] = ["wall_u", "roof_u", "floor_u", "window_u", "door_u"];
pub const WATER_COLUMN: &str = "water_storage_volume";
pub const LIGHTING_COLUMN: &str = "lighting_fraction";
pub const EFFICIENCY_COLUMN: &str = "heating_efficiency";
pub const ABNORMAL_FACTORS: [f64; 3] = [10.0, 50.0, 100.0];

const COUNTIES: [&str; 6] = ["Cork", "Dublin", "Galway", "Kerry", "Limerick", "Mayo"];
const REFERENCE_DRAW: usize = 20_000;
const REFERENCE_SEED: u64 = 0x0005_EED0_FB11_1D00;

/// U-value range per component at best and worst insulation.
const U_RANGE: [(f64, f64); 5] = [(0.15, 2.5), (0.1, 2.3), (0.1, 1.2), (0.8, 5.0), (1.0, 3.5)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_rows: usize,
    pub n_building_types: usize,
    pub label_noise_rate: f64,
    pub feature_corruption_rate: f64,
    pub score_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_rows: 5000,
            n_building_types: 4,
            label_noise_rate: 0.05,
            feature_corruption_rate: 0.05,
            score_noise: 5.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_rows < 10 {
            return Err(Error::Config(format!("n_rows must be at least 10, got {}", self.n_rows)));
        }
        if self.n_building_types == 0 {
            return Err(Error::Config("n_building_types must be positive".into()));
        }
        for (name, r) in [
            ("label_noise_rate", self.label_noise_rate),
            ("feature_corruption_rate", self.feature_corruption_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {r}")));
            }
        }
        if !(self.score_noise.is_finite() && self.score_noise >= 0.0) {
            return Err(Error::Config(format!("score_noise must be >= 0, got {}", self.score_noise)));
        }
        Ok(())
    }

    pub fn n_label_noised(&self) -> usize {
        (self.label_noise_rate * self.n_rows as f64).floor() as usize
    }

    pub fn n_feature_corrupted(&self) -> usize {
        (self.feature_corruption_rate * self.n_rows as f64).floor() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub id: String,
    pub clean: BerLevel,
    pub published: BerLevel,
    pub label_noised: bool,
    pub feature_corrupted: bool,
    pub corrupted_columns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    pub rows: Vec<TruthRow>,
}

impl GroundTruth {
    pub fn label_noised_ids(&self) -> HashSet<String> {
        self.rows.iter().filter(|r| r.label_noised).map(|r| r.id.clone()).collect()
    }

    pub fn feature_corrupted_ids(&self) -> HashSet<String> {
        self.rows.iter().filter(|r| r.feature_corrupted).map(|r| r.id.clone()).collect()
    }

    pub fn n_label_noised(&self) -> usize {
        self.rows.iter().filter(|r| r.label_noised).count()
    }

    pub fn n_feature_corrupted(&self) -> usize {
        self.rows.iter().filter(|r| r.feature_corrupted).count()
    }
}

const TRUTH_HEADER: [&str; 6] = [
    "id",
    "clean_level",
    "published_level",
    "label_noised",
    "feature_corrupted",
    "corrupted_columns",
];

pub fn write_ground_truth(path: &Path, gt: &GroundTruth) -> Result<()> {
    write_csv_with(path, |w| {
        w.write_record(TRUTH_HEADER)?;
        for r in &gt.rows {
            w.write_record([
                r.id.as_str(),
                r.clean.fine(),
                r.published.fine(),
                if r.label_noised { "1" } else { "0" },
                if r.feature_corrupted { "1" } else { "0" },
                &r.corrupted_columns.join(";"),
            ])?;
        }
        Ok(())
    })
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruth> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io { path: path.to_path_buf(), source },
        other => Error::Data(format!("{}: {other:?}", path.display())),
    })?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut pos = [0usize; 6];
    for (slot, name) in pos.iter_mut().zip(TRUTH_HEADER) {
        *slot = header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("ground truth is missing column {name:?}")))?;
    }
    let flag = |s: &str, row: usize| match s {
        "1" | "true" => Ok(true),
        "0" | "false" => Ok(false),
        _ => Err(Error::Row { row, msg: format!("bad flag {s:?}") }),
    };
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let field = |k: usize| {
            rec.get(pos[k])
                .ok_or_else(|| Error::Row { row, msg: "short record".into() })
        };
        let cols = field(5)?;
        rows.push(TruthRow {
            id: field(0)?.to_string(),
            clean: parse_ber(field(1)?)?,
            published: parse_ber(field(2)?)?,
            label_noised: flag(field(3)?, row)?,
            feature_corrupted: flag(field(4)?, row)?,
            corrupted_columns: if cols.is_empty() {
                Vec::new()
            } else {
                cols.split(';').map(str::to_string).collect()
            },
        });
    }
    Ok(GroundTruth { rows })
}

/// Column layout of generated tables.
pub fn synth_schema() -> FeatureSchema {
    let mut columns = vec![
        ColumnSpec::categorical("building_type").group_key(),
        ColumnSpec::categorical("county"),
    ];
    columns.extend(AREA_COLUMNS.iter().map(|c| ColumnSpec::numeric(c)));
    columns.extend(U_COLUMNS.iter().map(|c| ColumnSpec::numeric(c)));
    columns.push(ColumnSpec::numeric(EFFICIENCY_COLUMN));
    columns.push(ColumnSpec::numeric(WATER_COLUMN));
    columns.push(ColumnSpec::numeric(LIGHTING_COLUMN));
    FeatureSchema::new(columns, "id", "ber").expect("static schema is valid")
}

/// Numeric attributes of one dwelling before any corruption.
#[derive(Debug, Clone, PartialEq)]
pub struct Dwelling {
    pub building_type: usize,
    pub county: usize,
    pub areas: [f64; 5],
    pub u_values: [f64; 5],
    pub efficiency: f64,
    pub water: f64,
    pub lighting: f64,
}

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

fn sample_dwelling(rng: &mut Rng, n_types: usize) -> Dwelling {
    let building_type = rng.below(n_types);
    let county = rng.below(COUNTIES.len());
    // Larger type index means a larger dwelling.
    let size = rng.uniform_range(0.6, 1.4) * (1.0 + 0.25 * building_type as f64);
    let base = [150.0, 80.0, 90.0, 20.0, 4.0];
    let mut areas = [0.0; 5];
    for (a, b) in areas.iter_mut().zip(base) {
        *a = round3(b * size * rng.uniform_range(0.97, 1.03));
    }
    // Better fabric tends to come with better heating and lighting.
    let quality = rng.uniform();
    let mut u_values = [0.0; 5];
    for (u, (lo, hi)) in u_values.iter_mut().zip(U_RANGE) {
        let q = (quality + rng.uniform_range(-0.02, 0.02)).clamp(0.0, 1.0);
        *u = round3(lo + q * (hi - lo));
    }
    let jitter = |rng: &mut Rng| rng.uniform_range(-0.05, 0.05);
    let efficiency = (1.0 - 0.4 * quality + jitter(rng)).clamp(0.6, 1.0);
    let lighting = (1.0 - 0.8 * quality + jitter(rng)).clamp(0.2, 1.0);
    let water = (80.0 + 110.0 * (size - 0.6) + 40.0 * jitter(rng)).clamp(80.0, 300.0);
    Dwelling {
        building_type,
        county,
        areas,
        u_values,
        efficiency: round3(efficiency),
        water: round3(water),
        lighting: round3(lighting),
    }
}

/// Heat-loss score without the noise term.
pub fn base_score(d: &Dwelling) -> f64 {
    let fabric: f64 = d.areas.iter().zip(&d.u_values).map(|(a, u)| a * u).sum();
    fabric / d.efficiency + 40.0 * (1.0 - d.lighting)
}

/// Gaussian score noise keyed on the features, so equal features always get
/// equal noise.
fn feature_noise(d: &Dwelling, sigma: f64, seed: u64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((d.building_type as u64).to_le_bytes());
    h.update((d.county as u64).to_le_bytes());
    for v in d.areas.iter().chain(&d.u_values).chain([&d.efficiency, &d.water, &d.lighting]) {
        h.update(v.to_bits().to_le_bytes());
    }
    let digest = h.finalize();
    let key = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    let z: f64 = StandardNormal.sample(Rng::new(key).inner());
    sigma * z
}

pub fn score(d: &Dwelling, sigma: f64, seed: u64) -> f64 {
    base_score(d) + feature_noise(d, sigma, seed)
}

/// Fourteen ascending cut points splitting a large noise-free reference draw
/// into fifteen equal-count bands.
pub fn score_thresholds(n_building_types: usize) -> Result<Vec<f64>> {
    let mut rng = Rng::new(REFERENCE_SEED);
    let mut scores: Vec<f64> = (0..REFERENCE_DRAW)
        .map(|_| base_score(&sample_dwelling(&mut rng, n_building_types)))
        .collect();
    scores.sort_by(f64::total_cmp);
    let cuts: Vec<f64> = (1..N_FINE)
        .map(|i| crate::preprocess::quantile_sorted(&scores, i as f64 / N_FINE as f64))
        .collect();
    if cuts.windows(2).any(|w| !(w[0] < w[1])) || cuts.iter().any(|c| !c.is_finite()) {
        return Err(Error::Config(format!(
            "score thresholds are not strictly increasing for {n_building_types} building types"
        )));
    }
    Ok(cuts)
}

/// Number of thresholds strictly below the score.
pub fn level_for_score(score: f64, thresholds: &[f64]) -> BerLevel {
    let ord = thresholds.partition_point(|&t| t < score);
    BerLevel::from_ordinal(ord).expect("at most 14 thresholds")
}

fn shifted_level(clean: BerLevel, rng: &mut Rng) -> BerLevel {
    loop {
        let magnitude = 3 + rng.below(5) as i64;
        let offset = if rng.below(2) == 0 { -magnitude } else { magnitude };
        let ord = (clean.ordinal() as i64 + offset).clamp(0, N_FINE as i64 - 1) as usize;
        if ord != clean.ordinal() {
            return BerLevel::from_ordinal(ord).expect("clamped ordinal");
        }
    }
}

fn id_for(i: usize, n: usize) -> String {
    let width = n.saturating_sub(1).to_string().len().max(3);
    format!("B{i:0width$}")
}

/// Draws the clean dwellings, their clean levels and the thresholds used.
pub fn generate_clean(config: &SynthConfig) -> Result<(Vec<Dwelling>, Vec<BerLevel>, Vec<f64>)> {
    config.validate()?;
    let thresholds = score_thresholds(config.n_building_types)?;
    let mut rng = Rng::new(derive_seed(config.seed, "synth/features"));
    let noise_seed = derive_seed(config.seed, "synth/score-noise");
    let dwellings: Vec<Dwelling> = (0..config.n_rows)
        .map(|_| sample_dwelling(&mut rng, config.n_building_types))
        .collect();
    let clean = dwellings
        .iter()
        .map(|d| level_for_score(score(d, config.score_noise, noise_seed), &thresholds))
        .collect();
    Ok((dwellings, clean, thresholds))
}

pub fn generate(config: &SynthConfig) -> Result<(DataTable, GroundTruth)> {
    let (dwellings, clean, _) = generate_clean(config)?;
    let n = config.n_rows;

    let mut label_rng = Rng::new(derive_seed(config.seed, "synth/label-noise"));
    let mut noised = vec![false; n];
    for i in label_rng.sample_indices(n, config.n_label_noised()) {
        noised[i] = true;
    }
    let published: Vec<BerLevel> = (0..n)
        .map(|i| if noised[i] { shifted_level(clean[i], &mut label_rng) } else { clean[i] })
        .collect();

    let mut feat_rng = Rng::new(derive_seed(config.seed, "synth/feature-corruption"));
    let mut corrupted: Vec<Option<(&'static str, f64)>> = vec![None; n];
    for i in feat_rng.sample_indices(n, config.n_feature_corrupted()) {
        let column = if feat_rng.below(2) == 0 { WATER_COLUMN } else { LIGHTING_COLUMN };
        let factor = ABNORMAL_FACTORS[feat_rng.below(ABNORMAL_FACTORS.len())];
        corrupted[i] = Some((column, factor));
    }

    let schema = synth_schema();
    let mut records = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for (i, d) in dwellings.iter().enumerate() {
        let id = id_for(i, n);
        let (mut water, mut lighting) = (d.water, d.lighting);
        match corrupted[i] {
            Some((WATER_COLUMN, f)) => water *= f,
            Some((_, f)) => lighting *= f,
            None => {}
        }
        let mut values = vec![
            Cell::Cat(Some(format!("type_{}", d.building_type))),
            Cell::Cat(Some(COUNTIES[d.county].to_string())),
        ];
        values.extend(d.areas.iter().map(|&a| Cell::Num(Some(a))));
        values.extend(d.u_values.iter().map(|&u| Cell::Num(Some(u))));
        values.push(Cell::Num(Some(d.efficiency)));
        values.push(Cell::Num(Some(water)));
        values.push(Cell::Num(Some(lighting)));
        records.push(Record { id: id.clone(), values, label: Some(published[i]) });
        truth.push(TruthRow {
            id,
            clean: clean[i],
            published: published[i],
            label_noised: noised[i],
            feature_corrupted: corrupted[i].is_some(),
            corrupted_columns: corrupted[i].map(|(c, _)| vec![c.to_string()]).unwrap_or_default(),
        });
    }
    Ok((DataTable::new(schema, records)?, GroundTruth { rows: truth }))
}
