//! Stage composition shared by the command-line tool and the end-to-end tests.

use serde::{Deserialize, Serialize};

use crate::audit::{audit_all, score_detection, AuditConfig, AuditReport, DetectionScore};
use crate::error::{Error, Result};
use crate::latent::EmbeddingStore;
use crate::matrix::Matrix;
use crate::preprocess::{self, PreprocessorState, DEFAULT_IQR_MULTIPLIER};
use crate::rng::derive_seed;
use crate::scarf::{encode, pretrain, PretrainOutput, ScarfConfig};
use crate::supervised::{
    evaluate, predict_classes, train_classifier, ClassifierConfig, EvalResult, Granularity,
};
use crate::synth::{generate, GroundTruth, SynthConfig};
use crate::tabular::{split_indices, DataTable, SplitIndices, SplitSpec};
use crate::trees::ForestParams;

pub const DEFAULT_TOP_FEATURES: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub split: SplitSpec,
    pub iqr_multiplier: f64,
    pub scarf: ScarfConfig,
    pub audit: AuditConfig,
    pub classifier: ClassifierConfig,
    pub forest: ForestParams,
    /// Features kept by importance ranking.
    pub top_features: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig::with_seed(0)
    }
}

impl PipelineConfig {
    /// Default stage configs with every stage seed derived from `seed`.
    /// The generator uses the master seed directly.
    pub fn with_seed(seed: u64) -> Self {
        let mut c = PipelineConfig {
            seed,
            synth: SynthConfig::default(),
            split: SplitSpec::default(),
            iqr_multiplier: DEFAULT_IQR_MULTIPLIER,
            scarf: ScarfConfig::default(),
            audit: AuditConfig::default(),
            classifier: ClassifierConfig::default(),
            forest: ForestParams::default(),
            top_features: DEFAULT_TOP_FEATURES,
        };
        c.reseed(seed);
        c
    }

    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.synth.seed = seed;
        self.split.seed = derive_seed(seed, "split");
        self.scarf.seed = derive_seed(seed, "pretrain");
        self.classifier.seed = derive_seed(seed, "baseline");
        self.forest.seed = derive_seed(seed, "forest");
    }
}

/// Fitted preprocessing plus the encoded matrix of every record.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub split: SplitIndices,
    pub state: PreprocessorState,
    pub encoded: Matrix,
}

/// Split, fit on the training partition, and transform all rows.
pub fn prepare(table: &DataTable, split: &SplitSpec, iqr_multiplier: f64) -> Result<Prepared> {
    let split = split_indices(table.n(), split)?;
    let state = preprocess::fit(&table.select(&split.train), iqr_multiplier)?;
    let encoded = state.transform(table)?;
    Ok(Prepared { split, state, encoded })
}

pub fn pretrain_on(prepared: &Prepared, config: &ScarfConfig) -> Result<PretrainOutput> {
    let train = prepared.encoded.select_rows(&prepared.split.train);
    let val = prepared.encoded.select_rows(&prepared.split.val);
    pretrain(config, &train, Some(&val))
}

pub fn embed(table: &DataTable, encoded: &Matrix, output: &PretrainOutput) -> Result<EmbeddingStore> {
    let latent = encode(&output.weights, encoded)?;
    EmbeddingStore::new(table.ids(), latent, Some(table.labels()))
}

fn class_targets(table: &DataTable, idx: &[usize], granularity: Granularity) -> Result<Vec<usize>> {
    idx.iter()
        .map(|&i| {
            let r = &table.rows()[i];
            r.label
                .map(|l| granularity.class_of(l))
                .ok_or_else(|| Error::Data(format!("record {:?} has no label", r.id)))
        })
        .collect()
}

/// Train on the training partition and score on the test partition.
pub fn baseline(table: &DataTable, prepared: &Prepared, config: &ClassifierConfig) -> Result<EvalResult> {
    let g = config.granularity;
    let x_train = prepared.encoded.select_rows(&prepared.split.train);
    let y_train = class_targets(table, &prepared.split.train, g)?;
    let net = train_classifier(config, &x_train, &y_train)?;
    let x_test = prepared.encoded.select_rows(&prepared.split.test);
    let y_test = class_targets(table, &prepared.split.test, g)?;
    evaluate(&y_test, &predict_classes(&net, &x_test)?, g.n_classes())
}

#[derive(Debug, Clone)]
pub struct DetectionRun {
    pub table: DataTable,
    pub truth: GroundTruth,
    pub prepared: Prepared,
    pub pretrained: PretrainOutput,
    pub store: EmbeddingStore,
    pub report: AuditReport,
    pub score: DetectionScore,
}

/// Generate, preprocess, pretrain, embed and audit; detection is scored
/// against the generator's label-noise mask.
pub fn run_detection(config: &PipelineConfig) -> Result<DetectionRun> {
    let (table, truth) = generate(&config.synth)?;
    let prepared = prepare(&table, &config.split, config.iqr_multiplier)?;
    let pretrained = pretrain_on(&prepared, &config.scarf)?;
    let store = embed(&table, &prepared.encoded, &pretrained)?;
    let report = audit_all(&store, &config.audit)?;
    let score = score_detection(&report, &truth.label_noised_ids());
    Ok(DetectionRun { table, truth, prepared, pretrained, store, report, score })
}
