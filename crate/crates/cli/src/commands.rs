use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use clear_core::audit::{
    audit_all, box_plot_summary, feature_table, fences_from_state, read_report_flags, score_flags,
    write_box_plot_csv,
};
use clear_core::io::{fmt_f64, write_atomic, write_json};
use clear_core::latent::{pca_fit, write_projection_csv, EmbeddingStore, Metric};
use clear_core::pipeline::{self, PipelineConfig, Prepared};
use clear_core::preprocess::{self, PreprocessorState};
use clear_core::scarf::{self, encode, write_history_csv, EncoderWeights};
use clear_core::supervised::{evaluate, Granularity};
use clear_core::synth::{generate, read_ground_truth, write_ground_truth};
use clear_core::tabular::{
    read_split_ids, split_indices, write_split_ids, ColumnKind, DataTable, FeatureSchema, SplitIndices,
    N_FINE,
};
use clear_core::trees::{
    aggregate_importance, fit_forest, rank_features, read_excludelist, write_importance_csv,
};

use crate::config::Layout;
use crate::{GranularityArg, ModelArg};

const SPLIT_FILE: &str = "split.csv";
const STATE_FILE: &str = "preprocess_state.json";
const ENCODED_FILE: &str = "encoded.csv";
const WEIGHTS_FILE: &str = "encoder.json";
const HISTORY_FILE: &str = "pretrain_history.csv";
const EMBEDDINGS_FILE: &str = "embeddings.csv";
const REPORT_FILE: &str = "audit_report.csv";
const SUMMARY_FILE: &str = "audit_summary.json";
const TRUTH_FILE: &str = "ground_truth.csv";

fn load_table(l: &Layout) -> Result<DataTable> {
    let schema = FeatureSchema::load(&l.schema)?;
    Ok(DataTable::load_csv(&l.data, &schema)?)
}

fn load_state(l: &Layout, table: &DataTable) -> Result<PreprocessorState> {
    PreprocessorState::load(&l.file(STATE_FILE), table.schema())
        .with_context(|| "run `preprocess` first".to_string())
}

fn load_split(l: &Layout, table: &DataTable) -> Result<SplitIndices> {
    let (train, val, test) = read_split_ids(&l.file(SPLIT_FILE))?;
    let to_idx = |ids: Vec<String>| -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| table.index_of(id).ok_or_else(|| anyhow!("split file names unknown id {id:?}")))
            .collect()
    };
    Ok(SplitIndices { train: to_idx(train)?, val: to_idx(val)?, test: to_idx(test)? })
}

fn load_store(l: &Layout) -> Result<EmbeddingStore> {
    EmbeddingStore::read_csv(&l.file(EMBEDDINGS_FILE)).with_context(|| "run `embed` first".to_string())
}

pub fn synth(out: &Path, config: &PipelineConfig) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let (table, truth) = generate(&config.synth)?;
    table.write_csv(&out.join("records.csv"))?;
    table.schema().save(&out.join("schema.json"))?;
    write_ground_truth(&out.join(TRUTH_FILE), &truth)?;
    log::info!(
        "{} records, {} label-noised, {} with abnormal values",
        table.n(),
        truth.n_label_noised(),
        truth.n_feature_corrupted()
    );
    Ok(())
}

pub fn preprocess(l: &Layout, config: &PipelineConfig) -> Result<()> {
    let table = load_table(l)?;
    let split = split_indices(table.n(), &config.split)?;
    let state = preprocess::fit(&table.select(&split.train), config.iqr_multiplier)?;
    let (encoded, summary) = state.transform_with_summary(&table)?;
    for (col, n) in &summary.unseen {
        log::warn!("{col}: {n} values outside the training vocabulary");
    }
    write_split_ids(&l.file(SPLIT_FILE), &table, &split)?;
    state.save(&l.file(STATE_FILE))?;
    encoded.write_csv(&l.file(ENCODED_FILE), &table.ids())?;
    log::info!(
        "{} records encoded to {} columns ({}/{}/{} split)",
        table.n(),
        encoded.n_cols(),
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    Ok(())
}

fn fine_targets(table: &DataTable, idx: &[usize]) -> Result<Vec<usize>> {
    idx.iter()
        .map(|&i| {
            let r = &table.rows()[i];
            r.label.map(|l| l.ordinal()).ok_or_else(|| anyhow!("record {:?} has no label", r.id))
        })
        .collect()
}

pub fn select_features(l: &Layout, config: &PipelineConfig, exclude: Option<&Path>) -> Result<()> {
    let table = load_table(l)?;
    let state = load_state(l, &table)?;
    let split = load_split(l, &table)?;
    let x = state.transform(&table.select(&split.train))?;
    let y = fine_targets(&table, &split.train)?;
    let forest = fit_forest(&x, &y, N_FINE, config.forest)?;
    let by_source = aggregate_importance(&forest.feature_importance(), &state.column_sources())?;
    let ranked = rank_features(&by_source);
    let excluded = match exclude {
        Some(p) => read_excludelist(p)?,
        None => Vec::new(),
    };
    let mut keep = clear_core::trees::select_features(&ranked, &excluded, config.top_features);
    write_importance_csv(&l.file("feature_importance.csv"), &ranked)?;
    let mut listing = keep.join("\n");
    listing.push('\n');
    write_atomic(&l.file("selected_features.txt"), listing.as_bytes())?;
    // Imputation groups by the group key, so it stays in the reduced schema.
    if let Some(g) = table.schema().group_key_index() {
        let name = &table.schema().columns[g].name;
        if !keep.contains(name) {
            keep.push(name.clone());
        }
    }
    table.schema().restrict(&keep)?.save(&l.file("schema_selected.json"))?;
    log::info!("kept {} of {} columns", keep.len(), table.schema().columns.len());
    Ok(())
}

pub fn pretrain(l: &Layout, config: &PipelineConfig) -> Result<()> {
    let table = load_table(l)?;
    let state = load_state(l, &table)?;
    let split = load_split(l, &table)?;
    let encoded = state.transform(&table)?;
    let out = scarf::pretrain(
        &config.scarf,
        &encoded.select_rows(&split.train),
        Some(&encoded.select_rows(&split.val)),
    )?;
    out.weights.save(&l.file(WEIGHTS_FILE))?;
    write_history_csv(&l.file(HISTORY_FILE), &out.history)?;
    if let (Some(first), Some(last)) = (out.history.first(), out.history.last()) {
        log::info!("train loss {:.4} -> {:.4}", first.train_loss, last.train_loss);
    }
    Ok(())
}

pub fn embed(l: &Layout) -> Result<()> {
    let table = load_table(l)?;
    let state = load_state(l, &table)?;
    let weights = EncoderWeights::load(&l.file(WEIGHTS_FILE)).with_context(|| "run `pretrain` first".to_string())?;
    let latent = encode(&weights, &state.transform(&table)?)?;
    let store = EmbeddingStore::new(table.ids(), latent, Some(table.labels()))?;
    store.write_csv(&l.file(EMBEDDINGS_FILE))?;
    Ok(())
}

pub fn project(l: &Layout, components: usize) -> Result<()> {
    let store = load_store(l)?;
    let basis = pca_fit(store.vectors(), components)?;
    let projected = basis.project(store.vectors())?;
    write_projection_csv(&l.file("projection.csv"), &store, &projected)?;
    write_json(&l.file("pca.json"), &basis)?;
    log::info!("explained variance ratio {:?}", basis.explained_variance_ratio);
    Ok(())
}

pub fn neighbors(l: &Layout, id: &str, k: usize, metric: Metric) -> Result<()> {
    let store = load_store(l)?;
    let found = store.knn_where(id, k, metric, |i| store.label(i).is_some())?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for n in found {
        let level = store.label(n.position).map_or("", |b| b.fine());
        writeln!(out, "{},{},{}", n.id, level, fmt_f64(n.distance))?;
    }
    Ok(())
}

pub fn audit(l: &Layout, config: &PipelineConfig, tables: usize) -> Result<()> {
    let store = load_store(l)?;
    let report = audit_all(&store, &config.audit)?;
    report.write_csv(&l.file(REPORT_FILE))?;
    report.write_summary(&l.file(SUMMARY_FILE))?;

    let raw = load_table(l)?;
    let state = load_state(l, &raw)?;
    let numeric: Vec<String> = raw
        .schema()
        .columns
        .iter()
        .filter(|c| c.kind == ColumnKind::Numeric)
        .map(|c| c.name.clone())
        .collect();
    write_box_plot_csv(&l.file("box_plot.csv"), &box_plot_summary(&raw, &numeric)?)?;

    let table_dir = l.file("feature_tables");
    if table_dir.exists() {
        std::fs::remove_dir_all(&table_dir).with_context(|| format!("clearing {}", table_dir.display()))?;
    }
    let mut flagged: Vec<_> = report.findings.iter().filter(|f| f.flagged).collect();
    flagged.sort_by(|a, b| b.spread.cmp(&a.spread).then_with(|| a.ref_id.cmp(&b.ref_id)));
    if tables > 0 && !flagged.is_empty() {
        std::fs::create_dir_all(&table_dir)?;
        let fences = fences_from_state(&state);
        for f in flagged.iter().take(tables) {
            feature_table(&raw, f, &numeric, &fences)?.write_csv(&table_dir.join(format!("{}.csv", f.ref_id)))?;
        }
    }
    let s = &report.summary;
    println!("audited {} records, flagged {} ({:.2}%)", s.n_audited, s.n_flagged, 100.0 * s.flag_rate);
    Ok(())
}

fn granularities(g: GranularityArg) -> Vec<Granularity> {
    match g {
        GranularityArg::Fine => vec![Granularity::Fine],
        GranularityArg::Coarse => vec![Granularity::Coarse],
        GranularityArg::Both => vec![Granularity::Fine, Granularity::Coarse],
    }
}

pub fn baseline(l: &Layout, config: &PipelineConfig, g: GranularityArg, model: ModelArg) -> Result<()> {
    let table = load_table(l)?;
    let state = load_state(l, &table)?;
    let split = load_split(l, &table)?;
    let encoded = state.transform(&table)?;
    let prepared = Prepared { split, state, encoded };
    for granularity in granularities(g) {
        let result = match model {
            ModelArg::Mlp => {
                let mut c = config.classifier.clone();
                c.granularity = granularity;
                pipeline::baseline(&table, &prepared, &c)?
            }
            ModelArg::Forest => {
                let classes = |idx: &[usize]| -> Result<Vec<usize>> {
                    let fine = fine_targets(&table, idx)?;
                    Ok(match granularity {
                        Granularity::Fine => fine,
                        Granularity::Coarse => clear_core::supervised::coarsen_classes(&fine),
                    })
                };
                let x_train = prepared.encoded.select_rows(&prepared.split.train);
                let forest = fit_forest(&x_train, &classes(&prepared.split.train)?, granularity.n_classes(), config.forest)?;
                let pred = forest.predict(&prepared.encoded.select_rows(&prepared.split.test));
                evaluate(&classes(&prepared.split.test)?, &pred, granularity.n_classes())?
            }
        };
        let tag = format!(
            "{}_{}",
            match model {
                ModelArg::Mlp => "mlp",
                ModelArg::Forest => "forest",
            },
            match granularity {
                Granularity::Fine => "fine",
                Granularity::Coarse => "coarse",
            }
        );
        result.write_json(&l.file(&format!("eval_{tag}.json")))?;
        result.write_confusion_csv(&l.file(&format!("confusion_{tag}.csv")))?;
        println!("{tag}: accuracy {:.4}, macro-F1 {:.4}", result.accuracy, result.macro_f1);
    }
    Ok(())
}

pub fn report(l: &Layout) -> Result<()> {
    let summary_path = l.file(SUMMARY_FILE);
    if !summary_path.exists() {
        bail!("{} not found; run `audit` first", summary_path.display());
    }
    let audit: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&summary_path)?)
        .with_context(|| format!("parsing {}", summary_path.display()))?;

    let mut evaluations = BTreeMap::new();
    let mut entries: Vec<_> = std::fs::read_dir(&l.dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let name = e.file_name().to_string_lossy().into_owned();
        if let Some(tag) = name.strip_prefix("eval_").and_then(|n| n.strip_suffix(".json")) {
            let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(e.path())?)
                .with_context(|| format!("parsing {name}"))?;
            evaluations.insert(tag.to_string(), v);
        }
    }

    let truth_path = l.file(TRUTH_FILE);
    let detection = if truth_path.exists() {
        let truth = read_ground_truth(&truth_path)?;
        let flags = read_report_flags(&l.file(REPORT_FILE))?;
        let flagged: Vec<&str> = flags.iter().filter(|f| f.1).map(|f| f.0.as_str()).collect();
        Some(score_flags(&flagged, flags.len(), &truth.label_noised_ids()))
    } else {
        None
    };

    let bundle = serde_json::json!({
        "audit": audit,
        "evaluations": evaluations,
        "detection": detection,
    });
    write_json(&l.file("report.json"), &bundle)?;
    println!("{}", l.file("report.json").display());
    Ok(())
}
