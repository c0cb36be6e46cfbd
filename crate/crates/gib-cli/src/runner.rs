//! Experiment execution: resolve a corpus, cross-validate every variant a
//! spec asks for, and persist metrics, manifest, tables, and figures.

use crate::figure::render_figure;
use crate::spec::{AblationVariant, CorpusSource, ExperimentSpec, SpecError, SweepAxis};
use crate::tables::{mean_stdev_table, mean_table};
use gib_core::backbone::BackboneKind;
use gib_core::channel::ChannelConfig;
use gib_core::dataset::{
    generate_synthetic, kfold_split, parse_tudataset, Corpus, DatasetError, FoldSplit,
};
use gib_core::backbone::GraphTensors;
use gib_core::report::{write_metrics_csv, MetricsRecord};
use gib_core::trainer::{assignment_probabilities, cross_validate, TrainConfig, TrainError};
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Error, Debug)]
pub enum RunError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

impl RunError {
    /// Process exit code: 2 for anything the user wrote wrong, 3 for
    /// failures at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Spec(_) => 2,
            RunError::Dataset(DatasetError::MissingFile(_)) => 3,
            RunError::Dataset(_) => 3,
            RunError::Train(TrainError::Argument(_)) => 2,
            _ => 3,
        }
    }
}

/// One named training configuration inside an experiment.
#[derive(Clone, Debug)]
struct Variant {
    label: String,
    beta: f64,
    alpha: f64,
    hidden_dim: usize,
}

/// Everything a finished run leaves on disk.
pub struct RunArtifacts {
    pub records: Vec<MetricsRecord>,
    pub output_dir: PathBuf,
    pub metrics_path: PathBuf,
    pub manifest_path: PathBuf,
    pub figure_path: PathBuf,
    pub tables_path: Option<PathBuf>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    format: &'static str,
    command: &'a str,
    spec: &'a ExperimentSpec,
    fold_seconds: &'a BTreeMap<String, Vec<f64>>,
    total_seconds: f64,
}

pub const MANIFEST_FORMAT: &str = "gib-manifest-v1";

pub fn resolve_corpus(spec: &ExperimentSpec) -> Result<Corpus, RunError> {
    match spec.corpus {
        CorpusSource::Synthetic => {
            Ok(generate_synthetic(spec.synthetic_count, spec.synthetic_seed)?)
        }
        CorpusSource::Tudataset => {
            let path = spec.tudataset_path.as_ref().expect("validated");
            let name = spec.tudataset_name.as_ref().expect("validated");
            Ok(parse_tudataset(path, name)?)
        }
    }
}

/// Decide where artifacts land: explicit absolute dir wins; otherwise the
/// output root (flag or `GIB_OUTPUT_ROOT` or `.`) joined with the spec's
/// relative dir or name.
pub fn resolve_output_dir(spec: &ExperimentSpec, root: Option<&Path>) -> PathBuf {
    let root = root
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os("GIB_OUTPUT_ROOT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    match &spec.output_dir {
        Some(dir) if dir.is_absolute() => dir.clone(),
        Some(dir) => root.join(dir),
        None => root.join(&spec.name),
    }
}

fn variant_config(spec: &ExperimentSpec, variant: &Variant) -> TrainConfig {
    let mut config = spec.train_config();
    config.beta = variant.beta;
    config.alpha = variant.alpha;
    config.hidden_dim = variant.hidden_dim;
    config
}

/// Train + evaluate one variant over all folds; emit one record per
/// (fold, sweep point).
#[allow(clippy::too_many_arguments)]
fn run_variant(
    spec: &ExperimentSpec,
    variant: &Variant,
    corpus: &Corpus,
    split: &FoldSplit,
    settings: &[(f64, ChannelConfig)],
    axis_name: &str,
    fold_seconds: &mut BTreeMap<String, Vec<f64>>,
    assignment_sink: Option<&mut Vec<u8>>,
) -> Result<Vec<MetricsRecord>, RunError> {
    let config = variant_config(spec, variant);
    let channels: Vec<ChannelConfig> = settings.iter().map(|(_, c)| *c).collect();
    let cv = cross_validate(corpus, split, &channels, &config)?;

    let seconds: Vec<f64> = cv.folds.iter().map(|f| f.train_seconds).collect();
    fold_seconds.insert(variant.label.clone(), seconds.clone());

    if let Some(sink) = assignment_sink {
        use std::io::Write;
        let tensors: Vec<GraphTensors> =
            corpus.graphs.iter().map(GraphTensors::from_graph).collect();
        // every graph appears once, dumped by the fold that held it out
        for (fold, outcome) in cv.folds.iter().enumerate() {
            for gi in split.fold_indices(fold) {
                let probs = assignment_probabilities(&outcome.model, &tensors[gi])
                    .map_err(RunError::Train)?;
                for (node, p) in probs.iter().enumerate() {
                    writeln!(sink, "{},{fold},{gi},{node},{p}", variant.label)
                        .map_err(RunError::Io)?;
                }
            }
        }
    }

    let mut records = Vec::new();
    for (fold, evals) in cv.evaluations.iter().enumerate() {
        for ((axis_value, _), eval) in settings.iter().zip(evals) {
            records.push(MetricsRecord {
                experiment: spec.name.clone(),
                variant: variant.label.clone(),
                backbone: match spec.backbone {
                    BackboneKind::Gcn => "gcn".into(),
                    BackboneKind::Gin => "gin".into(),
                },
                hidden_dim: variant.hidden_dim,
                fold,
                axis_name: axis_name.to_string(),
                axis_value: *axis_value,
                accuracy: eval.accuracy,
                loss: eval.loss,
                epoch: spec.epochs,
                seed: eval.channel_seed,
                wall_time_s: if spec.record_timing { seconds[fold] } else { 0.0 },
            });
        }
    }
    Ok(records)
}

fn sweep_settings(spec: &ExperimentSpec) -> Vec<(f64, ChannelConfig)> {
    spec.sweep_values
        .iter()
        .map(|&v| (v, spec.eval_channel(v)))
        .collect()
}

fn sort_records(records: &mut [MetricsRecord]) {
    records.sort_by(|a, b| {
        a.variant
            .cmp(&b.variant)
            .then(a.axis_value.partial_cmp(&b.axis_value).expect("finite axis"))
            .then(a.fold.cmp(&b.fold))
    });
}

#[allow(clippy::too_many_arguments)]
fn write_artifacts(
    spec: &ExperimentSpec,
    command: &str,
    records: Vec<MetricsRecord>,
    fold_seconds: BTreeMap<String, Vec<f64>>,
    total_seconds: f64,
    tables: Option<String>,
    assignments: Option<Vec<u8>>,
    output_dir: PathBuf,
) -> Result<RunArtifacts, RunError> {
    std::fs::create_dir_all(&output_dir)?;
    if let Some(rows) = assignments {
        let mut csv = b"variant,fold,graph,node,p_subgraph\n".to_vec();
        csv.extend(rows);
        std::fs::write(output_dir.join("assignments.csv"), csv)?;
    }
    let metrics_path = output_dir.join("metrics.csv");
    let mut csv = Vec::new();
    write_metrics_csv(&mut csv, &records)?;
    std::fs::write(&metrics_path, csv)?;

    let manifest_path = output_dir.join("manifest.json");
    let manifest = Manifest {
        format: MANIFEST_FORMAT,
        command,
        spec,
        fold_seconds: &fold_seconds,
        total_seconds,
    };
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;

    let figure_path = output_dir.join("figure.svg");
    let title = format!("{}: accuracy vs {}", spec.name, records.first().map_or("axis", |r| r.axis_name.as_str()));
    std::fs::write(&figure_path, render_figure(&records, &title))?;

    let tables_path = match tables {
        Some(text) => {
            let p = output_dir.join("ablation_tables.txt");
            std::fs::write(&p, text)?;
            Some(p)
        }
        None => None,
    };

    Ok(RunArtifacts { records, output_dir, metrics_path, manifest_path, figure_path, tables_path })
}

fn install_pool<T>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> T
where
    T: Send,
{
    match workers {
        Some(n) if n > 0 => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("thread pool")
            .install(f),
        _ => f(),
    }
}

/// The `run` command: one variant per sweep (plus one per beta value when
/// the sweep axis is beta).
pub fn run_experiment(
    spec: &ExperimentSpec,
    output_root: Option<&Path>,
) -> Result<RunArtifacts, RunError> {
    spec.validate()?;
    let corpus = resolve_corpus(spec)?;
    let split = kfold_split(&corpus, spec.folds, spec.fold_seed)?;
    let output_dir = resolve_output_dir(spec, output_root);

    let started = std::time::Instant::now();
    let mut fold_seconds = BTreeMap::new();
    let mut records = Vec::new();
    let mut assignments = spec.dump_assignments.then(Vec::new);

    install_pool(spec.workers, || -> Result<(), RunError> {
        match spec.sweep_axis {
            SweepAxis::Beta => {
                // each sweep value is a beta; evaluation runs over eval_snrs
                let settings: Vec<(f64, ChannelConfig)> = spec
                    .eval_snrs
                    .iter()
                    .map(|&snr| (snr, spec.eval_channel(snr)))
                    .collect();
                for &beta in &spec.sweep_values {
                    let variant = Variant {
                        label: format!("beta={beta}"),
                        beta,
                        alpha: spec.alpha,
                        hidden_dim: spec.hidden_dim,
                    };
                    records.extend(run_variant(
                        spec,
                        &variant,
                        &corpus,
                        &split,
                        &settings,
                        "snr_db",
                        &mut fold_seconds,
                        assignments.as_mut(),
                    )?);
                }
            }
            _ => {
                let settings = sweep_settings(spec);
                let variant = Variant {
                    label: variant_base_label(spec),
                    beta: if spec.drop_l_mi { 0.0 } else { spec.beta },
                    alpha: if spec.drop_l_con { 0.0 } else { spec.alpha },
                    hidden_dim: spec.hidden_dim,
                };
                records.extend(run_variant(
                    spec,
                    &variant,
                    &corpus,
                    &split,
                    &settings,
                    spec.sweep_axis.name(),
                    &mut fold_seconds,
                    assignments.as_mut(),
                )?);
            }
        }
        Ok(())
    })?;

    sort_records(&mut records);
    write_artifacts(
        spec,
        "run",
        records,
        fold_seconds,
        started.elapsed().as_secs_f64(),
        None,
        assignments,
        output_dir,
    )
}

fn variant_base_label(spec: &ExperimentSpec) -> String {
    match (spec.drop_l_mi, spec.drop_l_con) {
        (false, false) => "full".into(),
        (true, false) => "no_l_mi".into(),
        (false, true) => "no_l_con".into(),
        (true, true) => "no_l_mi_no_l_con".into(),
    }
}

/// The `ablate` command: every requested variant shares the corpus, the
/// fold split, and the master seed, so differences are attributable to
/// the ablated term alone.
pub fn ablation_matrix(
    spec: &ExperimentSpec,
    output_root: Option<&Path>,
) -> Result<RunArtifacts, RunError> {
    spec.validate()?;
    if spec.sweep_axis == SweepAxis::Beta {
        return Err(RunError::Spec(SpecError::Invalid(
            "ablate needs a channel sweep axis; beta values come from beta_sweep".into(),
        )));
    }
    let corpus = resolve_corpus(spec)?;
    let split = kfold_split(&corpus, spec.folds, spec.fold_seed)?;
    let output_dir = resolve_output_dir(spec, output_root);
    let settings = sweep_settings(spec);
    let axis_name = spec.sweep_axis.name();

    // assemble the variant set; BTreeMap keys dedupe repeated requests
    let mut variants: BTreeMap<String, Variant> = BTreeMap::new();
    let wants = |v: AblationVariant| spec.ablations.contains(&v);
    let dim_comparison = wants(AblationVariant::Full)
        && wants(AblationVariant::NoLMi)
        && spec.hidden_dims.len() > 1;
    if wants(AblationVariant::Full) {
        for &dim in dims_for(spec, dim_comparison).iter() {
            let label = dim_label("full", dim, dim_comparison);
            variants.insert(
                label.clone(),
                Variant { label, beta: spec.beta, alpha: spec.alpha, hidden_dim: dim },
            );
        }
    }
    if wants(AblationVariant::NoLMi) {
        for &dim in dims_for(spec, dim_comparison).iter() {
            let label = dim_label("no_l_mi", dim, dim_comparison);
            variants.insert(
                label.clone(),
                Variant { label, beta: 0.0, alpha: spec.alpha, hidden_dim: dim },
            );
        }
    }
    if wants(AblationVariant::NoLCon) {
        let label = "no_l_con".to_string();
        variants.insert(
            label.clone(),
            Variant { label, beta: spec.beta, alpha: 0.0, hidden_dim: spec.hidden_dim },
        );
        // the paired full run at the spec's dim for the stdev table
        if !wants(AblationVariant::Full) || dim_comparison {
            let label = "full".to_string();
            variants.entry(label.clone()).or_insert(Variant {
                label,
                beta: spec.beta,
                alpha: spec.alpha,
                hidden_dim: spec.hidden_dim,
            });
        }
    }
    if wants(AblationVariant::BetaSweep) {
        for &beta in &spec.beta_sweep {
            let label = format!("beta={beta}");
            variants.insert(
                label.clone(),
                Variant { label, beta, alpha: spec.alpha, hidden_dim: spec.hidden_dim },
            );
        }
    }
    if variants.is_empty() {
        return Err(RunError::Spec(SpecError::Invalid(
            "ablations selects no variants".into(),
        )));
    }

    let started = std::time::Instant::now();
    let mut fold_seconds = BTreeMap::new();
    let mut records = Vec::new();
    let mut assignments = spec.dump_assignments.then(Vec::new);
    install_pool(spec.workers, || -> Result<(), RunError> {
        for variant in variants.values() {
            records.extend(run_variant(
                spec,
                variant,
                &corpus,
                &split,
                &settings,
                axis_name,
                &mut fold_seconds,
                assignments.as_mut(),
            )?);
        }
        Ok(())
    })?;
    sort_records(&mut records);

    // comparison tables in the shapes the ablation studies report
    let mut tables = String::new();
    if dim_comparison {
        for method in ["full", "no_l_mi"] {
            let labels: Vec<String> = spec
                .hidden_dims
                .iter()
                .map(|&d| dim_label(method, d, true))
                .collect();
            tables.push_str(&format!("=== {method}: hidden-dimension comparison ===\n"));
            tables.push_str(&mean_table(&records, &labels, true));
            tables.push('\n');
        }
    }
    if wants(AblationVariant::NoLCon) {
        tables.push_str("=== full vs no_l_con: mean and stdev ===\n");
        tables.push_str(&mean_stdev_table(
            &records,
            &["full".to_string(), "no_l_con".to_string()],
        ));
        tables.push('\n');
    }
    if wants(AblationVariant::BetaSweep) {
        let labels: Vec<String> =
            spec.beta_sweep.iter().map(|b| format!("beta={b}")).collect();
        tables.push_str("=== beta sweep ===\n");
        tables.push_str(&mean_table(&records, &labels, false));
        tables.push('\n');
    }

    write_artifacts(
        spec,
        "ablate",
        records,
        fold_seconds,
        started.elapsed().as_secs_f64(),
        Some(tables),
        assignments,
        output_dir,
    )
}

fn dims_for(spec: &ExperimentSpec, dim_comparison: bool) -> Vec<usize> {
    if dim_comparison {
        spec.hidden_dims.clone()
    } else {
        vec![spec.hidden_dim]
    }
}

fn dim_label(method: &str, dim: usize, dim_comparison: bool) -> String {
    if dim_comparison {
        format!("{method} dim-{dim}")
    } else {
        method.to_string()
    }
}

/// The `plot` command: regenerate the figure from a metrics file alone.
pub fn plot_from_csv(metrics_path: &Path, output: Option<&Path>) -> Result<PathBuf, RunError> {
    let content = std::fs::read_to_string(metrics_path)?;
    let records = gib_core::report::parse_metrics_csv(&content)
        .map_err(|e| RunError::Spec(SpecError::Invalid(e)))?;
    let title = records
        .first()
        .map_or("metrics".to_string(), |r| {
            format!("{}: accuracy vs {}", r.experiment, r.axis_name)
        });
    let svg = render_figure(&records, &title);
    let out = output
        .map(Path::to_path_buf)
        .unwrap_or_else(|| metrics_path.with_extension("svg"));
    std::fs::write(&out, svg)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smoke_spec() -> ExperimentSpec {
        serde_json::from_value(serde_json::json!({
            "name": "smoke",
            "corpus": "synthetic",
            "synthetic_count": 40,
            "synthetic_seed": 3,
            "folds": 2,
            "epochs": 2,
            "batch_size": 8,
            "hidden_dim": 4,
            "inner_steps": 1,
            "sweep_axis": "snr_db",
            "sweep_values": [5.0, 25.0],
            "workers": 1
        }))
        .unwrap()
    }

    #[test]
    fn run_writes_all_three_artifacts() {
        let tmp = tempfile::TempDir::new().unwrap();
        let artifacts = run_experiment(&smoke_spec(), Some(tmp.path())).unwrap();
        assert!(artifacts.metrics_path.is_file());
        assert!(artifacts.manifest_path.is_file());
        assert!(artifacts.figure_path.is_file());
        // 2 folds x 2 sweep points
        assert_eq!(artifacts.records.len(), 4);
    }

    #[test]
    fn rerun_is_byte_identical() {
        let tmp1 = tempfile::TempDir::new().unwrap();
        let tmp2 = tempfile::TempDir::new().unwrap();
        let a = run_experiment(&smoke_spec(), Some(tmp1.path())).unwrap();
        let b = run_experiment(&smoke_spec(), Some(tmp2.path())).unwrap();
        let csv_a = std::fs::read(&a.metrics_path).unwrap();
        let csv_b = std::fs::read(&b.metrics_path).unwrap();
        assert_eq!(csv_a, csv_b);
    }

    #[test]
    fn manifest_reruns_without_the_spec_file() {
        let tmp = tempfile::TempDir::new().unwrap();
        let artifacts = run_experiment(&smoke_spec(), Some(tmp.path())).unwrap();
        let reloaded = ExperimentSpec::from_file(&artifacts.manifest_path).unwrap();
        assert_eq!(reloaded, smoke_spec());
    }

    #[test]
    fn ablation_shares_folds_and_emits_tables() {
        let mut spec = smoke_spec();
        spec.ablations = vec![AblationVariant::Full, AblationVariant::NoLCon];
        spec.hidden_dims = vec![4];
        let tmp = tempfile::TempDir::new().unwrap();
        let artifacts = ablation_matrix(&spec, Some(tmp.path())).unwrap();
        let tables = std::fs::read_to_string(artifacts.tables_path.as_ref().unwrap()).unwrap();
        assert!(tables.contains("full vs no_l_con"));
        let variants: std::collections::BTreeSet<String> =
            artifacts.records.iter().map(|r| r.variant.clone()).collect();
        assert!(variants.contains("full"));
        assert!(variants.contains("no_l_con"));
    }

    #[test]
    fn plot_regenerates_from_csv_only() {
        let tmp = tempfile::TempDir::new().unwrap();
        let artifacts = run_experiment(&smoke_spec(), Some(tmp.path())).unwrap();
        let out = plot_from_csv(&artifacts.metrics_path, None).unwrap();
        let svg = std::fs::read_to_string(out).unwrap();
        assert!(svg.contains("<svg"));
    }

    #[test]
    fn assignment_dump_covers_every_graph_once() {
        let mut spec = smoke_spec();
        spec.dump_assignments = true;
        let tmp = tempfile::TempDir::new().unwrap();
        let artifacts = run_experiment(&spec, Some(tmp.path())).unwrap();
        let csv =
            std::fs::read_to_string(artifacts.output_dir.join("assignments.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("variant,fold,graph,node,p_subgraph"));
        let mut graphs_seen = std::collections::BTreeSet::new();
        for line in lines {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields.len(), 5);
            let p: f64 = fields[4].parse().unwrap();
            assert!((0.0..=1.0).contains(&p));
            graphs_seen.insert(fields[2].to_string());
        }
        assert_eq!(graphs_seen.len(), 40, "each graph dumped by its held-out fold");
    }

    #[test]
    fn figure_equals_offline_regeneration() {
        let tmp = tempfile::TempDir::new().unwrap();
        let artifacts = run_experiment(&smoke_spec(), Some(tmp.path())).unwrap();
        let regenerated = plot_from_csv(&artifacts.metrics_path, None).unwrap();
        assert_eq!(
            std::fs::read(&artifacts.figure_path).unwrap(),
            std::fs::read(&regenerated).unwrap(),
            "figure must be a pure function of metrics.csv"
        );
    }

    #[test]
    fn shipped_specs_parse_and_validate() {
        let specs_dir =
            std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../specs");
        let mut checked = 0;
        for entry in std::fs::read_dir(specs_dir).unwrap() {
            let path = entry.unwrap().path();
            if path.extension().and_then(|e| e.to_str()) == Some("json") {
                let spec = ExperimentSpec::from_file(&path)
                    .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
                spec.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
                checked += 1;
            }
        }
        assert!(checked >= 6, "expected the shipped spec set, found {checked}");
    }

    #[test]
    fn smoke_spec_finishes_inside_its_budget() {
        // 200 graphs, 10 epochs, 2 folds, 2 sweep points: the documented
        // end-to-end smoke run budget is five minutes
        let specs_dir =
            std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../specs");
        let spec = ExperimentSpec::from_file(&specs_dir.join("synthetic-smoke.json")).unwrap();
        let tmp = tempfile::TempDir::new().unwrap();
        let started = std::time::Instant::now();
        let artifacts = run_experiment(&spec, Some(tmp.path())).unwrap();
        let elapsed = started.elapsed().as_secs_f64();
        assert!(artifacts.metrics_path.is_file());
        assert!(artifacts.manifest_path.is_file());
        assert!(artifacts.figure_path.is_file());
        assert!(elapsed < 300.0, "smoke run took {elapsed:.0}s");
    }
}
