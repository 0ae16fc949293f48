//! Sweeps over method × sparsity × seed with equal training budgets,
//! evaluation, checkpointing and result persistence.

mod checkpoint;
mod config;
mod report;

pub use checkpoint::{decode, encode, load_checkpoint, save_checkpoint};
pub use config::{DatasetSelector, ExperimentConfig, ModelSelector};
pub use report::{pivot_table, report};

use std::fs::File;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{build_model, Model, ModelSpec};
use crate::prune::{
    drive_pipeline, imp_pipeline, make_schedule, snip_pipeline, synflow_pipeline, PruneMethod,
    PruneReport,
};
use crate::seeds::SeedStreams;
use crate::tensor::Tensor;
use crate::train::train_fresh;

pub const RESULTS_FILE: &str = "results.csv";

/// One (method, sparsity, seed) outcome. Field order is the CSV column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: PruneMethod,
    pub model: String,
    pub dataset: String,
    pub target_sparsity: f64,
    pub achieved_sparsity: f64,
    pub seed: u64,
    pub pretrain_epochs: usize,
    pub train_epochs: usize,
    pub test_accuracy: f64,
    pub prune_seconds: f64,
    pub train_seconds: f64,
    /// Semicolon-separated layer indices.
    pub collapsed_layers: String,
}

impl RunResult {
    /// True when at least one layer lost every weight. Failed runs carry
    /// their error text in the same column and are not counted.
    pub fn collapsed(&self) -> bool {
        !self.collapsed_layers.is_empty() && !self.collapsed_layers.starts_with("error")
    }

    pub fn failed(&self) -> bool {
        self.test_accuracy.is_nan()
    }

    fn sort_key(&self) -> (PruneMethod, u64, u64) {
        (self.method, self.target_sparsity.to_bits(), self.seed)
    }
}

/// Splits the budget so early training is charged against it.
pub fn allocate_epochs(total: usize, pretrain: usize) -> Result<(usize, usize)> {
    if pretrain >= total {
        return Err(Error::BudgetExceeded { total, pretrain });
    }
    Ok((pretrain, total - pretrain))
}

/// Fraction of rows whose arg-max (lowest index on ties) equals the label.
pub fn accuracy_from_logits(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, k) = logits.as_matrix()?;
    if n == 0 || labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if labels.len() != n {
        return Err(Error::DimensionMismatch(format!("{} labels for {n} rows", labels.len())));
    }
    let correct = logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &label)| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best == label
        })
        .count();
    Ok(correct as f64 / n as f64)
}

pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    const CHUNK: usize = 512;
    let mut correct = 0.0;
    let idx: Vec<usize> = (0..dataset.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let batch = dataset.batch(chunk);
        let logits = model.forward_logits(&batch.x)?;
        let crate::nn::Target::Classes(labels) = &batch.target else {
            unreachable!("datasets carry class labels")
        };
        correct += accuracy_from_logits(&logits, labels)? * chunk.len() as f64;
    }
    Ok(correct / dataset.len() as f64)
}

/// Views `data` with the model's per-sample input shape when only the layout differs.
pub fn fit_to_model(data: &Dataset, spec: &ModelSpec) -> Result<Dataset> {
    if data.sample_shape() == spec.input_shape.as_slice() {
        return Ok(data.clone());
    }
    let have: usize = data.sample_shape().iter().product();
    let want: usize = spec.input_shape.iter().product();
    if have != want {
        return Err(Error::DimensionMismatch(format!(
            "dataset samples {:?} cannot feed model input {:?}",
            data.sample_shape(),
            spec.input_shape
        )));
    }
    data.reshaped(&spec.input_shape)
}

/// Shared, read-only inputs for every run of a sweep.
pub struct SweepContext {
    pub config: ExperimentConfig,
    pub spec: ModelSpec,
    pub train: Dataset,
    pub test: Dataset,
    pub dataset_label: String,
}

impl SweepContext {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let (train, test) = config.dataset.load()?;
        let spec = config.model.resolve(train.sample_shape(), train.classes())?;
        let train = fit_to_model(&train, &spec)?;
        let test = fit_to_model(&test, &spec)?;
        Ok(SweepContext {
            dataset_label: config.dataset.label(),
            config,
            spec,
            train,
            test,
        })
    }

    /// Builds the model from `seed` and runs `method`'s pipeline on it.
    pub fn prune(&self, method: PruneMethod, kappa: f64, seed: u64) -> Result<(Model, PruneReport)> {
        let cfg = &self.config;
        let streams = SeedStreams::from_seed(seed);
        let model = build_model(self.spec.clone(), streams.init)?;
        let settings = cfg.train_settings();
        match method {
            PruneMethod::Magnitude => imp_pipeline(
                model,
                &self.train,
                cfg.imp_cycles,
                cfg.imp_epochs_per_cycle,
                kappa,
                &settings,
                &streams,
            ),
            PruneMethod::Snip => snip_pipeline(model, &self.train, kappa, cfg.batch_size, &streams),
            PruneMethod::Synflow => synflow_pipeline(model, kappa, cfg.prune_iterations),
            PruneMethod::Drive => drive_pipeline(
                model,
                &self.train,
                cfg.pretrain_epochs,
                &make_schedule(kappa, cfg.prune_iterations)?,
                &settings,
                &streams,
            ),
        }
    }

    /// Prune, train the sparse model for the remaining budget, evaluate.
    pub fn run(&self, method: PruneMethod, kappa: f64, seed: u64) -> RunResult {
        self.run_keep(method, kappa, seed).0
    }

    /// As [`SweepContext::run`], also returning the trained sparse model
    /// when the run succeeded.
    pub fn run_keep(&self, method: PruneMethod, kappa: f64, seed: u64) -> (RunResult, Option<Model>) {
        let cfg = &self.config;
        let pretrain = if method == PruneMethod::Drive {
            cfg.pretrain_epochs
        } else {
            0
        };
        let mut result = RunResult {
            method,
            model: self.spec.name.clone(),
            dataset: self.dataset_label.clone(),
            target_sparsity: kappa,
            achieved_sparsity: f64::NAN,
            seed,
            pretrain_epochs: pretrain,
            train_epochs: cfg.total_epochs.saturating_sub(pretrain),
            test_accuracy: f64::NAN,
            prune_seconds: f64::NAN,
            train_seconds: f64::NAN,
            collapsed_layers: String::new(),
        };
        let outcome = (|| -> Result<Model> {
            let (pretrain, post) = allocate_epochs(cfg.total_epochs, pretrain)?;
            let (mut model, report) = self.prune(method, kappa, seed)?;
            result.achieved_sparsity = report.achieved_sparsity;
            result.prune_seconds = report.prune_seconds;
            result.collapsed_layers = report
                .collapsed_layers
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(";");
            let t0 = Instant::now();
            let streams = SeedStreams::from_seed(seed);
            train_fresh(
                &mut model,
                &self.train,
                &cfg.train_settings(),
                pretrain..pretrain + post,
                streams.shuffle,
            )?;
            result.train_seconds = report.train_seconds + t0.elapsed().as_secs_f64();
            result.test_accuracy = evaluate(&model, &self.test)?;
            Ok(model)
        })();
        match outcome {
            Ok(model) => (result, Some(model)),
            Err(e) => {
                log::error!("run failed method={method} kappa={kappa} seed={seed}: {e}");
                result.test_accuracy = f64::NAN;
                if result.collapsed_layers.is_empty() {
                    result.collapsed_layers = format!("error: {e}");
                }
                (result, None)
            }
        }
    }
}

fn results_writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().has_headers(true).from_writer(file))
}

pub fn write_results(path: &Path, results: &[RunResult]) -> Result<()> {
    let mut w = results_writer(path)?;
    if results.is_empty() {
        w.write_record(RESULT_COLUMNS)?;
    }
    for r in results {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub const RESULT_COLUMNS: [&str; 12] = [
    "method",
    "model",
    "dataset",
    "target_sparsity",
    "achieved_sparsity",
    "seed",
    "pretrain_epochs",
    "train_epochs",
    "test_accuracy",
    "prune_seconds",
    "train_seconds",
    "collapsed_layers",
];

pub fn read_results(path: &Path) -> Result<Vec<RunResult>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let headers = r.headers()?.clone();
    if headers.is_empty() {
        return Ok(Vec::new());
    }
    if headers.iter().ne(RESULT_COLUMNS) {
        return Err(Error::Config(format!(
            "{} does not have the results columns",
            path.display()
        )));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Runs every (method, κ, seed) combination. Rows are appended to
/// `<output_dir>/results.csv` as runs finish; once the sweep completes the
/// file is rewritten in (method, κ, seed) order. Failed runs are recorded
/// with a NaN accuracy and the sweep continues.
pub fn run_sweep(config: &ExperimentConfig) -> Result<Vec<RunResult>> {
    let ctx = SweepContext::new(config.clone())?;
    let out_dir = &config.output_dir;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path: PathBuf = out_dir.join(RESULTS_FILE);

    let mut jobs = Vec::new();
    for &method in &config.methods {
        for &kappa in &config.sparsities {
            for &seed in &config.seeds {
                jobs.push((method, kappa, seed));
            }
        }
    }
    log::info!(
        "sweep name={} runs={} workers={} out={}",
        config.name,
        jobs.len(),
        config.workers,
        path.display()
    );

    let mut writer = results_writer(&path)?;
    writer.write_record(RESULT_COLUMNS)?;
    writer.flush().map_err(|e| Error::io(&path, e))?;

    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<RunResult>();
    let mut results = Vec::with_capacity(jobs.len());
    let total = jobs.len();
    std::thread::scope(|scope| -> Result<()> {
        for _ in 0..config.workers.min(total.max(1)) {
            let tx = tx.clone();
            let (ctx, jobs, next) = (&ctx, &jobs, &next);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(method, kappa, seed)) = jobs.get(i) else {
                    break;
                };
                if tx.send(ctx.run(method, kappa, seed)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for r in rx {
            writer.serialize(&r)?;
            writer.flush().map_err(|e| Error::io(&path, e))?;
            log::info!(
                "run {}/{} method={} kappa={} seed={} sparsity={:.6} acc={:.4} prune_s={:.3} train_s={:.3} collapsed=[{}]",
                results.len() + 1,
                total,
                r.method,
                r.target_sparsity,
                r.seed,
                r.achieved_sparsity,
                r.test_accuracy,
                r.prune_seconds,
                r.train_seconds,
                r.collapsed_layers
            );
            results.push(r);
        }
        Ok(())
    })?;
    drop(writer);

    results.sort_by_key(RunResult::sort_key);
    let tmp = out_dir.join(format!("{RESULTS_FILE}.tmp"));
    write_results(&tmp, &results)?;
    std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    Ok(results)
}

/// Results rendered as CSV text, header included.
pub fn results_to_string(results: &[RunResult]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in results {
        w.serialize(r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Config(format!("csv buffer: {e}")))?;
    let mut s = String::from_utf8(bytes).expect("csv output is UTF-8");
    if results.is_empty() {
        s = RESULT_COLUMNS.join(",") + "\n";
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_allocation() {
        assert_eq!(allocate_epochs(50, 5).unwrap(), (5, 45));
        assert_eq!(allocate_epochs(7, 0).unwrap(), (0, 7));
        assert!(matches!(
            allocate_epochs(6, 6),
            Err(Error::BudgetExceeded { total: 6, pretrain: 6 })
        ));
    }

    #[test]
    fn accuracy_oracle_logits() {
        let labels = vec![3, 1, 4, 1, 5];
        let mut logits = Tensor::zeros(&[5, 10]);
        for (i, &l) in labels.iter().enumerate() {
            logits.data_mut()[i * 10 + l] = 10.0;
        }
        assert_eq!(accuracy_from_logits(&logits, &labels).unwrap(), 1.0);
    }

    #[test]
    fn accuracy_ties_go_to_class_zero() {
        let labels: Vec<usize> = (0..100).map(|i| i % 10).collect();
        let logits = Tensor::full(&[100, 10], 0.7);
        assert_eq!(accuracy_from_logits(&logits, &labels).unwrap(), 0.1);
    }

    #[test]
    fn results_header_matches_columns() {
        let s = results_to_string(&[]).unwrap();
        assert_eq!(s.trim_end(), RESULT_COLUMNS.join(","));
        let r = RunResult {
            method: PruneMethod::Drive,
            model: "m".into(),
            dataset: "d".into(),
            target_sparsity: 0.98,
            achieved_sparsity: 0.98,
            seed: 3,
            pretrain_epochs: 1,
            train_epochs: 5,
            test_accuracy: 0.5,
            prune_seconds: 0.25,
            train_seconds: 1.5,
            collapsed_layers: "1;2".into(),
        };
        let s = results_to_string(std::slice::from_ref(&r)).unwrap();
        assert!(s.starts_with(&RESULT_COLUMNS.join(",")));
        assert!(s.contains("drive,m,d,0.98,0.98,3,1,5,0.5,0.25,1.5,1;2"));
    }
}
