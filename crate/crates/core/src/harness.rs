//! Experiment driver: dataset specs, single trials, benchmarks and image
//! export.
//!
//! A trial draws a fresh model from `Rng::new(trial_seed)`, computes the
//! honest gradients of one dataset sample, and attacks them with the dummy
//! initialised from `trial_seed + 1`. A bench runs `trials` trials per method
//! with seeds `base_seed..base_seed + trials`, cycling through the samples,
//! so every method attacks the same (model, sample) pairs.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use crate::attack::{run_attack, AttackConfig, AttackReport, Method, DEFAULT_THRESHOLDS};
use crate::data::{encode_pnm, load_cifar100, load_image_dir, load_mnist, synthetic_dataset, Dataset, Pnm};
use crate::error::{Error, Result};
use crate::leakage::{extract_label, LabelPrediction};
use crate::model::{Architecture, Model};
use crate::tensor::{Rng, Tensor};

/// Relative dataset paths are resolved against this directory when set.
pub const DATA_DIR_ENV: &str = "GRADLEAK_DATA_DIR";

/// Where a dataset comes from, as written on the command line:
/// `mnist:<images>,<labels>`, `cifar100:<bin>`, `dir:<root>` or
/// `synthetic:<count>,<channels>,<classes>[,<seed>]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DatasetSpec {
    Mnist { images: PathBuf, labels: PathBuf },
    Cifar100 { bin: PathBuf },
    Dir { root: PathBuf },
    Synthetic { count: usize, channels: usize, classes: usize, seed: u64 },
}

impl FromStr for DatasetSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |why: &str| Error::InvalidArgument(format!("bad dataset spec {s:?}: {why}"));
        let (kind, rest) = s.split_once(':').ok_or_else(|| bad("missing ':'"))?;
        if rest.is_empty() {
            return Err(bad("nothing after ':'"));
        }
        match kind {
            "mnist" => match rest.split_once(',') {
                Some((i, l)) if !i.is_empty() && !l.is_empty() => Ok(DatasetSpec::Mnist {
                    images: i.into(),
                    labels: l.into(),
                }),
                _ => Err(bad("expected mnist:<images>,<labels>")),
            },
            "cifar100" => Ok(DatasetSpec::Cifar100 { bin: rest.into() }),
            "dir" => Ok(DatasetSpec::Dir { root: rest.into() }),
            "synthetic" => {
                let parts: Vec<&str> = rest.split(',').collect();
                if !(3..=4).contains(&parts.len()) {
                    return Err(bad("expected synthetic:<count>,<channels>,<classes>[,<seed>]"));
                }
                let num = |p: &str| p.trim().parse::<u64>().map_err(|_| bad(&format!("{p:?} is not a number")));
                let (count, channels, classes) = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
                let seed = parts.get(3).map(|p| num(p)).transpose()?.unwrap_or(0);
                if count == 0 || classes < 2 || !(channels == 1 || channels == 3) {
                    return Err(bad("need count >= 1, channels 1 or 3, classes >= 2"));
                }
                Ok(DatasetSpec::Synthetic {
                    count: count as usize,
                    channels: channels as usize,
                    classes: classes as usize,
                    seed,
                })
            }
            _ => Err(bad("unknown kind")),
        }
    }
}

impl fmt::Display for DatasetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetSpec::Mnist { images, labels } => {
                write!(f, "mnist:{},{}", images.display(), labels.display())
            }
            DatasetSpec::Cifar100 { bin } => write!(f, "cifar100:{}", bin.display()),
            DatasetSpec::Dir { root } => write!(f, "dir:{}", root.display()),
            DatasetSpec::Synthetic {
                count,
                channels,
                classes,
                seed,
            } => write!(f, "synthetic:{count},{channels},{classes},{seed}"),
        }
    }
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Dataset> {
        let base = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from);
        let resolve = |p: &Path| match &base {
            Some(b) if p.is_relative() => b.join(p),
            _ => p.to_path_buf(),
        };
        match self {
            DatasetSpec::Mnist { images, labels } => load_mnist(resolve(images), resolve(labels)),
            DatasetSpec::Cifar100 { bin } => load_cifar100(resolve(bin)),
            DatasetSpec::Dir { root } => load_image_dir(resolve(root)),
            DatasetSpec::Synthetic {
                count,
                channels,
                classes,
                seed,
            } => synthetic_dataset(&mut Rng::new(*seed), *count, *channels, *classes),
        }
    }
}

/// The fresh classifier of a trial.
pub fn trial_model(dataset: &Dataset, model_seed: u64) -> Result<Model> {
    let arch = Architecture::new(dataset.channels, dataset.num_classes)?;
    Model::init(arch, &mut Rng::new(model_seed))
}

/// Label read from the honest gradients of one sample.
pub fn extract_sample_label(dataset: &Dataset, index: usize, model_seed: u64) -> Result<LabelPrediction> {
    let (x, c) = dataset.sample(index)?;
    let model = trial_model(dataset, model_seed)?;
    extract_label(model.backward(x, c)?.fc_w())
}

/// One attack on one sample. `template` supplies the method, iteration count
/// and optimizer settings; its seed is replaced by `trial_seed + 1`.
pub fn run_trial(
    dataset: &Dataset,
    sample_index: usize,
    trial_seed: u64,
    template: &AttackConfig,
) -> Result<AttackReport> {
    let (x, c) = dataset.sample(sample_index)?;
    let model = trial_model(dataset, trial_seed)?;
    let shared = model.backward(x, c)?;
    let config = AttackConfig {
        seed: trial_seed.wrapping_add(1),
        ..template.clone()
    };
    run_attack(&model, &shared, &config, Some(x))
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub dataset: DatasetSpec,
    pub methods: Vec<Method>,
    pub trials: usize,
    pub iterations: usize,
    pub base_seed: u64,
    /// Strictly decreasing, positive.
    pub thresholds: Vec<f64>,
    /// Optimizer settings shared by every trial; method, iterations and
    /// seed are overridden per trial.
    pub attack: AttackConfig,
    /// CSVs are written here when set.
    pub out_dir: Option<PathBuf>,
}

impl BenchConfig {
    pub fn new(dataset: DatasetSpec, methods: Vec<Method>, trials: usize) -> Self {
        BenchConfig {
            dataset,
            methods,
            trials,
            iterations: 300,
            base_seed: 0,
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            attack: AttackConfig::default(),
            out_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidArgument("trials must be positive".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidArgument("no methods selected".into()));
        }
        if self.thresholds.iter().any(|t| !(*t > 0.0))
            || self.thresholds.windows(2).any(|w| !(w[0] > w[1]))
        {
            return Err(Error::InvalidArgument(format!(
                "thresholds must be positive and strictly decreasing, got {:?}",
                self.thresholds
            )));
        }
        self.attack.validate()
    }
}

/// What a bench keeps of one trial.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub method: Method,
    pub sample_index: usize,
    pub true_label: usize,
    /// `None` when the trial aborted.
    pub extracted_label: Option<usize>,
    pub final_mse: Option<f64>,
    pub min_mse: Option<f64>,
    /// Aligned with the bench thresholds.
    pub iterations_to: Vec<Option<usize>>,
    pub error: Option<String>,
}

impl TrialRecord {
    pub fn label_correct(&self) -> bool {
        self.extracted_label == Some(self.true_label)
    }

    pub fn good_fidelity(&self, threshold: f64) -> bool {
        self.final_mse.is_some_and(|m| m < threshold)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodSummary {
    pub method: Method,
    pub trials: usize,
    pub label_accuracy: f64,
    /// Fraction of trials whose final MSE is below each threshold.
    pub fidelity: Vec<f64>,
    /// Over trials that did not abort.
    pub mean_final_mse: f64,
    /// Over trials that reached the threshold; NaN when none did.
    pub mean_iterations_to: Vec<f64>,
    pub aborted: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub dataset: String,
    pub thresholds: Vec<f64>,
    pub summaries: Vec<MethodSummary>,
    /// Method-major, trial order within a method.
    pub records: Vec<TrialRecord>,
}

impl BenchResult {
    pub fn summary(&self, method: Method) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method)
    }

    pub fn records_for(&self, method: Method) -> impl Iterator<Item = &TrialRecord> {
        self.records.iter().filter(move |r| r.method == method)
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("method,dataset,trials,label_accuracy");
        for t in &self.thresholds {
            let _ = write!(out, ",fidelity_{t:e}");
        }
        out.push_str(",mean_final_mse");
        for t in &self.thresholds {
            let _ = write!(out, ",mean_iters_to_{t:e}");
        }
        out.push_str(",aborted\n");
        for s in &self.summaries {
            let _ = write!(out, "{},{},{},{}", s.method, self.dataset, s.trials, s.label_accuracy);
            for f in &s.fidelity {
                let _ = write!(out, ",{f}");
            }
            let _ = write!(out, ",{}", s.mean_final_mse);
            for m in &s.mean_iterations_to {
                let _ = write!(out, ",{m}");
            }
            let _ = writeln!(out, ",{}", s.aborted);
        }
        out
    }

    pub fn trials_csv(&self) -> String {
        let mut out = String::from("trial,seed,method,extracted_label,true_label,final_mse");
        for t in &self.thresholds {
            let _ = write!(out, ",iters_to_{t:e}");
        }
        out.push_str(",min_mse\n");
        let opt = |v: Option<usize>| v.map_or("-1".to_string(), |v| v.to_string());
        let optf = |v: Option<f64>| v.map_or("nan".to_string(), |v| v.to_string());
        for r in &self.records {
            let _ = write!(
                out,
                "{},{},{},{},{},{}",
                r.trial,
                r.seed,
                r.method,
                opt(r.extracted_label),
                r.true_label,
                optf(r.final_mse)
            );
            for it in &r.iterations_to {
                let _ = write!(out, ",{}", opt(*it));
            }
            let _ = writeln!(out, ",{}", optf(r.min_mse));
        }
        out
    }

    pub fn write_csvs(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [("summary.csv", self.summary_csv()), ("trials.csv", self.trials_csv())] {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

pub fn run_bench(config: &BenchConfig) -> Result<BenchResult> {
    config.validate()?;
    let dataset = config.dataset.load()?;
    let result = run_bench_on(config, &dataset)?;
    if let Some(dir) = &config.out_dir {
        result.write_csvs(dir)?;
    }
    Ok(result)
}

/// Runs the bench against an already loaded dataset. Nothing is written.
pub fn run_bench_on(config: &BenchConfig, dataset: &Dataset) -> Result<BenchResult> {
    config.validate()?;
    let jobs: Vec<(Method, usize)> = config
        .methods
        .iter()
        .flat_map(|&m| (0..config.trials).map(move |t| (m, t)))
        .collect();
    let records: Vec<TrialRecord> = jobs
        .par_iter()
        .map(|&(method, trial)| bench_trial(config, dataset, method, trial))
        .collect();

    let summaries = config
        .methods
        .iter()
        .map(|&m| summarise(m, &config.thresholds, records.iter().filter(|r| r.method == m)))
        .collect();
    Ok(BenchResult {
        dataset: dataset.name.clone(),
        thresholds: config.thresholds.clone(),
        summaries,
        records,
    })
}

fn bench_trial(config: &BenchConfig, dataset: &Dataset, method: Method, trial: usize) -> TrialRecord {
    let seed = config.base_seed.wrapping_add(trial as u64);
    let sample_index = trial % dataset.len();
    let template = AttackConfig {
        method,
        iterations: config.iterations,
        thresholds: config.thresholds.clone(),
        snapshot_every: 0,
        ..config.attack.clone()
    };
    let mut record = TrialRecord {
        trial,
        seed,
        method,
        sample_index,
        true_label: dataset.labels[sample_index],
        extracted_label: None,
        final_mse: None,
        min_mse: None,
        iterations_to: vec![None; config.thresholds.len()],
        error: None,
    };
    match run_trial(dataset, sample_index, seed, &template) {
        Ok(report) => {
            record.extracted_label = Some(report.extracted_label);
            record.final_mse = report.final_mse();
            record.min_mse = report.min_mse();
            record.iterations_to = report.iterations_to_threshold.iter().map(|(_, it)| *it).collect();
        }
        Err(e) => record.error = Some(e.to_string()),
    }
    record
}

fn summarise<'a>(method: Method, thresholds: &[f64], records: impl Iterator<Item = &'a TrialRecord>) -> MethodSummary {
    let records: Vec<&TrialRecord> = records.collect();
    let n = records.len();
    let frac = |k: usize| k as f64 / n as f64;
    let finished: Vec<f64> = records.iter().filter_map(|r| r.final_mse).collect();
    let mean = |v: &[f64]| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    MethodSummary {
        method,
        trials: n,
        label_accuracy: frac(records.iter().filter(|r| r.label_correct()).count()),
        fidelity: thresholds
            .iter()
            .map(|&t| frac(records.iter().filter(|r| r.good_fidelity(t)).count()))
            .collect(),
        mean_final_mse: mean(&finished),
        mean_iterations_to: (0..thresholds.len())
            .map(|k| {
                let its: Vec<f64> = records.iter().filter_map(|r| r.iterations_to[k]).map(|i| i as f64).collect();
                mean(&its)
            })
            .collect(),
        aborted: records.iter().filter(|r| r.error.is_some()).count(),
    }
}

/// Byte value of a pixel: clamp to `[0, 1]`, scale by 255, round half up.
pub fn pixel_byte(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0 + 0.5).floor() as u8
}

/// Writes a `C×H×W` tensor as PGM (one channel) or PPM (three channels).
pub fn export_image(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let &[channels, height, width] = t.shape() else {
        return Err(Error::dim(format!("export expects C×H×W, got {:?}", t.shape())));
    };
    if channels != 1 && channels != 3 {
        return Err(Error::dim(format!("export needs 1 or 3 channels, got {channels}")));
    }
    let pnm = Pnm {
        channels,
        width,
        height,
        planes: t.data().iter().map(|&v| pixel_byte(v)).collect(),
    };
    let path = path.as_ref();
    fs::write(path, encode_pnm(&pnm)).map_err(|e| Error::io(path, e))
}
