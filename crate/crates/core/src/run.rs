//! Run configuration documents and the end-to-end training run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::cifar::{read_cifar100_bin, subset};
use crate::data::{DatasetRecord, Normalization, SynthSpec};
use crate::error::{Error, Result};
use crate::inference::InferenceMode;
use crate::model::SgnetConfig;
use crate::taxonomy::Taxonomy;
use crate::train::{normalize_loss_curve, train, EpochEntry, LossCurve, RunLog, TrainSchedule, TrainSetup};
use crate::SgnetModel;

/// Where the records come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    /// Generated two-level data; the held-out set is an independent draw.
    Synthetic {
        synth: SynthSpec,
        #[serde(default)]
        eval_samples_per_finer: Option<usize>,
    },
    /// `train.bin` / `test.bin` in CIFAR-100 binary layout.
    Cifar {
        dir: PathBuf,
        /// Keep only the first `limit` training records.
        #[serde(default)]
        limit: Option<usize>,
        /// Evaluate on the training records instead of `test.bin`.
        #[serde(default)]
        eval_on_train: bool,
    },
    /// Seeded per-class sample of the super-classes listed.
    Subset {
        dir: PathBuf,
        supers: Vec<String>,
        per_finer: usize,
        #[serde(default)]
        test_per_finer: Option<usize>,
    },
}

/// A preset name or a full inline architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Preset(String),
    Inline(SgnetConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationSpec {
    Cifar100,
    /// Statistics of the training records.
    FromData,
}

fn default_alpha() -> f64 {
    0.5
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

fn default_true() -> bool {
    true
}

/// A complete run description; one TOML document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Builtin name or path to a taxonomy document. Synthetic data supplies
    /// its own when omitted; CIFAR data defaults to `cifar100`.
    #[serde(default)]
    pub taxonomy: Option<String>,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub schedule: TrainSchedule,
    #[serde(default)]
    pub augment: bool,
    #[serde(default)]
    pub normalization: Option<NormalizationSpec>,
    #[serde(default = "default_true")]
    pub checkpoints: bool,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string().trim_end().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex_digest(canonical.as_bytes())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// A config with every reference checked and every dataset loaded.
#[derive(Debug, Clone)]
pub struct ResolvedRun {
    pub config: RunConfig,
    pub digest: String,
    pub model: SgnetConfig,
    pub taxonomy: Taxonomy,
    pub normalization: Normalization,
    pub train: Vec<DatasetRecord>,
    pub eval: Vec<(String, Vec<DatasetRecord>)>,
    pub output_dir: PathBuf,
}

fn resolve_path(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn resolve_taxonomy(source: &str, base: &Path) -> Result<Taxonomy> {
    if let Ok(t) = Taxonomy::builtin(source) {
        return Ok(t);
    }
    let path = resolve_path(base, Path::new(source));
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::config(format!("taxonomy file {}: {e}", path.display())))?;
    Taxonomy::from_json(&text).map_err(|e| Error::config(format!("taxonomy file {}: {e}", path.display())))
}

fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(Error::config(format!("dataset file {} does not exist", path.display())));
    }
    Ok(())
}

fn limited(mut records: Vec<DatasetRecord>, limit: Option<usize>) -> Vec<DatasetRecord> {
    if let Some(n) = limit {
        records.truncate(n);
    }
    records
}

/// Checks every reference before loading anything, then loads the data.
/// Relative dataset and taxonomy paths are taken from `base`; the output
/// directory is used as given unless `output_override` replaces it.
pub fn resolve(config: RunConfig, base: &Path, output_override: Option<&Path>) -> Result<ResolvedRun> {
    config.schedule.validate()?;
    if !(config.alpha > 0.0 && config.alpha < 1.0) {
        return Err(Error::config(format!("alpha must lie in (0, 1), got {}", config.alpha)));
    }
    let explicit_taxonomy = config
        .taxonomy
        .as_deref()
        .map(|s| resolve_taxonomy(s, base))
        .transpose()?;
    let (train_path, test_path) = match &config.dataset {
        DatasetSpec::Synthetic { synth, .. } => {
            synth.validate()?;
            (None, None)
        }
        DatasetSpec::Cifar { dir, .. } | DatasetSpec::Subset { dir, .. } => {
            let dir = resolve_path(base, dir);
            let (tr, te) = (dir.join("train.bin"), dir.join("test.bin"));
            require_file(&tr)?;
            if !matches!(config.dataset, DatasetSpec::Cifar { eval_on_train: true, .. }) {
                require_file(&te)?;
            }
            (Some(tr), Some(te))
        }
    };
    let mut model = match &config.model {
        ModelSpec::Preset(name) => SgnetConfig::preset(name).map_err(|e| Error::config(e.to_string()))?,
        ModelSpec::Inline(cfg) => cfg.clone(),
    };
    model.alpha = config.alpha;

    let (train_records, eval, taxonomy) = match &config.dataset {
        DatasetSpec::Synthetic {
            synth,
            eval_samples_per_finer,
        } => {
            let (train_records, generated) = synth.generate_split(0)?;
            let mut held = synth.clone();
            if let Some(n) = eval_samples_per_finer {
                held.samples_per_finer = *n;
            }
            let (test, _) = held.generate_split(1)?;
            let t = explicit_taxonomy.unwrap_or(generated);
            (train_records, vec![("heldout".to_string(), test)], t)
        }
        DatasetSpec::Cifar {
            limit,
            eval_on_train,
            ..
        } => {
            let t = explicit_taxonomy.unwrap_or_else(Taxonomy::cifar100);
            let train_records = limited(read_cifar100_bin(train_path.as_ref().expect("checked"))?, *limit);
            let eval = if *eval_on_train {
                vec![("train".to_string(), train_records.clone())]
            } else {
                let te = test_path.as_ref().expect("set with train path");
                vec![("test".to_string(), read_cifar100_bin(te)?)]
            };
            (train_records, eval, t)
        }
        DatasetSpec::Subset {
            supers,
            per_finer,
            test_per_finer,
            ..
        } => {
            let t = explicit_taxonomy.unwrap_or_else(Taxonomy::cifar100);
            let names: Vec<&str> = supers.iter().map(String::as_str).collect();
            let all = read_cifar100_bin(train_path.as_ref().expect("checked"))?;
            let (train_records, sub) = subset(&all, &t, &names, *per_finer, config.seed)?;
            let te = test_path.as_ref().expect("set with train path");
            let all_test = read_cifar100_bin(te)?;
            let (test, _) = subset(&all_test, &t, &names, test_per_finer.unwrap_or(100), config.seed)?;
            (train_records, vec![("test".to_string(), test)], sub)
        }
    };

    if matches!(config.model, ModelSpec::Preset(_)) {
        model.num_finer = taxonomy.num_finer();
        model.num_super = taxonomy.num_super();
    }
    model.validate()?;
    if model.num_finer != taxonomy.num_finer() || model.num_super != taxonomy.num_super() {
        return Err(Error::config(format!(
            "model \"{}\" has {}/{} super/finer outputs but the taxonomy has {}/{}",
            model.name,
            model.num_super,
            model.num_finer,
            taxonomy.num_super(),
            taxonomy.num_finer()
        )));
    }
    if model.input_channels != 3 {
        return Err(Error::config(format!(
            "model \"{}\" expects {} input channels; datasets are RGB",
            model.name, model.input_channels
        )));
    }
    if let Some(r) = train_records.first() {
        if r.size != model.input_size {
            return Err(Error::config(format!(
                "dataset images are {0}×{0} but model \"{1}\" expects {2}×{2}",
                r.size, model.name, model.input_size
            )));
        }
    }
    let normalization = match config.normalization.unwrap_or(match config.dataset {
        DatasetSpec::Synthetic { .. } => NormalizationSpec::FromData,
        _ => NormalizationSpec::Cifar100,
    }) {
        NormalizationSpec::Cifar100 => Normalization::CIFAR100_TRAIN,
        NormalizationSpec::FromData => Normalization::from_records(&train_records),
    };
    let output_dir = output_override.map_or_else(|| config.output_dir.clone(), Path::to_path_buf);
    Ok(ResolvedRun {
        digest: config.digest(),
        config,
        model,
        taxonomy,
        normalization,
        train: train_records,
        eval,
        output_dir,
    })
}

/// Loads records named by a command-line dataset spec:
/// `bin:FILE`, `cifar-train:DIR`, `cifar-test:DIR` or `config:RUN.toml`
/// (the run's first evaluation set).
pub fn load_dataset_spec(spec: &str) -> Result<(String, Vec<DatasetRecord>)> {
    let (kind, arg) = spec.split_once(':').ok_or_else(|| {
        Error::config(format!(
            "dataset spec \"{spec}\" must be bin:FILE, cifar-train:DIR, cifar-test:DIR or config:FILE"
        ))
    })?;
    let path = Path::new(arg);
    let file = match kind {
        "bin" => path.to_path_buf(),
        "cifar-train" => path.join("train.bin"),
        "cifar-test" => path.join("test.bin"),
        "config" => {
            let cfg = RunConfig::load(path)?;
            let base = path.parent().unwrap_or(Path::new("."));
            let run = resolve(cfg, base, None)?;
            let (name, records) = run.eval.into_iter().next().expect("every dataset kind has an evaluation set");
            return Ok((format!("{}:{name}", run.config.name), records));
        }
        other => return Err(Error::config(format!("unknown dataset kind \"{other}\" in \"{spec}\""))),
    };
    require_file(&file)?;
    Ok((spec.to_string(), read_cifar100_bin(&file)?))
}

/// Final metrics and artifact locations of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub config_digest: String,
    pub seed: u64,
    pub model: String,
    pub parameter_count: usize,
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub final_epoch: Option<EpochEntry>,
    pub final_di_accuracy: Option<f64>,
    pub loss_curve: Option<LossCurve>,
    /// Optimizer defaults in force; these are not fixed by the method itself.
    pub optimizer: String,
    pub output_dir: PathBuf,
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains and writes `runlog.csv`, `runlog.json`, `loss_curve.csv`,
/// `summary.json` and `checkpoints/{latest,best}` under the output directory.
pub fn execute(run: &ResolvedRun, on_epoch: impl FnMut(&EpochEntry)) -> Result<(RunLog, RunSummary)> {
    let dir = &run.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut model = SgnetModel::<f32>::build(&run.model, run.config.seed)?;
    let setup = TrainSetup {
        schedule: &run.config.schedule,
        taxonomy: &run.taxonomy,
        alpha: run.config.alpha,
        seed: run.config.seed,
        augment: run.config.augment,
        normalization: run.normalization,
        eval_sets: run.eval.iter().map(|(n, r)| (n.clone(), r.as_slice())).collect(),
        checkpoint_dir: run.config.checkpoints.then(|| dir.join("checkpoints")),
        config_digest: run.digest.clone(),
    };
    let log = train(&mut model, &run.train, &setup, on_epoch)?;

    write(&dir.join("runlog.csv"), &log.to_csv())?;
    write(
        &dir.join("runlog.json"),
        &serde_json::to_string_pretty(&log).expect("run log serializes"),
    )?;
    let curve = normalize_loss_curve(&log).ok();
    if let Some(c) = &curve {
        let mut text = format!(
            "# config_digest={}\n# seed={}\n# degenerate={}\nepoch,loss_total,normalized\n",
            run.digest, run.config.seed, c.degenerate
        );
        for (e, v) in log.epochs.iter().zip(&c.values) {
            text.push_str(&format!("{},{},{}\n", e.epoch, e.loss_total, v));
        }
        write(&dir.join("loss_curve.csv"), &text)?;
    }
    let final_epoch = log.epochs.last().cloned();
    let final_di_accuracy = final_epoch.as_ref().and_then(|e| {
        e.eval
            .iter()
            .find(|x| x.eval.mode == InferenceMode::Di)
            .map(|x| x.eval.metrics.finer_top1)
    });
    let s = &run.config.schedule;
    let summary = RunSummary {
        name: run.config.name.clone(),
        config_digest: run.digest.clone(),
        seed: run.config.seed,
        model: run.model.name.clone(),
        parameter_count: model.parameter_count(),
        epochs: log.epochs.len(),
        best_epoch: log.best_epoch,
        final_epoch,
        final_di_accuracy,
        loss_curve: curve,
        optimizer: format!(
            "SGD momentum {} weight decay {} warmup {} epoch(s), per-step linear",
            s.momentum, s.weight_decay, s.warmup_epochs
        ),
        output_dir: dir.clone(),
    };
    write(
        &dir.join("summary.json"),
        &serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    Ok((log, summary))
}
