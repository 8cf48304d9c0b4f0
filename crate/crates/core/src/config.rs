//! Declarative experiment description.
//!
//! A configuration file is one JSON object. An optional top-level
//! `"variants"` array lists named partial overrides; each is deep-merged into
//! the base object and parsed as an independent experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::alignment::{MuSpec, PseudoDataSpec, PseudoInputs};
use crate::data::{
    add_output_noise, detrend, generate_worker_dataset, load_csv, mimo1_truth, mimo2_truth, normalize, siso_truth,
    split, NormalizationStats, SplitSpec, SyntheticSystemSpec,
};
use crate::error::{Error, Result};
use crate::federation::{ExperimentSetup, MethodKind, MethodSpec, WorkerData};
use crate::rng::{stream, Purpose};
use crate::ssm::{StateSpaceModel, DEFAULT_KAPPA_LIMIT};
use crate::sysid::{PemSettings, TimeSeriesDataset};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub method: MethodConfig,
    #[serde(rename = "M")]
    pub workers: usize,
    #[serde(rename = "R")]
    pub rounds: usize,
    pub iter: usize,
    pub nx: usize,
    pub seeds: Vec<u64>,
    pub data: DataSource,
    #[serde(default)]
    pub lm: LmConfig,
    #[serde(default = "default_kappa_limit")]
    pub kappa_limit: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_models: Option<Vec<StateSpaceModel>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn default_kappa_limit() -> f64 {
    DEFAULT_KAPPA_LIMIT
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub kind: MethodKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<MuSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo: Option<PseudoConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PseudoConfig {
    /// Defaults to the training length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length: Option<usize>,
    /// Defaults to 1 for single-input and 0.1 for multi-input synthetic
    /// systems.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_std: Option<f64>,
    /// Use the test-set inputs instead of Gaussian inputs. Defaults to true
    /// for CSV data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub use_test_inputs: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub damping_init: f64,
    pub damping_scale: f64,
    pub min_step_decrease: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        let d = PemSettings::default();
        LmConfig {
            damping_init: d.damping_init,
            damping_scale: d.damping_scale,
            min_step_decrease: d.min_step_decrease,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinSystem {
    Siso,
    Mimo1,
    Mimo2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TruthSystem {
    Builtin(BuiltinSystem),
    Model(StateSpaceModel),
}

impl TruthSystem {
    pub fn model(&self) -> StateSpaceModel {
        match self {
            TruthSystem::Builtin(BuiltinSystem::Siso) => siso_truth(),
            TruthSystem::Builtin(BuiltinSystem::Mimo1) => mimo1_truth(),
            TruthSystem::Builtin(BuiltinSystem::Mimo2) => mimo2_truth(),
            TruthSystem::Model(m) => m.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        system: TruthSystem,
        train_len: usize,
        #[serde(default)]
        test_len: usize,
        x1_std: f64,
        u_std: f64,
        w_std: f64,
        #[serde(default)]
        v_std: f64,
    },
    Csv {
        /// One shared file, or one file per worker.
        paths: Vec<PathBuf>,
        nu: usize,
        ny: usize,
        #[serde(default)]
        detrend: bool,
        #[serde(default)]
        normalize: bool,
        split: SplitSpec,
        /// Per-output noise added to each worker's training split.
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        train_noise_std: Vec<f64>,
    },
}

/// Worker datasets plus what preprocessing produced.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub workers: Vec<WorkerData>,
    pub normalization: Option<NormalizationStats>,
}

impl ExperimentConfig {
    pub fn from_json(value: Value) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_value(value).map_err(|e| Error::config("<root>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::config("M", "at least one worker is required"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        if self.nx == 0 {
            return Err(Error::config("nx", "must be positive"));
        }
        if !(self.kappa_limit >= 1.0) {
            return Err(Error::config("kappa_limit", "must be at least 1"));
        }
        self.pem_settings().validate()?;
        let (nu, ny) = self.channel_counts();
        if nu == 0 || ny == 0 {
            return Err(Error::config("data", "needs at least one input and one output"));
        }
        if let Some(mu) = &self.method.mu {
            mu.validate(self.nx, nu)
                .map_err(|e| Error::config("method.mu", e.to_string()))?;
        }
        match self.method.kind {
            MethodKind::FedalignA if nu > 1 && self.method.mu.is_none() => {
                return Err(Error::config("method.mu", "required for multi-input canonical alignment"));
            }
            _ => {}
        }
        if let Some(p) = &self.method.pseudo {
            if p.input_std.is_some_and(|s| !(s > 0.0 && s.is_finite())) {
                return Err(Error::config("method.pseudo.input_std", "must be positive"));
            }
            if p.length.is_some_and(|l| l < self.nx) {
                return Err(Error::config("method.pseudo.length", "must be at least nx"));
            }
        }
        match &self.data {
            DataSource::Synthetic {
                system,
                train_len,
                x1_std,
                u_std,
                w_std,
                v_std,
                ..
            } => {
                if *train_len == 0 {
                    return Err(Error::config("data.train_len", "must be positive"));
                }
                for (f, v) in [("x1_std", x1_std), ("u_std", u_std), ("w_std", w_std), ("v_std", v_std)] {
                    if !(*v >= 0.0 && v.is_finite()) {
                        return Err(Error::config(format!("data.{f}"), "must be nonnegative"));
                    }
                }
                let truth = system.model();
                let radius = truth.spectral_radius()?;
                if radius >= 1.0 {
                    return Err(Error::config("data.system", format!("truth is unstable (radius {radius})")));
                }
            }
            DataSource::Csv {
                paths,
                split,
                train_noise_std,
                ny,
                ..
            } => {
                if paths.is_empty() || (paths.len() != 1 && paths.len() != self.workers) {
                    return Err(Error::config("data.paths", "give one shared file or one file per worker"));
                }
                if split.train[0] >= split.train[1] {
                    return Err(Error::config("data.split.train", "range is empty"));
                }
                if let Some([s, e]) = split.test {
                    if s >= e {
                        return Err(Error::config("data.split.test", "range is empty"));
                    }
                }
                if !train_noise_std.is_empty() && train_noise_std.len() != *ny {
                    return Err(Error::config("data.train_noise_std", "one value per output is required"));
                }
            }
        }
        if let Some(models) = &self.initial_models {
            if models.len() != self.workers {
                return Err(Error::config("initial_models", "one model per worker is required"));
            }
            if models.iter().any(|m| m.dims() != (self.nx, nu, ny)) {
                return Err(Error::config("initial_models", "dimensions do not match nx and the data"));
            }
        }
        Ok(())
    }

    pub fn channel_counts(&self) -> (usize, usize) {
        match &self.data {
            DataSource::Synthetic { system, .. } => {
                let m = system.model();
                (m.nu(), m.ny())
            }
            DataSource::Csv { nu, ny, .. } => (*nu, *ny),
        }
    }

    pub fn pem_settings(&self) -> PemSettings {
        PemSettings {
            iterations: self.iter,
            damping_init: self.lm.damping_init,
            damping_scale: self.lm.damping_scale,
            min_step_decrease: self.lm.min_step_decrease,
        }
    }

    /// Builds every worker's train/test data for `seed`. Relative CSV paths
    /// resolve against `base_dir`.
    pub fn prepare_data(&self, seed: u64, base_dir: &Path) -> Result<PreparedData> {
        match &self.data {
            DataSource::Synthetic {
                system,
                train_len,
                test_len,
                x1_std,
                u_std,
                w_std,
                v_std,
            } => {
                let spec = SyntheticSystemSpec {
                    truth: system.model(),
                    len: train_len + test_len,
                    x1_std: *x1_std,
                    u_std: *u_std,
                    w_std: *w_std,
                    v_std: *v_std,
                };
                let workers = (0..self.workers)
                    .map(|i| {
                        let mut rng = stream(seed, Purpose::WorkerData, i as u64, 0);
                        let full = generate_worker_dataset(&spec, &mut rng)?;
                        let train = full.slice(0, *train_len)?;
                        let test = (*test_len > 0)
                            .then(|| full.slice(*train_len, train_len + test_len))
                            .transpose()?;
                        Ok(WorkerData { train, test })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(PreparedData {
                    workers,
                    normalization: None,
                })
            }
            DataSource::Csv {
                paths,
                nu,
                ny,
                detrend: do_detrend,
                normalize: do_normalize,
                split: split_spec,
                train_noise_std,
            } => {
                let mut normalization = None;
                let mut raw = Vec::with_capacity(paths.len());
                for path in paths {
                    let full_path = if path.is_absolute() {
                        path.clone()
                    } else {
                        base_dir.join(path)
                    };
                    let mut d = load_csv(&full_path, *nu, *ny)?;
                    if *do_detrend {
                        d = detrend(&d);
                    }
                    if *do_normalize {
                        let (n, stats) = normalize(&d)?;
                        d = n;
                        normalization.get_or_insert(stats);
                    }
                    raw.push(split(&d, split_spec)?);
                }
                let workers = (0..self.workers)
                    .map(|i| {
                        let (train, test) = &raw[if raw.len() == 1 { 0 } else { i }];
                        let train = if train_noise_std.is_empty() {
                            train.clone()
                        } else {
                            let mut rng = stream(seed, Purpose::TrainNoise, i as u64, 0);
                            add_output_noise(train, train_noise_std, &mut rng)?
                        };
                        Ok(WorkerData {
                            train,
                            test: test.clone(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(PreparedData {
                    workers,
                    normalization,
                })
            }
        }
    }

    fn method_spec(&self, workers: &[WorkerData]) -> Result<MethodSpec> {
        let nu = workers[0].train.nu();
        let train_len = workers[0].train.len();
        let pseudo = match self.method.kind {
            MethodKind::FedalignO => {
                let p = self.method.pseudo.clone().unwrap_or_default();
                let csv = matches!(self.data, DataSource::Csv { .. });
                let inputs = if p.use_test_inputs.unwrap_or(csv) {
                    let test = workers[0].test.as_ref().ok_or_else(|| {
                        Error::config("method.pseudo.use_test_inputs", "data has no test split")
                    })?;
                    PseudoInputs::Sequence(test.inputs().clone())
                } else {
                    let std = p.input_std.unwrap_or(if nu == 1 { 1.0 } else { 0.1 });
                    PseudoInputs::Gaussian { std }
                };
                Some(PseudoDataSpec {
                    length: p.length.unwrap_or(train_len),
                    inputs,
                })
            }
            _ => None,
        };
        Ok(MethodSpec {
            kind: self.method.kind,
            mu: self.method.mu.clone(),
            pseudo,
        })
    }

    /// Complete per-seed setup for [`crate::federation::run_experiment`].
    pub fn setup(&self, seed: u64, base_dir: &Path) -> Result<(ExperimentSetup, PreparedData)> {
        let data = self.prepare_data(seed, base_dir)?;
        let method = self.method_spec(&data.workers)?;
        let setup = ExperimentSetup {
            method,
            workers: data.workers.clone(),
            rounds: self.rounds,
            nx: self.nx,
            pem: self.pem_settings(),
            master_seed: seed,
            kappa_limit: self.kappa_limit,
            initial_models: self.initial_models.clone(),
        };
        Ok((setup, data))
    }
}

fn merge(base: &mut Value, overrides: &Value) {
    match (base, overrides) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o.clone(),
    }
}

/// Splits a configuration document into named experiments. Without a
/// `"variants"` array the single experiment is named after `"name"` or
/// `"experiment"`.
pub fn expand_variants(mut doc: Value) -> Result<Vec<(String, ExperimentConfig)>> {
    let variants = match doc.as_object_mut() {
        Some(obj) => obj.remove("variants"),
        None => return Err(Error::config("<root>", "configuration must be a JSON object")),
    };
    let base_name = doc
        .get("name")
        .and_then(Value::as_str)
        .unwrap_or("experiment")
        .to_string();
    let Some(variants) = variants else {
        return Ok(vec![(base_name, ExperimentConfig::from_json(doc)?)]);
    };
    let list = variants
        .as_array()
        .ok_or_else(|| Error::config("variants", "must be an array"))?;
    if list.is_empty() {
        return Err(Error::config("variants", "must not be empty"));
    }
    let mut out = Vec::with_capacity(list.len());
    for (i, v) in list.iter().enumerate() {
        let name = v
            .get("name")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::config(format!("variants[{i}].name"), "every variant needs a name"))?
            .to_string();
        if out.iter().any(|(n, _)| *n == name) {
            return Err(Error::config(format!("variants[{i}].name"), "duplicate variant name"));
        }
        let mut merged = doc.clone();
        merge(&mut merged, v);
        let cfg = ExperimentConfig::from_json(merged).map_err(|e| match e {
            Error::Config { field, message } => Error::config(format!("variants[{i}].{field}"), message),
            other => other,
        })?;
        out.push((name, cfg));
    }
    Ok(out)
}

pub fn load_config(path: &Path) -> Result<Vec<(String, ExperimentConfig)>> {
    let text = std::fs::read_to_string(path)?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| Error::config("<root>", e.to_string()))?;
    expand_variants(doc)
}

/// Raw datasets as written by the generator: the full series per worker.
pub fn synthetic_series(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<TimeSeriesDataset>> {
    let DataSource::Synthetic {
        system,
        train_len,
        test_len,
        x1_std,
        u_std,
        w_std,
        v_std,
    } = &cfg.data
    else {
        return Err(Error::config("data.type", "dataset generation needs a synthetic source"));
    };
    let spec = SyntheticSystemSpec {
        truth: system.model(),
        len: train_len + test_len,
        x1_std: *x1_std,
        u_std: *u_std,
        w_std: *w_std,
        v_std: *v_std,
    };
    (0..cfg.workers)
        .map(|i| generate_worker_dataset(&spec, &mut stream(seed, Purpose::WorkerData, i as u64, 0)))
        .collect()
}
