//! Batch runner behind the `fedsysid` binary: dataset generation, multi-seed
//! experiments and method comparison.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use fedsysid::config::{load_config, synthetic_series, ExperimentConfig};
use fedsysid::data::save_csv;
use fedsysid::federation::run_experiment;
use fedsysid::metrics::{summarize, ExclusionPolicy, ExperimentSummary, RoundRecord};
use fedsysid::results::{compare, read_results, write_results, ComparisonReport};
use fedsysid::StateSpaceModel;

pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRUTH_FILE: &str = "truth_model.json";

/// Options shared by `generate` and `run`.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub force: bool,
    pub seeds: Option<Vec<u64>>,
    pub threads: Option<usize>,
}

/// Parses `1,2,5-8` into a seed list.
pub fn parse_seeds(spec: &str) -> Result<Vec<u64>> {
    let mut seeds = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (a.trim().parse()?, b.trim().parse()?);
                if a > b {
                    bail!("seed range `{part}` is descending");
                }
                seeds.extend(a..=b);
            }
            None => seeds.push(part.parse().with_context(|| format!("bad seed `{part}`"))?),
        }
    }
    if seeds.is_empty() {
        bail!("seed list is empty");
    }
    Ok(seeds)
}

struct Job {
    name: String,
    config: ExperimentConfig,
    dir: PathBuf,
}

fn jobs(config_path: &Path, opts: &RunOptions) -> Result<Vec<Job>> {
    let variants = load_config(config_path).with_context(|| format!("loading {}", config_path.display()))?;
    let several = variants.len() > 1;
    let mut out = Vec::with_capacity(variants.len());
    for (name, mut config) in variants {
        if let Some(seeds) = &opts.seeds {
            config.seeds = seeds.clone();
        }
        let root = opts
            .out
            .clone()
            .or_else(|| config.output_dir.clone())
            .context("no output directory: pass --out or set output_dir")?;
        let dir = if several { root.join(&name) } else { root };
        out.push(Job { name, config, dir });
    }
    Ok(out)
}

fn prepare_dir(dir: &Path, owned: &[&str], force: bool) -> Result<()> {
    let existing: Vec<&str> = owned.iter().copied().filter(|f| dir.join(f).exists()).collect();
    if !existing.is_empty() && !force {
        bail!(
            "{} already contains {}; use --force to overwrite",
            dir.display(),
            existing.join(", ")
        );
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            bail!("--threads must be positive");
        }
        b = b.num_threads(n);
    }
    Ok(b.build()?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct ManifestFile {
    seed: u64,
    worker: usize,
    path: String,
    rows: usize,
}

#[derive(Serialize)]
struct Manifest<'a> {
    experiment: &'a str,
    seeds: &'a [u64],
    workers: usize,
    nu: usize,
    ny: usize,
    truth_model: &'static str,
    files: Vec<ManifestFile>,
    config: &'a ExperimentConfig,
}

/// Writes every worker's synthetic series for every seed, a manifest and the
/// truth model. Returns the directories written.
pub fn cmd_generate(config_path: &Path, opts: &RunOptions) -> Result<Vec<PathBuf>> {
    let jobs = jobs(config_path, opts)?;
    let mut written = Vec::new();
    for job in jobs {
        let fedsysid::config::DataSource::Synthetic { system, .. } = &job.config.data else {
            bail!("variant `{}`: dataset generation needs a synthetic data source", job.name);
        };
        prepare_dir(&job.dir, &[MANIFEST_FILE, TRUTH_FILE], opts.force)?;
        let truth = system.model();
        let mut files = Vec::new();
        for &seed in &job.config.seeds {
            let series = synthetic_series(&job.config, seed)?;
            let seed_dir = format!("seed_{seed}");
            fs::create_dir_all(job.dir.join(&seed_dir))?;
            for (i, data) in series.iter().enumerate() {
                let rel = format!("{seed_dir}/worker_{i:02}.csv");
                save_csv(data, &job.dir.join(&rel)).with_context(|| format!("writing {rel}"))?;
                files.push(ManifestFile { seed, worker: i, path: rel, rows: data.len() });
            }
        }
        write_json(&job.dir.join(TRUTH_FILE), &truth)?;
        let manifest = Manifest {
            experiment: &job.name,
            seeds: &job.config.seeds,
            workers: job.config.workers,
            nu: truth.nu(),
            ny: truth.ny(),
            truth_model: TRUTH_FILE,
            files,
            config: &job.config,
        };
        write_json(&job.dir.join(MANIFEST_FILE), &manifest)?;
        written.push(job.dir);
    }
    Ok(written)
}

/// Eigenvalues as `[re, im]` pairs sorted by real then imaginary part.
fn spectrum(model: &StateSpaceModel) -> Vec<[f64; 2]> {
    let mut eig: Vec<[f64; 2]> = match model.eigenvalues() {
        Ok(e) => e.iter().map(|z| [z.re, z.im]).collect(),
        Err(_) => Vec::new(),
    };
    eig.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    eig
}

#[derive(Serialize)]
struct FinalModels {
    seed: u64,
    reference_worker: usize,
    global_eigenvalues: Option<Vec<[f64; 2]>>,
    global_spectral_radius: Option<f64>,
    local_eigenvalues: Vec<Vec<[f64; 2]>>,
}

#[derive(Serialize)]
struct RunSummary<'a> {
    experiment: &'a str,
    method: &'static str,
    #[serde(flatten)]
    summary: &'a ExperimentSummary,
    final_models: Vec<FinalModels>,
    config: &'a ExperimentConfig,
}

/// Outcome of one experiment as written to disk.
#[derive(Debug)]
pub struct RunOutput {
    pub name: String,
    pub dir: PathBuf,
    pub runs: Vec<(u64, Vec<RoundRecord>)>,
    pub summary: ExperimentSummary,
}

/// Runs every seed of every variant and writes `results.csv` and
/// `summary.json` into each experiment directory.
pub fn cmd_run(config_path: &Path, opts: &RunOptions) -> Result<Vec<RunOutput>> {
    let jobs = jobs(config_path, opts)?;
    let base_dir = config_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let pool = pool(opts.threads)?;
    let mut outputs = Vec::new();
    for job in jobs {
        prepare_dir(&job.dir, &[RESULTS_FILE, SUMMARY_FILE], opts.force)?;
        let outcomes = pool.install(|| {
            job.config
                .seeds
                .par_iter()
                .map(|&seed| {
                    let (setup, _) = job.config.setup(seed, &base_dir)?;
                    Ok(run_experiment(&setup)?)
                })
                .collect::<Result<Vec<_>>>()
        })
        .with_context(|| format!("experiment `{}`", job.name))?;

        let runs: Vec<(u64, Vec<RoundRecord>)> = outcomes.iter().map(|o| (o.seed, o.all_records())).collect();
        let summary = summarize(&runs, ExclusionPolicy::default())?;
        let final_models = outcomes
            .iter()
            .map(|o| FinalModels {
                seed: o.seed,
                reference_worker: o.reference,
                global_eigenvalues: o.final_state.global_model.as_ref().map(spectrum),
                global_spectral_radius: o.final_state.global_model.as_ref().and_then(|g| g.spectral_radius().ok()),
                local_eigenvalues: o.final_state.local_models.iter().map(spectrum).collect(),
            })
            .collect();

        let mut buf = Vec::new();
        write_results(&mut buf, &runs)?;
        fs::write(job.dir.join(RESULTS_FILE), buf)?;
        write_json(
            &job.dir.join(SUMMARY_FILE),
            &RunSummary {
                experiment: &job.name,
                method: job.config.method.kind.as_str(),
                summary: &summary,
                final_models,
                config: &job.config,
            },
        )?;
        outputs.push(RunOutput { name: job.name, dir: job.dir, runs, summary });
    }
    Ok(outputs)
}

/// Rank-sum comparison of two results files.
pub fn cmd_compare(results_a: &Path, results_b: &Path) -> Result<ComparisonReport> {
    let read = |p: &Path| -> Result<_> {
        let f = fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
        read_results(std::io::BufReader::new(f)).with_context(|| format!("reading {}", p.display()))
    };
    Ok(compare(&read(results_a)?, &read(results_b)?)?)
}
