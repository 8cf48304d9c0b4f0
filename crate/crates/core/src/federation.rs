//! Communication rounds: parallel local updates, alignment, aggregation in
//! the common basis, and redistribution into each worker's own basis.
//!
//! FedAvg is the special case in which every transform is the identity.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{align_to_reference, to_ccf_mimo, to_ccf_siso, MuSpec, PseudoDataSpec};
use crate::error::{Error, Result};
use crate::metrics::{worker_bfr, RoundRecord, WorkerRecord};
use crate::rng::{stream, Purpose};
use crate::ssm::{AlignmentTransform, Matrix, StateSpaceModel};
use crate::sysid::{init_model, local_update, PemSettings, TimeSeriesDataset};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Fedavg,
    FedalignA,
    FedalignO,
}

impl MethodKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MethodKind::Fedavg => "fedavg",
            MethodKind::FedalignA => "fedalign_a",
            MethodKind::FedalignO => "fedalign_o",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodSpec {
    pub kind: MethodKind,
    /// Controllability indices for multi-input canonical alignment.
    pub mu: Option<MuSpec>,
    /// Pseudo-data for least-squares alignment.
    pub pseudo: Option<PseudoDataSpec>,
}

impl MethodSpec {
    pub fn fedavg() -> Self {
        MethodSpec {
            kind: MethodKind::Fedavg,
            mu: None,
            pseudo: None,
        }
    }

    pub fn fedalign_a(mu: Option<MuSpec>) -> Self {
        MethodSpec {
            kind: MethodKind::FedalignA,
            mu,
            pseudo: None,
        }
    }

    pub fn fedalign_o(pseudo: PseudoDataSpec) -> Self {
        MethodSpec {
            kind: MethodKind::FedalignO,
            mu: None,
            pseudo: Some(pseudo),
        }
    }

    pub fn validate(&self, nx: usize, nu: usize) -> Result<()> {
        match self.kind {
            MethodKind::Fedavg => Ok(()),
            MethodKind::FedalignA => match (&self.mu, nu) {
                (Some(mu), _) => mu.validate(nx, nu),
                (None, 1) => Ok(()),
                (None, _) => Err(Error::config("method.mu", "required for multi-input canonical alignment")),
            },
            MethodKind::FedalignO => match &self.pseudo {
                Some(p) if p.length >= nx || matches!(p.inputs, crate::alignment::PseudoInputs::Sequence(_)) => Ok(()),
                Some(_) => Err(Error::config("method.pseudo.length", "must be at least nx")),
                None => Err(Error::config("method.pseudo", "required for least-squares alignment")),
            },
        }
    }
}

fn check_same_dims(models: &[StateSpaceModel]) -> Result<(usize, usize, usize)> {
    let first = models
        .first()
        .ok_or_else(|| Error::Dimension("no models to aggregate".into()))?;
    let dims = first.dims();
    if models.iter().any(|m| m.dims() != dims) {
        return Err(Error::Dimension("models do not share (nx, nu, ny)".into()));
    }
    Ok(dims)
}

/// Entrywise mean of `(A, B, C, D)`.
pub fn aggregate_fedavg(models: &[StateSpaceModel]) -> Result<StateSpaceModel> {
    let (nx, nu, ny) = check_same_dims(models)?;
    let scale = 1.0 / models.len() as f64;
    let mut sum = [
        Matrix::zeros(nx, nx),
        Matrix::zeros(nx, nu),
        Matrix::zeros(ny, nx),
        Matrix::zeros(ny, nu),
    ];
    for m in models {
        sum[0] += m.a();
        sum[1] += m.b();
        sum[2] += m.c();
        sum[3] += m.d();
    }
    let [a, b, c, d] = sum;
    StateSpaceModel::new(a * scale, b * scale, c * scale, d * scale)
}

/// Mean of `(T_i⁻¹ A_i T_i, T_i⁻¹ B_i, C_i T_i, D_i)`.
pub fn aggregate_aligned(models: &[StateSpaceModel], transforms: &[AlignmentTransform]) -> Result<StateSpaceModel> {
    if models.len() != transforms.len() {
        return Err(Error::Dimension(format!(
            "{} models but {} transforms",
            models.len(),
            transforms.len()
        )));
    }
    check_same_dims(models)?;
    let aligned = models
        .iter()
        .zip(transforms)
        .map(|(m, t)| m.apply_similarity(t))
        .collect::<Result<Vec<_>>>()?;
    aggregate_fedavg(&aligned)
}

/// `(T_i Ã T_i⁻¹, T_i B̃, C̃ T_i⁻¹, D̃)` for every worker.
pub fn redistribute(global: &StateSpaceModel, transforms: &[AlignmentTransform]) -> Result<Vec<StateSpaceModel>> {
    transforms
        .iter()
        .map(|t| global.apply_inverse_similarity(t))
        .collect()
}

/// Transforms for one round. `reference` and `pseudo_inputs` are only used
/// by least-squares alignment.
pub fn compute_transforms(
    models: &[StateSpaceModel],
    method: &MethodSpec,
    reference: usize,
    pseudo_inputs: Option<&Matrix>,
    kappa_limit: f64,
) -> Result<Vec<AlignmentTransform>> {
    let (nx, nu, _) = check_same_dims(models)?;
    match method.kind {
        MethodKind::Fedavg => Ok(vec![AlignmentTransform::identity(nx); models.len()]),
        MethodKind::FedalignA => models
            .par_iter()
            .map(|m| match (&method.mu, nu) {
                (Some(mu), _) if nu > 1 => to_ccf_mimo(m, mu, kappa_limit),
                (_, 1) => to_ccf_siso(m, kappa_limit),
                _ => Err(Error::config("method.mu", "required for multi-input canonical alignment")),
            })
            .collect(),
        MethodKind::FedalignO => {
            let inputs = pseudo_inputs
                .ok_or_else(|| Error::config("method.pseudo", "pseudo-inputs missing"))?;
            align_to_reference(models, reference, inputs, kappa_limit)
        }
    }
}

/// One worker's private data.
#[derive(Clone, Debug)]
pub struct WorkerData {
    pub train: TimeSeriesDataset,
    pub test: Option<TimeSeriesDataset>,
}

#[derive(Clone, Debug)]
pub struct FederationState {
    pub round: usize,
    pub local_models: Vec<StateSpaceModel>,
    pub global_model: Option<StateSpaceModel>,
    pub transforms: Option<Vec<AlignmentTransform>>,
}

impl FederationState {
    pub fn new(local_models: Vec<StateSpaceModel>) -> Self {
        FederationState {
            round: 0,
            local_models,
            global_model: None,
            transforms: None,
        }
    }
}

/// Per-experiment constants shared by all rounds.
#[derive(Clone, Debug)]
pub struct RoundContext {
    /// Worker whose basis is the common basis for least-squares alignment.
    pub reference: usize,
    /// Shared pseudo-input sequence, identical in every round.
    pub pseudo_inputs: Option<Matrix>,
    pub kappa_limit: f64,
}

#[derive(Clone, Debug)]
pub struct RoundOutcome {
    pub state: FederationState,
    pub stalled: Vec<bool>,
    pub failure: Option<String>,
}

/// Executes one communication round. Alignment failures skip aggregation:
/// the freshly updated local models are carried forward and the reason is
/// returned in `failure`.
pub fn run_round(
    state: &FederationState,
    method: &MethodSpec,
    workers: &[WorkerData],
    settings: &PemSettings,
    ctx: &RoundContext,
) -> Result<RoundOutcome> {
    if workers.len() != state.local_models.len() {
        return Err(Error::Dimension(format!(
            "{} datasets for {} workers",
            workers.len(),
            state.local_models.len()
        )));
    }
    let updates = state
        .local_models
        .par_iter()
        .zip(workers.par_iter())
        .map(|(m, w)| local_update(m, &w.train, settings))
        .collect::<Result<Vec<_>>>()?;
    let stalled: Vec<bool> = updates.iter().map(|u| u.stalled).collect();
    let updated: Vec<StateSpaceModel> = updates.into_iter().map(|u| u.model).collect();

    let aggregated = compute_transforms(
        &updated,
        method,
        ctx.reference,
        ctx.pseudo_inputs.as_ref(),
        ctx.kappa_limit,
    )
    .and_then(|ts| {
        let global = aggregate_aligned(&updated, &ts)?;
        let locals = redistribute(&global, &ts)?;
        Ok((global, locals, ts))
    });

    let round = state.round + 1;
    Ok(match aggregated {
        Ok((global, locals, ts)) => RoundOutcome {
            state: FederationState {
                round,
                local_models: locals,
                global_model: Some(global),
                transforms: Some(ts),
            },
            stalled,
            failure: None,
        },
        Err(e) => RoundOutcome {
            state: FederationState {
                round,
                local_models: updated,
                global_model: None,
                transforms: None,
            },
            stalled,
            failure: Some(e.to_string()),
        },
    })
}

/// Everything needed to run one seed of an experiment.
#[derive(Clone, Debug)]
pub struct ExperimentSetup {
    pub method: MethodSpec,
    pub workers: Vec<WorkerData>,
    pub rounds: usize,
    pub nx: usize,
    pub pem: PemSettings,
    pub master_seed: u64,
    pub kappa_limit: f64,
    /// Overrides random initialization when present (one model per worker).
    pub initial_models: Option<Vec<StateSpaceModel>>,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub seed: u64,
    /// Record for the initial models (round 0).
    pub initial: RoundRecord,
    /// One record per communication round; empty when `rounds == 0`.
    pub rounds: Vec<RoundRecord>,
    pub reference: usize,
    pub final_state: FederationState,
}

impl ExperimentOutcome {
    /// Initial record followed by every round.
    pub fn all_records(&self) -> Vec<RoundRecord> {
        std::iter::once(self.initial.clone())
            .chain(self.rounds.iter().cloned())
            .collect()
    }
}

fn evaluate(
    round: usize,
    models: &[StateSpaceModel],
    workers: &[WorkerData],
    global: Option<&StateSpaceModel>,
    transforms: Option<&[AlignmentTransform]>,
    stalled: &[bool],
    failure: Option<String>,
) -> Result<RoundRecord> {
    let records = models
        .par_iter()
        .zip(workers.par_iter())
        .enumerate()
        .map(|(i, (m, w))| {
            let train_bfr = worker_bfr(m, &w.train)?;
            let test_bfr = w.test.as_ref().map(|t| worker_bfr(m, t)).transpose()?;
            let overflow = train_bfr
                .iter()
                .chain(test_bfr.iter().flatten())
                .any(|b| b.is_infinite());
            let t = transforms.map(|ts| &ts[i]);
            Ok(WorkerRecord {
                train_bfr,
                test_bfr,
                kappa: t.map(|t| t.kappa()),
                ill_conditioned: t.is_some_and(|t| t.is_ill_conditioned()),
                overflow,
                stalled: stalled.get(i).copied().unwrap_or(false),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let radius = global.map(|g| g.spectral_radius().unwrap_or(f64::INFINITY));
    Ok(RoundRecord {
        round,
        workers: records,
        global_stable: radius.map(|r| r < 1.0),
        global_spectral_radius: radius,
        alignment_failure: failure,
    })
}

/// Pseudo-inputs are drawn once per experiment from a dedicated stream so
/// that every round aligns against the same excitation.
pub fn pseudo_inputs_for(setup: &ExperimentSetup, nu: usize) -> Result<Option<Matrix>> {
    match (&setup.method.kind, &setup.method.pseudo) {
        (MethodKind::FedalignO, Some(spec)) => {
            let mut rng = stream(setup.master_seed, Purpose::PseudoInput, 0, 0);
            spec.generate_inputs(nu, &mut rng).map(Some)
        }
        _ => Ok(None),
    }
}

/// Initializes every worker, runs `setup.rounds` communication rounds and
/// records per-round metrics. Deterministic in `setup.master_seed`.
pub fn run_experiment(setup: &ExperimentSetup) -> Result<ExperimentOutcome> {
    let m = setup.workers.len();
    if m == 0 {
        return Err(Error::config("M", "at least one worker is required"));
    }
    let nu = setup.workers[0].train.nu();
    let ny = setup.workers[0].train.ny();
    for (i, w) in setup.workers.iter().enumerate() {
        let same = |d: &TimeSeriesDataset| d.nu() == nu && d.ny() == ny;
        if !same(&w.train) || !w.test.as_ref().is_none_or(same) {
            return Err(Error::config(
                format!("data.worker[{i}]"),
                "channel counts differ between workers",
            ));
        }
    }
    setup.method.validate(setup.nx, nu)?;
    setup.pem.validate()?;

    let initial_models = match &setup.initial_models {
        Some(models) => {
            if models.len() != m {
                return Err(Error::config(
                    "initial_models",
                    format!("{} models for {m} workers", models.len()),
                ));
            }
            if models.iter().any(|x| x.dims() != (setup.nx, nu, ny)) {
                return Err(Error::config("initial_models", "dimensions do not match nx and the data"));
            }
            models.clone()
        }
        None => (0..m)
            .map(|i| {
                let mut rng = stream(setup.master_seed, Purpose::ModelInit, i as u64, 0);
                init_model(setup.nx, nu, ny, &mut rng)
            })
            .collect(),
    };
    let reference = stream(setup.master_seed, Purpose::Reference, 0, 0).random_range(0..m);
    let ctx = RoundContext {
        reference,
        pseudo_inputs: pseudo_inputs_for(setup, nu)?,
        kappa_limit: setup.kappa_limit,
    };

    let mut state = FederationState::new(initial_models);
    let initial = evaluate(0, &state.local_models, &setup.workers, None, None, &[], None)?;
    let mut rounds = Vec::with_capacity(setup.rounds);
    for _ in 0..setup.rounds {
        let outcome = run_round(&state, &setup.method, &setup.workers, &setup.pem, &ctx)?;
        state = outcome.state;
        rounds.push(evaluate(
            state.round,
            &state.local_models,
            &setup.workers,
            state.global_model.as_ref(),
            state.transforms.as_deref(),
            &outcome.stalled,
            outcome.failure,
        )?);
    }
    Ok(ExperimentOutcome {
        seed: setup.master_seed,
        initial,
        rounds,
        reference,
        final_state: state,
    })
}
