//! Local identification by prediction error minimization.
//!
//! The objective is the free-run simulation error
//! `J(θ) = Σ_k ‖y_k − ŷ_k(θ)‖²` with `x̂_1 = 0`, minimized over every entry of
//! `(A, B, C, D)` by Levenberg–Marquardt. The Jacobian comes from forward
//! sensitivity recursion of the state equation, so it is exact up to rounding.

use nalgebra::Cholesky;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssm::{Matrix, StateSpaceModel, Vector};

/// Paired input/output sequences. Both are stored `channels × K`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesDataset {
    inputs: Matrix,
    outputs: Matrix,
}

impl TimeSeriesDataset {
    pub fn new(inputs: Matrix, outputs: Matrix) -> Result<Self> {
        if inputs.ncols() != outputs.ncols() {
            return Err(Error::Dimension(format!(
                "{} input samples but {} output samples",
                inputs.ncols(),
                outputs.ncols()
            )));
        }
        if inputs.nrows() == 0 || outputs.nrows() == 0 {
            return Err(Error::Dimension("dataset needs at least one input and one output channel".into()));
        }
        if !inputs.iter().chain(outputs.iter()).all(|v| v.is_finite()) {
            return Err(Error::Numeric("dataset contains non-finite values".into()));
        }
        Ok(TimeSeriesDataset { inputs, outputs })
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn outputs(&self) -> &Matrix {
        &self.outputs
    }

    pub fn len(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn nu(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn ny(&self) -> usize {
        self.outputs.nrows()
    }

    /// Fewer samples than `nx·(nu+ny)` leaves the fit poorly determined.
    pub fn is_short_for(&self, nx: usize) -> bool {
        self.len() < nx * (self.nu() + self.ny())
    }

    /// Samples `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.len() {
            return Err(Error::Bounds(format!(
                "range {start}..{end} outside 0..{}",
                self.len()
            )));
        }
        Ok(TimeSeriesDataset {
            inputs: self.inputs.columns(start, end - start).into_owned(),
            outputs: self.outputs.columns(start, end - start).into_owned(),
        })
    }

    pub(crate) fn check_model(&self, model: &StateSpaceModel) -> Result<()> {
        if model.nu() != self.nu() || model.ny() != self.ny() {
            return Err(Error::Dimension(format!(
                "model is {}-in/{}-out, data is {}-in/{}-out",
                model.nu(),
                model.ny(),
                self.nu(),
                self.ny()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PemSettings {
    /// Accepted Levenberg–Marquardt steps per call. Zero leaves the model
    /// untouched.
    pub iterations: usize,
    pub damping_init: f64,
    pub damping_scale: f64,
    /// A trial is accepted only if it lowers the cost by at least this
    /// fraction of the current cost.
    pub min_step_decrease: f64,
}

impl Default for PemSettings {
    fn default() -> Self {
        PemSettings {
            iterations: 1,
            damping_init: 1e-3,
            damping_scale: 10.0,
            min_step_decrease: 0.0,
        }
    }
}

impl PemSettings {
    pub fn with_iterations(iterations: usize) -> Self {
        PemSettings {
            iterations,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.damping_init > 0.0 && self.damping_init.is_finite()) {
            return Err(Error::config("pem.damping_init", "must be positive"));
        }
        if !(self.damping_scale > 1.0 && self.damping_scale.is_finite()) {
            return Err(Error::config("pem.damping_scale", "must be greater than 1"));
        }
        if !(self.min_step_decrease >= 0.0 && self.min_step_decrease < 1.0) {
            return Err(Error::config("pem.min_step_decrease", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Damping ceiling; beyond it a step is considered impossible.
const MAX_DAMPING: f64 = 1e10;

#[derive(Clone, Debug)]
pub struct LocalUpdate {
    pub model: StateSpaceModel,
    pub cost_before: f64,
    pub cost_after: f64,
    pub accepted_steps: usize,
    /// No step could be accepted even at maximum damping.
    pub stalled: bool,
}

/// Σ_k ‖y_k − ŷ_k‖² for the free-run simulation from `x̂_1 = 0`, or `+∞`
/// when the simulation overflows.
pub fn simulation_cost(model: &StateSpaceModel, data: &TimeSeriesDataset) -> Result<f64> {
    data.check_model(model)?;
    Ok(cost_unchecked(model, data))
}

fn cost_unchecked(model: &StateSpaceModel, data: &TimeSeriesDataset) -> f64 {
    let (nx, nu, ny) = model.dims();
    let (a, b, c, d) = (model.a(), model.b(), model.c(), model.d());
    let mut x = vec![0.0; nx];
    let mut next = vec![0.0; nx];
    let mut cost = 0.0;
    for k in 0..data.len() {
        let u = data.inputs.column(k);
        let y = data.outputs.column(k);
        for p in 0..ny {
            let mut yh = 0.0;
            for j in 0..nx {
                yh += c[(p, j)] * x[j];
            }
            for j in 0..nu {
                yh += d[(p, j)] * u[j];
            }
            let e = y[p] - yh;
            cost += e * e;
        }
        for i in 0..nx {
            let mut v = 0.0;
            for j in 0..nx {
                v += a[(i, j)] * x[j];
            }
            for j in 0..nu {
                v += b[(i, j)] * u[j];
            }
            next[i] = v;
        }
        std::mem::swap(&mut x, &mut next);
        if !cost.is_finite() {
            return f64::INFINITY;
        }
    }
    if cost.is_finite() {
        cost
    } else {
        f64::INFINITY
    }
}

/// Walks the simulation and its parameter sensitivities, handing
/// `(k, residual ŷ_k − y_k, ∂ŷ_k/∂θ as ny × p row-major)` to `visit`.
fn sensitivity_pass<F>(model: &StateSpaceModel, data: &TimeSeriesDataset, mut visit: F) -> Result<()>
where
    F: FnMut(usize, &[f64], &[f64]),
{
    let (nx, nu, ny) = model.dims();
    let np = model.n_params();
    let off_b = nx * nx;
    let off_c = off_b + nx * nu;
    let off_d = off_c + ny * nx;
    let (a, b, c, d) = (model.a(), model.b(), model.c(), model.d());

    let mut x = vec![0.0; nx];
    let mut x_next = vec![0.0; nx];
    // sens[i * np + q] = ∂x_i / ∂θ_q
    let mut sens = vec![0.0; nx * np];
    let mut sens_next = vec![0.0; nx * np];
    let mut resid = vec![0.0; ny];
    let mut grad = vec![0.0; ny * np];

    for k in 0..data.len() {
        let u = data.inputs.column(k);
        let y = data.outputs.column(k);

        for p in 0..ny {
            let mut yh = 0.0;
            for j in 0..nx {
                yh += c[(p, j)] * x[j];
            }
            for j in 0..nu {
                yh += d[(p, j)] * u[j];
            }
            resid[p] = yh - y[p];
            let row = &mut grad[p * np..(p + 1) * np];
            row.fill(0.0);
            for j in 0..nx {
                let cj = c[(p, j)];
                if cj != 0.0 {
                    let s = &sens[j * np..(j + 1) * np];
                    for q in 0..np {
                        row[q] += cj * s[q];
                    }
                }
            }
            for j in 0..nx {
                row[off_c + p * nx + j] += x[j];
            }
            for j in 0..nu {
                row[off_d + p * nu + j] += u[j];
            }
        }
        if !resid.iter().chain(grad.iter()).all(|v| v.is_finite()) {
            return Err(Error::Overflow { step: k });
        }
        visit(k, &resid, &grad);

        for i in 0..nx {
            let mut v = 0.0;
            for j in 0..nx {
                v += a[(i, j)] * x[j];
            }
            for j in 0..nu {
                v += b[(i, j)] * u[j];
            }
            x_next[i] = v;

            let row = &mut sens_next[i * np..(i + 1) * np];
            row.fill(0.0);
            for j in 0..nx {
                let aij = a[(i, j)];
                if aij != 0.0 {
                    let s = &sens[j * np..(j + 1) * np];
                    for q in 0..np {
                        row[q] += aij * s[q];
                    }
                }
            }
            for j in 0..nx {
                row[i * nx + j] += x[j];
            }
            for j in 0..nu {
                row[off_b + i * nu + j] += u[j];
            }
        }
        std::mem::swap(&mut x, &mut x_next);
        std::mem::swap(&mut sens, &mut sens_next);
    }
    Ok(())
}

/// Residuals `ŷ − y` (stacked sample-major, `K·ny`) and their Jacobian with
/// respect to [`StateSpaceModel::to_params`].
pub fn residual_jacobian(model: &StateSpaceModel, data: &TimeSeriesDataset) -> Result<(Vector, Matrix)> {
    data.check_model(model)?;
    let ny = model.ny();
    let np = model.n_params();
    let mut r = Vector::zeros(data.len() * ny);
    let mut jac = Matrix::zeros(data.len() * ny, np);
    sensitivity_pass(model, data, |k, resid, grad| {
        for p in 0..ny {
            r[k * ny + p] = resid[p];
            for q in 0..np {
                jac[(k * ny + p, q)] = grad[p * np + q];
            }
        }
    })?;
    Ok((r, jac))
}

fn normal_equations(model: &StateSpaceModel, data: &TimeSeriesDataset) -> Result<(Matrix, Vector)> {
    let ny = model.ny();
    let np = model.n_params();
    let mut jtj = vec![0.0; np * np];
    let mut jtr = vec![0.0; np];
    sensitivity_pass(model, data, |_, resid, grad| {
        for p in 0..ny {
            let row = &grad[p * np..(p + 1) * np];
            for q in 0..np {
                let gq = row[q];
                if gq == 0.0 {
                    continue;
                }
                jtr[q] += gq * resid[p];
                let dst = &mut jtj[q * np..(q + 1) * np];
                for s in q..np {
                    dst[s] += gq * row[s];
                }
            }
        }
    })?;
    let mut h = Matrix::zeros(np, np);
    for q in 0..np {
        for s in q..np {
            h[(q, s)] = jtj[q * np + s];
            h[(s, q)] = jtj[q * np + s];
        }
    }
    Ok((h, Vector::from_vec(jtr)))
}

/// Refines `model` on `data` with `settings.iterations` accepted
/// Levenberg–Marquardt steps. The returned cost never exceeds the input cost.
pub fn local_update(
    model: &StateSpaceModel,
    data: &TimeSeriesDataset,
    settings: &PemSettings,
) -> Result<LocalUpdate> {
    data.check_model(model)?;
    let (nx, nu, ny) = model.dims();
    let cost_before = cost_unchecked(model, data);
    let mut current = model.clone();
    let mut cost = cost_before;
    let mut accepted = 0;
    let mut stalled = false;
    let mut damping = settings.damping_init;

    if !cost.is_finite() {
        return Ok(LocalUpdate {
            model: current,
            cost_before,
            cost_after: cost,
            accepted_steps: 0,
            stalled: true,
        });
    }

    'outer: while accepted < settings.iterations {
        if cost == 0.0 {
            break;
        }
        let (jtj, jtr) = match normal_equations(&current, data) {
            Ok(ne) => ne,
            Err(_) => {
                stalled = true;
                break;
            }
        };
        if jtr.iter().all(|g| *g == 0.0) {
            break;
        }
        let max_diag = jtj.diagonal().max();
        let floor = (max_diag * 1e-12).max(f64::MIN_POSITIVE);
        let params = current.to_params();
        loop {
            let mut h = jtj.clone();
            for q in 0..h.nrows() {
                h[(q, q)] += damping * jtj[(q, q)].max(floor);
            }
            let step = Cholesky::new(h).map(|ch| -ch.solve(&jtr));
            if let Some(step) = step {
                let trial: Vec<f64> = params.iter().zip(step.iter()).map(|(p, s)| p + s).collect();
                if trial.iter().all(|v| v.is_finite()) {
                    let candidate = StateSpaceModel::from_params(nx, nu, ny, &trial)?;
                    let trial_cost = cost_unchecked(&candidate, data);
                    if trial_cost < cost && cost - trial_cost >= settings.min_step_decrease * cost {
                        current = candidate;
                        cost = trial_cost;
                        accepted += 1;
                        damping = (damping / settings.damping_scale).max(1e-15);
                        continue 'outer;
                    }
                }
            }
            damping *= settings.damping_scale;
            if damping > MAX_DAMPING {
                stalled = true;
                break 'outer;
            }
        }
    }

    Ok(LocalUpdate {
        model: current,
        cost_before,
        cost_after: cost,
        accepted_steps: accepted,
        stalled,
    })
}

/// Random initial model: `B, C, D ~ N(0, 0.1²)` entrywise, `A ~ N(0, 1)`
/// rescaled to spectral radius 0.5.
pub fn init_model<R: Rng + ?Sized>(nx: usize, nu: usize, ny: usize, rng: &mut R) -> StateSpaceModel {
    let small = Normal::new(0.0, 0.1).expect("valid std");
    loop {
        let a = Matrix::from_fn(nx, nx, |_, _| StandardNormal.sample(rng));
        let b = Matrix::from_fn(nx, nu, |_, _| small.sample(rng));
        let c = Matrix::from_fn(ny, nx, |_, _| small.sample(rng));
        let d = Matrix::from_fn(ny, nu, |_, _| small.sample(rng));
        let Ok(model) = StateSpaceModel::new(a.clone(), b.clone(), c.clone(), d.clone()) else {
            continue;
        };
        let Ok(radius) = model.spectral_radius() else {
            continue;
        };
        if radius < 1e-8 {
            continue;
        }
        let scaled = a * (0.5 / radius);
        if let Ok(m) = StateSpaceModel::new(scaled, b, c, d) {
            return m;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    fn scalar_model(a: f64, b: f64, c: f64) -> StateSpaceModel {
        StateSpaceModel::new(
            Matrix::from_element(1, 1, a),
            Matrix::from_element(1, 1, b),
            Matrix::from_element(1, 1, c),
            Matrix::zeros(1, 1),
        )
        .unwrap()
    }

    fn scalar_data(k: usize) -> TimeSeriesDataset {
        let truth = scalar_model(0.5, 1.0, 0.5);
        let mut rng = stream(3, Purpose::WorkerData, 0, 0);
        let u = Matrix::from_fn(1, k, |_, _| StandardNormal.sample(&mut rng));
        let y = truth.simulate(&u, &Vector::zeros(1)).unwrap().outputs;
        TimeSeriesDataset::new(u, y).unwrap()
    }

    #[test]
    fn dataset_rejects_mismatch() {
        assert!(TimeSeriesDataset::new(Matrix::zeros(1, 3), Matrix::zeros(1, 4)).is_err());
        let d = TimeSeriesDataset::new(Matrix::zeros(1, 4), Matrix::zeros(2, 4)).unwrap();
        assert!(d.is_short_for(3));
        assert!(matches!(d.slice(2, 5), Err(Error::Bounds(_))));
        assert_eq!(d.slice(1, 3).unwrap().len(), 2);
    }

    #[test]
    fn cost_hand_cases() {
        let data = scalar_data(40);
        let truth = scalar_model(0.5, 1.0, 0.5);
        assert_eq!(simulation_cost(&truth, &data).unwrap(), 0.0);
        let zero = StateSpaceModel::zeros(1, 1, 1);
        let expected: f64 = data.outputs().iter().map(|y| y * y).sum();
        assert!((simulation_cost(&zero, &data).unwrap() - expected).abs() < 1e-12 * expected);
    }

    #[test]
    fn cost_is_infinite_on_overflow() {
        let data = scalar_data(2000);
        let wild = scalar_model(3.0, 1.0, 1.0);
        assert_eq!(simulation_cost(&wild, &data).unwrap(), f64::INFINITY);
    }

    #[test]
    fn perfect_model_is_left_alone() {
        let data = scalar_data(60);
        let truth = scalar_model(0.5, 1.0, 0.5);
        let out = local_update(&truth, &data, &PemSettings::with_iterations(5)).unwrap();
        assert_eq!(out.cost_after, 0.0);
        assert_eq!(out.model, truth);
    }

    #[test]
    fn zero_iterations_is_identity() {
        let data = scalar_data(60);
        let m = scalar_model(0.1, 0.2, 0.3);
        let out = local_update(&m, &data, &PemSettings::with_iterations(0)).unwrap();
        assert_eq!(out.model, m);
        assert_eq!(out.accepted_steps, 0);
    }

    #[test]
    fn overflowing_start_is_reported_stalled() {
        let data = scalar_data(2000);
        let wild = scalar_model(3.0, 1.0, 1.0);
        let out = local_update(&wild, &data, &PemSettings::with_iterations(3)).unwrap();
        assert!(out.stalled);
        assert_eq!(out.model, wild);
    }

    #[test]
    fn scalar_step_decreases_cost() {
        let data = scalar_data(100);
        let start = scalar_model(0.4, 1.0, 0.5);
        // grid over the pole alone: the minimum sits at the true value 0.5,
        // so descent from 0.4 must move toward it
        let grid_best = (0..=200)
            .map(|i| 0.3 + i as f64 * 0.001)
            .min_by(|x, y| {
                let cx = simulation_cost(&scalar_model(*x, 1.0, 0.5), &data).unwrap();
                let cy = simulation_cost(&scalar_model(*y, 1.0, 0.5), &data).unwrap();
                cx.partial_cmp(&cy).unwrap()
            })
            .unwrap();
        assert!((grid_best - 0.5).abs() < 1e-9);
        let out = local_update(&start, &data, &PemSettings::with_iterations(1)).unwrap();
        assert_eq!(out.accepted_steps, 1);
        assert!(out.cost_after < out.cost_before);
    }

    #[test]
    fn init_model_shapes_and_radius() {
        let mut rng = stream(11, Purpose::ModelInit, 0, 0);
        let m = init_model(3, 1, 1, &mut rng);
        assert_eq!(m.a().shape(), (3, 3));
        assert_eq!(m.b().shape(), (3, 1));
        assert_eq!(m.c().shape(), (1, 3));
        assert_eq!(m.d().shape(), (1, 1));
        assert!((m.spectral_radius().unwrap() - 0.5).abs() < 1e-9);
        let again = init_model(3, 1, 1, &mut stream(11, Purpose::ModelInit, 0, 0));
        assert_eq!(m, again);
    }

    #[test]
    fn settings_validation() {
        assert!(PemSettings::default().validate().is_ok());
        let bad = PemSettings {
            damping_scale: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
