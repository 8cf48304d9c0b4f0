//! Similarity transforms that bring local models into a common state basis.
//!
//! Every transform follows the convention `x = T x'`: the aligned model is
//! `(T⁻¹AT, T⁻¹B, CT, D)`, see [`StateSpaceModel::apply_similarity`].

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssm::{AlignmentTransform, Matrix, StateSpaceModel, Vector};

/// `[B, AB, …, A^(nx−1) B]`.
pub fn controllability_matrix(model: &StateSpaceModel) -> Matrix {
    let (nx, nu, _) = model.dims();
    let mut p = Matrix::zeros(nx, nx * nu);
    let mut block = model.b().clone();
    for k in 0..nx {
        p.columns_mut(k * nu, nu).copy_from(&block);
        block = model.a() * block;
    }
    p
}

/// Number of singular values above `max(rows, cols)·ε·σ_max`.
pub fn numerical_rank(m: &Matrix) -> usize {
    let sv = m.singular_values();
    let smax = sv.max();
    if smax == 0.0 {
        return 0;
    }
    let tol = m.nrows().max(m.ncols()) as f64 * f64::EPSILON * smax;
    sv.iter().filter(|s| **s > tol).count()
}

/// Hankel matrix of characteristic coefficients whose product with the
/// controllability matrix yields the canonical transform. Entry `(i, j)` is
/// the coefficient of `λ^(i+j+1)` in the monic characteristic polynomial.
fn coefficient_hankel(coeffs: &[f64]) -> Matrix {
    let n = coeffs.len();
    Matrix::from_fn(n, n, |i, j| {
        let idx = i + j + 1;
        match idx.cmp(&n) {
            std::cmp::Ordering::Less => coeffs[n - idx - 1],
            std::cmp::Ordering::Equal => 1.0,
            std::cmp::Ordering::Greater => 0.0,
        }
    })
}

/// Transform into controllable canonical form for a single-input model:
/// `T = P·W` with `P` the controllability matrix and `W` the coefficient
/// Hankel matrix.
pub fn to_ccf_siso(model: &StateSpaceModel, kappa_limit: f64) -> Result<AlignmentTransform> {
    if model.nu() != 1 {
        return Err(Error::Dimension(format!(
            "single-input canonical form needs nu = 1, got {}",
            model.nu()
        )));
    }
    let p = controllability_matrix(model);
    let rank = numerical_rank(&p);
    if rank < model.nx() {
        return Err(Error::Uncontrollable {
            rank,
            nx: model.nx(),
        });
    }
    let w = coefficient_hankel(&model.char_poly_coeffs());
    AlignmentTransform::new(p * w, kappa_limit)
}

/// Controllability indices: how many Krylov columns each input contributes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MuSpec(pub Vec<usize>);

impl MuSpec {
    pub fn validate(&self, nx: usize, nu: usize) -> Result<()> {
        if self.0.len() != nu {
            return Err(Error::InvalidMu(format!(
                "{} indices given for {nu} inputs",
                self.0.len()
            )));
        }
        let total: usize = self.0.iter().sum();
        if total != nx {
            return Err(Error::InvalidMu(format!("indices sum to {total}, expected nx = {nx}")));
        }
        Ok(())
    }

    /// All columns from the first input.
    pub fn first_input(nx: usize, nu: usize) -> Self {
        let mut mu = vec![0; nu];
        mu[0] = nx;
        MuSpec(mu)
    }
}

/// Multi-input canonical transform built from the controllability indices
/// in `mu`.
///
/// The selected Krylov columns form `M`; the last row of each partition of
/// `M⁻¹`, propagated through powers of `A`, is stacked and inverted.
pub fn to_ccf_mimo(model: &StateSpaceModel, mu: &MuSpec, kappa_limit: f64) -> Result<AlignmentTransform> {
    let (nx, nu, _) = model.dims();
    mu.validate(nx, nu)?;
    let a = model.a();

    let mut m = Matrix::zeros(nx, nx);
    let mut col = 0;
    for (l, &count) in mu.0.iter().enumerate() {
        let mut v: Vector = model.b().column(l).into_owned();
        for _ in 0..count {
            m.set_column(col, &v);
            v = a * v;
            col += 1;
        }
    }
    let rank = numerical_rank(&m);
    if rank < nx {
        return Err(Error::InvalidMu(format!(
            "selected controllability columns have rank {rank} < {nx}"
        )));
    }
    let m_inv = m
        .try_inverse()
        .ok_or_else(|| Error::InvalidMu("selected controllability columns are singular".into()))?;

    let mut stack = Matrix::zeros(nx, nx);
    let mut end = 0;
    let mut row = 0;
    for &count in &mu.0 {
        if count == 0 {
            continue;
        }
        end += count;
        let mut q = m_inv.row(end - 1).into_owned();
        for _ in 0..count {
            stack.set_row(row, &q);
            q *= a;
            row += 1;
        }
    }
    let inner = AlignmentTransform::new(stack, kappa_limit)?;
    AlignmentTransform::new(inner.inverse().clone(), kappa_limit)
}

/// Inputs used to excite every local model when fitting least-squares
/// alignments.
#[derive(Clone, Debug, PartialEq)]
pub enum PseudoInputs {
    Gaussian { std: f64 },
    /// A fixed `nu × K` sequence, e.g. the test-set inputs.
    Sequence(Matrix),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoDataSpec {
    /// Number of pseudo-state samples. Ignored for `Sequence` inputs, whose
    /// own length is used.
    pub length: usize,
    pub inputs: PseudoInputs,
}

impl PseudoDataSpec {
    pub fn generate_inputs<R: Rng + ?Sized>(&self, nu: usize, rng: &mut R) -> Result<Matrix> {
        match &self.inputs {
            PseudoInputs::Gaussian { std } => {
                let dist = Normal::new(0.0, *std)
                    .map_err(|e| Error::config("pseudo.input_std", e.to_string()))?;
                Ok(Matrix::from_fn(nu, self.length, |_, _| dist.sample(rng)))
            }
            PseudoInputs::Sequence(u) => {
                if u.nrows() != nu {
                    return Err(Error::Dimension(format!(
                        "pseudo-input sequence has {} channels, models have {nu}",
                        u.nrows()
                    )));
                }
                Ok(u.clone())
            }
        }
    }
}

/// Pseudo-state trajectory `[x_2, …, x_{K+1}]` (`nx × K`) of `model` driven
/// by `inputs` from the zero state, i.e. the states reached after each input.
pub fn pseudo_states(model: &StateSpaceModel, inputs: &Matrix) -> Result<Matrix> {
    let traj = model.simulate(inputs, &Vector::zeros(model.nx()))?;
    let k = inputs.ncols();
    let mut out = Matrix::zeros(model.nx(), k);
    if k > 1 {
        out.columns_mut(0, k - 1)
            .copy_from(&traj.states.columns(1, k - 1));
    }
    let last = model.a() * traj.states.column(k - 1) + model.b() * inputs.column(k - 1);
    if !last.iter().all(|v| v.is_finite()) {
        return Err(Error::Overflow { step: k });
    }
    out.set_column(k - 1, &last);
    Ok(out)
}

/// Least-squares alignment of every model onto the basis of model
/// `reference` (0-based). Draws the shared pseudo-input from `rng`.
pub fn align_optimize<R: Rng + ?Sized>(
    models: &[StateSpaceModel],
    reference: usize,
    spec: &PseudoDataSpec,
    rng: &mut R,
    kappa_limit: f64,
) -> Result<Vec<AlignmentTransform>> {
    let nu = models
        .first()
        .ok_or_else(|| Error::Dimension("no models to align".into()))?
        .nu();
    let inputs = spec.generate_inputs(nu, rng)?;
    align_to_reference(models, reference, &inputs, kappa_limit)
}

/// `T_i = argmin_T Σ_k ‖x⁽ⁱ⁾_k − T x⁽ʲ⁾_k‖²` for every `i ≠ j`, with
/// `T_j = I`.
pub fn align_to_reference(
    models: &[StateSpaceModel],
    reference: usize,
    inputs: &Matrix,
    kappa_limit: f64,
) -> Result<Vec<AlignmentTransform>> {
    let first = models
        .get(reference)
        .ok_or_else(|| Error::Bounds(format!("reference {reference} of {} models", models.len())))?;
    let dims = first.dims();
    if models.iter().any(|m| m.dims() != dims) {
        return Err(Error::Dimension("models do not share (nx, nu, ny)".into()));
    }
    let nx = dims.0;
    if inputs.ncols() < nx {
        return Err(Error::DegeneratePseudoData);
    }
    let x_ref = pseudo_states(first, inputs)?;
    if numerical_rank(&x_ref) < nx {
        return Err(Error::DegeneratePseudoData);
    }
    // T Xj ≈ Xi  ⇔  Xjᵀ Tᵀ ≈ Xiᵀ, solved through the SVD of Xjᵀ
    let svd = x_ref.transpose().svd(true, true);
    models
        .iter()
        .enumerate()
        .map(|(i, model)| {
            if i == reference {
                return Ok(AlignmentTransform::identity(nx));
            }
            let x_i = pseudo_states(model, inputs)?;
            let t_transposed = svd
                .solve(&x_i.transpose(), 0.0)
                .map_err(|e| Error::Numeric(e.to_string()))?;
            AlignmentTransform::new(t_transposed.transpose(), kappa_limit)
        })
        .collect()
}

/// Largest deviation of `(A, B)` from the single-input controllable
/// canonical pattern (shifted identity above a free last row, `B = e_nx`).
pub fn ccf_structure_error(model: &StateSpaceModel) -> Result<f64> {
    if model.nu() != 1 {
        return Err(Error::Dimension("canonical pattern is defined for nu = 1".into()));
    }
    let nx = model.nx();
    let a = model.a();
    let b = model.b();
    let mut err: f64 = 0.0;
    for i in 0..nx - 1 {
        for j in 0..nx {
            let target = if j == i + 1 { 1.0 } else { 0.0 };
            err = err.max((a[(i, j)] - target).abs());
        }
    }
    for i in 0..nx {
        let target = if i == nx - 1 { 1.0 } else { 0.0 };
        err = err.max((b[(i, 0)] - target).abs());
    }
    Ok(err)
}
