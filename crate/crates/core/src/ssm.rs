//! Discrete-time linear state-space models.
//!
//! A model maps inputs to outputs through
//!
//! ```text
//! x[k+1] = A x[k] + B u[k]
//! y[k]   = C x[k] + D u[k]
//! ```
//!
//! Signals are stored as `channels × K` matrices so that each sample is a
//! contiguous column.

use nalgebra::{Complex, DMatrix, DVector, Schur};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Condition number above which a transform is flagged as ill-conditioned.
pub const DEFAULT_KAPPA_LIMIT: f64 = 1e12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelJson", into = "ModelJson")]
pub struct StateSpaceModel {
    a: Matrix,
    b: Matrix,
    c: Matrix,
    d: Matrix,
}

impl StateSpaceModel {
    pub fn new(a: Matrix, b: Matrix, c: Matrix, d: Matrix) -> Result<Self> {
        let nx = a.nrows();
        let nu = b.ncols();
        let ny = c.nrows();
        if nx == 0 || nu == 0 || ny == 0 {
            return Err(Error::Dimension(format!(
                "model dimensions must be positive, got nx={nx} nu={nu} ny={ny}"
            )));
        }
        if a.ncols() != nx
            || b.nrows() != nx
            || c.ncols() != nx
            || d.nrows() != ny
            || d.ncols() != nu
        {
            return Err(Error::Dimension(format!(
                "A {:?}, B {:?}, C {:?}, D {:?} are not consistent",
                a.shape(),
                b.shape(),
                c.shape(),
                d.shape()
            )));
        }
        let model = StateSpaceModel { a, b, c, d };
        if !model.is_finite() {
            return Err(Error::Numeric("model has non-finite entries".into()));
        }
        Ok(model)
    }

    pub fn zeros(nx: usize, nu: usize, ny: usize) -> Self {
        StateSpaceModel {
            a: Matrix::zeros(nx, nx),
            b: Matrix::zeros(nx, nu),
            c: Matrix::zeros(ny, nx),
            d: Matrix::zeros(ny, nu),
        }
    }

    pub fn nx(&self) -> usize {
        self.a.nrows()
    }

    pub fn nu(&self) -> usize {
        self.b.ncols()
    }

    pub fn ny(&self) -> usize {
        self.c.nrows()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.nx(), self.nu(), self.ny())
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn c(&self) -> &Matrix {
        &self.c
    }

    pub fn d(&self) -> &Matrix {
        &self.d
    }

    pub fn into_parts(self) -> (Matrix, Matrix, Matrix, Matrix) {
        (self.a, self.b, self.c, self.d)
    }

    /// Number of free parameters, i.e. entries of A, B, C and D.
    pub fn n_params(&self) -> usize {
        let (nx, nu, ny) = self.dims();
        nx * nx + nx * nu + ny * nx + ny * nu
    }

    /// Flattens the parameters as `vec(A), vec(B), vec(C), vec(D)`, each
    /// block in row-major order.
    pub fn to_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for m in [&self.a, &self.b, &self.c, &self.d] {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    out.push(m[(i, j)]);
                }
            }
        }
        out
    }

    /// Inverse of [`to_params`](Self::to_params). Non-finite values are
    /// accepted so that trial steps can be evaluated (they simply overflow).
    pub fn from_params(nx: usize, nu: usize, ny: usize, params: &[f64]) -> Result<Self> {
        let expected = nx * nx + nx * nu + ny * nx + ny * nu;
        if params.len() != expected {
            return Err(Error::Dimension(format!(
                "expected {expected} parameters, got {}",
                params.len()
            )));
        }
        let (pa, rest) = params.split_at(nx * nx);
        let (pb, rest) = rest.split_at(nx * nu);
        let (pc, pd) = rest.split_at(ny * nx);
        Ok(StateSpaceModel {
            a: Matrix::from_row_slice(nx, nx, pa),
            b: Matrix::from_row_slice(nx, nu, pb),
            c: Matrix::from_row_slice(ny, nx, pc),
            d: Matrix::from_row_slice(ny, nu, pd),
        })
    }

    pub fn is_finite(&self) -> bool {
        [&self.a, &self.b, &self.c, &self.d]
            .iter()
            .all(|m| m.iter().all(|v| v.is_finite()))
    }

    /// Simulates the model from `x1` over every column of `inputs` (`nu × K`).
    pub fn simulate(&self, inputs: &Matrix, x1: &Vector) -> Result<StateTrajectory> {
        let (nx, nu, ny) = self.dims();
        if inputs.nrows() != nu {
            return Err(Error::Dimension(format!(
                "inputs have {} channels, model expects {nu}",
                inputs.nrows()
            )));
        }
        if inputs.ncols() == 0 {
            return Err(Error::Dimension("input sequence is empty".into()));
        }
        if x1.len() != nx {
            return Err(Error::Dimension(format!(
                "initial state has length {}, model expects {nx}",
                x1.len()
            )));
        }
        let k_len = inputs.ncols();
        let mut states = Matrix::zeros(nx, k_len);
        let mut outputs = Matrix::zeros(ny, k_len);
        let mut x = x1.clone();
        for k in 0..k_len {
            let u = inputs.column(k);
            let y = &self.c * &x + &self.d * u;
            if !x.iter().chain(y.iter()).all(|v| v.is_finite()) {
                return Err(Error::Overflow { step: k });
            }
            states.set_column(k, &x);
            outputs.set_column(k, &y);
            x = &self.a * &x + &self.b * u;
        }
        Ok(StateTrajectory { states, outputs })
    }

    /// Roots of `det(λI − A)`, in no particular order.
    pub fn eigenvalues(&self) -> Result<Vec<Complex<f64>>> {
        let schur = Schur::try_new(self.a.clone(), f64::EPSILON, 10_000)
            .ok_or_else(|| Error::Numeric("Schur decomposition did not converge".into()))?;
        let eig = schur
            .complex_eigenvalues();
        Ok(eig.iter().copied().collect())
    }

    pub fn spectral_radius(&self) -> Result<f64> {
        Ok(self
            .eigenvalues()?
            .iter()
            .map(|l| l.norm())
            .fold(0.0, f64::max))
    }

    /// Coefficients `(a1, …, a_nx)` of the monic characteristic polynomial
    /// `λ^nx + a1 λ^(nx−1) + … + a_nx` (Faddeev–LeVerrier recursion).
    pub fn char_poly_coeffs(&self) -> Vec<f64> {
        char_poly_coeffs(&self.a)
    }

    /// True iff every eigenvalue lies strictly inside the circle of radius
    /// `1 − margin`. A failed eigen-solve counts as unstable.
    pub fn is_stable(&self, margin: f64) -> bool {
        debug_assert!(margin >= 0.0);
        match self.spectral_radius() {
            Ok(r) => r < 1.0 - margin,
            Err(_) => false,
        }
    }

    /// Re-expresses the model in the basis `x = T x'`:
    /// `(T⁻¹AT, T⁻¹B, CT, D)`.
    pub fn apply_similarity(&self, t: &AlignmentTransform) -> Result<Self> {
        self.check_transform(t)?;
        Ok(StateSpaceModel {
            a: &t.t_inv * &self.a * &t.t,
            b: &t.t_inv * &self.b,
            c: &self.c * &t.t,
            d: self.d.clone(),
        })
    }

    /// Maps a model back out of the basis `x = T x'`:
    /// `(TAT⁻¹, TB, CT⁻¹, D)`.
    pub fn apply_inverse_similarity(&self, t: &AlignmentTransform) -> Result<Self> {
        self.check_transform(t)?;
        Ok(StateSpaceModel {
            a: &t.t * &self.a * &t.t_inv,
            b: &t.t * &self.b,
            c: &self.c * &t.t_inv,
            d: self.d.clone(),
        })
    }

    fn check_transform(&self, t: &AlignmentTransform) -> Result<()> {
        if t.dim() != self.nx() {
            return Err(Error::Dimension(format!(
                "transform is {0}×{0}, model has nx={1}",
                t.dim(),
                self.nx()
            )));
        }
        Ok(())
    }
}

/// Faddeev–LeVerrier: `M₁ = I`, `a_k = −tr(A M_k)/k`, `M_{k+1} = A M_k + a_k I`.
pub fn char_poly_coeffs(a: &Matrix) -> Vec<f64> {
    let n = a.nrows();
    let mut coeffs = Vec::with_capacity(n);
    let mut m = Matrix::identity(n, n);
    for k in 1..=n {
        let am = a * &m;
        let ak = -am.trace() / k as f64;
        coeffs.push(ak);
        m = am;
        for i in 0..n {
            m[(i, i)] += ak;
        }
    }
    coeffs
}

/// Companion matrix in controllable canonical form: shifted identity on the
/// top rows, `(−a_n, …, −a_1)` on the last row.
pub fn ccf_state_matrix(coeffs: &[f64]) -> Matrix {
    let n = coeffs.len();
    let mut a = Matrix::zeros(n, n);
    for i in 0..n.saturating_sub(1) {
        a[(i, i + 1)] = 1.0;
    }
    for j in 0..n {
        a[(n - 1, j)] = -coeffs[n - 1 - j];
    }
    a
}

/// Monic polynomial coefficients `(a1, …, an)` with the given real roots.
pub fn coeffs_from_roots(roots: &[f64]) -> Vec<f64> {
    // poly[i] is the coefficient of λ^(deg − i)
    let mut poly = vec![1.0];
    for &r in roots {
        let mut next = vec![0.0; poly.len() + 1];
        for (i, &p) in poly.iter().enumerate() {
            next[i] += p;
            next[i + 1] -= r * p;
        }
        poly = next;
    }
    poly[1..].to_vec()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateTrajectory {
    /// `nx × K`, column k is the state at step k.
    pub states: Matrix,
    /// `ny × K`.
    pub outputs: Matrix,
}

impl StateTrajectory {
    pub fn len(&self) -> usize {
        self.states.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A nonsingular change of state basis `x = T x'` with its inverse and 2-norm
/// condition number.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentTransform {
    t: Matrix,
    t_inv: Matrix,
    kappa: f64,
    ill_conditioned: bool,
}

impl AlignmentTransform {
    pub fn identity(n: usize) -> Self {
        AlignmentTransform {
            t: Matrix::identity(n, n),
            t_inv: Matrix::identity(n, n),
            kappa: 1.0,
            ill_conditioned: false,
        }
    }

    /// Builds a transform from `t`. Matrices whose smallest singular value is
    /// below `n·ε·σ_max` are rejected; a condition number above `kappa_limit`
    /// is flagged but still accepted.
    pub fn new(t: Matrix, kappa_limit: f64) -> Result<Self> {
        if !t.is_square() {
            return Err(Error::Dimension(format!(
                "transform must be square, got {:?}",
                t.shape()
            )));
        }
        let n = t.nrows();
        if n == 0 {
            return Err(Error::Dimension("transform is empty".into()));
        }
        if !t.iter().all(|v| v.is_finite()) {
            return Err(Error::SingularTransform);
        }
        let sv = t.singular_values();
        let smax = sv.max();
        let smin = sv.min();
        if smax == 0.0 || smin <= n as f64 * f64::EPSILON * smax {
            return Err(Error::SingularTransform);
        }
        let t_inv = t
            .clone()
            .try_inverse()
            .ok_or(Error::SingularTransform)?;
        if !t_inv.iter().all(|v| v.is_finite()) {
            return Err(Error::SingularTransform);
        }
        let kappa = (smax / smin).max(1.0);
        Ok(AlignmentTransform {
            t,
            t_inv,
            kappa,
            ill_conditioned: kappa > kappa_limit,
        })
    }

    pub fn dim(&self) -> usize {
        self.t.nrows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.t
    }

    pub fn inverse(&self) -> &Matrix {
        &self.t_inv
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn is_ill_conditioned(&self) -> bool {
        self.ill_conditioned
    }
}

/// Alias matching the operation name used by callers that build transforms
/// from raw matrices.
pub fn make_transform(t: Matrix, kappa_limit: f64) -> Result<AlignmentTransform> {
    AlignmentTransform::new(t, kappa_limit)
}

#[derive(Serialize, Deserialize)]
struct ModelJson {
    nx: usize,
    nu: usize,
    ny: usize,
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    c: Vec<Vec<f64>>,
    #[serde(rename = "D")]
    d: Vec<Vec<f64>>,
}

fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix_from_rows(name: &str, rows: &[Vec<f64>], nrows: usize, ncols: usize) -> Result<Matrix> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Schema(format!("{name} must be {nrows}×{ncols}")));
    }
    Ok(Matrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

impl TryFrom<ModelJson> for StateSpaceModel {
    type Error = Error;

    fn try_from(j: ModelJson) -> Result<Self> {
        StateSpaceModel::new(
            matrix_from_rows("A", &j.a, j.nx, j.nx)?,
            matrix_from_rows("B", &j.b, j.nx, j.nu)?,
            matrix_from_rows("C", &j.c, j.ny, j.nx)?,
            matrix_from_rows("D", &j.d, j.ny, j.nu)?,
        )
    }
}

impl From<StateSpaceModel> for ModelJson {
    fn from(m: StateSpaceModel) -> Self {
        ModelJson {
            nx: m.nx(),
            nu: m.nu(),
            ny: m.ny(),
            a: rows_of(&m.a),
            b: rows_of(&m.b),
            c: rows_of(&m.c),
            d: rows_of(&m.d),
        }
    }
}
