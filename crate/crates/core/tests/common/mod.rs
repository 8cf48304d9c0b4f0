#![allow(dead_code)]

pub mod oracles;

use fedsysid::ssm::{ccf_state_matrix, Matrix};
use fedsysid::StateSpaceModel;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal, Uniform};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Dense random model with spectral radius `radius`.
pub fn random_model<R: Rng>(nx: usize, nu: usize, ny: usize, radius: f64, rng: &mut R) -> StateSpaceModel {
    loop {
        let a = gaussian_matrix(nx, nx, rng);
        let m = StateSpaceModel::new(a.clone(), Matrix::zeros(nx, nu), Matrix::zeros(ny, nx), Matrix::zeros(ny, nu))
            .unwrap();
        let r = m.spectral_radius().unwrap();
        if r < 1e-6 {
            continue;
        }
        return StateSpaceModel::new(
            a * (radius / r),
            gaussian_matrix(nx, nu, rng),
            gaussian_matrix(ny, nx, rng),
            gaussian_matrix(ny, nu, rng),
        )
        .unwrap();
    }
}

/// Random transform with singular values in `[1, kappa]`.
pub fn random_transform<R: Rng>(n: usize, kappa: f64, rng: &mut R) -> Matrix {
    let q1 = gaussian_matrix(n, n, rng).qr().q();
    let q2 = gaussian_matrix(n, n, rng).qr().q();
    let u = Uniform::new_inclusive(0.0, 1.0).unwrap();
    let mut s: Vec<f64> = (0..n).map(|_| kappa.powf(u.sample(rng))).collect();
    s[0] = 1.0;
    if n > 1 {
        s[1] = kappa;
    }
    q1 * Matrix::from_diagonal(&nalgebra::DVector::from_vec(s)) * q2
}

/// `(a1, a2, a3)` of a polynomial with roots of modulus below `max_radius`:
/// one real root and a complex pair, or three real roots.
pub fn stable_cubic<R: Rng>(max_radius: f64, rng: &mut R) -> [f64; 3] {
    let mag = Uniform::new(0.05, max_radius).unwrap();
    let sign = Uniform::new(-1.0f64, 1.0).unwrap();
    let real: f64 = mag.sample(rng) * sign.sample(rng).signum();
    if rng.random_bool(0.5) {
        let r = mag.sample(rng);
        let theta = Uniform::new(0.1, 3.0).unwrap().sample(rng);
        // (λ − real)(λ² − 2 r cosθ λ + r²)
        let p = -2.0 * r * f64::cos(theta);
        let q = r * r;
        [p - real, q - real * p, -real * q]
    } else {
        let roots: Vec<f64> = (0..3).map(|_| mag.sample(rng) * sign.sample(rng).signum()).collect();
        let c = fedsysid::ssm::coeffs_from_roots(&roots);
        [c[0], c[1], c[2]]
    }
}

/// Companion pair sharing one transfer function: controllable canonical
/// `(A_c, e_n, c, 0)` and its observable dual `(A_cᵀ, cᵀ, e_nᵀ, 0)`.
pub fn canonical_pair(coeffs: &[f64], c: &[f64]) -> (StateSpaceModel, StateSpaceModel) {
    let n = coeffs.len();
    let a = ccf_state_matrix(coeffs);
    let mut e = Matrix::zeros(n, 1);
    e[(n - 1, 0)] = 1.0;
    let c_row = Matrix::from_row_slice(1, n, c);
    let ccf = StateSpaceModel::new(a.clone(), e.clone(), c_row.clone(), Matrix::zeros(1, 1)).unwrap();
    let ocf = StateSpaceModel::new(a.transpose(), c_row.transpose(), e.transpose(), Matrix::zeros(1, 1)).unwrap();
    (ccf, ocf)
}

/// Eigenvalues from the characteristic polynomial by Durand–Kerner
/// iteration, independent of any matrix factorization.
pub fn durand_kerner(coeffs: &[f64]) -> Vec<nalgebra::Complex<f64>> {
    use nalgebra::Complex;
    let n = coeffs.len();
    let eval = |z: Complex<f64>| {
        let mut acc = Complex::new(1.0, 0.0);
        for &a in coeffs {
            acc = acc * z + a;
        }
        acc
    };
    let bound = 1.0 + coeffs.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    let seed = Complex::new(0.4, 0.9);
    let mut z: Vec<Complex<f64>> = (0..n).map(|k| seed.powu(k as u32) * bound * 0.5).collect();
    for _ in 0..2000 {
        let mut delta: f64 = 0.0;
        for i in 0..n {
            let mut den = Complex::new(1.0, 0.0);
            for j in 0..n {
                if i != j {
                    den *= z[i] - z[j];
                }
            }
            let step = eval(z[i]) / den;
            z[i] -= step;
            delta = delta.max(step.norm());
        }
        if delta < 1e-15 {
            break;
        }
    }
    z
}

/// Sorts complex values by real part then imaginary part.
pub fn sorted(mut v: Vec<nalgebra::Complex<f64>>) -> Vec<nalgebra::Complex<f64>> {
    v.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    v
}

/// Largest distance from each of `a` to its nearest element of `b`, and vice
/// versa.
pub fn spectrum_distance(a: &[nalgebra::Complex<f64>], b: &[nalgebra::Complex<f64>]) -> f64 {
    let one_way = |x: &[nalgebra::Complex<f64>], y: &[nalgebra::Complex<f64>]| {
        x.iter()
            .map(|p| y.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    one_way(a, b).max(one_way(b, a))
}

pub fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    (a - b).abs().max()
}
