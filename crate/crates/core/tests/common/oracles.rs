//! Library results checked against independent reference computations.
//! Each check panics on mismatch.

use super::*;
use fedsysid::alignment::{align_to_reference, ccf_structure_error, to_ccf_mimo, to_ccf_siso, MuSpec};
use fedsysid::metrics::{bfr, ranksum_test};
use fedsysid::ssm::{ccf_state_matrix, make_transform, Matrix, Vector, DEFAULT_KAPPA_LIMIT};
use fedsysid::sysid::residual_jacobian;
use fedsysid::{StateSpaceModel, TimeSeriesDataset};

/// Plain nested loops over row-major buffers.
fn scalar_simulation(m: &StateSpaceModel, u: &Matrix, x1: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let (nx, nu, ny) = m.dims();
    let get = |mat: &Matrix| -> Vec<f64> { (0..mat.nrows()).flat_map(|i| (0..mat.ncols()).map(move |j| (i, j))).map(|(i, j)| mat[(i, j)]).collect() };
    let (a, b, c, d) = (get(m.a()), get(m.b()), get(m.c()), get(m.d()));
    let mut x = x1.to_vec();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for k in 0..u.ncols() {
        let mut y = vec![0.0; ny];
        for p in 0..ny {
            for i in 0..nx {
                y[p] += c[p * nx + i] * x[i];
            }
            for l in 0..nu {
                y[p] += d[p * nu + l] * u[(l, k)];
            }
        }
        let mut next = vec![0.0; nx];
        for i in 0..nx {
            for j in 0..nx {
                next[i] += a[i * nx + j] * x[j];
            }
            for l in 0..nu {
                next[i] += b[i * nu + l] * u[(l, k)];
            }
        }
        xs.push(x);
        ys.push(y);
        x = next;
    }
    (xs, ys)
}

pub fn simulation_matches_scalar_loop() {
    let mut r = rng(11);
    for (nx, nu, ny) in [(1, 1, 1), (3, 1, 1), (4, 2, 2), (5, 3, 2)] {
        let m = random_model(nx, nu, ny, 0.95, &mut r);
        let u = gaussian_matrix(nu, 80, &mut r);
        let x1: Vec<f64> = gaussian_matrix(nx, 1, &mut r).iter().copied().collect();
        let traj = m.simulate(&u, &Vector::from_vec(x1.clone())).unwrap();
        let (xs, ys) = scalar_simulation(&m, &u, &x1);
        for k in 0..u.ncols() {
            for i in 0..nx {
                assert!((traj.states[(i, k)] - xs[k][i]).abs() <= 1e-12 * (1.0 + xs[k][i].abs()));
            }
            for p in 0..ny {
                assert!((traj.outputs[(p, k)] - ys[k][p]).abs() <= 1e-12 * (1.0 + ys[k][p].abs()));
            }
        }
    }
}

pub fn jacobian_matches_central_differences() {
    let mut r = rng(12);
    for (nu, ny) in [(1, 1), (2, 2)] {
        let model = random_model(2, nu, ny, 0.8, &mut r);
        let truth = random_model(2, nu, ny, 0.7, &mut r);
        let u = gaussian_matrix(nu, 30, &mut r);
        let y = truth.simulate(&u, &Vector::zeros(2)).unwrap().outputs;
        let data = TimeSeriesDataset::new(u, y).unwrap();
        let (_, jac) = residual_jacobian(&model, &data).unwrap();
        let (nx, nu, ny) = model.dims();
        let params = model.to_params();
        let h = 1e-6;
        let residuals = |p: &[f64]| {
            let m = StateSpaceModel::from_params(nx, nu, ny, p).unwrap();
            let yh = m.simulate(data.inputs(), &Vector::zeros(nx)).unwrap().outputs;
            // sample-major stacking, matching the library layout
            (0..data.len()).flat_map(|k| (0..ny).map(move |q| (k, q))).map(|(k, q)| yh[(q, k)] - data.outputs()[(q, k)]).collect::<Vec<f64>>()
        };
        for q in 0..params.len() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus[q] += h;
            minus[q] -= h;
            let (rp, rm) = (residuals(&plus), residuals(&minus));
            let fd: Vec<f64> = rp.iter().zip(&rm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
            let diff: f64 = fd.iter().enumerate().map(|(i, v)| (jac[(i, q)] - v).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(diff <= 1e-4 * norm.max(1e-8), "parameter {q}: {diff} vs {norm}");
        }
    }
}

pub fn canonical_transform_is_identity_for_companion_systems() {
    let mut r = rng(13);
    for nx in 1..=6 {
        for _ in 0..10 {
            let m = random_model(nx, 1, 1, 0.9, &mut r);
            let coeffs = m.char_poly_coeffs();
            let c: Vec<f64> = m.c().iter().copied().collect();
            let (ccf, _) = canonical_pair(&coeffs, &c);
            let t = to_ccf_siso(&ccf, DEFAULT_KAPPA_LIMIT).unwrap();
            let eye = Matrix::identity(nx, nx);
            assert!(max_abs_diff(t.matrix(), &eye) < 1e-8, "nx={nx}: {}", t.matrix());
        }
    }
}

pub fn observable_form_maps_onto_controllable_form() {
    let mut r = rng(14);
    let mut checked = 0;
    for _ in 0..50 {
        let coeffs = stable_cubic(0.95, &mut r);
        let c: Vec<f64> = gaussian_matrix(1, 3, &mut r).iter().copied().collect();
        let (ccf, ocf) = canonical_pair(&coeffs, &c);
        let Ok(t) = to_ccf_siso(&ocf, DEFAULT_KAPPA_LIMIT) else {
            continue;
        };
        if t.kappa() > 1e6 {
            continue;
        }
        let aligned = ocf.apply_similarity(&t).unwrap();
        assert!(max_abs_diff(aligned.a(), ccf.a()) < 1e-9);
        assert!(max_abs_diff(aligned.b(), ccf.b()) < 1e-9);
        assert!(max_abs_diff(aligned.c(), ccf.c()) < 1e-9);
        checked += 1;
    }
    assert!(checked >= 40, "{checked}");
}

pub fn aligned_models_have_companion_structure() {
    let mut r = rng(15);
    let mut checked = 0;
    for nx in [3, 4] {
        for _ in 0..30 {
            let m = random_model(nx, 1, 1, 0.9, &mut r);
            let t = to_ccf_siso(&m, DEFAULT_KAPPA_LIMIT).unwrap();
            if t.kappa() > 1e4 {
                continue;
            }
            let aligned = m.apply_similarity(&t).unwrap();
            assert!(ccf_structure_error(&aligned).unwrap() < 1e-9);
            let coeffs = m.char_poly_coeffs();
            assert!(max_abs_diff(aligned.a(), &ccf_state_matrix(&coeffs)) < 1e-9);
            let again = to_ccf_siso(&aligned, DEFAULT_KAPPA_LIMIT).unwrap();
            assert!(max_abs_diff(again.matrix(), &Matrix::identity(nx, nx)) < 1e-8);
            checked += 1;
        }
    }
    assert!(checked >= 40, "{checked}");
}

pub fn single_input_block_form_equals_siso_construction() {
    let mut r = rng(16);
    let mut checked = 0;
    for _ in 0..20 {
        let m = random_model(4, 2, 2, 0.9, &mut r);
        let t_mimo = to_ccf_mimo(&m, &MuSpec(vec![4, 0]), DEFAULT_KAPPA_LIMIT).unwrap();
        let first = StateSpaceModel::new(m.a().clone(), m.b().columns(0, 1).into_owned(), m.c().clone(), m.d().columns(0, 1).into_owned())
            .unwrap();
        let t_siso = to_ccf_siso(&first, DEFAULT_KAPPA_LIMIT).unwrap();
        if t_siso.kappa() > 1e4 {
            continue;
        }
        let scale = t_siso.matrix().abs().max();
        assert!(max_abs_diff(t_mimo.matrix(), t_siso.matrix()) < 1e-8 * scale.max(1.0));
        checked += 1;
    }
    assert!(checked >= 15, "{checked}");
}

pub fn block_form_has_luenberger_pattern() {
    let mut r = rng(17);
    let mut checked = 0;
    for _ in 0..20 {
        let m = random_model(4, 2, 2, 0.9, &mut r);
        let t = to_ccf_mimo(&m, &MuSpec(vec![2, 2]), DEFAULT_KAPPA_LIMIT).unwrap();
        if t.kappa() > 1e4 {
            continue;
        }
        let al = m.apply_similarity(&t).unwrap();
        let b_expected = Matrix::from_row_slice(4, 2, &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(max_abs_diff(al.b(), &b_expected) < 1e-9);
        for (row, one) in [(0, 1), (2, 3)] {
            for j in 0..4 {
                let target = if j == one { 1.0 } else { 0.0 };
                assert!((al.a()[(row, j)] - target).abs() < 1e-9);
            }
        }
        checked += 1;
    }
    assert!(checked >= 15, "{checked}");
}

pub fn canonical_transforms_compose_for_similar_pairs() {
    let mut r = rng(18);
    let mut checked = 0;
    for mu in [vec![2, 2], vec![3, 1], vec![4, 0]] {
        for _ in 0..10 {
            let a = random_model(4, 2, 2, 0.9, &mut r);
            let t0 = make_transform(random_transform(4, 10.0, &mut r), DEFAULT_KAPPA_LIMIT).unwrap();
            let b = a.apply_similarity(&t0).unwrap();
            let ta = to_ccf_mimo(&a, &MuSpec(mu.clone()), DEFAULT_KAPPA_LIMIT).unwrap();
            let tb = to_ccf_mimo(&b, &MuSpec(mu.clone()), DEFAULT_KAPPA_LIMIT).unwrap();
            if ta.kappa() > 1e4 {
                continue;
            }
            let composed = t0.matrix() * tb.matrix();
            let scale = ta.matrix().abs().max();
            assert!(max_abs_diff(ta.matrix(), &composed) < 1e-8 * scale.max(1.0), "mu {mu:?}");
            checked += 1;
        }
    }
    assert!(checked >= 20, "{checked}");
}

pub fn least_squares_alignment_recovers_planted_transform() {
    let mut r = rng(19);
    for (nx, nu, ny) in [(3, 1, 1), (4, 2, 2)] {
        for _ in 0..10 {
            let reference = random_model(nx, nu, ny, 0.9, &mut r);
            let t0 = make_transform(random_transform(nx, 20.0, &mut r), DEFAULT_KAPPA_LIMIT).unwrap();
            let other = reference.apply_similarity(&t0).unwrap();
            let inputs = gaussian_matrix(nu, 200, &mut r);
            let ts = align_to_reference(&[reference.clone(), other.clone()], 0, &inputs, DEFAULT_KAPPA_LIMIT).unwrap();
            assert!(max_abs_diff(ts[0].matrix(), &Matrix::identity(nx, nx)) == 0.0);
            assert!(max_abs_diff(ts[1].matrix(), t0.inverse()) < 1e-6);
            let back = other.apply_similarity(&ts[1]).unwrap();
            assert!(max_abs_diff(back.a(), reference.a()) < 1e-6);
        }
    }
}

pub fn minimal_pseudo_length_interpolates_exactly() {
    let mut r = rng(20);
    for nx in [2, 3, 5] {
        let a = random_model(nx, 1, 1, 0.9, &mut r);
        let b = random_model(nx, 1, 1, 0.9, &mut r);
        let inputs = gaussian_matrix(1, nx, &mut r);
        let ts = align_to_reference(&[a.clone(), b.clone()], 0, &inputs, DEFAULT_KAPPA_LIMIT).unwrap();
        let xa = fedsysid::alignment::pseudo_states(&a, &inputs).unwrap();
        let xb = fedsysid::alignment::pseudo_states(&b, &inputs).unwrap();
        let fitted = ts[1].matrix() * &xa;
        assert!(max_abs_diff(&fitted, &xb) < 1e-9 * xb.abs().max().max(1.0));
    }
}

pub fn eigenvalues_match_polynomial_roots() {
    let mut r = rng(21);
    for nx in 1..=6 {
        for _ in 0..10 {
            let m = random_model(nx, 1, 1, 0.95, &mut r);
            let lib = m.eigenvalues().unwrap();
            let roots = durand_kerner(&m.char_poly_coeffs());
            assert_eq!(lib.len(), nx);
            assert!(spectrum_distance(&lib, &roots) < 1e-6, "{:?} vs {:?}", sorted(lib), sorted(roots));
        }
    }
}

/// Two-sided p-value by enumerating every assignment of pooled ranks.
fn enumerated_p(a: &[f64], b: &[f64]) -> f64 {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let n = pooled.len();
    let rank = |v: f64| 1 + pooled.iter().filter(|w| **w < v).count();
    let ranks: Vec<usize> = pooled.iter().map(|v| rank(*v)).collect();
    let observed: usize = ranks[..a.len()].iter().sum();
    let (mut total, mut le, mut ge) = (0u64, 0u64, 0u64);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != a.len() {
            continue;
        }
        let s: usize = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| ranks[i]).sum();
        total += 1;
        le += (s <= observed) as u64;
        ge += (s >= observed) as u64;
    }
    (2.0 * le.min(ge) as f64 / total as f64).min(1.0)
}

pub fn exact_rank_sum_matches_enumeration() {
    let mut r = rng(22);
    for (na, nb) in [(1, 1), (2, 3), (3, 3), (4, 5), (6, 6), (5, 7), (2, 10)] {
        for _ in 0..5 {
            let g = gaussian_matrix(1, na + nb, &mut r);
            let shift = 1.5;
            let a: Vec<f64> = g.iter().take(na).copied().collect();
            let b: Vec<f64> = g.iter().skip(na).map(|v| v + shift).collect();
            assert_eq!(ranksum_test(&a, &b).unwrap(), enumerated_p(&a, &b), "{na}+{nb}");
        }
    }
}

pub fn normal_approximation_tracks_exact_path() {
    let mut r = rng(23);
    for _ in 0..20 {
        let g = gaussian_matrix(1, 12, &mut r);
        let a: Vec<f64> = g.iter().take(6).copied().collect();
        let b: Vec<f64> = g.iter().skip(6).map(|v| v + 0.8).collect();
        let exact = ranksum_test(&a, &b).unwrap();
        let oracle = {
            use statrs::distribution::{ContinuousCDF, Normal};
            let pooled: Vec<f64> = a.iter().chain(&b).copied().collect();
            let w: f64 = a.iter().map(|v| 1.0 + pooled.iter().filter(|x| *x < v).count() as f64).sum();
            let u = w - 21.0;
            let z = ((u - 18.0).abs() - 0.5).max(0.0) / (36.0f64 * 13.0 / 12.0).sqrt();
            2.0 * Normal::standard().sf(z)
        };
        assert!((oracle.min(1.0) - exact).abs() < 0.05, "{oracle} vs {exact}");
    }
}

pub fn disjoint_samples_are_highly_significant() {
    let a: Vec<f64> = (0..20).map(|i| 50.0 + i as f64 * 0.1).collect();
    let b: Vec<f64> = (0..20).map(|i| 90.0 + i as f64 * 0.1).collect();
    assert!(ranksum_test(&a, &b).unwrap() < 0.001);
    assert!(ranksum_test(&a, &a).unwrap() >= 0.9);
}

pub fn bfr_hand_values() {
    assert_eq!(bfr(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 100.0);
    assert_eq!(bfr(&[1.0, 3.0], &[2.0, 2.0]).unwrap(), 0.0);
    assert_eq!(bfr(&[1.0, 3.0], &[3.0, 1.0]).unwrap(), -100.0);
    assert_eq!(bfr(&[0.0, 4.0, 2.0, 2.0], &[0.0, 2.0, 2.0, 2.0]).unwrap(), 100.0 * (1.0 - (4.0f64 / 8.0).sqrt()));
    assert!(bfr(&[2.0, 2.0], &[1.0, 2.0]).is_err());
}

/// Every check, by name.
pub const ALL: &[(&str, fn())] = &[
    ("simulation_matches_scalar_loop", simulation_matches_scalar_loop),
    ("jacobian_matches_central_differences", jacobian_matches_central_differences),
    ("canonical_transform_is_identity_for_companion_systems", canonical_transform_is_identity_for_companion_systems),
    ("observable_form_maps_onto_controllable_form", observable_form_maps_onto_controllable_form),
    ("aligned_models_have_companion_structure", aligned_models_have_companion_structure),
    ("single_input_block_form_equals_siso_construction", single_input_block_form_equals_siso_construction),
    ("block_form_has_luenberger_pattern", block_form_has_luenberger_pattern),
    ("canonical_transforms_compose_for_similar_pairs", canonical_transforms_compose_for_similar_pairs),
    ("least_squares_alignment_recovers_planted_transform", least_squares_alignment_recovers_planted_transform),
    ("minimal_pseudo_length_interpolates_exactly", minimal_pseudo_length_interpolates_exactly),
    ("eigenvalues_match_polynomial_roots", eigenvalues_match_polynomial_roots),
    ("exact_rank_sum_matches_enumeration", exact_rank_sum_matches_enumeration),
    ("normal_approximation_tracks_exact_path", normal_approximation_tracks_exact_path),
    ("disjoint_samples_are_highly_significant", disjoint_samples_are_highly_significant),
    ("bfr_hand_values", bfr_hand_values),
];
