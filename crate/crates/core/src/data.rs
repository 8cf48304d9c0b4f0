//! Synthetic worker datasets, CSV ingestion and preprocessing.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};
use crate::ssm::{ccf_state_matrix, coeffs_from_roots, Matrix, StateSpaceModel, Vector};
use crate::sysid::TimeSeriesDataset;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSystemSpec {
    pub truth: StateSpaceModel,
    /// Samples per worker.
    pub len: usize,
    pub x1_std: f64,
    pub u_std: f64,
    /// Process noise added inside the state recursion.
    pub w_std: f64,
    /// Measurement noise added to the outputs.
    pub v_std: f64,
}

impl SyntheticSystemSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("x1_std", self.x1_std),
            ("u_std", self.u_std),
            ("w_std", self.w_std),
            ("v_std", self.v_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be a nonnegative number"));
            }
        }
        if self.len == 0 {
            return Err(Error::config("len", "must be positive"));
        }
        let radius = self.truth.spectral_radius()?;
        if radius >= 1.0 {
            return Err(Error::UnstableTruth { radius });
        }
        Ok(())
    }
}

fn gaussian(std: f64) -> Normal<f64> {
    Normal::new(0.0, std).expect("std validated nonnegative")
}

/// Draws one worker's dataset:
/// `x_{k+1} = A x_k + B u_k + w_k`, `y_k = C x_k + D u_k + v_k`.
pub fn generate_worker_dataset<R: Rng + ?Sized>(spec: &SyntheticSystemSpec, rng: &mut R) -> Result<TimeSeriesDataset> {
    spec.validate()?;
    let (nx, nu, ny) = spec.truth.dims();
    let (a, b, c, d) = (spec.truth.a(), spec.truth.b(), spec.truth.c(), spec.truth.d());
    let x1 = gaussian(spec.x1_std);
    let u_dist = gaussian(spec.u_std);
    let w_dist = gaussian(spec.w_std);
    let v_dist = gaussian(spec.v_std);

    let mut x = Vector::from_fn(nx, |_, _| x1.sample(rng));
    let inputs = Matrix::from_fn(nu, spec.len, |_, _| u_dist.sample(rng));
    let mut outputs = Matrix::zeros(ny, spec.len);
    for k in 0..spec.len {
        let u = inputs.column(k);
        let mut y = c * &x + d * u;
        if spec.v_std > 0.0 {
            y.iter_mut().for_each(|v| *v += v_dist.sample(rng));
        }
        outputs.set_column(k, &y);
        x = a * &x + b * u;
        if spec.w_std > 0.0 {
            x.iter_mut().for_each(|v| *v += w_dist.sample(rng));
        }
    }
    TimeSeriesDataset::new(inputs, outputs)
}

fn parse_row(record: &csv::StringRecord) -> std::result::Result<Vec<f64>, String> {
    record
        .iter()
        .map(|f| {
            f.trim()
                .parse::<f64>()
                .map_err(|_| format!("`{f}` is not a number"))
        })
        .collect()
}

/// Reads `inputs then outputs` columns; a non-numeric first line is taken as
/// a header.
pub fn read_csv<R: Read>(reader: R, nu: usize, ny: usize) -> Result<TimeSeriesDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, record) in rdr.records().enumerate() {
        let line = idx + 1;
        let record = record?;
        if record.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        match parse_row(&record) {
            Ok(values) => {
                if values.len() != nu + ny {
                    return Err(Error::Schema(format!(
                        "line {line}: expected {} columns, found {}",
                        nu + ny,
                        values.len()
                    )));
                }
                rows.push(values);
            }
            Err(_) if idx == 0 => continue,
            Err(message) => return Err(Error::Parse { line, message }),
        }
    }
    if rows.is_empty() {
        return Err(Error::Schema("no data rows".into()));
    }
    let k = rows.len();
    let inputs = Matrix::from_fn(nu, k, |i, t| rows[t][i]);
    let outputs = Matrix::from_fn(ny, k, |i, t| rows[t][nu + i]);
    TimeSeriesDataset::new(inputs, outputs)
}

pub fn load_csv(path: &Path, nu: usize, ny: usize) -> Result<TimeSeriesDataset> {
    let file = std::fs::File::open(path)?;
    read_csv(std::io::BufReader::new(file), nu, ny)
}

/// Writes a header `u1,…,y1,…` followed by one row per sample.
pub fn write_csv<W: Write>(data: &TimeSeriesDataset, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let header: Vec<String> = (1..=data.nu())
        .map(|i| format!("u{i}"))
        .chain((1..=data.ny()).map(|i| format!("y{i}")))
        .collect();
    wtr.write_record(&header)?;
    for k in 0..data.len() {
        let row: Vec<String> = data
            .inputs()
            .column(k)
            .iter()
            .chain(data.outputs().column(k).iter())
            .map(|v| format!("{v:?}"))
            .collect();
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn save_csv(data: &TimeSeriesDataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv(data, std::io::BufWriter::new(file))
}

fn channel_means(m: &Matrix) -> Vec<f64> {
    m.row_iter().map(|r| r.mean()).collect()
}

/// Removes each channel's mean.
pub fn detrend(data: &TimeSeriesDataset) -> TimeSeriesDataset {
    let center = |m: &Matrix| {
        let means = channel_means(m);
        Matrix::from_fn(m.nrows(), m.ncols(), |i, k| m[(i, k)] - means[i])
    };
    TimeSeriesDataset::new(center(data.inputs()), center(data.outputs()))
        .expect("centering keeps shapes and finiteness")
}

/// Per-channel statistics, inputs first then outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationStats {
    /// Maps normalized data back to the original scale.
    pub fn invert(&self, data: &TimeSeriesDataset) -> Result<TimeSeriesDataset> {
        let nu = data.nu();
        if self.mean.len() != nu + data.ny() || self.std.len() != self.mean.len() {
            return Err(Error::Dimension("statistics do not match dataset channels".into()));
        }
        let map = |m: &Matrix, off: usize| {
            Matrix::from_fn(m.nrows(), m.ncols(), |i, k| {
                m[(i, k)] * self.std[off + i] + self.mean[off + i]
            })
        };
        TimeSeriesDataset::new(map(data.inputs(), 0), map(data.outputs(), nu))
    }
}

/// Scales every channel to zero mean and unit (population) variance.
pub fn normalize(data: &TimeSeriesDataset) -> Result<(TimeSeriesDataset, NormalizationStats)> {
    let mut mean = Vec::new();
    let mut std = Vec::new();
    for m in [data.inputs(), data.outputs()] {
        for row in m.row_iter() {
            let mu = row.mean();
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / row.len() as f64;
            mean.push(mu);
            std.push(var.sqrt());
        }
    }
    if let Some(channel) = std.iter().position(|s| !(*s > 0.0)) {
        return Err(Error::DegenerateChannel { channel });
    }
    let nu = data.nu();
    let map = |m: &Matrix, off: usize| {
        Matrix::from_fn(m.nrows(), m.ncols(), |i, k| (m[(i, k)] - mean[off + i]) / std[off + i])
    };
    let out = TimeSeriesDataset::new(map(data.inputs(), 0), map(data.outputs(), nu))?;
    Ok((out, NormalizationStats { mean, std }))
}

/// Adds independent Gaussian noise to each output channel.
pub fn add_output_noise<R: Rng + ?Sized>(
    data: &TimeSeriesDataset,
    v_std: &[f64],
    rng: &mut R,
) -> Result<TimeSeriesDataset> {
    if v_std.len() != data.ny() {
        return Err(Error::Dimension(format!(
            "{} noise levels for {} outputs",
            v_std.len(),
            data.ny()
        )));
    }
    if v_std.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
        return Err(Error::config("train_noise_std", "must be nonnegative"));
    }
    let dists: Vec<Normal<f64>> = v_std.iter().map(|s| gaussian(*s)).collect();
    let mut outputs = data.outputs().clone();
    for k in 0..outputs.ncols() {
        for (p, dist) in dists.iter().enumerate() {
            if v_std[p] > 0.0 {
                outputs[(p, k)] += dist.sample(rng);
            }
        }
    }
    TimeSeriesDataset::new(data.inputs().clone(), outputs)
}

/// Half-open sample ranges for training and (optionally) testing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<[usize; 2]>,
}

pub fn split(data: &TimeSeriesDataset, spec: &SplitSpec) -> Result<(TimeSeriesDataset, Option<TimeSeriesDataset>)> {
    let train = data.slice(spec.train[0], spec.train[1])?;
    let test = spec.test.map(|[s, e]| data.slice(s, e)).transpose()?;
    Ok((train, test))
}

/// Seed from which the built-in single-input truth system is drawn.
pub const SISO_TRUTH_SEED: u64 = 0x51_5051;

/// Minimum distance between any two of the truth poles and zero.
pub const SISO_TRUTH_SEPARATION: f64 = 0.15;

/// Third-order single-input single-output truth system: three real poles
/// drawn uniformly from (0.3, 0.9) and one zero drawn from (−0.9, 0.9),
/// with unit DC gain. Draws are repeated until every pole and the zero lie
/// at least `SISO_TRUTH_SEPARATION` apart. The realization is a fixed
/// well-conditioned change of basis away from companion form.

pub fn siso_truth() -> StateSpaceModel {
    let mut rng = stream(SISO_TRUTH_SEED, Purpose::Truth, 0, 0);
    let pole = Uniform::new(0.3, 0.9).expect("valid range");
    let zero = Uniform::new(-0.9, 0.9).expect("valid range");
    let (poles, z0) = loop {
        let poles: Vec<f64> = (0..3).map(|_| pole.sample(&mut rng)).collect();
        let z0 = zero.sample(&mut rng);
        let roots = [poles[0], poles[1], poles[2], z0];
        let separated = (0..4).all(|i| (i + 1..4).all(|j| (roots[i] - roots[j]).abs() >= SISO_TRUTH_SEPARATION));
        if separated {
            break (poles, z0);
        }
    };
    let den = coeffs_from_roots(&poles);
    // G(z) = g (z − z0) / den(z), realized with C = g·[−z0, 1, 0]
    let dc_den = 1.0 + den.iter().sum::<f64>();
    let g = dc_den / (1.0 - z0);
    let a = ccf_state_matrix(&den);
    let b = Matrix::from_row_slice(3, 1, &[0.0, 0.0, 1.0]);
    let c = Matrix::from_row_slice(1, 3, &[-g * z0, g, 0.0]);
    let basis = Matrix::from_row_slice(3, 3, &[1.0, 0.4, -0.2, 0.3, 1.0, 0.5, -0.1, 0.2, 1.0]);
    let inv = basis.clone().try_inverse().expect("basis is invertible");
    StateSpaceModel::new(&inv * a * &basis, &inv * b, c * &basis, Matrix::zeros(1, 1))
        .expect("truth system is well formed")
}

fn rotation_block(radius: f64, angle: f64) -> [f64; 4] {
    let (s, c) = angle.sin_cos();
    [radius * c, -radius * s, radius * s, radius * c]
}

fn block_diag_4(first: [f64; 4], second: [f64; 4]) -> Matrix {
    let mut a = Matrix::zeros(4, 4);
    for i in 0..2 {
        for j in 0..2 {
            a[(i, j)] = first[i * 2 + j];
            a[(i + 2, j + 2)] = second[i * 2 + j];
        }
    }
    a
}

/// Fourth-order two-input two-output system whose inputs both excite every
/// mode.
pub fn mimo1_truth() -> StateSpaceModel {
    let a = block_diag_4(rotation_block(0.85, 0.35), rotation_block(0.7, 1.1));
    let b = Matrix::from_row_slice(4, 2, &[1.0, 0.3, 0.2, 0.8, 0.6, 1.0, -0.5, 0.4]);
    let c = Matrix::from_row_slice(2, 4, &[1.0, 0.0, 0.5, -0.3, 0.2, 0.7, 1.0, 0.0]);
    StateSpaceModel::new(a, b, c, Matrix::zeros(2, 2)).expect("truth system is well formed")
}

/// Fourth-order two-input two-output system whose second input drives only
/// the second oscillatory mode, so its Krylov sequence cannot span the state
/// space on its own.
pub fn mimo2_truth() -> StateSpaceModel {
    let a = block_diag_4(rotation_block(0.9, 0.25), rotation_block(0.75, 0.9));
    let b = Matrix::from_row_slice(4, 2, &[1.0, 0.0, 0.3, 0.0, 0.5, 1.0, -0.4, 0.6]);
    let c = Matrix::from_row_slice(2, 4, &[1.0, 0.2, 0.6, 0.0, 0.0, 0.8, 0.3, 1.0]);
    StateSpaceModel::new(a, b, c, Matrix::zeros(2, 2)).expect("truth system is well formed")
}
