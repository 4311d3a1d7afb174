//! Synthetic distributions and dataset IO.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// A `k x d` matrix of finite sample points, one point per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    points: Array2<f64>,
}

impl Batch {
    pub fn new(points: Array2<f64>) -> Result<Self> {
        if points.nrows() == 0 {
            return Err(Error::EmptyBatch("batch has no rows"));
        }
        if points.ncols() == 0 {
            return Err(Error::Shape("batch has zero columns".into()));
        }
        if let Some(pos) = points.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "batch entry at row {} is not finite",
                pos / points.ncols()
            )));
        }
        Ok(Batch { points })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let points = Array2::from_shape_vec((rows.len(), d), flat)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Batch::new(points)
    }

    pub fn k(&self) -> usize {
        self.points.nrows()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.points.row(i)
    }

    pub fn into_points(self) -> Array2<f64> {
        self.points
    }

    /// Rows `start..start + len` as a new batch.
    pub fn slice_rows(&self, start: usize, len: usize) -> Batch {
        Batch {
            points: self
                .points
                .slice(ndarray::s![start..start + len, ..])
                .to_owned(),
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        self.points
            .mean_axis(Axis(0))
            .expect("batch is nonempty")
            .to_vec()
    }
}

/// Side length of one checkerboard cell; the board covers `[-2, 2]^2`.
const CELL: f64 = 1.0;
const BOARD_MIN: f64 = -2.0;
const CELLS_PER_SIDE: usize = 4;

/// Occupied cells of the 4x4 board, as `(column, row)` with `(column + row)` even.
pub fn checkerboard_cells() -> Vec<(usize, usize)> {
    let mut cells = Vec::with_capacity(8);
    for row in 0..CELLS_PER_SIDE {
        for col in 0..CELLS_PER_SIDE {
            if (col + row) % 2 == 0 {
                cells.push((col, row));
            }
        }
    }
    cells
}

/// Cell `(column, row)` containing `p`, or `None` outside `[-2, 2]^2`.
pub fn checkerboard_cell_of(p: &[f64]) -> Option<(usize, usize)> {
    if p.len() != 2 {
        return None;
    }
    let locate = |v: f64| -> Option<usize> {
        let rel = (v - BOARD_MIN) / CELL;
        if !(0.0..=CELLS_PER_SIDE as f64).contains(&rel) {
            return None;
        }
        Some((rel.floor() as usize).min(CELLS_PER_SIDE - 1))
    };
    Some((locate(p[0])?, locate(p[1])?))
}

pub fn checkerboard_contains(p: &[f64]) -> bool {
    checkerboard_cell_of(p).is_some_and(|(c, r)| (c + r) % 2 == 0)
}

pub fn sample_checkerboard(rng: &mut Rng, n: usize) -> Result<Batch> {
    if n == 0 {
        return Err(Error::EmptyBatch("checkerboard sample of size 0"));
    }
    let cells = checkerboard_cells();
    let mut points = Array2::zeros((n, 2));
    for mut row in points.rows_mut() {
        let (col, r) = cells[rng.index(cells.len())];
        row[0] = BOARD_MIN + CELL * (col as f64 + rng.uniform());
        row[1] = BOARD_MIN + CELL * (r as f64 + rng.uniform());
    }
    Batch::new(points)
}

/// Isotropic Gaussian mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gmm {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    stds: Vec<f64>,
}

impl Gmm {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, stds: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != stds.len() {
            return Err(Error::Shape(
                "gmm weights, means and stds must be nonempty with equal length".into(),
            ));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim) {
            return Err(Error::Shape("gmm means must share a positive dimension".into()));
        }
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument("gmm weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "gmm weights sum to {total}, expected 1"
            )));
        }
        if means.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gmm mean".into()));
        }
        if stds.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument("gmm std must be positive".into()));
        }
        Ok(Gmm {
            weights,
            means,
            stds,
        })
    }

    /// `N(mean, std^2 I)`.
    pub fn gaussian(mean: Vec<f64>, std: f64) -> Result<Self> {
        Gmm::new(vec![1.0], vec![mean], vec![std])
    }

    pub fn standard_normal(dim: usize) -> Self {
        Gmm::gaussian(vec![0.0; dim], 1.0).expect("valid standard normal")
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn stds(&self) -> &[f64] {
        &self.stds
    }

    /// Samples and the component index each one came from.
    pub fn sample_with_labels(&self, rng: &mut Rng, n: usize) -> Result<(Batch, Vec<usize>)> {
        if n == 0 {
            return Err(Error::EmptyBatch("gmm sample of size 0"));
        }
        let d = self.dim();
        let mut points = Array2::zeros((n, d));
        let mut labels = Vec::with_capacity(n);
        for mut row in points.rows_mut() {
            let c = rng.categorical(&self.weights);
            let (mean, std) = (&self.means[c], self.stds[c]);
            for (v, m) in row.iter_mut().zip(mean) {
                *v = m + std * rng.normal();
            }
            labels.push(c);
        }
        Ok((Batch::new(points)?, labels))
    }

    pub fn sample(&self, rng: &mut Rng, n: usize) -> Result<Batch> {
        self.sample_with_labels(rng, n).map(|(b, _)| b)
    }

    /// `log sum_c w_c N(x; mu_c, std_c^2 I)`, evaluated with log-sum-exp.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        let d = self.dim();
        if x.len() != d {
            return Err(Error::Shape(format!(
                "point has dimension {}, gmm has {d}",
                x.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("log_density input".into()));
        }
        Ok(self.log_density_unchecked(x))
    }

    pub(crate) fn log_density_unchecked(&self, x: &[f64]) -> f64 {
        let d = self.dim() as f64;
        let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.means)
            .zip(&self.stds)
            .map(|((w, mean), &std)| {
                let sq: f64 = x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
                w.ln() - d * (half_log_2pi + std.ln()) - 0.5 * sq / (std * std)
            })
            .collect();
        log_sum_exp(&terms)
    }

    pub fn log_density_batch(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.dim() {
            return Err(Error::Shape(format!(
                "batch has dimension {}, gmm has {}",
                x.ncols(),
                self.dim()
            )));
        }
        x.rows()
            .into_iter()
            .map(|r| self.log_density(r.as_slice().expect("standard layout row")))
            .collect()
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Equal-weight mixture with means uniform in `[-spread, spread]^d` and a shared std.
pub fn make_random_gmm(
    dim: usize,
    centers: usize,
    spread: f64,
    std: f64,
    rng: &mut Rng,
) -> Result<Gmm> {
    if centers == 0 {
        return Err(Error::InvalidArgument("gmm needs at least one center".into()));
    }
    if dim == 0 {
        return Err(Error::InvalidArgument("gmm dimension must be positive".into()));
    }
    let means = (0..centers)
        .map(|_| (0..dim).map(|_| rng.uniform_range(-spread, spread)).collect())
        .collect();
    Gmm::new(vec![1.0 / centers as f64; centers], means, vec![std; centers])
}

/// A distribution that can be sampled in batches.
#[derive(Clone, Debug)]
pub enum Source {
    Checkerboard,
    Gmm(Gmm),
    /// Draws rows uniformly with replacement.
    Empirical(Batch),
}

impl Source {
    pub fn dim(&self) -> usize {
        match self {
            Source::Checkerboard => 2,
            Source::Gmm(g) => g.dim(),
            Source::Empirical(b) => b.dim(),
        }
    }

    pub fn sample(&self, rng: &mut Rng, n: usize) -> Result<Batch> {
        match self {
            Source::Checkerboard => sample_checkerboard(rng, n),
            Source::Gmm(g) => g.sample(rng, n),
            Source::Empirical(b) => {
                if n == 0 {
                    return Err(Error::EmptyBatch("empirical sample of size 0"));
                }
                let mut points = Array2::zeros((n, b.dim()));
                for mut row in points.rows_mut() {
                    row.assign(&b.row(rng.index(b.k())));
                }
                Batch::new(points)
            }
        }
    }

    /// Analytic log-density, when the source has one.
    pub fn gmm(&self) -> Option<&Gmm> {
        match self {
            Source::Gmm(g) => Some(g),
            _ => None,
        }
    }
}

/// Formats an `f64` with the shortest text that parses back to the same bits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn batch_to_csv(batch: &Batch, header: Option<&str>) -> String {
    let mut out = String::new();
    if let Some(h) = header {
        for line in h.lines() {
            let _ = writeln!(out, "# {line}");
        }
    }
    for row in batch.points.rows() {
        let cells: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn save_batch(path: impl AsRef<Path>, batch: &Batch, header: Option<&str>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, batch_to_csv(batch, header)).map_err(|e| Error::io(path, e))
}

/// Parses CSV text; `origin` is only used in error messages.
pub fn parse_batch(text: &str, origin: &Path) -> Result<Batch> {
    let mut flat = Vec::new();
    let mut dim = None;
    let mut rows = 0;
    for (lineno, line) in text.lines().enumerate() {
        let row = lineno + 1;
        let line = line.trim_end_matches('\r');
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        let expected = *dim.get_or_insert(cells.len());
        if cells.len() != expected {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                row,
                msg: format!("expected {expected} columns, found {}", cells.len()),
            });
        }
        for cell in cells {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                path: origin.to_path_buf(),
                row,
                msg: format!("non-numeric cell {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: origin.to_path_buf(),
                    row,
                    msg: format!("non-finite cell {cell:?}"),
                });
            }
            flat.push(v);
        }
        rows += 1;
    }
    let Some(dim) = dim else {
        return Err(Error::EmptyBatch("csv file has no data rows"));
    };
    let points =
        Array2::from_shape_vec((rows, dim), flat).map_err(|e| Error::Shape(e.to_string()))?;
    Batch::new(points)
}

pub fn load_batch(path: impl AsRef<Path>) -> Result<Batch> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_batch(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn checkerboard_support_and_cell_balance() {
        let n = 10_000;
        let batch = sample_checkerboard(&mut Rng::new(0), n).unwrap();
        let cells = checkerboard_cells();
        let mut counts = vec![0usize; cells.len()];
        for row in batch.points().rows() {
            let p = row.to_vec();
            assert!(checkerboard_contains(&p), "{p:?} outside occupied cells");
            let cell = checkerboard_cell_of(&p).unwrap();
            counts[cells.iter().position(|&c| c == cell).unwrap()] += 1;
        }
        // Binomial(n, 1/8) marginal per cell.
        let mean = n as f64 / 8.0;
        let sigma = (n as f64 * (1.0 / 8.0) * (7.0 / 8.0)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() < 4.0 * sigma, "cell count {c}");
        }
    }

    #[test]
    fn checkerboard_mean_is_centered() {
        let n = 10_000;
        let batch = sample_checkerboard(&mut Rng::new(1), n).unwrap();
        // Each coordinate is uniform on [-2, 2] marginally: variance 4/3.
        let sigma = (4.0 / 3.0 / n as f64).sqrt();
        for m in batch.mean() {
            assert!(m.abs() < 4.0 * sigma, "mean {m}");
        }
    }

    #[test]
    fn checkerboard_rejects_zero() {
        assert!(matches!(
            sample_checkerboard(&mut Rng::new(0), 0),
            Err(Error::EmptyBatch(_))
        ));
    }

    #[test]
    fn cell_layout() {
        assert!(checkerboard_contains(&[-1.5, -1.5]));
        assert!(!checkerboard_contains(&[-0.5, -1.5]));
        assert!(checkerboard_contains(&[0.5, 0.5]));
        assert!(!checkerboard_contains(&[2.5, 0.5]));
        assert_eq!(checkerboard_cells().len(), 8);
    }

    #[test]
    fn standard_normal_moments() {
        let n = 100_000;
        let g = Gmm::standard_normal(2);
        let batch = g.sample(&mut Rng::new(2), n).unwrap();
        for m in batch.mean() {
            assert!(m.abs() < 4.0 / (n as f64).sqrt());
        }
    }

    #[test]
    fn two_component_counts() {
        let n = 10_000;
        let g = Gmm::new(
            vec![0.5, 0.5],
            vec![vec![5.0, 0.0], vec![-5.0, 0.0]],
            vec![0.1, 0.1],
        )
        .unwrap();
        let (_, labels) = g.sample_with_labels(&mut Rng::new(3), n).unwrap();
        let ones = labels.iter().filter(|&&l| l == 1).count() as f64;
        let sigma = (n as f64 * 0.25).sqrt();
        assert!((ones - n as f64 / 2.0).abs() < 4.0 * sigma);
    }

    #[test]
    fn gmm_sampling_replays() {
        let g = Gmm::gaussian(vec![1.0, -1.0], 0.5).unwrap();
        let a = g.sample(&mut Rng::new(9), 3).unwrap();
        let b = g.sample(&mut Rng::new(9), 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn log_density_at_mode() {
        let g = Gmm::standard_normal(1);
        let lp = g.log_density(&[0.0]).unwrap();
        assert!((lp + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn log_density_two_terms_direct_sum() {
        let g = Gmm::new(
            vec![0.3, 0.7],
            vec![vec![-1.0, 0.5], vec![2.0, 1.0]],
            vec![0.8, 1.3],
        )
        .unwrap();
        let x = [0.4, -0.2];
        let normal = |m: &[f64], s: f64| {
            let sq: f64 = x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
            (2.0 * std::f64::consts::PI * s * s).powi(-1) * (-0.5 * sq / (s * s)).exp()
        };
        let direct = 0.3 * normal(&[-1.0, 0.5], 0.8) + 0.7 * normal(&[2.0, 1.0], 1.3);
        assert!((g.log_density(&x).unwrap() - direct.ln()).abs() < 1e-12);

        // Symmetric equal components at the midpoint: log(2 w N).
        let sym = Gmm::new(
            vec![0.5, 0.5],
            vec![vec![1.0, 0.0], vec![-1.0, 0.0]],
            vec![1.0, 1.0],
        )
        .unwrap();
        let one = (2.0 * std::f64::consts::PI).recip() * (-0.5f64).exp();
        assert!((sym.log_density(&[0.0, 0.0]).unwrap() - (2.0 * 0.5 * one).ln()).abs() < 1e-12);
    }

    #[test]
    fn log_density_far_tail_is_finite() {
        let g = Gmm::new(
            vec![0.5, 0.5],
            vec![vec![0.0, 0.0], vec![1.0, 0.0]],
            vec![0.1, 0.1],
        )
        .unwrap();
        // 40 std from the nearer component
        let lp = g.log_density(&[5.0, 0.0]).unwrap();
        assert!(lp.is_finite());
        assert!(lp < -700.0);
    }

    #[test]
    fn density_integrates_to_one_on_grid() {
        let g = make_random_gmm(2, 3, 1.0, 0.5, &mut Rng::new(4)).unwrap();
        // 400x400 midpoint quadrature over a box covering every component by 6 std.
        let (lo, hi) = (-4.0, 4.0);
        let m = 400;
        let h = (hi - lo) / m as f64;
        let mut total = 0.0;
        for i in 0..m {
            for j in 0..m {
                let x = [lo + (i as f64 + 0.5) * h, lo + (j as f64 + 0.5) * h];
                total += g.log_density(&x).unwrap().exp() * h * h;
            }
        }
        assert!((total - 1.0).abs() < 0.02, "integral {total}");
    }

    #[test]
    fn random_gmm_shapes() {
        let mut rng = Rng::new(0);
        let one = make_random_gmm(3, 1, 1.0, 1.0, &mut rng).unwrap();
        assert_eq!(one.weights(), &[1.0]);
        let eight = make_random_gmm(2, 8, 4.0, 0.3, &mut rng).unwrap();
        assert_eq!(eight.n_components(), 8);
        assert!(eight.means().iter().flatten().all(|v| v.abs() <= 4.0));
        let big = make_random_gmm(64, 100, 1.0, 0.1, &mut rng).unwrap();
        assert_eq!(big.n_components(), 100);
        assert_eq!(big.dim(), 64);
        assert!(make_random_gmm(2, 0, 1.0, 1.0, &mut rng).is_err());
    }

    #[test]
    fn gmm_rejects_bad_parameters() {
        assert!(Gmm::new(vec![0.5, 0.6], vec![vec![0.0], vec![1.0]], vec![1.0, 1.0]).is_err());
        assert!(Gmm::new(vec![1.0], vec![vec![0.0]], vec![0.0]).is_err());
        assert!(Gmm::new(vec![1.0], vec![vec![f64::NAN]], vec![1.0]).is_err());
    }

    #[test]
    fn csv_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.csv");
        let batch = Batch::new(array![
            [0.1, -1e-300],
            [std::f64::consts::PI, 1.0 / 3.0],
            [1e300, -0.0]
        ])
        .unwrap();
        save_batch(&path, &batch, Some("k=3 d=2")).unwrap();
        let back = load_batch(&path).unwrap();
        for (a, b) in batch.points().iter().zip(back.points().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn csv_errors_name_the_row() {
        let p = Path::new("mem.csv");
        let err = parse_batch("# header\n1,2\n3,4,5\n", p).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 3, .. }), "{err}");
        let err = parse_batch("1,2\n3,x\n", p).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 2, .. }), "{err}");
        assert!(matches!(parse_batch("", p), Err(Error::EmptyBatch(_))));
        assert!(matches!(parse_batch("# only\n", p), Err(Error::EmptyBatch(_))));
    }

    #[test]
    fn empirical_source_draws_existing_rows() {
        let b = Batch::new(array![[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let s = Source::Empirical(b.clone());
        let draws = s.sample(&mut Rng::new(0), 50).unwrap();
        for row in draws.points().rows() {
            assert!(row == b.row(0) || row == b.row(1));
        }
    }
}
