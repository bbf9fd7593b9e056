//! Discretised linearised operator `D = d/ds + B(s)` along a trajectory, in
//! a parallel orthonormal frame, with its kernel, cokernel and the obstruction
//! fibre.
//!
//! The unknown is sampled at uniform nodes `s_0 < ... < s_N`. Interval `k`
//! contributes the rows `(y_{k+1} - Phi_k y_k) / H`, where `y = sqrt(H) zeta`
//! and `Phi_k` is the fourth-order two-point Gauss Magnus propagator of
//! `zeta' = -B zeta`. Decay is imposed at the ends by annihilating the
//! growing eigencomponents of `B`. The column count minus the row count is
//! then exactly `ind(source) - ind(target)`, and the matrix transpose is the
//! discrete adjoint `-d/ds + B`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{symmetric_eigen_sorted, ChartPoint, MorseSetup};
use crate::trajectories::{ComponentKind, ModuliSpace, Trajectory};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct OperatorConfig {
    /// Target node spacing.
    pub step: f64,
    /// Upper bound on the number of intervals; the spacing grows beyond it.
    pub max_intervals: usize,
    /// Singular values below this multiple of the largest are candidates for zero.
    pub zero_threshold: f64,
    /// A zero must also be below this multiple of the next singular value.
    pub gap_ratio: f64,
}

impl Default for OperatorConfig {
    fn default() -> Self {
        Self {
            step: 0.1,
            max_intervals: 300,
            zero_threshold: 1e-6,
            gap_ratio: 0.1,
        }
    }
}

impl OperatorConfig {
    pub fn refined(&self) -> Self {
        Self {
            step: 0.5 * self.step,
            max_intervals: 2 * self.max_intervals,
            ..self.clone()
        }
    }
}

const GAUSS_LO: f64 = 0.5 - 0.288_675_134_594_812_9;
const GAUSS_HI: f64 = 0.5 + 0.288_675_134_594_812_9;

/// Magnus propagator over one interval for `zeta' = -B zeta`.
pub fn magnus_step(b1: &DMatrix<f64>, b2: &DMatrix<f64>, h: f64) -> DMatrix<f64> {
    let comm = b2 * b1 - b1 * b2;
    let omega = (b1 + b2) * (-0.5 * h) + comm * (3f64.sqrt() / 12.0 * h * h);
    omega.exp()
}

#[derive(Clone, Debug)]
pub struct LinearOperator {
    pub dim: usize,
    pub nodes: Vec<f64>,
    pub h: f64,
    pub b_nodes: Vec<DMatrix<f64>>,
    pub transfer: Vec<DMatrix<f64>>,
    /// Constraint rows at `s_0` (eigenvectors of `B(s_0)` with positive eigenvalue).
    pub left_rows: DMatrix<f64>,
    /// Constraint rows at `s_N` (eigenvectors of `B(s_N)` with negative eigenvalue).
    pub right_rows: DMatrix<f64>,
    /// Trajectory sample index of each node, when built along a trajectory.
    pub sample_index: Vec<usize>,
}

fn end_rows(b: &DMatrix<f64>, positive: bool) -> DMatrix<f64> {
    let (vals, vecs) = symmetric_eigen_sorted(b);
    let cols: Vec<usize> = (0..vals.len()).filter(|&i| (vals[i] > 0.0) == positive).collect();
    DMatrix::from_fn(cols.len(), b.nrows(), |r, c| vecs[(c, cols[r])])
}

impl LinearOperator {
    /// Operator for a coefficient function `b(s)` on the uniform grid with
    /// `n_intervals` intervals of `[a, b]`.
    pub fn from_fn<F>(a: f64, b_end: f64, n_intervals: usize, b: F) -> Self
    where
        F: Fn(f64) -> DMatrix<f64>,
    {
        let h = (b_end - a) / n_intervals as f64;
        let nodes: Vec<f64> = (0..=n_intervals).map(|k| a + k as f64 * h).collect();
        let b_nodes: Vec<DMatrix<f64>> = nodes.iter().map(|&s| b(s)).collect();
        let transfer = nodes[..n_intervals]
            .iter()
            .map(|&s| magnus_step(&b(s + GAUSS_LO * h), &b(s + GAUSS_HI * h), h))
            .collect();
        Self::assemble(nodes, h, b_nodes, transfer, Vec::new())
    }

    fn assemble(nodes: Vec<f64>, h: f64, b_nodes: Vec<DMatrix<f64>>, transfer: Vec<DMatrix<f64>>, sample_index: Vec<usize>) -> Self {
        let dim = b_nodes[0].nrows();
        let left_rows = end_rows(&b_nodes[0], true);
        let right_rows = end_rows(b_nodes.last().unwrap(), false);
        Self {
            dim,
            nodes,
            h,
            b_nodes,
            transfer,
            left_rows,
            right_rows,
            sample_index,
        }
    }

    pub fn intervals(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn rows(&self) -> usize {
        self.dim * self.intervals() + self.left_rows.nrows() + self.right_rows.nrows()
    }

    pub fn cols(&self) -> usize {
        self.dim * self.nodes.len()
    }

    /// Morse indices implied by the end conditions.
    pub fn end_indices(&self) -> (usize, usize) {
        (self.dim - self.left_rows.nrows(), self.right_rows.nrows())
    }

    /// The scaled matrix acting on `y = sqrt(H) zeta`.
    pub fn matrix(&self) -> DMatrix<f64> {
        let n = self.dim;
        let nint = self.intervals();
        let mut a = DMatrix::zeros(self.rows(), self.cols());
        let inv_h = 1.0 / self.h;
        for k in 0..nint {
            let r = k * n;
            a.view_mut((r, k * n), (n, n)).copy_from(&(&self.transfer[k] * -inv_h));
            for i in 0..n {
                a[(r + i, (k + 1) * n + i)] = inv_h;
            }
        }
        let mut r = nint * n;
        let nl = self.left_rows.nrows();
        a.view_mut((r, 0), (nl, n)).copy_from(&(&self.left_rows * inv_h));
        r += nl;
        let nr = self.right_rows.nrows();
        a.view_mut((r, nint * n), (nr, n)).copy_from(&(&self.right_rows * inv_h));
        a
    }

    /// `D zeta` on each interval (no boundary rows).
    pub fn apply(&self, zeta: &[DVector<f64>]) -> Vec<DVector<f64>> {
        (0..self.intervals()).map(|k| (&zeta[k + 1] - &self.transfer[k] * &zeta[k]) / self.h).collect()
    }

    /// Discrete adjoint `D^* eta` at the nodes for `eta` given per interval.
    pub fn apply_adjoint(&self, eta: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let nint = self.intervals();
        (0..=nint)
            .map(|j| {
                let mut v = DVector::zeros(self.dim);
                if j > 0 {
                    v += &eta[j - 1];
                }
                if j < nint {
                    v -= self.transfer[j].transpose() * &eta[j];
                }
                v / self.h
            })
            .collect()
    }

    /// L2 inner product of node fields (trapezoid rule).
    pub fn node_inner(&self, a: &[DVector<f64>], b: &[DVector<f64>]) -> f64 {
        let m = a.len();
        let mut acc = 0.0;
        for i in 0..m {
            let w = if i == 0 || i + 1 == m { 0.5 } else { 1.0 };
            acc += w * a[i].dot(&b[i]);
        }
        acc * self.h
    }

    /// L2 inner product of interval fields.
    pub fn interval_inner(&self, a: &[DVector<f64>], b: &[DVector<f64>]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x.dot(y)).sum::<f64>() * self.h
    }

    /// Smooth random node field vanishing outside `(a, b)`, a random
    /// combination of low Fourier modes under a bump.
    pub fn random_compact_field<R: rand::Rng>(&self, rng: &mut R, a: f64, b: f64) -> Vec<DVector<f64>> {
        let modes = 4;
        let coef: Vec<f64> = (0..self.dim * modes * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        self.nodes
            .iter()
            .map(|&s| {
                let x = (s - a) / (b - a);
                if x <= 0.0 || x >= 1.0 {
                    return DVector::zeros(self.dim);
                }
                let bump = (4.0 - 1.0 / (x * (1.0 - x))).exp();
                DVector::from_fn(self.dim, |i, _| {
                    (0..modes)
                        .map(|m| {
                            let w = std::f64::consts::PI * (m + 1) as f64 * x;
                            coef[(i * modes + m) * 2] * w.sin() + coef[(i * modes + m) * 2 + 1] * w.cos()
                        })
                        .sum::<f64>()
                        * bump
                })
            })
            .collect()
    }

    /// Largest relative defect of `<D zeta, eta> = <zeta, D^* eta>` over
    /// `pairs` random compactly supported fields.
    pub fn adjoint_pairing_defect<R: rand::Rng>(&self, rng: &mut R, pairs: usize) -> f64 {
        let (a, b) = (self.nodes[1], self.nodes[self.nodes.len() - 2]);
        let mut worst: f64 = 0.0;
        for _ in 0..pairs {
            let zeta = self.random_compact_field(rng, a, b);
            let eta_nodes = self.random_compact_field(rng, a, b);
            let eta = &eta_nodes[..self.intervals()];
            let dz = self.apply(&zeta);
            let dse = self.apply_adjoint(eta);
            let lhs = self.interval_inner(&dz, eta);
            let rhs = self.node_inner(&zeta, &dse);
            let scale = self.interval_inner(&dz, &dz).sqrt() * self.interval_inner(eta, eta).sqrt() + self.node_inner(&zeta, &zeta).sqrt() * self.node_inner(&dse, &dse).sqrt();
            if scale > 0.0 {
                worst = worst.max((lhs - rhs).abs() / scale);
            }
        }
        worst
    }

    /// Rank decision from all singular values of the dense matrix.
    pub fn spectrum_dense(&self, cfg: &OperatorConfig) -> Result<Spectrum> {
        let sv = self.matrix().singular_values();
        Spectrum::classify(sv.as_slice(), self.rows(), self.cols(), cfg)
    }

    /// Rank decision from the smallest singular values and the largest one,
    /// computed on the block-tridiagonal normal matrix `A^T A`. Only those
    /// values are listed in the result.
    pub fn spectrum(&self, cfg: &OperatorConfig) -> Result<Spectrum> {
        let normal = NormalMatrix::new(self);
        let sigma_max = normal.largest_eigenvalue().sqrt();
        let thr = cfg.zero_threshold * sigma_max;
        let c = self.cols();
        let m = self.rows();
        let mut block = self.dim + 4;
        loop {
            let block_eff = block.min(c);
            let lams = normal.smallest_eigenvalues(block_eff, sigma_max * sigma_max);
            let sv: Vec<f64> = lams.iter().map(|l| l.max(0.0).sqrt()).collect();
            let zeros = sv.iter().filter(|&&x| x < thr).count();
            if zeros + 2 <= block_eff || block_eff == c {
                // Singular values of `A` proper: drop the structural zeros of
                // `A^T A` that come from having more columns than rows.
                let extra = c.saturating_sub(m);
                let mut thin: Vec<f64> = sv[extra.min(sv.len())..].to_vec();
                thin.push(sigma_max);
                let mut sp = Spectrum::classify(&thin, m, c, cfg)?;
                sp.singular_values.pop();
                sp.rank = m.min(c) - sp.zeros;
                sp.dim_ker = c - sp.rank;
                sp.dim_coker = m - sp.rank;
                return Ok(sp);
            }
            block *= 2;
        }
    }

    /// Full decomposition with node-valued kernel and cokernel bases,
    /// orthonormal in L2.
    pub fn decompose(&self, cfg: &OperatorConfig) -> Result<Decomposition> {
        let a = self.matrix();
        let (m, c) = (a.nrows(), a.ncols());
        let size = m.max(c);
        let mut sq = DMatrix::zeros(size, size);
        sq.view_mut((0, 0), (m, c)).copy_from(&a);
        let svd = sq.svd(true, true);
        let u = svd.u.as_ref().unwrap();
        let vt = svd.v_t.as_ref().unwrap();
        let sv = svd.singular_values.as_slice();
        let thin: Vec<f64> = {
            let mut all: Vec<f64> = sv.to_vec();
            all.sort_by(|x, y| y.total_cmp(x));
            all.truncate(m.min(c));
            all
        };
        let spectrum = Spectrum::classify(&thin, m, c, cfg)?;
        let cut = spectrum.zero_cut;
        let zero_idx: Vec<usize> = (0..size).filter(|&i| sv[i] <= cut).collect();

        let n = self.dim;
        let nint = self.intervals();
        let sh = self.h.sqrt();
        let kernel_raw: Vec<DVector<f64>> = zero_idx.iter().map(|&i| vt.row(i).transpose().rows(0, c).into_owned()).collect();
        let cokernel_raw: Vec<DVector<f64>> = zero_idx.iter().map(|&i| u.column(i).rows(0, m).into_owned()).collect();
        let kernel_vecs = span_basis(&kernel_raw, spectrum.dim_ker);
        let coker_vecs = span_basis(&cokernel_raw, spectrum.dim_coker);

        let mut kernel: Vec<Vec<DVector<f64>>> = kernel_vecs
            .iter()
            .map(|y| (0..=nint).map(|k| y.rows(k * n, n) / sh).collect())
            .collect();
        let mut cokernel: Vec<Vec<DVector<f64>>> = coker_vecs
            .iter()
            .map(|mu| {
                let mut eta = Vec::with_capacity(nint + 1);
                eta.push(self.transfer[0].transpose() * mu.rows(0, n) / sh);
                for k in 0..nint {
                    eta.push(mu.rows(k * n, n) / sh);
                }
                eta
            })
            .collect();
        self.gram_schmidt(&mut kernel);
        self.gram_schmidt(&mut cokernel);
        Ok(Decomposition { spectrum, kernel, cokernel })
    }

    fn gram_schmidt(&self, basis: &mut [Vec<DVector<f64>>]) {
        for i in 0..basis.len() {
            for j in 0..i {
                let c = self.node_inner(&basis[i], &basis[j]);
                let bj = basis[j].clone();
                for (x, y) in basis[i].iter_mut().zip(&bj) {
                    *x -= y * c;
                }
            }
            let nrm = self.node_inner(&basis[i], &basis[i]).sqrt();
            for x in basis[i].iter_mut() {
                *x /= nrm;
            }
        }
    }

    /// L2 norm of `D zeta` for a node field.
    pub fn residual_norm(&self, zeta: &[DVector<f64>]) -> f64 {
        let r = self.apply(zeta);
        self.interval_inner(&r, &r).sqrt()
    }

    /// L2 norm of `D^* eta` for a node-valued cokernel element, using the
    /// interval values `eta(s_{k+1})`.
    pub fn adjoint_residual_norm(&self, eta_nodes: &[DVector<f64>]) -> f64 {
        let per_interval: Vec<DVector<f64>> = eta_nodes[1..].to_vec();
        let r = self.apply_adjoint(&per_interval);
        let inner: Vec<DVector<f64>> = r[1..r.len() - 1].to_vec();
        (inner.iter().map(|v| v.norm_squared()).sum::<f64>() * self.h).sqrt()
    }
}

/// `A^T A` of a [`LinearOperator`] stored as a symmetric block-tridiagonal
/// matrix.
struct NormalMatrix {
    n: usize,
    diag: Vec<DMatrix<f64>>,
    /// `upper[j]` is the block in row `j`, column `j + 1`.
    upper: Vec<DMatrix<f64>>,
}

impl NormalMatrix {
    fn new(op: &LinearOperator) -> Self {
        let n = op.dim;
        let nint = op.intervals();
        let w = 1.0 / (op.h * op.h);
        let eye = DMatrix::<f64>::identity(n, n);
        let mut diag = vec![DMatrix::zeros(n, n); nint + 1];
        let mut upper = Vec::with_capacity(nint);
        for k in 0..nint {
            let phi = &op.transfer[k];
            diag[k] += phi.transpose() * phi * w;
            diag[k + 1] += &eye * w;
            upper.push(phi.transpose() * -w);
        }
        diag[0] += op.left_rows.transpose() * &op.left_rows * w;
        diag[nint] += op.right_rows.transpose() * &op.right_rows * w;
        Self { n, diag, upper }
    }

    fn blocks(&self) -> usize {
        self.diag.len()
    }

    fn mul(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.n;
        let mut y = DMatrix::zeros(x.nrows(), x.ncols());
        for j in 0..self.blocks() {
            let mut acc = &self.diag[j] * x.rows(j * n, n);
            if j > 0 {
                acc += self.upper[j - 1].transpose() * x.rows((j - 1) * n, n);
            }
            if j + 1 < self.blocks() {
                acc += &self.upper[j] * x.rows((j + 1) * n, n);
            }
            y.rows_mut(j * n, n).copy_from(&acc);
        }
        y
    }

    /// Block Cholesky factors of `self + shift I`: lower diagonal blocks `l[j]`
    /// and subdiagonal blocks `s[j]` (row `j + 1`, column `j`).
    fn factor(&self, shift: f64) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
        let n = self.n;
        let eye = DMatrix::<f64>::identity(n, n);
        let mut l = Vec::with_capacity(self.blocks());
        let mut sub = Vec::with_capacity(self.blocks());
        let mut d = &self.diag[0] + &eye * shift;
        for j in 0..self.blocks() {
            let lj = d.clone().cholesky().expect("shifted normal matrix is positive definite").l();
            if j + 1 < self.blocks() {
                let linv = lj.clone().try_inverse().unwrap();
                let sj = (linv * &self.upper[j]).transpose();
                d = &self.diag[j + 1] + &eye * shift - &sj * sj.transpose();
                sub.push(sj);
            }
            l.push(lj);
        }
        (l, sub)
    }

    fn solve(&self, fac: &(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>), b: &DMatrix<f64>) -> DMatrix<f64> {
        let (l, sub) = fac;
        let n = self.n;
        let nb = self.blocks();
        let mut z = b.clone();
        for j in 0..nb {
            let mut r = z.rows(j * n, n).into_owned();
            if j > 0 {
                r -= &sub[j - 1] * z.rows((j - 1) * n, n);
            }
            let sol = l[j].solve_lower_triangular(&r).unwrap();
            z.rows_mut(j * n, n).copy_from(&sol);
        }
        for j in (0..nb).rev() {
            let mut r = z.rows(j * n, n).into_owned();
            if j + 1 < nb {
                r -= sub[j].transpose() * z.rows((j + 1) * n, n);
            }
            let sol = l[j].transpose().solve_upper_triangular(&r).unwrap();
            z.rows_mut(j * n, n).copy_from(&sol);
        }
        z
    }

    fn largest_eigenvalue(&self) -> f64 {
        let size = self.blocks() * self.n;
        let mut x = DMatrix::from_fn(size, 1, |i, _| 1.0 + ((i * 7919) % 13) as f64 * 0.1);
        x /= x.norm();
        let mut lam = 0.0;
        for _ in 0..200 {
            let y = self.mul(&x);
            let new = x.dot(&y);
            let ny = y.norm();
            x = y / ny;
            if (new - lam).abs() <= 1e-6 * new {
                lam = new;
                break;
            }
            lam = new;
        }
        lam
    }

    /// The `p` smallest eigenvalues by shifted inverse subspace iteration
    /// with Rayleigh–Ritz.
    fn smallest_eigenvalues(&self, p: usize, scale: f64) -> Vec<f64> {
        let size = self.blocks() * self.n;
        let shift = 1e-13 * scale;
        let fac = self.factor(shift);
        let mut x = DMatrix::from_fn(size, p, |i, j| (((i + 1) * (j + 3) * 2654435761usize) % 1000) as f64 / 1000.0 - 0.5);
        let mut prev = vec![f64::INFINITY; p];
        let mut vals = prev.clone();
        for _ in 0..300 {
            let y = self.solve(&fac, &x);
            let q = y.qr().q();
            let small = q.transpose() * self.mul(&q);
            let small = (&small + small.transpose()) * 0.5;
            let (v, w) = symmetric_eigen_sorted(&small);
            x = q * w;
            vals = v;
            let done = vals.iter().zip(&prev).take(p.saturating_sub(2).max(1)).all(|(a, b)| (a - b).abs() <= 1e-10 * scale.max(1.0) * 1e-4 + 1e-9 * a.abs());
            if done {
                break;
            }
            prev = vals.clone();
        }
        vals
    }
}

/// Orthonormal basis of the span of `vs` with the expected dimension.
fn span_basis(vs: &[DVector<f64>], dim: usize) -> Vec<DVector<f64>> {
    if vs.is_empty() || dim == 0 {
        return Vec::new();
    }
    let m = DMatrix::from_columns(vs);
    let svd = m.svd(true, false);
    let u = svd.u.unwrap();
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    order.into_iter().take(dim).map(|i| u.column(i).into_owned()).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Spectrum {
    /// Singular values, ascending.
    pub singular_values: Vec<f64>,
    pub sigma_max: f64,
    pub zeros: usize,
    pub rank: usize,
    pub dim_ker: usize,
    pub dim_coker: usize,
    /// Largest singular value counted as zero (0 if none).
    pub largest_zero: f64,
    /// Smallest singular value counted as nonzero.
    pub smallest_nonzero: f64,
    zero_cut: f64,
}

impl Spectrum {
    pub fn classify(sv: &[f64], rows: usize, cols: usize, cfg: &OperatorConfig) -> Result<Self> {
        let mut s: Vec<f64> = sv.to_vec();
        s.sort_by(f64::total_cmp);
        let sigma_max = s.last().copied().unwrap_or(0.0);
        let thr = cfg.zero_threshold * sigma_max;
        let candidates = s.iter().take_while(|&&x| x < thr).count();
        let zeros = candidates;
        let largest_zero = if zeros > 0 { s[zeros - 1] } else { 0.0 };
        let smallest_nonzero = s.get(zeros).copied().unwrap_or(f64::INFINITY);
        if zeros > 0 && largest_zero >= cfg.gap_ratio * smallest_nonzero {
            return Err(Error::SpectralGapAmbiguous { zero: largest_zero, nonzero: smallest_nonzero });
        }
        let rank = s.len() - zeros;
        Ok(Self {
            singular_values: s,
            sigma_max,
            zeros,
            rank,
            dim_ker: cols - rank,
            dim_coker: rows - rank,
            largest_zero,
            smallest_nonzero,
            zero_cut: thr,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Decomposition {
    pub spectrum: Spectrum,
    /// Kernel basis as node fields (frame components).
    pub kernel: Vec<Vec<DVector<f64>>>,
    /// Cokernel basis as node fields (frame components).
    pub cokernel: Vec<Vec<DVector<f64>>>,
}

fn lagrange_weights(t: f64) -> [f64; 4] {
    // Nodes at -1, 0, 1, 2.
    [
        -t * (t - 1.0) * (t - 2.0) / 6.0,
        (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0,
        -(t + 1.0) * t * (t - 2.0) / 2.0,
        (t + 1.0) * t * (t - 1.0) / 6.0,
    ]
}

/// `B(s)` between trajectory samples by cubic interpolation.
pub fn interpolate_hessian(traj: &Trajectory, s: f64) -> DMatrix<f64> {
    let h = traj.step();
    let s0 = traj.samples[0].s;
    let m = traj.len();
    let x = (s - s0) / h;
    let i = (x.floor() as isize).clamp(1, m as isize - 3) as usize;
    let t = x - i as f64;
    let w = lagrange_weights(t);
    let mut out = &traj.samples[i - 1].hess_frame * w[0];
    for (j, wj) in w.iter().enumerate().skip(1) {
        out += &traj.samples[i - 1 + j].hess_frame * *wj;
    }
    out
}

/// Build the operator along a normalised trajectory.
pub fn linearize(setup: &MorseSetup, traj: &Trajectory, cfg: &OperatorConfig) -> Result<LinearOperator> {
    let len = traj.len();
    if len < 8 {
        return Err(Error::TrajectoryTooShort(len));
    }
    let hf = traj.step();
    let mut stride = ((cfg.step / hf).round() as usize).max(1);
    if (len - 1) / stride > cfg.max_intervals {
        stride = (len - 1).div_ceil(cfg.max_intervals);
    }
    let nint = (len - 1) / stride;
    if nint < 4 {
        return Err(Error::TrajectoryTooShort(len));
    }
    let h = stride as f64 * hf;
    let idx: Vec<usize> = (0..=nint).map(|k| k * stride).collect();
    let nodes: Vec<f64> = idx.iter().map(|&i| traj.samples[i].s).collect();
    let b_nodes: Vec<DMatrix<f64>> = idx.iter().map(|&i| traj.samples[i].hess_frame.clone()).collect();
    let transfer = nodes[..nint]
        .iter()
        .map(|&s| magnus_step(&interpolate_hessian(traj, s + GAUSS_LO * h), &interpolate_hessian(traj, s + GAUSS_HI * h), h))
        .collect();
    let op = LinearOperator::assemble(nodes, h, b_nodes, transfer, idx);
    let expect = (
        setup.critical_points[traj.source].morse_index,
        setup.critical_points[traj.target].morse_index,
    );
    if op.end_indices() != expect {
        return Err(Error::InvalidParameters(format!(
            "end conditions of {} give indices {:?}, expected {:?}",
            traj.id,
            op.end_indices(),
            expect
        )));
    }
    Ok(op)
}

/// Velocity `du/ds` in frame components at the operator nodes.
pub fn velocity_field(setup: &MorseSetup, traj: &Trajectory, op: &LinearOperator) -> Result<Vec<DVector<f64>>> {
    op.sample_index
        .iter()
        .map(|&i| {
            let s = &traj.samples[i];
            Ok(s.velocity_frame(&setup.local(&s.point)?.metric))
        })
        .collect()
}

/// Components in the trajectory frame at sample `i` of a vector given in the
/// patch of critical point `crit`.
fn crit_vector_in_frame(setup: &MorseSetup, traj: &Trajectory, i: usize, crit: usize, v: &DVector<f64>) -> Option<DVector<f64>> {
    let s = &traj.samples[i];
    let ch = &setup.normal_charts[crit];
    let back = crate::geometry::ChartPoint::new(ch.patch, setup.coords_in(&s.point, ch.patch)?);
    let (_, m) = setup.transition_jacobian(&back, s.point.patch)?;
    let w = m * v;
    let g = setup.local(&s.point).ok()?.metric;
    Some(s.frame.transpose() * g * w)
}

/// Frame components at node `k` of the oriented unstable eigenvectors of `crit`.
pub fn unstable_frame_at(setup: &MorseSetup, traj: &Trajectory, op: &LinearOperator, node: usize, crit: usize) -> Result<DMatrix<f64>> {
    let c = &setup.critical_points[crit];
    let cols = (0..c.morse_index)
        .map(|j| crit_vector_in_frame(setup, traj, op.sample_index[node], crit, &c.eigenvectors.column(j).into_owned()).ok_or(Error::OutOfAtlas))
        .collect::<Result<Vec<_>>>()?;
    Ok(if cols.is_empty() { DMatrix::zeros(op.dim, 0) } else { DMatrix::from_columns(&cols) })
}

fn qr_keep_orientation(m: &DMatrix<f64>) -> DMatrix<f64> {
    crate::trajectories::orthonormalize(m, &DMatrix::identity(m.nrows(), m.nrows()))
}

/// Sign comparing the transported unstable frame of the source, completed by
/// the given cokernel vectors at the end, with `[du/ds | unstable frame of
/// target]`. For a transverse rigid trajectory this is its orientation sign;
/// for a rank-one obstructed one it orients the fibre.
pub fn transport_sign(setup: &MorseSetup, traj: &Trajectory, op: &LinearOperator, coker_end: &[DVector<f64>]) -> Result<i8> {
    let mut xi = unstable_frame_at(setup, traj, op, 0, traj.source)?;
    if xi.ncols() > 0 {
        xi = qr_keep_orientation(&xi);
        for k in 0..op.intervals() {
            xi = qr_keep_orientation(&(&op.transfer[k] * &xi));
        }
    }
    let last = op.nodes.len() - 1;
    let vel = velocity_field(setup, traj, op)?;
    let v_end = vel[last].normalize();
    let ut = unstable_frame_at(setup, traj, op, last, traj.target)?;
    let mut basis_cols = vec![v_end];
    basis_cols.extend(ut.column_iter().map(|c| c.into_owned()));
    let basis = DMatrix::from_columns(&basis_cols);
    let mut lhs_cols: Vec<DVector<f64>> = xi.column_iter().map(|c| c.into_owned()).collect();
    lhs_cols.extend(coker_end.iter().map(|v| v.normalize()));
    if lhs_cols.len() != basis.ncols() {
        return Err(Error::InvalidParameters(format!(
            "orientation of {} needs {} vectors, got {}",
            traj.id,
            basis.ncols(),
            lhs_cols.len()
        )));
    }
    let lhs = DMatrix::from_columns(&lhs_cols);
    let coeff = (basis.transpose() * &basis).lu().solve(&(basis.transpose() * lhs)).ok_or(Error::OutOfAtlas)?;
    let d = coeff.determinant();
    Ok(if d >= 0.0 { 1 } else { -1 })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ObstructionFiber {
    pub trajectory: String,
    pub nodes: Vec<f64>,
    /// Oriented L2-orthonormal cokernel basis as node fields in frame components.
    pub basis: Vec<Vec<DVector<f64>>>,
    pub adjoint_residuals: Vec<f64>,
    pub orientation: i8,
}

impl ObstructionFiber {
    pub fn rank(&self) -> usize {
        self.basis.len()
    }
}

/// Summary of the linearisation along one trajectory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinearizationSummary {
    pub trajectory: String,
    pub intervals: usize,
    pub dim_ker: usize,
    pub dim_coker: usize,
    pub fredholm_index: i64,
    pub expected_index: i64,
    pub largest_zero: f64,
    pub smallest_nonzero: f64,
    pub sigma_max: f64,
    pub velocity_residual: f64,
    pub refined_dims: Option<(usize, usize)>,
}

/// Compute the cokernel of `D_u` as an oriented obstruction fibre.
pub fn compute_obstruction_fiber(setup: &MorseSetup, traj: &Trajectory, cfg: &OperatorConfig) -> Result<(ObstructionFiber, LinearOperator, Decomposition)> {
    let op = linearize(setup, traj, cfg)?;
    let dec = op.decompose(cfg)?;
    let mut basis = dec.cokernel.clone();
    let last = op.nodes.len() - 1;
    let mut orientation = 1;
    if basis.len() == 1 {
        orientation = transport_sign(setup, traj, &op, &[basis[0][last].clone()])?;
        if orientation < 0 {
            for v in basis[0].iter_mut() {
                v.neg_mut();
            }
        }
    }
    let adjoint_residuals = basis.iter().map(|b| op.adjoint_residual_norm(b)).collect();
    Ok((
        ObstructionFiber {
            trajectory: traj.id.clone(),
            nodes: op.nodes.clone(),
            basis,
            adjoint_residuals,
            orientation,
        },
        op,
        dec,
    ))
}

pub fn summarize(setup: &MorseSetup, traj: &Trajectory, cfg: &OperatorConfig, refine: bool) -> Result<LinearizationSummary> {
    let op = linearize(setup, traj, cfg)?;
    let sp = op.spectrum(cfg)?;
    let vel = velocity_field(setup, traj, &op)?;
    let velocity_residual = op.residual_norm(&vel);
    let refined_dims = if refine {
        let sp2 = linearize(setup, traj, &cfg.refined())?.spectrum(&cfg.refined())?;
        Some((sp2.dim_ker, sp2.dim_coker))
    } else {
        None
    };
    let ci = setup.critical_points[traj.source].morse_index as i64;
    let cj = setup.critical_points[traj.target].morse_index as i64;
    Ok(LinearizationSummary {
        trajectory: traj.id.clone(),
        intervals: op.intervals(),
        dim_ker: sp.dim_ker,
        dim_coker: sp.dim_coker,
        fredholm_index: sp.dim_ker as i64 - sp.dim_coker as i64,
        expected_index: ci - cj,
        largest_zero: sp.largest_zero,
        smallest_nonzero: sp.smallest_nonzero,
        sigma_max: sp.sigma_max,
        velocity_residual,
        refined_dims,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CutStatus {
    Transverse,
    Clean,
    Unresolved,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComponentCut {
    pub component: String,
    pub status: CutStatus,
    pub dim_ker: Vec<usize>,
    pub dim_coker: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CleanReport {
    pub moduli: String,
    pub status: CutStatus,
    pub components: Vec<ComponentCut>,
}

/// Label every component of a moduli space from per-member kernel and
/// cokernel dimensions (in the order of `moduli.trajectories()`).
pub fn check_clean(label: &str, moduli: &ModuliSpace, summaries: &[LinearizationSummary]) -> CleanReport {
    let mut it = summaries.iter();
    let mut components = Vec::new();
    for comp in &moduli.components {
        let sums: Vec<&LinearizationSummary> = it.by_ref().take(comp.members.len()).collect();
        let dim_ker: Vec<usize> = sums.iter().map(|s| s.dim_ker).collect();
        let dim_coker: Vec<usize> = sums.iter().map(|s| s.dim_coker).collect();
        let tangent = 1 + usize::from(comp.kind == ComponentKind::Family);
        let constant = |v: &[usize]| v.windows(2).all(|w| w[0] == w[1]);
        let status = if comp.near_breaking {
            CutStatus::Unresolved
        } else if dim_coker.iter().all(|&c| c == 0) && dim_ker.iter().all(|&k| k == tangent) {
            CutStatus::Transverse
        } else if constant(&dim_coker) && dim_ker.iter().all(|&k| k == tangent) {
            CutStatus::Clean
        } else {
            CutStatus::Unresolved
        };
        components.push(ComponentCut {
            component: comp.id.clone(),
            status,
            dim_ker,
            dim_coker,
        });
    }
    let status = if components.iter().any(|c| c.status == CutStatus::Unresolved) {
        CutStatus::Unresolved
    } else if components.iter().any(|c| c.status == CutStatus::Clean) {
        CutStatus::Clean
    } else {
        CutStatus::Transverse
    };
    CleanReport {
        moduli: label.to_string(),
        status,
        components,
    }
}

/// First-order consistency of `D` with the nonlinear flow operator
/// `L(x) = x' + grad f(x)`: perturbs the trajectory by `h E zeta` and returns
/// the largest frame-norm difference between `(L(u_h) - L(u)) / h` and
/// `D zeta` over the samples in `[a, b]`.
pub fn finite_difference_defect<F>(setup: &MorseSetup, traj: &Trajectory, zeta: F, h: f64) -> Result<f64>
where
    F: Fn(f64) -> (DVector<f64>, DVector<f64>),
{
    let mut worst: f64 = 0.0;
    for s in traj.samples.iter().step_by(5) {
        let (z, dz) = zeta(s.s);
        if z.norm() == 0.0 && dz.norm() == 0.0 {
            continue;
        }
        // the displaced point must stay inside the patch, so use the roomiest one
        let target = setup.locate(&setup.ambient(&s.point)?)?;
        let (coords, m) = setup.transition_jacobian(&s.point, target.patch).ok_or(Error::OutOfAtlas)?;
        let point = ChartPoint::new(target.patch, coords);
        let frame = m * &s.frame;
        let loc = setup.local(&point)?;
        let w = &frame * &z;
        let mut moved = point.clone();
        moved.coords += &w * h;
        let grad_h = setup.gradient(&moved)?;
        let mut de = DMatrix::zeros(z.len(), z.len());
        for j in 0..z.len() {
            de.set_column(j, &loc.christoffel(&loc.grad, &frame.column(j).into_owned()));
        }
        let lin = (&grad_h - &loc.grad) / h + de * &z + &frame * &dz;
        let lin_frame = frame.transpose() * &loc.metric * lin;
        let d = dz + &s.hess_frame * z;
        worst = worst.max((lin_frame - d).norm());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::make_builtin_setup;
    use crate::trajectories::{default_epsilon, normalize_representative, FlowConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(f: impl Fn(f64) -> f64 + 'static) -> LinearOperator {
        LinearOperator::from_fn(-8.0, 8.0, 320, move |s| DMatrix::from_element(1, 1, f(s)))
    }

    // |<v, sech>| / (|v| |sech|) over the nodes.
    fn sech_overlap(op: &LinearOperator, v: &[DVector<f64>]) -> f64 {
        let sech: Vec<DVector<f64>> = op.nodes.iter().map(|s| DVector::from_element(1, 1.0 / s.cosh())).collect();
        op.node_inner(v, &sech).abs() / (op.node_inner(v, v) * op.node_inner(&sech, &sech)).sqrt()
    }

    #[test]
    fn decreasing_coefficient_has_sech_cokernel() {
        let op = scalar(|s| -s.tanh());
        assert_eq!(op.end_indices(), (0, 1));
        let cfg = OperatorConfig::default();
        let dec = op.decompose(&cfg).unwrap();
        assert_eq!((dec.spectrum.dim_ker, dec.spectrum.dim_coker), (0, 1));
        assert!(sech_overlap(&op, &dec.cokernel[0]) > 0.9999);
        assert!(op.adjoint_residual_norm(&dec.cokernel[0]) < 1e-6);
    }

    #[test]
    fn increasing_coefficient_has_sech_kernel() {
        let op = scalar(|s| s.tanh());
        assert_eq!(op.end_indices(), (1, 0));
        let dec = op.decompose(&OperatorConfig::default()).unwrap();
        assert_eq!((dec.spectrum.dim_ker, dec.spectrum.dim_coker), (1, 0));
        assert!(sech_overlap(&op, &dec.kernel[0]) > 0.9999);
        assert!(op.residual_norm(&dec.kernel[0]) < 1e-6);
    }

    #[test]
    fn banded_and_dense_spectra_agree() {
        let cfg = OperatorConfig::default();
        for f in [|s: f64| -s.tanh(), |s: f64| s.tanh(), |s: f64| 1.0 + 0.5 * s.sin()] {
            let op = scalar(f);
            let (a, b) = (op.spectrum(&cfg).unwrap(), op.spectrum_dense(&cfg).unwrap());
            assert_eq!((a.dim_ker, a.dim_coker), (b.dim_ker, b.dim_coker));
            // the banded largest value only sets the zero threshold
            assert!((a.sigma_max - b.sigma_max).abs() < 1e-2 * b.sigma_max);
            assert!((a.smallest_nonzero - b.smallest_nonzero).abs() < 1e-6 * b.smallest_nonzero);
        }
    }

    #[test]
    fn index_is_end_index_difference() {
        let cfg = OperatorConfig::default();
        let b = |s: f64| {
            let t = s.tanh();
            DMatrix::from_row_slice(2, 2, &[1.0 - 2.0 * (0.5 + 0.5 * t), 0.3 * (1.0 - t * t), 0.3 * (1.0 - t * t), -1.5])
        };
        let op = LinearOperator::from_fn(-8.0, 8.0, 200, b);
        let (lo, hi) = op.end_indices();
        let sp = op.spectrum(&cfg).unwrap();
        assert_eq!(sp.dim_ker as i64 - sp.dim_coker as i64, lo as i64 - hi as i64);
        assert_eq!(op.rows(), 2 * 200 + op.left_rows.nrows() + op.right_rows.nrows());
    }

    #[test]
    fn adjoint_pairing_is_exact() {
        let b = |s: f64| DMatrix::from_row_slice(2, 2, &[s.tanh(), 0.4 * s.cos(), 0.4 * s.cos(), -1.0 + 0.2 * s.sin()]);
        let op = LinearOperator::from_fn(-6.0, 6.0, 240, b);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        assert!(op.adjoint_pairing_defect(&mut rng, 50) < 1e-12);
    }

    #[test]
    fn magnus_step_is_exact_for_constant_coefficients() {
        let b = DMatrix::from_row_slice(2, 2, &[0.7, 0.2, 0.2, -0.4]);
        let m = magnus_step(&b, &b, 0.1);
        assert!((m - (&b * -0.1).exp()).amax() < 1e-14);
    }

    #[test]
    fn ambiguous_gap_is_reported() {
        let cfg = OperatorConfig::default();
        let r = Spectrum::classify(&[5e-7, 2e-6, 1.0], 3, 3, &cfg);
        assert!(matches!(r, Err(Error::SpectralGapAmbiguous { .. })));
        let ok = Spectrum::classify(&[1e-12, 0.5, 1.0], 3, 4, &cfg).unwrap();
        assert_eq!((ok.rank, ok.dim_ker, ok.dim_coker), (2, 2, 1));
    }

    #[test]
    fn torus_saddle_connection_is_obstructed() {
        let s = make_builtin_setup("upright_torus").unwrap();
        let q = s.crit_index("q").unwrap();
        let t = Trajectory::from_shot(&s, "q->r".into(), q, 0.0, &FlowConfig::default()).unwrap();
        let t = normalize_representative(&s, &t, default_epsilon(&s)).unwrap();
        let cfg = OperatorConfig::default();
        let sum = summarize(&s, &t, &cfg, true).unwrap();
        assert_eq!((sum.dim_ker, sum.dim_coker), (1, 1));
        assert_eq!(sum.refined_dims, Some((1, 1)));
        assert_eq!(sum.fredholm_index, sum.expected_index);
        assert!(sum.velocity_residual < 1e-3);
        let (fiber, op, _) = compute_obstruction_fiber(&s, &t, &cfg).unwrap();
        assert_eq!(fiber.rank(), 1);
        assert!(fiber.adjoint_residuals[0] < 1e-3);
        assert!((op.node_inner(&fiber.basis[0], &fiber.basis[0]) - 1.0).abs() < 1e-10);
    }
}
