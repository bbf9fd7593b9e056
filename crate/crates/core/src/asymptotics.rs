//! Exponential tail coefficients of trajectories and cokernel elements in the
//! eigenframe of the critical point at each end.
//!
//! Near a critical point with Hessian eigenvalues `lambda_i`, a trajectory
//! behaves like `sum c_i e^{-lambda_i s} v_i` and a cokernel element like
//! `sum d_i e^{lambda_i s} v_i`, each over the modes that decay at that end.
//! Coefficients are fitted on the part of the tail deep inside the normal
//! chart, with a first-order correction proportional to the distance from the
//! critical point.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::MorseSetup;
use crate::linearized::LinearOperator;
use crate::trajectories::Trajectory;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum End {
    /// `s -> -infinity`, at the source.
    Minus,
    /// `s -> +infinity`, at the target.
    Plus,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct AsymptoticConfig {
    /// Outer edge of the fit window, in chart radii.
    pub window: f64,
    pub min_samples: usize,
    /// Eigenvalues closer than this are fitted as one joint mode.
    pub degeneracy: f64,
    /// Relative fit residual above which a coefficient is not trusted.
    pub trust_residual: f64,
}

impl Default for AsymptoticConfig {
    fn default() -> Self {
        Self {
            window: 0.1,
            min_samples: 10,
            degeneracy: 1e-6,
            trust_residual: 1e-3,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModeCoeff {
    /// Signed mode label: `-k..=-1` for negative eigenvalues (most negative
    /// first), `1..` for positive ones (smallest first).
    pub mode: i32,
    pub eigenvalue: f64,
    pub coefficient: f64,
    /// Slope of `log |component|` against `s` on the window.
    pub fitted_rate: f64,
    pub fit_residual: f64,
    pub trusted: bool,
    /// Part of a degenerate eigenspace; only basis-invariant combinations
    /// are meaningful.
    pub joint: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AsymptoticCoeffs {
    pub subject: String,
    pub crit: usize,
    pub end: End,
    pub modes: Vec<ModeCoeff>,
    pub window: (f64, f64),
    pub samples_used: usize,
    /// Largest size of the non-decaying components relative to the whole,
    /// over the window.
    pub suppressed: f64,
    pub advisory: Option<String>,
}

impl AsymptoticCoeffs {
    /// Mode with eigenvalue closest to zero.
    pub fn leading(&self) -> Option<&ModeCoeff> {
        self.modes.iter().min_by(|a, b| a.eigenvalue.abs().total_cmp(&b.eigenvalue.abs()))
    }

    pub fn mode(&self, mode: i32) -> Option<&ModeCoeff> {
        self.modes.iter().find(|m| m.mode == mode)
    }
}

/// Largest window, in chart radii, used when the nominal one holds too few
/// samples.
const MAX_WINDOW: f64 = 0.5;

/// Signed mode label of position `j` in the ascending eigenvalue list.
pub fn mode_label(j: usize, index: usize) -> i32 {
    if j < index {
        j as i32 - index as i32
    } else {
        (j - index) as i32 + 1
    }
}

struct Series {
    s: Vec<f64>,
    comps: Vec<DVector<f64>>,
    dist: Vec<f64>,
}

fn fit(subject: &str, setup: &MorseSetup, crit: usize, end: End, series: Series, growth_sign: f64, cfg: &AsymptoticConfig) -> Result<AsymptoticCoeffs> {
    let cp = &setup.critical_points[crit];
    let chart = &setup.normal_charts[crit];
    let k = cp.morse_index;
    let n = cp.eigenvalues.len();
    let count = series.s.len();
    if count < cfg.min_samples {
        return Err(Error::WindowTooShort(count));
    }
    // A mode behaves like `e^{growth_sign * lambda * s}` and is fitted only if
    // that decays towards the end.
    let toward = if end == End::Minus { -1.0 } else { 1.0 };
    let decays = |lam: f64| growth_sign * lam * toward < 0.0;
    let mut modes = Vec::new();
    let mut suppressed: f64 = 0.0;
    for c in &series.comps {
        let tot = c.norm();
        if tot > 0.0 {
            let off: f64 = (0..n).filter(|&j| !decays(cp.eigenvalues[j])).map(|j| c[j] * c[j]).sum::<f64>().sqrt();
            suppressed = suppressed.max(off / tot);
        }
    }
    for j in 0..n {
        let lam = cp.eigenvalues[j];
        if !decays(lam) {
            continue;
        }
        let joint = (0..n).any(|o| o != j && (cp.eigenvalues[o] - lam).abs() < cfg.degeneracy);
        // y(s) = comp * e^{-growth_sign lambda s} ~ coefficient + b * dist(s).
        let ys: Vec<f64> = (0..count).map(|i| series.comps[i][j] * (-growth_sign * lam * series.s[i]).exp()).collect();
        let design = DMatrix::from_fn(count, 2, |i, c| if c == 0 { 1.0 } else { series.dist[i] / chart.radius });
        let rhs = DVector::from_vec(ys.clone());
        let sol = (design.transpose() * &design).lu().solve(&(design.transpose() * &rhs)).unwrap_or_else(|| DVector::from_vec(vec![ys[0], 0.0]));
        let coefficient = sol[0];
        let scale = ys.iter().fold(0.0f64, |m, y| m.max(y.abs())).max(1e-300);
        let res = (&design * &sol - &rhs).norm() / (count as f64).sqrt() / scale;
        let (mut sx, mut sy, mut sxx, mut sxy, mut cnt) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..count {
            let v = series.comps[i][j].abs();
            if v > 0.0 {
                let l = v.ln();
                sx += series.s[i];
                sy += l;
                sxx += series.s[i] * series.s[i];
                sxy += series.s[i] * l;
                cnt += 1.0;
            }
        }
        let fitted_rate = if cnt > 2.0 { (cnt * sxy - sx * sy) / (cnt * sxx - sx * sx) } else { f64::NAN };
        modes.push(ModeCoeff {
            mode: mode_label(j, k),
            eigenvalue: lam,
            coefficient,
            fitted_rate,
            fit_residual: res,
            trusted: res < cfg.trust_residual,
            joint,
        });
    }
    let advisory = (chart.residual() > 1e-2).then(|| format!("normal chart residual {:.2e}: only the leading coefficient is reliable", chart.residual()));
    if advisory.is_some() {
        let lead = modes.iter().map(|m| m.eigenvalue.abs()).fold(f64::INFINITY, f64::min);
        for m in &mut modes {
            if m.eigenvalue.abs() > lead + cfg.degeneracy {
                m.trusted = false;
            }
        }
    }
    let (a, b) = (series.s[0], series.s[count - 1]);
    Ok(AsymptoticCoeffs {
        subject: subject.to_string(),
        crit,
        end,
        modes,
        window: (a.min(b), a.max(b)),
        samples_used: count,
        suppressed,
        advisory,
    })
}

/// Tail coefficients of a trajectory: at the source end the modes with
/// negative eigenvalue (`u ~ c e^{-lambda s}` as `s -> -inf`), at the target
/// end those with positive eigenvalue.
pub fn extract_trajectory_coeffs(setup: &MorseSetup, traj: &Trajectory, end: End, cfg: &AsymptoticConfig) -> Result<AsymptoticCoeffs> {
    let crit = if end == End::Minus { traj.source } else { traj.target };
    let rho = setup.normal_charts[crit].radius;
    let mut series = Series { s: Vec::new(), comps: Vec::new(), dist: Vec::new() };
    let order: Box<dyn Iterator<Item = &crate::trajectories::TrajSample>> = match end {
        End::Minus => Box::new(traj.samples.iter()),
        End::Plus => Box::new(traj.samples.iter().rev()),
    };
    for smp in order {
        let Some(xi) = setup.normal_coords(crit, &smp.point) else { break };
        let d = xi.norm();
        if d > cfg.window * rho && (series.s.len() >= cfg.min_samples || d > MAX_WINDOW * rho) {
            break;
        }
        series.s.push(smp.s);
        series.dist.push(d);
        series.comps.push(xi);
    }
    fit(&traj.id, setup, crit, end, series, -1.0, cfg)
}

/// Tail coefficients of a cokernel element given as node values in frame
/// components: near the source `eta ~ d e^{lambda s}` over positive
/// eigenvalues, near the target over negative ones.
pub fn extract_cokernel_coeffs(setup: &MorseSetup, traj: &Trajectory, op: &LinearOperator, eta: &[DVector<f64>], end: End, cfg: &AsymptoticConfig) -> Result<AsymptoticCoeffs> {
    let crit = if end == End::Minus { traj.source } else { traj.target };
    let rho = setup.normal_charts[crit].radius;
    let mut series = Series { s: Vec::new(), comps: Vec::new(), dist: Vec::new() };
    let nodes: Vec<usize> = match end {
        End::Minus => (0..op.nodes.len()).collect(),
        End::Plus => (0..op.nodes.len()).rev().collect(),
    };
    for k in nodes {
        let smp = &traj.samples[op.sample_index[k]];
        let Some(xi) = setup.normal_coords(crit, &smp.point) else { break };
        let d = xi.norm();
        if d > cfg.window * rho && (series.s.len() >= cfg.min_samples || d > MAX_WINDOW * rho) {
            break;
        }
        let w = &smp.frame * &eta[k];
        let Some(comp) = setup.vector_in_normal(crit, &smp.point, &w) else { break };
        series.s.push(smp.s);
        series.dist.push(d);
        series.comps.push(comp);
    }
    fit(&format!("{} cokernel", traj.id), setup, crit, end, series, 1.0, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::make_builtin_setup;
    use crate::linearized::{compute_obstruction_fiber, OperatorConfig};
    use crate::trajectories::{default_epsilon, normalize_representative, FlowConfig};

    fn saddle_connections() -> (MorseSetup, Vec<Trajectory>) {
        let s = make_builtin_setup("upright_torus").unwrap();
        let q = s.crit_index("q").unwrap();
        let eps = default_epsilon(&s);
        let ts = [0.0, std::f64::consts::PI]
            .iter()
            .map(|&a| normalize_representative(&s, &Trajectory::from_shot(&s, format!("q->r@{a}"), q, a, &FlowConfig::default()).unwrap(), eps).unwrap())
            .collect();
        (s, ts)
    }

    #[test]
    fn mode_labels() {
        assert_eq!((0..2).map(|j| mode_label(j, 1)).collect::<Vec<_>>(), [-1, 1]);
        assert_eq!((0..2).map(|j| mode_label(j, 0)).collect::<Vec<_>>(), [1, 2]);
        assert_eq!((0..2).map(|j| mode_label(j, 2)).collect::<Vec<_>>(), [-2, -1]);
    }

    #[test]
    fn opposite_departures_have_opposite_source_coefficients() {
        let (s, ts) = saddle_connections();
        let cfg = AsymptoticConfig::default();
        let a = extract_trajectory_coeffs(&s, &ts[0], End::Minus, &cfg).unwrap();
        let b = extract_trajectory_coeffs(&s, &ts[1], End::Minus, &cfg).unwrap();
        let (ca, cb) = (a.mode(-1).unwrap(), b.mode(-1).unwrap());
        assert!(ca.coefficient * cb.coefficient < 0.0);
        assert!((ca.coefficient.abs() - cb.coefficient.abs()).abs() < 1e-6 * ca.coefficient.abs());
        assert!(ca.trusted && a.suppressed < 1e-2);
        assert!((ca.fitted_rate + ca.eigenvalue).abs() < 1e-2 * ca.eigenvalue.abs());
        assert_eq!(a.modes.len(), 1);
    }

    #[test]
    fn target_tail_decays_at_positive_rate() {
        let (s, ts) = saddle_connections();
        let c = extract_trajectory_coeffs(&s, &ts[0], End::Plus, &AsymptoticConfig::default()).unwrap();
        let m = c.mode(1).unwrap();
        assert!(m.eigenvalue > 0.0 && m.coefficient != 0.0);
        assert!((m.fitted_rate + m.eigenvalue).abs() < 1e-2 * m.eigenvalue);
    }

    #[test]
    fn normalised_coefficients_ignore_shifts() {
        let (s, ts) = saddle_connections();
        let cfg = AsymptoticConfig::default();
        let moved = normalize_representative(&s, &ts[0].shifted(2.5), default_epsilon(&s)).unwrap();
        for end in [End::Minus, End::Plus] {
            let a = extract_trajectory_coeffs(&s, &ts[0], end, &cfg).unwrap();
            let b = extract_trajectory_coeffs(&s, &moved, end, &cfg).unwrap();
            for (x, y) in a.modes.iter().zip(&b.modes) {
                assert!((x.coefficient - y.coefficient).abs() < 1e-8 * x.coefficient.abs());
            }
        }
        // An unnormalised shift rescales the coefficient by e^{lambda ds}.
        let raw = extract_trajectory_coeffs(&s, &ts[0].shifted(0.5), End::Minus, &cfg).unwrap();
        let base = extract_trajectory_coeffs(&s, &ts[0], End::Minus, &cfg).unwrap();
        let (r, b) = (raw.mode(-1).unwrap(), base.mode(-1).unwrap());
        assert!((r.coefficient - b.coefficient * (b.eigenvalue * 0.5).exp()).abs() < 1e-6 * b.coefficient.abs());
    }

    #[test]
    fn cokernel_tails_grow_into_the_trajectory() {
        let (s, ts) = saddle_connections();
        let cfg = AsymptoticConfig::default();
        let (fiber, op, _) = compute_obstruction_fiber(&s, &ts[0], &OperatorConfig::default()).unwrap();
        let minus = extract_cokernel_coeffs(&s, &ts[0], &op, &fiber.basis[0], End::Minus, &cfg).unwrap();
        let plus = extract_cokernel_coeffs(&s, &ts[0], &op, &fiber.basis[0], End::Plus, &cfg).unwrap();
        let (dm, dp) = (minus.mode(1).unwrap(), plus.mode(-1).unwrap());
        assert!(dm.coefficient != 0.0 && dp.coefficient != 0.0);
        assert!((dm.fitted_rate - dm.eigenvalue).abs() < 5e-2 * dm.eigenvalue);
        assert!((dp.fitted_rate - dp.eigenvalue).abs() < 5e-2 * dp.eigenvalue.abs());
    }

    #[test]
    fn too_few_samples_is_an_error() {
        let (s, ts) = saddle_connections();
        let cfg = AsymptoticConfig { min_samples: 100_000, ..AsymptoticConfig::default() };
        assert!(matches!(extract_trajectory_coeffs(&s, &ts[0], End::Minus, &cfg), Err(Error::WindowTooShort(_))));
    }
}
