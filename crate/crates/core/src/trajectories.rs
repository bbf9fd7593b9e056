//! Negative gradient flow lines between critical points and their moduli
//! spaces.
//!
//! Trajectories are found by shooting from a small sphere in the unstable
//! eigenspace of the source. For sources of index one the two directions are
//! integrated directly; for index two the unstable circle is swept and every
//! change in the itinerary (which saddles are passed and on which side) is
//! bisected down to a trajectory ending at a saddle.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ChartPoint, MorseSetup};
use crate::ode::{next_step_size, try_step, StepperConfig};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    /// Per-step tolerance of the Runge–Kutta integrator.
    pub tolerance: f64,
    pub max_step: f64,
    pub horizon: f64,
    /// Shooting offset as a fraction of the normal chart radius.
    pub shoot_offset: f64,
    /// Capture distance as a fraction of the normal chart radius.
    pub capture_radius: f64,
    /// Spacing of stored trajectory samples.
    pub sample_step: f64,
    pub sweep_directions: usize,
    /// Members kept per one-parameter family.
    pub family_samples: usize,
    pub bisection_tolerance: f64,
    /// Passes closer than this fraction of the chart radius flag a trajectory
    /// as near breaking.
    pub near_breaking: f64,
    /// Hausdorff distance below which two trajectories are identified.
    pub dedup_distance: f64,
    /// Family members are preferably drawn from shots whose closest saddle
    /// pass stays at least this many chart radii away.
    pub member_clearance: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_step: 0.05,
            horizon: 400.0,
            shoot_offset: 1e-4,
            capture_radius: 1e-4,
            sample_step: 0.01,
            sweep_directions: 360,
            family_samples: 36,
            bisection_tolerance: 1e-10,
            near_breaking: 1e-2,
            dedup_distance: 1e-5,
            member_clearance: 0.15,
        }
    }
}

/// Visit of a flow line to the normal chart of a critical point it did not end at.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NearPass {
    pub crit: usize,
    pub min_dist: f64,
    /// Signs of the unstable normal coordinates when leaving the chart.
    pub exit_signs: Vec<i8>,
}

#[derive(Clone, Debug)]
pub struct FrameSample {
    pub s: f64,
    pub point: ChartPoint,
    pub frame: DMatrix<f64>,
}

/// Raw result of integrating the flow from a start point.
#[derive(Clone, Debug)]
pub struct FlowCurve {
    pub source: usize,
    pub start: ChartPoint,
    pub captured_by: usize,
    pub end_s: f64,
    pub end_point: ChartPoint,
    pub passes: Vec<NearPass>,
    pub samples: Vec<FrameSample>,
}

impl FlowCurve {
    /// Passes closer than `frac` chart radii, in order.
    pub fn close_passes(&self, setup: &MorseSetup, frac: f64) -> Vec<&NearPass> {
        self.passes.iter().filter(|p| p.min_dist < frac * setup.normal_charts[p.crit].radius).collect()
    }
}

fn flatten(x: &DVector<f64>, frame: Option<&DMatrix<f64>>) -> DVector<f64> {
    let n = x.len();
    let m = frame.map_or(0, |f| f.len());
    let mut y = DVector::zeros(n + m);
    y.rows_mut(0, n).copy_from(x);
    if let Some(f) = frame {
        y.rows_mut(n, m).copy_from_slice(f.as_slice());
    }
    y
}

fn unflatten(y: &DVector<f64>, n: usize) -> (DVector<f64>, Option<DMatrix<f64>>) {
    let x = y.rows(0, n).into_owned();
    let frame = (y.len() > n).then(|| DMatrix::from_column_slice(n, n, &y.as_slice()[n..n + n * n]));
    (x, frame)
}

fn rhs(setup: &MorseSetup, patch: usize, y: &DVector<f64>) -> Result<DVector<f64>> {
    let n = setup.dim();
    let (x, frame) = unflatten(y, n);
    let loc = setup.local(&ChartPoint::new(patch, x))?;
    let mut out = DVector::zeros(y.len());
    out.rows_mut(0, n).copy_from(&(-&loc.grad));
    if let Some(e) = frame {
        for j in 0..n {
            let col = loc.christoffel(&loc.grad, &e.column(j).into_owned());
            out.rows_mut(n + j * n, n).copy_from(&col);
        }
    }
    Ok(out)
}

/// Integrate the negative gradient flow from `start` until it comes within the
/// capture radius of a critical point other than `source`. With `frame` given,
/// the frame is parallel transported and samples are recorded every
/// `cfg.sample_step`.
pub fn integrate_flow(setup: &MorseSetup, source: usize, start: ChartPoint, frame: Option<DMatrix<f64>>, cfg: &FlowConfig) -> Result<FlowCurve> {
    let n = setup.dim();
    let record = frame.is_some();
    let scfg = StepperConfig::new(cfg.tolerance, cfg.max_step, n);
    let mut patch = start.patch;
    let mut y = flatten(&start.coords, frame.as_ref());
    let mut t = 0.0;
    let mut h = 1e-3;
    let mut k1 = rhs(setup, patch, &y)?;
    let mut samples = Vec::new();
    if let Some(f) = frame {
        samples.push(FrameSample { s: 0.0, point: start.clone(), frame: f });
    }
    let mut next_out = 1usize;
    let ncrit = setup.critical_points.len();
    let mut inside: Vec<Option<(f64, DVector<f64>)>> = vec![None; ncrit];
    let mut in_source = true;
    let mut passes = Vec::new();
    let ambient_crit: Vec<DVector<f64>> = setup.critical_points.iter().map(|c| c.ambient.clone()).collect();
    loop {
        if t > cfg.horizon {
            return Err(Error::NoCapture(setup.critical_points[source].id.clone()));
        }
        if h < scfg.h_min {
            return Err(Error::StepUnderflow(t));
        }
        let mut f = |_: f64, yy: &DVector<f64>| rhs(setup, patch, yy);
        let step = match try_step(&mut f, t, &y, &k1, h, &scfg) {
            Ok(r) => r,
            Err(Error::OutOfAtlas) => {
                h *= 0.5;
                continue;
            }
            Err(e) => return Err(e),
        };
        if step.err > 1.0 {
            h = next_step_size(h, step.err, &scfg).min(0.5 * h);
            continue;
        }
        let (x1, _) = unflatten(&step.y1, n);
        let pt1 = ChartPoint::new(patch, x1);
        let amb = match setup.ambient(&pt1) {
            Ok(a) => a,
            Err(_) => {
                h *= 0.5;
                continue;
            }
        };
        if record {
            while (next_out as f64) * cfg.sample_step <= t + h {
                let s = next_out as f64 * cfg.sample_step;
                let (xs, fs) = unflatten(&step.dense.eval(s), n);
                samples.push(FrameSample {
                    s,
                    point: ChartPoint::new(patch, xs),
                    frame: fs.unwrap(),
                });
                next_out += 1;
            }
        }
        t += h;
        y = step.y1;
        k1 = step.k7;
        h = next_step_size(h, step.err, &scfg);

        let mut pt = pt1;
        if setup.comfort(&pt) < 0.0 {
            let target = setup.locate(&amb)?;
            let (xn, m) = setup.transition_jacobian(&pt, target.patch).ok_or(Error::OutOfAtlas)?;
            let (_, fr) = unflatten(&y, n);
            y = flatten(&xn, fr.map(|e| &m * e).as_ref());
            patch = target.patch;
            pt = ChartPoint::new(patch, xn);
            k1 = rhs(setup, patch, &y)?;
        }

        for c in 0..ncrit {
            let rho = setup.normal_charts[c].radius;
            if (&amb - &ambient_crit[c]).norm() > 3.0 * rho {
                if c == source {
                    in_source = false;
                }
                if let Some((d, xi)) = inside[c].take() {
                    passes.push(exit_pass(setup, c, d, &xi));
                }
                continue;
            }
            let Some(xi) = setup.normal_coords(c, &pt) else { continue };
            let d = xi.norm();
            if c == source {
                if d > rho {
                    in_source = false;
                }
                if in_source {
                    continue;
                }
            }
            if d <= cfg.capture_radius * rho && c != source {
                return Ok(FlowCurve {
                    source,
                    start,
                    captured_by: c,
                    end_s: t,
                    end_point: pt,
                    passes,
                    samples,
                });
            }
            match (&mut inside[c], d < rho) {
                (Some((m, _)), true) => *m = m.min(d),
                (slot @ None, true) => *slot = Some((d, xi.clone())),
                (slot @ Some(_), false) => {
                    let (m, _) = slot.take().unwrap();
                    passes.push(exit_pass(setup, c, m, &xi));
                }
                (None, false) => {}
            }
        }
    }
}

fn exit_pass(setup: &MorseSetup, crit: usize, min_dist: f64, xi: &DVector<f64>) -> NearPass {
    let k = setup.critical_points[crit].morse_index;
    NearPass {
        crit,
        min_dist,
        exit_signs: (0..k).map(|i| if xi[i] >= 0.0 { 1 } else { -1 }).collect(),
    }
}

/// Unit direction in the unstable eigenspace of `source` (normal coordinates)
/// for a sweep parameter. Index one uses `angle` 0 or pi for the two signs.
pub fn unstable_direction(setup: &MorseSetup, source: usize, angle: f64) -> DVector<f64> {
    let n = setup.dim();
    let k = setup.critical_points[source].morse_index;
    let mut xi = DVector::zeros(n);
    match k {
        1 => xi[0] = if angle.cos() >= 0.0 { 1.0 } else { -1.0 },
        _ => {
            xi[0] = angle.cos();
            xi[1] = angle.sin();
        }
    }
    xi
}

fn start_point(setup: &MorseSetup, source: usize, angle: f64, cfg: &FlowConfig) -> (ChartPoint, DVector<f64>) {
    let ch = &setup.normal_charts[source];
    let dir = unstable_direction(setup, source, angle);
    (ch.from_normal(&(&dir * (cfg.shoot_offset * ch.radius))), dir)
}

/// Shoot from `source` in the unstable direction given by `angle`.
pub fn shoot(setup: &MorseSetup, source: usize, angle: f64, cfg: &FlowConfig) -> Result<FlowCurve> {
    let (start, _) = start_point(setup, source, angle, cfg);
    integrate_flow(setup, source, start, None, cfg)
}

/// Shoot and keep a parallel orthonormal frame plus regular samples. The
/// frame starts as the eigenframe of the source, which is orthonormal there.
pub fn shoot_with_frame(setup: &MorseSetup, source: usize, angle: f64, cfg: &FlowConfig) -> Result<FlowCurve> {
    let (start, _) = start_point(setup, source, angle, cfg);
    let loc = setup.local(&start)?;
    let frame = orthonormalize(setup.normal_charts[source].frame(), &loc.metric);
    integrate_flow(setup, source, start, Some(frame), cfg)
}

/// Gram–Schmidt with respect to the metric `g`, keeping orientation.
pub fn orthonormalize(e: &DMatrix<f64>, g: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = e.clone();
    for j in 0..e.ncols() {
        let mut v = e.column(j).into_owned();
        for i in 0..j {
            let u = out.column(i).into_owned();
            let c = (u.transpose() * g * &v)[0];
            v -= u * c;
        }
        let nv = (v.transpose() * g * &v)[0].sqrt();
        out.set_column(j, &(v / nv));
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrajSample {
    pub s: f64,
    pub point: ChartPoint,
    pub ambient: DVector<f64>,
    /// `du/ds` in patch coordinates.
    pub velocity: DVector<f64>,
    /// Parallel orthonormal frame, columns in patch coordinates.
    pub frame: DMatrix<f64>,
    pub f: f64,
    pub grad_norm2: f64,
    /// Hessian operator in the frame: symmetric matrix `E^T Hess E`.
    pub hess_frame: DMatrix<f64>,
}

impl TrajSample {
    /// Velocity in frame components.
    pub fn velocity_frame(&self, metric: &DMatrix<f64>) -> DVector<f64> {
        self.frame.transpose() * metric * &self.velocity
    }
}

/// Normalisation data: `s = -l` and `s = l` are where the trajectory crosses
/// the levels `f(source) - eps` and `f(target) + eps`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Gauge {
    pub epsilon: f64,
    pub half_length: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub source: usize,
    pub target: usize,
    /// Sweep parameter of the shooting direction.
    pub angle: f64,
    pub samples: Vec<TrajSample>,
    pub gauge: Option<Gauge>,
    /// Largest deviation of the parallel frame from orthonormality.
    pub frame_drift: f64,
}

impl Trajectory {
    /// Re-integrate the shot with a parallel frame and build samples.
    pub fn from_shot(setup: &MorseSetup, id: String, source: usize, angle: f64, cfg: &FlowConfig) -> Result<Self> {
        let curve = shoot_with_frame(setup, source, angle, cfg)?;
        Self::from_curve(setup, id, angle, &curve)
    }

    pub fn from_curve(setup: &MorseSetup, id: String, angle: f64, curve: &FlowCurve) -> Result<Self> {
        if curve.samples.len() < 8 {
            return Err(Error::TrajectoryTooShort(curve.samples.len()));
        }
        let n = setup.dim();
        let mut drift: f64 = 0.0;
        let samples = curve
            .samples
            .iter()
            .map(|fs| {
                let loc = setup.local(&fs.point)?;
                let g = fs.frame.transpose() * &loc.metric * &fs.frame;
                drift = drift.max((g - DMatrix::identity(n, n)).amax());
                let hf = fs.frame.transpose() * &loc.hess * &fs.frame;
                Ok(TrajSample {
                    s: fs.s,
                    point: fs.point.clone(),
                    ambient: loc.jet.point.clone(),
                    velocity: -&loc.grad,
                    frame: fs.frame.clone(),
                    f: loc.f,
                    grad_norm2: loc.grad_norm2(),
                    hess_frame: (&hf + hf.transpose()) * 0.5,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            id,
            source: curve.source,
            target: curve.captured_by,
            angle,
            samples,
            gauge: None,
            frame_drift: drift,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn step(&self) -> f64 {
        self.samples[1].s - self.samples[0].s
    }

    pub fn energy(&self) -> f64 {
        self.samples[0].f - self.samples[self.len() - 1].f
    }

    /// Composite Simpson quadrature of `|grad f|^2` over the samples.
    pub fn action(&self) -> f64 {
        let h = self.step();
        let m = self.len() - 1;
        let g = |i: usize| self.samples[i].grad_norm2;
        let even = m - m % 2;
        let mut acc = g(0) + g(even);
        for i in 1..even {
            acc += if i % 2 == 1 { 4.0 * g(i) } else { 2.0 * g(i) };
        }
        let mut total = acc * h / 3.0;
        if even < m {
            total += h / 12.0 * (-g(m - 2) + 8.0 * g(m - 1) + 5.0 * g(m));
        }
        total
    }

    /// Time at which `f` crosses `level`, using cubic Hermite interpolation of
    /// `f` with `df/ds = -|grad f|^2`.
    pub fn level_crossing(&self, level: f64) -> Result<f64> {
        for w in self.samples.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            if (a.f - level) * (b.f - level) <= 0.0 && a.f != b.f {
                let h = b.s - a.s;
                let herm = |t: f64| {
                    let (t2, t3) = (t * t, t * t * t);
                    (2.0 * t3 - 3.0 * t2 + 1.0) * a.f + (t3 - 2.0 * t2 + t) * h * (-a.grad_norm2) + (-2.0 * t3 + 3.0 * t2) * b.f + (t3 - t2) * h * (-b.grad_norm2)
                };
                let (mut lo, mut hi) = (0.0, 1.0);
                for _ in 0..80 {
                    let mid = 0.5 * (lo + hi);
                    if (herm(mid) - level) * (herm(lo) - level) <= 0.0 {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                return Ok(a.s + 0.5 * (lo + hi) * h);
            }
        }
        Err(Error::LevelNotReached(level))
    }

    /// Shift the parameter by `ds`.
    pub fn shifted(&self, ds: f64) -> Self {
        let mut t = self.clone();
        for s in &mut t.samples {
            s.s += ds;
        }
        t
    }

    /// Restrict to samples whose `s` lies in `[a, b]`.
    pub fn window(&self, a: f64, b: f64) -> Self {
        let mut t = self.clone();
        t.samples.retain(|s| s.s >= a - 1e-12 && s.s <= b + 1e-12);
        t
    }

    /// CSV with columns `s, patch, x_i..., X_j...`.
    pub fn to_csv(&self) -> String {
        let n = self.samples[0].point.coords.len();
        let m = self.samples[0].ambient.len();
        let mut out = String::from("s,patch");
        for i in 0..n {
            out += &format!(",x{i}");
        }
        for j in 0..m {
            out += &format!(",X{j}");
        }
        out.push('\n');
        for s in &self.samples {
            out += &format!("{:.12},{}", s.s, s.point.patch);
            for v in s.point.coords.iter().chain(s.ambient.iter()) {
                out += &format!(",{v:.12}");
            }
            out.push('\n');
        }
        out
    }

    /// Symmetric Hausdorff distance between the ambient sample sets.
    pub fn hausdorff(&self, other: &Self) -> f64 {
        let one = |a: &Self, b: &Self| {
            a.samples
                .iter()
                .step_by(4)
                .map(|p| b.samples.iter().map(|q| (&p.ambient - &q.ambient).norm()).fold(f64::INFINITY, f64::min))
                .fold(0.0, f64::max)
        };
        one(self, other).max(one(other, self))
    }
}

/// Default normalisation level: a twentieth of the smallest critical-value gap.
pub fn default_epsilon(setup: &MorseSetup) -> f64 {
    0.05 * setup.min_critical_gap()
}

/// Translate `traj` so that it crosses `f(source) - eps` at `-l` and
/// `f(target) + eps` at `+l`.
pub fn normalize_representative(setup: &MorseSetup, traj: &Trajectory, eps: f64) -> Result<Trajectory> {
    let gap = setup.min_critical_gap();
    if !(eps > 0.0 && eps < gap) {
        return Err(Error::EpsilonTooLarge { eps, gap });
    }
    let fp = setup.critical_points[traj.source].value;
    let fq = setup.critical_points[traj.target].value;
    if eps >= fp - fq {
        return Err(Error::EpsilonTooLarge { eps, gap: fp - fq });
    }
    let sa = traj.level_crossing(fp - eps)?;
    let sb = traj.level_crossing(fq + eps)?;
    let mut out = traj.shifted(-0.5 * (sa + sb));
    out.gauge = Some(Gauge {
        epsilon: eps,
        half_length: 0.5 * (sb - sa),
    });
    Ok(out)
}

/// Change of the itinerary along the unstable circle, refined to a trajectory
/// captured by a saddle.
#[derive(Clone, Debug)]
pub struct SweepBoundary {
    pub angle: f64,
    pub curve: FlowCurve,
}

/// End of a one-parameter family: itinerary of a probe shot close to the
/// boundary angle.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FamilyEnd {
    pub boundary_angle: f64,
    pub probe_angle: f64,
    /// Critical points visited: source, close passes, terminal.
    pub chain: Vec<usize>,
    pub exit_signs: Vec<Vec<i8>>,
    pub pass_distances: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SweepArc {
    pub terminal: usize,
    /// Angles of sweep samples in the arc, in increasing order.
    pub angles: Vec<f64>,
    /// Closest saddle pass of each sample shot, in chart radii.
    pub clearances: Vec<f64>,
    pub closed: bool,
    pub ends: Vec<FamilyEnd>,
}

/// Everything found by shooting from one source.
#[derive(Clone, Debug)]
pub struct SourceSweep {
    pub source: usize,
    /// Isolated captures: `(angle, curve)`.
    pub isolated: Vec<(f64, FlowCurve)>,
    pub arcs: Vec<SweepArc>,
    pub spurious_boundaries: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Signature {
    terminal: usize,
    passes: Vec<(usize, Vec<i8>)>,
}

fn signature(setup: &MorseSetup, c: &FlowCurve) -> Signature {
    Signature {
        terminal: c.captured_by,
        passes: c.close_passes(setup, 0.5).into_iter().map(|p| (p.crit, p.exit_signs.clone())).collect(),
    }
}

pub fn sweep_source(setup: &MorseSetup, source: usize, cfg: &FlowConfig) -> Result<SourceSweep> {
    let k = setup.critical_points[source].morse_index;
    let mut out = SourceSweep {
        source,
        isolated: Vec::new(),
        arcs: Vec::new(),
        spurious_boundaries: 0,
    };
    match k {
        0 => Ok(out),
        1 => {
            for angle in [0.0, PI] {
                out.isolated.push((angle, shoot(setup, source, angle, cfg)?));
            }
            Ok(out)
        }
        2 => sweep_circle(setup, source, cfg, out),
        _ => Err(Error::UnsupportedIndex(k)),
    }
}

fn sweep_circle(setup: &MorseSetup, source: usize, cfg: &FlowConfig, mut out: SourceSweep) -> Result<SourceSweep> {
    let m = cfg.sweep_directions.max(8);
    let angles: Vec<f64> = (0..m).map(|j| 2.0 * PI * j as f64 / m as f64).collect();
    let shots: Vec<FlowCurve> = angles.par_iter().map(|&a| shoot(setup, source, a, cfg)).collect::<Result<_>>()?;
    let is_saddle = |c: usize| setup.critical_points[c].morse_index > 0;
    let sigs: Vec<Signature> = shots.iter().map(|c| signature(setup, c)).collect();

    let intervals: Vec<usize> = (0..m)
        .filter(|&j| sigs[j] != sigs[(j + 1) % m] && !is_saddle(shots[j].captured_by) && !is_saddle(shots[(j + 1) % m].captured_by))
        .collect();
    let found: Vec<(Vec<SweepBoundary>, usize)> = intervals
        .par_iter()
        .map(|&j| {
            let hi = if j + 1 == m { 2.0 * PI } else { angles[j + 1] };
            bisect(setup, source, cfg, angles[j], sigs[j].clone(), hi, sigs[(j + 1) % m].clone())
        })
        .collect::<Result<_>>()?;
    let mut boundaries: Vec<SweepBoundary> = Vec::new();
    for (bs, spurious) in found {
        out.spurious_boundaries += spurious;
        boundaries.extend(bs);
    }
    for (j, c) in shots.iter().enumerate() {
        if is_saddle(c.captured_by) {
            boundaries.push(SweepBoundary { angle: angles[j], curve: c.clone() });
        }
    }
    boundaries.sort_by(|a, b| a.angle.total_cmp(&b.angle));
    boundaries.dedup_by(|a, b| (a.angle - b.angle).abs() < 1e-6);

    let minimum_shot = |j: usize| !is_saddle(shots[j].captured_by);
    let clearance = |j: usize| {
        shots[j]
            .passes
            .iter()
            .filter(|p| is_saddle(p.crit))
            .map(|p| p.min_dist / setup.normal_charts[p.crit].radius)
            .fold(f64::INFINITY, f64::min)
    };
    let index_of = |a: f64| ((a / (2.0 * PI) * m as f64).round() as usize) % m;
    if boundaries.is_empty() {
        out.arcs.push(SweepArc {
            terminal: shots[0].captured_by,
            angles: angles.clone(),
            clearances: (0..m).map(clearance).collect(),
            closed: true,
            ends: Vec::new(),
        });
    } else {
        let nb = boundaries.len();
        for b in 0..nb {
            let lo = boundaries[b].angle;
            let hi = if b + 1 < nb { boundaries[b + 1].angle } else { boundaries[0].angle + 2.0 * PI };
            let arc_angles: Vec<f64> = (0..2 * m)
                .map(|j| 2.0 * PI * j as f64 / m as f64)
                .filter(|&a| a > lo + 1e-9 && a < hi - 1e-9)
                .filter(|&a| minimum_shot(index_of(a)))
                .collect();
            if arc_angles.is_empty() {
                continue;
            }
            let terminal = shots[index_of(arc_angles[0])].captured_by;
            let ends = vec![family_end(setup, source, cfg, lo, 1.0)?, family_end(setup, source, cfg, hi, -1.0)?];
            out.arcs.push(SweepArc {
                terminal,
                clearances: arc_angles.iter().map(|&a| clearance(index_of(a))).collect(),
                angles: arc_angles,
                closed: false,
                ends,
            });
        }
    }
    out.isolated = boundaries.into_iter().map(|b| (b.angle.rem_euclid(2.0 * PI), b.curve)).collect();
    Ok(out)
}

fn bisect(setup: &MorseSetup, source: usize, cfg: &FlowConfig, mut lo: f64, s_lo: Signature, mut hi: f64, s_hi: Signature) -> Result<(Vec<SweepBoundary>, usize)> {
    let is_saddle = |c: usize| setup.critical_points[c].morse_index > 0;
    while hi - lo > cfg.bisection_tolerance {
        let mid = 0.5 * (lo + hi);
        let c = shoot(setup, source, mid, cfg)?;
        if is_saddle(c.captured_by) {
            return Ok((vec![SweepBoundary { angle: mid, curve: c }], 0));
        }
        let s = signature(setup, &c);
        if s == s_lo {
            lo = mid;
        } else if s == s_hi {
            hi = mid;
        } else {
            let (mut a, sa) = bisect(setup, source, cfg, lo, s_lo, mid, s.clone())?;
            let (b, sb) = bisect(setup, source, cfg, mid, s, hi, s_hi)?;
            a.extend(b);
            return Ok((a, sa + sb));
        }
    }
    Ok((Vec::new(), 1))
}

fn family_end(setup: &MorseSetup, source: usize, cfg: &FlowConfig, boundary: f64, side: f64) -> Result<FamilyEnd> {
    let mut last = None;
    for off in [1e-3, 1e-5, 1e-7] {
        let a = boundary + side * off;
        let c = shoot(setup, source, a, cfg)?;
        if setup.critical_points[c.captured_by].morse_index > 0 {
            break;
        }
        last = Some((a, c));
    }
    let (probe_angle, c) = match last {
        Some(x) => x,
        None => {
            let a = boundary + side * 1e-2;
            (a, shoot(setup, source, a, cfg)?)
        }
    };
    let close = c.close_passes(setup, 0.1);
    let mut chain = vec![source];
    chain.extend(close.iter().map(|p| p.crit));
    chain.push(c.captured_by);
    Ok(FamilyEnd {
        boundary_angle: boundary.rem_euclid(2.0 * PI),
        probe_angle: probe_angle.rem_euclid(2.0 * PI),
        chain,
        exit_signs: close.iter().map(|p| p.exit_signs.clone()).collect(),
        pass_distances: close.iter().map(|p| p.min_dist).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentKind {
    Isolated,
    Family,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModuliComponent {
    pub id: String,
    pub kind: ComponentKind,
    pub members: Vec<Trajectory>,
    pub near_breaking: bool,
    pub closed: bool,
    /// For isolated components from an index-one source: sign of the
    /// unstable direction it leaves along.
    pub departure: Option<i8>,
    pub ends: Vec<FamilyEnd>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModuliSpace {
    pub source: usize,
    pub target: usize,
    pub expected_dim: i64,
    pub components: Vec<ModuliComponent>,
}

impl ModuliSpace {
    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn trajectories(&self) -> impl Iterator<Item = &Trajectory> {
        self.components.iter().flat_map(|c| c.members.iter())
    }
}

pub fn moduli_label(setup: &MorseSetup, p: usize, q: usize) -> String {
    format!("{}->{}", setup.critical_points[p].id, setup.critical_points[q].id)
}

/// Collect the components of `M(source, target)` from a sweep, building
/// normalised trajectories for every stored member.
pub fn moduli_from_sweep(setup: &MorseSetup, sweep: &SourceSweep, target: usize, eps: f64, cfg: &FlowConfig) -> Result<ModuliSpace> {
    let p = sweep.source;
    let cp = &setup.critical_points[p];
    let cq = &setup.critical_points[target];
    let label = moduli_label(setup, p, target);
    let mut components = Vec::new();

    let mut isolated: Vec<(f64, &FlowCurve)> = sweep.isolated.iter().filter(|(_, c)| c.captured_by == target).map(|(a, c)| (*a, c)).collect();
    isolated.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut kept: Vec<Trajectory> = Vec::new();
    for (angle, curve) in isolated {
        let id = format!("{label}#{}", kept.len());
        let t = normalize_representative(setup, &Trajectory::from_shot(setup, id, p, angle, cfg)?, eps)?;
        if kept.iter().any(|k| k.hausdorff(&t) < cfg.dedup_distance) {
            continue;
        }
        let near = !curve.close_passes(setup, cfg.near_breaking).is_empty();
        let departure = (cp.morse_index == 1).then_some(if angle.cos() >= 0.0 { 1 } else { -1 });
        kept.push(t.clone());
        components.push(ModuliComponent {
            id: t.id.clone(),
            kind: ComponentKind::Isolated,
            members: vec![t],
            near_breaking: near,
            closed: false,
            departure,
            ends: Vec::new(),
        });
    }

    for arc in sweep.arcs.iter().filter(|a| a.terminal == target) {
        let ci = components.len();
        let id = format!("{label}#{ci}");
        let clear: Vec<f64> = arc.angles.iter().zip(&arc.clearances).filter(|(_, c)| **c >= cfg.member_clearance).map(|(a, _)| *a).collect();
        let pool = if clear.is_empty() { &arc.angles } else { &clear };
        let count = cfg.family_samples.max(1).min(pool.len());
        let picks: Vec<f64> = (0..count).map(|i| pool[(2 * i + 1) * pool.len() / (2 * count)]).collect();
        let members = picks
            .par_iter()
            .enumerate()
            .map(|(i, &a)| normalize_representative(setup, &Trajectory::from_shot(setup, format!("{id}/{i}"), p, a, cfg)?, eps))
            .collect::<Result<Vec<_>>>()?;
        components.push(ModuliComponent {
            id,
            kind: ComponentKind::Family,
            members,
            near_breaking: false,
            closed: arc.closed,
            departure: None,
            ends: arc.ends.clone(),
        });
    }

    Ok(ModuliSpace {
        source: p,
        target,
        expected_dim: cp.morse_index as i64 - cq.morse_index as i64 - 1,
        components,
    })
}

/// Compute `M(p, q)` from scratch.
pub fn find_moduli(setup: &MorseSetup, p: &str, q: &str, cfg: &FlowConfig) -> Result<ModuliSpace> {
    let (pi, qi) = (setup.crit_index(p)?, setup.crit_index(q)?);
    if setup.critical_points[pi].value <= setup.critical_points[qi].value {
        return Err(Error::EmptyByEnergy { from: p.to_string(), to: q.to_string() });
    }
    let sweep = sweep_source(setup, pi, cfg)?;
    moduli_from_sweep(setup, &sweep, qi, default_epsilon(setup), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::make_builtin_setup;

    fn quick() -> FlowConfig {
        FlowConfig { sweep_directions: 72, family_samples: 4, ..FlowConfig::default() }
    }

    #[test]
    fn sphere_maximum_flows_to_minimum() {
        let s = make_builtin_setup("round_sphere").unwrap();
        let m = find_moduli(&s, "max", "min", &quick()).unwrap();
        assert_eq!(m.expected_dim, 1);
        assert_eq!(m.components.len(), 1);
        let c = &m.components[0];
        assert_eq!(c.kind, ComponentKind::Family);
        assert!(c.closed);
        assert_eq!(c.members.len(), 4);
        for t in &c.members {
            // meridians: the horizontal direction of travel is fixed
            let a = &t.samples[t.len() / 2].ambient;
            let b = &t.samples[t.len() / 4].ambient;
            assert!((a[0] * b[1] - a[1] * b[0]).abs() < 1e-6);
        }
    }

    #[test]
    fn torus_saddle_flows_to_saddle_both_ways() {
        let s = make_builtin_setup("upright_torus").unwrap();
        let q = s.crit_index("q").unwrap();
        let r = s.crit_index("r").unwrap();
        for angle in [0.0, std::f64::consts::PI] {
            let c = shoot(&s, q, angle, &quick()).unwrap();
            assert_eq!(c.captured_by, r);
        }
        let m = find_moduli(&s, "q", "r", &quick()).unwrap();
        assert_eq!(m.expected_dim, -1);
        assert_eq!(m.components.len(), 2);
        assert_eq!(m.components.iter().map(|c| c.departure.unwrap()).sum::<i8>(), 0);
    }

    #[test]
    fn torus_top_moduli() {
        let s = make_builtin_setup("upright_torus").unwrap();
        let pq = find_moduli(&s, "p", "q", &quick()).unwrap();
        assert_eq!(pq.components.len(), 2);
        assert!(pq.components.iter().all(|c| c.kind == ComponentKind::Isolated && !c.near_breaking));
        let pr = find_moduli(&s, "p", "r", &quick()).unwrap();
        assert!(pr.is_empty());
        assert!(matches!(find_moduli(&s, "r", "p", &quick()), Err(Error::EmptyByEnergy { .. })));
    }

    fn sample_trajectory() -> (MorseSetup, Trajectory) {
        let s = make_builtin_setup("upright_torus").unwrap();
        let q = s.crit_index("q").unwrap();
        let t = Trajectory::from_shot(&s, "t".into(), q, 0.0, &FlowConfig::default()).unwrap();
        (s, t)
    }

    #[test]
    fn normalisation_is_idempotent_and_shift_invariant() {
        let (s, t) = sample_trajectory();
        let eps = default_epsilon(&s);
        let a = normalize_representative(&s, &t, eps).unwrap();
        let b = normalize_representative(&s, &a, eps).unwrap();
        let c = normalize_representative(&s, &t.shifted(3.7), eps).unwrap();
        for other in [&b, &c] {
            for (x, y) in a.samples.iter().zip(&other.samples) {
                assert!((x.s - y.s).abs() < 1e-9);
            }
        }
        let g = a.gauge.unwrap();
        let fq = s.critical_points[t.source].value;
        let fr = s.critical_points[t.target].value;
        assert!((a.level_crossing(fq - eps).unwrap() + g.half_length).abs() < 1e-9);
        assert!((a.level_crossing(fr + eps).unwrap() - g.half_length).abs() < 1e-9);
        assert!(matches!(normalize_representative(&s, &t, 10.0), Err(Error::EpsilonTooLarge { .. })));
    }

    #[test]
    fn energy_equals_action() {
        let (_, t) = sample_trajectory();
        assert!((t.energy() - t.action()).abs() < 1e-6);
        assert!(t.frame_drift < 1e-6);
        assert!((t.energy() - 2.0).abs() < 1e-3);
    }

    #[test]
    fn windowing_and_csv() {
        let (_, t) = sample_trajectory();
        let w = t.window(t.samples[10].s, t.samples[19].s);
        assert_eq!(w.len(), 10);
        let csv = t.to_csv();
        assert!(csv.starts_with("s,patch,x0,x1,X0,X1,X2\n"));
        assert_eq!(csv.lines().count(), t.len() + 1);
        assert!(t.hausdorff(&t) == 0.0);
        assert!(t.hausdorff(&w) > 0.0);
    }

    #[test]
    fn orthonormalize_respects_metric() {
        let g = DMatrix::from_row_slice(2, 2, &[3.0, 0.4, 0.4, 0.5]);
        let e = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, -0.3, 1.0]);
        let o = orthonormalize(&e, &g);
        assert!((o.transpose() * &g * &o - DMatrix::identity(2, 2)).amax() < 1e-14);
        assert!(o.determinant() * e.determinant() > 0.0);
    }
}
