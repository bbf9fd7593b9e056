//! Embedded model manifolds, height functions, critical points and normal
//! charts.
//!
//! Every model is a submanifold of Euclidean space described by coordinate
//! patches. The metric is the induced one and the Morse function is the height
//! `f = <a, X>` for a fixed unit vector `a`, so all geometric quantities follow
//! from the embedding jet (position, first and second derivatives).

mod models;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use models::{probe_directions, Implicit, LevelFunction, Lemniscate, Sphere, SurfaceSpec, Torus};

use crate::error::{Error, Result};

/// Embedding value and derivatives at a point of a patch. `second[k]` is the
/// partial derivative of `jac` in the `k`-th coordinate.
#[derive(Clone, Debug)]
pub struct Jet {
    pub point: DVector<f64>,
    pub jac: DMatrix<f64>,
    pub second: Vec<DMatrix<f64>>,
}

pub trait Surface: Send + Sync + std::fmt::Debug {
    fn dim(&self) -> usize;
    fn ambient_dim(&self) -> usize;
    fn patch_count(&self) -> usize;
    /// Fails with [`Error::OutOfAtlas`] outside the patch domain.
    fn jet(&self, patch: usize, x: &DVector<f64>) -> Result<Jet>;
    /// Coordinates of an ambient point of the manifold in `patch`, if covered.
    fn chart_inverse(&self, patch: usize, ambient: &DVector<f64>) -> Option<DVector<f64>>;
    /// Positive on the part of the patch where integration may continue.
    fn comfort(&self, patch: usize, x: &DVector<f64>) -> f64;
    fn candidate_patches(&self, _ambient: &DVector<f64>) -> Vec<usize> {
        (0..self.patch_count()).collect()
    }
    /// Starting guesses for the critical points of the height function.
    fn seeds(&self) -> Vec<(usize, DVector<f64>)>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChartPoint {
    pub patch: usize,
    pub coords: DVector<f64>,
}

impl ChartPoint {
    pub fn new(patch: usize, coords: DVector<f64>) -> Self {
        Self { patch, coords }
    }
}

/// Metric, height and their derivatives at one point, in patch coordinates.
#[derive(Clone, Debug)]
pub struct LocalGeometry {
    pub jet: Jet,
    pub f: f64,
    pub df: DVector<f64>,
    pub metric: DMatrix<f64>,
    pub metric_inv: DMatrix<f64>,
    /// Gradient vector field (the flow is `x' = -grad`).
    pub grad: DVector<f64>,
    /// Covariant Hessian as a symmetric bilinear form.
    pub hess: DMatrix<f64>,
    /// Plain second partials of `f` in the patch.
    pub coord_hess: DMatrix<f64>,
}

impl LocalGeometry {
    pub fn new(jet: Jet, height: &DVector<f64>) -> Result<Self> {
        let n = jet.jac.ncols();
        let metric = jet.jac.transpose() * &jet.jac;
        let metric_inv = metric.clone().cholesky().ok_or(Error::OutOfAtlas)?.inverse();
        let df = jet.jac.transpose() * height;
        let grad = &metric_inv * &df;
        let normal_part = height - &jet.jac * &grad;
        let f = height.dot(&jet.point);
        let mut hess = DMatrix::zeros(n, n);
        let mut coord_hess = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let col = jet.second[i].column(j);
                hess[(i, j)] = col.dot(&normal_part);
                coord_hess[(i, j)] = col.dot(height);
            }
        }
        hess = (&hess + hess.transpose()) * 0.5;
        Ok(Self {
            jet,
            f,
            df,
            metric,
            metric_inv,
            grad,
            hess,
            coord_hess,
        })
    }

    /// Christoffel contraction `Gamma(u, w)` (a coordinate vector).
    pub fn christoffel(&self, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        let mut acc = DVector::zeros(self.jet.point.len());
        for (k, sk) in self.jet.second.iter().enumerate() {
            if u[k] != 0.0 {
                acc += sk * w * u[k];
            }
        }
        &self.metric_inv * (self.jet.jac.transpose() * acc)
    }

    /// Covariant derivative of the gradient field in direction `w`.
    pub fn hess_operator(&self) -> DMatrix<f64> {
        &self.metric_inv * &self.hess
    }

    pub fn grad_norm2(&self) -> f64 {
        self.df.dot(&self.grad)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CriticalPoint {
    pub id: String,
    pub location: ChartPoint,
    pub ambient: DVector<f64>,
    pub morse_index: usize,
    pub value: f64,
    /// Eigenvalues of the Hessian operator, ascending.
    pub eigenvalues: Vec<f64>,
    /// Matching eigenvectors as metric-orthonormal columns in patch coordinates.
    pub eigenvectors: DMatrix<f64>,
}

impl CriticalPoint {
    pub fn unstable_eigenvalues(&self) -> &[f64] {
        &self.eigenvalues[..self.morse_index]
    }
}

/// Linear eigenframe coordinates `x = x_c + V xi` around a critical point,
/// with the measured deviation from the quadratic model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NormalChart {
    pub crit: usize,
    pub radius: f64,
    pub f_residual: f64,
    pub metric_residual: f64,
    pub patch: usize,
    center: DVector<f64>,
    frame: DMatrix<f64>,
    frame_inv: DMatrix<f64>,
}

impl NormalChart {
    pub fn residual(&self) -> f64 {
        self.f_residual.max(self.metric_residual)
    }

    pub fn from_normal(&self, xi: &DVector<f64>) -> ChartPoint {
        ChartPoint::new(self.patch, &self.center + &self.frame * xi)
    }

    pub fn coords_to_normal(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.frame_inv * (x - &self.center)
    }

    pub fn vector_to_normal(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.frame_inv * v
    }

    pub fn frame(&self) -> &DMatrix<f64> {
        &self.frame
    }
}

/// A model manifold with height function, its critical points and normal
/// charts. Immutable after construction.
#[derive(Clone, Debug)]
pub struct MorseSetup {
    pub name: String,
    pub spec: SurfaceSpec,
    surface: Arc<dyn Surface>,
    height: DVector<f64>,
    pub critical_points: Vec<CriticalPoint>,
    pub normal_charts: Vec<NormalChart>,
}

pub const DEFAULT_CHART_RADIUS: f64 = 0.1;

pub fn builtin_spec(name: &str) -> Result<SurfaceSpec> {
    Ok(match name {
        "upright_torus" => SurfaceSpec::Torus { major: 2.0, minor: 1.0, tilt: 0.0 },
        "tilted_torus" => SurfaceSpec::Torus { major: 2.0, minor: 1.0, tilt: 0.1 },
        "round_sphere" => SurfaceSpec::Sphere { dim: 2 },
        "upright_genus2" => SurfaceSpec::Genus2 { band: 0.85, z_scale: 3.0 },
        _ => return Err(Error::UnknownSetup(name.to_string())),
    })
}

pub const BUILTIN_SETUPS: [&str; 4] = ["upright_torus", "tilted_torus", "round_sphere", "upright_genus2"];

/// Normal-chart radius used by a named setup; the genus-two surface has
/// small patches near its critical points.
pub fn builtin_chart_radius(name: &str) -> f64 {
    match name {
        "upright_genus2" => 0.03,
        _ => DEFAULT_CHART_RADIUS,
    }
}

/// Build one of the named setups with its standard chart radius.
pub fn make_builtin_setup(name: &str) -> Result<MorseSetup> {
    MorseSetup::new(name, builtin_spec(name)?, builtin_chart_radius(name))
}

/// A setup given inline as JSON: `{"name": ..., "family": ..., <params>}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CustomSetup {
    pub name: String,
    #[serde(flatten)]
    pub spec: SurfaceSpec,
    #[serde(default)]
    pub chart_radius: Option<f64>,
}

pub fn make_custom_setup(json: &str) -> Result<MorseSetup> {
    let c: CustomSetup = serde_json::from_str(json)?;
    MorseSetup::new(&c.name, c.spec, c.chart_radius.unwrap_or(DEFAULT_CHART_RADIUS))
}

impl MorseSetup {
    pub fn new(name: &str, spec: SurfaceSpec, chart_radius: f64) -> Result<Self> {
        let surface: Arc<dyn Surface> = Arc::from(spec.build()?);
        let height = spec.height_direction();
        let mut setup = Self {
            name: name.to_string(),
            spec,
            surface,
            height,
            critical_points: Vec::new(),
            normal_charts: Vec::new(),
        };
        setup.find_critical_points()?;
        setup.normal_charts = (0..setup.critical_points.len())
            .map(|i| setup.build_normal_chart(i, chart_radius))
            .collect::<Result<_>>()?;
        Ok(setup)
    }

    /// Same manifold with normal charts of a different radius.
    pub fn with_chart_radius(&self, radius: f64) -> Result<Self> {
        let mut s = self.clone();
        s.normal_charts = (0..s.critical_points.len()).map(|i| s.build_normal_chart(i, radius)).collect::<Result<_>>()?;
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        self.surface.dim()
    }

    pub fn ambient_dim(&self) -> usize {
        self.surface.ambient_dim()
    }

    pub fn height_direction(&self) -> &DVector<f64> {
        &self.height
    }

    pub fn surface(&self) -> &dyn Surface {
        self.surface.as_ref()
    }

    pub fn chart_radius(&self) -> f64 {
        self.normal_charts.first().map_or(DEFAULT_CHART_RADIUS, |c| c.radius)
    }

    pub fn crit_index(&self, id: &str) -> Result<usize> {
        self.critical_points.iter().position(|c| c.id == id).ok_or_else(|| Error::UnknownCritical(id.to_string()))
    }

    pub fn jet(&self, pt: &ChartPoint) -> Result<Jet> {
        self.surface.jet(pt.patch, &pt.coords)
    }

    pub fn local(&self, pt: &ChartPoint) -> Result<LocalGeometry> {
        LocalGeometry::new(self.jet(pt)?, &self.height)
    }

    pub fn ambient(&self, pt: &ChartPoint) -> Result<DVector<f64>> {
        Ok(self.jet(pt)?.point)
    }

    pub fn value(&self, pt: &ChartPoint) -> Result<f64> {
        Ok(self.height.dot(&self.jet(pt)?.point))
    }

    pub fn gradient(&self, pt: &ChartPoint) -> Result<DVector<f64>> {
        Ok(self.local(pt)?.grad)
    }

    /// Coordinates of `pt` in another patch.
    pub fn coords_in(&self, pt: &ChartPoint, patch: usize) -> Option<DVector<f64>> {
        if pt.patch == patch {
            return Some(pt.coords.clone());
        }
        let amb = self.ambient(pt).ok()?;
        self.surface.chart_inverse(patch, &amb)
    }

    /// Differential of the coordinate change from `pt.patch` to `patch`.
    pub fn transition_jacobian(&self, pt: &ChartPoint, patch: usize) -> Option<(DVector<f64>, DMatrix<f64>)> {
        let y = self.coords_in(pt, patch)?;
        if pt.patch == patch {
            return Some((y, DMatrix::identity(self.dim(), self.dim())));
        }
        let old = self.jet(pt).ok()?;
        let new = self.surface.jet(patch, &y).ok()?;
        let g = new.jac.transpose() * &new.jac;
        let m = g.cholesky()?.solve(&(new.jac.transpose() * &old.jac));
        Some((y, m))
    }

    /// Move `pt` to the most comfortable patch covering it.
    pub fn rebase(&self, pt: &ChartPoint) -> Result<ChartPoint> {
        let amb = self.ambient(pt)?;
        self.locate(&amb)
    }

    pub fn comfort(&self, pt: &ChartPoint) -> f64 {
        self.surface.comfort(pt.patch, &pt.coords)
    }

    /// Chart point of an ambient point on the manifold.
    pub fn locate(&self, ambient: &DVector<f64>) -> Result<ChartPoint> {
        let mut best: Option<(f64, ChartPoint)> = None;
        for p in self.surface.candidate_patches(ambient) {
            if let Some(x) = self.surface.chart_inverse(p, ambient) {
                let c = self.surface.comfort(p, &x);
                if best.as_ref().is_none_or(|(b, _)| c > *b) {
                    best = Some((c, ChartPoint::new(p, x)));
                }
            }
        }
        best.map(|(_, p)| p).ok_or(Error::OutOfAtlas)
    }

    fn find_critical_points(&mut self) -> Result<()> {
        let mut found: Vec<CriticalPoint> = Vec::new();
        for (patch, x0) in self.surface.seeds() {
            let pt = self.newton_critical(ChartPoint::new(patch, x0))?;
            let pt = self.rebase(&pt)?;
            let amb = self.ambient(&pt)?;
            if found.iter().any(|c| (&c.ambient - &amb).norm() < 1e-8) {
                continue;
            }
            let loc = self.local(&pt)?;
            let (eigenvalues, eigenvectors) = generalized_eigen(&loc.hess, &loc.metric);
            let min_abs = eigenvalues.iter().fold(f64::INFINITY, |m, l| m.min(l.abs()));
            let morse_index = eigenvalues.iter().filter(|&&l| l < 0.0).count();
            if min_abs < 1e-8 {
                return Err(Error::DegenerateCritical { id: format!("{amb}"), min_abs });
            }
            found.push(CriticalPoint {
                id: String::new(),
                location: pt,
                ambient: amb,
                morse_index,
                value: loc.f,
                eigenvalues,
                eigenvectors,
            });
        }
        found.sort_by(|a, b| b.value.total_cmp(&a.value));
        let labels = self.spec.labels(found.len());
        for (c, label) in found.iter_mut().zip(labels) {
            c.id = label;
        }
        self.critical_points = found;
        Ok(())
    }

    fn newton_critical(&self, mut pt: ChartPoint) -> Result<ChartPoint> {
        let mut res = f64::INFINITY;
        for _ in 0..60 {
            if self.comfort(&pt) < 0.0 {
                pt = self.rebase(&pt)?;
            }
            let loc = self.local(&pt)?;
            res = loc.df.norm();
            let step = loc.coord_hess.clone().lu().solve(&loc.df).ok_or(Error::CriticalNewtonFailed(res))?;
            pt.coords -= &step;
            if step.norm() < 1e-14 || res < 1e-15 {
                return Ok(pt);
            }
        }
        if res < 1e-12 {
            Ok(pt)
        } else {
            Err(Error::CriticalNewtonFailed(res))
        }
    }

    /// Build the eigenframe chart of critical point `crit` with the given
    /// radius, measuring its residual on a fixed set of probe points.
    pub fn build_normal_chart(&self, crit: usize, radius: f64) -> Result<NormalChart> {
        let c = &self.critical_points[crit];
        let frame = c.eigenvectors.clone();
        let loc = self.local(&c.location)?;
        let frame_inv = frame.transpose() * &loc.metric;
        let chart = NormalChart {
            crit,
            radius,
            f_residual: 0.0,
            metric_residual: 0.0,
            patch: c.location.patch,
            center: c.location.coords.clone(),
            frame,
            frame_inv,
        };
        let n = self.dim();
        let mut f_res: f64 = 0.0;
        let mut g_res: f64 = 0.0;
        for dir in probe_directions(n, 8, 7) {
            for frac in [0.25, 0.5, 0.75, 1.0] {
                let xi = &dir * (frac * radius);
                let pt = chart.from_normal(&xi);
                let too_large = |reason: &str| Error::ChartRadiusTooLarge {
                    id: c.id.clone(),
                    radius,
                    reason: reason.to_string(),
                };
                if self.comfort(&pt) <= 0.0 {
                    return Err(too_large("chart leaves the comfortable part of its patch"));
                }
                let l = self.local(&pt).map_err(|_| too_large("chart leaves its patch"))?;
                let quad: f64 = 0.5 * xi.iter().zip(&c.eigenvalues).map(|(x, l)| l * x * x).sum::<f64>();
                f_res = f_res.max((l.f - c.value - quad).abs());
                let g = chart.frame.transpose() * &l.metric * &chart.frame - DMatrix::identity(n, n);
                g_res = g_res.max(g.amax());
            }
        }
        Ok(NormalChart {
            f_residual: f_res,
            metric_residual: g_res,
            ..chart
        })
    }

    /// Normal coordinates of `pt` relative to critical point `crit`, if the
    /// point is covered by the patch of that chart.
    pub fn normal_coords(&self, crit: usize, pt: &ChartPoint) -> Option<DVector<f64>> {
        let ch = &self.normal_charts[crit];
        let x = self.coords_in(pt, ch.patch)?;
        Some(ch.coords_to_normal(&x))
    }

    /// Components of a tangent vector at `pt` in the eigenframe of `crit`.
    pub fn vector_in_normal(&self, crit: usize, pt: &ChartPoint, v: &DVector<f64>) -> Option<DVector<f64>> {
        let ch = &self.normal_charts[crit];
        let (_, m) = self.transition_jacobian(pt, ch.patch)?;
        Some(ch.vector_to_normal(&(m * v)))
    }

    /// Smallest gap between distinct adjacent critical values.
    pub fn min_critical_gap(&self) -> f64 {
        let mut vals: Vec<f64> = self.critical_points.iter().map(|c| c.value).collect();
        vals.sort_by(f64::total_cmp);
        vals.windows(2).map(|w| w[1] - w[0]).filter(|g| *g > 1e-9).fold(f64::INFINITY, f64::min)
    }

    pub fn euler_characteristic(&self) -> i64 {
        self.critical_points.iter().map(|c| if c.morse_index % 2 == 0 { 1 } else { -1 }).sum()
    }
}

/// Solve `H v = lambda G v` for symmetric `H` and positive definite `G`.
/// Eigenvalues ascending; eigenvectors are `G`-orthonormal columns with their
/// largest entry made positive.
pub fn generalized_eigen(h: &DMatrix<f64>, g: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let chol = g.clone().cholesky().expect("metric must be positive definite");
    let l = chol.l();
    let linv = l.clone().try_inverse().expect("invertible Cholesky factor");
    let m = &linv * h * linv.transpose();
    let m = (&m + m.transpose()) * 0.5;
    let (vals, vecs) = symmetric_eigen_sorted(&m);
    let mut v = linv.transpose() * vecs;
    for mut col in v.column_iter_mut() {
        let imax = col.iamax();
        if col[imax] < 0.0 {
            col.neg_mut();
        }
    }
    (vals, v)
}

/// Eigen-decomposition of a symmetric matrix with ascending eigenvalues.
pub fn symmetric_eigen_sorted(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = m.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..m.nrows()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = DMatrix::from_fn(m.nrows(), m.nrows(), |r, c| eig.eigenvectors[(r, order[c])]);
    (vals, vecs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::OnceLock;

    fn setups() -> &'static Vec<MorseSetup> {
        static CELL: OnceLock<Vec<MorseSetup>> = OnceLock::new();
        CELL.get_or_init(|| BUILTIN_SETUPS.iter().map(|n| make_builtin_setup(n).unwrap()).collect())
    }

    fn setup(name: &str) -> &'static MorseSetup {
        setups().iter().find(|s| s.name == name).unwrap()
    }

    #[test]
    fn critical_points_of_builtins() {
        let indices = |s: &MorseSetup| s.critical_points.iter().map(|c| c.morse_index).collect::<Vec<_>>();
        assert_eq!(indices(setup("upright_torus")), [2, 1, 1, 0]);
        assert_eq!(indices(setup("tilted_torus")), [2, 1, 1, 0]);
        assert_eq!(indices(setup("round_sphere")), [2, 0]);
        assert_eq!(indices(setup("upright_genus2")), [2, 1, 1, 1, 1, 0]);
        let values: Vec<f64> = setup("upright_torus").critical_points.iter().map(|c| c.value).collect();
        for (v, want) in values.iter().zip([3.0, 1.0, -1.0, -3.0]) {
            assert!((v - want).abs() < 1e-12);
        }
        let ids: Vec<&str> = setup("upright_torus").critical_points.iter().map(|c| c.id.as_str()).collect();
        assert_eq!(ids, ["p", "q", "r", "s"]);
    }

    #[test]
    fn euler_characteristics() {
        let chi: Vec<i64> = BUILTIN_SETUPS.iter().map(|n| setup(n).euler_characteristic()).collect();
        assert_eq!(chi, [0, 0, 2, -2]);
    }

    #[test]
    fn gradient_vanishes_at_critical_points() {
        for s in setups() {
            for c in &s.critical_points {
                let g = s.gradient(&c.location).unwrap();
                assert!(g.amax() < 1e-10, "{} {}: {}", s.name, c.id, g.amax());
                assert!((s.value(&c.location).unwrap() - c.value).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn eigenframes_are_metric_orthonormal() {
        for s in setups() {
            for c in &s.critical_points {
                let loc = s.local(&c.location).unwrap();
                let v = &c.eigenvectors;
                let gram = v.transpose() * &loc.metric * v;
                assert!((gram - DMatrix::identity(s.dim(), s.dim())).amax() < 1e-10);
                let h = v.transpose() * &loc.hess * v;
                let d = DMatrix::from_diagonal(&DVector::from_vec(c.eigenvalues.clone()));
                assert!((h - d).amax() < 1e-9);
                assert!(c.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let h = 1e-6;
        for s in setups() {
            for c in &s.critical_points {
                let mut x = c.location.clone();
                x.coords.add_scalar_mut(0.5 * s.chart_radius());
                let loc = s.local(&x).unwrap();
                for k in 0..s.dim() {
                    let mut e = DVector::zeros(s.dim());
                    e[k] = h;
                    let up = ChartPoint::new(x.patch, &x.coords + &e);
                    let dn = ChartPoint::new(x.patch, &x.coords - &e);
                    let fd = (s.value(&up).unwrap() - s.value(&dn).unwrap()) / (2.0 * h);
                    assert!((fd - loc.df[k]).abs() < 1e-7, "{} {} k={k}", s.name, c.id);
                    // metric pairing of the gradient with a coordinate vector is df
                    assert!(((&loc.metric * &loc.grad)[k] - loc.df[k]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn sphere_gradient_norm() {
        // On the unit sphere with height z, |grad f|^2 = 1 - z^2.
        let s = setup("round_sphere");
        for w in [0.0, 0.3, 1.0, 1.2] {
            let pt = ChartPoint::new(0, DVector::from_vec(vec![w, 0.0]));
            let loc = s.local(&pt).unwrap();
            assert!((loc.grad_norm2() - (1.0 - loc.f * loc.f)).abs() < 1e-14);
        }
        let equator = ChartPoint::new(1, DVector::from_vec(vec![0.6, 0.8]));
        assert!(s.value(&equator).unwrap().abs() < 1e-15);
        assert!((s.local(&equator).unwrap().grad_norm2() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn normal_charts_are_centred_and_nearly_quadratic() {
        for s in setups() {
            for (i, c) in s.critical_points.iter().enumerate() {
                let ch = &s.normal_charts[i];
                let centre = ch.from_normal(&DVector::zeros(s.dim()));
                assert!((s.value(&centre).unwrap() - c.value).abs() < 1e-14);
                let xi = s.normal_coords(i, &centre).unwrap();
                assert!(xi.amax() < 1e-14);
                let scale = c.eigenvalues.iter().fold(0.0f64, |m, l| m.max(l.abs()));
                assert!(ch.f_residual < scale * ch.radius.powi(2), "{} {}: {}", s.name, c.id, ch.f_residual);
            }
        }
    }

    #[test]
    fn locate_recovers_points() {
        for s in setups() {
            for c in &s.critical_points {
                let pt = s.locate(&c.ambient).unwrap();
                assert!((s.ambient(&pt).unwrap() - &c.ambient).amax() < 1e-10);
                assert!(s.comfort(&pt) > 0.0);
            }
        }
        let far = DVector::from_vec(vec![10.0, 10.0, 10.0]);
        assert!(matches!(setup("upright_genus2").locate(&far), Err(Error::OutOfAtlas)));
    }

    #[test]
    fn transition_jacobians_push_vectors_consistently() {
        let s = setup("upright_torus");
        let pt = ChartPoint::new(0, DVector::from_vec(vec![0.4, 0.7]));
        let v = DVector::from_vec(vec![0.3, -0.2]);
        let amb_v = s.jet(&pt).unwrap().jac * &v;
        for patch in 0..s.surface().patch_count() {
            if let Some((y, m)) = s.transition_jacobian(&pt, patch) {
                let there = s.surface().jet(patch, &y).unwrap();
                assert!((&there.point - s.ambient(&pt).unwrap()).amax() < 1e-12);
                assert!((there.jac * (m * &v) - &amb_v).amax() < 1e-12);
            }
        }
    }

    #[test]
    fn custom_setup_and_unknown_names() {
        let s = make_custom_setup(r#"{"name": "t", "family": "torus", "major": 3, "minor": 1, "tilt": 0}"#).unwrap();
        assert_eq!(s.critical_points.len(), 4);
        assert!((s.critical_points[0].value - 4.0).abs() < 1e-12);
        assert!(matches!(make_builtin_setup("klein_bottle"), Err(Error::UnknownSetup(_))));
        assert!(matches!(s.crit_index("z"), Err(Error::UnknownCritical(_))));
        assert!(matches!(setup("upright_torus").with_chart_radius(5.0), Err(Error::ChartRadiusTooLarge { .. })));
    }

    #[test]
    fn generalized_eigen_solves_pencil() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, -1.0]);
        let g = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let (vals, v) = generalized_eigen(&h, &g);
        for (k, l) in vals.iter().enumerate() {
            let col = v.column(k).into_owned();
            assert!((&h * &col - &g * &col * *l).amax() < 1e-12);
        }
        assert!((v.transpose() * &g * &v - DMatrix::identity(2, 2)).amax() < 1e-12);
    }
}
