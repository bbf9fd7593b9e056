//! Concrete embedded model manifolds.

use std::f64::consts::PI;
use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Jet, Surface};
use crate::error::{Error, Result};

/// Serializable description of a model manifold and its height direction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum SurfaceSpec {
    /// Torus of revolution about the z-axis; height is the unit vector
    /// `(cos tilt, 0, sin tilt)`.
    Torus { major: f64, minor: f64, tilt: f64 },
    /// Unit sphere in `R^(dim+1)` with the last coordinate as height.
    Sphere { dim: usize },
    /// Closed genus-two surface `P(x, y)^2 + (z_scale z)^2 = band^2` around
    /// the lemniscate `P = (x^2+y^2)^2 - 2(x^2-y^2)`, with height `x`.
    Genus2 {
        band: f64,
        #[serde(default = "default_z_scale")]
        z_scale: f64,
    },
}

fn default_z_scale() -> f64 {
    1.0
}

impl SurfaceSpec {
    pub fn build(&self) -> Result<Box<dyn Surface>> {
        match *self {
            SurfaceSpec::Torus { major, minor, tilt } => {
                if !(minor > 0.0 && major > minor) {
                    return Err(Error::InvalidParameters(format!("torus radii need major > minor > 0, got {major}, {minor}")));
                }
                if tilt.abs() >= 0.5 * PI {
                    return Err(Error::InvalidParameters(format!("tilt {tilt} must satisfy |tilt| < pi/2")));
                }
                Ok(Box::new(Torus { major, minor, tilt }))
            }
            SurfaceSpec::Sphere { dim } => {
                if dim == 0 {
                    return Err(Error::InvalidParameters("sphere dimension must be positive".into()));
                }
                Ok(Box::new(Sphere { dim }))
            }
            SurfaceSpec::Genus2 { band, z_scale } => {
                if !(band > 0.0 && band < 0.95) {
                    return Err(Error::InvalidParameters(format!("genus-two band {band} must lie in (0, 0.95)")));
                }
                if !(z_scale > 0.0) {
                    return Err(Error::InvalidParameters(format!("genus-two z_scale {z_scale} must be positive")));
                }
                Ok(Box::new(Implicit::new(Box::new(Lemniscate { band, z_scale }))))
            }
        }
    }

    pub fn height_direction(&self) -> DVector<f64> {
        match *self {
            SurfaceSpec::Torus { tilt, .. } => DVector::from_vec(vec![tilt.cos(), 0.0, tilt.sin()]),
            SurfaceSpec::Sphere { dim } => {
                let mut a = DVector::zeros(dim + 1);
                a[dim] = 1.0;
                a
            }
            SurfaceSpec::Genus2 { .. } => DVector::from_vec(vec![1.0, 0.0, 0.0]),
        }
    }

    /// Names for the critical points, listed by decreasing height.
    pub fn labels(&self, count: usize) -> Vec<String> {
        let fixed: &[&str] = match self {
            SurfaceSpec::Torus { .. } => &["p", "q", "r", "s"],
            SurfaceSpec::Sphere { .. } => &["max", "min"],
            SurfaceSpec::Genus2 { .. } => &["p", "q1", "q2", "q3", "q4", "s"],
        };
        if fixed.len() == count {
            fixed.iter().map(|s| s.to_string()).collect()
        } else {
            (0..count).map(|i| format!("c{i}")).collect()
        }
    }
}

fn wrap_near(angle: f64, center: f64) -> f64 {
    let mut d = (angle - center) % (2.0 * PI);
    if d > PI {
        d -= 2.0 * PI;
    } else if d <= -PI {
        d += 2.0 * PI;
    }
    center + d
}

/// Torus of revolution in angle coordinates `(theta, phi)`. Each angle gets two
/// overlapping windows centred at 0 and pi, giving four product patches.
#[derive(Debug)]
pub struct Torus {
    pub major: f64,
    pub minor: f64,
    pub tilt: f64,
}

impl Torus {
    fn center(patch: usize) -> (f64, f64) {
        (if patch & 1 == 0 { 0.0 } else { PI }, if patch & 2 == 0 { 0.0 } else { PI })
    }
}

impl Surface for Torus {
    fn dim(&self) -> usize {
        2
    }
    fn ambient_dim(&self) -> usize {
        3
    }
    fn patch_count(&self) -> usize {
        4
    }

    fn jet(&self, patch: usize, x: &DVector<f64>) -> Result<Jet> {
        let (ct, cp) = Self::center(patch);
        if (x[0] - ct).abs() >= PI || (x[1] - cp).abs() >= PI {
            return Err(Error::OutOfAtlas);
        }
        let (st, ctt) = x[0].sin_cos();
        let (sp, cpp) = x[1].sin_cos();
        let (big, r) = (self.major, self.minor);
        let rho = big + r * cpp;
        let point = DVector::from_vec(vec![rho * ctt, rho * st, r * sp]);
        let xt = [-rho * st, rho * ctt, 0.0];
        let xp = [-r * sp * ctt, -r * sp * st, r * cpp];
        let xtt = [-rho * ctt, -rho * st, 0.0];
        let xtp = [r * sp * st, -r * sp * ctt, 0.0];
        let xpp = [-r * cpp * ctt, -r * cpp * st, -r * sp];
        let cols = |a: [f64; 3], b: [f64; 3]| DMatrix::from_column_slice(3, 2, &[a[0], a[1], a[2], b[0], b[1], b[2]]);
        Ok(Jet {
            point,
            jac: cols(xt, xp),
            second: vec![cols(xtt, xtp), cols(xtp, xpp)],
        })
    }

    fn chart_inverse(&self, patch: usize, ambient: &DVector<f64>) -> Option<DVector<f64>> {
        let (ct, cp) = Self::center(patch);
        let theta = ambient[1].atan2(ambient[0]);
        let rho = ambient[0].hypot(ambient[1]);
        let phi = ambient[2].atan2(rho - self.major);
        let x = DVector::from_vec(vec![wrap_near(theta, ct), wrap_near(phi, cp)]);
        ((x[0] - ct).abs() < PI && (x[1] - cp).abs() < PI).then_some(x)
    }

    fn comfort(&self, patch: usize, x: &DVector<f64>) -> f64 {
        let (ct, cp) = Self::center(patch);
        0.75 * PI - (x[0] - ct).abs().max((x[1] - cp).abs())
    }

    fn seeds(&self) -> Vec<(usize, DVector<f64>)> {
        let a = self.tilt;
        [(0.0, a), (0.0, a + PI), (PI, -a), (PI, PI - a)]
            .iter()
            .map(|&(t, p)| {
                let patch = if t == 0.0 { 0 } else { 1 } | if p.cos() > 0.0 { 0 } else { 2 };
                let (ct, cp) = Self::center(patch);
                (patch, DVector::from_vec(vec![wrap_near(t, ct), wrap_near(p, cp)]))
            })
            .collect()
    }
}

/// Unit sphere `S^dim` with stereographic patches: patch 0 projects from the
/// south pole and covers the upper hemisphere, patch 1 projects from the north
/// pole and covers the lower one.
#[derive(Debug)]
pub struct Sphere {
    pub dim: usize,
}

impl Surface for Sphere {
    fn dim(&self) -> usize {
        self.dim
    }
    fn ambient_dim(&self) -> usize {
        self.dim + 1
    }
    fn patch_count(&self) -> usize {
        2
    }

    fn jet(&self, patch: usize, w: &DVector<f64>) -> Result<Jet> {
        let n = self.dim;
        if w.amax() >= 3.0 {
            return Err(Error::OutOfAtlas);
        }
        let sign = if patch == 0 { 1.0 } else { -1.0 };
        let q = w.norm_squared();
        let s = 1.0 + q;
        let mut point = DVector::zeros(n + 1);
        for i in 0..n {
            point[i] = 2.0 * w[i] / s;
        }
        point[n] = sign * (1.0 - q) / s;
        let mut jac = DMatrix::zeros(n + 1, n);
        for k in 0..n {
            for i in 0..n {
                jac[(i, k)] = 2.0 * (i == k) as u8 as f64 / s - 4.0 * w[i] * w[k] / (s * s);
            }
            jac[(n, k)] = -sign * 4.0 * w[k] / (s * s);
        }
        let d = |a: usize, b: usize| (a == b) as u8 as f64;
        let mut second = Vec::with_capacity(n);
        for l in 0..n {
            let mut m = DMatrix::zeros(n + 1, n);
            for k in 0..n {
                for i in 0..n {
                    m[(i, k)] = -4.0 * (d(i, k) * w[l] + d(i, l) * w[k] + d(k, l) * w[i]) / (s * s)
                        + 16.0 * w[i] * w[k] * w[l] / (s * s * s);
                }
                m[(n, k)] = sign * (-4.0 * d(k, l) / (s * s) + 16.0 * w[k] * w[l] / (s * s * s));
            }
            second.push(m);
        }
        Ok(Jet { point, jac, second })
    }

    fn chart_inverse(&self, patch: usize, x: &DVector<f64>) -> Option<DVector<f64>> {
        let n = self.dim;
        let sign = if patch == 0 { 1.0 } else { -1.0 };
        let den = 1.0 + sign * x[n];
        if den < 0.1 {
            return None;
        }
        let w = x.rows(0, n) / den;
        (w.amax() < 3.0).then_some(w)
    }

    fn comfort(&self, _patch: usize, w: &DVector<f64>) -> f64 {
        1.3 - w.norm()
    }

    fn seeds(&self) -> Vec<(usize, DVector<f64>)> {
        vec![(0, DVector::zeros(self.dim)), (1, DVector::zeros(self.dim))]
    }
}

/// A smooth function on `R^3` whose zero set is the surface.
pub trait LevelFunction: Send + Sync + std::fmt::Debug {
    fn value(&self, p: &Vector3<f64>) -> f64;
    fn gradient(&self, p: &Vector3<f64>) -> Vector3<f64>;
    fn hessian(&self, p: &Vector3<f64>) -> Matrix3<f64>;
    /// Axis-aligned box containing the surface.
    fn bounds(&self) -> (Vector3<f64>, Vector3<f64>);
    fn critical_seeds(&self) -> Vec<Vector3<f64>>;
}

#[derive(Debug)]
pub struct Lemniscate {
    pub band: f64,
    pub z_scale: f64,
}

impl Lemniscate {
    fn poly(&self, x: f64, y: f64) -> (f64, f64, f64, f64, f64, f64) {
        let r2 = x * x + y * y;
        let p = r2 * r2 - 2.0 * x * x + 2.0 * y * y;
        let px = 4.0 * x * r2 - 4.0 * x;
        let py = 4.0 * y * r2 + 4.0 * y;
        let pxx = 12.0 * x * x + 4.0 * y * y - 4.0;
        let pyy = 4.0 * x * x + 12.0 * y * y + 4.0;
        let pxy = 8.0 * x * y;
        (p, px, py, pxx, pyy, pxy)
    }
}

impl LevelFunction for Lemniscate {
    fn value(&self, v: &Vector3<f64>) -> f64 {
        let (p, ..) = self.poly(v.x, v.y);
        let sz = self.z_scale * v.z;
        p * p + sz * sz - self.band * self.band
    }

    fn gradient(&self, v: &Vector3<f64>) -> Vector3<f64> {
        let (p, px, py, ..) = self.poly(v.x, v.y);
        Vector3::new(2.0 * p * px, 2.0 * p * py, 2.0 * self.z_scale * self.z_scale * v.z)
    }

    fn hessian(&self, v: &Vector3<f64>) -> Matrix3<f64> {
        let (p, px, py, pxx, pyy, pxy) = self.poly(v.x, v.y);
        let fxx = 2.0 * (px * px + p * pxx);
        let fyy = 2.0 * (py * py + p * pyy);
        let fxy = 2.0 * (px * py + p * pxy);
        Matrix3::new(fxx, fxy, 0.0, fxy, fyy, 0.0, 0.0, 0.0, 2.0 * self.z_scale * self.z_scale)
    }

    fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let xm = (1.0 + (1.0 + self.band).sqrt()).sqrt() + 0.05;
        let zm = self.band / self.z_scale + 0.05;
        (Vector3::new(-xm, -0.9, -zm), Vector3::new(xm, 0.9, zm))
    }

    fn critical_seeds(&self) -> Vec<Vector3<f64>> {
        let e = self.band;
        let outer = (1.0 + (1.0 + e).sqrt()).sqrt();
        let mid = (1.0 + (1.0 - e).sqrt()).sqrt();
        let inner = (1.0 - (1.0 - e).sqrt()).sqrt();
        [outer, mid, inner, -inner, -mid, -outer].iter().map(|&x| Vector3::new(x, 0.0, 0.0)).collect()
    }
}

#[derive(Clone, Debug)]
struct Anchor {
    c: Vector3<f64>,
    t1: Vector3<f64>,
    t2: Vector3<f64>,
    n: Vector3<f64>,
    half: f64,
}

/// Implicit surface covered by tangent-plane graph patches: patch `i` maps
/// `(a, b)` to `c + a t1 + b t2 + h(a, b) n`, where `h` solves `F = 0`.
/// Patch sizes shrink where the surface curves sharply.
#[derive(Debug)]
pub struct Implicit {
    level: Box<dyn LevelFunction>,
    anchors: Vec<Anchor>,
    cells: HashMap<(i64, i64, i64), Vec<usize>>,
}

const MAX_HALF: f64 = 0.2;
const MIN_HALF: f64 = 0.01;
// anchors closer than this fraction of the smaller half-width are redundant
const SPACING_RATIO: f64 = 0.5;
const CELL: f64 = SPACING_RATIO * MAX_HALF;

fn cell_key(p: &Vector3<f64>) -> (i64, i64, i64) {
    ((p.x / CELL).floor() as i64, (p.y / CELL).floor() as i64, (p.z / CELL).floor() as i64)
}

/// Patch half-width allowed by the largest principal curvature at `p`.
fn patch_half(level: &dyn LevelFunction, p: &Vector3<f64>) -> f64 {
    let g = level.gradient(p);
    let gn = g.norm();
    let n = g / gn;
    let proj = Matrix3::identity() - n * n.transpose();
    let shape = proj * level.hessian(p) * proj / gn;
    let kappa = shape.symmetric_eigenvalues().amax();
    (0.5 / kappa.max(1e-12)).clamp(MIN_HALF, MAX_HALF)
}

/// Patch half-widths that grow at most linearly away from sharply curved
/// regions, so no patch reaches into a region it cannot graph.
struct HalfField {
    cells: Vec<(Vector3<f64>, f64)>,
}

const HALF_SLOPE: f64 = 0.3;
const FIELD_CELL: f64 = 0.05;

impl HalfField {
    fn new(level: &dyn LevelFunction, samples: &[Vector3<f64>]) -> Self {
        let mut best: HashMap<(i64, i64, i64), (Vector3<f64>, f64)> = HashMap::new();
        for p in samples {
            let k = ((p.x / FIELD_CELL).floor() as i64, (p.y / FIELD_CELL).floor() as i64, (p.z / FIELD_CELL).floor() as i64);
            let h = patch_half(level, p);
            let e = best.entry(k).or_insert((*p, h));
            if h < e.1 {
                *e = (*p, h);
            }
        }
        let mut cells: Vec<_> = best.into_values().filter(|c| c.1 < MAX_HALF).collect();
        cells.sort_by(|a, b| a.1.total_cmp(&b.1));
        Self { cells }
    }

    fn half(&self, level: &dyn LevelFunction, p: &Vector3<f64>) -> f64 {
        let mut h = patch_half(level, p);
        for (q, hq) in &self.cells {
            if *hq >= h {
                break;
            }
            h = h.min(hq + HALF_SLOPE * (p - q).norm());
        }
        h.max(MIN_HALF)
    }
}

impl Implicit {
    pub fn new(level: Box<dyn LevelFunction>) -> Self {
        let lv = level.as_ref();
        let (lo, hi) = level.bounds();
        let mut step = 0.035;
        let counts = (hi - lo).map(|d| (d / step).ceil() as usize + 1);
        let mut coarse = Vec::new();
        for i in 0..counts.x {
            for j in 0..counts.y {
                for k in 0..counts.z {
                    let start = lo + Vector3::new(i as f64, j as f64, k as f64) * step;
                    if let Some(p) = project(lv, start) {
                        if (p - start).norm() < 0.5 * step * 3f64.sqrt() {
                            coarse.push(p);
                        }
                    }
                }
            }
        }
        let field = HalfField::new(lv, &coarse);
        let mut candidates: Vec<(Vector3<f64>, f64)> = coarse.iter().map(|p| (*p, field.half(lv, p))).collect();
        // refine around candidates whose spacing is finer than the grid
        let mut level_set = candidates.clone();
        while step > MIN_HALF * SPACING_RATIO * 0.5 {
            let fine = 0.5 * step;
            let mut seen = std::collections::HashSet::new();
            let mut next = Vec::new();
            for (p, half) in &level_set {
                if SPACING_RATIO * half >= step {
                    continue;
                }
                for dx in -1..=1 {
                    for dy in -1..=1 {
                        for dz in -1..=1 {
                            let start = p + Vector3::new(dx as f64, dy as f64, dz as f64) * fine;
                            let Some(q) = project(lv, start) else { continue };
                            let k = ((q.x / fine).round() as i64, (q.y / fine).round() as i64, (q.z / fine).round() as i64);
                            if seen.insert(k) {
                                next.push((q, field.half(lv, &q)));
                            }
                        }
                    }
                }
            }
            if next.is_empty() {
                break;
            }
            candidates.extend(next.iter().cloned());
            level_set = next;
            step = fine;
        }
        // tightest patches claim their neighbourhoods first
        candidates.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.x.total_cmp(&b.0.x)).then(a.0.y.total_cmp(&b.0.y)).then(a.0.z.total_cmp(&b.0.z)));
        let mut seeded: Vec<(Vector3<f64>, f64)> =
            level.critical_seeds().into_iter().filter_map(|p| project(lv, p)).map(|p| (p, field.half(lv, &p))).collect();
        seeded.extend(candidates);

        let mut cells: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        let mut anchors: Vec<Anchor> = Vec::new();
        for (p, half) in seeded {
            let (kx, ky, kz) = cell_key(&p);
            let mut near = false;
            'outer: for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        if let Some(list) = cells.get(&(kx + dx, ky + dy, kz + dz)) {
                            if list.iter().any(|&a| (anchors[a].c - p).norm() < SPACING_RATIO * half.min(anchors[a].half)) {
                                near = true;
                                break 'outer;
                            }
                        }
                    }
                }
            }
            if !near {
                cells.entry((kx, ky, kz)).or_default().push(anchors.len());
                anchors.push(make_anchor(lv, p, half));
            }
        }
        Self { level, anchors, cells }
    }

    fn solve_height(&self, anchor: &Anchor, a: f64, b: f64) -> Option<Vector3<f64>> {
        let base = anchor.c + anchor.t1 * a + anchor.t2 * b;
        let mut h = 0.0;
        for _ in 0..40 {
            let p = base + anchor.n * h;
            let g = self.level.value(&p);
            let grad = self.level.gradient(&p);
            let dn = grad.dot(&anchor.n);
            if dn.abs() < 0.2 * grad.norm() {
                return None;
            }
            let step = g / dn;
            h -= step;
            if h.abs() > anchor.half {
                return None;
            }
            if step.abs() < 1e-15 {
                return Some(base + anchor.n * h);
            }
        }
        let p = base + anchor.n * h;
        (self.level.value(&p).abs() < 1e-13).then_some(p)
    }
}

fn project(level: &dyn LevelFunction, mut p: Vector3<f64>) -> Option<Vector3<f64>> {
    for _ in 0..60 {
        let g = level.value(&p);
        let grad = level.gradient(&p);
        let n2 = grad.norm_squared();
        if n2 < 1e-12 {
            return None;
        }
        let step = grad * (g / n2);
        p -= step;
        if step.norm() < 1e-14 {
            return Some(p);
        }
    }
    (level.value(&p).abs() < 1e-12).then_some(p)
}

fn make_anchor(level: &dyn LevelFunction, c: Vector3<f64>, half: f64) -> Anchor {
    let n = level.gradient(&c).normalize();
    let axis = if n.x.abs() <= n.y.abs() && n.x.abs() <= n.z.abs() {
        Vector3::x()
    } else if n.y.abs() <= n.z.abs() {
        Vector3::y()
    } else {
        Vector3::z()
    };
    let t1 = (axis - n * axis.dot(&n)).normalize();
    let t2 = n.cross(&t1);
    Anchor { c, t1, t2, n, half }
}

impl Surface for Implicit {
    fn dim(&self) -> usize {
        2
    }
    fn ambient_dim(&self) -> usize {
        3
    }
    fn patch_count(&self) -> usize {
        self.anchors.len()
    }

    fn jet(&self, patch: usize, x: &DVector<f64>) -> Result<Jet> {
        let an = &self.anchors[patch];
        if x[0].abs() >= an.half || x[1].abs() >= an.half {
            return Err(Error::OutOfAtlas);
        }
        let p = self.solve_height(an, x[0], x[1]).ok_or(Error::OutOfAtlas)?;
        let grad = self.level.gradient(&p);
        let hess = self.level.hessian(&p);
        let t = [an.t1, an.t2];
        let fh = grad.dot(&an.n);
        let fi = [grad.dot(&t[0]) / fh, grad.dot(&t[1]) / fh];
        let hi = [-fi[0], -fi[1]];
        let hn = hess * an.n;
        let fhh = an.n.dot(&hn);
        let mut hij = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                let fij = t[i].dot(&(hess * t[j]));
                let fih = t[i].dot(&hn);
                let fjh = t[j].dot(&hn);
                hij[i][j] = -(fij + fih * hi[j] + fjh * hi[i] + fhh * hi[i] * hi[j]) / fh;
            }
        }
        let mut jac = DMatrix::zeros(3, 2);
        for i in 0..2 {
            let col = t[i] + an.n * hi[i];
            jac.set_column(i, &DVector::from_column_slice(col.as_slice()));
        }
        let mut second = Vec::with_capacity(2);
        for row in &hij {
            let mut m = DMatrix::zeros(3, 2);
            for (j, h) in row.iter().enumerate() {
                let col = an.n * *h;
                m.set_column(j, &DVector::from_column_slice(col.as_slice()));
            }
            second.push(m);
        }
        Ok(Jet {
            point: DVector::from_column_slice(p.as_slice()),
            jac,
            second,
        })
    }

    fn chart_inverse(&self, patch: usize, ambient: &DVector<f64>) -> Option<DVector<f64>> {
        let an = &self.anchors[patch];
        let p = Vector3::new(ambient[0], ambient[1], ambient[2]);
        let d = p - an.c;
        let (a, b) = (d.dot(&an.t1), d.dot(&an.t2));
        if a.abs() >= an.half || b.abs() >= an.half {
            return None;
        }
        let q = self.solve_height(an, a, b)?;
        ((q - p).norm() < 1e-8).then(|| DVector::from_vec(vec![a, b]))
    }

    fn comfort(&self, patch: usize, x: &DVector<f64>) -> f64 {
        0.75 * self.anchors[patch].half - x.amax()
    }

    fn candidate_patches(&self, ambient: &DVector<f64>) -> Vec<usize> {
        let p = Vector3::new(ambient[0], ambient[1], ambient[2]);
        let (kx, ky, kz) = cell_key(&p);
        let mut idx: Vec<(f64, usize)> = Vec::new();
        for dx in -2..=2 {
            for dy in -2..=2 {
                for dz in -2..=2 {
                    if let Some(list) = self.cells.get(&(kx + dx, ky + dy, kz + dz)) {
                        idx.extend(list.iter().map(|&i| ((self.anchors[i].c - p).norm() / self.anchors[i].half, i)));
                    }
                }
            }
        }
        if idx.is_empty() {
            idx = self.anchors.iter().enumerate().map(|(i, a)| ((a.c - p).norm() / a.half, i)).collect();
        }
        idx.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        idx.into_iter().take(8).map(|(_, i)| i).collect()
    }

    fn seeds(&self) -> Vec<(usize, DVector<f64>)> {
        self.level
            .critical_seeds()
            .iter()
            .filter_map(|p| {
                let amb = DVector::from_column_slice(p.as_slice());
                let patch = *self.candidate_patches(&amb).first()?;
                Some((patch, self.chart_inverse(patch, &amb)?))
            })
            .collect()
    }
}

/// Deterministic unit directions used to probe a neighbourhood of a point.
pub fn probe_directions(dim: usize, extra: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut dirs = Vec::new();
    for i in 0..dim {
        for s in [1.0, -1.0] {
            let mut v = DVector::zeros(dim);
            v[i] = s;
            dirs.push(v);
        }
        for j in (i + 1)..dim {
            for (a, b) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                let mut v = DVector::zeros(dim);
                v[i] = a / 2f64.sqrt();
                v[j] = b / 2f64.sqrt();
                dirs.push(v);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..extra {
        let v = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0));
        if v.norm() > 1e-3 {
            dirs.push(v.normalize());
        }
    }
    dirs
}

#[cfg(test)]
mod tests {
    use super::*;

    // Central differences of the point and first derivatives against the
    // analytic jet, at random interior points of every patch.
    fn check_jets(surface: &dyn Surface, scale: f64, tol: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = surface.dim();
        let h = 1e-5;
        let mut checked = 0;
        for patch in 0..surface.patch_count() {
            for _ in 0..5 {
                let x = DVector::from_fn(n, |_, _| rng.random_range(-scale..scale));
                let Ok(jet) = surface.jet(patch, &x) else { continue };
                for k in 0..n {
                    let mut e = DVector::zeros(n);
                    e[k] = h;
                    let (Ok(a), Ok(b)) = (surface.jet(patch, &(&x + &e)), surface.jet(patch, &(&x - &e))) else { continue };
                    let dp = (&a.point - &b.point) / (2.0 * h);
                    assert!((dp - jet.jac.column(k)).amax() < tol, "jacobian patch {patch} k {k}");
                    let dj = (&a.jac - &b.jac) / (2.0 * h);
                    assert!((dj - &jet.second[k]).amax() < tol, "second derivative patch {patch} k {k}");
                    checked += 1;
                }
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn torus_jets() {
        check_jets(&Torus { major: 2.0, minor: 1.0, tilt: 0.1 }, 1.0, 1e-6);
    }

    #[test]
    fn sphere_jets() {
        check_jets(&Sphere { dim: 2 }, 1.0, 1e-6);
        check_jets(&Sphere { dim: 3 }, 1.0, 1e-6);
    }

    #[test]
    fn implicit_jets() {
        let surf = Implicit::new(Box::new(Lemniscate { band: 0.85, z_scale: 3.0 }));
        check_jets(&surf, 0.005, 1e-4);
    }

    #[test]
    fn lemniscate_derivatives() {
        let l = Lemniscate { band: 0.85, z_scale: 3.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = 1e-6;
        for _ in 0..20 {
            let p = Vector3::new(rng.random_range(-1.5..1.5), rng.random_range(-0.8..0.8), rng.random_range(-0.3..0.3));
            let g = l.gradient(&p);
            let hs = l.hessian(&p);
            for k in 0..3 {
                let mut e = Vector3::zeros();
                e[k] = h;
                let fd = (l.value(&(p + e)) - l.value(&(p - e))) / (2.0 * h);
                assert!((fd - g[k]).abs() < 1e-6 * (1.0 + g[k].abs()));
                let fdg = (l.gradient(&(p + e)) - l.gradient(&(p - e))) / (2.0 * h);
                assert!((fdg - hs.column(k)).amax() < 1e-5 * (1.0 + hs.amax()));
            }
        }
    }

    #[test]
    fn sphere_charts_invert() {
        let s = Sphere { dim: 2 };
        let w = DVector::from_vec(vec![0.3, -0.7]);
        for patch in 0..2 {
            let p = s.jet(patch, &w).unwrap().point;
            assert!((p.norm() - 1.0).abs() < 1e-14);
            assert!((s.chart_inverse(patch, &p).unwrap() - &w).amax() < 1e-14);
        }
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        for spec in [
            SurfaceSpec::Torus { major: 1.0, minor: 1.0, tilt: 0.0 },
            SurfaceSpec::Torus { major: 2.0, minor: 1.0, tilt: 2.0 },
            SurfaceSpec::Sphere { dim: 0 },
            SurfaceSpec::Genus2 { band: 1.2, z_scale: 1.0 },
            SurfaceSpec::Genus2 { band: 0.5, z_scale: 0.0 },
        ] {
            assert!(matches!(spec.build(), Err(Error::InvalidParameters(_))), "{spec:?}");
        }
    }

    #[test]
    fn genus2_spec_defaults_z_scale() {
        let spec: SurfaceSpec = serde_json::from_str(r#"{"family": "genus2", "band": 0.5}"#).unwrap();
        assert_eq!(spec, SurfaceSpec::Genus2 { band: 0.5, z_scale: 1.0 });
    }
}
