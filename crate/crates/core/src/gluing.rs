//! Obstruction sections for broken pairs, the ramped perturbation section and
//! counting of perturbed glued trajectories.
//!
//! For a broken pair `(upper, lower)` meeting at a middle critical point,
//! the linearised obstruction section in the gluing parameter `T` has one
//! component per cokernel element of either piece:
//!
//! * lower fibre element `j`: `sum_i c_i(upper, +) d_i(eta_j, -) e^{-4 lambda_i T}`
//!   over the positive modes of the middle point;
//! * upper fibre element `j`: `-sum_i c_i(lower, -) d_i(eta_j, +) e^{4 lambda_i T}`
//!   over the negative modes.
//!
//! Both are sums of decaying exponentials `a e^{-r T}` with `r > 0`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::asymptotics::AsymptoticCoeffs;
use crate::error::{Error, Result};
use crate::geometry::MorseSetup;
use crate::trajectories::{ModuliComponent, ModuliSpace};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExpTerm {
    pub mode: i32,
    pub coefficient: f64,
    pub rate: f64,
}

fn eval_terms(terms: &[ExpTerm], t: f64) -> f64 {
    terms.iter().map(|e| e.coefficient * (-e.rate * t).exp()).sum()
}

fn eval_terms_derivative(terms: &[ExpTerm], t: f64) -> f64 {
    terms.iter().map(|e| -e.rate * e.coefficient * (-e.rate * t).exp()).sum()
}

/// Linearised obstruction section of one broken pair.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BrokenPair {
    pub upper: String,
    pub lower: String,
    pub middle: usize,
    /// Orientation signs of the pieces that are transversely cut out.
    pub upper_sign: Option<i8>,
    pub lower_sign: Option<i8>,
    /// One term list per lower fibre element.
    pub plus_terms: Vec<Vec<ExpTerm>>,
    /// One term list per upper fibre element.
    pub minus_terms: Vec<Vec<ExpTerm>>,
}

impl BrokenPair {
    pub fn label(&self) -> String {
        format!("({}, {})", self.upper, self.lower)
    }

    pub fn rank(&self) -> usize {
        self.plus_terms.len() + self.minus_terms.len()
    }

    /// Slowest decay rate over all terms.
    pub fn min_rate(&self) -> f64 {
        self.plus_terms.iter().chain(&self.minus_terms).flatten().map(|e| e.rate).fold(f64::INFINITY, f64::min)
    }
}

fn paired_terms(a: &AsymptoticCoeffs, b: &AsymptoticCoeffs, sign: f64) -> Vec<ExpTerm> {
    a.modes
        .iter()
        .filter_map(|m| {
            let other = b.mode(m.mode)?;
            Some(ExpTerm {
                mode: m.mode,
                coefficient: sign * m.coefficient * other.coefficient,
                rate: 4.0 * m.eigenvalue.abs(),
            })
        })
        .collect()
}

/// Assemble the section model from tail data. `upper_tail` is the upper
/// piece at its target end, `lower_tail` the lower piece at its source end;
/// `lower_fiber` holds the source-end tails of the lower cokernel basis and
/// `upper_fiber` the target-end tails of the upper one.
#[allow(clippy::too_many_arguments)]
pub fn build_broken_pair(
    upper: &str,
    lower: &str,
    middle: usize,
    upper_tail: &AsymptoticCoeffs,
    lower_tail: &AsymptoticCoeffs,
    upper_fiber: &[AsymptoticCoeffs],
    lower_fiber: &[AsymptoticCoeffs],
    signs: (Option<i8>, Option<i8>),
) -> BrokenPair {
    BrokenPair {
        upper: upper.to_string(),
        lower: lower.to_string(),
        middle,
        upper_sign: signs.0,
        lower_sign: signs.1,
        plus_terms: lower_fiber.iter().map(|d| paired_terms(upper_tail, d, 1.0)).collect(),
        minus_terms: upper_fiber.iter().map(|d| paired_terms(lower_tail, d, -1.0)).collect(),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SectionValue {
    pub plus: Vec<f64>,
    pub minus: Vec<f64>,
}

impl SectionValue {
    pub fn norm(&self) -> f64 {
        self.plus.iter().chain(&self.minus).map(|x| x * x).sum::<f64>().sqrt()
    }
}

pub fn linearized_obstruction_section(pair: &BrokenPair, t: f64) -> Result<SectionValue> {
    if pair.rank() == 0 {
        return Err(Error::NothingToObstruct);
    }
    Ok(SectionValue {
        plus: pair.plus_terms.iter().map(|ts| eval_terms(ts, t)).collect(),
        minus: pair.minus_terms.iter().map(|ts| eval_terms(ts, t)).collect(),
    })
}

/// Smooth monotone cutoff: 0 up to `start + delta1`, 1 from `start + delta2`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Ramp {
    pub start: f64,
    pub delta1: f64,
    pub delta2: f64,
}

fn bump(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else {
        (-1.0 / t).exp()
    }
}

fn bump_d(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else {
        (-1.0 / t).exp() / (t * t)
    }
}

impl Ramp {
    pub fn value(&self, t: f64) -> f64 {
        let x = (t - self.start - self.delta1) / (self.delta2 - self.delta1);
        let (a, b) = (bump(x), bump(1.0 - x));
        if a + b == 0.0 {
            0.0
        } else {
            a / (a + b)
        }
    }

    pub fn derivative(&self, t: f64) -> f64 {
        let w = self.delta2 - self.delta1;
        let x = (t - self.start - self.delta1) / w;
        let (a, b) = (bump(x), bump(1.0 - x));
        let (da, db) = (bump_d(x), -bump_d(1.0 - x));
        if a + b == 0.0 {
            return 0.0;
        }
        (da * (a + b) - a * (da + db)) / ((a + b) * (a + b)) / w
    }

    /// Largest slope on a fine grid over the transition zone.
    pub fn max_slope(&self) -> f64 {
        let (a, b) = (self.start + self.delta1, self.start + self.delta2);
        (0..=4000).map(|i| self.derivative(a + (b - a) * i as f64 / 4000.0)).fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct GluingConfig {
    /// Start of the gluing region in units of `1 / lambda` of the middle
    /// critical point.
    pub start_efolds: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub c1_bound: f64,
    pub grid: usize,
}

impl Default for GluingConfig {
    fn default() -> Self {
        Self {
            start_efolds: 3.0,
            delta1: 1.0,
            delta2: 5.0,
            c1_bound: 1.0,
            grid: 4000,
        }
    }
}

/// Perturbation of the obstruction section: a fixed vector in each fibre,
/// switched on in the gluing region by the ramp.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerturbationSection {
    pub ramp: Ramp,
    /// Fibre values per obstructed trajectory, in the oriented fibre basis.
    pub sigma: BTreeMap<String, Vec<f64>>,
    pub c1_norm: f64,
}

impl PerturbationSection {
    pub fn boundary_value(&self, traj: &str, t: f64) -> Option<Vec<f64>> {
        let chi = self.ramp.value(t);
        self.sigma.get(traj).map(|v| v.iter().map(|x| chi * x).collect())
    }
}

/// Validate the choices for every obstructed trajectory (`(id, rank)`).
pub fn build_perturbation_section(fibers: &[(String, usize)], choices: &BTreeMap<String, Vec<f64>>, ramp: Ramp, c1_bound: f64) -> Result<PerturbationSection> {
    let mut sigma = BTreeMap::new();
    let mut sup: f64 = 0.0;
    for (id, rank) in fibers {
        let v = choices.get(id).ok_or_else(|| Error::NotTransverse(format!("no perturbation chosen on the fibre over {id}")))?;
        if v.len() != *rank {
            return Err(Error::NotTransverse(format!("{id}: fibre rank {rank}, got {} values", v.len())));
        }
        if v.iter().all(|x| *x == 0.0) {
            return Err(Error::NotTransverse(format!("perturbation over {id} vanishes, so its zero set is the whole component")));
        }
        sup = sup.max(v.iter().map(|x| x * x).sum::<f64>().sqrt());
        sigma.insert(id.clone(), v.clone());
    }
    let c1_norm = sup.max(sup * ramp.max_slope());
    if c1_norm > c1_bound {
        return Err(Error::C1BoundExceeded { value: c1_norm, bound: c1_bound });
    }
    Ok(PerturbationSection { ramp, sigma, c1_norm })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GluingZero {
    pub t: f64,
    pub sign: i8,
    pub section_at_zero: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GluingCount {
    pub pair: String,
    pub zeros: Vec<GluingZero>,
    pub signed_count: i64,
    pub sigma_limit: f64,
    pub section_at_start: f64,
    pub margin_ok: bool,
}

impl GluingCount {
    pub fn count(&self) -> usize {
        self.zeros.len()
    }
}

fn find_sign_changes<F: Fn(f64) -> f64>(g: &F, a: f64, b: f64, grid: usize) -> Vec<f64> {
    let mut out = Vec::new();
    let mut prev_t = a;
    let mut prev = g(a);
    for i in 1..=grid {
        let t = a + (b - a) * i as f64 / grid as f64;
        let v = g(t);
        if prev == 0.0 || prev * v < 0.0 {
            let (mut lo, mut hi) = (prev_t, t);
            let glo = g(lo);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if g(mid) * glo <= 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
                if hi - lo < 1e-13 {
                    break;
                }
            }
            out.push(0.5 * (lo + hi));
        }
        prev_t = t;
        prev = v;
    }
    out
}

/// Count zeros of `s_0(T) + sigma_{+-}(T)` for a pair whose total fibre has
/// rank one, on `[ramp.start, t_max]`, checking stability under a doubled grid.
pub fn count_perturbed_gluings(pair: &BrokenPair, pert: &PerturbationSection, t_max: f64, grid: usize) -> Result<GluingCount> {
    if pair.rank() == 0 {
        return Err(Error::NothingToObstruct);
    }
    if pair.rank() > 1 {
        return Err(Error::UnsupportedRank(pair.rank()));
    }
    let (terms, owner, transverse_sign) = if let Some(t) = pair.plus_terms.first() {
        (t.clone(), &pair.lower, pair.upper_sign)
    } else {
        (pair.minus_terms[0].clone(), &pair.upper, pair.lower_sign)
    };
    let sigma = pert.sigma.get(owner).and_then(|v| v.first().copied()).ok_or_else(|| Error::NotTransverse(format!("no perturbation over {owner}")))?;
    let ramp = pert.ramp;
    let g = |t: f64| eval_terms(&terms, t) + ramp.value(t) * sigma;
    let dg = |t: f64| eval_terms_derivative(&terms, t) + ramp.derivative(t) * sigma;
    let a = ramp.start;
    let coarse = find_sign_changes(&g, a, t_max, grid);
    let fine = find_sign_changes(&g, a, t_max, 2 * grid);
    if coarse.len() != fine.len() {
        return Err(Error::UnstableCount(format!("{}: {} zeros on the grid, {} after refinement", pair.label(), coarse.len(), fine.len())));
    }
    if sigma != 0.0 && g(t_max).signum() != sigma.signum() {
        return Err(Error::UnstableCount(format!("{}: section has not reached its limit by T = {t_max}", pair.label())));
    }
    let o = transverse_sign.unwrap_or(1) as f64;
    let cd: f64 = terms.iter().map(|e| e.coefficient.abs()).sum();
    let mut margin_ok = true;
    let zeros: Vec<GluingZero> = fine
        .iter()
        .map(|&t| {
            let s0 = eval_terms(&terms, t);
            let quad = cd * terms.iter().map(|e| (-2.0 * e.rate * t).exp()).fold(0.0, f64::max);
            if s0.abs() < 10.0 * quad {
                margin_ok = false;
            }
            let slope = dg(t);
            GluingZero {
                t,
                sign: if o * -slope.signum() >= 0.0 { 1 } else { -1 },
                section_at_zero: s0,
            }
        })
        .collect();
    Ok(GluingCount {
        pair: pair.label(),
        signed_count: zeros.iter().map(|z| z.sign as i64).sum(),
        zeros,
        sigma_limit: sigma,
        section_at_start: eval_terms(&terms, a),
        margin_ok,
    })
}

/// Two-parameter section for a three-level chain `(u, v, w)` with `v`
/// obstructed of rank one:
/// `a e^{-r1 T1} - b e^{-r2 T2}` with `a = c(u) d(v, -)` and `b = c(w) d(v, +)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ThreeLevelModel {
    pub upper_terms: Vec<ExpTerm>,
    pub lower_terms: Vec<ExpTerm>,
}

impl ThreeLevelModel {
    /// From the pair models `(v, u)` (v below u) and `(w, v)` (w below v).
    pub fn from_pairs(upper_pair: &BrokenPair, lower_pair: &BrokenPair) -> Option<Self> {
        Some(Self {
            upper_terms: upper_pair.plus_terms.first()?.clone(),
            lower_terms: lower_pair.minus_terms.first()?.clone(),
        })
    }

    pub fn value(&self, t1: f64, t2: f64) -> f64 {
        eval_terms(&self.upper_terms, t1) + eval_terms(&self.lower_terms, t2)
    }

    /// Points of the zero locus along `T1` in `[t_min, t_max]`, solving for
    /// `T2` by bisection where a solution in range exists.
    pub fn zero_locus(&self, t_min: f64, t_max: f64, samples: usize) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        for i in 0..=samples {
            let t1 = t_min + (t_max - t_min) * i as f64 / samples as f64;
            let f = |t2: f64| self.value(t1, t2);
            let (mut lo, mut hi) = (t_min, t_max);
            if f(lo) * f(hi) > 0.0 {
                continue;
            }
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if f(mid) * f(lo) <= 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            out.push((t1, 0.5 * (lo + hi)));
        }
        out
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EndMatch {
    pub boundary_angle: f64,
    pub chain: Vec<String>,
    /// Inventory component matched to each piece of the chain.
    pub pieces: Vec<Option<String>>,
    pub orphan: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EndMatchReport {
    pub family: String,
    pub ends: Vec<EndMatch>,
    pub orphans: usize,
}

/// Identify the broken configuration at each end of a one-parameter family
/// with components of the inventory.
pub fn match_family_ends(setup: &MorseSetup, family: &ModuliComponent, inventory: &[ModuliSpace]) -> EndMatchReport {
    let find = |a: usize, b: usize| inventory.iter().find(|m| m.source == a && m.target == b);
    let mut ends = Vec::new();
    for end in &family.ends {
        let mut pieces = Vec::new();
        for (i, w) in end.chain.windows(2).enumerate() {
            let comps: Vec<&ModuliComponent> = find(w[0], w[1]).map(|m| m.components.iter().collect()).unwrap_or_default();
            let hit = if i == 0 {
                comps
                    .iter()
                    .find(|c| {
                        let a = c.members[0].angle;
                        let d = (a - end.boundary_angle).rem_euclid(2.0 * std::f64::consts::PI);
                        d.min(2.0 * std::f64::consts::PI - d) < 1e-6
                    })
                    .map(|c| c.id.clone())
            } else {
                let sign = end.exit_signs.get(i - 1).and_then(|s| s.first().copied());
                comps.iter().find(|c| c.departure.is_some() && c.departure == sign).map(|c| c.id.clone())
            };
            pieces.push(hit);
        }
        let orphan = pieces.iter().any(|p| p.is_none());
        ends.push(EndMatch {
            boundary_angle: end.boundary_angle,
            chain: end.chain.iter().map(|&c| setup.critical_points[c].id.clone()).collect(),
            pieces,
            orphan,
        });
    }
    EndMatchReport {
        family: family.id.clone(),
        orphans: ends.iter().filter(|e| e.orphan).count(),
        ends,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asymptotics::{End, ModeCoeff};
    use proptest::prelude::*;

    fn coeffs(end: End, modes: &[(i32, f64, f64)]) -> AsymptoticCoeffs {
        AsymptoticCoeffs {
            subject: "x".into(),
            crit: 1,
            end,
            modes: modes
                .iter()
                .map(|&(mode, eigenvalue, coefficient)| ModeCoeff {
                    mode,
                    eigenvalue,
                    coefficient,
                    fitted_rate: eigenvalue,
                    fit_residual: 0.0,
                    trusted: true,
                    joint: false,
                })
                .collect(),
            window: (0.0, 1.0),
            samples_used: 10,
            suppressed: 0.0,
            advisory: None,
        }
    }

    fn plus_pair(terms: Vec<ExpTerm>) -> BrokenPair {
        BrokenPair {
            upper: "u".into(),
            lower: "v".into(),
            middle: 1,
            upper_sign: Some(1),
            lower_sign: None,
            plus_terms: vec![terms],
            minus_terms: Vec::new(),
        }
    }

    fn term(coefficient: f64, rate: f64) -> ExpTerm {
        ExpTerm { mode: 1, coefficient, rate }
    }

    fn ramp() -> Ramp {
        Ramp { start: 3.0, delta1: 1.0, delta2: 5.0 }
    }

    fn section(sigma: f64) -> PerturbationSection {
        PerturbationSection { ramp: ramp(), sigma: BTreeMap::from([("v".to_string(), vec![sigma])]), c1_norm: sigma.abs() }
    }

    #[test]
    fn single_mode_section() {
        let up = coeffs(End::Plus, &[(1, 1.0, 2.0)]);
        let fib = coeffs(End::Minus, &[(1, 1.0, 3.0)]);
        let pair = build_broken_pair("u", "v", 1, &up, &up, &[], &[fib], (Some(1), None));
        let s = linearized_obstruction_section(&pair, 1.0).unwrap();
        assert!((s.plus[0] - 6.0 * (-4.0f64).exp()).abs() < 1e-15);
        assert!(s.minus.is_empty());
    }

    #[test]
    fn two_mode_section_matches_direct_sum() {
        let up = coeffs(End::Plus, &[(1, 0.7, 1.3), (2, 1.9, -0.4)]);
        let fib = coeffs(End::Minus, &[(1, 0.7, -2.1), (2, 1.9, 0.8)]);
        let lo = coeffs(End::Minus, &[(-1, -1.2, 0.5)]);
        let upfib = coeffs(End::Plus, &[(-1, -1.2, 1.5)]);
        let pair = build_broken_pair("u", "v", 1, &up, &lo, &[upfib], &[fib], (None, None));
        for k in 0..20 {
            let t = 0.2 + 0.15 * k as f64;
            let s = linearized_obstruction_section(&pair, t).unwrap();
            let plus = 1.3 * -2.1 * (-4.0 * 0.7 * t).exp() + -0.4 * 0.8 * (-4.0 * 1.9 * t).exp();
            let minus = -(0.5 * 1.5) * (-4.0 * 1.2 * t).exp();
            assert!((s.plus[0] - plus).abs() < 1e-12);
            assert!((s.minus[0] - minus).abs() < 1e-12);
        }
        assert_eq!(pair.rank(), 2);
        assert!((pair.min_rate() - 2.8).abs() < 1e-12);
    }

    #[test]
    fn unmatched_modes_drop_out() {
        let up = coeffs(End::Plus, &[(1, 1.0, 2.0), (2, 3.0, 5.0)]);
        let fib = coeffs(End::Minus, &[(2, 3.0, 1.0)]);
        let pair = build_broken_pair("u", "v", 1, &up, &up, &[], &[fib], (None, None));
        assert_eq!(pair.plus_terms[0].len(), 1);
        assert_eq!(pair.plus_terms[0][0].rate, 12.0);
    }

    #[test]
    fn empty_pair_has_nothing_to_obstruct() {
        let mut pair = plus_pair(Vec::new());
        pair.plus_terms.clear();
        assert!(matches!(linearized_obstruction_section(&pair, 1.0), Err(Error::NothingToObstruct)));
        assert!(matches!(count_perturbed_gluings(&pair, &section(0.1), 10.0, 100), Err(Error::NothingToObstruct)));
    }

    #[test]
    fn ramp_shape() {
        let r = ramp();
        assert_eq!(r.value(3.5), 0.0);
        assert_eq!(r.value(4.0), 0.0);
        assert_eq!(r.value(8.0), 1.0);
        assert_eq!(r.value(20.0), 1.0);
        assert!((r.value(6.0) - 0.5).abs() < 1e-15);
        let mut prev = 0.0;
        for i in 0..=400 {
            let t = 4.0 + 4.0 * i as f64 / 400.0;
            let v = r.value(t);
            assert!(v >= prev);
            prev = v;
            let fd = (r.value(t + 1e-6) - r.value(t - 1e-6)) / 2e-6;
            assert!((fd - r.derivative(t)).abs() < 1e-6);
        }
        // The steepest point of the step is its midpoint, slope 2 / width.
        assert!((r.max_slope() - 0.5).abs() < 1e-9);
    }

    #[test]
    fn perturbation_choices_are_validated() {
        let fibers = vec![("v".to_string(), 1)];
        let ok = build_perturbation_section(&fibers, &BTreeMap::from([("v".to_string(), vec![0.1])]), ramp(), 1.0).unwrap();
        assert!(ok.c1_norm <= 1.0);
        assert_eq!(ok.boundary_value("v", 10.0), Some(vec![0.1]));
        assert_eq!(ok.boundary_value("v", 3.0), Some(vec![0.0]));
        let zero = build_perturbation_section(&fibers, &BTreeMap::from([("v".to_string(), vec![0.0])]), ramp(), 1.0);
        assert!(matches!(zero, Err(Error::NotTransverse(_))));
        let missing = build_perturbation_section(&fibers, &BTreeMap::new(), ramp(), 1.0);
        assert!(matches!(missing, Err(Error::NotTransverse(_))));
        let wrong_rank = build_perturbation_section(&fibers, &BTreeMap::from([("v".to_string(), vec![0.1, 0.1])]), ramp(), 1.0);
        assert!(matches!(wrong_rank, Err(Error::NotTransverse(_))));
        let big = build_perturbation_section(&fibers, &BTreeMap::from([("v".to_string(), vec![5.0])]), ramp(), 1.0);
        assert!(matches!(big, Err(Error::C1BoundExceeded { .. })));
    }

    #[test]
    fn single_crossing_matches_dense_oracle() {
        let pair = plus_pair(vec![term(0.8, 0.6)]);
        let pert = section(-0.05);
        let count = count_perturbed_gluings(&pair, &pert, 30.0, 4000).unwrap();
        assert_eq!(count.count(), 1);
        assert_eq!(count.signed_count, 1);
        assert!(count.margin_ok);
        let g = |t: f64| 0.8 * (-0.6 * t).exp() + ramp().value(t) * -0.05;
        let n = 100_000;
        let mut roots = Vec::new();
        for i in 0..n {
            let (a, b) = (3.0 + 27.0 * i as f64 / n as f64, 3.0 + 27.0 * (i + 1) as f64 / n as f64);
            if g(a) * g(b) < 0.0 {
                let (mut lo, mut hi) = (a, b);
                while hi - lo > 1e-14 {
                    let m = 0.5 * (lo + hi);
                    if g(m) * g(lo) <= 0.0 { hi = m } else { lo = m }
                }
                roots.push(lo);
            }
        }
        assert_eq!(roots.len(), 1);
        assert!((count.zeros[0].t - roots[0]).abs() < 1e-8);
    }

    #[test]
    fn same_sign_perturbation_has_no_zero() {
        let pair = plus_pair(vec![term(0.8, 0.6)]);
        let count = count_perturbed_gluings(&pair, &section(0.05), 30.0, 4000).unwrap();
        assert_eq!(count.count(), 0);
        assert_eq!(count.signed_count, 0);
    }

    #[test]
    fn zero_perturbation_leaves_decaying_section_without_zeros() {
        let pair = plus_pair(vec![term(0.8, 0.6)]);
        let count = count_perturbed_gluings(&pair, &section(0.0), 30.0, 4000).unwrap();
        assert_eq!(count.count(), 0);
    }

    #[test]
    fn counting_window_too_short_is_flagged() {
        let pair = plus_pair(vec![term(0.8, 0.6)]);
        assert!(matches!(count_perturbed_gluings(&pair, &section(-0.05), 5.0, 4000), Err(Error::UnstableCount(_))));
    }

    #[test]
    fn rank_two_fibres_are_not_counted() {
        let mut pair = plus_pair(vec![term(1.0, 1.0)]);
        pair.minus_terms.push(vec![term(1.0, 1.0)]);
        assert!(matches!(count_perturbed_gluings(&pair, &section(0.1), 10.0, 100), Err(Error::UnsupportedRank(2))));
    }

    #[test]
    fn three_level_locus_solves_the_section() {
        let model = ThreeLevelModel { upper_terms: vec![term(1.0, 1.0)], lower_terms: vec![term(-2.0, 1.5)] };
        let locus = model.zero_locus(0.5, 6.0, 50);
        assert!(!locus.is_empty());
        for (t1, t2) in locus {
            assert!(model.value(t1, t2).abs() < 1e-10);
        }
    }

    proptest! {
        // With the ramp off at the start and fully on at the end, the signed
        // count is fixed by the signs at the two ends of the window.
        #[test]
        fn signed_count_is_set_by_end_signs(
            a in prop_oneof![-2.0f64..-0.2, 0.2f64..2.0],
            b in -1.0f64..1.0,
            r1 in 0.3f64..1.0,
            r2 in 1.2f64..3.0,
            sigma in prop_oneof![-0.1f64..-0.01, 0.01f64..0.1],
        ) {
            let pair = plus_pair(vec![term(a, r1), term(b, r2)]);
            let count = match count_perturbed_gluings(&pair, &section(sigma), 60.0, 4000) {
                Ok(c) => c,
                Err(Error::UnstableCount(_)) => return Ok(()),
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            };
            let start = count.section_at_start.signum();
            prop_assert_eq!(count.signed_count, ((start - sigma.signum()) / 2.0) as i64);
            prop_assert_eq!(count.count() % 2 == 1, start != sigma.signum());
        }

        #[test]
        fn section_obeys_decay_bound(a in -3.0f64..3.0, b in -3.0f64..3.0, r1 in 0.1f64..2.0, r2 in 0.1f64..2.0, t in 0.0f64..20.0) {
            let pair = plus_pair(vec![term(a, r1), term(b, r2)]);
            let s = linearized_obstruction_section(&pair, t).unwrap();
            prop_assert!(s.norm() <= (a.abs() + b.abs()) * (-pair.min_rate() * t).exp() * (1.0 + 1e-12));
        }
    }
}
