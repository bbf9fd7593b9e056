//! End-to-end runs: moduli inventory, linearisation checks, tail
//! coefficients, perturbed gluing counts, strata and homology, collected in a
//! versioned JSON report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asymptotics::{extract_cokernel_coeffs, extract_trajectory_coeffs, AsymptoticCoeffs, AsymptoticConfig, End};
use crate::error::{Error, Result};
use crate::geometry::{make_builtin_setup, CustomSetup, MorseSetup};
use crate::gluing::{
    build_broken_pair, build_perturbation_section, count_perturbed_gluings, linearized_obstruction_section, match_family_ends, BrokenPair, EndMatchReport, GluingConfig, GluingCount,
    PerturbationSection, Ramp, ThreeLevelModel,
};
use crate::homology::{betti, build_chain_complex, homology_ranks, verify_d_squared, ChainComplex, Contribution, HomologyGroup, Ring};
use crate::kuranishi::{check_iterated_equals_simultaneous, reference_layout, strata_report, validate_chart_cover, CombinatoricsReport, CoverReport, ModuliCatalog, StratumReport};
use crate::linearized::{check_clean, compute_obstruction_fiber, finite_difference_defect, linearize, summarize, transport_sign, CleanReport, CutStatus, LinearizationSummary, OperatorConfig};
use crate::trajectories::{default_epsilon, moduli_from_sweep, moduli_label, normalize_representative, sweep_source, ComponentKind, FlowConfig, ModuliSpace, Trajectory};

pub const SCHEMA_VERSION: &str = "cleanmorse-report/1";

/// Finite-difference defects below this are treated as exact.
pub const FD_EXACT: f64 = 1e-8;

/// Environment variable overriding the output directory.
pub const OUT_DIR_ENV: &str = "CLEANMORSE_OUT";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckTolerances {
    pub energy_identity: f64,
    pub gauge_idempotence: f64,
    pub adjoint_pairing: f64,
    pub adjoint_pairs: usize,
    pub fd_steps: Vec<f64>,
}

impl Default for CheckTolerances {
    fn default() -> Self {
        Self {
            energy_identity: 1e-6,
            gauge_idempotence: 1e-8,
            adjoint_pairing: 1e-8,
            adjoint_pairs: 50,
            fd_steps: vec![1e-2, 1e-3, 1e-4],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Builtin setup name; ignored when `custom_setup` is given.
    pub setup: String,
    pub custom_setup: Option<CustomSetup>,
    /// Normalisation level; defaults to a twentieth of the smallest gap.
    pub epsilon: Option<f64>,
    pub flow: FlowConfig,
    pub operator: OperatorConfig,
    pub asymptotics: AsymptoticConfig,
    pub gluing: GluingConfig,
    /// Perturbation value per obstructed component id.
    pub sigma: BTreeMap<String, Vec<f64>>,
    /// Used for obstructed components missing from `sigma`.
    pub default_sigma: f64,
    pub ring: Ring,
    pub checks: CheckTolerances,
    /// Repeat rank decisions on a grid twice as fine.
    pub refine: bool,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            setup: "upright_torus".into(),
            custom_setup: None,
            epsilon: None,
            flow: FlowConfig::default(),
            operator: OperatorConfig::default(),
            asymptotics: AsymptoticConfig::default(),
            gluing: GluingConfig::default(),
            sigma: BTreeMap::new(),
            default_sigma: 0.1,
            ring: Ring::Z,
            checks: CheckTolerances::default(),
            refine: true,
            seed: 0,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn for_setup(name: &str) -> Self {
        Self { setup: name.into(), ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("flow.tolerance", self.flow.tolerance),
            ("operator.step", self.operator.step),
            ("operator.zero_threshold", self.operator.zero_threshold),
            ("asymptotics.window", self.asymptotics.window),
            ("checks.energy_identity", self.checks.energy_identity),
            ("checks.adjoint_pairing", self.checks.adjoint_pairing),
        ];
        for (name, v) in pos {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.gluing.delta1 < self.gluing.delta2) {
            return Err(Error::Config("gluing.delta1 must be below gluing.delta2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CritSummary {
    pub id: String,
    pub index: usize,
    pub value: f64,
    pub eigenvalues: Vec<f64>,
    pub chart_radius: f64,
    pub f_residual: f64,
    pub metric_residual: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SetupSummary {
    pub name: String,
    pub dim: usize,
    pub critical_points: Vec<CritSummary>,
    pub euler_characteristic: i64,
    pub epsilon: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComponentEntry {
    pub id: String,
    pub kind: ComponentKind,
    pub members: usize,
    pub near_breaking: bool,
    pub closed: bool,
    pub status: CutStatus,
    pub dim_ker: Vec<usize>,
    pub dim_coker: Vec<usize>,
    /// Orientation of a rigid transverse trajectory.
    pub orientation: Option<i8>,
    /// Rank of the obstruction fibre of an obstructed rigid trajectory.
    pub obstruction_rank: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModuliEntry {
    pub label: String,
    pub source: String,
    pub target: String,
    pub index_difference: i64,
    pub expected_dim: i64,
    pub status: CutStatus,
    pub components: Vec<ComponentEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrajectoryChecks {
    pub trajectory: String,
    pub energy: f64,
    pub energy_defect: f64,
    pub gauge_defect: f64,
    pub adjoint_pairing: f64,
    pub fd_defects: Vec<f64>,
    pub fd_order: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GluingEntry {
    pub pair: BrokenPair,
    pub contributes_to: (String, String),
    pub leading_s0: f64,
    pub count: GluingCount,
    pub t_min: f64,
    pub t_max: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ThreeLevelEntry {
    pub chain: Vec<String>,
    pub zero_locus_points: usize,
    /// Largest difference from the two-level section with the other
    /// parameter sent far out.
    pub limit_defect: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GluingReport {
    pub perturbation: Option<PerturbationSection>,
    pub pairs: Vec<GluingEntry>,
    pub three_level: Vec<ThreeLevelEntry>,
    pub family_ends: Vec<EndMatchReport>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KuranishiReport {
    pub catalog: ModuliCatalog,
    pub strata: Vec<StratumReport>,
    pub combinatorics: CombinatoricsReport,
    pub cover: Option<CoverReport>,
    pub mutant_cover: Option<CoverReport>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HomologyReport {
    pub ring: Ring,
    pub complex: ChainComplex,
    pub d_squared_zero: bool,
    pub groups: Vec<HomologyGroup>,
    pub betti: Vec<usize>,
    pub betti_z2: Vec<usize>,
    pub rings_consistent: bool,
    pub euler_characteristic: i64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Polyline {
    pub id: String,
    pub s: Vec<f64>,
    pub points: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: String,
    pub status: String,
    pub error: Option<String>,
    pub config: RunConfig,
    pub setup: Option<SetupSummary>,
    pub moduli: Vec<ModuliEntry>,
    pub linearization: Vec<LinearizationSummary>,
    pub clean: Vec<CleanReport>,
    pub trajectory_checks: Vec<TrajectoryChecks>,
    pub asymptotics: Vec<AsymptoticCoeffs>,
    pub gluing: Option<GluingReport>,
    pub kuranishi: Option<KuranishiReport>,
    pub homology: Option<HomologyReport>,
    pub checks: Vec<CheckResult>,
    pub trajectories: Vec<Polyline>,
    pub timings: BTreeMap<String, f64>,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.status == "passed"
    }

    /// Serialized report without the timing block, for determinism checks.
    pub fn without_timings(&self) -> Result<String> {
        let mut r = self.clone();
        r.timings.clear();
        Ok(serde_json::to_string_pretty(&r)?)
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("report.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    fn check(&mut self, name: &str, passed: bool, detail: String) {
        self.checks.push(CheckResult { name: name.into(), passed, detail });
    }
}

fn tag(module: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::NotTransverse(m) => Error::NotTransverse(format!("[{module}] {m}")),
        Error::IncompleteData(m) => Error::IncompleteData(format!("[{module}] {m}")),
        other => other,
    }
}

pub fn build_setup(cfg: &RunConfig) -> Result<MorseSetup> {
    match &cfg.custom_setup {
        Some(c) => MorseSetup::new(&c.name, c.spec.clone(), c.chart_radius.unwrap_or(crate::geometry::DEFAULT_CHART_RADIUS)),
        None => make_builtin_setup(&cfg.setup),
    }
}

/// Run the whole pipeline. Errors end up in the report with status `failed`;
/// the report is written to the configured output directory if any.
pub fn run_example(cfg: &RunConfig) -> RunReport {
    let mut report = RunReport {
        schema_version: SCHEMA_VERSION.into(),
        status: "failed".into(),
        error: None,
        config: cfg.clone(),
        setup: None,
        moduli: Vec::new(),
        linearization: Vec::new(),
        clean: Vec::new(),
        trajectory_checks: Vec::new(),
        asymptotics: Vec::new(),
        gluing: None,
        kuranishi: None,
        homology: None,
        checks: Vec::new(),
        trajectories: Vec::new(),
        timings: BTreeMap::new(),
    };
    match run_inner(cfg, &mut report) {
        Ok(()) => {
            if report.checks.iter().all(|c| c.passed) {
                report.status = "passed".into();
            }
        }
        Err(e) => report.error = Some(format!("{}: {e}", error_kind(&e))),
    }
    if let Some(dir) = &cfg.out_dir {
        if let Err(e) = report.write(dir) {
            report.status = "failed".into();
            report.error.get_or_insert_with(|| format!("Io: {e}"));
        }
    }
    report
}

fn error_kind(e: &Error) -> String {
    let dbg = format!("{e:?}");
    dbg.split(|c: char| !c.is_alphanumeric()).next().unwrap_or("Error").to_string()
}

struct Inventory {
    moduli: Vec<ModuliSpace>,
    /// Orientation of rigid transverse trajectories by id.
    orientation: BTreeMap<String, i8>,
    /// Obstructed rigid trajectories: id -> (trajectory, fibre tails at both ends).
    obstructed: BTreeMap<String, (Trajectory, AsymptoticCoeffs, AsymptoticCoeffs)>,
}

fn timed<T>(report: &mut RunReport, name: &str, f: impl FnOnce() -> T) -> T {
    let t = Instant::now();
    let out = f();
    report.timings.insert(name.into(), t.elapsed().as_secs_f64());
    out
}

fn run_inner(cfg: &RunConfig, report: &mut RunReport) -> Result<()> {
    cfg.validate()?;
    let setup = timed(report, "setup", || build_setup(cfg)).map_err(tag("geometry"))?;
    let eps = cfg.epsilon.unwrap_or_else(|| default_epsilon(&setup));
    report.setup = Some(SetupSummary {
        name: setup.name.clone(),
        dim: setup.dim(),
        critical_points: setup
            .critical_points
            .iter()
            .zip(&setup.normal_charts)
            .map(|(c, ch)| CritSummary {
                id: c.id.clone(),
                index: c.morse_index,
                value: c.value,
                eigenvalues: c.eigenvalues.clone(),
                chart_radius: ch.radius,
                f_residual: ch.f_residual,
                metric_residual: ch.metric_residual,
            })
            .collect(),
        euler_characteristic: setup.euler_characteristic(),
        epsilon: eps,
    });

    let moduli = timed(report, "moduli", || collect_moduli(&setup, eps, &cfg.flow))?;
    let trajs: Vec<&Trajectory> = moduli.iter().flat_map(|m| m.trajectories()).collect();
    report.trajectories = trajs.iter().map(|t| polyline(t)).collect();

    let summaries = timed(report, "linearization", || trajs.par_iter().map(|t| summarize(&setup, t, &cfg.operator, cfg.refine)).collect::<Result<Vec<_>>>())?;
    let mut violations = Vec::new();
    for s in &summaries {
        if s.fredholm_index != s.expected_index {
            violations.push(format!("{}: ker - coker = {} but index difference {}", s.trajectory, s.fredholm_index, s.expected_index));
        }
        if let Some(r) = s.refined_dims {
            if r != (s.dim_ker, s.dim_coker) {
                violations.push(format!("{}: dims {:?} change to {r:?} under refinement", s.trajectory, (s.dim_ker, s.dim_coker)));
            }
        }
    }
    report.check("fredholm_index", violations.is_empty(), if violations.is_empty() { format!("{} trajectories", summaries.len()) } else { violations.join("; ") });

    let mut offset = 0;
    let mut cleans = Vec::new();
    for m in &moduli {
        let n = m.trajectories().count();
        cleans.push(check_clean(&moduli_label(&setup, m.source, m.target), m, &summaries[offset..offset + n]));
        offset += n;
    }

    let checks = timed(report, "trajectory_checks", || trajectory_checks(&setup, &trajs, eps, cfg))?;
    let worst = |f: fn(&TrajectoryChecks) -> f64| checks.iter().map(f).fold(0.0, f64::max);
    let (we, wg, wa) = (worst(|c| c.energy_defect), worst(|c| c.gauge_defect), worst(|c| c.adjoint_pairing));
    report.check("energy_identity", we <= cfg.checks.energy_identity, format!("max defect {we:.3e}"));
    report.check("gauge_idempotence", wg <= cfg.checks.gauge_idempotence, format!("max shift {wg:.3e}"));
    report.check("adjoint_pairing", wa <= cfg.checks.adjoint_pairing, format!("max relative defect {wa:.3e}"));
    // Defects at rounding level mean the flow is linear in the chart and there
    // is no remainder to converge.
    let fd_ok = |c: &TrajectoryChecks| (c.fd_order > 0.8 && c.fd_order < 1.2) || c.fd_defects.iter().all(|d| *d <= FD_EXACT);
    let fd_bad: Vec<&str> = checks.iter().filter(|c| !fd_ok(c)).map(|c| c.trajectory.as_str()).collect();
    let orders: Vec<f64> = checks.iter().filter(|c| c.fd_defects.iter().any(|d| *d > FD_EXACT)).map(|c| c.fd_order).collect();
    let (lo, hi) = orders.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), o| (a.min(*o), b.max(*o)));
    report.check(
        "finite_difference_order",
        fd_bad.is_empty(),
        if orders.is_empty() { "all defects at rounding level".into() } else { format!("observed orders in [{lo:.3}, {hi:.3}], {} of {} at rounding level; failing {:?}", checks.len() - orders.len(), checks.len(), fd_bad) },
    );
    report.trajectory_checks = checks;

    let inv = timed(report, "obstruction", || inventory(&setup, moduli, &cleans, cfg))?;
    report.moduli = moduli_entries(&setup, &inv, &cleans);
    report.linearization = summaries;
    report.clean = cleans;
    for (_, dm, dp) in inv.obstructed.values() {
        report.asymptotics.push(dm.clone());
        report.asymptotics.push(dp.clone());
    }

    let kur = timed(report, "kuranishi", || kuranishi_report(&setup))?;
    report.check("iterated_equals_simultaneous", kur.combinatorics.passed(), format!("{} violations", kur.combinatorics.violations.len()));
    if let (Some(c), Some(m)) = (&kur.cover, &kur.mutant_cover) {
        report.check("chart_cover", c.valid && !m.valid, format!("reference valid {}, mutant valid {}", c.valid, m.valid));
    }
    report.kuranishi = Some(kur);

    let (gl, contributions) = timed(report, "gluing", || gluing_report(&setup, &inv, cfg))?;
    let margins = gl.pairs.iter().all(|p| p.count.margin_ok);
    report.check("gluing_margin", margins, format!("{} broken pairs", gl.pairs.len()));
    report.gluing = Some(gl);

    let hom = timed(report, "homology", || homology_report(&setup, &inv, contributions, cfg.ring)).map_err(tag("homology"))?;
    report.check("d_squared", hom.d_squared_zero, format!("ring {:?}", hom.ring));
    report.check("rings_consistent", hom.rings_consistent, format!("Z {:?}, Z/2 {:?}", hom.betti, hom.betti_z2));
    report.homology = Some(hom);
    Ok(())
}

fn polyline(t: &Trajectory) -> Polyline {
    let stride = 10;
    let mut idx: Vec<usize> = (0..t.len()).step_by(stride).collect();
    if *idx.last().unwrap() != t.len() - 1 {
        idx.push(t.len() - 1);
    }
    Polyline {
        id: t.id.clone(),
        s: idx.iter().map(|&i| t.samples[i].s).collect(),
        points: idx.iter().map(|&i| t.samples[i].ambient.iter().copied().collect()).collect(),
    }
}

/// Every `M(x, y)` with `f(x) > f(y)`, one sweep per source.
pub fn collect_moduli(setup: &MorseSetup, eps: f64, flow: &FlowConfig) -> Result<Vec<ModuliSpace>> {
    let n = setup.critical_points.len();
    let mut out = Vec::new();
    for p in 0..n {
        let targets: Vec<usize> = (0..n).filter(|&q| setup.critical_points[p].value > setup.critical_points[q].value).collect();
        if targets.is_empty() {
            continue;
        }
        let sweep = sweep_source(setup, p, flow).map_err(tag("trajectories"))?;
        for q in targets {
            out.push(moduli_from_sweep(setup, &sweep, q, eps, flow)?);
        }
    }
    Ok(out)
}

fn trajectory_checks(setup: &MorseSetup, trajs: &[&Trajectory], eps: f64, cfg: &RunConfig) -> Result<Vec<TrajectoryChecks>> {
    trajs
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let energy_defect = (t.energy() - t.action()).abs();
            let again = normalize_representative(setup, t, eps)?;
            let gauge_defect = (again.samples[0].s - t.samples[0].s).abs();
            let op = linearize(setup, t, &cfg.operator)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let adjoint_pairing = op.adjoint_pairing_defect(&mut rng, cfg.checks.adjoint_pairs);
            let (a, b) = (t.samples[0].s, t.samples[t.len() - 1].s);
            let field = fd_field(setup.dim(), a, b);
            let fd_defects = cfg.checks.fd_steps.iter().map(|&h| finite_difference_defect(setup, t, &field, h)).collect::<Result<Vec<_>>>()?;
            let fd_order = fd_order(&cfg.checks.fd_steps, &fd_defects);
            Ok(TrajectoryChecks {
                trajectory: t.id.clone(),
                energy: t.energy(),
                energy_defect,
                gauge_defect,
                adjoint_pairing,
                fd_defects,
                fd_order,
            })
        })
        .collect()
}

/// Smooth test field with its derivative, supported in the middle half.
pub fn fd_field(dim: usize, a: f64, b: f64) -> impl Fn(f64) -> (nalgebra::DVector<f64>, nalgebra::DVector<f64>) {
    move |s: f64| {
        let (lo, hi) = (a + 0.25 * (b - a), b - 0.25 * (b - a));
        let w = hi - lo;
        let x = (s - lo) / w;
        if x <= 0.0 || x >= 1.0 {
            return (nalgebra::DVector::zeros(dim), nalgebra::DVector::zeros(dim));
        }
        let g = x * (1.0 - x);
        let bump = (4.0 - 1.0 / g).exp();
        let dbump = bump * (1.0 - 2.0 * x) / (g * g) / w;
        let z = nalgebra::DVector::from_fn(dim, |i, _| (1.0 + i as f64) * 0.5);
        (&z * bump, z * dbump)
    }
}

/// Least-squares slope of `log defect` against `log h`.
pub fn fd_order(hs: &[f64], defects: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = hs.iter().zip(defects).filter(|(_, d)| **d > 0.0).map(|(h, d)| (h.ln(), d.ln())).collect();
    let n = pts.len() as f64;
    if n < 2.0 {
        return f64::NAN;
    }
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let (sxx, sxy) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0 * p.0, a.1 + p.0 * p.1));
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

fn inventory(setup: &MorseSetup, moduli: Vec<ModuliSpace>, cleans: &[CleanReport], cfg: &RunConfig) -> Result<Inventory> {
    let mut orientation = BTreeMap::new();
    let mut obstructed = BTreeMap::new();
    for (m, clean) in moduli.iter().zip(cleans) {
        let diff = setup.critical_points[m.source].morse_index as i64 - setup.critical_points[m.target].morse_index as i64;
        for (comp, cut) in m.components.iter().zip(&clean.components) {
            if comp.kind != ComponentKind::Isolated {
                continue;
            }
            let t = &comp.members[0];
            match (diff, cut.status) {
                (1, CutStatus::Transverse) => {
                    let op = linearize(setup, t, &cfg.operator)?;
                    orientation.insert(t.id.clone(), transport_sign(setup, t, &op, &[]).map_err(tag("orientation"))?);
                }
                (0, CutStatus::Clean) => {
                    let (fiber, op, _) = compute_obstruction_fiber(setup, t, &cfg.operator).map_err(tag("linearized"))?;
                    if fiber.rank() != 1 {
                        return Err(Error::UnsupportedRank(fiber.rank()));
                    }
                    let dm = extract_cokernel_coeffs(setup, t, &op, &fiber.basis[0], End::Minus, &cfg.asymptotics).map_err(tag("asymptotics"))?;
                    let dp = extract_cokernel_coeffs(setup, t, &op, &fiber.basis[0], End::Plus, &cfg.asymptotics).map_err(tag("asymptotics"))?;
                    obstructed.insert(t.id.clone(), (t.clone(), dm, dp));
                }
                _ => {}
            }
        }
    }
    Ok(Inventory { moduli, orientation, obstructed })
}

fn moduli_entries(setup: &MorseSetup, inv: &Inventory, cleans: &[CleanReport]) -> Vec<ModuliEntry> {
    inv.moduli
        .iter()
        .zip(cleans)
        .map(|(m, clean)| {
            let (cp, cq) = (&setup.critical_points[m.source], &setup.critical_points[m.target]);
            ModuliEntry {
                label: moduli_label(setup, m.source, m.target),
                source: cp.id.clone(),
                target: cq.id.clone(),
                index_difference: cp.morse_index as i64 - cq.morse_index as i64,
                expected_dim: m.expected_dim,
                status: clean.status,
                components: m
                    .components
                    .iter()
                    .zip(&clean.components)
                    .map(|(c, cut)| ComponentEntry {
                        id: c.id.clone(),
                        kind: c.kind,
                        members: c.members.len(),
                        near_breaking: c.near_breaking,
                        closed: c.closed,
                        status: cut.status,
                        dim_ker: cut.dim_ker.clone(),
                        dim_coker: cut.dim_coker.clone(),
                        orientation: inv.orientation.get(&c.id).copied(),
                        obstruction_rank: inv.obstructed.contains_key(&c.id).then_some(1),
                    })
                    .collect(),
            }
        })
        .collect()
}

fn find(inv: &Inventory, a: usize, b: usize) -> Option<&ModuliSpace> {
    inv.moduli.iter().find(|m| m.source == a && m.target == b)
}

/// Start of the gluing region and the end of the counting interval around a
/// middle critical point.
pub fn gluing_range(setup: &MorseSetup, middle: usize, g: &GluingConfig) -> (f64, f64) {
    let lam = setup.critical_points[middle].eigenvalues.iter().map(|l| l.abs()).fold(f64::INFINITY, f64::min);
    let r = g.start_efolds / lam;
    (r, r + g.delta2 + 10.0 / lam)
}

fn gluing_report(setup: &MorseSetup, inv: &Inventory, cfg: &RunConfig) -> Result<(GluingReport, Vec<Contribution>)> {
    let crit = &setup.critical_points;
    let mut contributions = Vec::new();
    for m in &inv.moduli {
        for c in &m.components {
            if let Some(&o) = inv.orientation.get(&c.id) {
                contributions.push(Contribution { from: crit[m.source].id.clone(), to: crit[m.target].id.clone(), source: c.id.clone(), sign: o });
            }
        }
    }
    let mut out = GluingReport { perturbation: None, pairs: Vec::new(), three_level: Vec::new(), family_ends: Vec::new() };
    for m in &inv.moduli {
        if crit[m.source].morse_index == crit[m.target].morse_index + 2 {
            for c in m.components.iter().filter(|c| c.kind == ComponentKind::Family && !c.ends.is_empty()) {
                out.family_ends.push(match_family_ends(setup, c, &inv.moduli));
            }
        }
    }
    if inv.obstructed.is_empty() {
        return Ok((out, contributions));
    }
    let fibers: Vec<(String, usize)> = inv.obstructed.keys().map(|k| (k.clone(), 1)).collect();
    let mut choices = BTreeMap::new();
    for (id, _) in &fibers {
        choices.insert(id.clone(), cfg.sigma.get(id).cloned().unwrap_or_else(|| vec![cfg.default_sigma]));
    }
    let mut by_middle: BTreeMap<usize, Vec<BrokenPair>> = BTreeMap::new();
    let transverse_at = |a: usize, b: usize| -> Vec<&Trajectory> {
        find(inv, a, b).map(|m| m.components.iter().filter(|c| inv.orientation.contains_key(&c.id)).map(|c| &c.members[0]).collect()).unwrap_or_default()
    };
    let n = crit.len();
    for (vid, (v, dm, dp)) in &inv.obstructed {
        let (a, b) = (v.source, v.target);
        let cm = extract_trajectory_coeffs(setup, v, End::Minus, &cfg.asymptotics)?;
        let cp = extract_trajectory_coeffs(setup, v, End::Plus, &cfg.asymptotics)?;
        for x in (0..n).filter(|&x| crit[x].morse_index == crit[a].morse_index + 1) {
            for u in transverse_at(x, a) {
                let cu = extract_trajectory_coeffs(setup, u, End::Plus, &cfg.asymptotics)?;
                let pair = build_broken_pair(&u.id, vid, a, &cu, &cm, &[], std::slice::from_ref(dm), (inv.orientation.get(&u.id).copied(), None));
                by_middle.entry(a).or_default().push(pair);
            }
        }
        for y in (0..n).filter(|&y| crit[y].morse_index + 1 == crit[b].morse_index) {
            for w in transverse_at(b, y) {
                let cw = extract_trajectory_coeffs(setup, w, End::Minus, &cfg.asymptotics)?;
                let pair = build_broken_pair(vid, &w.id, b, &cp, &cw, std::slice::from_ref(dp), &[], (None, inv.orientation.get(&w.id).copied()));
                by_middle.entry(b).or_default().push(pair);
            }
        }
    }
    let mut pert: Option<PerturbationSection> = None;
    let owner = |p: &BrokenPair| -> (usize, usize) {
        let first = |id: &str| inv.moduli.iter().find(|m| m.components.iter().any(|c| c.id == id)).map(|m| (m.source, m.target)).unwrap();
        let (a, _) = first(&p.upper);
        let (_, b) = first(&p.lower);
        (a, b)
    };
    for (middle, pairs) in &by_middle {
        let (t_min, t_max) = gluing_range(setup, *middle, &cfg.gluing);
        let ramp = Ramp { start: t_min, delta1: cfg.gluing.delta1, delta2: cfg.gluing.delta2 };
        let section = build_perturbation_section(&fibers, &choices, ramp, cfg.gluing.c1_bound).map_err(tag("gluing"))?;
        for pair in pairs {
            let count = count_perturbed_gluings(pair, &section, t_max, cfg.gluing.grid).map_err(tag("gluing"))?;
            let (x, y) = owner(pair);
            for z in &count.zeros {
                contributions.push(Contribution { from: crit[x].id.clone(), to: crit[y].id.clone(), source: format!("{} @ T={:.6}", pair.label(), z.t), sign: z.sign });
            }
            let leading = linearized_obstruction_section(pair, t_min)?;
            out.pairs.push(GluingEntry {
                pair: pair.clone(),
                contributes_to: (crit[x].id.clone(), crit[y].id.clone()),
                leading_s0: leading.plus.iter().chain(&leading.minus).copied().next().unwrap_or(0.0),
                count,
                t_min,
                t_max,
            });
        }
        pert.get_or_insert(section);
    }
    // Three-level chains through an obstructed middle piece.
    for up in out.pairs.iter().filter(|p| !p.pair.plus_terms.is_empty()) {
        for down in out.pairs.iter().filter(|p| !p.pair.minus_terms.is_empty() && p.pair.upper == up.pair.lower) {
            let Some(model) = ThreeLevelModel::from_pairs(&up.pair, &down.pair) else { continue };
            let (lo, hi) = (up.t_min.min(down.t_min), up.t_max.max(down.t_max));
            let far = hi + 40.0;
            let limit_defect = (0..=20)
                .map(|i| {
                    let t = lo + (hi - lo) * i as f64 / 20.0;
                    let two = linearized_obstruction_section(&up.pair, t).map(|v| v.plus[0]).unwrap_or(0.0);
                    (model.value(t, far) - two).abs()
                })
                .fold(0.0, f64::max);
            out.three_level.push(ThreeLevelEntry {
                chain: vec![up.pair.upper.clone(), up.pair.lower.clone(), down.pair.lower.clone()],
                zero_locus_points: model.zero_locus(lo, hi, 50).len(),
                limit_defect,
            });
        }
    }
    out.perturbation = pert;
    Ok((out, contributions))
}

fn kuranishi_report(setup: &MorseSetup) -> Result<KuranishiReport> {
    let catalog = ModuliCatalog::from_setup(setup);
    let strata = strata_report(&catalog)?;
    let combinatorics = check_iterated_equals_simultaneous(&catalog, 4)?;
    let (mut cover, mut mutant_cover) = (None, None);
    if let Some(top) = catalog.entries.last() {
        if let (Ok((charts, domain)), Ok((mutant, _))) = (reference_layout(&catalog, top.index, false), reference_layout(&catalog, top.index, true)) {
            cover = Some(validate_chart_cover(&catalog, &charts, &domain)?);
            mutant_cover = Some(validate_chart_cover(&catalog, &mutant, &domain)?);
        }
    }
    Ok(KuranishiReport { catalog, strata, combinatorics, cover, mutant_cover })
}

/// Index-difference-one pairs whose count the two-level gluing model does
/// not account for.
fn unresolved_pairs(setup: &MorseSetup, inv: &Inventory) -> Vec<String> {
    let crit = &setup.critical_points;
    let n = crit.len();
    let nonempty = |a: usize, b: usize| find(inv, a, b).is_some_and(|m| !m.is_empty());
    let mut gaps = Vec::new();
    for x in 0..n {
        for y in 0..n {
            if crit[x].morse_index != crit[y].morse_index + 1 || crit[x].value <= crit[y].value {
                continue;
            }
            let label = moduli_label(setup, x, y);
            if let Some(m) = find(inv, x, y) {
                for c in &m.components {
                    if !inv.orientation.contains_key(&c.id) {
                        gaps.push(format!("{label}: component {} is not transversely cut out", c.id));
                    }
                }
            }
            // Breakings with three or more pieces.
            let mut stack = vec![(x, 0usize)];
            while let Some((at, depth)) = stack.pop() {
                for z in 0..n {
                    if crit[z].value >= crit[at].value || crit[z].value <= crit[y].value || !nonempty(at, z) {
                        continue;
                    }
                    if depth >= 1 && nonempty(z, y) {
                        gaps.push(format!("{label}: broken chain with {} pieces", depth + 2));
                    }
                    stack.push((z, depth + 1));
                }
            }
        }
    }
    gaps.sort();
    gaps.dedup();
    gaps
}

fn homology_report(setup: &MorseSetup, inv: &Inventory, contributions: Vec<Contribution>, ring: Ring) -> Result<HomologyReport> {
    let gaps = unresolved_pairs(setup, inv);
    if !gaps.is_empty() {
        return Err(Error::IncompleteData(gaps.join("; ")));
    }
    let generators: Vec<(String, usize)> = setup.critical_points.iter().map(|c| (c.id.clone(), c.morse_index)).collect();
    assemble_homology(&generators, &contributions, ring)
}

fn assemble_homology(generators: &[(String, usize)], contributions: &[Contribution], ring: Ring) -> Result<HomologyReport> {
    let cc = build_chain_complex(generators, contributions, ring)?;
    let d_squared_zero = verify_d_squared(&cc);
    let groups = homology_ranks(&cc)?;
    let zcc = build_chain_complex(generators, contributions, Ring::Z)?;
    let z2cc = build_chain_complex(generators, contributions, Ring::Z2)?;
    let zg = homology_ranks(&zcc)?;
    let z2g = homology_ranks(&z2cc)?;
    // Universal coefficients: b_k(Z/2) = b_k + #even torsion in H_k + #even torsion in H_{k-1}.
    let even = |g: &HomologyGroup| g.torsion.iter().filter(|t| *t % 2 == 0).count();
    let rings_consistent = (0..zg.len()).all(|k| z2g[k].rank == zg[k].rank + even(&zg[k]) + if k > 0 { even(&zg[k - 1]) } else { 0 });
    Ok(HomologyReport {
        ring,
        euler_characteristic: cc.euler_characteristic(),
        d_squared_zero,
        betti: betti(&groups),
        betti_z2: betti(&z2g),
        groups,
        complex: cc,
        rings_consistent,
    })
}

/// Recount every broken pair of a finished run under different perturbation
/// values and rebuild the homology, without recomputing trajectories.
/// Components missing from `sigma` keep the values the run used.
pub fn reglue(report: &RunReport, sigma: &BTreeMap<String, Vec<f64>>) -> Result<(Vec<GluingEntry>, HomologyReport)> {
    let missing = |what: &str| Error::IncompleteData(format!("report has no {what}"));
    let gl = report.gluing.as_ref().ok_or_else(|| missing("gluing data"))?;
    let setup = report.setup.as_ref().ok_or_else(|| missing("setup summary"))?;
    let cfg = &report.config.gluing;
    let mut choices = gl.perturbation.as_ref().map(|p| p.sigma.clone()).unwrap_or_default();
    for (k, v) in sigma {
        choices.insert(k.clone(), v.clone());
    }
    let fibers: Vec<(String, usize)> = choices.iter().map(|(k, v)| (k.clone(), v.len())).collect();
    let mut contributions: Vec<Contribution> = report
        .moduli
        .iter()
        .filter(|m| m.index_difference == 1)
        .flat_map(|m| m.components.iter().filter_map(move |c| c.orientation.map(|o| Contribution { from: m.source.clone(), to: m.target.clone(), source: c.id.clone(), sign: o })))
        .collect();
    let mut pairs = Vec::new();
    for e in &gl.pairs {
        let ramp = Ramp { start: e.t_min, delta1: cfg.delta1, delta2: cfg.delta2 };
        let section = build_perturbation_section(&fibers, &choices, ramp, cfg.c1_bound)?;
        let count = count_perturbed_gluings(&e.pair, &section, e.t_max, cfg.grid)?;
        for z in &count.zeros {
            contributions.push(Contribution {
                from: e.contributes_to.0.clone(),
                to: e.contributes_to.1.clone(),
                source: format!("{} @ T={:.6}", e.pair.label(), z.t),
                sign: z.sign,
            });
        }
        pairs.push(GluingEntry { count, ..e.clone() });
    }
    let generators: Vec<(String, usize)> = setup.critical_points.iter().map(|c| (c.id.clone(), c.index)).collect();
    let hom = assemble_homology(&generators, &contributions, report.config.ring)?;
    Ok((pairs, hom))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    SectionCurves,
    Trajectories,
}

impl std::str::FromStr for PlotKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "section_curves" | "section-curves" => Ok(Self::SectionCurves),
            "trajectories" => Ok(Self::Trajectories),
            other => Err(Error::Config(format!("unknown plot kind {other}"))),
        }
    }
}

fn file_stem(id: &str) -> String {
    id.replace("->", "_to_").chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' }).collect()
}

/// Write one CSV per curve into `dir`.
pub fn emit_plot_data(report: &RunReport, what: PlotKind, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    match what {
        PlotKind::SectionCurves => {
            let gl = report.gluing.as_ref().filter(|g| !g.pairs.is_empty()).ok_or_else(|| Error::MissingSeries("section curves".into()))?;
            let pert = gl.perturbation.as_ref().ok_or_else(|| Error::MissingSeries("perturbation section".into()))?;
            for (i, e) in gl.pairs.iter().enumerate() {
                let owner = if e.pair.plus_terms.is_empty() { &e.pair.upper } else { &e.pair.lower };
                let sigma = pert.sigma.get(owner).and_then(|v| v.first().copied()).unwrap_or(0.0);
                let ramp = Ramp { start: e.t_min, ..pert.ramp };
                let mut csv = format!("# broken pair {}; columns: T, s0, sigma, sum\nT,s0,sigma,sum\n", e.pair.label());
                let n = 400;
                for k in 0..=n {
                    let t = e.t_min + (e.t_max - e.t_min) * k as f64 / n as f64;
                    let v = linearized_obstruction_section(&e.pair, t)?;
                    let s0 = v.plus.iter().chain(&v.minus).copied().next().unwrap_or(0.0);
                    let sg = ramp.value(t) * sigma;
                    csv += &format!("{t:.9},{s0:.12e},{sg:.12e},{:.12e}\n", s0 + sg);
                }
                let path = dir.join(format!("section_{i:02}_{}.csv", file_stem(&format!("{}__{}", e.pair.upper, e.pair.lower))));
                std::fs::write(&path, csv)?;
                out.push(path);
            }
        }
        PlotKind::Trajectories => {
            if report.trajectories.is_empty() {
                return Err(Error::MissingSeries("trajectories".into()));
            }
            for t in &report.trajectories {
                let m = t.points.first().map_or(0, |p| p.len());
                let mut csv = format!("# trajectory {}; columns: s, X0..X{}\ns", t.id, m.saturating_sub(1));
                for j in 0..m {
                    csv += &format!(",X{j}");
                }
                csv.push('\n');
                for (s, p) in t.s.iter().zip(&t.points) {
                    csv += &format!("{s:.9}");
                    for v in p {
                        csv += &format!(",{v:.12}");
                    }
                    csv.push('\n');
                }
                let path = dir.join(format!("traj_{}.csv", file_stem(&t.id)));
                std::fs::write(&path, csv)?;
                out.push(path);
            }
        }
    }
    Ok(out)
}

/// Quick in-process property checks that need no trajectory computation.
pub fn selftest() -> Vec<CheckResult> {
    let mut out = Vec::new();
    let mut push = |name: &str, r: Result<(bool, String)>| {
        let (passed, detail) = r.unwrap_or_else(|e| (false, e.to_string()));
        out.push(CheckResult { name: name.into(), passed, detail });
    };
    push("section_oracle", (|| {
        let pair = crate::gluing::BrokenPair {
            upper: "a".into(),
            lower: "b".into(),
            middle: 0,
            upper_sign: Some(1),
            lower_sign: None,
            plus_terms: vec![vec![
                crate::gluing::ExpTerm { mode: 1, coefficient: 1.7, rate: 4.0 },
                crate::gluing::ExpTerm { mode: 2, coefficient: -0.3, rate: 12.0 },
            ]],
            minus_terms: Vec::new(),
        };
        let mut worst: f64 = 0.0;
        for k in 0..20 {
            let t = 0.1 + 0.25 * k as f64;
            let direct = 1.7 * (-4.0 * t).exp() - 0.3 * (-12.0 * t).exp();
            worst = worst.max((linearized_obstruction_section(&pair, t)?.plus[0] - direct).abs());
        }
        Ok((worst <= 1e-12, format!("max difference {worst:.2e}")))
    })());
    push("smith_torsion", (|| {
        let m = crate::homology::IntMatrix::from_rows(&[vec![2]]);
        let inv = crate::homology::smith_invariants(&m)?;
        Ok((inv == vec![2], format!("invariants {inv:?}")))
    })());
    for name in ["upright_torus", "upright_genus2"] {
        push(&format!("contractions_{name}"), (|| {
            let setup = make_builtin_setup(name)?;
            let cat = ModuliCatalog::from_setup(&setup);
            let rep = check_iterated_equals_simultaneous(&cat, 4)?;
            Ok((rep.passed(), format!("{} tuples, {} substitutions, {} violations", rep.tuples, rep.substitutions, rep.violations.len())))
        })());
    }
    push("chart_cover", (|| {
        let setup = make_builtin_setup("upright_torus")?;
        let cat = ModuliCatalog::from_setup(&setup);
        let (c, d) = reference_layout(&cat, 6, false)?;
        let (m, _) = reference_layout(&cat, 6, true)?;
        let (a, b) = (validate_chart_cover(&cat, &c, &d)?, validate_chart_cover(&cat, &m, &d)?);
        Ok((a.valid && !b.valid, format!("reference {}, mutant {}", a.valid, b.valid)))
    })());
    out
}
