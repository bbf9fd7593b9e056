//! Embedded Dormand–Prince 5(4) stepper with the standard fourth-order dense
//! output. Only the first `error_components` entries of the state enter the
//! error norm, so passive quantities (for example a transported frame) ride
//! along without influencing the step sequence.

use nalgebra::DVector;

use crate::error::{Error, Result};

const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

#[derive(Clone, Debug)]
pub struct StepperConfig {
    pub rtol: f64,
    pub atol: f64,
    pub h_init: f64,
    pub h_max: f64,
    pub h_min: f64,
    pub error_components: usize,
}

impl StepperConfig {
    pub fn new(tol: f64, h_max: f64, error_components: usize) -> Self {
        Self {
            rtol: tol,
            atol: tol,
            h_init: 1e-3,
            h_max,
            h_min: 1e-12,
            error_components,
        }
    }
}

/// One accepted step together with its continuous extension.
#[derive(Clone, Debug)]
pub struct DenseStep {
    pub t0: f64,
    pub h: f64,
    coeffs: [DVector<f64>; 5],
}

impl DenseStep {
    pub fn t1(&self) -> f64 {
        self.t0 + self.h
    }

    pub fn eval(&self, t: f64) -> DVector<f64> {
        let th = (t - self.t0) / self.h;
        let th1 = 1.0 - th;
        let [r1, r2, r3, r4, r5] = &self.coeffs;
        r1 + (r2 + (r3 + (r4 + r5 * th1) * th) * th1) * th
    }
}

pub struct StepResult {
    pub y1: DVector<f64>,
    pub k7: DVector<f64>,
    pub err: f64,
    pub dense: DenseStep,
}

/// Attempt a single step of size `h` from `(t, y)` with first stage `k1`.
pub fn try_step<F>(f: &mut F, t: f64, y: &DVector<f64>, k1: &DVector<f64>, h: f64, cfg: &StepperConfig) -> Result<StepResult>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    let mut k: Vec<DVector<f64>> = Vec::with_capacity(7);
    k.push(k1.clone());
    for s in 1..7 {
        let mut ys = y.clone();
        for (j, kj) in k.iter().enumerate() {
            let a = A[s][j];
            if a != 0.0 {
                ys.axpy(h * a, kj, 1.0);
            }
        }
        k.push(f(t + C[s] * h, &ys)?);
    }
    let mut y1 = y.clone();
    for j in 0..6 {
        if A[6][j] != 0.0 {
            y1.axpy(h * A[6][j], &k[j], 1.0);
        }
    }
    let m = cfg.error_components.min(y.len()).max(1);
    let mut acc = 0.0;
    for i in 0..m {
        let mut e = 0.0;
        for j in 0..7 {
            e += E[j] * k[j][i];
        }
        let sc = cfg.atol + cfg.rtol * y[i].abs().max(y1[i].abs());
        acc += (h * e / sc).powi(2);
    }
    let err = (acc / m as f64).sqrt();

    let ydiff = &y1 - y;
    let bspl = &k[0] * h - &ydiff;
    let r4 = &ydiff - &k[6] * h - &bspl;
    let mut r5 = DVector::zeros(y.len());
    for j in 0..7 {
        if D[j] != 0.0 {
            r5.axpy(h * D[j], &k[j], 1.0);
        }
    }
    let dense = DenseStep {
        t0: t,
        h,
        coeffs: [y.clone(), ydiff, bspl, r4, r5],
    };
    let k7 = k.pop().unwrap();
    Ok(StepResult { y1, k7, err, dense })
}

/// Step-size proposal after a step with scaled error `err`.
pub fn next_step_size(h: f64, err: f64, cfg: &StepperConfig) -> f64 {
    let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
    (h * fac).min(cfg.h_max)
}

/// Integrate `y' = f(t, y)` from `t0` to `t1` and return the final state.
/// Convenience wrapper used by tests and by the chart-free model problems.
pub fn integrate<F>(mut f: F, t0: f64, y0: DVector<f64>, t1: f64, cfg: &StepperConfig) -> Result<DVector<f64>>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    let dir = (t1 - t0).signum();
    let mut t = t0;
    let mut y = y0;
    let mut h = cfg.h_init.min((t1 - t0).abs());
    let mut k1 = f(t, &y)?;
    while (t1 - t) * dir > 1e-14 {
        h = h.min((t1 - t).abs());
        if h < cfg.h_min {
            return Err(Error::StepUnderflow(t));
        }
        match try_step(&mut f, t, &y, &k1, dir * h, cfg) {
            Ok(r) if r.err <= 1.0 => {
                t += dir * h;
                y = r.y1;
                k1 = r.k7;
                h = next_step_size(h, r.err, cfg);
            }
            Ok(r) => h = next_step_size(h, r.err, cfg).min(0.5 * h),
            Err(Error::OutOfAtlas) => h *= 0.5,
            Err(e) => return Err(e),
        }
    }
    Ok(y)
}
