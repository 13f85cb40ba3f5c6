//! Verner's efficient 6(5) pair with a continuous 5th-order extension.
//!
//! Nine stages, the last evaluated at the accepted solution (FSAL), and one
//! extra stage at `c = 1/2` for dense output.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const STAGES: usize = 9;
const DENSE_STAGES: usize = 10;
const DENSE_ORDER: usize = 6;

const C: [f64; STAGES] = [0.0, 0.06, 0.095_933_333_333_333_33, 0.1439, 0.4973, 0.9725, 0.9995, 1.0, 1.0];

const A: [[f64; STAGES]; STAGES] = [
    [0.0; 9],
    [0.06, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [
        0.019_239_962_962_962_962,
        0.076_693_370_370_370_37,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
    ],
    [0.035975, 0.0, 0.107925, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [
        1.318_683_415_233_148_4,
        0.0,
        -5.042_058_063_628_562,
        4.220_674_648_395_414,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
    ],
    [
        -41.872_591_664_327_516,
        0.0,
        159.432_562_163_137_5,
        -122.119_213_565_010_03,
        5.531_743_066_200_054,
        0.0,
        0.0,
        0.0,
        0.0,
    ],
    [
        -54.430_156_935_316_504,
        0.0,
        207.067_251_365_018_48,
        -158.610_813_784_59,
        6.991_816_585_950_242,
        -0.018_597_231_062_203_234,
        0.0,
        0.0,
        0.0,
    ],
    [
        -54.663_741_787_281_98,
        0.0,
        207.952_806_255_389_36,
        -159.288_957_474_499_5,
        7.018_743_740_796_944,
        -0.018_338_785_905_045_722,
        -0.000_511_948_499_788_209_9,
        0.0,
        0.0,
    ],
    B_HIGH,
];

const B_HIGH: [f64; STAGES] = [
    0.034_389_578_683_570_36,
    0.0,
    0.0,
    0.258_262_455_563_350_3,
    0.420_937_118_967_353_7,
    4.405_396_469_669_31,
    -176.483_119_024_298_65,
    172.364_133_401_415_07,
    0.0,
];

const B_LOW: [f64; STAGES] = [
    0.049_099_676_483_824_9,
    0.0,
    0.0,
    0.225_111_222_951_652_42,
    0.469_468_225_302_956_2,
    0.806_579_224_998_886_8,
    0.0,
    -0.607_119_489_177_796,
    0.056_861_139_440_475_696,
];

const C_DENSE: f64 = 0.5;

const A_DENSE: [f64; DENSE_STAGES] = [
    0.016_524_159_013_572_806,
    0.0,
    0.0,
    0.305_312_818_751_417_9,
    0.207_120_093_820_197_9,
    -1.293_879_140_655_123,
    57.119_884_115_881_49,
    -55.879_792_075_109_32,
    0.024_830_028_297_766_014,
    0.0,
];

/// `B_DENSE[i][j]` multiplies `s^(j+1)` in the weight of stage `i`.
const B_DENSE: [[f64; DENSE_ORDER]; DENSE_STAGES] = [
    [
        1.0,
        -5.308_169_607_103_577,
        10.181_680_448_958_68,
        -7.520_036_991_611_715,
        0.934_048_536_863_116_1,
        0.746_867_191_577_065,
    ],
    [0.0; 6],
    [0.0; 6],
    [
        0.0,
        6.272_050_253_212_501,
        -16.026_181_474_677_46,
        12.844_356_324_519_618,
        -1.148_794_504_476_759_1,
        -1.683_168_143_014_549_8,
    ],
    [
        0.0,
        6.876_491_702_846_304,
        -24.635_767_260_846_333,
        33.210_786_483_797_17,
        -17.494_615_282_636_44,
        2.464_041_475_806_649_6,
    ],
    [
        0.0,
        -35.544_451_710_599_6,
        165.701_617_019_024_2,
        -385.463_539_549_114_3,
        442.432_413_701_570_17,
        -182.720_642_991_211_2,
    ],
    [
        0.0,
        1_918.654_856_698_011_4,
        -9_268.121_508_966_042,
        20_858.337_028_772_55,
        -22_645.827_671_584_81,
        8_960.474_176_055_992,
    ],
    [
        0.0,
        -1_883.069_802_132_718_2,
        9_101.025_187_200_634,
        -20_473.188_551_959_534,
        22_209.765_551_256_532,
        -8_782.168_250_963_5,
    ],
    [
        0.0,
        0.119_024_796_351_236_43,
        -0.125_026_967_050_393_76,
        1.779_956_919_394_999_1,
        -4.660_932_123_043_763,
        2.886_977_374_347_921,
    ],
    [0.0, -8.0, 32.0, -40.0, 16.0, 0.0],
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegratorOptions {
    pub atol: f64,
    pub rtol: f64,
    /// Initial step; chosen automatically when `None`.
    pub h_init: Option<f64>,
    /// Smallest step relative to the interval length before giving up.
    pub h_min_rel: f64,
    pub max_steps: usize,
}

impl Default for IntegratorOptions {
    fn default() -> Self {
        IntegratorOptions {
            atol: 1e-10,
            rtol: 1e-10,
            h_init: None,
            h_min_rel: 1e-14,
            max_steps: 200_000,
        }
    }
}

impl IntegratorOptions {
    pub fn with_tol(tol: f64) -> Self {
        IntegratorOptions {
            atol: tol,
            rtol: tol,
            ..Default::default()
        }
    }
}

/// One accepted step: `y(t0 + s h) = y0 + sum_j s^j coef[j-1]`, `s in [0, 1]`.
#[derive(Clone, Debug)]
struct Step {
    t0: f64,
    h: f64,
    y0: Vec<f64>,
    coef: Vec<f64>,
}

/// Piecewise-polynomial solution on `[t0, t1]` (either direction).
#[derive(Clone, Debug)]
pub struct DenseOutput {
    dim: usize,
    t0: f64,
    t1: f64,
    y0: Vec<f64>,
    y1: Vec<f64>,
    steps: Vec<Step>,
    error_estimate: f64,
    n_rejected: usize,
}

impl DenseOutput {
    fn constant(t0: f64, y0: &[f64]) -> Self {
        DenseOutput {
            dim: y0.len(),
            t0,
            t1: t0,
            y0: y0.to_vec(),
            y1: y0.to_vec(),
            steps: Vec::new(),
            error_estimate: 0.0,
            n_rejected: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t1(&self) -> f64 {
        self.t1
    }

    pub fn start(&self) -> &[f64] {
        &self.y0
    }

    /// Endpoint value; exactly the last accepted RK step.
    pub fn end(&self) -> &[f64] {
        &self.y1
    }

    /// Sum of the local error estimates (max-norm) of accepted steps.
    pub fn error_estimate(&self) -> f64 {
        self.error_estimate
    }

    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn n_rejected(&self) -> usize {
        self.n_rejected
    }

    /// Step boundaries including both interval ends.
    pub fn mesh(&self) -> Vec<f64> {
        let mut m: Vec<f64> = self.steps.iter().map(|s| s.t0).collect();
        m.push(self.t1);
        m
    }

    fn locate(&self, t: f64) -> usize {
        // Steps are ordered along the integration direction.
        let forward = self.t1 >= self.t0;
        let idx = self.steps.partition_point(|s| if forward { s.t0 <= t } else { s.t0 >= t });
        idx.saturating_sub(1).min(self.steps.len() - 1)
    }

    /// Interpolated value at `t`; values outside the interval are clamped.
    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim);
        if self.steps.is_empty() {
            out.copy_from_slice(&self.y0);
            return;
        }
        let (lo, hi) = if self.t0 <= self.t1 {
            (self.t0, self.t1)
        } else {
            (self.t1, self.t0)
        };
        let t = t.clamp(lo, hi);
        if t == self.t1 {
            out.copy_from_slice(&self.y1);
            return;
        }
        let step = &self.steps[self.locate(t)];
        let s = (t - step.t0) / step.h;
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for j in (0..DENSE_ORDER).rev() {
                acc = (acc + step.coef[j * self.dim + i]) * s;
            }
            *o = step.y0[i] + acc;
        }
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(t, &mut out);
        out
    }
}

fn err_norm(err: &[f64], y0: &[f64], y1: &[f64], opts: &IntegratorOptions) -> f64 {
    let mut e: f64 = 0.0;
    for i in 0..err.len() {
        let sc = opts.atol + opts.rtol * y0[i].abs().max(y1[i].abs());
        e = e.max((err[i] / sc).abs());
    }
    e
}

/// Integrates `y' = rhs(t, y)` from `t0` to `t1` (either direction).
pub fn integrate_ode<F>(mut rhs: F, t0: f64, t1: f64, y0: &[f64], opts: &IntegratorOptions) -> Result<DenseOutput>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    let dim = y0.len();
    if t0 == t1 {
        return Ok(DenseOutput::constant(t0, y0));
    }
    let span = (t1 - t0).abs();
    let dir = (t1 - t0).signum();
    let h_min = opts.h_min_rel * span.max(t0.abs()).max(t1.abs()).max(1.0);

    let mut k: Vec<Vec<f64>> = vec![vec![0.0; dim]; DENSE_STAGES];
    let mut ys = vec![0.0; dim];
    let mut y = y0.to_vec();
    let mut y_high = vec![0.0; dim];
    let mut err = vec![0.0; dim];
    rhs(t0, &y, &mut k[0])?;

    let mut h = match opts.h_init {
        Some(h) => h.abs().min(span),
        None => initial_step(&mut rhs, t0, &y, &k[0], span, dir, opts, &mut ys)?,
    };

    let mut out = DenseOutput {
        dim,
        t0,
        t1,
        y0: y0.to_vec(),
        y1: Vec::new(),
        steps: Vec::new(),
        error_estimate: 0.0,
        n_rejected: 0,
    };
    let mut t = t0;
    let mut last_rejected = false;
    loop {
        if out.steps.len() + out.n_rejected >= opts.max_steps {
            return Err(Error::StepFailure { t, h });
        }
        let remaining = (t1 - t).abs();
        let last = h >= remaining * (1.0 - 1e-12);
        if last {
            h = remaining;
        }
        let hs = dir * h;
        for i in 1..STAGES {
            for d in 0..dim {
                let mut acc = 0.0;
                for (j, kj) in k.iter().enumerate().take(i) {
                    acc += A[i][j] * kj[d];
                }
                ys[d] = y[d] + hs * acc;
            }
            rhs(t + C[i] * hs, &ys, &mut k[i])?;
        }
        // Stage 8 sits at the high-order solution.
        y_high.copy_from_slice(&ys);
        for d in 0..dim {
            let mut acc = 0.0;
            for i in 0..STAGES {
                acc += (B_HIGH[i] - B_LOW[i]) * k[i][d];
            }
            err[d] = hs * acc;
        }
        let en = err_norm(&err, &y, &y_high, opts);
        if !en.is_finite() {
            h *= 0.2;
            out.n_rejected += 1;
            last_rejected = true;
            if h < h_min {
                return Err(Error::StepFailure { t, h });
            }
            continue;
        }
        if en <= 1.0 {
            // Dense stage.
            for d in 0..dim {
                let mut acc = 0.0;
                for i in 0..STAGES {
                    acc += A_DENSE[i] * k[i][d];
                }
                ys[d] = y[d] + hs * acc;
            }
            rhs(t + C_DENSE * hs, &ys, &mut k[STAGES])?;
            let mut coef = vec![0.0; DENSE_ORDER * dim];
            for j in 0..DENSE_ORDER {
                for d in 0..dim {
                    let mut acc = 0.0;
                    for (i, ki) in k.iter().enumerate() {
                        acc += B_DENSE[i][j] * ki[d];
                    }
                    coef[j * dim + d] = hs * acc;
                }
            }
            out.steps.push(Step {
                t0: t,
                h: hs,
                y0: y.clone(),
                coef,
            });
            out.error_estimate += err.iter().fold(0.0f64, |a, e| a.max(e.abs()));
            y.copy_from_slice(&y_high);
            k.swap(0, STAGES - 1);
            if last {
                out.t1 = t1;
                out.y1 = y;
                return Ok(out);
            }
            t += hs;
            let mut factor = if en == 0.0 { 5.0 } else { 0.9 * en.powf(-1.0 / 6.0) };
            factor = factor.clamp(0.2, 5.0);
            if last_rejected {
                factor = factor.min(1.0);
            }
            last_rejected = false;
            h *= factor;
        } else {
            out.n_rejected += 1;
            last_rejected = true;
            h *= (0.9 * en.powf(-1.0 / 6.0)).clamp(0.2, 1.0);
        }
        if h < h_min {
            return Err(Error::StepFailure { t, h });
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn initial_step<F>(
    rhs: &mut F,
    t0: f64,
    y0: &[f64],
    f0: &[f64],
    span: f64,
    dir: f64,
    opts: &IntegratorOptions,
    scratch: &mut [f64],
) -> Result<f64>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    // Hairer-Norsett-Wanner starting step heuristic.
    let sc: Vec<f64> = y0.iter().map(|y| opts.atol + opts.rtol * y.abs()).collect();
    let rms = |v: &[f64]| -> f64 {
        if v.is_empty() {
            return 0.0;
        }
        (v.iter().zip(&sc).map(|(x, s)| (x / s).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
    };
    let d0 = rms(y0);
    let d1 = rms(f0);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 }.min(span);
    for i in 0..y0.len() {
        scratch[i] = y0[i] + dir * h0 * f0[i];
    }
    let mut f1 = vec![0.0; y0.len()];
    rhs(t0 + dir * h0, scratch, &mut f1)?;
    let diff: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a - b).collect();
    let d2 = rms(&diff) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(1.0 / 6.0)
    };
    Ok((100.0 * h0).min(h1).min(span))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tableau_row_sums_match_nodes() {
        for i in 0..STAGES {
            let s: f64 = A[i].iter().sum();
            assert!((s - C[i]).abs() < 1e-12, "row {i}: {s} vs {}", C[i]);
        }
        let s: f64 = A_DENSE.iter().sum();
        assert!((s - C_DENSE).abs() < 1e-12);
        assert!((B_HIGH.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((B_LOW.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // At s = 1 the interpolant reproduces the high-order weights.
        for i in 0..STAGES {
            let w: f64 = B_DENSE[i].iter().sum();
            assert!((w - B_HIGH[i]).abs() < 1e-9, "stage {i}: {w} vs {}", B_HIGH[i]);
        }
    }

    fn fixed_step_error(h: f64) -> f64 {
        // y' = y cos t, y(0) = 1 -> y = exp(sin t)
        let opts = IntegratorOptions {
            atol: 1e3,
            rtol: 1e3,
            h_init: Some(h),
            ..Default::default()
        };
        let mut y = vec![1.0];
        let mut t = 0.0;
        let n = (4.0 / h).round() as usize;
        for _ in 0..n {
            let sol = integrate_ode(
                |t, y, dy| {
                    dy[0] = y[0] * t.cos();
                    Ok(())
                },
                t,
                t + h,
                &y,
                &opts,
            )
            .unwrap();
            y = sol.end().to_vec();
            t += h;
        }
        (y[0] - 4f64.sin().exp()).abs()
    }

    #[test]
    fn convergence_order_is_at_least_six() {
        let e1 = fixed_step_error(0.2);
        let e2 = fixed_step_error(0.1);
        let order = (e1 / e2).log2();
        assert!(order > 5.8, "observed order {order}");
    }

    #[test]
    fn dense_output_is_accurate_and_continuous() {
        let opts = IntegratorOptions::with_tol(1e-11);
        let sol = integrate_ode(
            |_, y, dy| {
                dy[0] = y[1];
                dy[1] = -y[0];
                Ok(())
            },
            0.0,
            6.0,
            &[0.0, 1.0],
            &opts,
        )
        .unwrap();
        for i in 0..=600 {
            let t = i as f64 * 0.01;
            let y = sol.eval(t);
            assert!((y[0] - t.sin()).abs() < 1e-9, "t={t}");
            assert!((y[1] - t.cos()).abs() < 1e-9, "t={t}");
        }
        for &tm in &sol.mesh() {
            let a = sol.eval(tm - 1e-13);
            let b = sol.eval(tm + 1e-13);
            assert!((a[0] - b[0]).abs() < 1e-10);
        }
    }

    #[test]
    fn backward_integration() {
        let opts = IntegratorOptions::default();
        let sol = integrate_ode(
            |_, y, dy| {
                dy[0] = -2.0 * y[0];
                Ok(())
            },
            1.0,
            0.0,
            &[(-2.0f64).exp()],
            &opts,
        )
        .unwrap();
        assert!((sol.end()[0] - 1.0).abs() < 1e-9);
        assert!((sol.eval(0.5)[0] - (-1.0f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn zero_length_interval_is_identity() {
        let sol = integrate_ode(
            |_, _, _| panic!("rhs must not be called"),
            2.0,
            2.0,
            &[1.0, 2.0],
            &IntegratorOptions::default(),
        )
        .unwrap();
        assert_eq!(sol.end(), &[1.0, 2.0]);
        assert_eq!(sol.eval(2.0), vec![1.0, 2.0]);
    }

    #[test]
    fn blow_up_is_a_step_failure() {
        let r = integrate_ode(
            |_, y, dy| {
                dy[0] = y[0] * y[0];
                Ok(())
            },
            0.0,
            2.0,
            &[1.0],
            &IntegratorOptions::default(),
        );
        assert!(matches!(r, Err(Error::StepFailure { .. })));
    }
}
