//! Randomized central finite-difference checks of every backward pass.
//!
//! The finite differences run on reference forward implementations kept in
//! this module (plain loops over the documented layouts), so analytic
//! gradients are compared against code that shares nothing with them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::head::{head_backward, l2_param_loss, HeadArch, PointHeadParams, PooledLinearHead};
use crate::loss::{bilinear_backward, point_bce};

pub const EPS: f64 = 1e-5;
/// Relative error bound per coordinate.
pub const TOL: f64 = 1e-6;
pub const MIN_TRIALS: usize = 50;
const COORDS_PER_TRIAL: usize = 12;

fn worse(worst: f64, e: f64) -> f64 {
    if e.is_nan() {
        f64::INFINITY
    } else {
        worst.max(e)
    }
}

/// `|a - n| / max(|a|, |n|, 1e-3)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; keeps the oracle free of library sampling code
    let u1: f64 = rng.random_range(1e-12..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn central(f: impl Fn(f64) -> f64, x: f64) -> f64 {
    (f(x + EPS) - f(x - EPS)) / (2.0 * EPS)
}

/// Outcome of one randomized suite. A trial passes when every checked
/// coordinate is within [`TOL`]; coordinates whose ReLU pattern changes
/// within `+-EPS` are skipped.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: &'static str,
    pub trials: usize,
    pub passed: usize,
    pub checked_coords: usize,
    pub skipped_coords: usize,
    pub worst: f64,
}

impl CheckReport {
    fn new(name: &'static str, trials: usize) -> Self {
        Self {
            name,
            trials,
            passed: 0,
            checked_coords: 0,
            skipped_coords: 0,
            worst: 0.0,
        }
    }

    /// At least [`MIN_TRIALS`] passing trials and at most 5% skipped coordinates.
    pub fn ok(&self) -> bool {
        self.passed >= MIN_TRIALS && self.skipped_coords * 20 <= self.checked_coords
    }
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: {}/{} trials, worst rel err {:.2e}, {} of {} coords skipped",
            self.name, self.passed, self.trials, self.worst, self.skipped_coords, self.checked_coords
        )
    }
}

// ---------------------------------------------------------------------------
// Reference bilinear sampler (pixel centers at (i + 0.5) / n, edge clamp)

fn ref_bilinear(w: usize, h: usize, grid: &[f64], u: f64, v: f64) -> f64 {
    let px = (u * w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
    let py = (v * h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
    let x0 = (px.floor() as usize).min(w.saturating_sub(2));
    let y0 = (py.floor() as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = if w == 1 { 0.0 } else { px - x0 as f64 };
    let fy = if h == 1 { 0.0 } else { py - y0 as f64 };
    grid[y0 * w + x0] * (1.0 - fx) * (1.0 - fy)
        + grid[y0 * w + x1] * fx * (1.0 - fy)
        + grid[y1 * w + x0] * (1.0 - fx) * fy
        + grid[y1 * w + x1] * fx * fy
}

pub fn check_bilinear_backward(seed: u64, trials: usize) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = CheckReport::new("bilinear_backward", trials);
    for _ in 0..trials {
        let (w, h) = (rng.random_range(1..7), rng.random_range(1..7));
        let grid: Vec<f64> = (0..w * h).map(|_| normal(&mut rng)).collect();
        let n = rng.random_range(1..8);
        let coords: Vec<(f64, f64)> = (0..n).map(|_| (rng.random_range(-0.1..1.1), rng.random_range(-0.1..1.1))).collect();
        let upstream: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let objective = |g: &[f64]| -> f64 {
            coords
                .iter()
                .zip(&upstream)
                .map(|(&(u, v), up)| up * ref_bilinear(w, h, g, u, v))
                .sum()
        };
        let analytic = bilinear_backward(w, h, &coords, &upstream).expect("valid shapes");
        let mut ok = true;
        for k in 0..w * h {
            let numeric = central(
                |x| {
                    let mut g = grid.clone();
                    g[k] = x;
                    objective(&g)
                },
                grid[k],
            );
            let e = rel_err(analytic[k], numeric);
            tally.worst = worse(tally.worst, e);
            tally.checked_coords += 1;
            ok &= e < TOL;
        }
        tally.passed += ok as usize;
    }
    tally
}

// ---------------------------------------------------------------------------
// Reference BCE as y * softplus(-z) + (1 - y) * softplus(z).

fn softplus(t: f64) -> f64 {
    if t > 30.0 {
        t + (-t).exp()
    } else {
        (1.0 + t.exp()).ln()
    }
}

fn ref_bce(z: &[f64], y: &[f64], w: &[f64]) -> f64 {
    let total: f64 = w.iter().sum();
    z.iter()
        .zip(y)
        .zip(w)
        .map(|((&z, &y), &w)| w * (y * softplus(-z) + (1.0 - y) * softplus(z)))
        .sum::<f64>()
        / total
}

pub fn check_point_bce(seed: u64, trials: usize) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = CheckReport::new("point_bce", trials);
    for _ in 0..trials {
        let n = rng.random_range(1..10);
        let z: Vec<f64> = (0..n).map(|_| rng.random_range(-6.0..6.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..2) as f64).collect();
        let mut w: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.8) { 1.0 } else { 0.0 }).collect();
        w[0] = 1.0;
        let out = point_bce(&z, &y, &w).expect("matching lengths");
        let mut ok = (out.loss - ref_bce(&z, &y, &w)).abs() < 1e-12;
        for k in 0..n {
            let numeric = central(
                |x| {
                    let mut zz = z.clone();
                    zz[k] = x;
                    ref_bce(&zz, &y, &w)
                },
                z[k],
            );
            let e = rel_err(out.grad[k], numeric);
            tally.worst = worse(tally.worst, e);
            tally.checked_coords += 1;
            ok &= e < TOL;
        }
        tally.passed += ok as usize;
    }
    tally
}

// ---------------------------------------------------------------------------
// Reference MLP: flat layout, per layer row-major [out][in] weights then bias;
// ReLU on the three hidden layers, linear scalar output.

struct RefOut {
    logit: f64,
    pattern: Vec<bool>,
}

fn ref_mlp(arch: &HeadArch, flat: &[f64], input: &[f64]) -> RefOut {
    let dims = [
        (arch.input_dim(), arch.hidden[0]),
        (arch.hidden[0], arch.hidden[1]),
        (arch.hidden[1], arch.hidden[2]),
        (arch.hidden[2], 1),
    ];
    let mut act = input.to_vec();
    let mut off = 0;
    let mut pattern = Vec::new();
    for (layer, &(ni, no)) in dims.iter().enumerate() {
        let weights = &flat[off..off + ni * no];
        let bias = &flat[off + ni * no..off + ni * no + no];
        off += ni * no + no;
        let mut next = Vec::with_capacity(no);
        for o in 0..no {
            let z: f64 = bias[o] + (0..ni).map(|i| weights[o * ni + i] * act[i]).sum::<f64>();
            if layer < 3 {
                pattern.push(z > 0.0);
                next.push(z.max(0.0));
            } else {
                next.push(z);
            }
        }
        act = next;
    }
    debug_assert_eq!(off, flat.len());
    RefOut { logit: act[0], pattern }
}

fn random_arch(rng: &mut ChaCha8Rng) -> HeadArch {
    HeadArch {
        feature_dim: rng.random_range(1..6),
        pe_dim: rng.random_range(0..5),
        hidden: [rng.random_range(2..7), rng.random_range(2..7), rng.random_range(2..7)],
    }
}

fn pick_coords(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    (0..COORDS_PER_TRIAL.min(n)).map(|_| rng.random_range(0..n)).collect()
}

/// Returns the parameter and feature reports.
pub fn check_head_backward(seed: u64, trials: usize) -> [CheckReport; 2] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params_tally = CheckReport::new("head_backward/params", trials);
    let mut feature_tally = CheckReport::new("head_backward/feature", trials);
    for _ in 0..trials {
        let arch = random_arch(&mut rng);
        let flat: Vec<f64> = (0..arch.param_count()).map(|_| 0.7 * normal(&mut rng)).collect();
        let params = PointHeadParams::from_flat(arch, flat.clone()).expect("valid shapes");
        let feature: Vec<f64> = (0..arch.feature_dim).map(|_| normal(&mut rng)).collect();
        let pe: Vec<f64> = (0..arch.pe_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let upstream = normal(&mut rng);
        let input = |f: &[f64]| [f, pe.as_slice()].concat();
        let grad = head_backward(&params, &feature, &pe, upstream).expect("valid shapes");
        let base = ref_mlp(&arch, &flat, &input(&feature));

        let mut ok = true;
        for k in pick_coords(&mut rng, flat.len()) {
            let eval = |x: f64| {
                let mut f = flat.clone();
                f[k] = x;
                ref_mlp(&arch, &f, &input(&feature))
            };
            params_tally.checked_coords += 1;
            if eval(flat[k] + EPS).pattern != base.pattern || eval(flat[k] - EPS).pattern != base.pattern {
                params_tally.skipped_coords += 1;
                continue;
            }
            let numeric = upstream * central(|x| eval(x).logit, flat[k]);
            let e = rel_err(grad.params[k], numeric);
            params_tally.worst = worse(params_tally.worst, e);
            ok &= e < TOL;
        }
        params_tally.passed += ok as usize;

        let mut ok = true;
        for k in 0..arch.feature_dim {
            let eval = |x: f64| {
                let mut f = feature.clone();
                f[k] = x;
                ref_mlp(&arch, &flat, &input(&f))
            };
            feature_tally.checked_coords += 1;
            if eval(feature[k] + EPS).pattern != base.pattern || eval(feature[k] - EPS).pattern != base.pattern {
                feature_tally.skipped_coords += 1;
                continue;
            }
            let numeric = upstream * central(|x| eval(x).logit, feature[k]);
            let e = rel_err(grad.feature[k], numeric);
            feature_tally.worst = worse(feature_tally.worst, e);
            ok &= e < TOL;
        }
        feature_tally.passed += ok as usize;
    }
    [params_tally, feature_tally]
}

pub fn check_l2_param_loss(seed: u64, trials: usize) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = CheckReport::new("l2_param_loss", trials);
    for _ in 0..trials {
        let n = rng.random_range(1..40);
        let theta: Vec<f64> = (0..n).map(|_| 3.0 * normal(&mut rng)).collect();
        let weight = rng.random_range(1e-6..1.0);
        let reference = |t: &[f64]| weight * t.iter().map(|x| x * x).sum::<f64>();
        let (loss, grad) = l2_param_loss(&theta, weight);
        let mut ok = (loss - reference(&theta)).abs() <= 1e-12 * loss.max(1.0);
        for k in pick_coords(&mut rng, n) {
            let numeric = central(
                |x| {
                    let mut t = theta.clone();
                    t[k] = x;
                    reference(&t)
                },
                theta[k],
            );
            let e = rel_err(grad[k], numeric);
            tally.worst = worse(tally.worst, e);
            tally.checked_coords += 1;
            ok &= e < TOL;
        }
        tally.passed += ok as usize;
    }
    tally
}

/// Two instances, each with its own descriptor and labeled inputs; the loss
/// is the sum of per-instance mean BCE of the generated heads.
/// Returns the `A` and `c` reports.
pub fn check_pooled_linear(seed: u64, trials: usize) -> [CheckReport; 2] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a_tally = CheckReport::new("pooled-linear/A", trials);
    let mut c_tally = CheckReport::new("pooled-linear/c", trials);
    for trial in 0..trials {
        let arch = random_arch(&mut rng);
        let ddim = rng.random_range(2..6);
        let mut head = PooledLinearHead::new(arch, ddim, trial as u64);
        head.a.iter_mut().for_each(|v| *v = 0.3 * normal(&mut rng));
        head.c.iter_mut().for_each(|v| *v = 0.5 * normal(&mut rng));
        struct Inst {
            desc: Vec<f64>,
            inputs: Vec<Vec<f64>>,
            labels: Vec<f64>,
        }
        let insts: Vec<Inst> = (0..2)
            .map(|_| {
                let n = rng.random_range(1..5);
                Inst {
                    desc: (0..ddim).map(|_| normal(&mut rng)).collect(),
                    inputs: (0..n).map(|_| (0..arch.input_dim()).map(|_| normal(&mut rng)).collect()).collect(),
                    labels: (0..n).map(|_| rng.random_range(0..2) as f64).collect(),
                }
            })
            .collect();

        let ref_loss = |a: &[f64], c: &[f64]| -> (f64, Vec<bool>) {
            let mut total = 0.0;
            let mut pattern = Vec::new();
            for inst in &insts {
                let flat: Vec<f64> = (0..c.len())
                    .map(|p| c[p] + (0..ddim).map(|j| a[p * ddim + j] * inst.desc[j]).sum::<f64>())
                    .collect();
                let outs: Vec<RefOut> = inst.inputs.iter().map(|x| ref_mlp(&arch, &flat, x)).collect();
                let z: Vec<f64> = outs.iter().map(|o| o.logit).collect();
                for o in outs {
                    pattern.extend(o.pattern);
                }
                total += ref_bce(&z, &inst.labels, &vec![1.0; z.len()]);
            }
            (total, pattern)
        };

        // analytic route through the library
        let mut da = vec![0.0; head.a.len()];
        let mut dc = vec![0.0; head.c.len()];
        for inst in &insts {
            let params = head.generate(&inst.desc).expect("valid shapes");
            let z: Vec<f64> = inst.inputs.iter().map(|x| ref_mlp(&arch, &params.flat, x).logit).collect();
            let bce = point_bce(&z, &inst.labels, &vec![1.0; z.len()]).expect("valid shapes");
            let mut dparams = vec![0.0; params.flat.len()];
            for (x, g) in inst.inputs.iter().zip(&bce.grad) {
                let (f, pe) = x.split_at(arch.feature_dim);
                let hg = head_backward(&params, f, pe, *g).expect("valid shapes");
                dparams.iter_mut().zip(hg.params).for_each(|(d, v)| *d += v);
            }
            head.backward(&inst.desc, &dparams, &mut da, &mut dc);
        }

        let (_, base_pattern) = ref_loss(&head.a, &head.c);
        let mut ok = true;
        for k in pick_coords(&mut rng, head.a.len()) {
            let eval = |x: f64| {
                let mut a = head.a.clone();
                a[k] = x;
                ref_loss(&a, &head.c)
            };
            a_tally.checked_coords += 1;
            if eval(head.a[k] + EPS).1 != base_pattern || eval(head.a[k] - EPS).1 != base_pattern {
                a_tally.skipped_coords += 1;
                continue;
            }
            let numeric = central(|x| eval(x).0, head.a[k]);
            let e = rel_err(da[k], numeric);
            a_tally.worst = worse(a_tally.worst, e);
            ok &= e < TOL;
        }
        a_tally.passed += ok as usize;

        let mut ok = true;
        for k in pick_coords(&mut rng, head.c.len()) {
            let eval = |x: f64| {
                let mut c = head.c.clone();
                c[k] = x;
                ref_loss(&head.a, &c)
            };
            c_tally.checked_coords += 1;
            if eval(head.c[k] + EPS).1 != base_pattern || eval(head.c[k] - EPS).1 != base_pattern {
                c_tally.skipped_coords += 1;
                continue;
            }
            let numeric = central(|x| eval(x).0, head.c[k]);
            let e = rel_err(dc[k], numeric);
            c_tally.worst = worse(c_tally.worst, e);
            ok &= e < TOL;
        }
        c_tally.passed += ok as usize;
    }
    [a_tally, c_tally]
}

/// Every suite with `trials` trials each, in a fixed order.
pub fn run_all(seed: u64, trials: usize) -> Vec<CheckReport> {
    let mut out = vec![
        check_bilinear_backward(seed, trials),
        check_point_bce(seed + 1, trials),
    ];
    out.extend(check_head_backward(seed + 2, trials));
    out.push(check_l2_param_loss(seed + 3, trials));
    out.extend(check_pooled_linear(seed + 4, trials));
    out
}
