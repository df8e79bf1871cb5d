//! Adam with per-group learning rates, a linear decay schedule, and a
//! central-difference gradient checker.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSchedule {
    pub start_factor: f64,
    pub end_factor: f64,
    pub total_iters: usize,
}

impl Default for LinearSchedule {
    fn default() -> Self {
        LinearSchedule {
            start_factor: 1.0,
            end_factor: 0.1,
            total_iters: 1000,
        }
    }
}

impl LinearSchedule {
    pub fn new(start_factor: f64, end_factor: f64, total_iters: usize) -> Result<Self> {
        if !(end_factor > 0.0 && end_factor <= start_factor) || total_iters == 0 {
            return Err(Error::InvalidArgument(format!(
                "schedule needs 0 < end <= start and at least one iteration, got {start_factor} -> {end_factor} over {total_iters}"
            )));
        }
        Ok(LinearSchedule {
            start_factor,
            end_factor,
            total_iters,
        })
    }

    /// Factor at `iter`, clamped to `end_factor` past the last iteration.
    pub fn factor(&self, iter: usize) -> f64 {
        let tau = iter.min(self.total_iters) as f64 / self.total_iters as f64;
        // Written as a convex combination so both endpoints come out exact.
        self.start_factor * (1.0 - tau) + self.end_factor * tau
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One tensor handed to [`Adam::step`].
pub struct ParamRef<'a> {
    pub name: &'a str,
    pub group: usize,
    pub value: &'a mut [f64],
    pub grad: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    name: String,
    group: usize,
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    group_lrs: Vec<f64>,
    moments: Vec<Moments>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, group_lrs: Vec<f64>) -> Self {
        Adam {
            config,
            group_lrs,
            moments: Vec::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn group_lr(&self, group: usize) -> f64 {
        self.group_lrs[group]
    }

    /// One bias-corrected update of every tensor, with each group's base
    /// rate multiplied by `factor`. Tensors must come in the same order and
    /// sizes on every call. Nothing is updated if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [ParamRef<'_>], factor: f64) -> Result<()> {
        for p in params.iter() {
            if p.value.len() != p.grad.len() {
                return Err(Error::Shape(format!(
                    "parameter {} has {} values but {} gradients",
                    p.name,
                    p.value.len(),
                    p.grad.len()
                )));
            }
            if p.group >= self.group_lrs.len() {
                return Err(Error::InvalidArgument(format!("parameter {} names unknown group {}", p.name, p.group)));
            }
            if let Some(i) = p.grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient(format!("{}[{i}] = {}", p.name, p.grad[i])));
            }
        }
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| Moments {
                    name: p.name.to_string(),
                    group: p.group,
                    m: vec![0.0; p.value.len()],
                    v: vec![0.0; p.value.len()],
                })
                .collect();
        } else if self.moments.len() != params.len()
            || self
                .moments
                .iter()
                .zip(params.iter())
                .any(|(s, p)| s.name != p.name || s.group != p.group || s.m.len() != p.value.len())
        {
            return Err(Error::Shape("parameter list changed between optimizer steps".into()));
        }

        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (p, s) in params.iter_mut().zip(self.moments.iter_mut()) {
            let lr = self.group_lrs[p.group] * factor;
            for (((x, &g), m), v) in p.value.iter_mut().zip(p.grad).zip(s.m.iter_mut()).zip(s.v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so coordinates whose true
    /// gradient is near zero are judged by absolute error. One ulp of a loss
    /// near 1 divided by `2h` is about 1e-10, so the floor must sit well
    /// above 1e-6 for such coordinates to pass on rounding noise alone.
    pub floor: f64,
    /// Check every coordinate up to this many, otherwise a seeded sample.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-6,
            tolerance: 1e-4,
            floor: 1e-5,
            max_coords: 4096,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    /// Coordinate with the largest relative error.
    pub worst: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` with central differences of `loss` around `params`.
pub fn gradcheck<F>(mut loss: F, params: &[f64], analytic: &[f64], opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if params.len() != analytic.len() {
        return Err(Error::Shape(format!(
            "{} parameters but {} analytic gradients",
            params.len(),
            analytic.len()
        )));
    }
    let base = loss(params)?;
    let again = loss(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic { first: base, second: again });
    }
    let coords: Vec<usize> = if params.len() <= opts.max_coords {
        (0..params.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut picked = sample(&mut rng, params.len(), opts.max_coords).into_vec();
        picked.sort_unstable();
        picked
    };
    let mut theta = params.to_vec();
    let mut report = GradcheckReport {
        checked: coords.len(),
        max_rel_err: 0.0,
        mean_rel_err: 0.0,
        worst: coords.first().copied().unwrap_or(0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        passed: true,
    };
    let mut total = 0.0;
    for &i in &coords {
        let orig = theta[i];
        theta[i] = orig + opts.step;
        let plus = loss(&theta)?;
        theta[i] = orig - opts.step;
        let minus = loss(&theta)?;
        theta[i] = orig;
        let numeric = (plus - minus) / (2.0 * opts.step);
        let err = relative_error(analytic[i], numeric, opts.floor);
        total += err;
        if err > report.max_rel_err || !err.is_finite() {
            report.max_rel_err = err;
            report.worst = i;
            report.analytic_at_worst = analytic[i];
            report.numeric_at_worst = numeric;
        }
    }
    if !coords.is_empty() {
        report.mean_rel_err = total / coords.len() as f64;
    }
    report.passed = report.max_rel_err < opts.tolerance;
    Ok(report)
}
