//! Projected-SGD laboratory for the composite-objective rate analysis.
//!
//! The model problem is a pair of quadratics sharing one optimum,
//!
//! ```text
//! P(W) = (lambda1 / 2) ||W - W*||^2      Q(W) = (lambda2 / 2) ||W - W*||^2
//! ```
//!
//! the cleanest members of the strongly-convex family: they satisfy the
//! defining inequality with equality, so any slack against a bound is slack
//! in the analysis, not model mismatch. Stochastic gradients add zero-mean
//! Gaussian noise (per-coordinate variance `sigma^2`), and iterates are
//! projected onto the ball of the configured radius around the origin, so no
//! run can diverge.
//!
//! Two facts are under test. First, the strongly-convex rate bound for the
//! step schedule `eta_t = 1/(lambda t)`:
//!
//! ```text
//! E ||W_T - W*||^2  <=  12 G^2 / ((lambda1 + lambda2)^2 T)
//! ```
//!
//! and its `eta_t = 1/t` counterpart ([`one_over_t_bound`]). Second, the claimed
//! direction of improvement: adding a strongly-convex companion term raises
//! the effective modulus from `lambda1` to `lambda1 + lambda2`, which should
//! shrink the final distance by a factor that grows with `lambda2`
//! ([`speedup_ratio`] measures it with common random numbers).
//!
//! `G` is computed exactly from the construction, never estimated: the
//! gradient field's maximum norm over the feasible ball plus the known noise
//! second moment.
//!
//! Trials are independent with per-trial derived noise streams and are
//! aggregated in trial-index order, so results are deterministic for a given
//! seed no matter how the work would be scheduled.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::math;
use crate::rng::derive_stream;

const TAG_OPTIMUM: u64 = 0x6f70_7431;
const TAG_INIT: u64 = 0x696e_6974;
const TAG_NOISE_P: u64 = 0x6e6f_6970;
const TAG_NOISE_Q: u64 = 0x6e6f_6971;

/// Which objective a run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// `P` alone: effective modulus `lambda1`.
    POnly,
    /// `F = P + Q`: effective modulus `lambda1 + lambda2`.
    Full,
}

/// Step-size schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepSchedule {
    /// `eta_t = 1 / (lambda t)` with the objective's own modulus.
    ExactModulus,
    /// `eta_t = 1 / t`, modulus-blind.
    OneOverT,
}

/// A pair of quadratics with a shared optimum, plus the noise and projection
/// configuration that together determine the exact constants `G` and `D`.
#[derive(Debug, Clone)]
pub struct StronglyConvexPair {
    dim: usize,
    lambda1: f64,
    lambda2: f64,
    sigma: f64,
    radius: f64,
    w_star_p: Vec<f64>,
    w_star_q: Vec<f64>,
}

/// Builds the canonical pair. The shared optimum is drawn uniformly from the
/// ball of half the projection radius (radius 1), so it is strictly feasible;
/// [`StronglyConvexPair::place_optimum`] pins it explicitly when a test needs
/// exact constants.
///
/// `lambda1` must be positive. `lambda2 = 0` is allowed and means `Q` is the
/// zero function: its stochastic gradient is identically zero (a vanished
/// term contributes neither signal nor noise), which is what makes the
/// speedup ratio collapse to exactly 1 in that limit.
pub fn make_quadratic_pair(
    dim: usize,
    lambda1: f64,
    lambda2: f64,
    sigma: f64,
    seed: u64,
) -> Result<StronglyConvexPair> {
    if dim == 0 {
        return Err(Error::DomainError {
            detail: "dimension must be at least 1".into(),
        });
    }
    if !(lambda1 > 0.0) || !lambda1.is_finite() {
        return Err(Error::DomainError {
            detail: format!("lambda1 must be a positive modulus, got {lambda1}"),
        });
    }
    if lambda2 < 0.0 || !lambda2.is_finite() {
        return Err(Error::DomainError {
            detail: format!("lambda2 must be a non-negative modulus, got {lambda2}"),
        });
    }
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::DomainError {
            detail: format!("noise level must be non-negative, got {sigma}"),
        });
    }
    let radius = 1.0;
    let mut rng = derive_stream(seed, &[TAG_OPTIMUM]);
    let w_star = sample_in_ball(&mut rng, dim, radius * 0.5);
    Ok(StronglyConvexPair {
        dim,
        lambda1,
        lambda2,
        sigma,
        radius,
        w_star_p: w_star.clone(),
        w_star_q: w_star,
    })
}

fn sample_on_sphere<R: Rng>(rng: &mut R, dim: usize, radius: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = math::sqrt(v.iter().map(|x| x * x).sum());
        if norm > 1e-12 {
            return v.iter().map(|x| x * radius / norm).collect();
        }
    }
}

fn sample_in_ball<R: Rng>(rng: &mut R, dim: usize, radius: f64) -> Vec<f64> {
    let u: f64 = rng.gen();
    let r = radius * math::pow(u, 1.0 / dim as f64);
    sample_on_sphere(rng, dim, r)
}

fn norm(v: &[f64]) -> f64 {
    math::sqrt(v.iter().map(|x| x * x).sum())
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl StronglyConvexPair {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lambda1(&self) -> f64 {
        self.lambda1
    }

    pub fn lambda2(&self) -> f64 {
        self.lambda2
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Moves the shared optimum; it must stay strictly inside the projection
    /// ball or SGD could never reach it.
    pub fn place_optimum(&mut self, w: &[f64]) -> Result<()> {
        if w.len() != self.dim {
            return Err(Error::DomainError {
                detail: format!("optimum has dimension {}, pair has {}", w.len(), self.dim),
            });
        }
        if norm(w) >= self.radius {
            return Err(Error::DomainError {
                detail: "optimum must lie strictly inside the projection ball".into(),
            });
        }
        self.w_star_p = w.to_vec();
        self.w_star_q = w.to_vec();
        Ok(())
    }

    /// Splits the optima apart: `Q`'s optimum moves by `delta` along the
    /// first axis. This deliberately breaks the shared-optimum assumption so
    /// its failure mode can be observed; results are reported, not asserted
    /// against the bounds.
    pub fn offset_optima(&mut self, delta: f64) -> Result<()> {
        let mut shifted = self.w_star_p.clone();
        shifted[0] += delta;
        if norm(&shifted) >= self.radius {
            return Err(Error::DomainError {
                detail: "offset optimum would leave the projection ball".into(),
            });
        }
        self.w_star_q = shifted;
        Ok(())
    }

    pub fn p_value(&self, w: &[f64]) -> f64 {
        0.5 * self.lambda1 * dist_sq(w, &self.w_star_p)
    }

    pub fn q_value(&self, w: &[f64]) -> f64 {
        0.5 * self.lambda2 * dist_sq(w, &self.w_star_q)
    }

    pub fn f_value(&self, w: &[f64]) -> f64 {
        self.p_value(w) + self.q_value(w)
    }

    pub fn p_grad(&self, w: &[f64]) -> Vec<f64> {
        w.iter()
            .zip(&self.w_star_p)
            .map(|(x, s)| self.lambda1 * (x - s))
            .collect()
    }

    pub fn q_grad(&self, w: &[f64]) -> Vec<f64> {
        w.iter()
            .zip(&self.w_star_q)
            .map(|(x, s)| self.lambda2 * (x - s))
            .collect()
    }

    /// The objective's strong-convexity modulus.
    pub fn modulus(&self, objective: Objective) -> f64 {
        match objective {
            Objective::POnly => self.lambda1,
            Objective::Full => self.lambda1 + self.lambda2,
        }
    }

    /// The objective's exact minimizer. With the shared optimum this is
    /// `W*` itself (returned verbatim, not recomputed, so the coincidence
    /// is preserved bit for bit); with offset optima, the modulus-weighted
    /// average.
    pub fn optimum(&self, objective: Objective) -> Vec<f64> {
        match objective {
            Objective::POnly => self.w_star_p.clone(),
            Objective::Full => {
                if self.w_star_q == self.w_star_p {
                    return self.w_star_p.clone();
                }
                let total = self.lambda1 + self.lambda2;
                self.w_star_p
                    .iter()
                    .zip(&self.w_star_q)
                    .map(|(p, q)| (self.lambda1 * p + self.lambda2 * q) / total)
                    .collect()
            }
        }
    }

    /// Exact second-moment bound `G^2 >= E||g_hat||^2` over the feasible
    /// ball: the worst-case gradient norm (each quadratic term maximized at
    /// the ball point antipodal to its optimum) plus the full noise second
    /// moment. A vanished `Q` (`lambda2 = 0`) contributes no noise term.
    pub fn grad_second_moment(&self, objective: Objective) -> f64 {
        let reach_p = self.radius + norm(&self.w_star_p);
        let noise = self.dim as f64 * self.sigma * self.sigma;
        match objective {
            Objective::POnly => {
                let g = self.lambda1 * reach_p;
                g * g + noise
            }
            Objective::Full => {
                let reach_q = self.radius + norm(&self.w_star_q);
                let g = self.lambda1 * reach_p + self.lambda2 * reach_q;
                let noise_draws = if self.lambda2 > 0.0 { 2.0 } else { 1.0 };
                g * g + noise_draws * noise
            }
        }
    }

    /// Exact bound `D >= ||W_1 - W*||^2` for starts on the projection
    /// sphere.
    pub fn distance_bound(&self, objective: Objective) -> f64 {
        let reach = self.radius + norm(&self.optimum(objective));
        reach * reach
    }
}

/// Monte Carlo record for one `(objective, schedule, T)` cell.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialStats {
    pub t: u64,
    pub objective: Objective,
    pub schedule: StepSchedule,
    pub trials: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    /// The exact `G` for this objective (square root of the second-moment
    /// bound).
    pub g: f64,
    /// Mean of `||W_T - W*||^2` over trials.
    pub empirical_mean: f64,
    /// Standard error of that mean (0 for a single trial).
    pub std_error: f64,
    /// The applicable closed-form bound: the `1/(lambda t)` rate bound for
    /// the exact schedule, the `1/t` bound otherwise (`D` when `T = 1`,
    /// where no step has been taken).
    pub bound: f64,
}

/// Runs projected SGD to time stamp `T` (that is, `T - 1` updates from
/// `W_1`) over independent trials and reports the empirical squared distance
/// against the closed-form bound.
pub fn run_sgd(
    pair: &StronglyConvexPair,
    objective: Objective,
    schedule: StepSchedule,
    t: u64,
    trials: usize,
    seed: u64,
) -> Result<TrialStats> {
    if t < 1 {
        return Err(Error::DomainError {
            detail: "time stamp T must be at least 1".into(),
        });
    }
    if trials < 1 {
        return Err(Error::DomainError {
            detail: "need at least one trial".into(),
        });
    }
    let target = pair.optimum(objective);
    let mut errors = Vec::with_capacity(trials);
    for trial in 0..trials {
        let w = run_single_trajectory(pair, objective, schedule, t, seed, trial as u64);
        errors.push(dist_sq(&w, &target));
    }
    Ok(assemble_stats(pair, objective, schedule, t, &errors))
}

fn assemble_stats(
    pair: &StronglyConvexPair,
    objective: Objective,
    schedule: StepSchedule,
    t: u64,
    errors: &[f64],
) -> TrialStats {
    let n = errors.len();
    let mean = errors.iter().sum::<f64>() / n as f64;
    let std_error = if n > 1 {
        let var = errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (n - 1) as f64;
        math::sqrt(var / n as f64)
    } else {
        0.0
    };
    let modulus = pair.modulus(objective);
    let g_sq = pair.grad_second_moment(objective);
    let g = math::sqrt(g_sq);
    let d = pair.distance_bound(objective);
    let bound = match schedule {
        // exact_schedule_bound expects the moduli separately; splitting the combined
        // modulus as (modulus, 0) gives the same denominator.
        StepSchedule::ExactModulus => exact_schedule_bound(modulus, 0.0, g, t)
            .expect("positive modulus and G by construction"),
        StepSchedule::OneOverT => {
            if t >= 2 {
                one_over_t_bound(modulus, d, g, t as f64)
                    .expect("T >= 2 checked on this branch")
            } else {
                // No update has happened at T = 1; the initialization bound
                // is the only available statement.
                d
            }
        }
    };
    TrialStats {
        t,
        objective,
        schedule,
        trials: n,
        lambda1: pair.lambda1,
        lambda2: pair.lambda2,
        g,
        empirical_mean: mean,
        std_error,
        bound,
    }
}

/// One projected-SGD trajectory; returns `W_T`.
fn run_single_trajectory(
    pair: &StronglyConvexPair,
    objective: Objective,
    schedule: StepSchedule,
    t: u64,
    seed: u64,
    trial: u64,
) -> Vec<f64> {
    let mut init_rng = derive_stream(seed, &[TAG_INIT, trial]);
    let mut w = sample_on_sphere(&mut init_rng, pair.dim, pair.radius);
    let mut noise_p = derive_stream(seed, &[TAG_NOISE_P, trial]);
    let mut noise_q = derive_stream(seed, &[TAG_NOISE_Q, trial]);
    let modulus = pair.modulus(objective);
    let use_q = objective == Objective::Full && pair.lambda2 > 0.0;
    for step in 1..t {
        let eta = match schedule {
            StepSchedule::ExactModulus => 1.0 / (modulus * step as f64),
            StepSchedule::OneOverT => 1.0 / step as f64,
        };
        let mut g = pair.p_grad(&w);
        if pair.sigma > 0.0 {
            for gi in g.iter_mut() {
                let xi: f64 = noise_p.sample(StandardNormal);
                *gi += pair.sigma * xi;
            }
        }
        if use_q {
            let gq = pair.q_grad(&w);
            for (gi, qi) in g.iter_mut().zip(&gq) {
                *gi += qi;
            }
            if pair.sigma > 0.0 {
                for gi in g.iter_mut() {
                    let xi: f64 = noise_q.sample(StandardNormal);
                    *gi += pair.sigma * xi;
                }
            }
        }
        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi -= eta * gi;
        }
        let n = norm(&w);
        if n > pair.radius {
            let scale = pair.radius / n;
            for wi in w.iter_mut() {
                *wi *= scale;
            }
        }
    }
    w
}

/// The `eta_t = 1/(lambda t)` rate bound: `12 G^2 / ((lambda1 + lambda2)^2 T)`.
pub fn exact_schedule_bound(lambda1: f64, lambda2: f64, g: f64, t: u64) -> Result<f64> {
    let total = lambda1 + lambda2;
    if !(total > 0.0) || lambda1 < 0.0 || lambda2 < 0.0 {
        return Err(Error::DomainError {
            detail: format!(
                "moduli must be non-negative with a positive sum, got {lambda1} and {lambda2}"
            ),
        });
    }
    if !(g > 0.0) {
        return Err(Error::DomainError {
            detail: format!("gradient bound G must be positive, got {g}"),
        });
    }
    if t < 1 {
        return Err(Error::DomainError {
            detail: "time stamp T must be at least 1".into(),
        });
    }
    Ok(12.0 * g * g / (total * total * t as f64))
}

/// The `eta_t = 1/t` bound in its closed form:
///
/// ```text
/// e^(-2 lambda (ln T + 0.578)) D  +  (T - 1) e^(-2 lambda ln(T - 1)) G^2
/// ```
///
/// `T` is real-valued here because the closed form is; it must be at least 2
/// (`ln(T - 1)` collapses at `T = 1`). `lambda = 0` is permitted and yields
/// `D + (T - 1) G^2`, the no-contraction limit.
pub fn one_over_t_bound(lambda: f64, d: f64, g: f64, t: f64) -> Result<f64> {
    if t < 2.0 {
        return Err(Error::DomainError {
            detail: format!("the 1/t bound needs T >= 2, got {t}"),
        });
    }
    if lambda < 0.0 || d < 0.0 {
        return Err(Error::DomainError {
            detail: "lambda and D must be non-negative".into(),
        });
    }
    let first = math::exp(-2.0 * lambda * (math::ln(t) + 0.578)) * d;
    let second = (t - 1.0) * math::exp(-2.0 * lambda * math::ln(t - 1.0)) * g * g;
    Ok(first + second)
}

/// Measured and predicted speedup from adding the companion term.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedupReport {
    pub t: u64,
    pub schedule: StepSchedule,
    pub trials: usize,
    /// Mean final squared distance of the P-only runs.
    pub p_mean: f64,
    /// Mean final squared distance of the F runs.
    pub f_mean: f64,
    /// `p_mean / f_mean`.
    pub mean_ratio: f64,
    /// Median over paired trials of the per-trial distance ratio.
    pub median_ratio: f64,
    /// The predicted order of improvement for `eta_t = 1/(lambda t)`:
    /// `1 + (lambda2 / lambda1)^2`.
    pub theta_exact_schedule: f64,
    /// The predicted order for `eta_t = 1/t`: `e^(ln(T) lambda2) = T^lambda2`.
    pub theta_one_over_t: f64,
}

/// Compares P-only SGD against F SGD with common random numbers: each paired
/// trial shares its initialization and its P-noise stream, and the F run
/// draws its extra Q-noise from an independent stream. With `lambda2 = 0`
/// the two trajectories are identical by construction and every per-trial
/// ratio is exactly 1.
pub fn speedup_ratio(
    pair: &StronglyConvexPair,
    schedule: StepSchedule,
    t: u64,
    trials: usize,
    seed: u64,
) -> Result<SpeedupReport> {
    if t < 1 {
        return Err(Error::DomainError {
            detail: "time stamp T must be at least 1".into(),
        });
    }
    if trials < 1 {
        return Err(Error::DomainError {
            detail: "need at least one trial".into(),
        });
    }
    let target_p = pair.optimum(Objective::POnly);
    let target_f = pair.optimum(Objective::Full);
    let mut ratios = Vec::with_capacity(trials);
    let mut p_sum = 0.0;
    let mut f_sum = 0.0;
    for trial in 0..trials {
        let wp = run_single_trajectory(pair, Objective::POnly, schedule, t, seed, trial as u64);
        let wf = run_single_trajectory(pair, Objective::Full, schedule, t, seed, trial as u64);
        let ep = dist_sq(&wp, &target_p);
        let ef = dist_sq(&wf, &target_f);
        p_sum += ep;
        f_sum += ef;
        // Identical trajectories (lambda2 = 0, shared streams) give ep == ef
        // bit for bit; define that ratio as 1 so the noiseless case cannot
        // produce 0/0.
        ratios.push(if ep == ef { 1.0 } else { ep / ef });
    }
    ratios.sort_unstable_by(f64::total_cmp);
    let median_ratio = if trials % 2 == 1 {
        ratios[trials / 2]
    } else {
        0.5 * (ratios[trials / 2 - 1] + ratios[trials / 2])
    };
    let p_mean = p_sum / trials as f64;
    let f_mean = f_sum / trials as f64;
    let lr = pair.lambda2 / pair.lambda1;
    Ok(SpeedupReport {
        t,
        schedule,
        trials,
        p_mean,
        f_mean,
        mean_ratio: if p_mean == f_mean { 1.0 } else { p_mean / f_mean },
        median_ratio,
        theta_exact_schedule: 1.0 + lr * lr,
        theta_one_over_t: math::exp(math::ln(t as f64) * pair.lambda2),
    })
}
