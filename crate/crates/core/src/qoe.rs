//! QoE-driven choice of the predictive tile count and the two encoding rates.
//!
//! For a fixed predictive count `N_p` the relaxed problem is a linear program
//! in `(eta_p, eta_m)`, solved exactly by enumerating the vertices of its
//! feasible polygon. The relaxed optimum is rounded back to the rate grid by
//! trying the grid rates just below and above `eta_p*`, each paired with the
//! largest feasible `eta_m`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Uniform encoding-rate grid `R_d = d * step` for `d = 1..=levels`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateGrid<T> {
    pub step: T,
    pub levels: usize,
}

impl<T: Scalar> RateGrid<T> {
    pub fn new(step: T, levels: usize) -> Result<Self> {
        if !(step > T::zero()) || levels == 0 {
            return Err(Error::InvalidArgument(
                "rate grid needs a positive step and levels".into(),
            ));
        }
        Ok(Self { step, levels })
    }

    /// Rate of level `d` (1-based).
    pub fn rate(&self, d: usize) -> T {
        T::from_count(d) * self.step
    }

    pub fn min(&self) -> T {
        self.step
    }

    pub fn max(&self) -> T {
        self.rate(self.levels)
    }

    /// Level of `eta` if it sits on the grid up to rounding.
    fn snap(&self, eta: T) -> Option<usize> {
        let x = eta / self.step;
        let r = x.round();
        ((x - r).abs() <= T::tolerance() * r.max(T::one()))
            .then(|| r.to_usize())
            .flatten()
            .filter(|&d| (1..=self.levels).contains(&d))
    }
}

/// Per-user weights of perceived quality and of the perceptual difference
/// between predictive and missing tiles.
#[derive(Clone, Debug, PartialEq)]
pub struct QoEWeights<T> {
    pub alpha: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Scalar> QoEWeights<T> {
    pub fn uniform(users: usize, alpha: T, beta: T) -> Self {
        Self {
            alpha: vec![alpha; users],
            beta: vec![beta; users],
        }
    }

    fn mean(v: &[T]) -> T {
        v.iter().fold(T::zero(), |a, &x| a + x) / T::from_count(v.len())
    }

    pub fn mean_alpha(&self) -> T {
        Self::mean(&self.alpha)
    }

    pub fn mean_beta(&self) -> T {
        Self::mean(&self.beta)
    }

    /// `max_k (alpha_k + beta_k * n_m)`.
    pub fn max_marginal(&self, n_m: usize) -> T {
        self.alpha
            .iter()
            .zip(&self.beta)
            .map(|(&a, &b)| a + b * T::from_count(n_m))
            .fold(T::neg_infinity(), T::max)
    }
}

/// Per-user weight draws, fixed per seed and reused across a `beta_bar` sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightSampler {
    alpha: Vec<f64>,
    beta_offset: Vec<f64>,
}

impl WeightSampler {
    /// `alpha_k ~ U[1.9, 2.1]` and `beta_k = beta_bar + U[-0.02, 0.02]`.
    pub fn new(users: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let alpha = (0..users).map(|_| rng.random_range(1.9..=2.1)).collect();
        let beta_offset = (0..users).map(|_| rng.random_range(-0.02..=0.02)).collect();
        Self { alpha, beta_offset }
    }

    /// Weights at one sweep point. Negative `beta_k` are clipped to zero.
    pub fn weights<T: Scalar>(&self, beta_bar: f64) -> QoEWeights<T> {
        QoEWeights {
            alpha: self.alpha.iter().map(|&a| T::lit(a)).collect(),
            beta: self
                .beta_offset
                .iter()
                .map(|&o| T::lit((beta_bar + o).max(0.0)))
                .collect(),
        }
    }
}

/// Timing of the predictive and supplementary phases.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SchedulingConfig<T> {
    /// Predictive interval `T_1` (s).
    pub t1: T,
    /// Missing-tile interval `T_2` (s).
    pub t2: T,
    /// Tolerable motion-to-photon latency `T_y` (s).
    pub ty: T,
    /// FoV tile count `M`.
    pub fov: usize,
    /// Exact-scope tile count `S`.
    pub scope: usize,
}

impl<T: Scalar> SchedulingConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let z = T::zero();
        if !(z < self.ty && self.ty <= self.t2 && self.t2 < self.t1) {
            return Err(Error::InvalidConfig("need 0 < T_y <= T_2 < T_1".into()));
        }
        if self.fov == 0 || self.fov > self.scope {
            return Err(Error::InvalidConfig(format!(
                "need 0 < M <= S, got M={} S={}",
                self.fov, self.scope
            )));
        }
        Ok(())
    }
}

/// Expected number of missing tiles, `ceil(M (S - N_p) / S)`.
pub fn expected_missing(n_p: usize, fov: usize, scope: usize) -> Result<usize> {
    if n_p < fov || n_p > scope || scope == 0 {
        return Err(Error::InvalidArgument(format!(
            "N_p={n_p} outside [{fov}, {scope}]"
        )));
    }
    Ok((fov * (scope - n_p)).div_ceil(scope))
}

/// Throughputs (bit/s) of the predictive and missing-tile groups.
#[derive(Clone, Debug, PartialEq)]
pub struct TransmissionRates<T> {
    pub predictive: Vec<T>,
    pub missing: Vec<T>,
}

/// Supplies group throughputs for every candidate predictive count.
pub trait RateSource<T> {
    fn rates(&self, n_p: usize, n_m: usize) -> Result<TransmissionRates<T>>;
}

impl<T, F> RateSource<T> for F
where
    F: Fn(usize, usize) -> Result<TransmissionRates<T>>,
{
    fn rates(&self, n_p: usize, n_m: usize) -> Result<TransmissionRates<T>> {
        self(n_p, n_m)
    }
}

/// The relaxed problem for one `N_p`:
/// maximize `(alpha - beta N_m) eta_p + beta N_m eta_m` subject to
/// `a eta_p + b eta_m <= T_1`, `c eta_m <= T_y`, `eta_m <= eta_p` and the
/// grid box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct P2<T> {
    pub n_m: usize,
    pub alpha: T,
    pub beta: T,
    pub t1: T,
    pub ty: T,
    /// `T_1 * sum_g 1/v_g`.
    pub a: T,
    /// `(T_1 - T_2) * sum_j 1/v_j`.
    pub b: T,
    /// `T_2 * sum_j 1/v_j`.
    pub c: T,
    pub lo: T,
    pub hi: T,
}

fn inverse_sum<T: Scalar>(rates: &[T]) -> Result<T> {
    rates
        .iter()
        .enumerate()
        .try_fold(T::zero(), |acc, (group, &v)| {
            if v > T::zero() {
                Ok(acc + v.recip())
            } else {
                Err(Error::Starvation { group })
            }
        })
}

impl<T: Scalar> P2<T> {
    pub fn new(
        n_m: usize,
        rates: &TransmissionRates<T>,
        weights: &QoEWeights<T>,
        sched: &SchedulingConfig<T>,
        grid: &RateGrid<T>,
    ) -> Result<Self> {
        let pred = inverse_sum(&rates.predictive)?;
        let miss = inverse_sum(&rates.missing)?;
        Ok(Self {
            n_m,
            alpha: weights.mean_alpha(),
            beta: weights.mean_beta(),
            t1: sched.t1,
            ty: sched.ty,
            a: sched.t1 * pred,
            b: (sched.t1 - sched.t2) * miss,
            c: sched.t2 * miss,
            lo: grid.min(),
            hi: grid.max(),
        })
    }

    /// Average QoE score.
    pub fn score(&self, eta_p: T, eta_m: T) -> T {
        self.alpha * eta_p - self.beta * T::from_count(self.n_m) * (eta_p - eta_m)
    }

    /// Slack of the predictive-latency and missing-latency constraints.
    pub fn slack(&self, eta_p: T, eta_m: T) -> (T, T) {
        (
            self.t1 - self.a * eta_p - self.b * eta_m,
            self.ty - self.c * eta_m,
        )
    }

    pub fn feasible(&self, eta_p: T, eta_m: T) -> bool {
        let tol = T::tolerance();
        let (sa, sb) = self.slack(eta_p, eta_m);
        let scale = self.hi.max(T::one());
        sa >= -tol * self.t1
            && sb >= -tol * self.ty
            && eta_m <= eta_p + tol * scale
            && eta_m >= self.lo - tol * scale
            && eta_p <= self.hi + tol * scale
    }

    /// Constraints as `(u, w, r)` meaning `u eta_p + w eta_m <= r`.
    fn halfplanes(&self) -> [(T, T, T); 7] {
        let (z, one) = (T::zero(), T::one());
        [
            (self.a, self.b, self.t1),
            (z, self.c, self.ty),
            (-one, one, z),
            (-one, z, -self.lo),
            (one, z, self.hi),
            (z, -one, -self.lo),
            (z, one, self.hi),
        ]
    }

    /// Exact relaxed optimum, or `None` when the polygon is empty. Ties go
    /// to the larger `eta_m`.
    pub fn solve(&self) -> Option<(T, T)> {
        let lines = self.halfplanes();
        let mut best: Option<(T, T, T)> = None;
        for i in 0..lines.len() {
            for j in i + 1..lines.len() {
                let (u1, w1, r1) = lines[i];
                let (u2, w2, r2) = lines[j];
                let det = u1 * w2 - u2 * w1;
                if det == T::zero() {
                    continue;
                }
                let x = (r1 * w2 - r2 * w1) / det;
                let y = (u1 * r2 - u2 * r1) / det;
                if !x.is_finite() || !y.is_finite() || !self.feasible(x, y) {
                    continue;
                }
                let s = self.score(x, y);
                if better(s, y, best.map(|(bs, _, by)| (bs, by))) {
                    best = Some((s, x, y));
                }
            }
        }
        best.map(|(_, x, y)| (x, y))
    }

    /// Largest grid level of `eta_m` feasible with `eta_p`.
    pub fn best_missing_level(&self, eta_p: T, grid: &RateGrid<T>) -> Option<usize> {
        let mut cap = eta_p.min(grid.max());
        if self.b > T::zero() {
            cap = cap.min((self.t1 - self.a * eta_p) / self.b);
        }
        if self.c > T::zero() {
            cap = cap.min(self.ty / self.c);
        }
        let x = cap / grid.step;
        let mut d = (x + T::tolerance() * x.abs().max(T::one()))
            .floor()
            .to_usize()?;
        d = d.min(grid.levels);
        // Guard against rounding at the boundary.
        while d >= 1 && !self.feasible(eta_p, grid.rate(d)) {
            d -= 1;
        }
        (d >= 1).then_some(d)
    }
}

/// `true` if `(score, eta_m)` beats the incumbent: higher score, ties to the
/// larger `eta_m`.
fn better<T: Scalar>(score: T, eta_m: T, incumbent: Option<(T, T)>) -> bool {
    let Some((s, m)) = incumbent else {
        return true;
    };
    let tol = T::tolerance() * s.abs().max(T::one());
    if score > s + tol {
        true
    } else if score >= s - tol {
        eta_m > m
    } else {
        false
    }
}

/// Result for one predictive count, or the overall optimum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QoESolution<T> {
    pub n_p: usize,
    pub n_m: usize,
    pub eta_p: T,
    pub eta_m: T,
    /// Average QoE; `-inf` when infeasible.
    pub score: T,
    pub feasible: bool,
    /// Slack of the predictive-latency constraint (s).
    pub slack_predictive: T,
    /// Slack of the missing-tile latency constraint (s).
    pub slack_missing: T,
}

impl<T: Scalar> QoESolution<T> {
    pub fn infeasible(n_p: usize, n_m: usize) -> Self {
        Self {
            n_p,
            n_m,
            eta_p: T::zero(),
            eta_m: T::zero(),
            score: T::neg_infinity(),
            feasible: false,
            slack_predictive: T::zero(),
            slack_missing: T::zero(),
        }
    }

    fn at(n_p: usize, p2: &P2<T>, eta_p: T, eta_m: T) -> Self {
        let (sa, sb) = p2.slack(eta_p, eta_m);
        Self {
            n_p,
            n_m: p2.n_m,
            eta_p,
            eta_m,
            score: p2.score(eta_p, eta_m),
            feasible: true,
            slack_predictive: sa,
            slack_missing: sb,
        }
    }

    fn beats(&self, other: &Self) -> bool {
        match (self.feasible, other.feasible) {
            (true, false) => true,
            (false, _) => false,
            (true, true) => better(self.score, self.eta_m, Some((other.score, other.eta_m))),
        }
    }
}

/// Two-point grid recovery of a relaxed optimum.
pub fn recover<T: Scalar>(
    relaxed_eta_p: T,
    n_p: usize,
    p2: &P2<T>,
    grid: &RateGrid<T>,
) -> QoESolution<T> {
    let candidates: Vec<usize> = match grid.snap(relaxed_eta_p) {
        Some(d) => vec![d],
        None => {
            let x = relaxed_eta_p / grid.step;
            let lo = x.floor().to_usize().unwrap_or(0);
            [lo, lo + 1]
                .into_iter()
                .filter(|d| (1..=grid.levels).contains(d))
                .collect()
        }
    };
    let mut best = QoESolution::infeasible(n_p, p2.n_m);
    for d in candidates {
        let eta_p = grid.rate(d);
        if let Some(m) = p2.best_missing_level(eta_p, grid) {
            let sol = QoESolution::at(n_p, p2, eta_p, grid.rate(m));
            if sol.beats(&best) {
                best = sol;
            }
        }
    }
    best
}

/// Relaxed solve plus recovery for one predictive count.
pub fn evaluate<T: Scalar>(
    n_p: usize,
    source: &impl RateSource<T>,
    weights: &QoEWeights<T>,
    sched: &SchedulingConfig<T>,
    grid: &RateGrid<T>,
) -> Result<QoESolution<T>> {
    let n_m = expected_missing(n_p, sched.fov, sched.scope)?;
    let rates = source.rates(n_p, n_m)?;
    let p2 = P2::new(n_m, &rates, weights, sched, grid)?;
    Ok(match p2.solve() {
        Some((eta_p, _)) => recover(eta_p, n_p, &p2, grid),
        None => QoESolution::infeasible(n_p, n_m),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NpMode {
    /// Search every `N_p` in `[M, S]`.
    Variable,
    /// `N_p = M`.
    Fixed,
}

impl fmt::Display for NpMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NpMode::Variable => "VN",
            NpMode::Fixed => "FN",
        })
    }
}

impl FromStr for NpMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "VN" => Ok(NpMode::Variable),
            "FN" => Ok(NpMode::Fixed),
            _ => Err(Error::InvalidArgument(format!("unknown N_p mode {s:?}"))),
        }
    }
}

/// Best solution over the predictive counts allowed by `mode`. The result is
/// flagged infeasible when no count admits a feasible pair of rates.
pub fn optimize<T: Scalar>(
    source: &impl RateSource<T>,
    weights: &QoEWeights<T>,
    sched: &SchedulingConfig<T>,
    grid: &RateGrid<T>,
    mode: NpMode,
) -> Result<QoESolution<T>> {
    sched.validate()?;
    let range = match mode {
        NpMode::Variable => sched.fov..=sched.scope,
        NpMode::Fixed => sched.fov..=sched.fov,
    };
    let mut best = QoESolution::infeasible(
        sched.fov,
        expected_missing(sched.fov, sched.fov, sched.scope)?,
    );
    for n_p in range {
        let sol = evaluate(n_p, source, weights, sched, grid)?;
        if sol.beats(&best) {
            best = sol;
        }
    }
    Ok(best)
}

/// Exhaustive scan of every `(N_p, eta_p, eta_m)` on the grid.
pub fn brute_force_oracle<T: Scalar>(
    source: &impl RateSource<T>,
    weights: &QoEWeights<T>,
    sched: &SchedulingConfig<T>,
    grid: &RateGrid<T>,
) -> Result<QoESolution<T>> {
    sched.validate()?;
    let mut best = QoESolution::infeasible(
        sched.fov,
        expected_missing(sched.fov, sched.fov, sched.scope)?,
    );
    for n_p in sched.fov..=sched.scope {
        let n_m = expected_missing(n_p, sched.fov, sched.scope)?;
        let p2 = P2::new(n_m, &source.rates(n_p, n_m)?, weights, sched, grid)?;
        for dp in 1..=grid.levels {
            for dm in 1..=dp {
                let (eta_p, eta_m) = (grid.rate(dp), grid.rate(dm));
                if p2.feasible(eta_p, eta_m) {
                    let sol = QoESolution::at(n_p, &p2, eta_p, eta_m);
                    if sol.beats(&best) {
                        best = sol;
                    }
                }
            }
        }
    }
    Ok(best)
}
