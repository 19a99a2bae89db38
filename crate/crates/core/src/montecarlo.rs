//! Monte Carlo oracle for the closed-form link rates.
//!
//! Every trial draws Rayleigh channels, sends orthogonal uplink pilots through
//! them, forms MMSE estimates, builds the precoders from those estimates and
//! records the effective gains. Sample moments give the hardening-bound SINR.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::link::Precoder;

/// One multicast group as seen by the simulator.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupModel {
    /// Large-scale fading of every user, per stream.
    pub stream_psi: Vec<Vec<f64>>,
    pub antennas: usize,
    /// Pilot length; at least the number of streams.
    pub pilots: usize,
    /// Normalized uplink power.
    pub uplink: f64,
}

impl GroupModel {
    pub fn new(
        stream_psi: Vec<Vec<f64>>,
        antennas: usize,
        pilots: usize,
        uplink: f64,
    ) -> Result<Self> {
        if stream_psi.is_empty() || stream_psi.iter().any(Vec::is_empty) {
            return Err(Error::InvalidArgument(
                "every stream needs at least one user".into(),
            ));
        }
        if stream_psi.iter().flatten().any(|&p| !(p > 0.0)) {
            return Err(Error::InvalidArgument(
                "large-scale fading must be positive".into(),
            ));
        }
        if pilots < stream_psi.len() {
            return Err(Error::PilotShortage {
                pilots,
                streams: stream_psi.len(),
            });
        }
        if !(uplink > 0.0) || antennas == 0 {
            return Err(Error::InvalidArgument(
                "need positive uplink power and antennas".into(),
            ));
        }
        Ok(Self {
            stream_psi,
            antennas,
            pilots,
            uplink,
        })
    }

    pub fn streams(&self) -> usize {
        self.stream_psi.len()
    }

    /// Received pilot SNR summed over the users of stream `f`.
    fn pilot_snr(&self, f: usize) -> f64 {
        self.pilots as f64 * self.uplink * self.stream_psi[f].iter().sum::<f64>()
    }

    /// Variance per antenna of the stream's composite estimate.
    pub fn estimate_variance(&self, f: usize) -> f64 {
        let s = self.pilot_snr(f);
        s * s / (1.0 + s)
    }
}

/// Channels of one realization: an `N x B_f` matrix per stream.
pub type Channels = Vec<DMatrix<Complex64>>;

#[derive(Clone, Debug)]
pub struct Estimates {
    /// Estimate of each stream's pilot-weighted channel sum.
    pub composite: Vec<DVector<Complex64>>,
    /// Per-user estimates, laid out like the channels.
    pub per_user: Channels,
}

/// Per-trial generator: the batch seed picks the key, the trial the stream.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

fn complex_normal<R: Rng>(rng: &mut R, variance: f64) -> Complex64 {
    let scale = (variance / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re * scale, im * scale)
}

pub fn draw_channels<R: Rng>(model: &GroupModel, rng: &mut R) -> Channels {
    let n = model.antennas;
    model
        .stream_psi
        .iter()
        .map(|psi| DMatrix::from_fn(n, psi.len(), |_, b| complex_normal(rng, psi[b])))
        .collect()
}

/// Unit-norm columns of the `sigma`-point DFT.
pub fn pilot_matrix(sigma: usize) -> DMatrix<Complex64> {
    let norm = (sigma as f64).sqrt().recip();
    DMatrix::from_fn(sigma, sigma, |t, f| {
        let angle = -2.0 * std::f64::consts::PI * (t * f) as f64 / sigma as f64;
        Complex64::from_polar(norm, angle)
    })
}

/// Uplink training and MMSE estimation for one realization.
pub fn simulate_estimation<R: Rng>(
    model: &GroupModel,
    channels: &Channels,
    rng: &mut R,
) -> Result<Estimates> {
    let (n, sigma, f_count) = (model.antennas, model.pilots, model.streams());
    if sigma < f_count {
        return Err(Error::PilotShortage {
            pilots: sigma,
            streams: f_count,
        });
    }
    let phi = pilot_matrix(sigma);
    let amp = (sigma as f64 * model.uplink).sqrt();
    let mut received = DMatrix::from_fn(n, sigma, |_, _| complex_normal(rng, 1.0));
    for (f, h) in channels.iter().enumerate() {
        let sum: DVector<Complex64> = h.column_sum() * Complex64::from(amp);
        received += &sum * phi.column(f).transpose();
    }
    let mut composite = Vec::with_capacity(f_count);
    let mut per_user = Vec::with_capacity(f_count);
    for f in 0..f_count {
        let y = &received * phi.column(f).map(|c| c.conj());
        let s = model.pilot_snr(f);
        let psi = &model.stream_psi[f];
        per_user.push(DMatrix::from_fn(n, psi.len(), |i, b| {
            y[i] * (amp * psi[b] / (1.0 + s))
        }));
        composite.push(y * Complex64::from(s / (1.0 + s)));
    }
    Ok(Estimates {
        composite,
        per_user,
    })
}

/// Precoding vectors as the columns of an `N x F` matrix.
pub fn build_precoders(
    model: &GroupModel,
    estimates: &Estimates,
    precoder: Precoder,
    powers: &[f64],
) -> Result<DMatrix<Complex64>> {
    let (n, f_count) = (model.antennas, model.streams());
    if powers.len() != f_count {
        return Err(Error::InvalidArgument(format!(
            "{} powers for {} streams",
            powers.len(),
            f_count
        )));
    }
    let mut out = DMatrix::zeros(n, f_count);
    match precoder {
        Precoder::Mrt => {
            for (f, &q) in powers.iter().enumerate() {
                let scale = (q / (n as f64 * model.estimate_variance(f))).sqrt();
                out.set_column(f, &(&estimates.composite[f] * Complex64::from(scale)));
            }
        }
        Precoder::Zf => {
            if model.pilots >= n {
                return Err(Error::PrecoderInfeasible {
                    antennas: n,
                    pilots: model.pilots,
                });
            }
            let h = DMatrix::from_columns(&estimates.composite);
            let gram = h.adjoint() * &h;
            let chol = gram.cholesky().ok_or(Error::SingularPrecoder)?;
            let directions = &h * chol.inverse();
            let free = (n - model.pilots) as f64;
            for (f, &q) in powers.iter().enumerate() {
                let scale = (free * q * model.estimate_variance(f)).sqrt();
                out.set_column(f, &(directions.column(f) * Complex64::from(scale)));
            }
        }
    }
    Ok(out)
}

/// Channels, estimates and one precoding matrix per request for a single
/// trial. The trial is redrawn if an estimate happens to be rank deficient.
pub fn run_trial(
    model: &GroupModel,
    requests: &[(Precoder, Vec<f64>)],
    seed: u64,
    trial: u64,
) -> Result<(Channels, Estimates, Vec<DMatrix<Complex64>>)> {
    const ATTEMPTS: u64 = 8;
    'attempt: for attempt in 0..ATTEMPTS {
        let mut rng = trial_rng(seed, trial | (attempt << 48));
        let channels = draw_channels(model, &mut rng);
        let est = simulate_estimation(model, &channels, &mut rng)?;
        let mut precoders = Vec::with_capacity(requests.len());
        for (precoder, powers) in requests {
            match build_precoders(model, &est, *precoder, powers) {
                Ok(b) => precoders.push(b),
                Err(Error::SingularPrecoder) => continue 'attempt,
                Err(e) => return Err(e),
            }
        }
        return Ok((channels, est, precoders));
    }
    Err(Error::SingularPrecoder)
}

/// How the second moments of the effective gains are estimated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Estimator {
    /// Plain sample moments of `h^H b_i`.
    Raw,
    /// Sample moments with the channel parts that are independent of a
    /// precoder averaged out: the estimation error for every stream, and the
    /// whole channel for other streams under MRT. Same target, far lower
    /// variance.
    #[default]
    Conditional,
}

/// Empirical SINR per user with a batch-means standard error.
#[derive(Clone, Debug, PartialEq)]
pub struct SinrEstimate {
    pub sinr: Vec<Vec<f64>>,
    pub stderr: Vec<Vec<f64>>,
    pub trials: usize,
}

/// Running sums for one precoder. Per-user entries are indexed `[f][b]`.
#[derive(Clone, Debug)]
struct Moments {
    precoder: Precoder,
    /// Sum of the desired gain (raw or its estimate-driven part).
    desired: Vec<Vec<Complex64>>,
    /// Raw: sum over streams of `|h^H b_i|^2`. Conditional: `|part|^2` of the
    /// own stream.
    own: Vec<Vec<f64>>,
    /// Conditional only: estimate-driven leakage power into other streams.
    leak: Vec<Vec<f64>>,
    /// Conditional MRT only: sum over antennas of the squared per-antenna
    /// terms of the desired gain.
    per_antenna: Vec<Vec<f64>>,
    /// Conditional only: per-antenna error and channel power.
    error_power: Vec<Vec<f64>>,
    channel_power: Vec<Vec<f64>>,
    /// Conditional only: precoder power per stream.
    precoder_power: Vec<f64>,
    count: usize,
}

impl Moments {
    fn new(model: &GroupModel, precoder: Precoder) -> Self {
        let zeros: Vec<Vec<f64>> = model
            .stream_psi
            .iter()
            .map(|p| vec![0.0; p.len()])
            .collect();
        Self {
            precoder,
            desired: model
                .stream_psi
                .iter()
                .map(|p| vec![Complex64::default(); p.len()])
                .collect(),
            own: zeros.clone(),
            leak: zeros.clone(),
            per_antenna: zeros.clone(),
            error_power: zeros.clone(),
            channel_power: zeros,
            precoder_power: vec![0.0; model.streams()],
            count: 0,
        }
    }

    fn add_raw(&mut self, channels: &Channels, precoders: &DMatrix<Complex64>) {
        for (f, h) in channels.iter().enumerate() {
            // Row b holds h_b^H b_i for every stream i.
            let gains = h.adjoint() * precoders;
            for b in 0..h.ncols() {
                self.desired[f][b] += gains[(b, f)];
                self.own[f][b] += gains.row(b).iter().map(|g| g.norm_sqr()).sum::<f64>();
            }
        }
        self.count += 1;
    }

    fn add_conditional(
        &mut self,
        model: &GroupModel,
        channels: &Channels,
        est: &Estimates,
        precoders: &DMatrix<Complex64>,
    ) {
        let n = model.antennas as f64;
        let composite = DMatrix::from_columns(&est.composite);
        // Per-user estimates are real multiples of their stream's composite
        // estimate, so one F x F product covers every user.
        let cross = composite.adjoint() * precoders;
        for (f, h) in channels.iter().enumerate() {
            let s = model.pilot_snr(f);
            let scale = (model.pilots as f64 * model.uplink).sqrt() / s;
            for b in 0..h.ncols() {
                let c = scale * model.stream_psi[f][b];
                let d = cross[(f, f)] * c;
                self.desired[f][b] += d;
                self.own[f][b] += d.norm_sqr();
                self.leak[f][b] += (0..model.streams())
                    .filter(|&i| i != f)
                    .map(|i| (cross[(f, i)] * c).norm_sqr())
                    .sum::<f64>();
                if self.precoder == Precoder::Mrt {
                    self.per_antenna[f][b] += c
                        * c
                        * est.composite[f]
                            .iter()
                            .zip(precoders.column(f).iter())
                            .map(|(x, y)| x.norm_sqr() * y.norm_sqr())
                            .sum::<f64>();
                }
                let err = h.column(b) - est.per_user[f].column(b);
                self.error_power[f][b] += err.norm_squared() / n;
                self.channel_power[f][b] += h.column(b).norm_squared() / n;
            }
        }
        for (i, p) in self.precoder_power.iter_mut().enumerate() {
            *p += precoders.column(i).norm_squared();
        }
        self.count += 1;
    }

    fn merge(&mut self, other: &Moments) {
        fn add(a: &mut [Vec<f64>], b: &[Vec<f64>]) {
            for (x, y) in a.iter_mut().flatten().zip(b.iter().flatten()) {
                *x += y;
            }
        }
        for (x, y) in self
            .desired
            .iter_mut()
            .flatten()
            .zip(other.desired.iter().flatten())
        {
            *x += y;
        }
        add(&mut self.own, &other.own);
        add(&mut self.leak, &other.leak);
        add(&mut self.per_antenna, &other.per_antenna);
        add(&mut self.error_power, &other.error_power);
        add(&mut self.channel_power, &other.channel_power);
        for (x, y) in self.precoder_power.iter_mut().zip(&other.precoder_power) {
            *x += y;
        }
        self.count += other.count;
    }

    fn sinr(&self, estimator: Estimator, antennas: usize) -> Vec<Vec<f64>> {
        let n = self.count as f64;
        let na = antennas as f64;
        let power: Vec<f64> = self.precoder_power.iter().map(|p| p / n).collect();
        let total_power: f64 = power.iter().sum();
        (0..self.desired.len())
            .map(|f| {
                (0..self.desired[f].len())
                    .map(|b| {
                        let signal = (self.desired[f][b] / n).norm_sqr();
                        let received = match estimator {
                            Estimator::Raw => self.own[f][b] / n,
                            Estimator::Conditional => {
                                let err = self.error_power[f][b] / n;
                                let others = total_power - power[f];
                                match self.precoder {
                                    // The desired gain sums i.i.d. per-antenna terms, so its
                                    // variance is N times the per-antenna variance.
                                    Precoder::Mrt => {
                                        let spread = self.per_antenna[f][b] / n - signal / na;
                                        signal
                                            + spread
                                            + err * power[f]
                                            + self.channel_power[f][b] / n * others
                                    }
                                    Precoder::Zf => {
                                        self.own[f][b] / n
                                            + err * power[f]
                                            + self.leak[f][b] / n
                                            + err * others
                                    }
                                }
                            }
                        };
                        signal / (received - signal + 1.0)
                    })
                    .collect()
            })
            .collect()
    }
}

const BATCHES: usize = 20;

/// Hardening-bound SINR of every user for each `(precoder, powers)` request.
/// All requests see the same channel realizations.
pub fn empirical_sinr_many(
    model: &GroupModel,
    requests: &[(Precoder, Vec<f64>)],
    estimator: Estimator,
    trials: usize,
    seed: u64,
) -> Result<Vec<SinrEstimate>> {
    if trials < BATCHES {
        return Err(Error::InvalidArgument(format!(
            "need at least {BATCHES} trials"
        )));
    }
    let per_batch = trials.div_ceil(BATCHES);
    let batches = (0..BATCHES)
        .into_par_iter()
        .map(|k| {
            let mut moments: Vec<Moments> = requests
                .iter()
                .map(|(p, _)| Moments::new(model, *p))
                .collect();
            for t in k * per_batch..((k + 1) * per_batch).min(trials) {
                let (channels, est, precoders) = run_trial(model, requests, seed, t as u64)?;
                for (m, b) in moments.iter_mut().zip(&precoders) {
                    match estimator {
                        Estimator::Raw => m.add_raw(&channels, b),
                        Estimator::Conditional => m.add_conditional(model, &channels, &est, b),
                    }
                }
            }
            Ok(moments)
        })
        .collect::<Result<Vec<_>>>()?;

    let nb = batches.len() as f64;
    Ok((0..requests.len())
        .map(|r| {
            let mut total = batches[0][r].clone();
            for b in &batches[1..] {
                total.merge(&b[r]);
            }
            let sinr = total.sinr(estimator, model.antennas);
            let per: Vec<Vec<Vec<f64>>> = batches
                .iter()
                .map(|b| b[r].sinr(estimator, model.antennas))
                .collect();
            let stderr = sinr
                .iter()
                .enumerate()
                .map(|(f, row)| {
                    (0..row.len())
                        .map(|b| {
                            let mean = per.iter().map(|s| s[f][b]).sum::<f64>() / nb;
                            let var = per.iter().map(|s| (s[f][b] - mean).powi(2)).sum::<f64>()
                                / (nb - 1.0);
                            (var / nb).sqrt()
                        })
                        .collect()
                })
                .collect();
            SinrEstimate {
                sinr,
                stderr,
                trials,
            }
        })
        .collect())
}

/// Hardening-bound SINR of every user at the given stream powers.
pub fn empirical_sinr(
    model: &GroupModel,
    precoder: Precoder,
    powers: &[f64],
    trials: usize,
    seed: u64,
) -> Result<SinrEstimate> {
    let requests = [(precoder, powers.to_vec())];
    let mut out = empirical_sinr_many(model, &requests, Estimator::default(), trials, seed)?;
    Ok(out.remove(0))
}

/// Mean `|h|^2 / N` per user: the empirical channel variance.
pub fn channel_variance(model: &GroupModel, trials: usize, seed: u64) -> Vec<Vec<f64>> {
    let n = (model.antennas * trials) as f64;
    let mut acc: Vec<Vec<f64>> = model
        .stream_psi
        .iter()
        .map(|p| vec![0.0; p.len()])
        .collect();
    for t in 0..trials {
        let channels = draw_channels(model, &mut trial_rng(seed, t as u64));
        for (row, h) in acc.iter_mut().zip(&channels) {
            for (b, v) in row.iter_mut().enumerate() {
                *v += h.column(b).norm_squared();
            }
        }
    }
    acc.into_iter()
        .map(|r| r.into_iter().map(|v| v / n).collect())
        .collect()
}

/// Per-antenna variance of each stream's composite estimate.
pub fn composite_estimate_variance(
    model: &GroupModel,
    trials: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let n = (model.antennas * trials) as f64;
    let mut acc = vec![0.0; model.streams()];
    for t in 0..trials {
        let mut rng = trial_rng(seed, t as u64);
        let channels = draw_channels(model, &mut rng);
        let est = simulate_estimation(model, &channels, &mut rng)?;
        for (a, h) in acc.iter_mut().zip(&est.composite) {
            *a += h.norm_squared();
        }
    }
    Ok(acc.into_iter().map(|v| v / n).collect())
}

/// Largest correlation magnitude between a user's estimate and its
/// estimation error, over all users.
pub fn estimation_error_correlation(model: &GroupModel, trials: usize, seed: u64) -> Result<f64> {
    let shape: Vec<usize> = model.stream_psi.iter().map(Vec::len).collect();
    let zeros_c = || {
        shape
            .iter()
            .map(|&b| vec![Complex64::default(); b])
            .collect::<Vec<_>>()
    };
    let zeros = || shape.iter().map(|&b| vec![0.0; b]).collect::<Vec<_>>();
    let (mut cross, mut est_pow, mut err_pow) = (zeros_c(), zeros(), zeros());
    for t in 0..trials {
        let mut rng = trial_rng(seed, t as u64);
        let channels = draw_channels(model, &mut rng);
        let est = simulate_estimation(model, &channels, &mut rng)?;
        for (f, (h, hh)) in channels.iter().zip(&est.per_user).enumerate() {
            for b in 0..h.ncols() {
                let e = h.column(b) - hh.column(b);
                cross[f][b] += hh.column(b).dotc(&e);
                est_pow[f][b] += hh.column(b).norm_squared();
                err_pow[f][b] += e.norm_squared();
            }
        }
    }
    let mut worst: f64 = 0.0;
    for f in 0..shape.len() {
        for b in 0..shape[f] {
            worst = worst.max(cross[f][b].norm() / (est_pow[f][b] * err_pow[f][b]).sqrt());
        }
    }
    Ok(worst)
}

/// Mean `||b_f||^2` per stream.
pub fn precoder_power(
    model: &GroupModel,
    precoder: Precoder,
    powers: &[f64],
    trials: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let requests = [(precoder, powers.to_vec())];
    let mut acc = vec![0.0; model.streams()];
    for t in 0..trials {
        let (_, _, mut b) = run_trial(model, &requests, seed, t as u64)?;
        let b = b.remove(0);
        for (f, a) in acc.iter_mut().enumerate() {
            *a += b.column(f).norm_squared();
        }
    }
    Ok(acc.into_iter().map(|v| v / trials as f64).collect())
}

/// One row of the validation report.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidationRow {
    pub precoder: Precoder,
    pub group: usize,
    pub stream: usize,
    pub user: usize,
    pub closed_form: f64,
    pub empirical: f64,
    pub stderr: f64,
}

impl ValidationRow {
    pub fn rel_error(&self) -> f64 {
        (self.empirical - self.closed_form).abs() / self.closed_form
    }
}

pub fn write_validation_csv<W: Write>(out: W, rows: &[ValidationRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "precoder",
        "group",
        "stream",
        "user",
        "closed_form_sinr",
        "empirical_sinr",
        "stderr",
        "rel_error",
    ])?;
    for r in rows {
        w.write_record([
            r.precoder.to_string(),
            r.group.to_string(),
            r.stream.to_string(),
            r.user.to_string(),
            r.closed_form.to_string(),
            r.empirical.to_string(),
            r.stderr.to_string(),
            r.rel_error().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::link::{group_sinr, LinkParams};

    const QU: f64 = 2.511_886_431_509_58e11;
    const PSI: [f64; 4] = [2.99e-10, 2.4e-10, 2.1e-10, 2.7e-10];

    fn params() -> LinkParams<f64> {
        LinkParams {
            antennas: 128,
            uplink: QU,
            downlink: 100.0 * QU,
            coherence: 200,
            bandwidth: 100e6,
        }
    }

    fn model() -> GroupModel {
        GroupModel::new(
            vec![vec![PSI[0], PSI[1]], vec![PSI[2]], vec![PSI[3], PSI[0]]],
            128,
            3,
            QU,
        )
        .unwrap()
    }

    #[test]
    fn reproducible() {
        let m = model();
        let a = empirical_sinr(&m, Precoder::Mrt, &[1e12; 3], 40, 5).unwrap();
        let b = empirical_sinr(&m, Precoder::Mrt, &[1e12; 3], 40, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pilot_shortage() {
        let err = GroupModel::new(vec![vec![1e-10], vec![1e-10]], 8, 1, QU).unwrap_err();
        assert!(matches!(
            err,
            Error::PilotShortage {
                pilots: 1,
                streams: 2
            }
        ));
    }

    #[test]
    fn pilots_orthonormal() {
        let phi = pilot_matrix(5);
        let gram = phi.adjoint() * &phi;
        assert!((gram - DMatrix::identity(5, 5)).norm() < 1e-12);
    }

    #[test]
    fn channel_covariance_matches_fading() {
        let m = model();
        let v = channel_variance(&m, 2000, 1);
        for (row, psi) in v.iter().zip(&m.stream_psi) {
            for (got, want) in row.iter().zip(psi) {
                assert!((got / want - 1.0).abs() < 0.05);
            }
        }
    }

    #[test]
    fn estimate_variance_matches_mu() {
        let m = model();
        let v = composite_estimate_variance(&m, 2000, 2).unwrap();
        for (f, got) in v.iter().enumerate() {
            assert!((got / m.estimate_variance(f) - 1.0).abs() < 0.03);
        }
    }

    #[test]
    fn estimate_uncorrelated_with_error() {
        assert!(estimation_error_correlation(&model(), 4000, 3).unwrap() < 0.02);
    }

    #[test]
    fn noiseless_estimate_is_exact() {
        let m = GroupModel::new(vec![vec![PSI[0], PSI[1]]], 16, 1, 1e30).unwrap();
        let mut rng = trial_rng(9, 0);
        let channels = draw_channels(&m, &mut rng);
        let est = simulate_estimation(&m, &channels, &mut rng).unwrap();
        let truth = channels[0].column_sum() * Complex64::from((m.uplink).sqrt());
        assert!((&est.composite[0] - &truth).norm() < 1e-9 * truth.norm());
    }

    #[test]
    fn zero_forcing_nulls_other_streams() {
        let m = model();
        let requests = [(Precoder::Zf, vec![1e12, 2e12, 3e12])];
        let (_, est, b) = run_trial(&m, &requests, 4, 0).unwrap();
        let b = &b[0];
        let h = DMatrix::from_columns(&est.composite);
        let cross = h.adjoint() * b;
        let scale = cross
            .diagonal()
            .iter()
            .map(|c| c.norm())
            .fold(0.0, f64::max);
        for i in 0..3 {
            for f in 0..3 {
                if i != f {
                    assert!(cross[(i, f)].norm() <= 1e-8 * scale);
                }
            }
        }
    }

    #[test]
    fn precoder_power_matches_allocation() {
        let m = model();
        let powers = [1.0, 2.0, 3.0];
        for pre in Precoder::ALL {
            let got = precoder_power(&m, pre, &powers, 4000, 6).unwrap();
            for (g, q) in got.iter().zip(powers) {
                assert!((g / q - 1.0).abs() < 0.02, "{pre}: {g} vs {q}");
            }
        }
    }

    #[test]
    fn mrt_beamforming_gain() {
        let m = GroupModel::new(vec![vec![PSI[0]]], 128, 1, 1e30).unwrap();
        let est = empirical_sinr(&m, Precoder::Mrt, &[1.0], 2000, 8).unwrap();
        // With one stream and no noise the hardening SINR tends to N q Psi / (1 + q Psi).
        let q_psi = PSI[0];
        let want = 128.0 * q_psi / (1.0 + q_psi);
        assert!((est.sinr[0][0] / want - 1.0).abs() < 0.05);
    }

    #[test]
    fn raw_and_conditional_agree() {
        let m = model();
        let requests: Vec<_> = Precoder::ALL
            .iter()
            .map(|&p| {
                (
                    p,
                    group_sinr(p, &m.stream_psi, &params())
                        .unwrap()
                        .allocation
                        .powers,
                )
            })
            .collect();
        let raw = empirical_sinr_many(&m, &requests, Estimator::Raw, 4000, 12).unwrap();
        let cond = empirical_sinr_many(&m, &requests, Estimator::Conditional, 4000, 12).unwrap();
        for (r, c) in raw.iter().zip(&cond) {
            for ((x, y), se) in r
                .sinr
                .iter()
                .flatten()
                .zip(c.sinr.iter().flatten())
                .zip(r.stderr.iter().flatten())
            {
                assert!((x - y).abs() < 5.0 * se, "{x} vs {y} (se {se})");
            }
        }
    }

    #[test]
    fn zero_power_zero_sinr() {
        let m = model();
        let est = empirical_sinr(&m, Precoder::Mrt, &[0.0; 3], 40, 1).unwrap();
        assert!(est.sinr.iter().flatten().all(|&s| s == 0.0));
    }

    #[test]
    fn closed_forms_agree() {
        let m = model();
        for pre in Precoder::ALL {
            let closed = group_sinr(pre, &m.stream_psi, &params()).unwrap();
            let est = empirical_sinr(&m, pre, &closed.allocation.powers, 4000, 11).unwrap();
            for (c, e) in closed
                .user_sinr()
                .iter()
                .flatten()
                .zip(est.sinr.iter().flatten())
            {
                assert!((e / c - 1.0).abs() < 0.04, "{pre}: {e} vs {c}");
            }
        }
    }
}
