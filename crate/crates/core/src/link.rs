//! Closed-form downlink rates: MMSE estimation quality, max-min fair power
//! split, per-user SINR under MRT and ZF, worst-case bounds for missing-tile
//! groups and the latency terms built from group throughputs.
//!
//! All SINR values are linear. Powers are normalized by the noise power.

use std::fmt;
use std::str::FromStr;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Precoder {
    Mrt,
    Zf,
}

impl Precoder {
    pub const ALL: [Precoder; 2] = [Precoder::Mrt, Precoder::Zf];
}

impl fmt::Display for Precoder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precoder::Mrt => "MRT",
            Precoder::Zf => "ZF",
        })
    }
}

impl FromStr for Precoder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "MRT" => Ok(Precoder::Mrt),
            "ZF" => Ok(Precoder::Zf),
            _ => Err(Error::InvalidArgument(format!("unknown precoder {s:?}"))),
        }
    }
}

/// Link constants shared by every group of a cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinkParams<T> {
    /// Base-station antennas `N`.
    pub antennas: usize,
    /// Normalized uplink pilot power `q_u`.
    pub uplink: T,
    /// Normalized total downlink power `P`.
    pub downlink: T,
    /// Coherence interval `T` in symbols.
    pub coherence: usize,
    /// Bandwidth `W` in Hz.
    pub bandwidth: T,
}

/// Estimation statistics of one multicast stream.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamStats<T> {
    pub psi: Vec<T>,
    /// Per-user estimation quality `U(f, b)`.
    pub quality: Vec<T>,
    /// Variance of the stream's composite channel estimate.
    pub mu: T,
}

/// MMSE estimation quality of a stream whose users share one pilot of
/// length `sigma`.
pub fn estimation_quality<T: Scalar>(psi: &[T], sigma: usize, q_u: T) -> Result<StreamStats<T>> {
    if psi.is_empty() {
        return Err(Error::InvalidArgument("stream has no users".into()));
    }
    if psi.iter().any(|&p| !(p > T::zero()) || !p.is_finite()) {
        return Err(Error::InvalidArgument(
            "large-scale fading must be positive".into(),
        ));
    }
    if sigma == 0 {
        return Err(Error::InvalidArgument(
            "pilot length must be at least 1".into(),
        ));
    }
    if !(q_u >= T::zero()) {
        return Err(Error::InvalidArgument(
            "uplink power must be non-negative".into(),
        ));
    }
    let gain = T::from_count(sigma) * q_u;
    let sum: T = psi.iter().fold(T::zero(), |acc, &p| acc + gain * p);
    let quality = psi
        .iter()
        .map(|&p| gain * p * p / (T::one() + sum))
        .collect();
    Ok(StreamStats {
        psi: psi.to_vec(),
        quality,
        mu: sum * sum / (T::one() + sum),
    })
}

/// Max-min fair split of `p` over streams with minimal power coefficients `a`.
#[derive(Clone, Debug, PartialEq)]
pub struct MmfAllocation<T> {
    pub powers: Vec<T>,
    /// Common SINR `a_f * q_f` of every stream.
    pub omega: T,
}

pub fn mmf_allocate<T: Scalar>(a: &[T], p: T) -> Result<MmfAllocation<T>> {
    if a.is_empty() {
        return Err(Error::InvalidArgument("no streams to allocate".into()));
    }
    if let Some(stream) = a.iter().position(|&x| !(x > T::zero())) {
        return Err(Error::DegenerateStream { stream });
    }
    if !(p > T::zero()) {
        return Err(Error::InvalidArgument(
            "downlink power must be positive".into(),
        ));
    }
    let inv_sum = a.iter().fold(T::zero(), |acc, &x| acc + x.recip());
    Ok(MmfAllocation {
        powers: a.iter().map(|&x| p / x / inv_sum).collect(),
        omega: p / inv_sum,
    })
}

/// Per-user SINR coefficients and the resulting MMF operating point of a group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupSinr<T> {
    /// `A(f, b)`: SINR of user `b` in stream `f` per unit of stream power.
    pub coefficients: Vec<Vec<T>>,
    pub allocation: MmfAllocation<T>,
}

impl<T: Scalar> GroupSinr<T> {
    pub fn omega(&self) -> T {
        self.allocation.omega
    }

    /// Per-user SINR at the MMF powers.
    pub fn user_sinr(&self) -> Vec<Vec<T>> {
        user_sinr(&self.coefficients, &self.allocation.powers)
    }
}

/// `A(f, b) * q_f` for an arbitrary power vector.
pub fn user_sinr<T: Scalar>(coefficients: &[Vec<T>], powers: &[T]) -> Vec<Vec<T>> {
    coefficients
        .iter()
        .zip(powers)
        .map(|(row, &q)| row.iter().map(|&a| a * q).collect())
        .collect()
}

/// Power coefficients `A(f, b)` under the given precoder.
pub fn power_coefficients<T: Scalar>(
    precoder: Precoder,
    streams: &[StreamStats<T>],
    antennas: usize,
    sigma: usize,
    p: T,
) -> Result<Vec<Vec<T>>> {
    let gain = match precoder {
        Precoder::Mrt => T::from_count(antennas),
        Precoder::Zf => {
            if sigma >= antennas {
                return Err(Error::PrecoderInfeasible {
                    antennas,
                    pilots: sigma,
                });
            }
            T::from_count(antennas - sigma)
        }
    };
    Ok(streams
        .iter()
        .map(|s| {
            s.psi
                .iter()
                .zip(&s.quality)
                .map(|(&psi, &u)| {
                    let leak = match precoder {
                        Precoder::Mrt => psi,
                        Precoder::Zf => psi - u,
                    };
                    gain * u / (T::one() + leak * p)
                })
                .collect()
        })
        .collect())
}

fn group_sinr_from<T: Scalar>(coefficients: Vec<Vec<T>>, p: T) -> Result<GroupSinr<T>> {
    let minima: Vec<T> = coefficients
        .iter()
        .map(|row| row.iter().copied().fold(T::infinity(), T::min))
        .collect();
    let allocation = mmf_allocate(&minima, p)?;
    Ok(GroupSinr {
        coefficients,
        allocation,
    })
}

pub fn sinr_mrt<T: Scalar>(
    streams: &[StreamStats<T>],
    antennas: usize,
    p: T,
) -> Result<GroupSinr<T>> {
    group_sinr_from(
        power_coefficients(Precoder::Mrt, streams, antennas, 0, p)?,
        p,
    )
}

pub fn sinr_zf<T: Scalar>(
    streams: &[StreamStats<T>],
    antennas: usize,
    sigma: usize,
    p: T,
) -> Result<GroupSinr<T>> {
    group_sinr_from(
        power_coefficients(Precoder::Zf, streams, antennas, sigma, p)?,
        p,
    )
}

/// Estimation and MMF SINR of a group whose streams serve users with the
/// given large-scale fading; one pilot per stream.
pub fn group_sinr<T: Scalar>(
    precoder: Precoder,
    stream_psi: &[Vec<T>],
    params: &LinkParams<T>,
) -> Result<GroupSinr<T>> {
    let sigma = stream_psi.len();
    let stats = stream_psi
        .iter()
        .map(|psi| estimation_quality(psi, sigma, params.uplink))
        .collect::<Result<Vec<_>>>()?;
    match precoder {
        Precoder::Mrt => sinr_mrt(&stats, params.antennas, params.downlink),
        Precoder::Zf => sinr_zf(&stats, params.antennas, sigma, params.downlink),
    }
}

/// Lower bound on the MMF SINR of a group with pilot length `sigma`, no more
/// than `sigma` streams, every user fading at least `psi_min` and total user
/// fading at most `psi_all`.
pub fn worst_case_sinr<T: Scalar>(
    precoder: Precoder,
    antennas: usize,
    sigma: usize,
    q_u: T,
    p: T,
    psi_min: T,
    psi_all: T,
) -> Result<T> {
    if !(psi_min > T::zero()) || psi_all < psi_min {
        return Err(Error::InvalidArgument("need 0 < psi_min <= psi_all".into()));
    }
    let one = T::one();
    let spread = one + q_u * psi_all;
    match precoder {
        Precoder::Mrt => {
            let per_user = q_u * psi_min * psi_min / (one + psi_min * p);
            Ok(T::from_count(antennas) * p * per_user / spread)
        }
        Precoder::Zf => {
            if sigma >= antennas {
                return Err(Error::PrecoderInfeasible {
                    antennas,
                    pilots: sigma,
                });
            }
            let direct = q_u * psi_min * psi_min * p;
            let denom = spread + spread * psi_min * p - T::from_count(sigma) * direct;
            if !(denom > T::zero()) {
                return Err(Error::BoundInfeasible);
            }
            Ok(T::from_count(antennas - sigma) * direct / denom)
        }
    }
}

/// `(1 - sigma/T) log2(1 + omega)` in bit/s/Hz.
pub fn spectral_efficiency<T: Scalar>(omega: T, sigma: usize, coherence: usize) -> Result<T> {
    if sigma > coherence {
        return Err(Error::InvalidArgument(format!(
            "pilot length {sigma} exceeds coherence interval {coherence}"
        )));
    }
    let overhead = T::one() - T::from_count(sigma) / T::from_count(coherence);
    Ok(overhead * (T::one() + omega).log2())
}

/// Throughput `W * gamma` in bit/s.
pub fn group_rate<T: Scalar>(gamma: T, bandwidth: T) -> T {
    bandwidth * gamma
}

/// Operating point of one group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupRate<T> {
    pub precoder: Precoder,
    pub sigma: usize,
    pub omega: T,
    pub gamma: T,
    /// Throughput in bit/s.
    pub v: T,
}

impl<T: Scalar> GroupRate<T> {
    pub fn new(precoder: Precoder, omega: T, sigma: usize, params: &LinkParams<T>) -> Result<Self> {
        let gamma = spectral_efficiency(omega, sigma, params.coherence)?;
        Ok(Self {
            precoder,
            sigma,
            omega,
            gamma,
            v: group_rate(gamma, params.bandwidth),
        })
    }

    /// Rate of a group from its streams' user fading coefficients.
    pub fn of_group(
        precoder: Precoder,
        stream_psi: &[Vec<T>],
        params: &LinkParams<T>,
    ) -> Result<Self> {
        let sinr = group_sinr(precoder, stream_psi, params)?;
        Self::new(precoder, sinr.omega(), stream_psi.len(), params)
    }
}

fn inverse_sum<T: Scalar>(values: &[T]) -> Result<T> {
    values
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

/// Time to deliver `eta` bit/s worth of `interval` seconds of video on each
/// group: `sum_g interval * eta / v_g`.
pub fn latency<T: Scalar>(eta: T, interval: T, rates: &[T]) -> Result<T> {
    Ok(interval * eta * inverse_sum(rates)?)
}

/// Delay per bit per Hz, `sum_g 1 / gamma_g`.
pub fn rho<T: Scalar>(gammas: &[T]) -> Result<T> {
    inverse_sum(gammas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const QU: f64 = 2.511_886_431_509_58e11; // 0.1 W over 10^-12.4 W
    const P: f64 = 100.0 * QU;
    const PSI40: f64 = 2.994_018_176_615_584_6e-10;

    fn params() -> LinkParams<f64> {
        LinkParams {
            antennas: 128,
            uplink: QU,
            downlink: P,
            coherence: 200,
            bandwidth: 100e6,
        }
    }

    #[test]
    fn quality_limits() {
        let psi = [1.0, 2.0, 3.0];
        let s = estimation_quality(&psi, 2, 1e6).unwrap();
        for (u, p) in s.quality.iter().zip(psi) {
            assert_relative_eq!(*u, p * p / 6.0, max_relative = 1e-5);
            assert!(*u < p);
        }
        let single = estimation_quality(&[PSI40], 3, QU).unwrap();
        let g = 3.0 * QU * PSI40;
        assert_relative_eq!(
            single.quality[0],
            g * PSI40 / (1.0 + g),
            max_relative = 1e-12
        );
        assert_relative_eq!(single.mu, g * g / (1.0 + g), max_relative = 1e-12);

        let off = estimation_quality(&psi, 1, 0.0).unwrap();
        assert!(off.quality.iter().all(|&u| u == 0.0));
    }

    #[test]
    fn quality_rejects_bad_input() {
        assert!(estimation_quality(&[1.0, -1.0], 1, 1.0).is_err());
        assert!(estimation_quality(&[1.0], 0, 1.0).is_err());
        assert!(estimation_quality::<f64>(&[], 1, 1.0).is_err());
        assert!(estimation_quality(&[1.0], 1, -1.0).is_err());
    }

    #[test]
    fn mmf_examples() {
        let m = mmf_allocate(&[1.0, 1.0], 10.0).unwrap();
        assert_eq!(m.powers, vec![5.0, 5.0]);
        assert_eq!(m.omega, 5.0);
        let m = mmf_allocate(&[1.0, 2.0], 10.0).unwrap();
        assert_relative_eq!(m.powers[0], 20.0 / 3.0, max_relative = 1e-14);
        assert_relative_eq!(m.powers[1], 10.0 / 3.0, max_relative = 1e-14);
        assert_relative_eq!(m.omega, 20.0 / 3.0, max_relative = 1e-14);
        let m = mmf_allocate(&[0.3], 10.0).unwrap();
        assert_eq!(m.powers, vec![10.0]);
        assert_relative_eq!(m.omega, 3.0, max_relative = 1e-14);
        assert!(matches!(
            mmf_allocate(&[1.0, 0.0], 1.0),
            Err(Error::DegenerateStream { stream: 1 })
        ));
    }

    #[test]
    fn mrt_single_user() {
        let stats = [estimation_quality(&[PSI40], 1, QU).unwrap()];
        let s = sinr_mrt(&stats, 128, P).unwrap();
        let u = stats[0].quality[0];
        assert_relative_eq!(
            s.omega(),
            128.0 * P * u / (1.0 + PSI40 * P),
            max_relative = 1e-12
        );
        let zero = user_sinr(&s.coefficients, &[0.0]);
        assert_eq!(zero, vec![vec![0.0]]);
    }

    #[test]
    fn mrt_linear_in_antennas() {
        let psi = vec![vec![PSI40, 2.5e-10], vec![2.2e-10]];
        let mut p = params();
        let a = GroupRate::of_group(Precoder::Mrt, &psi, &p).unwrap();
        let base = group_sinr(Precoder::Mrt, &psi, &p).unwrap();
        p.antennas = 256;
        let doubled = group_sinr(Precoder::Mrt, &psi, &p).unwrap();
        assert_relative_eq!(doubled.omega(), 2.0 * base.omega(), max_relative = 1e-12);
        for (r1, r2) in base.coefficients.iter().zip(&doubled.coefficients) {
            for (x, y) in r1.iter().zip(r2) {
                assert_relative_eq!(*y, 2.0 * x, max_relative = 1e-12);
            }
        }
        assert!(a.gamma > 0.0);
    }

    #[test]
    fn zf_limits() {
        let stats = [estimation_quality(&[PSI40], 2, 1e6 * QU).unwrap()];
        let s = sinr_zf(&stats, 128, 2, P).unwrap();
        assert_relative_eq!(s.omega(), 126.0 * P * PSI40, max_relative = 1e-3);
        let tight = sinr_zf(&stats, 3, 2, P).unwrap();
        assert!(tight.omega().is_finite() && tight.omega() > 0.0);
        assert!(matches!(
            sinr_zf(&stats, 2, 2, P),
            Err(Error::PrecoderInfeasible { .. })
        ));
    }

    #[test]
    fn zf_beats_mrt_at_reference() {
        let psi = vec![vec![PSI40; 10], vec![2.2e-10; 10], vec![2.5e-10; 10]];
        let mrt = group_sinr(Precoder::Mrt, &psi, &params()).unwrap();
        let zf = group_sinr(Precoder::Zf, &psi, &params()).unwrap();
        assert!(zf.omega() >= mrt.omega());
    }

    #[test]
    fn worst_case_tight_for_one_user() {
        let exact = group_sinr(Precoder::Mrt, &[vec![PSI40]], &params()).unwrap();
        let bound = worst_case_sinr(Precoder::Mrt, 128, 1, QU, P, PSI40, PSI40).unwrap();
        assert_relative_eq!(bound, exact.omega(), max_relative = 1e-12);
        let exact = group_sinr(Precoder::Zf, &[vec![PSI40]], &params()).unwrap();
        let bound = worst_case_sinr(Precoder::Zf, 128, 1, QU, P, PSI40, PSI40).unwrap();
        assert_relative_eq!(bound, exact.omega(), max_relative = 1e-12);
        let vanishing = worst_case_sinr(Precoder::Mrt, 128, 1, QU, P, PSI40, 1e6).unwrap();
        assert!(vanishing < 1e-6);
    }

    #[test]
    fn spectral_efficiency_examples() {
        assert_eq!(spectral_efficiency(5.0, 200, 200).unwrap(), 0.0);
        assert_eq!(spectral_efficiency(0.0, 3, 200).unwrap(), 0.0);
        assert_relative_eq!(spectral_efficiency(1.0, 100, 200).unwrap(), 0.5);
        assert!(spectral_efficiency(1.0, 201, 200).is_err());
        assert_eq!(group_rate(0.5, 100e6), 50e6);
    }

    #[test]
    fn latency_and_rho() {
        assert_eq!(latency(0.0, 0.2, &[1e6, 2e6]).unwrap(), 0.0);
        assert_relative_eq!(latency(1e6, 0.2, &[0.2e6]).unwrap(), 1.0);
        assert!(matches!(
            latency(1.0, 0.2, &[1.0, 0.0]),
            Err(Error::Starvation { group: 1 })
        ));
        assert_relative_eq!(rho(&[0.5, 0.25]).unwrap(), 6.0);
    }

    #[test]
    fn f32_agrees_with_f64() {
        let psi64 = vec![vec![PSI40, 2.5e-10], vec![2.2e-10, 2.0e-10, 2.7e-10]];
        let psi32: Vec<Vec<f32>> = psi64
            .iter()
            .map(|r| r.iter().map(|&x| x as f32).collect())
            .collect();
        let p = params();
        let p32 = LinkParams {
            antennas: p.antennas,
            uplink: p.uplink as f32,
            downlink: p.downlink as f32,
            coherence: p.coherence,
            bandwidth: p.bandwidth as f32,
        };
        for pre in Precoder::ALL {
            let a = GroupRate::of_group(pre, &psi64, &p).unwrap();
            let b = GroupRate::of_group(pre, &psi32, &p32).unwrap();
            assert_relative_eq!(a.omega, b.omega as f64, max_relative = 1e-4);
            assert_relative_eq!(a.v, b.v as f64, max_relative = 1e-4);
        }
    }

    fn psi_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(40.0..45.0f64, 1..6), 1..6).prop_map(|rows| {
            rows.into_iter()
                .map(|r| {
                    r.into_iter()
                        .map(|tau| 10f64.powf(-3.5) / tau.powf(3.76))
                        .collect()
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn mmf_conserves_and_equalizes(a in prop::collection::vec(1e-6..1e3f64, 1..12), p in 1e-3..1e6f64) {
            let m = mmf_allocate(&a, p).unwrap();
            let total: f64 = m.powers.iter().sum();
            prop_assert!((total - p).abs() <= 1e-10 * p);
            for (x, q) in a.iter().zip(&m.powers) {
                prop_assert!((x * q - m.omega).abs() <= 1e-10 * m.omega);
            }
        }

        #[test]
        fn bounds_never_exceed_exact(psi in psi_strategy()) {
            let p = params();
            let flat: Vec<f64> = psi.iter().flatten().copied().collect();
            let psi_min = flat.iter().copied().fold(f64::INFINITY, f64::min);
            let psi_all: f64 = flat.iter().sum();
            for pre in Precoder::ALL {
                let exact = group_sinr(pre, &psi, &p).unwrap().omega();
                let bound = worst_case_sinr(pre, p.antennas, psi.len(), p.uplink, p.downlink, psi_min, psi_all).unwrap();
                prop_assert!(bound <= exact * (1.0 + 1e-12), "{pre}: bound {bound} > exact {exact}");
            }
        }

        #[test]
        fn mrt_increases_with_antennas(psi in psi_strategy(), n in 2usize..200) {
            let mut p = params();
            p.antennas = n;
            let lo = group_sinr(Precoder::Mrt, &psi, &p).unwrap().omega();
            p.antennas = n + 1;
            let hi = group_sinr(Precoder::Mrt, &psi, &p).unwrap().omega();
            prop_assert!(hi > lo);
        }

        #[test]
        fn gamma_decreases_with_pilots(omega in 0.01..100.0f64, sigma in 0usize..199) {
            let a = spectral_efficiency(omega, sigma, 200).unwrap();
            let b = spectral_efficiency(omega, sigma + 1, 200).unwrap();
            prop_assert!(b < a);
        }

        #[test]
        fn quality_below_fading(psi in prop::collection::vec(1e-11..1e-9f64, 1..8), sigma in 1usize..8) {
            let s = estimation_quality(&psi, sigma, QU).unwrap();
            for (u, p) in s.quality.iter().zip(&psi) {
                prop_assert!(*u > 0.0 && u < p);
            }
        }
    }
}
