//! M-PSK bit error rate, fixed-point update serialization, and the bit-flip
//! channel.
//!
//! The uplink abstraction is deliberately narrow: a layer update is quantized
//! to `N`-bit offset-binary codes, each bit flips independently with the
//! analytic M-PSK bit error probability, and the receiver dequantizes what
//! arrives. Quantizer metadata (`v_min`, `step`) rides along error-free; it
//! is a few bytes against `D_k · N` payload bits.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Channel and serialization parameters shared by every client.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    /// Linear symbol SNR E_s/N_0 (not dB).
    #[serde(default = "default_es_n0")]
    pub es_n0: f64,
    /// Uplink bandwidth per client, Hz.
    #[serde(default = "default_b_u")]
    pub b_u: f64,
    /// Downlink broadcast bandwidth, Hz.
    #[serde(default = "default_b_d")]
    pub b_d: f64,
    /// Bits per serialized parameter.
    #[serde(default = "default_n_bits")]
    pub n_bits: u32,
    /// Modulation orders the planner may choose from.
    #[serde(default = "default_candidate_levels")]
    pub candidate_levels: Vec<u32>,
}

fn default_es_n0() -> f64 {
    25.0
}
fn default_b_u() -> f64 {
    1.0e6
}
fn default_b_d() -> f64 {
    20.0e6
}
fn default_n_bits() -> u32 {
    16
}
fn default_candidate_levels() -> Vec<u32> {
    vec![2, 4, 8, 16]
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            es_n0: default_es_n0(),
            b_u: default_b_u(),
            b_d: default_b_d(),
            n_bits: default_n_bits(),
            candidate_levels: default_candidate_levels(),
        }
    }
}

impl ChannelConfig {
    /// Check invariants: positive bandwidths, sane bit width, and a strictly
    /// increasing power-of-two candidate set.
    pub fn validate(&self) -> Result<()> {
        if !(self.es_n0.is_finite() && self.es_n0 >= 0.0) {
            return Err(Error::config(format!(
                "es_n0 must be finite and >= 0, got {}",
                self.es_n0
            )));
        }
        if !(self.b_u > 0.0) || !(self.b_d > 0.0) {
            return Err(Error::config(format!(
                "bandwidths must be positive, got b_u={} b_d={}",
                self.b_u, self.b_d
            )));
        }
        if self.n_bits < 2 || self.n_bits > 32 {
            return Err(Error::config(format!(
                "n_bits must be in 2..=32, got {}",
                self.n_bits
            )));
        }
        if self.candidate_levels.is_empty() {
            return Err(Error::config("candidate_levels must be nonempty"));
        }
        let mut prev = 1u32;
        for &m in &self.candidate_levels {
            if m < 2 || !m.is_power_of_two() {
                return Err(Error::config(format!(
                    "candidate level {m} is not a power of two >= 2"
                )));
            }
            if m <= prev {
                return Err(Error::config(format!(
                    "candidate_levels must be strictly increasing, {m} after {prev}"
                )));
            }
            prev = m;
        }
        Ok(())
    }
}

/// Standard normal tail probability Q(x) = P(Z > x).
///
/// Small arguments go through the erf Taylor series; the far tail uses the
/// Laplace continued fraction for the Mills ratio, so relative accuracy holds
/// even where Q underflows toward the subnormal range.
pub fn q_function(x: f64) -> f64 {
    assert!(x.is_finite(), "q_function needs a finite argument");
    if x < 0.0 {
        return 1.0 - q_function(-x);
    }
    if x < 3.0 {
        // Q(x) = 0.5 * (1 - erf(x / sqrt(2))) with erf by Taylor series:
        // erf(z) = 2/sqrt(pi) * sum (-1)^n z^(2n+1) / (n! (2n+1)).
        let z = x / std::f64::consts::SQRT_2;
        let z2 = z * z;
        let mut term = z;
        let mut sum = z;
        for n in 1..200 {
            term *= -z2 / n as f64;
            let contrib = term / (2 * n + 1) as f64;
            sum += contrib;
            if contrib.abs() < 1e-18 * sum.abs() {
                break;
            }
        }
        let erf = 2.0 / std::f64::consts::PI.sqrt() * sum;
        0.5 * (1.0 - erf)
    } else {
        // Mills ratio continued fraction: Q(x) = phi(x) / (x + 1/(x + 2/(x + ...)))
        // evaluated bottom-up with enough levels for full f64 precision at x >= 3.
        let mut tail = 0.0;
        for k in (1..=256u32).rev() {
            tail = f64::from(k) / (x + tail);
        }
        let phi = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        phi / (x + tail)
    }
}

/// Analytic M-PSK bit error rate at linear symbol SNR `es_n0`, clamped to
/// `[0, 0.5]`. The closed form is an approximation that can exceed one half
/// at very low SNR for large constellations; a physical bit cannot.
pub fn ber(m: u32, es_n0: f64) -> Result<f64> {
    if m < 2 || !m.is_power_of_two() {
        return Err(Error::config(format!(
            "modulation order {m} is not a power of two >= 2"
        )));
    }
    if !(es_n0.is_finite() && es_n0 >= 0.0) {
        return Err(Error::numeric(format!(
            "es_n0 must be finite and >= 0, got {es_n0}"
        )));
    }
    let bits = f64::from(m).log2();
    let scale = 2.0 / bits.max(2.0);
    let n_terms = (m / 4).max(1);
    let amp = (2.0 * es_n0).sqrt();
    let mut sum = 0.0;
    for i in 1..=n_terms {
        let angle = (2 * i - 1) as f64 * std::f64::consts::PI / f64::from(m);
        sum += q_function(amp * angle.sin());
    }
    Ok((scale * sum).clamp(0.0, 0.5))
}

/// A layer update serialized as offset-binary fixed-point codes.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    /// Unsigned codes, each strictly below `2^n_bits`.
    pub codes: Vec<u32>,
    pub v_min: f64,
    pub step: f64,
    pub n_bits: u32,
}

impl QuantizedLayer {
    /// Number of encoded parameters (D_k).
    pub fn count(&self) -> usize {
        self.codes.len()
    }

    /// Map codes back to reals: `v_min + code * step`.
    pub fn dequantize(&self) -> Vec<f64> {
        self.codes
            .iter()
            .map(|&c| self.v_min + f64::from(c) * self.step)
            .collect()
    }
}

/// Uniform offset-binary quantization of a flat update vector.
///
/// `v_min = min(delta)`, `step = (max - min) / (2^n_bits - 1)`; a constant
/// array yields `step = 0` and all-zero codes, which round-trips exactly.
pub fn quantize_update(delta: &[f64], n_bits: u32) -> Result<QuantizedLayer> {
    assert!(!delta.is_empty(), "cannot quantize an empty update");
    assert!((2..=32).contains(&n_bits), "n_bits must be in 2..=32");
    if let Some(bad) = delta.iter().find(|v| !v.is_finite()) {
        return Err(Error::numeric(format!(
            "non-finite value {bad} in update vector"
        )));
    }
    let v_min = delta.iter().copied().fold(f64::INFINITY, f64::min);
    let v_max = delta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let max_code = (1u64 << n_bits) - 1;
    let step = (v_max - v_min) / max_code as f64;
    let codes = if step == 0.0 {
        vec![0u32; delta.len()]
    } else {
        delta
            .iter()
            .map(|&v| {
                let code = ((v - v_min) / step).round();
                (code as u64).min(max_code) as u32
            })
            .collect()
    };
    Ok(QuantizedLayer {
        codes,
        v_min,
        step,
        n_bits,
    })
}

/// Flip each payload bit independently with probability `b`.
///
/// Flip positions are generated by geometric gap sampling, so runtime scales
/// with the number of flips rather than the number of bits. `b = 0` returns
/// the input unchanged.
pub fn transmit(layer: &QuantizedLayer, b: f64, rng: &mut ChaCha8Rng) -> QuantizedLayer {
    assert!(
        (0.0..=0.5).contains(&b),
        "bit error rate must be in [0, 0.5], got {b}"
    );
    let mut out = layer.clone();
    if b == 0.0 || layer.codes.is_empty() {
        return out;
    }
    let total_bits = layer.codes.len() as u64 * u64::from(layer.n_bits);
    let ln_keep = (1.0 - b).ln();
    let mut pos = 0u64;
    loop {
        // Geometric gap: P(gap = k) = (1-b)^k b, via inverse CDF on U in (0,1].
        let u: f64 = 1.0 - rng.random::<f64>();
        let gap = (u.ln() / ln_keep).floor();
        if !gap.is_finite() || gap >= (total_bits - pos) as f64 {
            break;
        }
        pos += gap as u64;
        let param = (pos / u64::from(layer.n_bits)) as usize;
        let bit = (pos % u64::from(layer.n_bits)) as u32;
        out.codes[param] ^= 1 << bit;
        pos += 1;
        if pos >= total_bits {
            break;
        }
    }
    out
}

/// Exact expectation of `||corrupted - clean||^2` under independent bit flips
/// at rate `b`: flipping bit `j` moves the value by `±2^j · step`, cross-bit
/// products cancel over uniformly distributed codes, leaving
/// `D_k · b · step^2 · (4^N - 1) / 3`.
pub fn expected_sq_error(d_k: usize, step: f64, n_bits: u32, b: f64) -> f64 {
    assert!((0.0..=0.5).contains(&b), "bit error rate must be in [0, 0.5]");
    assert!(step >= 0.0, "step must be nonnegative");
    // (4^N - 1) / 3 is an exact integer; keep it exact before widening.
    let geom = ((1u128 << (2 * n_bits)) - 1) / 3;
    d_k as f64 * b * step * step * geom as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive_rng, tag};

    #[test]
    fn q_at_zero_is_half() {
        assert_eq!(q_function(0.0), 0.5);
    }

    #[test]
    fn q_symmetry() {
        for &x in &[0.3, 1.0, 2.5, 4.0] {
            let lhs = q_function(-x);
            let rhs = 1.0 - q_function(x);
            assert!((lhs - rhs).abs() < 1e-15, "x={x}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn q_reference_points() {
        // Classic table values.
        assert!((q_function(1.96) - 0.024998).abs() < 1e-4);
        assert!(q_function(6.0) < 1e-8);
        // Q(1) = 0.158655253931457...
        assert!((q_function(1.0) - 0.158_655_253_931_457).abs() < 1e-12);
    }

    #[test]
    fn q_monotone_and_continuous_at_crossover() {
        // Sweep stops at 37: beyond that Q drops into the subnormal range
        // where adjacent values can round together.
        let mut prev = q_function(-5.0);
        let mut x = -5.0 + 0.01;
        while x < 37.0 {
            let q = q_function(x);
            assert!(q < prev, "Q not decreasing at x={x}");
            prev = q;
            x += 0.01;
        }
        // The series and continued-fraction branches must agree at the seam.
        let below = q_function(3.0 - 1e-9);
        let above = q_function(3.0 + 1e-9);
        assert!(((below - above) / below).abs() < 1e-8);
    }

    #[test]
    fn ber_bpsk_reduces_to_q() {
        for &es_n0 in &[0.0, 0.5, 2.0, 10.0] {
            let b = ber(2, es_n0).unwrap();
            let q = q_function((2.0 * es_n0).sqrt()).min(0.5);
            assert!((b - q).abs() < 1e-15, "es_n0={es_n0}");
        }
        assert_eq!(ber(2, 0.0).unwrap(), 0.5);
    }

    #[test]
    fn ber_qpsk_reduces_to_single_q() {
        // One term at sin(pi/4) = 1/sqrt(2): b = Q(sqrt(es_n0)).
        for &es_n0 in &[0.1, 1.0, 9.0, 100.0] {
            let b = ber(4, es_n0).unwrap();
            let q = q_function(es_n0.sqrt());
            // sqrt(2 es) * sin(pi/4) and sqrt(es) differ by an ulp, which the
            // Gaussian tail amplifies by ~x^2; allow for that.
            assert!(
                ((b - q) / q).abs() < 1e-12,
                "es_n0={es_n0}: {b} vs {q}"
            );
        }
    }

    #[test]
    fn ber_8psk_matches_direct_expansion() {
        let es_n0 = 10.0;
        let b = ber(8, es_n0).unwrap();
        let amp = (20.0f64).sqrt();
        let direct = (2.0 / 3.0)
            * (q_function(amp * (std::f64::consts::PI / 8.0).sin())
                + q_function(amp * (3.0 * std::f64::consts::PI / 8.0).sin()));
        assert!(((b - direct) / direct).abs() < 1e-15);
    }

    #[test]
    fn ber_monotone_on_grid() {
        let levels = [2u32, 4, 8, 16];
        let grid: Vec<f64> = (0..40)
            .map(|i| 1e-2 * (1e5f64).powf(i as f64 / 39.0))
            .collect();
        for &m in &levels {
            let mut prev = f64::INFINITY;
            for &s in &grid {
                let b = ber(m, s).unwrap();
                assert!(b <= prev + 1e-18, "ber({m}, {s}) increased");
                prev = b;
            }
        }
        // Non-decreasing in M at fixed SNR on the tested grid.
        for &s in &grid {
            let mut prev = 0.0;
            for &m in &levels {
                let b = ber(m, s).unwrap();
                assert!(b + 1e-18 >= prev, "ber not non-decreasing in M at {s}");
                prev = b;
            }
        }
    }

    #[test]
    fn ber_rejects_bad_order() {
        assert!(ber(3, 1.0).is_err());
        assert!(ber(0, 1.0).is_err());
        assert!(ber(1, 1.0).is_err());
    }

    #[test]
    fn quantize_constant_array() {
        let q = quantize_update(&[0.7; 5], 8).unwrap();
        assert_eq!(q.codes, vec![0; 5]);
        assert_eq!(q.step, 0.0);
        assert_eq!(q.dequantize(), vec![0.7; 5]);
    }

    #[test]
    fn quantize_two_point_range() {
        let q = quantize_update(&[0.0, 1.0], 2).unwrap();
        assert_eq!(q.codes, vec![0, 3]);
        assert!((q.step - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn quantize_round_trip_bound() {
        let mut rng = derive_rng(11, &[tag::TRANSMIT, 0]);
        let delta: Vec<f64> = (0..500).map(|_| rng.random_range(-2.0..2.0)).collect();
        let q = quantize_update(&delta, 12).unwrap();
        let back = q.dequantize();
        for (orig, rec) in delta.iter().zip(&back) {
            assert!(
                (orig - rec).abs() <= q.step / 2.0 + 1e-12,
                "round-trip error beyond step/2"
            );
        }
    }

    #[test]
    fn quantize_rejects_non_finite() {
        assert!(quantize_update(&[0.0, f64::NAN], 8).is_err());
        assert!(quantize_update(&[f64::INFINITY], 8).is_err());
    }

    #[test]
    fn transmit_noiseless_is_identity() {
        let q = quantize_update(&[0.1, 0.5, -0.3], 16).unwrap();
        let mut rng = derive_rng(3, &[tag::TRANSMIT, 1]);
        let out = transmit(&q, 0.0, &mut rng);
        assert_eq!(out, q);
    }

    #[test]
    fn transmit_is_reproducible() {
        let q = quantize_update(&(0..256).map(f64::from).collect::<Vec<_>>(), 16).unwrap();
        let a = transmit(&q, 0.05, &mut derive_rng(9, &[tag::TRANSMIT, 2]));
        let b = transmit(&q, 0.05, &mut derive_rng(9, &[tag::TRANSMIT, 2]));
        assert_eq!(a, b);
        let c = transmit(&q, 0.05, &mut derive_rng(9, &[tag::TRANSMIT, 3]));
        assert_ne!(a.codes, c.codes);
    }

    #[test]
    fn transmit_flip_rate_concentrates() {
        // 10^6 bits at b = 0.01: empirical rate within 3 sigma binomial.
        let n_params = 62_500usize; // 62,500 * 16 = 1e6 bits
        let q = QuantizedLayer {
            codes: vec![0u32; n_params],
            v_min: 0.0,
            step: 1.0,
            n_bits: 16,
        };
        let b = 0.01;
        let out = transmit(&q, b, &mut derive_rng(17, &[tag::TRANSMIT, 4]));
        let flipped: u32 = out.codes.iter().map(|c| c.count_ones()).sum();
        let n_bits_total = (n_params * 16) as f64;
        let sigma = (b * (1.0 - b) / n_bits_total).sqrt();
        let rate = f64::from(flipped) / n_bits_total;
        assert!(
            (rate - b).abs() <= 3.0 * sigma,
            "flip rate {rate} vs {b} (3 sigma = {})",
            3.0 * sigma
        );
    }

    #[test]
    fn expected_sq_error_zero_noise() {
        assert_eq!(expected_sq_error(100, 0.25, 16, 0.0), 0.0);
    }

    #[test]
    fn expected_sq_error_exhaustive_two_bits() {
        // D=1, N=2, step=1, b=0.5: average over all 4 codes x 4 flip masks.
        // Each mask has probability b^ones (1-b)^(2-ones) = 0.25 at b = 0.5.
        let mut acc = 0.0;
        for code in 0u32..4 {
            for mask in 0u32..4 {
                let err = f64::from(code ^ mask) - f64::from(code);
                acc += 0.25 * err * err;
            }
        }
        let mean = acc / 4.0; // uniform over the 4 codes
        let analytic = expected_sq_error(1, 1.0, 2, 0.5);
        assert!((analytic - 2.5).abs() < 1e-12);
        assert!((mean - analytic).abs() < 1e-12, "{mean} vs {analytic}");
    }

    #[test]
    fn expected_sq_error_monte_carlo() {
        let mut rng = derive_rng(23, &[tag::TRANSMIT, 5]);
        let delta: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let q = quantize_update(&delta, 8).unwrap();
        let clean = q.dequantize();
        let b = 0.01;
        let trials = 20_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for t in 0..trials {
            let noisy = transmit(&q, b, &mut derive_rng(23, &[tag::TRANSMIT, 6, t]));
            let sq: f64 = noisy
                .dequantize()
                .iter()
                .zip(&clean)
                .map(|(n, c)| (n - c) * (n - c))
                .sum();
            sum += sq;
            sum_sq += sq * sq;
        }
        let mean = sum / trials as f64;
        let var = (sum_sq / trials as f64 - mean * mean).max(0.0);
        let se = (var / trials as f64).sqrt();
        let analytic = expected_sq_error(q.count(), q.step, 8, b);
        assert!(
            (mean - analytic).abs() <= 3.0 * se,
            "MC mean {mean} vs analytic {analytic} (3 SE = {})",
            3.0 * se
        );
    }

    #[test]
    fn channel_config_validation() {
        assert!(ChannelConfig::default().validate().is_ok());
        let mut bad = ChannelConfig::default();
        bad.candidate_levels = vec![2, 3];
        assert!(bad.validate().is_err());
        let mut bad = ChannelConfig::default();
        bad.candidate_levels = vec![4, 4];
        assert!(bad.validate().is_err());
        let mut bad = ChannelConfig::default();
        bad.b_u = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = ChannelConfig::default();
        bad.n_bits = 1;
        assert!(bad.validate().is_err());
    }
}
