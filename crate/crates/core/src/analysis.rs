//! Measurement harness: ciphertext entropy, tamper-detection sweeps,
//! size-overhead accounting, and seal/unseal throughput.
//!
//! Reports render as `key=value` lines so they diff cleanly in golden
//! tests and shell pipelines.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::hde::unseal;
use crate::keys::PufBasedKey;
use crate::package::{EncMode, Isa, SealedPackage, HEADER_LEN, SIGNATURE_LEN};
use crate::puf::{ChallengeSet, DeviceModel};
use crate::seal::{seal, EncryptionPolicy, SealError};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AnalysisError {
    #[error("empty input")]
    EmptyInput,
    #[error("tamper sweep baseline: the untampered package must unseal as accepted")]
    BaselineRejected,
}

/// Shannon entropy of the byte histogram, in bits per byte: 0 for a
/// constant input, 8 for a perfectly uniform one.
pub fn entropy(bytes: &[u8]) -> Result<f64, AnalysisError> {
    if bytes.is_empty() {
        return Err(AnalysisError::EmptyInput);
    }
    let mut counts = [0u64; 256];
    for &b in bytes {
        counts[b as usize] += 1;
    }
    let len = bytes.len() as f64;
    let mut h = 0.0;
    for &c in counts.iter().filter(|c| **c > 0) {
        let p = c as f64 / len;
        h -= p * p.log2();
    }
    Ok(h)
}

/// Package size accounting against the original code image.
#[derive(Debug, Clone, PartialEq)]
pub struct OverheadReport {
    pub original_bytes: u64,
    pub package_bytes: u64,
    pub mode: EncMode,
    pub instruction_count: u32,
    pub field_count: u8,
}

impl OverheadReport {
    pub fn delta_percent(&self) -> f64 {
        100.0 * (self.package_bytes as f64 - self.original_bytes as f64)
            / self.original_bytes as f64
    }

    /// Closed-form overhead the layout dictates: header and signature, plus
    /// map and descriptors when partially encrypted. Measured sizes must
    /// equal this exactly; there are no hidden bytes.
    pub fn expected_overhead_bytes(&self) -> u64 {
        let fixed = (HEADER_LEN + SIGNATURE_LEN) as u64;
        match self.mode {
            EncMode::Full => fixed,
            _ => {
                fixed
                    + u64::from(self.instruction_count.div_ceil(8))
                    + 3 * u64::from(self.field_count)
            }
        }
    }

    pub fn matches_closed_form(&self) -> bool {
        self.package_bytes == self.original_bytes + self.expected_overhead_bytes()
    }

    pub fn render(&self) -> String {
        format!(
            "original_bytes={}\npackage_bytes={}\nmode={}\ninstruction_count={}\nfield_count={}\ndelta_percent={:.6}\n",
            self.original_bytes,
            self.package_bytes,
            self.mode.code(),
            self.instruction_count,
            self.field_count,
            self.delta_percent(),
        )
    }
}

/// Builds the overhead report for a sealed package against the original
/// image length.
pub fn overhead_report(
    original_len: usize,
    pkg: &SealedPackage,
) -> Result<OverheadReport, AnalysisError> {
    if original_len == 0 {
        return Err(AnalysisError::EmptyInput);
    }
    Ok(OverheadReport {
        original_bytes: original_len as u64,
        package_bytes: pkg.serialized_len() as u64,
        mode: pkg.header.mode,
        instruction_count: pkg.header.instruction_count,
        field_count: pkg.header.field_count,
    })
}

/// Result of a single-bit-flip sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TamperReport {
    pub trials: u64,
    pub detected: u64,
}

impl TamperReport {
    /// Detection rate. A zero-trial sweep detects nothing and misses
    /// nothing; it reports 1.0 by convention.
    pub fn rate(&self) -> f64 {
        if self.trials == 0 {
            1.0
        } else {
            self.detected as f64 / self.trials as f64
        }
    }

    pub fn render(&self) -> String {
        format!(
            "trials={}\ndetected={}\nrate={:.6}\n",
            self.trials,
            self.detected,
            self.rate()
        )
    }
}

/// Flips one uniformly random bit of the package per trial and counts how
/// many flipped packages the device rejects.
///
/// The untampered package must unseal as accepted on the given device;
/// otherwise the sweep would count pre-existing damage as detection.
pub fn tamper_sweep(
    pkg_bytes: &[u8],
    trials: u64,
    sweep_seed: u64,
    model: &DeviceModel,
    challenges: &ChallengeSet,
    context: &[u8],
) -> Result<TamperReport, AnalysisError> {
    if !unseal(pkg_bytes, model, challenges, context).is_accepted() {
        return Err(AnalysisError::BaselineRejected);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sweep_seed);
    let mut detected = 0;
    let mut tampered = pkg_bytes.to_vec();
    for _ in 0..trials {
        let bit = rng.gen_range(0..pkg_bytes.len() * 8);
        tampered[bit / 8] ^= 1 << (bit % 8);
        if !unseal(&tampered, model, challenges, context).is_accepted() {
            detected += 1;
        }
        tampered[bit / 8] ^= 1 << (bit % 8);
    }
    Ok(TamperReport { trials, detected })
}

/// Absolute seal/unseal throughput on this machine. Informational only —
/// there is no pass/fail number attached.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThroughputReport {
    pub code_bytes: u64,
    pub iterations: u32,
    pub seal_mib_per_s: f64,
    pub unseal_mib_per_s: f64,
}

impl ThroughputReport {
    pub fn render(&self) -> String {
        format!(
            "code_bytes={}\niterations={}\nseal_mib_per_s={:.2}\nunseal_mib_per_s={:.2}\n",
            self.code_bytes, self.iterations, self.seal_mib_per_s, self.unseal_mib_per_s
        )
    }
}

/// Measures full-mode seal and unseal rates for a code image on a
/// synthetic benchmark device.
pub fn measure_throughput(
    code: &[u8],
    policy: &EncryptionPolicy,
    iterations: u32,
) -> Result<ThroughputReport, SealError> {
    let model = DeviceModel::synthesize(0xbe7c);
    let challenges = ChallengeSet::random(&mut ChaCha8Rng::seed_from_u64(0xbe7c));
    let key = PufBasedKey::derive(&model.generate_key(&challenges), b"");
    let iterations = iterations.max(1);

    let start = Instant::now();
    let mut pkg_bytes = Vec::new();
    for _ in 0..iterations {
        pkg_bytes = seal(code, &key, policy, Isa::Rv64, 0)?.serialize()?;
    }
    let seal_elapsed = start.elapsed().as_secs_f64();

    let start = Instant::now();
    for _ in 0..iterations {
        assert!(unseal(&pkg_bytes, &model, &challenges, b"").is_accepted());
    }
    let unseal_elapsed = start.elapsed().as_secs_f64();

    let mib = code.len() as f64 / (1024.0 * 1024.0) * iterations as f64;
    Ok(ThroughputReport {
        code_bytes: code.len() as u64,
        iterations,
        seal_mib_per_s: mib / seal_elapsed.max(f64::EPSILON),
        unseal_mib_per_s: mib / unseal_elapsed.max(f64::EPSILON),
    })
}
