//! Device-side decryption engine: regenerate the key, stream-decrypt,
//! recompute the signature, and release the image only on a match.
//!
//! Decryption is a single forward pass that never needs the whole program
//! buffered to make progress. Partially encrypted packages hide parcel
//! lengths, so the walk decrypts speculatively: at each parcel it first
//! recovers the two bytes holding the length-rule bits, reads the length,
//! then finishes the parcel. This works because the keystream is
//! addressed by byte position — the first two bytes can be decrypted
//! without knowing anything about the rest of the parcel — and because no
//! sealing rule ever encrypts the two length-rule bits themselves except
//! whole-parcel modes, whose speculative step XORs both bytes in full:
//!
//! * mode 1: selected parcels are whole-parcel encrypted, so the
//!   speculative step XORs the full two bytes and the length bits land in
//!   plaintext;
//! * mode 2: descriptors never cover bits 0-1 and the compressed fallback
//!   leaves them plaintext, so the speculative step applies only the
//!   unfiltered descriptor bits and the length bits are already readable.
//!
//! The candidate plaintext is quarantined: rejected outcomes carry only a
//! reason, never decrypted bytes.

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::keys::{Keystream, KeystreamDomain, PufBasedKey};
use crate::package::{
    DescriptorSet, EncMode, PackageError, SealedPackage, COMPRESSED_PARCEL_MASK, SIGNATURE_LEN,
};
use crate::puf::{ChallengeSet, DeviceModel};
use crate::riscv::classify_opcode;
use crate::seal::protect_signature;

/// Errors raised while walking a partially encrypted stream.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StreamError {
    #[error("encryption map exhausted: {parcels} parcels walked against {map_bits} map bits")]
    MapExhausted { parcels: u32, map_bits: u32 },
    #[error("truncated parcel at code offset {offset}")]
    TruncatedParcel { offset: usize },
}

/// A validated plaintext image, released only after signature match.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrustedImage {
    code: Vec<u8>,
    signature: [u8; SIGNATURE_LEN],
    device_id: u64,
}

impl TrustedImage {
    pub fn code(&self) -> &[u8] {
        &self.code
    }

    pub fn into_code(self) -> Vec<u8> {
        self.code
    }

    pub fn signature(&self) -> &[u8; SIGNATURE_LEN] {
        &self.signature
    }

    pub fn device_id(&self) -> u64 {
        self.device_id
    }
}

/// Why an unseal was refused. Carries structural information only; no
/// decrypted byte ever leaves the engine on rejection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RejectReason {
    SignatureMismatch,
    MalformedPackage(MalformedKind),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MalformedKind {
    Parse(PackageError),
    Stream(StreamError),
}

impl std::fmt::Display for RejectReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RejectReason::SignatureMismatch => f.write_str("signature mismatch"),
            RejectReason::MalformedPackage(MalformedKind::Parse(e)) => {
                write!(f, "malformed package: {e}")
            }
            RejectReason::MalformedPackage(MalformedKind::Stream(e)) => {
                write!(f, "malformed package: {e}")
            }
        }
    }
}

/// Outcome of [`unseal`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ValidationOutcome {
    Accepted(TrustedImage),
    Rejected(RejectReason),
}

impl ValidationOutcome {
    pub fn is_accepted(&self) -> bool {
        matches!(self, ValidationOutcome::Accepted(_))
    }
}

enum ParcelPhase {
    /// Collecting the two bytes that hold the length-rule bits.
    Head { have: usize },
    /// Collecting the remaining bytes of a 32-bit parcel.
    Tail { have: usize },
}

/// Incremental decryptor: feed ciphertext in chunks of any size, collect
/// plaintext from the sink, then [`finish`](Self::finish).
///
/// One pass, constant state: at most four buffered bytes, the keystream
/// block cache, and the walk position.
pub struct StreamDecryptor<'p> {
    mode: EncMode,
    descriptors: DescriptorSet,
    pkg: &'p SealedPackage,
    ks: Keystream,
    /// Absolute code offset of the next unconsumed ciphertext byte.
    position: usize,
    /// Map index of the parcel currently being assembled.
    parcel_index: u32,
    phase: ParcelPhase,
    parcel: [u8; 4],
    parcel_encrypted: bool,
}

impl<'p> StreamDecryptor<'p> {
    pub fn new(pkg: &'p SealedPackage, key: &PufBasedKey) -> Self {
        Self {
            mode: pkg.header.mode,
            descriptors: DescriptorSet::new(&pkg.descriptors),
            pkg,
            ks: Keystream::new(key, KeystreamDomain::Code),
            position: 0,
            parcel_index: 0,
            phase: ParcelPhase::Head { have: 0 },
            parcel: [0; 4],
            parcel_encrypted: false,
        }
    }

    fn map_bit(&self, k: u32) -> Option<bool> {
        self.pkg.map.as_ref().map(|m| {
            if k < m.count() {
                m.bit(k)
            } else {
                false
            }
        })
    }

    /// Feeds ciphertext bytes; decrypted plaintext is appended to `out`.
    pub fn feed(&mut self, chunk: &[u8], out: &mut Vec<u8>) -> Result<(), StreamError> {
        for &byte in chunk {
            self.push(byte, out)?;
        }
        Ok(())
    }

    fn push(&mut self, byte: u8, out: &mut Vec<u8>) -> Result<(), StreamError> {
        let pos = self.position;
        self.position += 1;

        if self.mode == EncMode::Full {
            out.push(byte ^ self.ks.byte_at(pos as u64));
            return Ok(());
        }

        match self.phase {
            ParcelPhase::Head { have: 0 } => {
                let count = self.pkg.header.instruction_count;
                if self.parcel_index >= count {
                    return Err(StreamError::MapExhausted {
                        parcels: self.parcel_index + 1,
                        map_bits: count,
                    });
                }
                self.parcel_encrypted = self.map_bit(self.parcel_index).unwrap_or(false);
                self.parcel[0] = byte;
                self.phase = ParcelPhase::Head { have: 1 };
                Ok(())
            }
            ParcelPhase::Head { .. } => {
                self.parcel[1] = byte;
                let head_start = pos - 1;

                // Speculative decrypt of the head: whole bytes in mode 1,
                // unfiltered descriptor bits in mode 2. Either way the
                // length-rule bits end up plaintext.
                if self.parcel_encrypted {
                    let head_mask: u32 = match self.mode {
                        EncMode::PerInstruction => 0xffff,
                        EncMode::FieldLevel => self.descriptors.unfiltered_mask() & 0xffff,
                        EncMode::Full => unreachable!("handled above"),
                    };
                    self.xor_parcel_bits(head_start, 0, 2, head_mask);
                }

                if self.parcel[0] & 0b11 == 0b11 {
                    self.phase = ParcelPhase::Tail { have: 0 };
                    return Ok(());
                }

                // Compressed parcel complete. Under field-level sealing it
                // was encrypted across all non-length bits; apply whatever
                // the speculative step has not already undone.
                if self.parcel_encrypted && self.mode == EncMode::FieldLevel {
                    let spec = self.descriptors.unfiltered_mask() & 0xffff;
                    let remaining = COMPRESSED_PARCEL_MASK as u32 & !spec;
                    self.xor_parcel_bits(head_start, 0, 2, remaining);
                }
                out.extend_from_slice(&self.parcel[..2]);
                self.advance_parcel();
                Ok(())
            }
            ParcelPhase::Tail { have: 0 } => {
                self.parcel[2] = byte;
                self.phase = ParcelPhase::Tail { have: 1 };
                Ok(())
            }
            ParcelPhase::Tail { .. } => {
                self.parcel[3] = byte;
                let parcel_start = pos - 3;
                if self.parcel_encrypted {
                    match self.mode {
                        EncMode::PerInstruction => {
                            self.xor_parcel_bits(parcel_start, 2, 2, 0xffff_0000);
                        }
                        EncMode::FieldLevel => {
                            // The opcode is plaintext now (class-filtered
                            // descriptors never cover bits 0-6 and the head
                            // step applied the unfiltered ones), so classify
                            // and apply the rest of the parcel's mask.
                            let class = classify_opcode(self.parcel[0] as u32 & 0x7f);
                            let full = self.descriptors.mask_for_class(class);
                            let spec = self.descriptors.unfiltered_mask() & 0xffff;
                            let remaining = full & !spec;
                            self.xor_parcel_bits(parcel_start, 0, 4, remaining);
                        }
                        EncMode::Full => unreachable!("handled above"),
                    }
                }
                out.extend_from_slice(&self.parcel);
                self.advance_parcel();
                Ok(())
            }
        }
    }

    fn advance_parcel(&mut self) {
        self.parcel_index += 1;
        self.phase = ParcelPhase::Head { have: 0 };
        self.parcel = [0; 4];
    }

    /// XORs keystream into parcel bytes `[from, from + len)` under an
    /// encoding-bit mask, keystream positions taken from the parcel's
    /// absolute code offset.
    fn xor_parcel_bits(&mut self, parcel_start: usize, from: usize, len: usize, mask: u32) {
        for i in from..from + len {
            let mask_byte = (mask >> (8 * i)) as u8;
            if mask_byte != 0 {
                self.parcel[i] ^= self.ks.byte_at((parcel_start + i) as u64) & mask_byte;
            }
        }
    }

    /// Checks that the walk consumed whole parcels and exactly as many as
    /// the map describes.
    pub fn finish(self) -> Result<(), StreamError> {
        if self.mode == EncMode::Full {
            return Ok(());
        }
        match self.phase {
            ParcelPhase::Head { have: 0 } => {}
            _ => {
                return Err(StreamError::TruncatedParcel {
                    offset: self.position,
                })
            }
        }
        let count = self.pkg.header.instruction_count;
        if self.parcel_index != count {
            return Err(StreamError::MapExhausted {
                parcels: self.parcel_index,
                map_bits: count,
            });
        }
        Ok(())
    }
}

/// Decrypts a parsed package's ciphertext in one pass.
pub fn decrypt_stream(pkg: &SealedPackage, key: &PufBasedKey) -> Result<Vec<u8>, StreamError> {
    let mut out = Vec::with_capacity(pkg.ciphertext.len());
    let mut dec = StreamDecryptor::new(pkg, key);
    dec.feed(&pkg.ciphertext, &mut out)?;
    dec.finish()?;
    Ok(out)
}

/// Whole-byte equality without early exit; the comparison's shape does not
/// depend on where digests differ.
fn digests_match(a: &[u8; SIGNATURE_LEN], b: &[u8; SIGNATURE_LEN]) -> bool {
    let mut diff = 0u8;
    for i in 0..SIGNATURE_LEN {
        diff |= a[i] ^ b[i];
    }
    diff == 0
}

/// Full device-side pipeline: parse, regenerate the key from the local
/// device model, stream-decrypt, recompute the signature, validate.
///
/// The decrypted candidate stays quarantined inside this function; only an
/// accepted outcome exposes it, as a [`TrustedImage`].
pub fn unseal(
    pkg_bytes: &[u8],
    model: &DeviceModel,
    challenges: &ChallengeSet,
    context: &[u8],
) -> ValidationOutcome {
    let pkg = match SealedPackage::parse(pkg_bytes) {
        Ok(pkg) => pkg,
        Err(e) => {
            return ValidationOutcome::Rejected(RejectReason::MalformedPackage(
                MalformedKind::Parse(e),
            ))
        }
    };
    let key = PufBasedKey::derive(&model.generate_key(challenges), context);

    let mut candidate = Vec::with_capacity(pkg.ciphertext.len());
    let mut decryptor = StreamDecryptor::new(&pkg, &key);
    let walk = decryptor
        .feed(&pkg.ciphertext, &mut candidate)
        .and_then(|()| decryptor.finish());
    if let Err(e) = walk {
        return ValidationOutcome::Rejected(RejectReason::MalformedPackage(
            MalformedKind::Stream(e),
        ));
    }

    let mut hasher = Sha256::new();
    hasher.update(&candidate);
    let computed: [u8; SIGNATURE_LEN] = hasher.finalize().into();

    let packaged = protect_signature(&pkg.encrypted_signature, &key, &pkg.envelope_bytes());

    if digests_match(&computed, &packaged) {
        ValidationOutcome::Accepted(TrustedImage {
            code: candidate,
            signature: computed,
            device_id: pkg.header.device_id,
        })
    } else {
        ValidationOutcome::Rejected(RejectReason::SignatureMismatch)
    }
}
