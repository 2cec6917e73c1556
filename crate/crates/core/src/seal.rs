//! The sealing pipeline: select instructions, sign the plaintext, encrypt
//! code and signature under the target's key, emit a package.
//!
//! Signing happens before encryption, so the packaged signature is always
//! the digest of the plaintext. The code keystream is addressed by
//! absolute byte offset: the byte at code offset `j` is XORed with
//! keystream byte `j` whenever it is encrypted, no matter how many earlier
//! bytes were. The signature is encrypted as
//!
//! ```text
//! encrypted_signature = SHA-256(code)
//!                     ^ keystream(key, SIG, 0..32)
//!                     ^ SHA-256(header || descriptors || map)
//! ```
//!
//! Folding the envelope digest into the signature encryption binds every
//! plaintext byte of the package to the key: flipping any header, map, or
//! descriptor bit desynchronizes the recovered signature just as surely as
//! flipping the ciphertext does. The envelope digest is public, so the
//! extra term costs no secrecy.

use std::collections::BTreeSet;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::keys::{keystream_bytes, sha256, Keystream, KeystreamDomain, PufBasedKey};
use crate::package::{
    ClassFilter, DescriptorSet, EncMode, EncryptionMap, FieldDescriptor, Isa, PackageError,
    PackageHeader, SealedPackage, COMPRESSED_PARCEL_MASK, SIGNATURE_LEN,
};
use crate::riscv::{classify, decode_image, DecodeError, InstrClass, InstrParcel};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SealError {
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Package(#[from] PackageError),
    #[error("explicit instruction index {index} out of range ({count} instructions)")]
    IndexOutOfRange { index: u32, count: usize },
    #[error("policy violation: {0}")]
    PolicyViolation(String),
    #[error("code image of {0} bytes exceeds the 32-bit package limit")]
    ImageTooLarge(usize),
}

/// Errors from the policy file parser.
#[derive(Debug, Error, PartialEq, Eq)]
#[error("policy line {line}: {message}")]
pub struct PolicyError {
    pub line: usize,
    pub message: String,
}

/// Which instructions a partial policy encrypts.
#[derive(Debug, Clone, PartialEq)]
pub enum Selection {
    All,
    /// Each instruction selected independently with the given probability,
    /// from a generator seeded with `seed` so runs reproduce exactly.
    Random { fraction: f64, seed: u64 },
    Classes(BTreeSet<InstrClass>),
    Explicit(Vec<u32>),
}

/// A validated encryption policy.
#[derive(Debug, Clone, PartialEq)]
pub struct EncryptionPolicy {
    pub mode: EncMode,
    pub selection: Selection,
    pub descriptors: Vec<FieldDescriptor>,
}

impl EncryptionPolicy {
    pub fn full() -> Self {
        Self {
            mode: EncMode::Full,
            selection: Selection::All,
            descriptors: Vec::new(),
        }
    }

    pub fn per_instruction(selection: Selection) -> Self {
        Self {
            mode: EncMode::PerInstruction,
            selection,
            descriptors: Vec::new(),
        }
    }

    pub fn field_level(selection: Selection, descriptors: Vec<FieldDescriptor>) -> Self {
        Self {
            mode: EncMode::FieldLevel,
            selection,
            descriptors,
        }
    }

    pub fn validate(&self) -> Result<(), SealError> {
        match self.mode {
            EncMode::Full => {
                if self.selection != Selection::All {
                    return Err(SealError::PolicyViolation(
                        "full mode selects every instruction; drop the selection directive".into(),
                    ));
                }
                if !self.descriptors.is_empty() {
                    return Err(SealError::PolicyViolation(
                        "full mode takes no field descriptors".into(),
                    ));
                }
            }
            EncMode::PerInstruction => {
                if !self.descriptors.is_empty() {
                    return Err(SealError::PolicyViolation(
                        "per-instruction mode takes no field descriptors".into(),
                    ));
                }
            }
            EncMode::FieldLevel => {
                if self.descriptors.is_empty() {
                    return Err(SealError::PolicyViolation(
                        "field-level mode needs at least one field descriptor".into(),
                    ));
                }
                if self.descriptors.len() > u8::MAX as usize {
                    return Err(SealError::PolicyViolation(
                        "at most 255 field descriptors".into(),
                    ));
                }
            }
        }
        if let Selection::Random { fraction, .. } = self.selection {
            if !(0.0..=1.0).contains(&fraction) {
                return Err(SealError::PolicyViolation(format!(
                    "selection fraction {fraction} outside [0, 1]"
                )));
            }
        }
        for d in &self.descriptors {
            d.validate()?;
        }
        Ok(())
    }

    /// Parses the line-oriented policy file format. Directives:
    ///
    /// ```text
    /// mode full|partial|fields
    /// fraction <real>            # random selection probability
    /// seed <u64>                 # selection seed (default 0)
    /// classes load,store,...     # class-based selection
    /// indices 3,17,42            # explicit selection
    /// field <all|loads|stores|branches|jumps> <bit_lo>..<bit_hi>
    /// ```
    ///
    /// Blank lines and `#` comments are ignored; anything else is an
    /// error. At most one selection form may be given.
    pub fn from_policy_text(text: &str) -> Result<Self, PolicyError> {
        let fail = |line: usize, message: String| PolicyError { line, message };

        let mut mode: Option<EncMode> = None;
        let mut fraction: Option<f64> = None;
        let mut seed: Option<u64> = None;
        let mut classes: Option<BTreeSet<InstrClass>> = None;
        let mut indices: Option<Vec<u32>> = None;
        let mut descriptors: Vec<FieldDescriptor> = Vec::new();

        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (directive, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
            let rest = rest.trim();
            match directive {
                "mode" => {
                    if mode.is_some() {
                        return Err(fail(line_no, "duplicate `mode` directive".into()));
                    }
                    mode = Some(match rest {
                        "full" => EncMode::Full,
                        "partial" => EncMode::PerInstruction,
                        "fields" => EncMode::FieldLevel,
                        other => {
                            return Err(fail(
                                line_no,
                                format!("unknown mode `{other}` (expected full|partial|fields)"),
                            ))
                        }
                    });
                }
                "fraction" => {
                    if fraction.is_some() {
                        return Err(fail(line_no, "duplicate `fraction` directive".into()));
                    }
                    fraction = Some(
                        rest.parse::<f64>()
                            .map_err(|_| fail(line_no, format!("bad fraction `{rest}`")))?,
                    );
                }
                "seed" => {
                    if seed.is_some() {
                        return Err(fail(line_no, "duplicate `seed` directive".into()));
                    }
                    seed = Some(
                        rest.parse::<u64>()
                            .map_err(|_| fail(line_no, format!("bad seed `{rest}`")))?,
                    );
                }
                "classes" => {
                    if classes.is_some() {
                        return Err(fail(line_no, "duplicate `classes` directive".into()));
                    }
                    let mut set = BTreeSet::new();
                    for name in rest.split(',') {
                        let name = name.trim();
                        set.insert(
                            InstrClass::from_str(name).map_err(|e| fail(line_no, e))?,
                        );
                    }
                    classes = Some(set);
                }
                "indices" => {
                    if indices.is_some() {
                        return Err(fail(line_no, "duplicate `indices` directive".into()));
                    }
                    let mut list = Vec::new();
                    for part in rest.split(',') {
                        let part = part.trim();
                        list.push(
                            part.parse::<u32>()
                                .map_err(|_| fail(line_no, format!("bad index `{part}`")))?,
                        );
                    }
                    indices = Some(list);
                }
                "field" => {
                    let mut parts = rest.split_whitespace();
                    let filter = match parts.next() {
                        Some("all") => ClassFilter::All,
                        Some("loads") => ClassFilter::Loads,
                        Some("stores") => ClassFilter::Stores,
                        Some("branches") => ClassFilter::Branches,
                        Some("jumps") => ClassFilter::Jumps,
                        other => {
                            return Err(fail(
                                line_no,
                                format!("bad field filter `{}`", other.unwrap_or("")),
                            ))
                        }
                    };
                    let range = parts.next().ok_or_else(|| {
                        fail(line_no, "field needs a `<bit_lo>..<bit_hi>` range".into())
                    })?;
                    if parts.next().is_some() {
                        return Err(fail(line_no, "trailing input after field range".into()));
                    }
                    let (lo, hi) = range.split_once("..").ok_or_else(|| {
                        fail(line_no, format!("bad bit range `{range}` (expected lo..hi)"))
                    })?;
                    let bit_lo = lo
                        .parse::<u8>()
                        .map_err(|_| fail(line_no, format!("bad bit index `{lo}`")))?;
                    let bit_hi = hi
                        .parse::<u8>()
                        .map_err(|_| fail(line_no, format!("bad bit index `{hi}`")))?;
                    descriptors.push(FieldDescriptor {
                        filter,
                        bit_lo,
                        bit_hi,
                    });
                }
                other => {
                    return Err(fail(line_no, format!("unknown directive `{other}`")));
                }
            }
        }

        let mode = mode.ok_or_else(|| fail(0, "missing `mode` directive".into()))?;
        let mut selections = 0;
        selections += usize::from(fraction.is_some());
        selections += usize::from(classes.is_some());
        selections += usize::from(indices.is_some());
        if selections > 1 {
            return Err(fail(0, "at most one selection form may be given".into()));
        }
        if seed.is_some() && fraction.is_none() {
            return Err(fail(0, "`seed` is only meaningful with `fraction`".into()));
        }
        let selection = if let Some(fraction) = fraction {
            Selection::Random {
                fraction,
                seed: seed.unwrap_or(0),
            }
        } else if let Some(classes) = classes {
            Selection::Classes(classes)
        } else if let Some(indices) = indices {
            Selection::Explicit(indices)
        } else {
            Selection::All
        };

        let policy = EncryptionPolicy {
            mode,
            selection,
            descriptors,
        };
        policy
            .validate()
            .map_err(|e| fail(0, e.to_string()))?;
        Ok(policy)
    }
}

/// Marks which instructions the policy selects, one bit per parcel.
pub fn select_instructions(
    stream: &[InstrParcel],
    policy: &EncryptionPolicy,
) -> Result<Vec<bool>, SealError> {
    let count = stream.len();
    match &policy.selection {
        Selection::All => Ok(vec![true; count]),
        Selection::Random { fraction, seed } => {
            if !(0.0..=1.0).contains(fraction) {
                return Err(SealError::PolicyViolation(format!(
                    "selection fraction {fraction} outside [0, 1]"
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            Ok((0..count).map(|_| rng.gen_bool(*fraction)).collect())
        }
        Selection::Classes(set) => Ok(stream.iter().map(|p| set.contains(&classify(p))).collect()),
        Selection::Explicit(indices) => {
            let mut selected = vec![false; count];
            for &index in indices {
                let slot = selected.get_mut(index as usize).ok_or(
                    SealError::IndexOutOfRange {
                        index,
                        count,
                    },
                )?;
                *slot = true;
            }
            Ok(selected)
        }
    }
}

/// The program signature: SHA-256 over the plaintext code image.
pub fn sign_program(code: &[u8]) -> [u8; SIGNATURE_LEN] {
    sha256(code)
}

/// Encrypts the selected parcels in place over a copy of `code` and builds
/// the per-instruction map (modes 1 and 2; full mode carries none).
///
/// Field-level rules per selected parcel:
/// * 32-bit: XOR the bits of every unfiltered descriptor plus every
///   descriptor whose filter matches the parcel's plaintext class.
/// * 16-bit: field positions are not stable across compressed formats, so
///   the whole parcel is XORed except the two length-rule bits.
pub fn encrypt_code(
    code: &[u8],
    stream: &[InstrParcel],
    selected: &[bool],
    policy: &EncryptionPolicy,
    key: &PufBasedKey,
) -> Result<(Vec<u8>, Option<EncryptionMap>), SealError> {
    assert_eq!(stream.len(), selected.len(), "one selection bit per parcel");
    policy.validate()?;

    let mut ciphertext = code.to_vec();
    let mut ks = Keystream::new(key, KeystreamDomain::Code);

    match policy.mode {
        EncMode::Full => {
            ks.xor_into(&mut ciphertext, 0);
            Ok((ciphertext, None))
        }
        EncMode::PerInstruction => {
            for (parcel, _) in stream.iter().zip(selected).filter(|(_, s)| **s) {
                let range = parcel.offset()..parcel.offset() + parcel.len();
                ks.xor_into(&mut ciphertext[range], parcel.offset() as u64);
            }
            Ok((ciphertext, Some(EncryptionMap::from_selected(selected))))
        }
        EncMode::FieldLevel => {
            let set = DescriptorSet::new(&policy.descriptors);
            for (parcel, _) in stream.iter().zip(selected).filter(|(_, s)| **s) {
                let mask: u32 = if parcel.is_compressed() {
                    COMPRESSED_PARCEL_MASK as u32
                } else {
                    set.mask_for_class(classify(parcel))
                };
                xor_masked(&mut ciphertext, &mut ks, parcel.offset(), parcel.len(), mask);
            }
            Ok((ciphertext, Some(EncryptionMap::from_selected(selected))))
        }
    }
}

/// XORs keystream into `buf[offset..offset+len]` under an encoding-bit
/// mask (mask bit `b` gates bit `b % 8` of byte `offset + b / 8`).
fn xor_masked(buf: &mut [u8], ks: &mut Keystream, offset: usize, len: usize, mask: u32) {
    for i in 0..len {
        let mask_byte = (mask >> (8 * i)) as u8;
        if mask_byte != 0 {
            buf[offset + i] ^= ks.byte_at((offset + i) as u64) & mask_byte;
        }
    }
}

/// Encrypts the signature for the package: keystream plus the envelope
/// digest, binding header, descriptors, and map into validation.
pub(crate) fn protect_signature(
    signature: &[u8; SIGNATURE_LEN],
    key: &PufBasedKey,
    envelope: &[u8],
) -> [u8; SIGNATURE_LEN] {
    let stream = keystream_bytes(key, KeystreamDomain::Signature, 0, SIGNATURE_LEN);
    let envelope_digest = sha256(envelope);
    let mut out = *signature;
    for i in 0..SIGNATURE_LEN {
        out[i] ^= stream[i] ^ envelope_digest[i];
    }
    out
}

/// Seals a code image for the device owning `key`.
pub fn seal(
    code: &[u8],
    key: &PufBasedKey,
    policy: &EncryptionPolicy,
    isa: Isa,
    device_id: u64,
) -> Result<SealedPackage, SealError> {
    if u32::try_from(code.len()).is_err() {
        return Err(SealError::ImageTooLarge(code.len()));
    }
    policy.validate()?;
    let stream = decode_image(code)?;
    let selected = select_instructions(&stream, policy)?;

    let signature = sign_program(code);
    let (ciphertext, map) = encrypt_code(code, &stream, &selected, policy, key)?;

    let header = PackageHeader {
        mode: policy.mode,
        isa,
        has_compressed: stream.iter().any(|p| p.is_compressed()),
        device_id,
        code_length: code.len() as u32,
        instruction_count: stream.len() as u32,
        map_length: map.as_ref().map_or(0, |m| m.as_bytes().len() as u32),
        field_count: policy.descriptors.len() as u8,
    };
    let mut pkg = SealedPackage {
        header,
        descriptors: policy.descriptors.clone(),
        map,
        ciphertext,
        encrypted_signature: [0; SIGNATURE_LEN],
    };
    pkg.encrypted_signature = protect_signature(&signature, key, &pkg.envelope_bytes());
    Ok(pkg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keys::KEY_LEN;

    const NOP: u32 = 0x0000_0013;
    const LW: u32 = 0x0000_2083;
    const SW: u32 = 0x0051_2023;

    fn key() -> PufBasedKey {
        PufBasedKey::from_bytes([0x42; KEY_LEN])
    }

    fn words(ws: &[u32]) -> Vec<u8> {
        ws.iter().flat_map(|w| w.to_le_bytes()).collect()
    }

    fn load_store_imm_policy(selection: Selection) -> EncryptionPolicy {
        EncryptionPolicy::field_level(
            selection,
            vec![
                FieldDescriptor {
                    filter: ClassFilter::Loads,
                    bit_lo: 20,
                    bit_hi: 31,
                },
                FieldDescriptor {
                    filter: ClassFilter::Stores,
                    bit_lo: 25,
                    bit_hi: 31,
                },
                FieldDescriptor {
                    filter: ClassFilter::Stores,
                    bit_lo: 7,
                    bit_hi: 11,
                },
            ],
        )
    }

    #[test]
    fn select_all_marks_everything() {
        let code = words(&[NOP; 5]);
        let stream = decode_image(&code).unwrap();
        let selected =
            select_instructions(&stream, &EncryptionPolicy::full()).unwrap();
        assert_eq!(selected, vec![true; 5]);
    }

    #[test]
    fn random_fraction_boundaries() {
        let code = words(&[NOP; 64]);
        let stream = decode_image(&code).unwrap();
        let zeros = select_instructions(
            &stream,
            &EncryptionPolicy::per_instruction(Selection::Random {
                fraction: 0.0,
                seed: 1,
            }),
        )
        .unwrap();
        assert!(zeros.iter().all(|s| !s));
        let ones = select_instructions(
            &stream,
            &EncryptionPolicy::per_instruction(Selection::Random {
                fraction: 1.0,
                seed: 1,
            }),
        )
        .unwrap();
        assert!(ones.iter().all(|s| *s));
    }

    #[test]
    fn random_selection_is_reproducible() {
        let code = words(&[NOP; 128]);
        let stream = decode_image(&code).unwrap();
        let policy = EncryptionPolicy::per_instruction(Selection::Random {
            fraction: 0.3,
            seed: 99,
        });
        assert_eq!(
            select_instructions(&stream, &policy).unwrap(),
            select_instructions(&stream, &policy).unwrap()
        );
    }

    #[test]
    fn class_selection_follows_classify() {
        let code = words(&[NOP, LW, SW]);
        let stream = decode_image(&code).unwrap();
        let policy = EncryptionPolicy::per_instruction(Selection::Classes(
            [InstrClass::Load, InstrClass::Store].into_iter().collect(),
        ));
        assert_eq!(
            select_instructions(&stream, &policy).unwrap(),
            vec![false, true, true]
        );
    }

    #[test]
    fn explicit_selection_checks_range() {
        let code = words(&[NOP; 4]);
        let stream = decode_image(&code).unwrap();
        let policy = EncryptionPolicy::per_instruction(Selection::Explicit(vec![1, 3]));
        assert_eq!(
            select_instructions(&stream, &policy).unwrap(),
            vec![false, true, false, true]
        );
        let bad = EncryptionPolicy::per_instruction(Selection::Explicit(vec![4]));
        assert_eq!(
            select_instructions(&stream, &bad),
            Err(SealError::IndexOutOfRange { index: 4, count: 4 })
        );
    }

    #[test]
    fn sign_program_is_sha256_of_plaintext() {
        assert_eq!(
            hex::encode(sign_program(b"")),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        let code = words(&[NOP, LW]);
        assert_eq!(sign_program(&code), sha256(&code));
        let mut flipped = code.clone();
        flipped[0] ^= 1;
        assert_ne!(sign_program(&code), sign_program(&flipped));
    }

    #[test]
    fn full_mode_ciphertext_is_code_xor_keystream() {
        let code = words(&[NOP, LW, SW]);
        let stream = decode_image(&code).unwrap();
        let selected = vec![true; 3];
        let (ct, map) =
            encrypt_code(&code, &stream, &selected, &EncryptionPolicy::full(), &key()).unwrap();
        assert!(map.is_none());
        let expected: Vec<u8> = code
            .iter()
            .zip(keystream_bytes(&key(), KeystreamDomain::Code, 0, code.len()))
            .map(|(c, k)| c ^ k)
            .collect();
        assert_eq!(ct, expected);
    }

    #[test]
    fn empty_selection_leaves_code_untouched() {
        let code = words(&[NOP, LW, SW]);
        let stream = decode_image(&code).unwrap();
        let selected = vec![false; 3];
        let policy = EncryptionPolicy::per_instruction(Selection::Explicit(vec![]));
        let (ct, map) = encrypt_code(&code, &stream, &selected, &policy, &key()).unwrap();
        assert_eq!(ct, code);
        let map = map.unwrap();
        assert!((0..3).all(|k| !map.bit(k)));
    }

    #[test]
    fn unselected_parcels_stay_byte_identical() {
        let code = words(&[NOP, LW, SW, NOP]);
        let stream = decode_image(&code).unwrap();
        let selected = vec![false, true, false, true];
        let policy = EncryptionPolicy::per_instruction(Selection::Explicit(vec![1, 3]));
        let (ct, _) = encrypt_code(&code, &stream, &selected, &policy, &key()).unwrap();
        assert_eq!(ct[0..4], code[0..4]);
        assert_ne!(ct[4..8], code[4..8]);
        assert_eq!(ct[8..12], code[8..12]);
        assert_ne!(ct[12..16], code[12..16]);
    }

    #[test]
    fn per_instruction_keystream_is_positional() {
        // Encrypting only parcel 1 must use the same keystream bytes the
        // full mode would use at that offset.
        let code = words(&[NOP, LW, SW]);
        let stream = decode_image(&code).unwrap();
        let policy = EncryptionPolicy::per_instruction(Selection::Explicit(vec![1]));
        let selected = vec![false, true, false];
        let (partial, _) = encrypt_code(&code, &stream, &selected, &policy, &key()).unwrap();
        let (full, _) = encrypt_code(
            &code,
            &stream,
            &[true, true, true],
            &EncryptionPolicy::full(),
            &key(),
        )
        .unwrap();
        assert_eq!(partial[4..8], full[4..8]);
    }

    #[test]
    fn field_level_preserves_opcode_bits() {
        let code = words(&[LW, SW, NOP]);
        let stream = decode_image(&code).unwrap();
        let policy = load_store_imm_policy(Selection::All);
        let selected = vec![true; 3];
        let (ct, _) = encrypt_code(&code, &stream, &selected, &policy, &key()).unwrap();
        for parcel in &stream {
            assert_eq!(
                ct[parcel.offset()] & 0x7f,
                code[parcel.offset()] & 0x7f,
                "opcode bits changed at offset {}",
                parcel.offset()
            );
        }
        // Load immediate (bits 20-31) did change.
        assert_ne!(ct[2..4], code[2..4]);
        // The NOP matches no descriptor and is untouched.
        assert_eq!(ct[8..12], code[8..12]);
    }

    #[test]
    fn field_level_encrypts_compressed_parcels_except_length_bits() {
        let mut code = words(&[LW]);
        code.extend_from_slice(&0x4501u16.to_le_bytes()); // c.li a0, 0
        let stream = decode_image(&code).unwrap();
        let policy = load_store_imm_policy(Selection::All);
        let (ct, _) = encrypt_code(&code, &stream, &[true, true], &policy, &key()).unwrap();
        assert_eq!(ct[4] & 0b11, code[4] & 0b11, "length-rule bits must survive");
        assert_ne!(ct[4..6], code[4..6], "compressed parcel body must change");
    }

    #[test]
    fn xor_involution_recovers_code() {
        let code = words(&[NOP, LW, SW]);
        let stream = decode_image(&code).unwrap();
        let policy = EncryptionPolicy::per_instruction(Selection::Random {
            fraction: 0.5,
            seed: 3,
        });
        let selected = select_instructions(&stream, &policy).unwrap();
        let (ct, _) = encrypt_code(&code, &stream, &selected, &policy, &key()).unwrap();
        let (back, _) = encrypt_code(&ct, &stream, &selected, &policy, &key()).unwrap();
        assert_eq!(back, code);
    }

    #[test]
    fn seal_produces_expected_sizes() {
        let code = words(&[NOP, LW]);
        let pkg = seal(&code, &key(), &EncryptionPolicy::full(), Isa::Rv64, 7).unwrap();
        assert_eq!(pkg.serialize().unwrap().len(), 72);

        let n = 100usize;
        let code = words(&vec![NOP; n]);
        let policy = EncryptionPolicy::per_instruction(Selection::All);
        let pkg = seal(&code, &key(), &policy, Isa::Rv64, 7).unwrap();
        assert_eq!(
            pkg.serialize().unwrap().len(),
            64 + n.div_ceil(8) + code.len()
        );
    }

    #[test]
    fn seal_is_deterministic() {
        let code = words(&[NOP, LW, SW]);
        let policy = EncryptionPolicy::per_instruction(Selection::Random {
            fraction: 0.5,
            seed: 8,
        });
        let a = seal(&code, &key(), &policy, Isa::Rv64, 1).unwrap();
        let b = seal(&code, &key(), &policy, Isa::Rv64, 1).unwrap();
        assert_eq!(a.serialize().unwrap(), b.serialize().unwrap());
    }

    #[test]
    fn packaged_signature_decrypts_to_plaintext_digest() {
        let code = words(&[NOP, LW, SW]);
        let pkg = seal(&code, &key(), &EncryptionPolicy::full(), Isa::Rv64, 7).unwrap();
        let recovered = protect_signature(
            &pkg.encrypted_signature,
            &key(),
            &pkg.envelope_bytes(),
        );
        assert_eq!(recovered, sign_program(&code));
        assert_ne!(pkg.encrypted_signature, sign_program(&code));
    }

    #[test]
    fn seal_propagates_decode_errors() {
        let err = seal(&[0x13, 0x00], &key(), &EncryptionPolicy::full(), Isa::Rv32, 0).unwrap_err();
        assert!(matches!(err, SealError::Decode(_)));
    }

    #[test]
    fn policy_file_full() {
        let p = EncryptionPolicy::from_policy_text("mode full\n").unwrap();
        assert_eq!(p, EncryptionPolicy::full());
    }

    #[test]
    fn policy_file_partial_random() {
        let p =
            EncryptionPolicy::from_policy_text("mode partial\nfraction 0.3\nseed 42\n").unwrap();
        assert_eq!(
            p.selection,
            Selection::Random {
                fraction: 0.3,
                seed: 42
            }
        );
        let p = EncryptionPolicy::from_policy_text("mode partial\nfraction 0.3\n").unwrap();
        assert_eq!(
            p.selection,
            Selection::Random {
                fraction: 0.3,
                seed: 0
            }
        );
    }

    #[test]
    fn policy_file_classes_and_indices() {
        let p = EncryptionPolicy::from_policy_text("mode partial\nclasses load, store\n").unwrap();
        assert_eq!(
            p.selection,
            Selection::Classes([InstrClass::Load, InstrClass::Store].into_iter().collect())
        );
        let p = EncryptionPolicy::from_policy_text("mode partial\nindices 3,17,42\n").unwrap();
        assert_eq!(p.selection, Selection::Explicit(vec![3, 17, 42]));
    }

    #[test]
    fn policy_file_fields() {
        let text = "mode fields\nfield loads 20..31\nfield stores 25..31\nfield stores 7..11\n";
        let p = EncryptionPolicy::from_policy_text(text).unwrap();
        assert_eq!(p.descriptors.len(), 3);
        assert_eq!(p.descriptors[0].filter, ClassFilter::Loads);
        assert_eq!((p.descriptors[0].bit_lo, p.descriptors[0].bit_hi), (20, 31));
    }

    #[test]
    fn policy_file_rejects_bad_input() {
        assert!(EncryptionPolicy::from_policy_text("").is_err());
        assert!(EncryptionPolicy::from_policy_text("mode fields\n").is_err());
        assert!(EncryptionPolicy::from_policy_text("mode full\nfraction 0.5\n").is_err());
        assert!(EncryptionPolicy::from_policy_text("mode partial\nfraction 1.5\n").is_err());
        assert!(EncryptionPolicy::from_policy_text("encrypt everything\n").is_err());
        assert!(EncryptionPolicy::from_policy_text("mode partial\nseed 3\n").is_err());
        assert!(
            EncryptionPolicy::from_policy_text("mode partial\nfraction 0.2\nindices 1\n").is_err()
        );
        assert!(EncryptionPolicy::from_policy_text("mode fields\nfield all 0..6\n").is_err());
        assert!(EncryptionPolicy::from_policy_text("mode fields\nfield loads 5..11\n").is_err());
    }

    #[test]
    fn policy_file_comments_and_blanks_are_ignored() {
        let text = "# immediate-hiding policy\n\nmode fields\nfield loads 20..31\n";
        assert!(EncryptionPolicy::from_policy_text(text).is_ok());
    }
}
