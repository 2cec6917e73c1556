//! Shared fixtures for integration tests: a code-image generator that
//! produces realistically distributed instruction streams, the standard
//! immediate-hiding policy set, and a non-streaming reference decryptor
//! used as an independent oracle against the engine's one-pass walk.

#![allow(dead_code)] // each integration test binary uses a subset

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use eric_core::keys::{keystream_bytes, KeystreamDomain, PufBasedKey};
use eric_core::package::{ClassFilter, EncMode, FieldDescriptor, SealedPackage};
use eric_core::puf::{ChallengeSet, DeviceModel};
use eric_core::seal::{EncryptionPolicy, Selection};

/// A handful of frequently used registers, to keep the byte histogram as
/// concentrated as real compiled code.
fn reg(rng: &mut ChaCha8Rng) -> u32 {
    const POPULAR: [u32; 8] = [8, 9, 10, 11, 12, 13, 14, 15];
    POPULAR[rng.gen_range(0..POPULAR.len())]
}

fn gen_word(rng: &mut ChaCha8Rng) -> u32 {
    match rng.gen_range(0..100u32) {
        // Loads with small word-aligned offsets.
        0..=24 => {
            let imm = rng.gen_range(0..16u32) * 8;
            (imm << 20) | (reg(rng) << 15) | (0b011 << 12) | (reg(rng) << 7) | 0x03
        }
        // Stores.
        25..=44 => {
            let imm = rng.gen_range(0..16u32) * 8;
            ((imm >> 5) << 25)
                | (reg(rng) << 20)
                | (reg(rng) << 15)
                | (0b011 << 12)
                | ((imm & 0x1f) << 7)
                | 0x23
        }
        // addi with small immediates.
        45..=69 => {
            let imm = rng.gen_range(0..32u32);
            (imm << 20) | (reg(rng) << 15) | (reg(rng) << 7) | 0x13
        }
        // add.
        70..=84 => (reg(rng) << 20) | (reg(rng) << 15) | (reg(rng) << 7) | 0x33,
        // Short forward branches.
        85..=94 => (reg(rng) << 20) | (reg(rng) << 15) | (0x08 << 7) | 0x63,
        // nop filler runs, like padding in real images.
        _ => 0x13,
    }
}

fn gen_half(rng: &mut ChaCha8Rng) -> u16 {
    match rng.gen_range(0..3u32) {
        // Quadrant 01, c.li-like.
        0 => 0x4501 | (((reg(rng) as u16) & 0x7) << 7),
        // c.jr ra.
        1 => 0x8082,
        // Quadrant 00 with a small payload.
        _ => rng.gen_range(0..32u16) << 5,
    }
}

/// Generates a code image of exactly `target_len` bytes. With a zero
/// `compressed_fraction` the image is all 32-bit parcels and the length
/// must be word-aligned; otherwise 16-bit parcels are mixed in.
pub fn gen_code_image(
    rng: &mut ChaCha8Rng,
    target_len: usize,
    compressed_fraction: f64,
) -> Vec<u8> {
    assert_eq!(target_len % 2, 0, "parcels are 2-byte granular");
    if compressed_fraction == 0.0 {
        assert_eq!(target_len % 4, 0, "all-word images must be word-aligned");
    }
    let mut code = Vec::with_capacity(target_len);
    while code.len() < target_len {
        let remaining = target_len - code.len();
        let half =
            remaining == 2 || (compressed_fraction > 0.0 && rng.gen_bool(compressed_fraction));
        if half {
            code.extend_from_slice(&gen_half(rng).to_le_bytes());
        } else {
            code.extend_from_slice(&gen_word(rng).to_le_bytes());
        }
    }
    code
}

/// Field descriptors hiding load/store immediates while leaving opcodes
/// readable.
pub fn load_store_immediate_descriptors() -> Vec<FieldDescriptor> {
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
    ]
}

/// The policy matrix the round-trip criteria run: full, per-instruction at
/// fractions 0 / 0.3 / 1.0, and field-level with load/store immediates.
pub fn policy_matrix() -> Vec<EncryptionPolicy> {
    vec![
        EncryptionPolicy::full(),
        EncryptionPolicy::per_instruction(Selection::Random {
            fraction: 0.0,
            seed: 11,
        }),
        EncryptionPolicy::per_instruction(Selection::Random {
            fraction: 0.3,
            seed: 12,
        }),
        EncryptionPolicy::per_instruction(Selection::Random {
            fraction: 1.0,
            seed: 13,
        }),
        EncryptionPolicy::field_level(Selection::All, load_store_immediate_descriptors()),
    ]
}

/// A deterministic test device with its challenge set and derived key.
pub fn test_device(seed: u64) -> (DeviceModel, ChallengeSet, PufBasedKey) {
    let model = DeviceModel::synthesize(seed);
    let challenges = ChallengeSet::random(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xc411e5));
    let key = PufBasedKey::derive(&model.generate_key(&challenges), b"");
    (model, challenges, key)
}

// --- Independent reference decryption -----------------------------------
//
// Everything below reimplements the decryption semantics from the format
// documentation alone: its own descriptor mask arithmetic, its own opcode
// table, whole-buffer keystream, direct per-parcel reconstruction. It
// shares no decryption code with the engine, so agreement between the two
// is evidence, not tautology.

fn range_mask(d: &FieldDescriptor) -> u32 {
    (((1u64 << (d.bit_hi - d.bit_lo + 1)) - 1) as u32) << d.bit_lo
}

fn oracle_unfiltered_mask(descriptors: &[FieldDescriptor]) -> u32 {
    descriptors
        .iter()
        .filter(|d| d.filter == ClassFilter::All)
        .map(range_mask)
        .fold(0, |acc, m| acc | m)
}

fn oracle_mask_for_opcode(descriptors: &[FieldDescriptor], opcode: u8) -> u32 {
    let applies = |filter: ClassFilter| match filter {
        ClassFilter::All => true,
        ClassFilter::Loads => opcode == 0x03,
        ClassFilter::Stores => opcode == 0x23,
        ClassFilter::Branches => opcode == 0x63,
        ClassFilter::Jumps => opcode == 0x6f || opcode == 0x67,
    };
    descriptors
        .iter()
        .filter(|d| applies(d.filter))
        .map(range_mask)
        .fold(0, |acc, m| acc | m)
}

/// Whole-buffer reference decryption: materializes the entire keystream up
/// front and rebuilds each parcel directly from the original ciphertext.
pub fn reference_decrypt(pkg: &SealedPackage, key: &PufBasedKey) -> Result<Vec<u8>, String> {
    let ct = &pkg.ciphertext;
    let ks = keystream_bytes(key, KeystreamDomain::Code, 0, ct.len());

    if pkg.header.mode == EncMode::Full {
        return Ok(ct.iter().zip(&ks).map(|(c, k)| c ^ k).collect());
    }

    let map = pkg.map.as_ref().ok_or("partial package without a map")?;
    let count = pkg.header.instruction_count;

    let mut plain = Vec::with_capacity(ct.len());
    let mut offset = 0usize;
    let mut index = 0u32;
    while offset < ct.len() {
        if index >= count {
            return Err("more parcels than map bits".into());
        }
        if offset + 2 > ct.len() {
            return Err("truncated parcel head".into());
        }
        let encrypted = map.bit(index);

        // Recover the head far enough to read the length rule.
        let head_mask: u32 = match pkg.header.mode {
            EncMode::PerInstruction => 0xffff,
            EncMode::FieldLevel => oracle_unfiltered_mask(&pkg.descriptors) & 0xffff,
            EncMode::Full => unreachable!(),
        };
        let head0 = decrypt_byte(ct, &ks, offset, encrypted, head_mask);
        let word = head0 & 0b11 == 0b11;
        let len = if word { 4 } else { 2 };
        if offset + len > ct.len() {
            return Err("truncated parcel body".into());
        }

        // Rebuild the whole parcel in one shot from its full mask. The
        // field-level compressed fallback covers bits 2-15.
        let full_mask: u32 = match (pkg.header.mode, word) {
            (EncMode::PerInstruction, true) => 0xffff_ffff,
            (EncMode::PerInstruction, false) => 0xffff,
            (EncMode::FieldLevel, false) => 0xfffc,
            (EncMode::FieldLevel, true) => {
                oracle_mask_for_opcode(&pkg.descriptors, head0 & 0x7f)
            }
            (EncMode::Full, _) => unreachable!(),
        };
        for i in 0..len {
            plain.push(decrypt_byte(ct, &ks, offset + i, encrypted, full_mask >> (8 * i)));
        }
        offset += len;
        index += 1;
    }
    if index != count {
        return Err("fewer parcels than map bits".into());
    }
    Ok(plain)
}

fn decrypt_byte(ct: &[u8], ks: &[u8], at: usize, encrypted: bool, mask_byte: u32) -> u8 {
    if encrypted {
        ct[at] ^ (ks[at] & mask_byte as u8)
    } else {
        ct[at]
    }
}
