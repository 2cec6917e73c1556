//! Key derivation and keystream expansion.
//!
//! The 32-bit PUF key never crosses a module boundary: it is hashed with an
//! optional context into a 256-bit [`PufBasedKey`], and only that derived
//! key is handed to the sealing side. The keystream is counter-mode
//! SHA-256 with a 3-byte domain tag, addressed by absolute byte position:
//!
//! ```text
//! block[i] = SHA-256(key || tag || LE64(i))        tag = "COD" | "SIG"
//! stream   = block[0] || block[1] || ...
//! ```
//!
//! Position addressing means any sub-range of the stream can be generated
//! independently, which is what lets the decryptor skip unencrypted
//! parcels and lets both sides agree without tracking consumption order.

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::puf::PufKey;

/// SHA-256 digest and key length in bytes.
pub const KEY_LEN: usize = 32;

const BLOCK_LEN: usize = 32;
/// Keystream positions are confined to a 32-bit range.
const STREAM_LIMIT: u64 = 1 << 32;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KeyError {
    #[error("key must be {} lowercase hex characters", KEY_LEN * 2)]
    BadKeyHex,
}

/// One-shot SHA-256.
pub fn sha256(data: &[u8]) -> [u8; KEY_LEN] {
    let mut hasher = Sha256::new();
    hasher.update(data);
    hasher.finalize().into()
}

/// Separates the code keystream from the signature keystream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeystreamDomain {
    Code,
    Signature,
}

impl KeystreamDomain {
    fn tag(self) -> &'static [u8; 3] {
        match self {
            KeystreamDomain::Code => b"COD",
            KeystreamDomain::Signature => b"SIG",
        }
    }
}

/// 256-bit key derived from a PUF key; the root of all keystreams.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct PufBasedKey([u8; KEY_LEN]);

impl PufBasedKey {
    pub fn from_bytes(bytes: [u8; KEY_LEN]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; KEY_LEN] {
        &self.0
    }

    /// Derives the key as `SHA-256(puf_key packed LSB-first into 4 bytes,
    /// followed by the context)`. Distinct contexts give independent keys
    /// from the same device fingerprint.
    pub fn derive(puf_key: &PufKey, context: &[u8]) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(puf_key.to_le_bytes());
        hasher.update(context);
        Self(hasher.finalize().into())
    }

    /// Renders the key as 64 lowercase hex characters, the interchange
    /// form used on the command line.
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(text: &str) -> Result<Self, KeyError> {
        if text.len() != KEY_LEN * 2 {
            return Err(KeyError::BadKeyHex);
        }
        let bytes = hex::decode(text).map_err(|_| KeyError::BadKeyHex)?;
        Ok(Self(bytes.try_into().expect("length checked")))
    }
}

impl std::fmt::Debug for PufBasedKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "PufBasedKey({})", self.to_hex())
    }
}

/// Stateless positional slice of the keystream: bytes
/// `[offset, offset + length)` of the domain's block stream.
pub fn keystream_bytes(
    key: &PufBasedKey,
    domain: KeystreamDomain,
    offset: u64,
    length: usize,
) -> Vec<u8> {
    assert!(
        offset + length as u64 <= STREAM_LIMIT,
        "keystream range exceeds the 32-bit position space"
    );
    let mut out = Vec::with_capacity(length);
    let mut cursor = Keystream::new(key, domain);
    for pos in offset..offset + length as u64 {
        out.push(cursor.byte_at(pos));
    }
    out
}

/// Cursor over one domain's keystream with a single-block cache, so
/// sequential walks cost one hash per 32 bytes instead of one per byte.
pub struct Keystream {
    key: PufBasedKey,
    domain: KeystreamDomain,
    block_index: Option<u64>,
    block: [u8; BLOCK_LEN],
}

impl Keystream {
    pub fn new(key: &PufBasedKey, domain: KeystreamDomain) -> Self {
        Self {
            key: *key,
            domain,
            block_index: None,
            block: [0; BLOCK_LEN],
        }
    }

    /// Keystream byte at absolute position `pos`.
    pub fn byte_at(&mut self, pos: u64) -> u8 {
        debug_assert!(pos < STREAM_LIMIT);
        let index = pos / BLOCK_LEN as u64;
        if self.block_index != Some(index) {
            let mut hasher = Sha256::new();
            hasher.update(self.key.0);
            hasher.update(self.domain.tag());
            hasher.update(index.to_le_bytes());
            self.block = hasher.finalize().into();
            self.block_index = Some(index);
        }
        self.block[(pos % BLOCK_LEN as u64) as usize]
    }

    /// XORs the keystream at positions `[pos, pos + buf.len())` into `buf`.
    pub fn xor_into(&mut self, buf: &mut [u8], pos: u64) {
        for (i, b) in buf.iter_mut().enumerate() {
            *b ^= self.byte_at(pos + i as u64);
        }
    }
}
