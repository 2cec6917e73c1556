//! Seal compiled RISC-V code to a specific device and validate it on arrival.
//!
//! The pipeline models two parties joined by an untrusted channel. The
//! sealing side signs a plaintext code image, encrypts code and signature
//! with a key derived from the target device's PUF, and packs everything
//! into a self-describing `.eric` container. The receiving side regenerates
//! the same key from its own hardware model, stream-decrypts the package,
//! recomputes the signature, and releases the plaintext only on an exact
//! match. A device with a different PUF derives a different key and can
//! never produce a matching signature, so a package runs only on the device
//! it was sealed for, and a device runs only packages sealed for it.
//!
//! Module map:
//!
//! * [`puf`] — arbiter-PUF device model and 32-bit PUF key generation
//! * [`keys`] — SHA-256 key derivation and positional keystream expansion
//! * [`riscv`] — instruction parcel iteration, classification, field masks
//! * [`package`] — the sealed container format and code-image ingestion
//! * [`seal`](mod@seal) — instruction selection, signing, encryption, packaging
//! * [`hde`] — streaming decryption, signature validation, image release
//! * [`net`] — store-and-forward distribution over a length-prefixed wire
//! * [`analysis`] — entropy, tamper sweeps, size-overhead accounting

pub mod analysis;
pub mod hde;
pub mod keys;
pub mod net;
pub mod package;
pub mod puf;
pub mod riscv;
pub mod seal;

pub use hde::{unseal, TrustedImage, ValidationOutcome};
pub use keys::PufBasedKey;
pub use package::{EncMode, Isa, SealedPackage};
pub use puf::{Challenge, ChallengeSet, DeviceModel, PufKey};
pub use seal::{seal, EncryptionPolicy};
