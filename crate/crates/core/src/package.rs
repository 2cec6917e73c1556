//! The sealed package container and code-image ingestion.
//!
//! A `.eric` package is laid out as header, field descriptors, encryption
//! map, ciphertext, encrypted signature — in that order, every multi-byte
//! integer little-endian:
//!
//! ```text
//! offset len  field
//!  0      4   magic "ERIC"
//!  4      1   version (1)
//!  5      1   mode: 0 full, 1 per-instruction, 2 field-level
//!  6      1   isa: 0 RV32, 1 RV64
//!  7      1   flags: bit 0 = compressed parcels present, rest zero
//!  8      8   device_id (routing hint, carries no security weight)
//! 16      4   code_length in bytes
//! 20      4   instruction_count
//! 24      4   map_length in bytes (0 in mode 0, ceil(count / 8) otherwise)
//! 28      1   field_count (0 unless mode 2)
//! 29      3   reserved, zero
//! 32     3*field_count   descriptors: filter, bit_lo, bit_hi
//!  +     map_length      encryption map, bit k of instruction k at
//!                        byte k/8, LSB first; pad bits zero
//!  +     code_length     ciphertext
//!  +     32              encrypted signature
//! ```
//!
//! Every invariant is checked on both serialize and parse, so an invalid
//! package can neither be emitted nor slip through loading.

use thiserror::Error;

use crate::riscv::InstrClass;

/// Package file magic.
pub const PACKAGE_MAGIC: [u8; 4] = *b"ERIC";
/// Package format version.
pub const PACKAGE_VERSION: u8 = 1;
/// Serialized header length.
pub const HEADER_LEN: usize = 32;
/// Serialized signature length.
pub const SIGNATURE_LEN: usize = 32;
/// Serialized field descriptor length.
pub const DESCRIPTOR_LEN: usize = 3;

/// Bits of a compressed parcel that field-level sealing encrypts: all but
/// the two length-rule bits, which the decryptor must read before it can
/// know the parcel is compressed.
pub const COMPRESSED_PARCEL_MASK: u16 = 0xfffc;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PackageError {
    #[error("bad package magic")]
    BadMagic,
    #[error("unsupported package version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated package: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("package invariant violated: {0}")]
    InvariantViolation(&'static str),
    #[error("input is not an ELF object")]
    NotElf,
    #[error("ELF object has no .text section")]
    NoTextSection,
    #[error("unsupported ELF object: {0}")]
    UnsupportedElf(&'static str),
}

/// Encryption mode carried in the header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncMode {
    Full,
    PerInstruction,
    FieldLevel,
}

impl EncMode {
    pub fn code(self) -> u8 {
        match self {
            EncMode::Full => 0,
            EncMode::PerInstruction => 1,
            EncMode::FieldLevel => 2,
        }
    }

    fn from_code(code: u8) -> Result<Self, PackageError> {
        match code {
            0 => Ok(EncMode::Full),
            1 => Ok(EncMode::PerInstruction),
            2 => Ok(EncMode::FieldLevel),
            _ => Err(PackageError::InvariantViolation("mode byte out of range")),
        }
    }
}

/// Target ISA tag carried in the header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Isa {
    Rv32,
    Rv64,
}

impl Isa {
    pub fn code(self) -> u8 {
        match self {
            Isa::Rv32 => 0,
            Isa::Rv64 => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self, PackageError> {
        match code {
            0 => Ok(Isa::Rv32),
            1 => Ok(Isa::Rv64),
            _ => Err(PackageError::InvariantViolation("isa byte out of range")),
        }
    }
}

/// Which instruction class a field descriptor applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassFilter {
    All,
    Loads,
    Stores,
    Branches,
    Jumps,
}

impl ClassFilter {
    pub fn code(self) -> u8 {
        match self {
            ClassFilter::All => 0,
            ClassFilter::Loads => 1,
            ClassFilter::Stores => 2,
            ClassFilter::Branches => 3,
            ClassFilter::Jumps => 4,
        }
    }

    fn from_code(code: u8) -> Result<Self, PackageError> {
        match code {
            0 => Ok(ClassFilter::All),
            1 => Ok(ClassFilter::Loads),
            2 => Ok(ClassFilter::Stores),
            3 => Ok(ClassFilter::Branches),
            4 => Ok(ClassFilter::Jumps),
            _ => Err(PackageError::InvariantViolation("filter byte out of range")),
        }
    }

    pub fn matches(self, class: InstrClass) -> bool {
        matches!(
            (self, class),
            (ClassFilter::All, _)
                | (ClassFilter::Loads, InstrClass::Load)
                | (ClassFilter::Stores, InstrClass::Store)
                | (ClassFilter::Branches, InstrClass::Branch)
                | (ClassFilter::Jumps, InstrClass::Jump)
        )
    }
}

/// An inclusive encoding-bit range to encrypt in matching 32-bit parcels.
///
/// Class-filtered descriptors must not cover the opcode bits 0-6: the
/// decryptor has to classify a parcel before it can tell whether a
/// class-filtered descriptor applies, so the opcode must already be
/// plaintext at that point. Unfiltered descriptors must likewise leave the
/// two length-rule bits (0-1) alone, since the decryptor reads parcel
/// length before anything else. Those two bits are a constant `11` in
/// every 32-bit instruction, so nothing is lost.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FieldDescriptor {
    pub filter: ClassFilter,
    pub bit_lo: u8,
    pub bit_hi: u8,
}

impl FieldDescriptor {
    pub fn validate(&self) -> Result<(), PackageError> {
        if self.bit_lo > self.bit_hi || self.bit_hi > 31 {
            return Err(PackageError::InvariantViolation(
                "descriptor bit range must satisfy bit_lo <= bit_hi <= 31",
            ));
        }
        if self.filter != ClassFilter::All && self.bit_lo < 7 {
            return Err(PackageError::InvariantViolation(
                "class-filtered descriptors must not cover opcode bits 0-6",
            ));
        }
        if self.filter == ClassFilter::All && self.bit_lo < 2 {
            return Err(PackageError::InvariantViolation(
                "descriptors must not cover the length-rule bits 0-1",
            ));
        }
        Ok(())
    }

    /// The descriptor's bits as a 32-bit mask.
    pub fn mask(&self) -> u32 {
        let hi = self.bit_hi as u32;
        let lo = self.bit_lo as u32;
        let span = ((1u64 << (hi - lo + 1)) - 1) as u32;
        span << lo
    }
}

/// Pre-combined masks for a descriptor list, split by filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DescriptorSet {
    all: u32,
    loads: u32,
    stores: u32,
    branches: u32,
    jumps: u32,
}

impl DescriptorSet {
    pub fn new(descriptors: &[FieldDescriptor]) -> Self {
        let mut set = DescriptorSet {
            all: 0,
            loads: 0,
            stores: 0,
            branches: 0,
            jumps: 0,
        };
        for d in descriptors {
            let mask = d.mask();
            match d.filter {
                ClassFilter::All => set.all |= mask,
                ClassFilter::Loads => set.loads |= mask,
                ClassFilter::Stores => set.stores |= mask,
                ClassFilter::Branches => set.branches |= mask,
                ClassFilter::Jumps => set.jumps |= mask,
            }
        }
        set
    }

    /// Bits every selected 32-bit parcel gets, before its class is known.
    pub fn unfiltered_mask(&self) -> u32 {
        self.all
    }

    /// Full encryption mask for a 32-bit parcel of the given class.
    pub fn mask_for_class(&self, class: InstrClass) -> u32 {
        self.all
            | match class {
                InstrClass::Load => self.loads,
                InstrClass::Store => self.stores,
                InstrClass::Branch => self.branches,
                InstrClass::Jump => self.jumps,
                _ => 0,
            }
    }
}

/// Per-instruction selection bits, packed LSB-first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncryptionMap {
    bytes: Vec<u8>,
    count: u32,
}

impl EncryptionMap {
    pub fn from_selected(selected: &[bool]) -> Self {
        let mut bytes = vec![0u8; selected.len().div_ceil(8)];
        for (k, s) in selected.iter().enumerate() {
            if *s {
                bytes[k / 8] |= 1 << (k % 8);
            }
        }
        Self {
            bytes,
            count: selected.len() as u32,
        }
    }

    pub fn from_bytes(bytes: Vec<u8>, count: u32) -> Result<Self, PackageError> {
        if bytes.len() != (count as usize).div_ceil(8) {
            return Err(PackageError::InvariantViolation(
                "map length inconsistent with instruction count",
            ));
        }
        let map = Self { bytes, count };
        if !map.pad_bits_zero() {
            return Err(PackageError::InvariantViolation("map pad bits must be zero"));
        }
        Ok(map)
    }

    pub fn bit(&self, k: u32) -> bool {
        debug_assert!(k < self.count);
        self.bytes[(k / 8) as usize] >> (k % 8) & 1 == 1
    }

    pub fn count(&self) -> u32 {
        self.count
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    fn pad_bits_zero(&self) -> bool {
        let rem = (self.count % 8) as usize;
        if rem == 0 {
            return true;
        }
        match self.bytes.last() {
            Some(last) => last >> rem == 0,
            None => true,
        }
    }
}

/// Parsed or to-be-serialized package header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PackageHeader {
    pub mode: EncMode,
    pub isa: Isa,
    pub has_compressed: bool,
    pub device_id: u64,
    pub code_length: u32,
    pub instruction_count: u32,
    pub map_length: u32,
    pub field_count: u8,
}

impl PackageHeader {
    fn expected_map_length(&self) -> u32 {
        match self.mode {
            EncMode::Full => 0,
            _ => self.instruction_count.div_ceil(8),
        }
    }

    fn validate(&self) -> Result<(), PackageError> {
        match self.mode {
            EncMode::Full => {
                if self.map_length != 0 {
                    return Err(PackageError::InvariantViolation(
                        "mode 0 must carry no encryption map",
                    ));
                }
                if self.field_count != 0 {
                    return Err(PackageError::InvariantViolation(
                        "mode 0 must carry no field descriptors",
                    ));
                }
            }
            EncMode::PerInstruction => {
                if self.field_count != 0 {
                    return Err(PackageError::InvariantViolation(
                        "mode 1 must carry no field descriptors",
                    ));
                }
            }
            EncMode::FieldLevel => {
                if self.field_count == 0 {
                    return Err(PackageError::InvariantViolation(
                        "mode 2 requires at least one field descriptor",
                    ));
                }
            }
        }
        if self.mode != EncMode::Full && self.map_length != self.expected_map_length() {
            return Err(PackageError::InvariantViolation(
                "map length must be ceil(instruction_count / 8)",
            ));
        }
        if !self.has_compressed && self.code_length != 4 * self.instruction_count {
            return Err(PackageError::InvariantViolation(
                "without compressed parcels, code length must be 4 * instruction_count",
            ));
        }
        Ok(())
    }

    fn to_bytes(self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..4].copy_from_slice(&PACKAGE_MAGIC);
        out[4] = PACKAGE_VERSION;
        out[5] = self.mode.code();
        out[6] = self.isa.code();
        out[7] = u8::from(self.has_compressed);
        out[8..16].copy_from_slice(&self.device_id.to_le_bytes());
        out[16..20].copy_from_slice(&self.code_length.to_le_bytes());
        out[20..24].copy_from_slice(&self.instruction_count.to_le_bytes());
        out[24..28].copy_from_slice(&self.map_length.to_le_bytes());
        out[28] = self.field_count;
        out
    }

    fn from_bytes(bytes: &[u8; HEADER_LEN]) -> Result<Self, PackageError> {
        if bytes[0..4] != PACKAGE_MAGIC {
            return Err(PackageError::BadMagic);
        }
        if bytes[4] != PACKAGE_VERSION {
            return Err(PackageError::UnsupportedVersion(bytes[4]));
        }
        if bytes[7] & !1 != 0 {
            return Err(PackageError::InvariantViolation(
                "undefined flag bits must be zero",
            ));
        }
        if bytes[29..32] != [0, 0, 0] {
            return Err(PackageError::InvariantViolation(
                "reserved bytes must be zero",
            ));
        }
        Ok(Self {
            mode: EncMode::from_code(bytes[5])?,
            isa: Isa::from_code(bytes[6])?,
            has_compressed: bytes[7] & 1 == 1,
            device_id: u64::from_le_bytes(bytes[8..16].try_into().expect("fixed slice")),
            code_length: u32::from_le_bytes(bytes[16..20].try_into().expect("fixed slice")),
            instruction_count: u32::from_le_bytes(bytes[20..24].try_into().expect("fixed slice")),
            map_length: u32::from_le_bytes(bytes[24..28].try_into().expect("fixed slice")),
            field_count: bytes[28],
        })
    }
}

/// A complete sealed package.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedPackage {
    pub header: PackageHeader,
    pub descriptors: Vec<FieldDescriptor>,
    pub map: Option<EncryptionMap>,
    pub ciphertext: Vec<u8>,
    pub encrypted_signature: [u8; SIGNATURE_LEN],
}

impl SealedPackage {
    /// Total serialized size.
    pub fn serialized_len(&self) -> usize {
        HEADER_LEN
            + DESCRIPTOR_LEN * self.header.field_count as usize
            + self.header.map_length as usize
            + self.header.code_length as usize
            + SIGNATURE_LEN
    }

    fn validate(&self) -> Result<(), PackageError> {
        self.header.validate()?;
        if self.descriptors.len() != self.header.field_count as usize {
            return Err(PackageError::InvariantViolation(
                "descriptor list inconsistent with field_count",
            ));
        }
        for d in &self.descriptors {
            d.validate()?;
        }
        match (&self.map, self.header.mode) {
            (None, EncMode::Full) => {}
            (Some(map), EncMode::PerInstruction | EncMode::FieldLevel) => {
                if map.count() != self.header.instruction_count
                    || map.as_bytes().len() != self.header.map_length as usize
                {
                    return Err(PackageError::InvariantViolation(
                        "map length inconsistent with instruction count",
                    ));
                }
            }
            _ => {
                return Err(PackageError::InvariantViolation(
                    "encryption map presence must match the mode",
                ));
            }
        }
        if self.ciphertext.len() != self.header.code_length as usize {
            return Err(PackageError::InvariantViolation(
                "ciphertext length inconsistent with header",
            ));
        }
        Ok(())
    }

    /// Serializes to the canonical byte layout. Fails rather than emit a
    /// package violating any invariant.
    pub fn serialize(&self) -> Result<Vec<u8>, PackageError> {
        self.validate()?;
        let mut out = Vec::with_capacity(self.serialized_len());
        out.extend_from_slice(&self.header.to_bytes());
        for d in &self.descriptors {
            out.extend_from_slice(&[d.filter.code(), d.bit_lo, d.bit_hi]);
        }
        if let Some(map) = &self.map {
            out.extend_from_slice(map.as_bytes());
        }
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.encrypted_signature);
        Ok(out)
    }

    /// Parses and fully re-validates a package.
    pub fn parse(bytes: &[u8]) -> Result<Self, PackageError> {
        if bytes.len() < HEADER_LEN {
            return Err(PackageError::Truncated {
                need: HEADER_LEN,
                have: bytes.len(),
            });
        }
        let header =
            PackageHeader::from_bytes(bytes[..HEADER_LEN].try_into().expect("length checked"))?;

        let desc_len = DESCRIPTOR_LEN * header.field_count as usize;
        let need = HEADER_LEN
            + desc_len
            + header.map_length as usize
            + header.code_length as usize
            + SIGNATURE_LEN;
        if bytes.len() < need {
            return Err(PackageError::Truncated {
                need,
                have: bytes.len(),
            });
        }
        if bytes.len() > need {
            return Err(PackageError::InvariantViolation(
                "trailing bytes after package end",
            ));
        }

        let mut at = HEADER_LEN;
        let mut descriptors = Vec::with_capacity(header.field_count as usize);
        for _ in 0..header.field_count {
            let d = FieldDescriptor {
                filter: ClassFilter::from_code(bytes[at])?,
                bit_lo: bytes[at + 1],
                bit_hi: bytes[at + 2],
            };
            descriptors.push(d);
            at += DESCRIPTOR_LEN;
        }

        let map = if header.mode == EncMode::Full {
            None
        } else {
            let raw = bytes[at..at + header.map_length as usize].to_vec();
            at += header.map_length as usize;
            Some(EncryptionMap::from_bytes(raw, header.instruction_count)?)
        };

        let ciphertext = bytes[at..at + header.code_length as usize].to_vec();
        at += header.code_length as usize;
        let encrypted_signature: [u8; SIGNATURE_LEN] = bytes[at..at + SIGNATURE_LEN]
            .try_into()
            .expect("length checked");

        let pkg = Self {
            header,
            descriptors,
            map,
            ciphertext,
            encrypted_signature,
        };
        pkg.validate()?;
        Ok(pkg)
    }

    /// The authenticated envelope: every serialized byte ahead of the
    /// ciphertext (header, descriptors, map). Its digest is folded into
    /// the signature encryption so that no package byte escapes the
    /// integrity check.
    pub fn envelope_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(
            HEADER_LEN
                + DESCRIPTOR_LEN * self.descriptors.len()
                + self.header.map_length as usize,
        );
        out.extend_from_slice(&self.header.to_bytes());
        for d in &self.descriptors {
            out.extend_from_slice(&[d.filter.code(), d.bit_lo, d.bit_hi]);
        }
        if let Some(map) = &self.map {
            out.extend_from_slice(map.as_bytes());
        }
        out
    }
}

/// How [`extract_code`] should interpret its input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodeSource {
    /// Raw code image; the ISA tag must be supplied by the caller.
    Flat(Isa),
    /// Little-endian ELF object; code comes from the `.text` section and
    /// the ISA tag from the ELF class.
    Elf,
}

/// Obtains the code image to seal from a flat binary or an ELF object.
pub fn extract_code(input: &[u8], source: CodeSource) -> Result<(Vec<u8>, Isa), PackageError> {
    match source {
        CodeSource::Flat(isa) => Ok((input.to_vec(), isa)),
        CodeSource::Elf => extract_elf_text(input),
    }
}

const ELF_MAGIC: [u8; 4] = [0x7f, b'E', b'L', b'F'];
const SHT_NOBITS: u32 = 8;

fn read_u16(bytes: &[u8], at: usize) -> Result<u16, PackageError> {
    bytes
        .get(at..at + 2)
        .map(|s| u16::from_le_bytes(s.try_into().expect("fixed slice")))
        .ok_or(PackageError::UnsupportedElf("object truncated"))
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32, PackageError> {
    bytes
        .get(at..at + 4)
        .map(|s| u32::from_le_bytes(s.try_into().expect("fixed slice")))
        .ok_or(PackageError::UnsupportedElf("object truncated"))
}

fn read_u64(bytes: &[u8], at: usize) -> Result<u64, PackageError> {
    bytes
        .get(at..at + 8)
        .map(|s| u64::from_le_bytes(s.try_into().expect("fixed slice")))
        .ok_or(PackageError::UnsupportedElf("object truncated"))
}

struct SectionRef {
    name_offset: u32,
    sh_type: u32,
    offset: u64,
    size: u64,
}

fn extract_elf_text(input: &[u8]) -> Result<(Vec<u8>, Isa), PackageError> {
    if input.len() < 16 || input[..4] != ELF_MAGIC {
        return Err(PackageError::NotElf);
    }
    let isa = match input[4] {
        1 => Isa::Rv32,
        2 => Isa::Rv64,
        _ => return Err(PackageError::UnsupportedElf("unknown ELF class")),
    };
    if input[5] != 1 {
        return Err(PackageError::UnsupportedElf("big-endian objects"));
    }

    let is64 = isa == Isa::Rv64;
    let (shoff, shentsize, shnum, shstrndx) = if is64 {
        (
            read_u64(input, 0x28)?,
            read_u16(input, 0x3a)?,
            read_u16(input, 0x3c)?,
            read_u16(input, 0x3e)?,
        )
    } else {
        (
            read_u32(input, 0x20)? as u64,
            read_u16(input, 0x2e)?,
            read_u16(input, 0x30)?,
            read_u16(input, 0x32)?,
        )
    };
    if shoff == 0 || shnum == 0 {
        return Err(PackageError::UnsupportedElf("no section header table"));
    }
    if shstrndx == 0 || shstrndx >= shnum {
        return Err(PackageError::UnsupportedElf("no section string table"));
    }

    let section = |index: u16| -> Result<SectionRef, PackageError> {
        let base = shoff as usize + index as usize * shentsize as usize;
        if is64 {
            Ok(SectionRef {
                name_offset: read_u32(input, base)?,
                sh_type: read_u32(input, base + 4)?,
                offset: read_u64(input, base + 0x18)?,
                size: read_u64(input, base + 0x20)?,
            })
        } else {
            Ok(SectionRef {
                name_offset: read_u32(input, base)?,
                sh_type: read_u32(input, base + 4)?,
                offset: read_u32(input, base + 0x10)? as u64,
                size: read_u32(input, base + 0x14)? as u64,
            })
        }
    };

    let strtab = section(shstrndx)?;
    let strtab_bytes = input
        .get(strtab.offset as usize..(strtab.offset + strtab.size) as usize)
        .ok_or(PackageError::UnsupportedElf("section string table truncated"))?;
    let name_at = |offset: u32| -> Option<&[u8]> {
        let rest = strtab_bytes.get(offset as usize..)?;
        let end = rest.iter().position(|b| *b == 0)?;
        Some(&rest[..end])
    };

    for index in 0..shnum {
        let s = section(index)?;
        if name_at(s.name_offset) != Some(b".text") {
            continue;
        }
        if s.sh_type == SHT_NOBITS {
            return Err(PackageError::NoTextSection);
        }
        let bytes = input
            .get(s.offset as usize..(s.offset + s.size) as usize)
            .ok_or(PackageError::UnsupportedElf(".text section truncated"))?;
        return Ok((bytes.to_vec(), isa));
    }
    Err(PackageError::NoTextSection)
}
