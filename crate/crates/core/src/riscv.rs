//! Minimal RISC-V instruction stream reader.
//!
//! The pipeline only needs parcel boundaries, a coarse class per
//! instruction, and field bit positions for field-level encryption — not
//! semantics. Parcel length comes from the standard encoding-length rule:
//! low two bits `11` means a 32-bit instruction, anything else is a 16-bit
//! compressed parcel. The longer 48/64-bit encodings (low bits `11` with
//! bits 2..4 all set) are outside RV32/RV64GC and are rejected.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("truncated parcel at offset {offset}: need {need} bytes, have {have}")]
    TruncatedParcel {
        offset: usize,
        need: usize,
        have: usize,
    },
    #[error("unsupported instruction encoding (>= 48 bits) at offset {offset}")]
    UnsupportedEncoding { offset: usize },
    #[error("field addressing is not supported on 16-bit parcels")]
    UnsupportedParcel,
    #[error("instruction format has no {0:?} field")]
    FieldAbsent(Field),
}

/// Length in bytes of the parcel starting with `first_byte`.
pub fn parcel_len(first_byte: u8) -> Option<usize> {
    if first_byte & 0b11 != 0b11 {
        Some(2)
    } else if first_byte & 0b1_1100 != 0b1_1100 {
        Some(4)
    } else {
        None
    }
}

/// One instruction parcel: a 16-bit compressed or 32-bit base encoding at
/// a byte offset, stored in memory order (little-endian encoding).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstrParcel {
    offset: usize,
    raw: [u8; 4],
    len: u8,
}

#[allow(clippy::len_without_is_empty)]
impl InstrParcel {
    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_compressed(&self) -> bool {
        self.len == 2
    }

    /// The parcel's bytes in memory order.
    pub fn bytes(&self) -> &[u8] {
        &self.raw[..self.len as usize]
    }

    /// The encoding as an integer, bit 0 of the encoding in bit 0.
    /// 16-bit parcels occupy the low half.
    pub fn word(&self) -> u32 {
        u32::from_le_bytes(self.raw)
    }
}

/// Walks a code image parcel by parcel.
///
/// Parcels tile the image exactly: ascending offsets, no gaps, no
/// overlaps; an image ending mid-parcel is an error.
pub fn iterate_instructions(code: &[u8]) -> InstrIter<'_> {
    InstrIter { code, offset: 0 }
}

/// Convenience collector over [`iterate_instructions`].
pub fn decode_image(code: &[u8]) -> Result<Vec<InstrParcel>, DecodeError> {
    iterate_instructions(code).collect()
}

pub struct InstrIter<'a> {
    code: &'a [u8],
    offset: usize,
}

impl Iterator for InstrIter<'_> {
    type Item = Result<InstrParcel, DecodeError>;

    fn next(&mut self) -> Option<Self::Item> {
        let remaining = &self.code[self.offset.min(self.code.len())..];
        if remaining.is_empty() {
            return None;
        }
        let at = self.offset;
        let Some(len) = parcel_len(remaining[0]) else {
            self.offset = self.code.len();
            return Some(Err(DecodeError::UnsupportedEncoding { offset: at }));
        };
        if remaining.len() < len {
            self.offset = self.code.len();
            return Some(Err(DecodeError::TruncatedParcel {
                offset: at,
                need: len,
                have: remaining.len(),
            }));
        }
        let mut raw = [0u8; 4];
        raw[..len].copy_from_slice(&remaining[..len]);
        let parcel = InstrParcel {
            offset: self.offset,
            raw,
            len: len as u8,
        };
        self.offset += len;
        Some(Ok(parcel))
    }
}

/// Coarse instruction class, by major opcode for 32-bit parcels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum InstrClass {
    Load,
    Store,
    Branch,
    Jump,
    Alu,
    System,
    Other,
    Compressed,
}

impl std::str::FromStr for InstrClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "load" => Ok(InstrClass::Load),
            "store" => Ok(InstrClass::Store),
            "branch" => Ok(InstrClass::Branch),
            "jump" => Ok(InstrClass::Jump),
            "alu" => Ok(InstrClass::Alu),
            "system" => Ok(InstrClass::System),
            "other" => Ok(InstrClass::Other),
            "compressed" => Ok(InstrClass::Compressed),
            _ => Err(format!("unknown instruction class `{s}`")),
        }
    }
}

const OPCODE_LOAD: u32 = 0b000_0011;
const OPCODE_STORE: u32 = 0b010_0011;
const OPCODE_BRANCH: u32 = 0b110_0011;
const OPCODE_JAL: u32 = 0b110_1111;
const OPCODE_JALR: u32 = 0b110_0111;
const OPCODE_OP_IMM: u32 = 0b001_0011;
const OPCODE_OP: u32 = 0b011_0011;
const OPCODE_LUI: u32 = 0b011_0111;
const OPCODE_AUIPC: u32 = 0b001_0111;
const OPCODE_SYSTEM: u32 = 0b111_0011;

/// Classifies a parcel. Every 16-bit parcel is `Compressed`; 32-bit
/// parcels classify by major opcode, with unknown opcodes as `Other`.
pub fn classify(parcel: &InstrParcel) -> InstrClass {
    if parcel.is_compressed() {
        return InstrClass::Compressed;
    }
    classify_opcode(parcel.word() & 0x7f)
}

pub(crate) fn classify_opcode(opcode: u32) -> InstrClass {
    match opcode {
        OPCODE_LOAD => InstrClass::Load,
        OPCODE_STORE => InstrClass::Store,
        OPCODE_BRANCH => InstrClass::Branch,
        OPCODE_JAL | OPCODE_JALR => InstrClass::Jump,
        OPCODE_OP_IMM | OPCODE_OP | OPCODE_LUI | OPCODE_AUIPC => InstrClass::Alu,
        OPCODE_SYSTEM => InstrClass::System,
        _ => InstrClass::Other,
    }
}

/// Addressable instruction fields for field-level encryption.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Field {
    Opcode,
    Rd,
    Rs1,
    Rs2,
    Immediate,
}

/// A bit mask over a parcel's encoding: mask bit `b` selects encoding bit
/// `b`. The width matches the parcel (16 or 32).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FieldMask {
    pub bits: u32,
    pub width: u8,
}

const MASK_OPCODE: u32 = 0x0000_007f; // bits 0-6
const MASK_RD: u32 = 0x0000_0f80; // bits 7-11
const MASK_RS1: u32 = 0x000f_8000; // bits 15-19
const MASK_RS2: u32 = 0x01f0_0000; // bits 20-24
const MASK_IMM_I: u32 = 0xfff0_0000; // bits 20-31
const MASK_IMM_S: u32 = 0xfe00_0f80; // bits 25-31 and 7-11
const MASK_IMM_U: u32 = 0xffff_f000; // bits 12-31

enum Format {
    I,
    S,
    B,
    U,
    J,
    R,
    Unknown,
}

fn format_of(opcode: u32) -> Format {
    match opcode {
        OPCODE_LOAD | OPCODE_JALR | OPCODE_OP_IMM | OPCODE_SYSTEM => Format::I,
        OPCODE_STORE => Format::S,
        OPCODE_BRANCH => Format::B,
        OPCODE_LUI | OPCODE_AUIPC => Format::U,
        OPCODE_JAL => Format::J,
        OPCODE_OP => Format::R,
        _ => Format::Unknown,
    }
}

/// Encoding-bit mask of `field` in a 32-bit parcel, per the format implied
/// by its major opcode. 16-bit parcels have no stable field layout and are
/// rejected; formats lacking the field report [`DecodeError::FieldAbsent`].
pub fn field_bits(parcel: &InstrParcel, field: Field) -> Result<FieldMask, DecodeError> {
    if parcel.is_compressed() {
        return Err(DecodeError::UnsupportedParcel);
    }
    let format = format_of(parcel.word() & 0x7f);
    let bits = match (field, &format) {
        (Field::Opcode, _) => MASK_OPCODE,
        (Field::Rd, Format::I | Format::U | Format::J | Format::R) => MASK_RD,
        (Field::Rs1, Format::I | Format::S | Format::B | Format::R) => MASK_RS1,
        (Field::Rs2, Format::S | Format::B | Format::R) => MASK_RS2,
        (Field::Immediate, Format::I) => MASK_IMM_I,
        (Field::Immediate, Format::S | Format::B) => MASK_IMM_S,
        (Field::Immediate, Format::U | Format::J) => MASK_IMM_U,
        _ => return Err(DecodeError::FieldAbsent(field)),
    };
    Ok(FieldMask { bits, width: 32 })
}
