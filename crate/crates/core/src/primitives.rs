//! Fixed-width values shared by every module: addresses, 32-byte hashes,
//! 256-bit words and hex-encoded byte strings.
//!
//! All text encodings are lowercase hex with a `0x` prefix. Addresses are
//! exactly 40 digits and hashes exactly 64; quantities use the shortest
//! form (`0x0`, `0x1a`).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use tiny_keccak::{Hasher, Keccak};

pub use primitive_types::U256;

/// A 256-bit EVM word. All arithmetic on it wraps modulo 2^256.
pub type Word = U256;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HexError {
    #[error("missing 0x prefix in {0:?}")]
    MissingPrefix(String),
    #[error("uppercase hex digit in {0:?}")]
    Uppercase(String),
    #[error("expected {expected} hex digits, found {found}")]
    Length { expected: usize, found: usize },
    #[error("odd number of hex digits in {0:?}")]
    OddLength(String),
    #[error("invalid hex digit in {0:?}")]
    InvalidDigit(String),
    #[error("quantity {0:?} exceeds 256 bits")]
    Overflow(String),
    #[error("quantity {0:?} has a leading zero")]
    LeadingZero(String),
}

fn strip(s: &str) -> Result<&str, HexError> {
    let digits = s
        .strip_prefix("0x")
        .ok_or_else(|| HexError::MissingPrefix(s.to_string()))?;
    if digits.bytes().any(|b| b.is_ascii_uppercase()) {
        return Err(HexError::Uppercase(s.to_string()));
    }
    Ok(digits)
}

fn decode_fixed<const N: usize>(s: &str) -> Result<[u8; N], HexError> {
    let digits = strip(s)?;
    if digits.len() != N * 2 {
        return Err(HexError::Length {
            expected: N * 2,
            found: digits.len(),
        });
    }
    let mut out = [0u8; N];
    hex::decode_to_slice(digits, &mut out).map_err(|_| HexError::InvalidDigit(s.to_string()))?;
    Ok(out)
}

/// Keccak-256 of `data`.
pub fn keccak256(data: &[u8]) -> B256 {
    let mut hasher = Keccak::v256();
    hasher.update(data);
    let mut out = [0u8; 32];
    hasher.finalize(&mut out);
    B256(out)
}

/// Keccak-256 of the empty byte string, the code hash of codeless accounts.
pub fn empty_code_hash() -> B256 {
    keccak256(&[])
}

macro_rules! fixed_bytes {
    ($name:ident, $len:expr) => {
        #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
        pub struct $name(pub [u8; $len]);

        impl $name {
            pub const ZERO: Self = Self([0u8; $len]);

            pub fn as_bytes(&self) -> &[u8] {
                &self.0
            }

            pub fn is_zero(&self) -> bool {
                self.0.iter().all(|b| *b == 0)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "0x{}", hex::encode(self.0))
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                fmt::Display::fmt(self, f)
            }
        }

        impl FromStr for $name {
            type Err = HexError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                decode_fixed::<$len>(s).map(Self)
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
                serializer.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
                let s = String::deserialize(deserializer)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

fixed_bytes!(Address, 20);
fixed_bytes!(B256, 32);

impl Address {
    /// The low 160 bits of a word.
    pub fn from_word(word: Word) -> Self {
        let bytes = word_to_be(word);
        let mut out = [0u8; 20];
        out.copy_from_slice(&bytes[12..]);
        Address(out)
    }

    pub fn to_word(self) -> Word {
        Word::from_big_endian(&self.0)
    }

    /// Convenience constructor for small synthetic addresses.
    pub fn from_low_u64(v: u64) -> Self {
        Self::from_word(Word::from(v))
    }
}

impl B256 {
    pub fn from_word(word: Word) -> Self {
        B256(word_to_be(word))
    }

    pub fn to_word(self) -> Word {
        Word::from_big_endian(&self.0)
    }
}

pub fn word_to_be(word: Word) -> [u8; 32] {
    let mut out = [0u8; 32];
    word.to_big_endian(&mut out);
    out
}

/// Shortest lowercase hex form of a quantity (`0x0` for zero).
pub fn quantity_to_hex(word: Word) -> String {
    format!("{word:#x}")
}

pub fn quantity_from_hex(s: &str) -> Result<Word, HexError> {
    let digits = strip(s)?;
    if digits.is_empty() {
        return Err(HexError::Length {
            expected: 1,
            found: 0,
        });
    }
    if digits.len() > 1 && digits.starts_with('0') {
        return Err(HexError::LeadingZero(s.to_string()));
    }
    if digits.len() > 64 {
        return Err(HexError::Overflow(s.to_string()));
    }
    if !digits.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(HexError::InvalidDigit(s.to_string()));
    }
    Word::from_str_radix(digits, 16).map_err(|_| HexError::InvalidDigit(s.to_string()))
}

/// Serde adapter for 256-bit quantities in shortest hex form.
pub mod serde_quantity {
    use super::*;

    pub fn serialize<S: Serializer>(word: &Word, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&quantity_to_hex(*word))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<Word, D::Error> {
        let s = String::deserialize(deserializer)?;
        quantity_from_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// Serde adapter for storage keys and values: words as exactly 64 hex digits.
pub mod serde_opt_quantity {
    use serde::{Deserialize, Deserializer, Serializer};

    use super::{quantity_from_hex, quantity_to_hex, Word};

    pub fn serialize<S: Serializer>(v: &Option<Word>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(w) => s.serialize_str(&quantity_to_hex(*w)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Word>, D::Error> {
        let s: Option<String> = Option::deserialize(d)?;
        s.map(|s| quantity_from_hex(&s).map_err(serde::de::Error::custom)).transpose()
    }
}

pub mod serde_word {
    use super::*;

    pub fn serialize<S: Serializer>(word: &Word, serializer: S) -> Result<S::Ok, S::Error> {
        B256::from_word(*word).serialize(serializer)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<Word, D::Error> {
        B256::deserialize(deserializer).map(B256::to_word)
    }
}

/// An arbitrary byte string, hex-encoded as `0x` followed by an even number of digits.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Bytes(pub Vec<u8>);

impl Bytes {
    pub fn new() -> Self {
        Bytes(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }
}

impl std::ops::Deref for Bytes {
    type Target = [u8];

    fn deref(&self) -> &[u8] {
        &self.0
    }
}

impl From<Vec<u8>> for Bytes {
    fn from(v: Vec<u8>) -> Self {
        Bytes(v)
    }
}

impl From<&[u8]> for Bytes {
    fn from(v: &[u8]) -> Self {
        Bytes(v.to_vec())
    }
}

impl fmt::Display for Bytes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0x{}", hex::encode(&self.0))
    }
}

impl fmt::Debug for Bytes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for Bytes {
    type Err = HexError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let digits = strip(s)?;
        if digits.len() % 2 != 0 {
            return Err(HexError::OddLength(s.to_string()));
        }
        hex::decode(digits)
            .map(Bytes)
            .map_err(|_| HexError::InvalidDigit(s.to_string()))
    }
}

impl Serialize for Bytes {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Bytes {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
