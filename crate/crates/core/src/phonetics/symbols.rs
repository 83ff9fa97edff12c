use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::PhoneticsError;

/// The closed ARPAbet inventory, stress-free.
pub const ARPABET: [&str; 39] = [
    "AA", "AE", "AH", "AO", "AW", "AY", "B", "CH", "D", "DH", "EH", "ER", "EY", "F", "G", "HH", "IH", "IY", "JH", "K",
    "L", "M", "N", "NG", "OW", "OY", "P", "R", "S", "SH", "T", "TH", "UH", "UW", "V", "W", "Y", "Z", "ZH",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Phoneme(u8);

impl Phoneme {
    /// Parses a symbol, dropping a trailing stress digit (`OW1` → `OW`).
    pub fn parse(symbol: &str) -> Result<Self, PhoneticsError> {
        let base = symbol.trim_end_matches(|c: char| c.is_ascii_digit());
        let upper = base.to_ascii_uppercase();
        ARPABET
            .iter()
            .position(|&s| s == upper)
            .map(|i| Phoneme(i as u8))
            .ok_or_else(|| PhoneticsError::UnknownSymbol(symbol.to_string()))
    }

    pub fn symbol(self) -> &'static str {
        ARPABET[self.0 as usize]
    }
}

impl fmt::Display for Phoneme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PhonemeSequence(Vec<Phoneme>);

impl PhonemeSequence {
    pub fn new(phonemes: Vec<Phoneme>) -> Self {
        Self(phonemes)
    }

    pub fn as_slice(&self) -> &[Phoneme] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn extend_from(&mut self, other: &PhonemeSequence) {
        self.0.extend_from_slice(&other.0);
    }
}

impl FromStr for PhonemeSequence {
    type Err = PhoneticsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.split_whitespace().map(Phoneme::parse).collect::<Result<Vec<_>, _>>().map(Self)
    }
}

impl fmt::Display for PhonemeSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, p) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            f.write_str(p.symbol())?;
        }
        Ok(())
    }
}

impl Serialize for PhonemeSequence {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PhonemeSequence {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
