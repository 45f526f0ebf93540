//! Shared pieces of the on-disk formats: canonical float text, content
//! checksums and seed derivation.

use serde::ser::SerializeSeq;
use serde::{Deserialize, Deserializer, Serializer};
use serde_json::value::RawValue;
use sha2::{Digest, Sha256};

/// Formats a finite float with 17 significant digits, which round-trips
/// every `f64` exactly. Negative zero is written as `0`.
pub fn format_f64(x: f64) -> String {
    if x == 0.0 {
        return "0.0000000000000000e0".to_owned();
    }
    format!("{x:.16e}")
}

/// `serialize_with` helper emitting a float slice as JSON numbers in
/// [`format_f64`] form.
pub fn serialize_f64s<S: Serializer>(values: &[f64], s: S) -> Result<S::Ok, S::Error> {
    let mut seq = s.serialize_seq(Some(values.len()))?;
    for &v in values {
        if !v.is_finite() {
            return Err(serde::ser::Error::custom("non-finite float"));
        }
        let raw = RawValue::from_string(format_f64(v)).map_err(serde::ser::Error::custom)?;
        seq.serialize_element(&raw)?;
    }
    seq.end()
}

pub fn deserialize_f64s<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
    Vec::<f64>::deserialize(d)
}

pub fn serialize_f64<S: Serializer>(value: &f64, s: S) -> Result<S::Ok, S::Error> {
    if !value.is_finite() {
        return Err(serde::ser::Error::custom("non-finite float"));
    }
    let raw = RawValue::from_string(format_f64(*value)).map_err(serde::ser::Error::custom)?;
    s.serialize_some(&raw)
}

/// Incremental SHA-256 over typed content.
#[derive(Default)]
pub struct Checksum(Sha256);

impl Checksum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.0.update((b.len() as u64).to_le_bytes());
        self.0.update(b);
        self
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.bytes(s.as_bytes())
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.0.update(v.to_le_bytes());
        self
    }

    pub fn f64s(&mut self, values: &[f64]) -> &mut Self {
        self.u64(values.len() as u64);
        for v in values {
            // +0 and -0 hash alike, matching how they are written.
            let v = if *v == 0.0 { 0.0f64 } else { *v };
            self.0.update(v.to_bits().to_le_bytes());
        }
        self
    }

    pub fn finish(self) -> String {
        hex::encode(self.0.finalize())
    }
}

/// Derives an independent 64-bit seed from a master seed and a label.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut first = [0u8; 8];
    first.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(first)
}
