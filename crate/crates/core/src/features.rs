//! Per-record numeric features: cyclical time encodings, narrative
//! embeddings and the fine-graph node layout.

use std::collections::HashMap;
use std::f64::consts::TAU;
use std::path::Path;

use crate::error::{Error, Result};
use crate::par;
use crate::records::CrashRecord;

pub const EMBEDDING_DIM: usize = 384;

/// Width of a fine-graph node vector: SAE level, four cyclical time
/// encodings, then the narrative embedding.
pub const FINE_FEATURE_DIM: usize = 5 + EMBEDDING_DIM;

/// Seed mixed into the token hash. Changing it changes every hash embedding.
pub const TOKEN_HASH_SEED: u64 = 0x5eed_c0de_2024_0001;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemporalEncoding {
    pub hour_sin: f64,
    pub hour_cos: f64,
    pub weekday_sin: f64,
    pub weekday_cos: f64,
}

impl TemporalEncoding {
    pub fn of(record: &CrashRecord) -> Self {
        let (hour_sin, hour_cos) = encode_hour(record.hour()).expect("hour in 0..24");
        let (weekday_sin, weekday_cos) = encode_weekday(record.weekday()).expect("weekday in 0..7");
        Self {
            hour_sin,
            hour_cos,
            weekday_sin,
            weekday_cos,
        }
    }
}

pub fn encode_hour(hour: u32) -> Result<(f64, f64)> {
    if hour > 23 {
        return Err(Error::Domain(format!("hour {hour} not in 0..=23")));
    }
    let angle = TAU * f64::from(hour) / 24.0;
    Ok((angle.sin(), angle.cos()))
}

pub fn encode_weekday(day: u32) -> Result<(f64, f64)> {
    if day > 6 {
        return Err(Error::Domain(format!("weekday {day} not in 0..=6")));
    }
    let angle = TAU * f64::from(day) / 7.0;
    Ok((angle.sin(), angle.cos()))
}

/// A 384-dimensional narrative vector.
#[derive(Debug, Clone, PartialEq)]
pub struct NarrativeEmbedding(Vec<f64>);

impl NarrativeEmbedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != EMBEDDING_DIM {
            return Err(Error::Embedding(format!(
                "expected {EMBEDDING_DIM} values, found {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Embedding("non-finite embedding entry".into()));
        }
        Ok(Self(values))
    }

    pub fn zeros() -> Self {
        Self(vec![0.0; EMBEDDING_DIM])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Seeded 64-bit FNV-1a.
pub fn token_hash(token: &str) -> u64 {
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = 0xcbf2_9ce4_8422_2325_u64 ^ TOKEN_HASH_SEED;
    for b in token.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(PRIME);
    }
    h
}

/// Lowercase alphanumeric tokens.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Deterministic signed feature-hash embedding, L2-normalized unless empty.
///
/// Each token lands in bin `h mod 384`; the sign comes from the lowest bit
/// of `h / 384` (+1 when clear).
pub fn embed_hash(narrative: &str) -> NarrativeEmbedding {
    let mut v = vec![0.0; EMBEDDING_DIM];
    for token in tokenize(narrative) {
        let h = token_hash(&token);
        let bin = (h % EMBEDDING_DIM as u64) as usize;
        let sign = if (h / EMBEDDING_DIM as u64) & 1 == 0 { 1.0 } else { -1.0 };
        v[bin] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    NarrativeEmbedding(v)
}

/// Where node embeddings come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingProvider {
    /// Token feature hashing, computed on the fly.
    Hash,
    /// Precomputed vectors loaded from an embedding file.
    File,
}

impl EmbeddingProvider {
    pub fn as_str(self) -> &'static str {
        match self {
            EmbeddingProvider::Hash => "hash",
            EmbeddingProvider::File => "file",
        }
    }
}

/// Record id → embedding, tagged with its provider.
#[derive(Debug, Clone)]
pub struct Embeddings {
    provider: EmbeddingProvider,
    by_id: HashMap<String, NarrativeEmbedding>,
}

impl Embeddings {
    pub fn from_map(provider: EmbeddingProvider, by_id: HashMap<String, NarrativeEmbedding>) -> Self {
        Self { provider, by_id }
    }

    /// Hash-embeds every record's narrative.
    pub fn hashed(records: &[CrashRecord]) -> Self {
        let vectors = par::map_slice(records, |r| embed_hash(&r.narrative));
        let by_id = records.iter().map(|r| r.id.clone()).zip(vectors).collect();
        Self {
            provider: EmbeddingProvider::Hash,
            by_id,
        }
    }

    pub fn provider(&self) -> EmbeddingProvider {
        self.provider
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    pub fn get(&self, id: &str) -> Result<&NarrativeEmbedding> {
        self.by_id
            .get(id)
            .ok_or_else(|| Error::Embedding(format!("no embedding for record {id:?}")))
    }
}

/// Loads an embedding file with header `id,e0,…,e383`. Vectors are used
/// verbatim, without renormalization.
pub fn load_embeddings(path: &Path) -> Result<Embeddings> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_embeddings(file).map_err(|e| match e {
        Error::Embedding(reason) | Error::Schema(reason) => Error::format(path, reason),
        other => other,
    })
}

pub fn read_embeddings<R: std::io::Read>(reader: R) -> Result<Embeddings> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let expected: Vec<String> = std::iter::once("id".to_owned())
        .chain((0..EMBEDDING_DIM).map(|i| format!("e{i}")))
        .collect();
    if headers.iter().map(str::trim).ne(expected.iter().map(String::as_str)) {
        return Err(Error::Schema("embedding header must be id,e0,...,e383".into()));
    }
    let mut by_id = HashMap::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let row_no = i + 1;
        if row.len() != EMBEDDING_DIM + 1 {
            return Err(Error::Embedding(format!(
                "row {row_no}: expected {EMBEDDING_DIM} values, found {}",
                row.len().saturating_sub(1)
            )));
        }
        let id = row[0].trim().to_owned();
        let values = row
            .iter()
            .skip(1)
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Embedding(format!("row {row_no}: {e}")))?;
        let emb = NarrativeEmbedding::new(values).map_err(|e| Error::Embedding(format!("row {row_no}: {e}")))?;
        if by_id.insert(id.clone(), emb).is_some() {
            return Err(Error::Embedding(format!("row {row_no}: duplicate id {id:?}")));
        }
    }
    Ok(Embeddings::from_map(EmbeddingProvider::File, by_id))
}

/// Writes embeddings for `ids` in the embedding-file format.
pub fn write_embeddings<W: std::io::Write>(writer: W, ids: &[&str], embeddings: &Embeddings) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_owned()];
    header.extend((0..EMBEDDING_DIM).map(|i| format!("e{i}")));
    w.write_record(&header)?;
    for id in ids {
        let emb = embeddings.get(id)?;
        let mut row = vec![(*id).to_owned()];
        row.extend(emb.values().iter().map(|v| format!("{v:?}")));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<embeddings>", e))?;
    Ok(())
}

/// Fine-graph node vector:
/// `[sae_level, hour_sin, hour_cos, weekday_sin, weekday_cos, emb[0..384]]`.
pub fn fine_node_features(record: &CrashRecord, emb: &NarrativeEmbedding) -> Result<Vec<f64>> {
    if emb.values().len() != EMBEDDING_DIM {
        return Err(Error::Shape(format!(
            "embedding for {:?} has {} values",
            record.id,
            emb.values().len()
        )));
    }
    let t = TemporalEncoding::of(record);
    let mut out = Vec::with_capacity(FINE_FEATURE_DIM);
    out.extend([
        f64::from(record.sae_level),
        t.hour_sin,
        t.hour_cos,
        t.weekday_sin,
        t.weekday_cos,
    ]);
    out.extend_from_slice(emb.values());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::records::Severity;
    use proptest::prelude::*;

    fn close(a: (f64, f64), b: (f64, f64)) -> bool {
        (a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12
    }

    #[test]
    fn hour_encoding_quarter_points() {
        assert!(close(encode_hour(0).unwrap(), (0.0, 1.0)));
        assert!(close(encode_hour(6).unwrap(), (1.0, 0.0)));
        assert!(close(encode_hour(12).unwrap(), (0.0, -1.0)));
        assert!(encode_hour(24).is_err());
    }

    #[test]
    fn weekday_encoding() {
        assert!(close(encode_weekday(0).unwrap(), (0.0, 1.0)));
        let (s3, c3) = encode_weekday(3).unwrap();
        let (s4, c4) = encode_weekday(4).unwrap();
        assert!((c3 - c4).abs() < 1e-12);
        assert!((s3 + s4).abs() < 1e-12 && s3 > 0.0);
        let angle = 12.0 * std::f64::consts::PI / 7.0;
        assert!(close(encode_weekday(6).unwrap(), (angle.sin(), angle.cos())));
        assert!(encode_weekday(7).is_err());
    }

    #[test]
    fn midnight_is_closer_to_23h_than_noon() {
        let d = |a: (f64, f64), b: (f64, f64)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
        let h0 = encode_hour(0).unwrap();
        assert!(d(encode_hour(23).unwrap(), h0) < d(encode_hour(12).unwrap(), h0));
    }

    #[test]
    fn hash_embedding_contract() {
        assert_eq!(embed_hash(""), NarrativeEmbedding::zeros());
        assert_eq!(embed_hash("  --  "), NarrativeEmbedding::zeros());
        let e = embed_hash("Unit 1 failed to control speed and struck unit 2");
        assert!((e.norm() - 1.0).abs() < 1e-9);
        assert_eq!(embed_hash("rear-end rear-end"), embed_hash("rear-end"));
        assert_eq!(embed_hash("REAR END"), embed_hash("rear end"));
    }

    #[test]
    fn hash_embedding_hand_computed() {
        // "rear-end" tokenizes to {rear, end}; both are counted once with
        // their own bins and signs, then scaled by 1/sqrt(2) (or 1/2·2 if
        // they collide, which we rule out explicitly).
        let bin_sign = |t: &str| {
            let h = token_hash(t);
            ((h % 384) as usize, if (h / 384) & 1 == 0 { 1.0 } else { -1.0 })
        };
        let (b1, s1) = bin_sign("rear");
        let (b2, s2) = bin_sign("end");
        assert_ne!(b1, b2);
        let e = embed_hash("rear-end");
        let k = 1.0 / 2f64.sqrt();
        assert_eq!(e.values()[b1], s1 * k);
        assert_eq!(e.values()[b2], s2 * k);
        assert_eq!(e.values().iter().filter(|v| **v != 0.0).count(), 2);
    }

    #[test]
    fn token_hash_is_pinned() {
        // Guards cross-platform reproducibility of the hash provider.
        assert_eq!(token_hash("struck"), token_hash("struck"));
        let pinned = token_hash("");
        assert_eq!(pinned, 0xcbf2_9ce4_8422_2325_u64 ^ TOKEN_HASH_SEED);
    }

    fn emb_file(rows: &[(&str, usize)]) -> String {
        let mut s = String::from("id");
        for i in 0..EMBEDDING_DIM {
            s.push_str(&format!(",e{i}"));
        }
        s.push('\n');
        for (id, n) in rows {
            s.push_str(id);
            for i in 0..*n {
                s.push_str(&format!(",{}", if i % 2 == 0 { "1.5e-2" } else { "-0.25" }));
            }
            s.push('\n');
        }
        s
    }

    #[test]
    fn load_embedding_file() {
        let e = read_embeddings(emb_file(&[("a", 384), ("b", 384)]).as_bytes()).unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!(e.provider(), EmbeddingProvider::File);
        assert_eq!(e.get("a").unwrap().values()[0], 0.015);
        assert!(matches!(e.get("zzz"), Err(Error::Embedding(_))));
    }

    #[test]
    fn embedding_file_errors() {
        let err = read_embeddings(emb_file(&[("a", 384), ("b", 383)]).as_bytes()).unwrap_err();
        assert!(err.to_string().contains("row 2"), "{err}");
        let err = read_embeddings(emb_file(&[("a", 384), ("a", 384)]).as_bytes()).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn embeddings_written_then_loaded_verbatim() {
        let recs = [record(0, 0, "alpha beta"), record(1, 1, "gamma")];
        let mut recs = recs.to_vec();
        recs[1].id = "r2".into();
        let hashed = Embeddings::hashed(&recs);
        let mut buf = Vec::new();
        write_embeddings(&mut buf, &["r", "r2"], &hashed).unwrap();
        let loaded = read_embeddings(buf.as_slice()).unwrap();
        assert_eq!(loaded.get("r").unwrap(), hashed.get("r").unwrap());
        assert_eq!(loaded.get("r2").unwrap(), hashed.get("r2").unwrap());
    }

    fn record(hour: i64, day_offset: i64, narrative: &str) -> CrashRecord {
        // 2024-01-01 00:00 UTC was a Monday.
        CrashRecord {
            id: "r".into(),
            latitude: 30.0,
            longitude: -97.0,
            timestamp: 1_704_067_200 + day_offset * 86_400 + hour * 3600,
            sae_level: 0,
            severity: Severity::NotInjured,
            narrative: narrative.into(),
        }
    }

    #[test]
    fn fine_layout() {
        let r = record(0, 0, "");
        let f = fine_node_features(&r, &NarrativeEmbedding::zeros()).unwrap();
        assert_eq!(f.len(), 389);
        let mut expected = vec![0.0; 389];
        expected[2] = 1.0;
        expected[4] = 1.0;
        assert_eq!(f, expected);

        let a = fine_node_features(&record(9, 3, "x"), &embed_hash("x")).unwrap();
        let b = fine_node_features(&record(9, 3, "y"), &embed_hash("y")).unwrap();
        assert_eq!(a[..5], b[..5]);
        assert_ne!(a[5..], b[5..]);
    }

    proptest! {
        #[test]
        fn encodings_lie_on_unit_circle(h in 0u32..24, d in 0u32..7) {
            let (s, c) = encode_hour(h).unwrap();
            prop_assert!((s * s + c * c - 1.0).abs() < 1e-9);
            let (s, c) = encode_weekday(d).unwrap();
            prop_assert!((s * s + c * c - 1.0).abs() < 1e-9);
        }

        #[test]
        fn hour_encoding_wraps(h in 0u32..24) {
            let direct = encode_hour(h).unwrap();
            let angle = TAU * f64::from(h + 24) / 24.0;
            prop_assert!(close(direct, (angle.sin(), angle.cos())));
        }

        #[test]
        fn hash_embeddings_are_unit_or_zero(text in "[ -~]{0,60}") {
            let n = embed_hash(&text).norm();
            prop_assert!(n == 0.0 || (n - 1.0).abs() < 1e-9);
        }
    }
}
