//! Crash record ingest: parsing, validation, severity binarization and
//! class balancing.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, Datelike, NaiveDate, NaiveTime, Timelike};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

/// Column header of the record file, in order.
pub const HEADER: [&str; 8] = [
    "id",
    "latitude",
    "longitude",
    "crash_date",
    "crash_time",
    "sae_level",
    "severity",
    "narrative",
];

/// Binary injury outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Severity {
    NotInjured = 0,
    Injury = 1,
}

impl Severity {
    pub fn label(self) -> u8 {
        self as u8
    }

    pub fn from_label(label: u8) -> Result<Self> {
        match label {
            0 => Ok(Severity::NotInjured),
            1 => Ok(Severity::Injury),
            other => Err(Error::Domain(format!("severity label {other} not in {{0,1}}"))),
        }
    }

    fn as_field(self) -> &'static str {
        match self {
            Severity::NotInjured => "Not Injured",
            Severity::Injury => "Injury",
        }
    }
}

/// The five raw severity categories found in crash exports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeverityScale {
    Killed,
    IncapacitatingInjury,
    NonIncapacitatingInjury,
    PossibleInjury,
    NotInjured,
}

impl SeverityScale {
    pub fn parse(raw: &str) -> Result<Self> {
        match raw.trim().to_lowercase().as_str() {
            "killed" => Ok(SeverityScale::Killed),
            "incapacitating injury" => Ok(SeverityScale::IncapacitatingInjury),
            "non-incapacitating injury" => Ok(SeverityScale::NonIncapacitatingInjury),
            "possible injury" => Ok(SeverityScale::PossibleInjury),
            "not injured" => Ok(SeverityScale::NotInjured),
            _ => Err(Error::Severity(raw.to_owned())),
        }
    }

    pub fn binarize(self) -> Severity {
        match self {
            SeverityScale::NotInjured => Severity::NotInjured,
            _ => Severity::Injury,
        }
    }
}

/// Maps one of the five canonical severity strings onto {0, 1}.
pub fn binarize_severity(raw: &str) -> Result<u8> {
    Ok(SeverityScale::parse(raw)?.binarize().label())
}

/// Parses the record file's severity column. Besides the five canonical
/// strings it accepts the already-binarized forms `Injury`, `0` and `1`,
/// which is what [`write_records`] emits.
fn parse_severity_field(raw: &str) -> Result<Severity> {
    match raw.trim().to_lowercase().as_str() {
        "injury" | "1" => Ok(Severity::Injury),
        "0" => Ok(Severity::NotInjured),
        _ => Ok(SeverityScale::parse(raw)?.binarize()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrashRecord {
    pub id: String,
    pub latitude: f64,
    pub longitude: f64,
    /// Seconds since the Unix epoch, UTC.
    pub timestamp: i64,
    pub sae_level: u8,
    pub severity: Severity,
    pub narrative: String,
}

impl CrashRecord {
    pub fn validate(&self) -> Result<()> {
        if self.id.trim().is_empty() {
            return Err(Error::Domain("empty record id".into()));
        }
        if !(-90.0..=90.0).contains(&self.latitude) || !self.latitude.is_finite() {
            return Err(Error::Domain(format!("latitude {} out of range", self.latitude)));
        }
        if !(-180.0..=180.0).contains(&self.longitude) || !self.longitude.is_finite() {
            return Err(Error::Domain(format!("longitude {} out of range", self.longitude)));
        }
        if self.sae_level > 5 {
            return Err(Error::Domain(format!("sae level {} not in 0..=5", self.sae_level)));
        }
        if DateTime::from_timestamp(self.timestamp, 0).is_none() {
            return Err(Error::Domain(format!("timestamp {} invalid", self.timestamp)));
        }
        Ok(())
    }

    fn datetime(&self) -> DateTime<chrono::Utc> {
        DateTime::from_timestamp(self.timestamp, 0).expect("validated timestamp")
    }

    /// Hour of day, 0-23, UTC.
    pub fn hour(&self) -> u32 {
        self.datetime().hour()
    }

    /// Day of week, 0 = Monday through 6 = Sunday.
    pub fn weekday(&self) -> u32 {
        self.datetime().weekday().num_days_from_monday()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RowError {
    /// 1-based data row number (the header is row 0).
    pub row: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ParseReport {
    pub records: Vec<CrashRecord>,
    pub rejected: Vec<RowError>,
}

/// Reads a record file. Rows failing validation are skipped and reported;
/// only a wrong header is fatal.
pub fn parse_records(path: &Path) -> Result<ParseReport> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_records(file)
}

pub fn read_records<R: Read>(reader: R) -> Result<ParseReport> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let found: Vec<&str> = headers.iter().map(str::trim).collect();
    if found != HEADER {
        return Err(Error::Schema(format!(
            "expected header `{}`, found `{}`",
            HEADER.join(","),
            found.join(",")
        )));
    }

    let mut report = ParseReport::default();
    let mut seen = HashSet::new();
    for (i, row) in rdr.records().enumerate() {
        let row_no = i + 1;
        let parsed = row.map_err(Error::from).and_then(|r| parse_row(&r));
        match parsed {
            Ok(rec) if !seen.insert(rec.id.clone()) => report.rejected.push(RowError {
                row: row_no,
                reason: format!("duplicate id {:?}", rec.id),
            }),
            Ok(rec) => report.records.push(rec),
            Err(e) => report.rejected.push(RowError {
                row: row_no,
                reason: e.to_string(),
            }),
        }
    }
    Ok(report)
}

fn parse_row(row: &csv::StringRecord) -> Result<CrashRecord> {
    if row.len() != HEADER.len() {
        return Err(Error::Schema(format!(
            "expected {} fields, found {}",
            HEADER.len(),
            row.len()
        )));
    }
    let field = |i: usize| row.get(i).unwrap_or("").trim();
    let num = |i: usize| -> Result<f64> {
        field(i)
            .parse::<f64>()
            .map_err(|_| Error::Domain(format!("{} {:?} is not a number", HEADER[i], field(i))))
    };

    let date = NaiveDate::parse_from_str(field(3), "%Y-%m-%d")
        .map_err(|_| Error::Domain(format!("crash_date {:?} is not YYYY-MM-DD", field(3))))?;
    let time = NaiveTime::parse_from_str(field(4), "%H:%M")
        .map_err(|_| Error::Domain(format!("crash_time {:?} is not HH:MM", field(4))))?;
    let sae_level = field(5)
        .parse::<u8>()
        .map_err(|_| Error::Domain(format!("sae_level {:?} is not an integer", field(5))))?;

    let rec = CrashRecord {
        id: field(0).to_owned(),
        latitude: num(1)?,
        longitude: num(2)?,
        timestamp: date.and_time(time).and_utc().timestamp(),
        sae_level,
        severity: parse_severity_field(field(6))?,
        narrative: row.get(7).unwrap_or("").to_owned(),
    };
    rec.validate()?;
    Ok(rec)
}

/// Writes records in the ingest format. Coordinates use 17 significant
/// digits so a re-parse reproduces them exactly.
pub fn write_records<W: Write>(writer: W, records: &[CrashRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(HEADER)?;
    for r in records {
        let dt = r.datetime();
        w.write_record([
            r.id.as_str(),
            &format!("{:?}", r.latitude),
            &format!("{:?}", r.longitude),
            &dt.format("%Y-%m-%d").to_string(),
            &dt.format("%H:%M").to_string(),
            &r.sae_level.to_string(),
            r.severity.as_field(),
            r.narrative.as_str(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<records>", e))?;
    Ok(())
}

pub fn save_records(path: &Path, records: &[CrashRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_records(std::io::BufWriter::new(file), records)
}

/// Undersamples the majority class to the minority count. Retained records
/// keep their original relative order.
pub fn balance_undersample(records: &[CrashRecord], seed: u64) -> Result<Vec<CrashRecord>> {
    let (pos, neg): (Vec<usize>, Vec<usize>) =
        (0..records.len()).partition(|&i| records[i].severity == Severity::Injury);
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Balance(format!(
            "need both classes, found {} injury and {} not-injured records",
            pos.len(),
            neg.len()
        )));
    }
    let (majority, minority) = if pos.len() >= neg.len() { (pos, neg) } else { (neg, pos) };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, majority.len(), minority.len());
    let mut keep = vec![false; records.len()];
    for i in &minority {
        keep[*i] = true;
    }
    for p in picked.iter() {
        keep[majority[p]] = true;
    }
    Ok(records
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(r, _)| r.clone())
        .collect())
}
