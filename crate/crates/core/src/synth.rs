//! Seeded synthetic crash records with planted spatial, temporal and
//! narrative signal.
//!
//! A share of the crashes is drawn around Gaussian hotspots whose injury
//! odds are high; the rest fall uniformly over the region with low odds.
//! Rush hours scale the injury odds, and narratives are drawn from
//! class-specific templates with probability `narrative_signal`.

use std::io::Write;
use std::path::Path;

use chrono::{Duration, TimeZone, Utc};
use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::records::{CrashRecord, Severity};

const KM_PER_DEG_LAT: f64 = 111.32;

const INJURY_TEMPLATES: [&str; 6] = [
    "unit 1 failed to control speed and struck unit 2 in the rear",
    "unit 2 disregarded red light and struck unit 1 broadside driver complained of pain",
    "vehicle struck pedestrian in crosswalk pedestrian transported to hospital",
    "unit 1 lost control on wet pavement and struck utility pole occupant injured",
    "unit 2 turned left across path and struck motorcyclist who was thrown from the bike",
    "high speed rear end collision airbags deployed passenger transported by ems",
];

const NO_INJURY_TEMPLATES: [&str; 6] = [
    "unit 1 backing in parking lot made minor contact with parked unit 2",
    "low speed contact while stopped in queue no complaint of injury",
    "automated vehicle stopped at signal other vehicle scraped mirror while passing",
    "minor sideswipe during lane change both vehicles driven from scene",
    "unit 2 rolled forward at stop sign tapping bumper of unit 1 no damage reported",
    "vehicle clipped curb while parking cosmetic damage only",
];

const STREETS: [&str; 10] = [
    "lamar blvd",
    "congress ave",
    "riverside dr",
    "burnet rd",
    "cesar chavez st",
    "guadalupe st",
    "airport blvd",
    "william cannon dr",
    "parmer ln",
    "slaughter ln",
];

/// Relative frequency of SAE levels 0 through 5.
const SAE_WEIGHTS: [f64; 6] = [0.10, 0.20, 0.40, 0.15, 0.10, 0.05];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub n_records: usize,
    /// `[lat_min, lat_max, lon_min, lon_max]`, degrees.
    pub bbox: [f64; 4],
    pub n_hotspots: usize,
    pub hotspot_radius_km: f64,
    /// Probability that a record comes from a hotspot.
    pub hotspot_share: f64,
    pub p_injury_in_hotspot: f64,
    pub p_injury_background: f64,
    pub rush_hours: Vec<u32>,
    /// Odds multiplier for injuries during rush hours.
    pub rush_odds: f64,
    /// Relative weight of a rush hour when drawing crash times.
    pub rush_hour_weight: f64,
    /// Probability that a narrative comes from its own class's templates
    /// (otherwise from either class at random).
    pub narrative_signal: f64,
    /// Keep exactly half of the records in each class.
    pub balanced: bool,
    pub year: i32,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            n_records: 2352,
            bbox: [29.0, 32.0, -99.2, -96.2],
            n_hotspots: 14,
            hotspot_radius_km: 3.0,
            hotspot_share: 0.5,
            p_injury_in_hotspot: 0.9,
            p_injury_background: 0.1,
            rush_hours: vec![7, 8, 16, 17, 18],
            rush_odds: 1.5,
            rush_hour_weight: 2.0,
            narrative_signal: 0.3,
            balanced: true,
            year: 2023,
            seed: 42,
        }
    }
}

impl SynthParams {
    /// No planted signal: every record is an injury with probability 0.5.
    pub fn null(seed: u64) -> Self {
        Self {
            p_injury_in_hotspot: 0.5,
            p_injury_background: 0.5,
            rush_hours: Vec::new(),
            narrative_signal: 0.0,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {p} is not a probability")))
            }
        };
        prob("p_injury_in_hotspot", self.p_injury_in_hotspot)?;
        prob("p_injury_background", self.p_injury_background)?;
        prob("hotspot_share", self.hotspot_share)?;
        prob("narrative_signal", self.narrative_signal)?;
        let [lat0, lat1, lon0, lon1] = self.bbox;
        if !(lat0 < lat1 && lon0 < lon1 && lat0 >= -85.0 && lat1 <= 85.0 && lon0 >= -180.0 && lon1 <= 180.0) {
            return Err(Error::Config(format!("degenerate bounding box {:?}", self.bbox)));
        }
        if self.n_records == 0 {
            return Err(Error::Config("n_records must be positive".into()));
        }
        if self.hotspot_share > 0.0 && self.n_hotspots == 0 {
            return Err(Error::Config("hotspot_share > 0 needs at least one hotspot".into()));
        }
        if !(self.hotspot_radius_km > 0.0) || !(self.rush_odds > 0.0) || !(self.rush_hour_weight > 0.0) {
            return Err(Error::Config(
                "hotspot_radius_km, rush_odds and rush_hour_weight must be positive".into(),
            ));
        }
        if let Some(h) = self.rush_hours.iter().find(|&&h| h > 23) {
            return Err(Error::Config(format!("rush hour {h} not in 0..=23")));
        }
        if self.balanced {
            if self.n_records % 2 != 0 {
                return Err(Error::Config("balanced output needs an even n_records".into()));
            }
            let (lo, hi) = (
                self.p_injury_in_hotspot.min(self.p_injury_background),
                self.p_injury_in_hotspot.max(self.p_injury_background),
            );
            if hi == 0.0 || lo == 1.0 {
                return Err(Error::Config(
                    "balanced output needs both classes to be possible".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Where a record was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Component {
    Hotspot(usize),
    Background,
}

impl std::fmt::Display for Component {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Component::Hotspot(k) => write!(f, "hotspot{k}"),
            Component::Background => f.write_str("background"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruthRow {
    pub id: String,
    pub component: Component,
    /// Injury probability the label was drawn with.
    pub injury_odds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub records: Vec<CrashRecord>,
    pub truth: Vec<TruthRow>,
}

fn with_odds_multiplier(p: f64, m: f64) -> f64 {
    if p >= 1.0 {
        return 1.0;
    }
    let odds = p / (1.0 - p) * m;
    odds / (1.0 + odds)
}

pub fn generate(params: &SynthParams) -> Result<SynthOutput> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let [lat0, lat1, lon0, lon1] = params.bbox;
    let lat_c = (lat0 + lat1) / 2.0;
    let km_per_deg_lon = KM_PER_DEG_LAT * lat_c.to_radians().cos();

    // Keep hotspot centers one radius inside the box.
    let inset_lat = (params.hotspot_radius_km / KM_PER_DEG_LAT).min((lat1 - lat0) / 4.0);
    let inset_lon = (params.hotspot_radius_km / km_per_deg_lon).min((lon1 - lon0) / 4.0);
    let hotspots: Vec<(f64, f64)> = (0..params.n_hotspots)
        .map(|_| {
            (
                rng.random_range(lat0 + inset_lat..lat1 - inset_lat),
                rng.random_range(lon0 + inset_lon..lon1 - inset_lon),
            )
        })
        .collect();
    let offset = Normal::new(0.0, params.hotspot_radius_km).expect("positive radius");

    let hour_weights: Vec<f64> = (0..24)
        .map(|h| {
            if params.rush_hours.contains(&h) {
                params.rush_hour_weight
            } else {
                1.0
            }
        })
        .collect();
    let hour_dist = WeightedIndex::new(&hour_weights).expect("positive weights");
    let sae_dist = WeightedIndex::new(SAE_WEIGHTS).expect("positive weights");
    let start = Utc
        .with_ymd_and_hms(params.year, 1, 1, 0, 0, 0)
        .single()
        .ok_or_else(|| Error::Config(format!("year {} out of range", params.year)))?;
    let days = if chrono::NaiveDate::from_ymd_opt(params.year, 2, 29).is_some() {
        366
    } else {
        365
    };

    let quota = params.n_records / 2;
    let mut counts = [0usize; 2];
    let mut records = Vec::with_capacity(params.n_records);
    let mut truth = Vec::with_capacity(params.n_records);
    while records.len() < params.n_records {
        let component = if rng.random_bool(params.hotspot_share) {
            Component::Hotspot(rng.random_range(0..params.n_hotspots))
        } else {
            Component::Background
        };
        let (latitude, longitude, base) = match component {
            Component::Hotspot(k) => {
                let (la, lo) = hotspots[k];
                let dn: f64 = offset.sample(&mut rng);
                let de: f64 = offset.sample(&mut rng);
                (
                    (la + dn / KM_PER_DEG_LAT).clamp(-89.0, 89.0),
                    (lo + de / km_per_deg_lon).clamp(-179.0, 179.0),
                    params.p_injury_in_hotspot,
                )
            }
            Component::Background => (
                rng.random_range(lat0..lat1),
                rng.random_range(lon0..lon1),
                params.p_injury_background,
            ),
        };
        let hour = hour_dist.sample(&mut rng) as i64;
        let day = rng.random_range(0..days);
        let minute = rng.random_range(0..60);
        let timestamp = (start + Duration::days(day) + Duration::hours(hour) + Duration::minutes(minute)).timestamp();
        let odds = if params.rush_hours.contains(&(hour as u32)) {
            with_odds_multiplier(base, params.rush_odds)
        } else {
            base
        };
        let injury = rng.random_bool(odds);
        let sae_level = sae_dist.sample(&mut rng) as u8;
        let own = if injury {
            &INJURY_TEMPLATES
        } else {
            &NO_INJURY_TEMPLATES
        };
        let template = if rng.random_bool(params.narrative_signal) {
            own[rng.random_range(0..own.len())]
        } else {
            let pool = if rng.random_bool(0.5) {
                &INJURY_TEMPLATES
            } else {
                &NO_INJURY_TEMPLATES
            };
            pool[rng.random_range(0..pool.len())]
        };
        let street = STREETS[rng.random_range(0..STREETS.len())];
        let class = usize::from(injury);
        if params.balanced && counts[class] == quota {
            continue;
        }
        counts[class] += 1;
        let id = format!("SYN-{:05}", records.len() + 1);
        truth.push(TruthRow {
            id: id.clone(),
            component,
            injury_odds: odds,
        });
        records.push(CrashRecord {
            id,
            latitude,
            longitude,
            timestamp,
            sae_level,
            severity: if injury { Severity::Injury } else { Severity::NotInjured },
            narrative: format!("{template} on {street}"),
        });
    }
    Ok(SynthOutput { records, truth })
}

/// `id,component,injury_odds` rows.
pub fn write_truth<W: Write>(writer: W, truth: &[TruthRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["id", "component", "injury_odds"])?;
    for t in truth {
        w.write_record([t.id.clone(), t.component.to_string(), format!("{:?}", t.injury_odds)])?;
    }
    w.flush().map_err(|e| Error::io("<truth>", e))
}

pub fn save_truth(path: &Path, truth: &[TruthRow]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_truth(&mut w, truth)?;
    w.flush().map_err(|e| Error::io(path, e))
}
