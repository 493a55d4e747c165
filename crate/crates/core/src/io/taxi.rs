//! Taxi-trip trace ingestion and a synthetic trace generator.
//!
//! Input columns: `vehicle_id,start_timestamp,pickup_area,dropoff_area,trip_miles`
//! with ISO-8601 timestamps and integer community-area codes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use chrono::{DateTime, Datelike, Duration, NaiveDate, NaiveDateTime};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::synthetic::{draw_buyers, BuyerSpec, Range};
use crate::error::{Error, Result};
use crate::market::{EconomicParams, RiskBounds, Scenario, SellerId, SellerProfile, StructuralLimits, TruncatedGaussianSpec};
use crate::rng::{hash_unit, stream, Purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripRecord {
    pub vehicle_id: String,
    pub start_timestamp: NaiveDateTime,
    pub pickup_area: u32,
    pub dropoff_area: u32,
    pub trip_miles: f64,
}

/// Inclusive range of calendar days, written `A..B`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateWindow {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateWindow {
    pub fn days(&self) -> i64 {
        (self.end - self.start).num_days() + 1
    }

    pub fn contains(&self, d: NaiveDate) -> bool {
        self.start <= d && d <= self.end
    }

    /// The calendar month containing `d`.
    pub fn month_of(d: NaiveDate) -> Self {
        let start = d.with_day(1).expect("day 1 exists");
        let next = if d.month() == 12 {
            NaiveDate::from_ymd_opt(d.year() + 1, 1, 1)
        } else {
            NaiveDate::from_ymd_opt(d.year(), d.month() + 1, 1)
        }
        .expect("valid month start");
        DateWindow {
            start,
            end: next.pred_opt().expect("previous day exists"),
        }
    }
}

impl fmt::Display for DateWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.start, self.end)
    }
}

impl FromStr for DateWindow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parameter(format!("invalid window {s:?}, expected YYYY-MM-DD..YYYY-MM-DD"));
        let (a, b) = s.split_once("..").ok_or_else(bad)?;
        let start = NaiveDate::parse_from_str(a.trim(), "%Y-%m-%d").map_err(|_| bad())?;
        let end = NaiveDate::parse_from_str(b.trim(), "%Y-%m-%d").map_err(|_| bad())?;
        if end < start {
            return Err(Error::Parameter(format!("window {s:?} is empty")));
        }
        Ok(DateWindow { start, end })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    /// Vehicles with the most active days at the PoI, ties by vehicle id.
    MostActive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestionConfig {
    pub poi_area: u32,
    /// Defaults to the calendar month of the first in-PoI trip.
    pub window: Option<DateWindow>,
    pub cost_range: Range,
    pub q_plus: Range,
    pub sellers: u32,
    pub selection: Selection,
    pub seed: u64,
}

impl Default for IngestionConfig {
    fn default() -> Self {
        IngestionConfig {
            poi_area: 77,
            window: None,
            cost_range: Range::new(1.0, 1.5),
            q_plus: Range::new(4.0, 5.0),
            sellers: 20,
            selection: Selection::MostActive,
            seed: 0,
        }
    }
}

impl IngestionConfig {
    pub fn validate(&self) -> Result<()> {
        let mut off = Vec::new();
        if self.cost_range.lo >= self.cost_range.hi {
            off.push("cost_range: c_lo must be < c_hi".to_string());
        }
        self.q_plus.check("q_plus", &mut off);
        if self.sellers == 0 {
            off.push("sellers must be >= 1".to_string());
        }
        if self.poi_area == 0 {
            off.push("poi_area must be positive".to_string());
        }
        if off.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(off))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleSummary {
    pub vehicle_id: String,
    pub seller_id: SellerId,
    pub active_days: u32,
    pub attendance_prob: f64,
    pub mean_trip_miles: f64,
    /// Cost before the per-buyer jitter.
    pub cost_anchor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows: u64,
    pub malformed: u64,
    pub window: DateWindow,
    pub vehicles_seen: u64,
    pub kept: Vec<VehicleSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub scenario: Scenario,
    pub report: IngestReport,
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.naive_local());
    }
    ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

#[derive(Deserialize)]
struct RawTrip {
    vehicle_id: String,
    start_timestamp: String,
    pickup_area: String,
    dropoff_area: String,
    trip_miles: String,
}

fn parse_row(raw: RawTrip) -> std::result::Result<TripRecord, String> {
    let start_timestamp = parse_timestamp(&raw.start_timestamp).ok_or("bad timestamp")?;
    let area = |s: &str| s.trim().parse::<u32>().ok().filter(|&a| a > 0);
    let pickup_area = area(&raw.pickup_area).ok_or("bad pickup_area")?;
    let dropoff_area = area(&raw.dropoff_area).ok_or("bad dropoff_area")?;
    let trip_miles: f64 = raw.trip_miles.trim().parse().map_err(|_| "bad trip_miles")?;
    if !(trip_miles >= 0.0 && trip_miles.is_finite()) {
        return Err("negative trip_miles".into());
    }
    if raw.vehicle_id.trim().is_empty() {
        return Err("empty vehicle_id".into());
    }
    Ok(TripRecord {
        vehicle_id: raw.vehicle_id.trim().to_string(),
        start_timestamp,
        pickup_area,
        dropoff_area,
        trip_miles,
    })
}

/// Streams trip rows; malformed rows come back as `Err` with a reason.
pub fn read_trips<R: Read>(reader: R) -> impl Iterator<Item = std::result::Result<TripRecord, String>> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader)
        .into_deserialize::<RawTrip>()
        .map(|row| row.map_err(|e| e.to_string()).and_then(parse_row))
}

pub fn write_trips<W: Write>(writer: W, trips: &[TripRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::Ingestion(e.to_string());
    w.write_record(["vehicle_id", "start_timestamp", "pickup_area", "dropoff_area", "trip_miles"])
        .map_err(io)?;
    for t in trips {
        w.write_record([
            t.vehicle_id.clone(),
            t.start_timestamp.format("%Y-%m-%dT%H:%M:%S").to_string(),
            t.pickup_area.to_string(),
            t.dropoff_area.to_string(),
            format!("{:.2}", t.trip_miles),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::Ingestion(e.to_string()))
}

#[derive(Default)]
struct VehicleAcc {
    poi_days: BTreeSet<NaiveDate>,
    /// Miles per day so a default window can be applied after the pass.
    miles: BTreeMap<NaiveDate, (f64, u32)>,
}

pub fn ingest_taxi_trace<I>(records: I, cfg: &IngestionConfig, buyers: &BuyerSpec) -> Result<Ingested>
where
    I: IntoIterator<Item = std::result::Result<TripRecord, String>>,
{
    cfg.validate()?;
    let mut rows = 0u64;
    let mut malformed = 0u64;
    let mut first_poi_day: Option<NaiveDate> = None;
    let mut acc: BTreeMap<String, VehicleAcc> = BTreeMap::new();
    for rec in records {
        rows += 1;
        let Ok(t) = rec else {
            malformed += 1;
            continue;
        };
        let day = t.start_timestamp.date();
        if cfg.window.is_some_and(|w| !w.contains(day)) {
            continue;
        }
        let v = acc.entry(t.vehicle_id).or_default();
        let m = v.miles.entry(day).or_insert((0.0, 0));
        m.0 += t.trip_miles;
        m.1 += 1;
        if t.pickup_area == cfg.poi_area || t.dropoff_area == cfg.poi_area {
            v.poi_days.insert(day);
            first_poi_day = Some(first_poi_day.map_or(day, |d: NaiveDate| d.min(day)));
        }
    }
    let window = match (cfg.window, first_poi_day) {
        (Some(w), _) => w,
        (None, Some(d)) => DateWindow::month_of(d),
        (None, None) => {
            return Err(Error::Ingestion(format!(
                "no trips touch community area {} (filter: poi_area)",
                cfg.poi_area
            )))
        }
    };
    let days = window.days() as f64;
    let mut candidates: Vec<(String, u32, f64)> = acc
        .iter()
        .filter_map(|(id, v)| {
            let active = v.poi_days.iter().filter(|d| window.contains(**d)).count() as u32;
            let (miles, trips) = v
                .miles
                .range(window.start..=window.end)
                .fold((0.0, 0u32), |(m, n), (_, (dm, dn))| (m + dm, n + dn));
            (active > 0).then(|| (id.clone(), active, miles / trips.max(1) as f64))
        })
        .collect();
    if candidates.is_empty() {
        return Err(Error::Ingestion(format!(
            "no vehicle touches community area {} within {window} (filter: poi_area/window)",
            cfg.poi_area
        )));
    }
    candidates.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    candidates.truncate(cfg.sellers as usize);

    // rank by mean miles (ascending, ties by vehicle id) onto the cost range
    let mut by_miles: Vec<usize> = (0..candidates.len()).collect();
    by_miles.sort_by(|&a, &b| candidates[a].2.total_cmp(&candidates[b].2).then_with(|| candidates[a].0.cmp(&candidates[b].0)));
    let mut rank = vec![0usize; candidates.len()];
    for (r, &i) in by_miles.iter().enumerate() {
        rank[i] = r;
    }
    let span = cfg.cost_range.hi - cfg.cost_range.lo;
    let denom = (candidates.len().max(2) - 1) as f64;

    let mut rng = stream(cfg.seed, Purpose::Ingest, 0);
    let buyer_profiles = draw_buyers(buyers, &mut rng);
    let mut sellers = Vec::new();
    let mut kept = Vec::new();
    for (i, (vid, active, mean_miles)) in candidates.iter().enumerate() {
        let id = SellerId(i as u32 + 1);
        let anchor = cfg.cost_range.lo + span * rank[i] as f64 / denom;
        let mut q_plus = BTreeMap::new();
        let mut base_cost = BTreeMap::new();
        for b in &buyer_profiles {
            q_plus.insert(b.id, cfg.q_plus.draw(&mut rng));
            let u = hash_unit(cfg.seed, &[vid.as_bytes(), &b.id.0.to_le_bytes()]);
            let c = (anchor + (u - 0.5) * 0.1 * span).clamp(cfg.cost_range.lo, cfg.cost_range.hi);
            base_cost.insert(b.id, c);
        }
        let attendance_prob = *active as f64 / days;
        sellers.push(SellerProfile {
            id,
            attendance_prob,
            workload: TruncatedGaussianSpec::default(),
            q_plus,
            base_cost,
            capacity: 1,
        });
        kept.push(VehicleSummary {
            vehicle_id: vid.clone(),
            seller_id: id,
            active_days: *active,
            attendance_prob,
            mean_trip_miles: *mean_miles,
            cost_anchor: anchor,
        });
    }
    let scenario = Scenario {
        sellers,
        buyers: buyer_profiles,
        econ: EconomicParams::default(),
        risk_bounds: RiskBounds::default(),
        limits: StructuralLimits::default(),
    };
    scenario.validate()?;
    Ok(Ingested {
        scenario,
        report: IngestReport {
            rows,
            malformed,
            window,
            vehicles_seen: acc.len() as u64,
            kept,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSpec {
    pub vehicles: u32,
    pub start: NaiveDate,
    pub days: u32,
    pub poi_area: u32,
    pub seed: u64,
}

impl Default for TraceSpec {
    fn default() -> Self {
        TraceSpec {
            vehicles: 100,
            start: NaiveDate::from_ymd_opt(2024, 1, 1).expect("valid date"),
            days: 31,
            poi_area: 77,
            seed: 0,
        }
    }
}

fn off_poi(rng: &mut crate::rng::RandomStream, poi: u32) -> u32 {
    loop {
        let a = rng.random_range(1..=77u32);
        if a != poi {
            return a;
        }
    }
}

/// Random trips in the input schema, for tests and demos.
pub fn generate_trace(spec: &TraceSpec) -> Vec<TripRecord> {
    let mut out = Vec::new();
    for v in 0..spec.vehicles {
        let mut rng = stream(spec.seed, Purpose::Trace, v as u64);
        let activity: f64 = rng.random_range(0.05..0.95);
        let base_miles: f64 = rng.random_range(1.0..15.0);
        let vehicle_id = format!("taxi-{v:04}");
        for d in 0..spec.days {
            let day = spec.start + Duration::days(d as i64);
            let trips = rng.random_range(0..=4u32);
            let at_poi = rng.random_bool(activity);
            for k in 0..trips {
                let secs = rng.random_range(0..86_400);
                let other = off_poi(&mut rng, spec.poi_area);
                let (pickup_area, dropoff_area) = if at_poi && k == 0 {
                    if rng.random_bool(0.5) {
                        (spec.poi_area, other)
                    } else {
                        (other, spec.poi_area)
                    }
                } else {
                    (other, off_poi(&mut rng, spec.poi_area))
                };
                out.push(TripRecord {
                    vehicle_id: vehicle_id.clone(),
                    start_timestamp: day.and_hms_opt(0, 0, 0).expect("midnight") + Duration::seconds(secs),
                    pickup_area,
                    dropoff_area,
                    trip_miles: (base_miles * rng.random_range(0.5..1.5) * 100.0).round() / 100.0,
                });
            }
        }
    }
    out.sort_by(|a, b| a.start_timestamp.cmp(&b.start_timestamp).then_with(|| a.vehicle_id.cmp(&b.vehicle_id)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trip(v: &str, day: u32, pickup: u32, dropoff: u32, miles: f64) -> std::result::Result<TripRecord, String> {
        Ok(TripRecord {
            vehicle_id: v.to_string(),
            start_timestamp: NaiveDate::from_ymd_opt(2024, 4, day).unwrap().and_hms_opt(9, 0, 0).unwrap(),
            pickup_area: pickup,
            dropoff_area: dropoff,
            trip_miles: miles,
        })
    }

    fn april() -> IngestionConfig {
        IngestionConfig {
            window: Some("2024-04-01..2024-04-30".parse().unwrap()),
            ..IngestionConfig::default()
        }
    }

    #[test]
    fn attendance_is_active_days_over_window() {
        let mut recs = Vec::new();
        for d in 1..=15 {
            recs.push(trip("a", d * 2, 77, 3, 5.0));
        }
        recs.push(trip("b", 1, 4, 77, 1.0));
        let out = ingest_taxi_trace(recs, &april(), &BuyerSpec::default()).unwrap();
        let a = out.report.kept.iter().find(|v| v.vehicle_id == "a").unwrap();
        assert_eq!(a.attendance_prob, 0.5);
        assert_eq!(out.scenario.sellers[0].attendance_prob, 0.5);
        // b has the smallest mean miles, so it anchors at c_lo
        let b = out.report.kept.iter().find(|v| v.vehicle_id == "b").unwrap();
        assert_eq!(b.cost_anchor, 1.0);
        assert_eq!(a.cost_anchor, 1.5);
        let sb = &out.scenario.sellers[b.seller_id.0 as usize - 1];
        assert!(sb.base_cost.values().all(|&c| (1.0..=1.025).contains(&c)));
    }

    #[test]
    fn most_active_vehicles_are_kept() {
        let spec = TraceSpec::default();
        let trips = generate_trace(&spec);
        let mut buf = Vec::new();
        write_trips(&mut buf, &trips).unwrap();
        let cfg = IngestionConfig {
            seed: 4,
            ..IngestionConfig::default()
        };
        let a = ingest_taxi_trace(read_trips(&buf[..]), &cfg, &BuyerSpec::default()).unwrap();
        let b = ingest_taxi_trace(read_trips(&buf[..]), &cfg, &BuyerSpec::default()).unwrap();
        assert_eq!(a.scenario.sellers.len(), 20);
        assert_eq!(a, b);
        assert_eq!(a.report.window, "2024-01-01..2024-01-31".parse().unwrap());
        assert_eq!(a.report.malformed, 0);
        let days: Vec<u32> = a.report.kept.iter().map(|v| v.active_days).collect();
        assert!(days.windows(2).all(|w| w[0] >= w[1]));
        // regenerate from the raw trips as an oracle for the kept set
        let mut active: BTreeMap<&str, BTreeSet<NaiveDate>> = BTreeMap::new();
        for t in &trips {
            if t.pickup_area == 77 || t.dropoff_area == 77 {
                active.entry(&t.vehicle_id).or_default().insert(t.start_timestamp.date());
            }
        }
        let mut ranked: Vec<(&str, usize)> = active.iter().map(|(k, v)| (*k, v.len())).collect();
        ranked.sort_by(|x, y| y.1.cmp(&x.1).then(x.0.cmp(y.0)));
        let expect: Vec<&str> = ranked.iter().take(20).map(|x| x.0).collect();
        let got: Vec<&str> = a.report.kept.iter().map(|v| v.vehicle_id.as_str()).collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn malformed_rows_are_counted() {
        let csv = "vehicle_id,start_timestamp,pickup_area,dropoff_area,trip_miles\n\
                   a,2024-04-02T10:00:00,77,5,3.5\n\
                   a,not-a-time,77,5,3.5\n\
                   b,2024-04-02 11:00:00,0,77,1.0\n\
                   c,2024-04-03T10:00:00Z,77,8,-1\n\
                   d,2024-04-03T10:00:00+02:00,8,77,2\n";
        let out = ingest_taxi_trace(read_trips(csv.as_bytes()), &april(), &BuyerSpec::default()).unwrap();
        assert_eq!(out.report.rows, 5);
        assert_eq!(out.report.malformed, 3);
        assert_eq!(out.scenario.sellers.len(), 2);
    }

    #[test]
    fn empty_selection_names_the_filter() {
        let recs = vec![trip("a", 2, 5, 6, 1.0)];
        match ingest_taxi_trace(recs, &april(), &BuyerSpec::default()) {
            Err(Error::Ingestion(m)) => assert!(m.contains("77") && m.contains("poi_area"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn window_parsing() {
        let w: DateWindow = "2024-02-01..2024-02-29".parse().unwrap();
        assert_eq!(w.days(), 29);
        assert_eq!(DateWindow::month_of(NaiveDate::from_ymd_opt(2024, 12, 9).unwrap()).days(), 31);
        assert!("2024-02-02..2024-02-01".parse::<DateWindow>().is_err());
        assert!("garbage".parse::<DateWindow>().is_err());
    }
}
