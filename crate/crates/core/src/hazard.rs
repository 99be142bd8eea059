//! Hazard reporting: per-frame detections become geolocated events, events
//! accumulate confidence in map cells, and cells that collect enough distinct
//! reports raise a warning.
//!
//! Event and warning wire format (JSON Lines):
//!
//! ```text
//! {"device_id":"car-7","timestamp":1700000000000,"lat":41.6523,"lon":-4.7245,"score":0.91,"box_count":2}
//! {"cell":[46107,-52599],"lat":41.65235,"lon":-4.72451,"confidence":2.612345,"distinct_reports":3,"issued_at":1700000004000}
//! ```
//!
//! A pothole is placed at the vehicle's own GPS position; the cell size absorbs
//! the offset between camera target and vehicle.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::hash::{Hash, Hasher};
use std::io::{self, BufRead, BufReader};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{read_json_lines, Detection, Issue};

/// Metres per degree of latitude (and of longitude at the equator).
pub const METERS_PER_DEGREE: f64 = 111_320.0;

/// Frames captured above this speed are too blurred to trust.
pub const SPEED_LIMIT_KMH: f64 = 60.0;

#[derive(Debug, Error)]
pub enum HazardError {
    #[error("coordinates ({0}, {1}) out of range")]
    BadCoordinates(f64, f64),
    #[error("invalid event: {0}")]
    InvalidEvent(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("event from {device:?} at {timestamp} precedes its previous report at {previous} in cell {cell:?}")]
    OutOfOrder {
        device: String,
        timestamp: i64,
        previous: i64,
        cell: CellId,
    },
    #[error("line {line}: timestamp {timestamp} is earlier than the previous event ({previous})")]
    Unsorted {
        line: usize,
        timestamp: i64,
        previous: i64,
    },
    #[error("{} ({} problem(s) in total)", .0[0], .0.len())]
    Malformed(Vec<Issue>),
    #[error("line {line}")]
    AtLine {
        line: usize,
        #[source]
        source: Box<HazardError>,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehiclePose {
    /// Milliseconds since the Unix epoch.
    pub timestamp: i64,
    pub latitude: f64,
    pub longitude: f64,
    pub speed_kmh: f64,
    pub device_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazardEvent {
    pub device_id: String,
    pub timestamp: i64,
    pub lat: f64,
    pub lon: f64,
    /// Highest qualifying detection score in the frame.
    pub score: f64,
    /// Number of qualifying detections in the frame.
    pub box_count: u32,
}

impl HazardEvent {
    pub fn validate(&self) -> Result<(), HazardError> {
        check_coordinates(self.lat, self.lon)?;
        if !(0.0..=1.0).contains(&self.score) {
            return Err(HazardError::InvalidEvent(format!(
                "score {} outside [0, 1]",
                self.score
            )));
        }
        if self.box_count == 0 {
            return Err(HazardError::InvalidEvent(
                "box_count must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

fn check_coordinates(lat: f64, lon: f64) -> Result<(), HazardError> {
    if lat.is_finite() && lon.is_finite() && lat.abs() <= 90.0 && lon.abs() < 180.0 {
        Ok(())
    } else {
        Err(HazardError::BadCoordinates(lat, lon))
    }
}

/// Turns one frame's detections into an event at the vehicle position.
///
/// Returns `None` when no detection reaches `min_score` or the vehicle is
/// faster than [`SPEED_LIMIT_KMH`].
pub fn geolocate(
    detections: &[Detection],
    pose: &VehiclePose,
    min_score: f64,
) -> Option<HazardEvent> {
    if pose.speed_kmh > SPEED_LIMIT_KMH {
        return None;
    }
    let qualifying = detections.iter().filter(|d| d.score >= min_score);
    let (count, best) = qualifying.fold((0u32, f64::NEG_INFINITY), |(n, best), d| {
        (n + 1, best.max(d.score))
    });
    (count > 0).then(|| HazardEvent {
        device_id: pose.device_id.clone(),
        timestamp: pose.timestamp,
        lat: pose.latitude,
        lon: pose.longitude,
        score: best,
        box_count: count,
    })
}

/// Grid cell: latitude band index and longitude index within the band.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellId(pub i64, pub i64);

impl CellId {
    pub fn lat_index(&self) -> i64 {
        self.0
    }

    pub fn lon_index(&self) -> i64 {
        self.1
    }
}

fn band_center_latitude(lat_index: i64, cell_size_m: f64) -> f64 {
    (lat_index as f64 + 0.5) * cell_size_m / METERS_PER_DEGREE
}

/// Equirectangular grid with `cell_size_m` latitude bands; within a band,
/// longitude is scaled by the cosine of the band's center latitude. Cells are
/// half-open, so a point on a boundary belongs to the higher-index cell.
pub fn cell_of(latitude: f64, longitude: f64, cell_size_m: f64) -> Result<CellId, HazardError> {
    check_coordinates(latitude, longitude)?;
    if !(cell_size_m > 0.0 && cell_size_m.is_finite()) {
        return Err(HazardError::InvalidConfig(format!(
            "cell size must be positive, got {cell_size_m}"
        )));
    }
    let lat_index = (latitude * METERS_PER_DEGREE / cell_size_m).floor() as i64;
    let scale = band_center_latitude(lat_index, cell_size_m)
        .to_radians()
        .cos()
        .max(0.0);
    let lon_index = (longitude * METERS_PER_DEGREE * scale / cell_size_m).floor() as i64;
    Ok(CellId(lat_index, lon_index))
}

/// Latitude/longitude of the cell's center.
pub fn cell_center(cell: CellId, cell_size_m: f64) -> (f64, f64) {
    let lat = band_center_latitude(cell.0, cell_size_m);
    let scale = lat.to_radians().cos();
    let lon = (cell.1 as f64 + 0.5) * cell_size_m / (METERS_PER_DEGREE * scale);
    (lat, lon)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub cell_size_m: f64,
    /// Distinct reports needed before a cell raises a warning.
    pub report_threshold: u32,
    pub half_life_hours: f64,
    /// Repeated reports from one device within this window count once.
    pub debounce_seconds: f64,
    /// When decay carries a cell's confidence below this level its evidence is
    /// considered stale: report count and warning state reset.
    pub rearm_confidence: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            cell_size_m: 10.0,
            report_threshold: 3,
            half_life_hours: 24.0,
            debounce_seconds: 5.0,
            rearm_confidence: 0.1,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), HazardError> {
        let bad = |what: &str| Err(HazardError::InvalidConfig(what.to_string()));
        if !(self.cell_size_m > 0.0 && self.cell_size_m.is_finite()) {
            return bad("cell size must be positive");
        }
        if self.report_threshold == 0 {
            return bad("report threshold must be at least 1");
        }
        if self.half_life_hours.is_nan() || self.half_life_hours <= 0.0 {
            return bad("half-life must be positive");
        }
        if !(self.debounce_seconds >= 0.0 && self.debounce_seconds.is_finite()) {
            return bad("debounce window must be non-negative");
        }
        if !(self.rearm_confidence >= 0.0 && self.rearm_confidence.is_finite()) {
            return bad("re-arm confidence must be non-negative");
        }
        Ok(())
    }

    fn half_life_ms(&self) -> f64 {
        self.half_life_hours * 3_600_000.0
    }

    fn debounce_ms(&self) -> f64 {
        self.debounce_seconds * 1000.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellState {
    pub cell: CellId,
    pub confidence: f64,
    pub distinct_reports: u32,
    pub last_update: i64,
    pub warned: bool,
    #[serde(skip)]
    device_last: BTreeMap<String, i64>,
}

impl CellState {
    fn new(cell: CellId, timestamp: i64) -> Self {
        Self {
            cell,
            confidence: 0.0,
            distinct_reports: 0,
            last_update: timestamp,
            warned: false,
            device_last: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarningMessage {
    pub cell: CellId,
    pub lat: f64,
    pub lon: f64,
    pub confidence: f64,
    pub distinct_reports: u32,
    pub issued_at: i64,
}

/// Per-cell state for a stream of events.
#[derive(Debug, Clone)]
pub struct CellStore {
    config: PipelineConfig,
    cells: HashMap<CellId, CellState>,
}

impl CellStore {
    pub fn new(config: PipelineConfig) -> Result<Self, HazardError> {
        config.validate()?;
        Ok(Self {
            config,
            cells: HashMap::new(),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn cell(&self, id: CellId) -> Option<&CellState> {
        self.cells.get(&id)
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// All cells ordered by id.
    pub fn cells_sorted(&self) -> Vec<&CellState> {
        let mut cells: Vec<&CellState> = self.cells.values().collect();
        cells.sort_by_key(|c| c.cell);
        cells
    }

    /// Applies one event.
    ///
    /// Confidence decays exponentially since the cell's last update and then
    /// grows by the event score. The report counts as distinct unless the same
    /// device reported this cell less than the debounce window ago. The first
    /// time the count reaches the threshold a warning is returned.
    pub fn ingest(
        &mut self,
        event: &HazardEvent,
    ) -> Result<(&CellState, Option<WarningMessage>), HazardError> {
        event.validate()?;
        let config = self.config;
        let id = cell_of(event.lat, event.lon, config.cell_size_m)?;
        let state = self
            .cells
            .entry(id)
            .or_insert_with(|| CellState::new(id, event.timestamp));

        let previous = state.device_last.get(&event.device_id).copied();
        if let Some(previous) = previous {
            if event.timestamp < previous {
                return Err(HazardError::OutOfOrder {
                    device: event.device_id.clone(),
                    timestamp: event.timestamp,
                    previous,
                    cell: id,
                });
            }
        }

        // Other devices may arrive slightly out of order; never decay backwards.
        let elapsed = (event.timestamp - state.last_update).max(0) as f64;
        let before = state.confidence;
        state.confidence *= 0.5f64.powf(elapsed / config.half_life_ms());
        if before >= config.rearm_confidence && state.confidence < config.rearm_confidence {
            state.distinct_reports = 0;
            state.warned = false;
        }
        state.confidence += event.score;
        state.last_update = state.last_update.max(event.timestamp);

        let debounced = previous
            .is_some_and(|p| ((event.timestamp - p) as f64) < config.debounce_ms())
            && state.distinct_reports > 0;
        if !debounced {
            state.distinct_reports += 1;
        }
        state
            .device_last
            .insert(event.device_id.clone(), event.timestamp);

        let warning = if !state.warned && state.distinct_reports >= config.report_threshold {
            state.warned = true;
            let (lat, lon) = cell_center(id, config.cell_size_m);
            Some(WarningMessage {
                cell: id,
                lat,
                lon,
                confidence: state.confidence,
                distinct_reports: state.distinct_reports,
                issued_at: event.timestamp,
            })
        } else {
            None
        };
        Ok((state, warning))
    }
}

/// A cell store shared between threads. Cells are spread over independently
/// locked shards, so events for different cells can be ingested in parallel
/// while events for one cell are applied one at a time.
#[derive(Debug)]
pub struct SharedCellStore {
    shards: Vec<Mutex<CellStore>>,
    config: PipelineConfig,
}

impl SharedCellStore {
    pub fn new(config: PipelineConfig, shards: usize) -> Result<Self, HazardError> {
        let shards = (0..shards.max(1))
            .map(|_| CellStore::new(config).map(Mutex::new))
            .collect::<Result<_, _>>()?;
        Ok(Self { shards, config })
    }

    fn shard(&self, id: CellId) -> &Mutex<CellStore> {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        id.hash(&mut h);
        &self.shards[(h.finish() % self.shards.len() as u64) as usize]
    }

    pub fn ingest(
        &self,
        event: &HazardEvent,
    ) -> Result<(CellState, Option<WarningMessage>), HazardError> {
        event.validate()?;
        let id = cell_of(event.lat, event.lon, self.config.cell_size_m)?;
        let mut store = self.shard(id).lock().unwrap_or_else(|e| e.into_inner());
        let (state, warning) = store.ingest(event)?;
        Ok((state.clone(), warning))
    }

    /// Snapshot of all cells ordered by id.
    pub fn cells_sorted(&self) -> Vec<CellState> {
        let mut cells: Vec<CellState> = self
            .shards
            .iter()
            .flat_map(|s| {
                let store = s.lock().unwrap_or_else(|e| e.into_inner());
                store.cells.values().cloned().collect::<Vec<_>>()
            })
            .collect();
        cells.sort_by_key(|c| c.cell);
        cells
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ReplaySummary {
    pub events_ingested: usize,
    pub cells_touched: usize,
    pub warnings_emitted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayReport {
    pub summary: ReplaySummary,
    pub warnings: Vec<WarningMessage>,
    pub cells: Vec<CellState>,
}

/// Replays time-ordered events through a fresh store.
pub fn replay_events<'a>(
    events: impl IntoIterator<Item = &'a HazardEvent>,
    config: PipelineConfig,
) -> Result<ReplayReport, HazardError> {
    let mut store = CellStore::new(config)?;
    let mut warnings = Vec::new();
    let mut previous: Option<i64> = None;
    let mut count = 0;
    for (i, event) in events.into_iter().enumerate() {
        let line = i + 1;
        if let Some(p) = previous.filter(|&p| event.timestamp < p) {
            return Err(HazardError::Unsorted {
                line,
                timestamp: event.timestamp,
                previous: p,
            });
        }
        previous = Some(event.timestamp);
        let (_, warning) = store.ingest(event).map_err(|e| HazardError::AtLine {
            line,
            source: Box::new(e),
        })?;
        warnings.extend(warning);
        count += 1;
    }
    let cells: Vec<CellState> = store.cells_sorted().into_iter().cloned().collect();
    Ok(ReplayReport {
        summary: ReplaySummary {
            events_ingested: count,
            cells_touched: cells.len(),
            warnings_emitted: warnings.len(),
        },
        warnings,
        cells,
    })
}

/// Reads an event log. Every malformed line is reported with its number.
pub fn read_events<R: BufRead>(reader: R) -> Result<Vec<(usize, HazardEvent)>, HazardError> {
    let (events, issues) = read_json_lines::<HazardEvent, _>(reader)?;
    if issues.is_empty() {
        Ok(events)
    } else {
        Err(HazardError::Malformed(issues))
    }
}

/// Replays an event log file. Line numbers in errors refer to the file.
pub fn replay(path: impl AsRef<Path>, config: PipelineConfig) -> Result<ReplayReport, HazardError> {
    let events = read_events(BufReader::new(File::open(path)?))?;
    let lines: Vec<usize> = events.iter().map(|(l, _)| *l).collect();
    let events: Vec<HazardEvent> = events.into_iter().map(|(_, e)| e).collect();
    replay_events(&events, config).map_err(|e| match e {
        HazardError::Unsorted {
            line,
            timestamp,
            previous,
        } => HazardError::Unsorted {
            line: lines[line - 1],
            timestamp,
            previous,
        },
        HazardError::AtLine { line, source } => HazardError::AtLine {
            line: lines[line - 1],
            source,
        },
        other => other,
    })
}

/// Stable merge of two time-ordered logs; on equal timestamps events from `a`
/// come first.
pub fn merge_logs(a: &[HazardEvent], b: &[HazardEvent]) -> Vec<HazardEvent> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        if b[j].timestamp < a[i].timestamp {
            out.push(b[j].clone());
            j += 1;
        } else {
            out.push(a[i].clone());
            i += 1;
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}
