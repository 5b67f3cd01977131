//! Deterministic synthetic hourly load with daily and weekly structure.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use chrono::{Datelike, NaiveDateTime, TimeDelta, Timelike};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::{parse_timestamp, LoadSeries, TIMESTAMP_FORMAT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Pure function of hour-of-day and day-of-week, no noise.
    Clean,
    /// Weekday opening hours, seasonal base, mild noise, no level shifts.
    Clinic,
    /// Residential load with one-hour charging spikes.
    Ev,
    /// Residential load with frequent spikes of random height.
    Spiky,
    /// Residential load with level shifts, drift, noise and spikes.
    House,
}

impl Profile {
    pub const ALL: [Profile; 5] = [Profile::Clean, Profile::Clinic, Profile::Ev, Profile::Spiky, Profile::House];
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Clean => "clean",
            Profile::Clinic => "clinic",
            Profile::Ev => "ev",
            Profile::Spiky => "spiky",
            Profile::House => "house",
        })
    }
}

impl FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Profile::ALL
            .into_iter()
            .find(|p| p.to_string() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown profile `{s}` (expected clean, clinic, ev, spiky or house)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub profile: Profile,
    pub hours: usize,
    pub seed: u64,
    pub start: NaiveDateTime,
    /// Expected spikes per day.
    pub spike_rate: f64,
    pub spike_height: f64,
    /// Heights drawn uniformly from `[0.5, 1.5] * spike_height` when set.
    pub random_spike_height: bool,
    pub noise_std: f64,
    pub level_shifts: bool,
    /// Load change per day.
    pub drift: f64,
    pub seasonal: bool,
}

impl SynthConfig {
    pub fn new(profile: Profile, hours: usize, seed: u64) -> Self {
        let base = Self {
            profile,
            hours,
            seed,
            start: parse_timestamp("2021-01-04T00:00:00").unwrap(),
            spike_rate: 0.0,
            spike_height: 0.0,
            random_spike_height: false,
            noise_std: 0.0,
            level_shifts: false,
            drift: 0.0,
            seasonal: false,
        };
        match profile {
            Profile::Clean => base,
            Profile::Clinic => Self {
                noise_std: 1.0,
                seasonal: true,
                ..base
            },
            Profile::Ev => Self {
                noise_std: 1.0,
                seasonal: true,
                spike_rate: 0.5,
                spike_height: 80.0,
                ..base
            },
            Profile::Spiky => Self {
                noise_std: 1.5,
                seasonal: true,
                spike_rate: 1.5,
                spike_height: 30.0,
                random_spike_height: true,
                ..base
            },
            Profile::House => Self {
                noise_std: 2.0,
                seasonal: true,
                spike_rate: 0.3,
                spike_height: 25.0,
                random_spike_height: true,
                level_shifts: true,
                drift: 0.02,
                ..base
            },
        }
    }
}

/// Generated series plus the hours that received a spike.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSeries {
    pub series: LoadSeries,
    pub spike_hours: Vec<usize>,
    pub shift_hours: Vec<usize>,
}

fn bump(x: f64, centre: f64, width: f64) -> f64 {
    (-(x - centre) * (x - centre) / (2.0 * width * width)).exp()
}

/// Residential weekday/weekend shape, roughly in [0, 1].
fn residential(hour: f64, weekday: u32) -> f64 {
    let weekend = weekday >= 5;
    let morning = if weekend { bump(hour, 10.0, 2.0) } else { bump(hour, 7.5, 1.2) };
    0.25 + 0.35 * morning + 0.6 * bump(hour, 19.0, 2.2) + if weekend { 0.15 } else { 0.0 }
}

/// Clinic opening hours on weekdays, a short Saturday.
fn clinic(hour: f64, weekday: u32) -> f64 {
    let open = match weekday {
        0..=4 => (7.0, 19.0),
        5 => (8.0, 13.0),
        _ => return 0.15,
    };
    let ramp = |x: f64| 1.0 / (1.0 + (-2.0 * x).exp());
    0.15 + 0.85 * ramp(hour - open.0) * ramp(open.1 - hour)
}

/// Load for the clean profile: a pure function of the calendar position.
pub fn clean_load(hour: u32, weekday: u32) -> f64 {
    30.0 + 40.0 * residential(hour as f64, weekday) + 1.5 * weekday as f64
}

pub fn generate(config: &SynthConfig) -> Result<SynthSeries> {
    if config.hours == 0 {
        return Err(Error::Config("synthetic length must be positive".into()));
    }
    if !(config.spike_rate >= 0.0 && config.spike_rate <= 24.0) {
        return Err(Error::Config(format!("spike rate must lie in [0, 24] per day, got {}", config.spike_rate)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, config.noise_std.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let shift = Normal::new(0.0, 6.0).unwrap();
    let mut series = LoadSeries {
        source: format!("synthetic:{}:{}", config.profile, config.seed),
        timestamps: Vec::with_capacity(config.hours),
        load: Vec::with_capacity(config.hours),
        temperature: Vec::with_capacity(config.hours),
        interpolated: vec![false; config.hours],
    };
    let mut spike_hours = Vec::new();
    let mut shift_hours = Vec::new();
    let mut level = 0.0;
    let p_spike = config.spike_rate / 24.0;
    for t in 0..config.hours {
        let ts = config.start + TimeDelta::hours(t as i64);
        let hour = ts.hour();
        let weekday = ts.weekday().num_days_from_monday();
        let doy = ts.ordinal() as f64;
        let season = (2.0 * std::f64::consts::PI * (doy - 15.0) / 365.25).cos();
        let mut temp = 11.0 - 9.0 * season + 4.0 * (2.0 * std::f64::consts::PI * (hour as f64 - 9.0) / 24.0).sin();
        if config.noise_std > 0.0 {
            temp += 0.5 * noise.sample(&mut rng);
        }
        let mut load = match config.profile {
            Profile::Clean => clean_load(hour, weekday),
            Profile::Clinic => 15.0 + 45.0 * clinic(hour as f64, weekday),
            _ => 12.0 + 35.0 * residential(hour as f64, weekday),
        };
        if config.seasonal {
            load *= 1.0 + 0.15 * season;
        }
        if config.noise_std > 0.0 {
            let n = noise.sample(&mut rng);
            load += n.clamp(-3.0 * config.noise_std, 3.0 * config.noise_std);
        }
        if config.level_shifts && t > 0 && rng.random_bool(1.0 / (24.0 * 30.0)) {
            level += shift.sample(&mut rng);
            shift_hours.push(t);
        }
        load += level + config.drift * t as f64 / 24.0;
        if p_spike > 0.0 && rng.random_bool(p_spike) {
            let h = if config.random_spike_height {
                config.spike_height * rng.random_range(0.5..1.5)
            } else {
                config.spike_height
            };
            load += h;
            spike_hours.push(t);
        }
        series.timestamps.push(ts);
        series.load.push(load.max(0.0));
        series.temperature.push(temp);
    }
    Ok(SynthSeries {
        series,
        spike_hours,
        shift_hours,
    })
}

/// Standard three-column CSV.
pub fn write_csv<W: Write>(series: &LoadSeries, mut out: W) -> std::io::Result<()> {
    writeln!(out, "timestamp,load_kwh,temperature_c")?;
    for t in 0..series.len() {
        writeln!(
            out,
            "{},{:.4},{:.4}",
            series.timestamps[t].format(TIMESTAMP_FORMAT),
            series.load[t],
            series.temperature[t]
        )?;
    }
    out.flush()
}

pub fn write_csv_file(series: &LoadSeries, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(series, std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
}
