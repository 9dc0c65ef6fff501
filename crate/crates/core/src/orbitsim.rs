//! Two-body orbit simulation and synthetic angles-only streak observations.
//!
//! Conventions:
//! - all vectors are ECI, positions in km, times in seconds since scenario start;
//! - the Earth is a sphere of radius [`EARTH_RADIUS_KM`] rotating about +z, with
//!   Greenwich on the inertial x-axis at t = 0;
//! - element angles are stored in degrees.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GM_EARTH: f64 = 398_600.441_8;
pub const EARTH_RADIUS_KM: f64 = 6378.137;
pub const EARTH_ROTATION_RATE: f64 = 7.292_115_9e-5;

const KEPLER_MAX_ITER: usize = 100;
const KEPLER_TOL: f64 = 1e-14;
const SENSOR_MAX_ATTEMPTS: usize = 100_000;

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ObsId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RsoId(pub u64);

impl fmt::Display for ObsId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for RsoId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeplerianElements {
    pub semi_major_axis_km: f64,
    pub eccentricity: f64,
    pub inclination_deg: f64,
    pub raan_deg: f64,
    pub arg_perigee_deg: f64,
    pub mean_anomaly_deg: f64,
    /// Epoch of `mean_anomaly_deg`, seconds since scenario start.
    pub epoch_ref_s: f64,
}

impl KeplerianElements {
    pub fn validate(&self) -> Result<()> {
        let angles_ok = [self.raan_deg, self.arg_perigee_deg, self.mean_anomaly_deg]
            .iter()
            .all(|a| (0.0..360.0).contains(a));
        if !(self.semi_major_axis_km > 0.0)
            || !(0.0..1.0).contains(&self.eccentricity)
            || !(0.0..180.0).contains(&self.inclination_deg)
            || !angles_ok
            || !self.epoch_ref_s.is_finite()
        {
            return Err(Error::InvalidInput(format!("invalid orbital elements {self:?}")));
        }
        Ok(())
    }

    pub fn mean_motion(&self) -> f64 {
        (GM_EARTH / self.semi_major_axis_km.powi(3)).sqrt()
    }

    pub fn period(&self) -> f64 {
        TAU / self.mean_motion()
    }
}

/// Solve Kepler's equation `E - e sin E = M` for the eccentric anomaly.
///
/// The result lies in the same 2π branch as `mean_anomaly`. Newton iterations
/// are safeguarded by the bracket `[m - e, m + e]` of the reduced anomaly.
pub fn solve_kepler(mean_anomaly: f64, eccentricity: f64) -> Result<f64> {
    let failure = Error::SolverFailure {
        mean_anomaly,
        eccentricity,
    };
    if !mean_anomaly.is_finite() || !(0.0..1.0).contains(&eccentricity) {
        return Err(failure);
    }
    let e = eccentricity;
    let turns = ((mean_anomaly + PI) / TAU).floor();
    let m = mean_anomaly - turns * TAU;

    let f = |x: f64| x - e * x.sin() - m;
    let (mut lo, mut hi) = (m - e, m + e);
    let mut x = if e < 0.8 { m + e * m.sin() } else { m.signum() * PI };
    x = x.clamp(lo, hi);

    for _ in 0..KEPLER_MAX_ITER {
        let fx = f(x);
        if fx.abs() <= KEPLER_TOL {
            return Ok(x + turns * TAU);
        }
        if fx < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let step = fx / (1.0 - e * x.cos());
        let mut next = x - step;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if next == x {
            break;
        }
        x = next;
    }
    if f(x).abs() < 1e-12 {
        Ok(x + turns * TAU)
    } else {
        Err(failure)
    }
}

/// Unit vectors of the perifocal frame (P toward perigee, Q in-plane).
fn perifocal_basis(el: &KeplerianElements) -> (Vec3, Vec3) {
    let (so, co) = el.raan_deg.to_radians().sin_cos();
    let (si, ci) = el.inclination_deg.to_radians().sin_cos();
    let (sw, cw) = el.arg_perigee_deg.to_radians().sin_cos();
    let p = Vec3::new(co * cw - so * sw * ci, so * cw + co * sw * ci, sw * si);
    let q = Vec3::new(-co * sw - so * cw * ci, -so * sw + co * cw * ci, cw * si);
    (p, q)
}

/// Two-body position (km) and velocity (km/s) at time `t`.
pub fn elements_to_state(el: &KeplerianElements, t: f64) -> Result<(Vec3, Vec3)> {
    if !t.is_finite() {
        return Err(Error::InvalidInput(format!("non-finite time {t}")));
    }
    let a = el.semi_major_axis_km;
    let e = el.eccentricity;
    let n = el.mean_motion();
    let mean = el.mean_anomaly_deg.to_radians() + n * (t - el.epoch_ref_s);
    let ecc_anom = solve_kepler(mean, e)?;
    let (s, c) = ecc_anom.sin_cos();
    let root = (1.0 - e * e).sqrt();
    let x = a * (c - e);
    let y = a * root * s;
    let edot = n / (1.0 - e * c);
    let vx = -a * s * edot;
    let vy = a * root * c * edot;
    let (p, q) = perifocal_basis(el);
    Ok((p * x + q * y, p * vx + q * vy))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    /// Uniform on `[min, max)`; returns `min` exactly for a degenerate range.
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        self.min + (self.max - self.min) * u
    }

    fn check(&self, name: &str, lo: f64, hi: f64) -> Result<()> {
        if !(self.min.is_finite() && self.max.is_finite()) || self.min > self.max {
            return Err(Error::Config(format!(
                "{name} range [{}, {}] is empty or inverted",
                self.min, self.max
            )));
        }
        if self.min < lo || self.max > hi {
            return Err(Error::Config(format!(
                "{name} range [{}, {}] outside [{lo}, {hi}]",
                self.min, self.max
            )));
        }
        Ok(())
    }
}

/// Bounds of the uniform element distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ElementRanges {
    pub semi_major_axis_km: Range,
    pub eccentricity: Range,
    pub inclination_deg: Range,
    pub raan_deg: Range,
    pub arg_perigee_deg: Range,
    pub mean_anomaly_deg: Range,
}

impl Default for ElementRanges {
    fn default() -> Self {
        Self {
            semi_major_axis_km: Range::new(41_164.0, 43_164.0),
            eccentricity: Range::new(0.0, 0.1),
            inclination_deg: Range::new(0.0, 20.0),
            raan_deg: Range::new(0.0, 360.0),
            arg_perigee_deg: Range::new(0.0, 360.0),
            mean_anomaly_deg: Range::new(0.0, 360.0),
        }
    }
}

impl ElementRanges {
    pub fn validate(&self) -> Result<()> {
        self.semi_major_axis_km.check("semi-major axis", f64::MIN_POSITIVE, f64::MAX)?;
        self.eccentricity.check("eccentricity", 0.0, 1.0 - f64::EPSILON)?;
        self.inclination_deg.check("inclination", 0.0, 180.0)?;
        self.raan_deg.check("raan", 0.0, 360.0)?;
        self.arg_perigee_deg.check("argument of perigee", 0.0, 360.0)?;
        self.mean_anomaly_deg.check("mean anomaly", 0.0, 360.0)
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> KeplerianElements {
        // a degenerate [0, 180] inclination or [0, 360] angle range would be
        // half-open anyway; clamp just below the upper edge for u -> 1 rounding
        let angle = |r: &Range, rng: &mut R| r.sample(rng).min(f64::from_bits(360f64.to_bits() - 1));
        KeplerianElements {
            semi_major_axis_km: self.semi_major_axis_km.sample(rng),
            eccentricity: self.eccentricity.sample(rng),
            inclination_deg: self
                .inclination_deg
                .sample(rng)
                .min(f64::from_bits(180f64.to_bits() - 1)),
            raan_deg: angle(&self.raan_deg, rng),
            arg_perigee_deg: angle(&self.arg_perigee_deg, rng),
            mean_anomaly_deg: angle(&self.mean_anomaly_deg, rng),
            epoch_ref_s: 0.0,
        }
    }
}

/// Draw `n_sats` independent element sets uniformly inside `ranges`.
pub fn sample_population<R: Rng + ?Sized>(
    n_sats: usize,
    ranges: &ElementRanges,
    rng: &mut R,
) -> Result<Vec<KeplerianElements>> {
    if n_sats == 0 {
        return Err(Error::Config("population size must be at least 1".into()));
    }
    ranges.validate()?;
    Ok((0..n_sats).map(|_| ranges.sample(rng)).collect())
}

/// A ground site on the spherical Earth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sensor {
    pub latitude_deg: f64,
    pub longitude_deg: f64,
    pub altitude_km: f64,
}

impl Sensor {
    pub fn new(latitude_deg: f64, longitude_deg: f64) -> Self {
        Self {
            latitude_deg,
            longitude_deg,
            altitude_km: 0.0,
        }
    }

    /// Uniform over the sphere surface.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let z: f64 = rng.random_range(-1.0..=1.0);
        let lon: f64 = rng.random_range(-180.0..180.0);
        Self::new(z.asin().to_degrees(), lon)
    }
}

/// Inertial position of a ground site at time `t`.
pub fn sensor_eci(sensor: &Sensor, t: f64) -> Vec3 {
    let r = EARTH_RADIUS_KM + sensor.altitude_km;
    let (slat, clat) = sensor.latitude_deg.to_radians().sin_cos();
    let theta = sensor.longitude_deg.to_radians() + EARTH_ROTATION_RATE * t;
    let (sth, cth) = theta.sin_cos();
    Vec3::new(r * clat * cth, r * clat * sth, r * slat)
}

/// One angles-only streak.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub obs_id: ObsId,
    /// Truth label; `None` for blind datasets.
    pub rso_id: Option<RsoId>,
    /// Streak start, seconds since scenario start.
    pub epoch: f64,
    pub observer_pos: Vec3,
    pub los: Vec3,
    pub los_rate: Vec3,
    pub streak_duration: f64,
}

impl Observation {
    pub fn same_object(&self, other: &Observation) -> Option<bool> {
        Some(self.rso_id? == other.rso_id?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub n_observations: usize,
    pub window_s: f64,
    pub obs_per_sat_min: usize,
    pub obs_per_sat_max: usize,
    pub streak_duration_s: f64,
    pub noise_sigma_m: f64,
    pub elevation_mask_deg: f64,
    pub seed: u64,
    /// Offset added to every obs/rso id so separately generated scenarios never collide.
    pub id_base: u64,
    pub element_ranges: ElementRanges,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_observations: 100_000,
            window_s: 43_200.0,
            obs_per_sat_min: 3,
            obs_per_sat_max: 10,
            streak_duration_s: 120.0,
            noise_sigma_m: 100.0,
            elevation_mask_deg: 10.0,
            seed: 0,
            id_base: 0,
            element_ranges: ElementRanges::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_observations == 0 {
            return Err(Error::Config("n_observations must be at least 1".into()));
        }
        if self.obs_per_sat_min == 0 || self.obs_per_sat_min > self.obs_per_sat_max {
            return Err(Error::Config(format!(
                "observations per satellite range [{}, {}] is unreachable",
                self.obs_per_sat_min, self.obs_per_sat_max
            )));
        }
        if !(self.noise_sigma_m >= 0.0) {
            return Err(Error::Config("noise sigma must be non-negative".into()));
        }
        if !(self.streak_duration_s > 0.0) || !(self.window_s >= self.streak_duration_s) {
            return Err(Error::Config(
                "streak duration must be positive and fit in the window".into(),
            ));
        }
        if !(-90.0..90.0).contains(&self.elevation_mask_deg) {
            return Err(Error::Config("elevation mask must be in [-90, 90) deg".into()));
        }
        self.element_ranges.validate()
    }
}

fn unit(v: Vec3) -> Result<Vec3> {
    let n = v.norm();
    if n > 0.0 && n.is_finite() {
        Ok(v / n)
    } else {
        Err(Error::InvalidInput("cannot normalize zero-length vector".into()))
    }
}

/// Synthesize one streak of `el` seen from `sensor`, starting at `epoch`.
///
/// Each streak endpoint gets an independent Gaussian perturbation of the
/// target position. The returned observation carries placeholder ids.
/// Fails with [`Error::BelowHorizon`] when the (noisy) line of sight at
/// streak start is below the elevation mask.
pub fn observe<R: Rng + ?Sized>(
    el: &KeplerianElements,
    sensor: &Sensor,
    epoch: f64,
    cfg: &ScenarioConfig,
    rng: &mut R,
) -> Result<Observation> {
    let duration = cfg.streak_duration_s;
    if !(epoch >= 0.0 && epoch + duration <= cfg.window_s) {
        return Err(Error::Config(format!(
            "streak [{epoch}, {}] leaves the {} s window",
            epoch + duration,
            cfg.window_s
        )));
    }
    let noise = Normal::new(0.0, cfg.noise_sigma_m * 1e-3)
        .map_err(|e| Error::Config(format!("noise distribution: {e}")))?;
    let endpoint = |t: f64, rng: &mut R| -> Result<(Vec3, Vec3)> {
        let (target, _) = elements_to_state(el, t)?;
        let eps = Vec3::new(noise.sample(rng), noise.sample(rng), noise.sample(rng));
        let site = sensor_eci(sensor, t);
        Ok((site, unit(target + eps - site)?))
    };
    let (site, los) = endpoint(epoch, rng)?;
    let (_, los_end) = endpoint(epoch + duration, rng)?;

    let up = site / site.norm();
    let elevation_deg = los.dot(&up).clamp(-1.0, 1.0).asin().to_degrees();
    if elevation_deg < cfg.elevation_mask_deg {
        return Err(Error::BelowHorizon {
            elevation_deg,
            mask_deg: cfg.elevation_mask_deg,
        });
    }

    Ok(Observation {
        obs_id: ObsId(0),
        rso_id: None,
        epoch,
        observer_pos: site,
        los,
        los_rate: (los_end - los) / duration,
        streak_duration: duration,
    })
}

fn satellite_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generate a full scenario of `cfg.n_observations` observations.
///
/// Satellites are created until the observation budget is used up, each
/// receiving a uniform count in `[obs_per_sat_min, obs_per_sat_max]` (the last
/// one is truncated to the remaining budget). Every observation uses a freshly
/// placed sensor, re-drawn until the target clears the elevation mask.
/// Observations are returned sorted by epoch with sequential ids.
pub fn build_scenario(cfg: &ScenarioConfig) -> Result<Vec<Observation>> {
    cfg.validate()?;
    let mut plan_rng = satellite_rng(cfg.seed, 0);
    let mut counts = Vec::new();
    let mut remaining = cfg.n_observations;
    while remaining > 0 {
        let k = plan_rng
            .random_range(cfg.obs_per_sat_min..=cfg.obs_per_sat_max)
            .min(remaining);
        counts.push(k);
        remaining -= k;
    }

    let per_sat: Vec<Vec<Observation>> = counts
        .par_iter()
        .enumerate()
        .map(|(sat, &count)| {
            let mut rng = satellite_rng(cfg.seed, sat as u64 + 1);
            let el = cfg.element_ranges.sample(&mut rng);
            let rso = RsoId(cfg.id_base + sat as u64);
            (0..count)
                .map(|_| {
                    let epoch = rng.random_range(0.0..=cfg.window_s - cfg.streak_duration_s);
                    for _ in 0..SENSOR_MAX_ATTEMPTS {
                        let sensor = Sensor::random(&mut rng);
                        match observe(&el, &sensor, epoch, cfg, &mut rng) {
                            Ok(mut obs) => {
                                obs.rso_id = Some(rso);
                                return Ok(obs);
                            }
                            Err(Error::BelowHorizon { .. }) => continue,
                            Err(e) => return Err(e),
                        }
                    }
                    Err(Error::Config(format!(
                        "no visible sensor found for satellite {sat} at t = {epoch}"
                    )))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut all: Vec<Observation> = per_sat.into_iter().flatten().collect();
    // stable: ties keep satellite generation order
    all.sort_by(|a, b| a.epoch.total_cmp(&b.epoch));
    for (i, obs) in all.iter_mut().enumerate() {
        obs.obs_id = ObsId(cfg.id_base + i as u64);
    }
    Ok(all)
}

const CSV_HEADER: &str =
    "obs_id,rso_id,epoch_s,obs_px_km,obs_py_km,obs_pz_km,los_x,los_y,los_z,losr_x,losr_y,losr_z,streak_s";
const CSV_HEADER_BLIND: &str =
    "obs_id,epoch_s,obs_px_km,obs_py_km,obs_pz_km,los_x,los_y,los_z,losr_x,losr_y,losr_z,streak_s";

/// Shortest representation that still carries 17 significant digits.
pub(crate) fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Write observations as CSV. With `blind` the truth column is omitted.
pub fn write_observations_csv<W: Write>(out: W, observations: &[Observation], blind: bool) -> Result<()> {
    let mut w = BufWriter::new(out);
    let io = |e| Error::io("observation csv", e);
    writeln!(w, "{}", if blind { CSV_HEADER_BLIND } else { CSV_HEADER }).map_err(io)?;
    for o in observations {
        let mut line = o.obs_id.to_string();
        if !blind {
            let rso = o.rso_id.ok_or_else(|| {
                Error::MissingLabels(format!("observation {} has no rso_id", o.obs_id))
            })?;
            line.push(',');
            line.push_str(&rso.to_string());
        }
        let values = [o.epoch]
            .into_iter()
            .chain(o.observer_pos.iter().copied())
            .chain(o.los.iter().copied())
            .chain(o.los_rate.iter().copied())
            .chain([o.streak_duration]);
        for v in values {
            line.push(',');
            line.push_str(&fmt_f64(v));
        }
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn save_observations(path: &Path, observations: &[Observation], blind: bool) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_observations_csv(file, observations, blind)
}

/// Read an observation CSV in either the labelled or the blind layout.
pub fn read_observations_csv<R: std::io::Read>(input: R) -> Result<Vec<Observation>> {
    let reader = BufReader::new(input);
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(h) => h.map_err(|e| Error::io("observation csv", e))?,
        None => return Err(Error::Format("empty observation file".into())),
    };
    let blind = match header.trim() {
        CSV_HEADER => false,
        CSV_HEADER_BLIND => true,
        other => return Err(Error::Format(format!("unexpected header `{other}`"))),
    };
    let expected_cols = if blind { 12 } else { 13 };
    let mut out = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io("observation csv", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Format(format!("line {}: {what}", lineno + 2));
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != expected_cols {
            return Err(bad("wrong column count"));
        }
        let obs_id = ObsId(cols[0].trim().parse().map_err(|_| bad("bad obs_id"))?);
        let (rso_id, rest) = if blind {
            (None, &cols[1..])
        } else {
            let r: u64 = cols[1].trim().parse().map_err(|_| bad("bad rso_id"))?;
            (Some(RsoId(r)), &cols[2..])
        };
        let v = rest
            .iter()
            .map(|s| s.trim().parse::<f64>().map_err(|_| bad("bad number")))
            .collect::<Result<Vec<f64>>>()?;
        out.push(Observation {
            obs_id,
            rso_id,
            epoch: v[0],
            observer_pos: Vec3::new(v[1], v[2], v[3]),
            los: Vec3::new(v[4], v[5], v[6]),
            los_rate: Vec3::new(v[7], v[8], v[9]),
            streak_duration: v[10],
        });
    }
    Ok(out)
}

pub fn load_observations(path: &Path) -> Result<Vec<Observation>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_observations_csv(file)
}
