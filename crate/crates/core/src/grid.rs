//! Equiangular latitude/longitude grids, gridded fields and sparse observation sets.
//!
//! Grids are cell-centred: a global grid of `n_lat` rows has its first latitude centre at
//! `-90 + Δ/2` and its last at `90 - Δ/2`, so no row sits on a pole and every
//! `cos(latitude)` weight is strictly positive. Longitude is periodic whenever the grid
//! spans the full 360°.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, FnpError, Result};
use crate::interp::BilinearPlan;

/// Coordinate tolerance used for domain membership and grid comparisons, in degrees.
pub const COORD_TOL: f64 = 1e-9;

/// Rectangular lat/lon extents given by the cell edges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl Domain {
    pub fn global() -> Self {
        Domain { lat_min: -90.0, lat_max: 90.0, lon_min: 0.0, lon_max: 360.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.lat_min, self.lat_max, self.lon_min, self.lon_max].iter().all(|v| v.is_finite());
        if !finite {
            return Err(invalid("domain extents must be finite"));
        }
        if self.lat_min >= self.lat_max || self.lon_min >= self.lon_max {
            return Err(invalid(format!("inverted domain extents {self:?}")));
        }
        if self.lat_min < -90.0 - COORD_TOL || self.lat_max > 90.0 + COORD_TOL {
            return Err(invalid("latitude extents must lie within [-90, 90]"));
        }
        if self.lon_max - self.lon_min > 360.0 + COORD_TOL {
            return Err(invalid("longitude extent exceeds 360 degrees"));
        }
        if self.lon_min < -180.0 - COORD_TOL || self.lon_max > 360.0 + COORD_TOL {
            return Err(invalid("longitudes must use [0, 360) or [-180, 180)"));
        }
        Ok(())
    }

    pub fn periodic_lon(&self) -> bool {
        (self.lon_max - self.lon_min - 360.0).abs() < COORD_TOL
    }

    pub fn lat_extent(&self) -> f64 {
        self.lat_max - self.lat_min
    }

    pub fn lon_extent(&self) -> f64 {
        self.lon_max - self.lon_min
    }

    pub fn approx_eq(&self, other: &Domain) -> bool {
        (self.lat_min - other.lat_min).abs() < COORD_TOL
            && (self.lat_max - other.lat_max).abs() < COORD_TOL
            && (self.lon_min - other.lon_min).abs() < COORD_TOL
            && (self.lon_max - other.lon_max).abs() < COORD_TOL
    }

    /// Wraps a longitude into the domain's range when the domain is periodic.
    pub fn wrap_lon(&self, lon: f64) -> f64 {
        if self.periodic_lon() {
            let w = (lon - self.lon_min).rem_euclid(360.0);
            // rem_euclid can return exactly 360 for tiny negative inputs
            let w = if w >= 360.0 { 0.0 } else { w };
            self.lon_min + w
        } else {
            lon
        }
    }

    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        let lon = self.wrap_lon(lon);
        lat >= self.lat_min - COORD_TOL
            && lat <= self.lat_max + COORD_TOL
            && lon >= self.lon_min - COORD_TOL
            && lon <= self.lon_max + COORD_TOL
    }
}

/// Uniform cell-centred latitude/longitude grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatLonGrid {
    n_lat: usize,
    n_lon: usize,
    lat0: f64,
    dlat: f64,
    lon0: f64,
    dlon: f64,
}

/// Builds a cell-centred grid of `n_lat × n_lon` cells covering `domain`.
pub fn make_equiangular_grid(n_lat: usize, n_lon: usize, domain: Domain) -> Result<LatLonGrid> {
    if n_lat == 0 || n_lon == 0 {
        return Err(invalid(format!("grid sizes must be positive, got {n_lat}x{n_lon}")));
    }
    domain.validate()?;
    let dlat = domain.lat_extent() / n_lat as f64;
    let dlon = domain.lon_extent() / n_lon as f64;
    Ok(LatLonGrid {
        n_lat,
        n_lon,
        lat0: domain.lat_min + 0.5 * dlat,
        dlat,
        lon0: domain.lon_min + 0.5 * dlon,
        dlon,
    })
}

impl LatLonGrid {
    /// Global cell-centred grid.
    pub fn global(n_lat: usize, n_lon: usize) -> Result<Self> {
        make_equiangular_grid(n_lat, n_lon, Domain::global())
    }

    /// Global grid at the given spacing in degrees (rounded to whole cells).
    pub fn global_at_resolution(resolution_deg: f64) -> Result<Self> {
        Self::at_resolution(Domain::global(), resolution_deg)
    }

    pub fn at_resolution(domain: Domain, resolution_deg: f64) -> Result<Self> {
        if !(resolution_deg > 0.0) || !resolution_deg.is_finite() {
            return Err(invalid(format!("resolution must be positive, got {resolution_deg}")));
        }
        let n_lat = (domain.lat_extent() / resolution_deg).round().max(1.0) as usize;
        let n_lon = (domain.lon_extent() / resolution_deg).round().max(1.0) as usize;
        make_equiangular_grid(n_lat, n_lon, domain)
    }

    /// Rebuilds a grid from its first centres and spacings, as stored in file headers.
    pub fn from_header(n_lat: usize, n_lon: usize, lat0: f64, dlat: f64, lon0: f64, dlon: f64) -> Result<Self> {
        if n_lat == 0 || n_lon == 0 {
            return Err(FnpError::BadHeader(format!("grid sizes must be positive, got {n_lat}x{n_lon}")));
        }
        if ![lat0, dlat, lon0, dlon].iter().all(|v| v.is_finite()) || dlat == 0.0 || dlon <= 0.0 {
            return Err(FnpError::BadHeader("grid origin/spacing must be finite and non-zero".into()));
        }
        let grid = LatLonGrid { n_lat, n_lon, lat0, dlat, lon0, dlon };
        grid.domain().validate().map_err(|e| FnpError::BadHeader(e.to_string()))?;
        Ok(grid)
    }

    pub fn n_lat(&self) -> usize {
        self.n_lat
    }

    pub fn n_lon(&self) -> usize {
        self.n_lon
    }

    pub fn len(&self) -> usize {
        self.n_lat * self.n_lon
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_lat, self.n_lon)
    }

    pub fn lat0(&self) -> f64 {
        self.lat0
    }

    /// Signed latitude spacing; negative for north-to-south grids.
    pub fn dlat(&self) -> f64 {
        self.dlat
    }

    pub fn lon0(&self) -> f64 {
        self.lon0
    }

    pub fn dlon(&self) -> f64 {
        self.dlon
    }

    pub fn latitude(&self, i: usize) -> f64 {
        self.lat0 + i as f64 * self.dlat
    }

    pub fn longitude(&self, j: usize) -> f64 {
        self.lon0 + j as f64 * self.dlon
    }

    pub fn latitudes(&self) -> Vec<f64> {
        (0..self.n_lat).map(|i| self.latitude(i)).collect()
    }

    pub fn longitudes(&self) -> Vec<f64> {
        (0..self.n_lon).map(|j| self.longitude(j)).collect()
    }

    /// Domain spanned by the cell edges.
    pub fn domain(&self) -> Domain {
        let half_lat = 0.5 * self.dlat.abs();
        let lat_first = self.lat0;
        let lat_last = self.latitude(self.n_lat - 1);
        Domain {
            lat_min: lat_first.min(lat_last) - half_lat,
            lat_max: lat_first.max(lat_last) + half_lat,
            lon_min: self.lon0 - 0.5 * self.dlon,
            lon_max: self.longitude(self.n_lon - 1) + 0.5 * self.dlon,
        }
    }

    pub fn periodic_lon(&self) -> bool {
        self.domain().periodic_lon()
    }

    pub fn approx_eq(&self, other: &LatLonGrid) -> bool {
        self.n_lat == other.n_lat
            && self.n_lon == other.n_lon
            && (self.lat0 - other.lat0).abs() < COORD_TOL
            && (self.dlat - other.dlat).abs() < COORD_TOL
            && (self.lon0 - other.lon0).abs() < COORD_TOL
            && (self.dlon - other.dlon).abs() < COORD_TOL
    }

    /// Coordinates of every grid point in row-major order.
    pub fn points(&self) -> Vec<(f64, f64)> {
        let mut pts = Vec::with_capacity(self.len());
        for i in 0..self.n_lat {
            let lat = self.latitude(i);
            for j in 0..self.n_lon {
                pts.push((lat, self.longitude(j)));
            }
        }
        pts
    }

    /// Mean spacing in degrees, used as the nominal resolution.
    pub fn resolution(&self) -> f64 {
        0.5 * (self.dlat.abs() + self.dlon)
    }

    pub fn normalized_spacing(&self) -> (f64, f64) {
        let d = self.domain();
        (2.0 * self.dlat.abs() / d.lat_extent(), 2.0 * self.dlon / d.lon_extent())
    }
}

/// Name and variable-group assignment of one field channel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelMeta {
    pub name: String,
    pub group: u32,
}

impl ChannelMeta {
    pub fn new(name: impl Into<String>, group: u32) -> Self {
        ChannelMeta { name: name.into(), group }
    }
}

/// Distinct group ids in first-appearance order, with the channel indices in each group.
pub fn channel_groups(channels: &[ChannelMeta]) -> Vec<(u32, Vec<usize>)> {
    let mut groups: Vec<(u32, Vec<usize>)> = Vec::new();
    for (c, meta) in channels.iter().enumerate() {
        match groups.iter_mut().find(|(g, _)| *g == meta.group) {
            Some((_, members)) => members.push(c),
            None => groups.push((meta.group, vec![c])),
        }
    }
    groups
}

/// Multi-channel values on a grid, stored channel-major then row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field {
    grid: LatLonGrid,
    channels: Vec<ChannelMeta>,
    values: Vec<f64>,
}

impl Field {
    pub fn new(grid: LatLonGrid, channels: Vec<ChannelMeta>, values: Vec<f64>) -> Result<Self> {
        if channels.is_empty() {
            return Err(invalid("a field needs at least one channel"));
        }
        let expected = channels.len() * grid.len();
        if values.len() != expected {
            return Err(shape(format!("field payload has {} values, expected {expected}", values.len())));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(FnpError::NonFinite(format!("field value at flat index {pos}")));
        }
        Ok(Field { grid, channels, values })
    }

    pub fn zeros(grid: LatLonGrid, channels: Vec<ChannelMeta>) -> Self {
        let n = grid.len() * channels.len();
        Field { grid, channels, values: vec![0.0; n] }
    }

    pub fn grid(&self) -> &LatLonGrid {
        &self.grid
    }

    pub fn channels(&self) -> &[ChannelMeta] {
        &self.channels
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.grid.len();
        &self.values[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.grid.len();
        &mut self.values[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.values[(c * self.grid.n_lat() + i) * self.grid.n_lon() + j]
    }

    /// Replaces the payload, keeping grid and channel metadata.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Field::new(self.grid.clone(), self.channels.clone(), values)
    }

    /// Rounds every value to single precision, the on-disk payload type.
    pub fn quantized_f32(&self) -> Self {
        let values = self.values.iter().map(|&v| v as f32 as f64).collect();
        Field { grid: self.grid.clone(), channels: self.channels.clone(), values }
    }

    pub fn same_layout(&self, other: &Field) -> bool {
        self.grid.approx_eq(&other.grid) && self.channels.len() == other.channels.len()
    }

    /// Bilinear resampling of every channel onto another grid covering the same domain.
    pub fn resample_to(&self, target: &LatLonGrid) -> Result<Field> {
        if self.grid.approx_eq(target) {
            return Ok(self.clone());
        }
        let plan = BilinearPlan::new(&self.grid, &target.points())?;
        let values = plan.apply(&self.values, self.n_channels());
        Field::new(target.clone(), self.channels.clone(), values)
    }
}

/// Sparse per-point, per-channel observations at arbitrary coordinates.
///
/// Entries whose mask bit is false hold [`MASKED_SENTINEL`] and must never be read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    coords: Vec<(f64, f64)>,
    n_channels: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
    source_resolution: f64,
}

/// Placeholder stored in masked-out observation slots.
pub const MASKED_SENTINEL: f64 = f64::NAN;

impl ObservationSet {
    pub fn new(
        coords: Vec<(f64, f64)>,
        n_channels: usize,
        values: Vec<f64>,
        mask: Vec<bool>,
        source_resolution: f64,
    ) -> Result<Self> {
        let n = coords.len();
        if values.len() != n * n_channels || mask.len() != n * n_channels {
            return Err(shape(format!(
                "observation arrays must hold {n}x{n_channels} entries (values {}, mask {})",
                values.len(),
                mask.len()
            )));
        }
        if !(source_resolution > 0.0) || !source_resolution.is_finite() {
            return Err(invalid("observation source resolution must be positive"));
        }
        for (k, &(lat, lon)) in coords.iter().enumerate() {
            if !lat.is_finite() || !lon.is_finite() {
                return Err(FnpError::NonFinite(format!("observation coordinate {k}")));
            }
        }
        let mut values = values;
        for (v, &m) in values.iter_mut().zip(&mask) {
            if m {
                if !v.is_finite() {
                    return Err(FnpError::NonFinite("observed value".into()));
                }
            } else {
                *v = MASKED_SENTINEL;
            }
        }
        Ok(ObservationSet { coords, n_channels, values, mask, source_resolution })
    }

    pub fn empty(n_channels: usize, source_resolution: f64) -> Self {
        ObservationSet { coords: Vec::new(), n_channels, values: Vec::new(), mask: Vec::new(), source_resolution }
    }

    /// Every point of a field, fully observed.
    pub fn from_field(field: &Field) -> Self {
        let grid = field.grid();
        let c = field.n_channels();
        let coords = grid.points();
        let mut values = vec![0.0; coords.len() * c];
        for k in 0..coords.len() {
            for ch in 0..c {
                values[k * c + ch] = field.channel(ch)[k];
            }
        }
        let mask = vec![true; values.len()];
        ObservationSet { coords, n_channels: c, values, mask, source_resolution: grid.resolution() }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn coords(&self) -> &[(f64, f64)] {
        &self.coords
    }

    /// Raw value slots, including sentinels; pair with [`Self::mask`].
    pub fn raw_values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn source_resolution(&self) -> f64 {
        self.source_resolution
    }

    /// Value of `channel` at point `k`, or `None` when masked out.
    pub fn value(&self, k: usize, channel: usize) -> Option<f64> {
        let idx = k * self.n_channels + channel;
        if self.mask[idx] {
            Some(self.values[idx])
        } else {
            None
        }
    }

    /// Reference grid at the observation source resolution over `domain`.
    pub fn reference_grid(&self, domain: Domain) -> Result<LatLonGrid> {
        LatLonGrid::at_resolution(domain, self.source_resolution)
    }

    /// Reorders points; used by permutation-invariance checks.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.len() {
            return Err(shape("permutation length differs from point count"));
        }
        let c = self.n_channels;
        let mut coords = Vec::with_capacity(order.len());
        let mut values = Vec::with_capacity(self.values.len());
        let mut mask = Vec::with_capacity(self.mask.len());
        for &k in order {
            coords.push(self.coords[k]);
            values.extend_from_slice(&self.values[k * c..(k + 1) * c]);
            mask.extend_from_slice(&self.mask[k * c..(k + 1) * c]);
        }
        Ok(ObservationSet { coords, n_channels: c, values, mask, source_resolution: self.source_resolution })
    }

    /// Applies a per-channel affine transform `(v - offset[c]) / scale[c]` to present entries.
    pub fn standardized(&self, offset: &[f64], scale: &[f64]) -> Self {
        let c = self.n_channels;
        let mut out = self.clone();
        for (idx, v) in out.values.iter_mut().enumerate() {
            if self.mask[idx] {
                let ch = idx % c;
                *v = (*v - offset[ch]) / scale[ch];
            }
        }
        out
    }
}

/// Per-point normalised coordinates in `[-1, 1]²`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedCoords {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub periodic_lon: bool,
}

impl NormalizedCoords {
    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }
}

/// Affine map of each axis of the grid domain onto `[-1, 1]`.
pub fn normalize_coords(points: &[(f64, f64)], grid: &LatLonGrid) -> Result<NormalizedCoords> {
    normalize_in_domain(points, &grid.domain())
}

pub fn normalize_in_domain(points: &[(f64, f64)], domain: &Domain) -> Result<NormalizedCoords> {
    let mut u = Vec::with_capacity(points.len());
    let mut v = Vec::with_capacity(points.len());
    for &(lat, lon) in points {
        if !domain.contains(lat, lon) {
            return Err(FnpError::OutOfDomain { lat, lon });
        }
        let lon = domain.wrap_lon(lon);
        let uu = 2.0 * (lat - domain.lat_min) / domain.lat_extent() - 1.0;
        let vv = 2.0 * (lon - domain.lon_min) / domain.lon_extent() - 1.0;
        u.push(uu.clamp(-1.0, 1.0));
        v.push(vv.clamp(-1.0, 1.0));
    }
    Ok(NormalizedCoords { u, v, periodic_lon: domain.periodic_lon() })
}

/// Inverse of [`normalize_in_domain`].
pub fn denormalize(coords: &NormalizedCoords, domain: &Domain) -> Vec<(f64, f64)> {
    coords
        .u
        .iter()
        .zip(&coords.v)
        .map(|(&u, &v)| {
            (domain.lat_min + 0.5 * (u + 1.0) * domain.lat_extent(), domain.lon_min + 0.5 * (v + 1.0) * domain.lon_extent())
        })
        .collect()
}

/// Number of points drawn for an observation ratio; the small slack absorbs products such
/// as `0.29 * 100` landing just below an integer.
pub fn observation_count(ratio: f64, n_points: usize) -> usize {
    ((ratio * n_points as f64) + 1e-9).floor() as usize
}

/// Draws `floor(ratio · H · W)` distinct points of `obs_grid` with a seeded shuffle and reads
/// their values from `truth` by bilinear resampling. All channels are observed at each point.
pub fn sample_observations(truth: &Field, obs_grid: &LatLonGrid, ratio: f64, seed: u64) -> Result<ObservationSet> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(invalid(format!("observation ratio must lie in [0, 1], got {ratio}")));
    }
    if !truth.grid().domain().approx_eq(&obs_grid.domain()) {
        return Err(invalid("observation grid must cover the truth grid's domain"));
    }
    let total = obs_grid.len();
    let count = observation_count(ratio, total);
    let c = truth.n_channels();
    if count == 0 {
        return Ok(ObservationSet::empty(c, obs_grid.resolution()));
    }
    let mut order: Vec<usize> = (0..total).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut chosen = order[..count].to_vec();
    chosen.sort_unstable();

    let n_lon = obs_grid.n_lon();
    let coords: Vec<(f64, f64)> =
        chosen.iter().map(|&k| (obs_grid.latitude(k / n_lon), obs_grid.longitude(k % n_lon))).collect();
    let plan = BilinearPlan::new(truth.grid(), &coords)?;
    let sampled = plan.apply(truth.values(), c);
    let mut values = vec![0.0; count * c];
    for ch in 0..c {
        for k in 0..count {
            values[k * c + ch] = sampled[ch * count + k];
        }
    }
    let mask = vec![true; count * c];
    ObservationSet::new(coords, c, values, mask, obs_grid.resolution())
}
