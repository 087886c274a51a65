//! Observation preprocessing for the interpolate-then-assimilate baseline.

use crate::error::{invalid, Result};
use crate::grid::{LatLonGrid, ObservationSet};

/// Averages the observations falling in each cell of `grid`. Cells with at least one
/// present value for a channel become one observation at the cell centre; the result is an
/// on-grid set at the grid's resolution. Points are binned by the cell edges, half-open
/// towards increasing coordinates, with the last row and column closed.
pub fn aggregate_to_grid(obs: &ObservationSet, grid: &LatLonGrid) -> Result<ObservationSet> {
    let domain = grid.domain();
    let c = obs.n_channels();
    let (h, w) = grid.shape();
    let mut sum = vec![0.0; h * w * c];
    let mut count = vec![0u32; h * w * c];
    let lat_lo = domain.lat_min;
    let dlat = grid.dlat().abs();
    let flip = grid.dlat() < 0.0;
    for (k, &(lat, lon)) in obs.coords().iter().enumerate() {
        if !domain.contains(lat, lon) {
            return Err(invalid(format!("observation {k} at ({lat}, {lon}) lies outside the grid domain")));
        }
        let mut i = (((lat - lat_lo) / dlat).floor().max(0.0) as usize).min(h - 1);
        if flip {
            i = h - 1 - i;
        }
        let lon = if domain.periodic_lon() { domain.wrap_lon(lon) } else { lon };
        let j = (((lon - domain.lon_min) / grid.dlon()).floor().max(0.0) as usize).min(w - 1);
        for ch in 0..c {
            if let Some(v) = obs.value(k, ch) {
                sum[(i * w + j) * c + ch] += v;
                count[(i * w + j) * c + ch] += 1;
            }
        }
    }
    let mut coords = Vec::new();
    let mut values = Vec::new();
    let mut mask = Vec::new();
    for i in 0..h {
        for j in 0..w {
            let cell = (i * w + j) * c;
            if count[cell..cell + c].iter().all(|&n| n == 0) {
                continue;
            }
            coords.push((grid.latitude(i), grid.longitude(j)));
            for ch in 0..c {
                let n = count[cell + ch];
                mask.push(n > 0);
                values.push(if n > 0 { sum[cell + ch] / n as f64 } else { 0.0 });
            }
        }
    }
    ObservationSet::new(coords, c, values, mask, grid.resolution())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn points_in_one_cell_are_averaged() {
        let grid = LatLonGrid::global(2, 4).unwrap();
        let obs =
            ObservationSet::new(vec![(10.0, 10.0), (80.0, 80.0), (-45.0, 200.0)], 1, vec![1.0, 3.0, 5.0], vec![true; 3], 1.0)
                .unwrap();
        let agg = aggregate_to_grid(&obs, &grid).unwrap();
        assert_eq!(agg.len(), 2);
        assert_eq!(agg.coords()[0], (-45.0, 225.0));
        assert_eq!(agg.value(0, 0), Some(5.0));
        assert_eq!(agg.coords()[1], (45.0, 45.0));
        assert_eq!(agg.value(1, 0), Some(2.0));
    }

    #[test]
    fn masked_entries_are_skipped() {
        let grid = LatLonGrid::global(1, 1).unwrap();
        let obs = ObservationSet::new(vec![(0.0, 1.0), (0.0, 2.0)], 2, vec![1.0, 7.0, 3.0, 0.0], vec![true, true, true, false], 1.0)
            .unwrap();
        let agg = aggregate_to_grid(&obs, &grid).unwrap();
        assert_eq!(agg.value(0, 0), Some(2.0));
        assert_eq!(agg.value(0, 1), Some(7.0));
    }
}
