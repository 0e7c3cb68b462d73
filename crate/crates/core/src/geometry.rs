//! Keypoint sampling and neighborhood grouping.
//!
//! All queries are exact brute-force scans with index-based tie breaking, so
//! results are deterministic functions of the input order.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Indices chosen by furthest-point sampling, in selection order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeypointSelection {
    pub indices: Vec<usize>,
    pub source_size: usize,
}

/// Fixed-width neighbor table: row `i` holds `width` indices for center `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupTable {
    indices: Vec<usize>,
    counts: Vec<usize>,
    width: usize,
}

impl GroupTable {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn rows(&self) -> usize {
        self.counts.len()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.width..(i + 1) * self.width]
    }

    /// Number of genuine (non-padding) neighbors found for center `i`.
    pub fn count(&self, i: usize) -> usize {
        self.counts[i]
    }

    /// All rows concatenated.
    pub fn flat(&self) -> &[usize] {
        &self.indices
    }
}

fn dist2(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    (a - b).norm_squared()
}

/// Greedy max-min sampling starting from `start_index`; ties go to the lowest index.
pub fn fps(points: &[Vector3<f64>], n_key: usize, start_index: usize) -> Result<KeypointSelection> {
    let n = points.len();
    if n == 0 {
        return Err(Error::invalid("furthest-point sampling on an empty cloud"));
    }
    if start_index >= n {
        return Err(Error::invalid(format!(
            "start index {start_index} out of range for {n} points"
        )));
    }
    let k = n_key.min(n);
    let mut indices = Vec::with_capacity(k);
    let mut min_d = vec![f64::INFINITY; n];
    let mut chosen = vec![false; n];
    let mut current = start_index;
    for _ in 0..k {
        indices.push(current);
        chosen[current] = true;
        let c = points[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            let d = dist2(p, &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if !chosen[i] && min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        if best == usize::MAX {
            break;
        }
        current = best;
    }
    Ok(KeypointSelection {
        indices,
        source_size: n,
    })
}

/// Up to `max_samples` in-radius neighbors per center in ascending index order.
/// Short rows are padded with their first neighbor; a center with no neighbor in
/// range gets its nearest point in every slot and a count of zero.
pub fn ball_query(
    centers: &[Vector3<f64>],
    points: &[Vector3<f64>],
    radius: f64,
    max_samples: usize,
) -> Result<GroupTable> {
    if points.is_empty() {
        return Err(Error::invalid("ball query on an empty cloud"));
    }
    if !(radius > 0.0) || max_samples == 0 {
        return Err(Error::invalid(
            "ball query needs radius > 0 and max_samples >= 1",
        ));
    }
    let r2 = radius * radius;
    let rows: Vec<(Vec<usize>, usize)> = centers
        .par_iter()
        .map(|c| {
            let mut row = Vec::with_capacity(max_samples);
            for (i, p) in points.iter().enumerate() {
                if dist2(p, c) <= r2 {
                    row.push(i);
                    if row.len() == max_samples {
                        break;
                    }
                }
            }
            let count = row.len();
            let fill = match row.first() {
                Some(&first) => first,
                None => nearest_index(c, points),
            };
            row.resize(max_samples, fill);
            (row, count)
        })
        .collect();
    let mut indices = Vec::with_capacity(centers.len() * max_samples);
    let mut counts = Vec::with_capacity(centers.len());
    for (row, count) in rows {
        indices.extend(row);
        counts.push(count);
    }
    Ok(GroupTable {
        indices,
        counts,
        width: max_samples,
    })
}

fn nearest_index(c: &Vector3<f64>, points: &[Vector3<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, p) in points.iter().enumerate() {
        let d = dist2(p, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// The `k` nearest points per query, ordered by (distance, index).
pub fn knn(queries: &[Vector3<f64>], points: &[Vector3<f64>], k: usize) -> Result<GroupTable> {
    if k == 0 {
        return Err(Error::invalid("knn needs k >= 1"));
    }
    if points.len() < k {
        return Err(Error::invalid(format!(
            "knn with k = {k} on a cloud of {} points",
            points.len()
        )));
    }
    let rows: Vec<Vec<usize>> = queries
        .par_iter()
        .map(|q| {
            // Bounded insertion into a sorted list of (d2, index).
            let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
            for (i, p) in points.iter().enumerate() {
                let d = dist2(p, q);
                if best.len() == k && d >= best[k - 1].0 {
                    continue;
                }
                let pos = best.partition_point(|&(bd, _)| bd <= d);
                best.insert(pos, (d, i));
                best.truncate(k);
            }
            best.into_iter().map(|(_, i)| i).collect()
        })
        .collect();
    Ok(GroupTable {
        indices: rows.concat(),
        counts: vec![k; queries.len()],
        width: k,
    })
}
