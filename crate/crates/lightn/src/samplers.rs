//! Task-irrelevant baseline samplers (FPS, random, voxel) and the test-time
//! matching/completion procedures applied to generated points.
//!
//! All distance comparisons are on squared Euclidean distance; ties break to
//! the lowest index everywhere.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::cloud::{sq_dist, PointCloud, SampleIndices};
use crate::error::{Error, Result};

/// Greedy farthest point sampling starting from `start`.
pub fn fps(p: &PointCloud, m: usize, start: usize) -> Result<SampleIndices> {
    let n = p.len();
    if m < 1 || m > n {
        return Err(Error::Domain(format!("fps: m = {m} out of range for {n} points")));
    }
    if start >= n {
        return Err(Error::Domain(format!("fps: start index {start} out of range")));
    }
    let mut selected = Vec::with_capacity(m);
    let mut min_dist = vec![f64::INFINITY; n];
    let mut current = start;
    selected.push(current);
    for _ in 1..m {
        let cp = p.point(current);
        for i in 0..n {
            let d = sq_dist(p.point(i), cp);
            if d < min_dist[i] {
                min_dist[i] = d;
            }
        }
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            if selected.contains(&i) {
                continue;
            }
            if min_dist[i] > best_d {
                best_d = min_dist[i];
                best = i;
            }
        }
        selected.push(best);
        current = best;
    }
    SampleIndices::new(selected, n)
}

/// `m` distinct indices drawn without replacement from a seeded generator.
pub fn random_sample(p: &PointCloud, m: usize, seed: u64) -> Result<SampleIndices> {
    let n = p.len();
    if m < 1 || m > n {
        return Err(Error::Domain(format!("random_sample: m = {m} out of range for {n} points")));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..n).collect();
    // Partial Fisher-Yates: the first m entries are the sample.
    for i in 0..m {
        let j = rng.gen_range(i..n);
        indices.swap(i, j);
    }
    indices.truncate(m);
    SampleIndices::new(indices, n)
}

/// Voxel-grid downsampling to approximately `target_m` points.
///
/// Binary-searches the cubic voxel edge length for the occupancy count closest
/// to (and not above) `target_m`; each occupied voxel is represented by the
/// input point nearest its centroid; FPS over the remainder completes the set.
pub fn voxel_sample(p: &PointCloud, target_m: usize) -> Result<PointCloud> {
    let idx = voxel_sample_indices(p, target_m)?;
    Ok(p.select(&idx))
}

pub fn voxel_sample_indices(p: &PointCloud, target_m: usize) -> Result<SampleIndices> {
    let n = p.len();
    if target_m < 1 {
        return Err(Error::Domain("voxel_sample: target_m must be >= 1".into()));
    }
    let target_m = target_m.min(n);
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    for pt in p.points() {
        for a in 0..3 {
            min[a] = min[a].min(pt[a]);
            max[a] = max[a].max(pt[a]);
        }
    }
    let extent = (0..3).map(|a| max[a] - min[a]).fold(0.0f64, f64::max);

    let reps = if extent == 0.0 {
        // Degenerate cloud: one voxel regardless of edge.
        vec![0]
    } else {
        // Occupancy is (loosely) non-increasing in the edge length; binary
        // search for the smallest edge whose count is <= target_m.
        let mut lo = extent * 1e-9;
        let mut hi = extent * 2.0;
        for _ in 0..64 {
            let mid = 0.5 * (lo + hi);
            if count_voxels(p, min, mid) <= target_m {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        voxel_representatives(p, min, hi)
    };

    let selected = SampleIndices::new(reps, n)?;
    dedup_and_complete(&selected.as_slice().to_vec(), p, target_m)
}

fn voxel_key(pt: [f64; 3], min: [f64; 3], edge: f64) -> [i64; 3] {
    [
        ((pt[0] - min[0]) / edge).floor() as i64,
        ((pt[1] - min[1]) / edge).floor() as i64,
        ((pt[2] - min[2]) / edge).floor() as i64,
    ]
}

fn count_voxels(p: &PointCloud, min: [f64; 3], edge: f64) -> usize {
    let mut keys: Vec<[i64; 3]> = p.points().iter().map(|&pt| voxel_key(pt, min, edge)).collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

fn voxel_representatives(p: &PointCloud, min: [f64; 3], edge: f64) -> Vec<usize> {
    use std::collections::BTreeMap;
    // (key -> (best squared distance to centroid, index)); BTreeMap keeps the
    // output order deterministic.
    let mut best: BTreeMap<[i64; 3], (f64, usize)> = BTreeMap::new();
    for (i, &pt) in p.points().iter().enumerate() {
        let key = voxel_key(pt, min, edge);
        let centroid = [
            min[0] + (key[0] as f64 + 0.5) * edge,
            min[1] + (key[1] as f64 + 0.5) * edge,
            min[2] + (key[2] as f64 + 0.5) * edge,
        ];
        let d = sq_dist(pt, centroid);
        match best.get(&key) {
            Some(&(bd, _)) if bd <= d => {}
            _ => {
                best.insert(key, (d, i));
            }
        }
    }
    best.values().map(|&(_, i)| i).collect()
}

/// Map each generated point to the index of its nearest input point.
/// Duplicates are allowed at this stage.
pub fn nn_match(generated: &PointCloud, p: &PointCloud) -> Vec<usize> {
    generated
        .points()
        .iter()
        .map(|&g| {
            let mut best = 0;
            let mut best_d = p.sq_dist_to(0, g);
            for i in 1..p.len() {
                let d = p.sq_dist_to(i, g);
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Remove duplicates (first occurrence wins) and, if fewer than `m` indices
/// remain, complete with greedy farthest-point steps seeded from the
/// current selection.
pub fn dedup_and_complete(matched: &[usize], p: &PointCloud, m: usize) -> Result<SampleIndices> {
    let n = p.len();
    if m > n {
        return Err(Error::Domain(format!("dedup_and_complete: m = {m} exceeds {n} points")));
    }
    let mut seen = vec![false; n];
    let mut selected = Vec::with_capacity(m);
    for &i in matched {
        if i < n && !seen[i] {
            seen[i] = true;
            selected.push(i);
            if selected.len() == m {
                break;
            }
        }
    }
    if selected.is_empty() {
        return Err(Error::Domain("dedup_and_complete: no valid indices".into()));
    }
    // min squared distance of every point to the current selection
    let mut min_dist = vec![f64::INFINITY; n];
    for &s in &selected {
        for i in 0..n {
            let d = sq_dist(p.point(i), p.point(s));
            if d < min_dist[i] {
                min_dist[i] = d;
            }
        }
    }
    while selected.len() < m {
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            if !seen[i] && min_dist[i] > best_d {
                best_d = min_dist[i];
                best = i;
            }
        }
        seen[best] = true;
        selected.push(best);
        for i in 0..n {
            let d = sq_dist(p.point(i), p.point(best));
            if d < min_dist[i] {
                min_dist[i] = d;
            }
        }
    }
    SampleIndices::new(selected, n)
}
