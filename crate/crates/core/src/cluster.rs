//! k-means++ clustering and exact k-nearest-neighbour queries.

use rand::Rng;

use crate::geom::Vec3;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding under the squared Euclidean metric.
///
/// Returns one label per point. Clusters that end up empty are dropped and
/// the remaining labels are renumbered densely in increasing order, so the
/// number of distinct labels may be smaller than `k`.
pub fn kmeans<R: Rng>(points: &[Vec<f64>], k: usize, iterations: usize, rng: &mut R) -> Vec<usize> {
    let n = points.len();
    if n == 0 || k == 0 {
        return vec![0; n];
    }
    let k = k.min(n);
    let dim = points[0].len();

    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(points[rng.random_range(0..n)].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut target = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if target < *d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        };
        centers.push(points[next].clone());
        let c = centers.last().unwrap();
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, c));
        }
    }

    let mut labels = vec![0usize; n];
    for _ in 0..iterations {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = (f64::INFINITY, 0);
            for (c, center) in centers.iter().enumerate() {
                let d = sq_dist(p, center);
                if d < best.0 {
                    best = (d, c);
                }
            }
            if labels[i] != best.1 {
                labels[i] = best.1;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }

    let mut remap = vec![usize::MAX; k];
    let mut used: Vec<usize> = labels.clone();
    used.sort_unstable();
    used.dedup();
    for (new, old) in used.into_iter().enumerate() {
        remap[old] = new;
    }
    labels.iter().map(|l| remap[*l]).collect()
}

/// Exact `k` nearest neighbours of every point (excluding itself), by a
/// sweep over points sorted along x. Neighbours are ordered by distance,
/// ties by index.
pub fn knn(points: &[Vec3], k: usize) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| points[a].x.total_cmp(&points[b].x).then(a.cmp(&b)));
    let mut rank = vec![0usize; n];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    let k = k.min(n.saturating_sub(1));
    let mut out = Vec::with_capacity(n);
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for i in 0..n {
        best.clear();
        let p = points[i];
        let r = rank[i];
        let push = |best: &mut Vec<(f64, usize)>, j: usize| {
            let d = (points[j] - p).norm_squared();
            if best.len() < k || (d, j) < best[best.len() - 1] {
                let pos = best.partition_point(|e| *e < (d, j));
                best.insert(pos, (d, j));
                if best.len() > k {
                    best.pop();
                }
            }
        };
        let (mut lo, mut hi) = (r, r + 1);
        loop {
            let bound = if best.len() < k { f64::INFINITY } else { best[best.len() - 1].0 };
            let left = (lo > 0).then(|| {
                let dx = p.x - points[order[lo - 1]].x;
                dx * dx
            });
            let right = (hi < n).then(|| {
                let dx = points[order[hi]].x - p.x;
                dx * dx
            });
            match (left, right) {
                (Some(l), Some(rr)) if l <= rr && l <= bound => {
                    lo -= 1;
                    push(&mut best, order[lo]);
                }
                (Some(l), None) if l <= bound => {
                    lo -= 1;
                    push(&mut best, order[lo]);
                }
                (_, Some(rr)) if rr <= bound => {
                    push(&mut best, order[hi]);
                    hi += 1;
                }
                _ => break,
            }
        }
        out.push(best.iter().map(|e| e.1).collect());
    }
    out
}
