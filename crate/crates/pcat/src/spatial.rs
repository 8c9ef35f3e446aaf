//! Geometric queries over raw point coordinates: farthest point sampling,
//! radius ball query with distance-sorted results, exact K-NN, and inverse
//! distance interpolation weights.
//!
//! All tie-breaks are by lowest index, and every query is a pure function,
//! so results are reproducible and safe to compute concurrently.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::float::Float;
use crate::tensor::Tensor;

/// Distance below which an interpolation target counts as coincident with a
/// neighbor (the inverse-distance weight singularity).
pub const IDW_EPSILON: f64 = 1e-10;

/// N points with 3D coordinates, optional per-point features, optional
/// per-point integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud<T> {
    coords: Vec<[T; 3]>,
    feats: Option<Tensor<T>>,
    labels: Option<Vec<u32>>,
}

impl<T: Float> PointCloud<T> {
    pub fn new(
        coords: Vec<[T; 3]>,
        feats: Option<Tensor<T>>,
        labels: Option<Vec<u32>>,
    ) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::invalid("point cloud must have at least one point"));
        }
        if coords.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("point cloud coordinates".into()));
        }
        if let Some(f) = &feats {
            if f.rank() != 2 || f.shape()[0] != coords.len() {
                return Err(Error::invalid(format!(
                    "feature matrix {:?} does not match {} points",
                    f.shape(),
                    coords.len()
                )));
            }
            if !f.is_finite() {
                return Err(Error::NonFinite("point cloud features".into()));
            }
        }
        if let Some(l) = &labels {
            if l.len() != coords.len() {
                return Err(Error::invalid(format!(
                    "{} labels for {} points",
                    l.len(),
                    coords.len()
                )));
            }
        }
        Ok(PointCloud {
            coords,
            feats,
            labels,
        })
    }

    pub fn from_coords(coords: Vec<[T; 3]>) -> Result<Self> {
        PointCloud::new(coords, None, None)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        false // invariant: N >= 1
    }

    pub fn coords(&self) -> &[[T; 3]] {
        &self.coords
    }

    pub fn feats(&self) -> Option<&Tensor<T>> {
        self.feats.as_ref()
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    /// Feature width excluding coordinates.
    pub fn feat_dim(&self) -> usize {
        self.feats.as_ref().map_or(0, |f| f.shape()[1])
    }

    pub fn with_labels(mut self, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != self.coords.len() {
            return Err(Error::invalid("label count mismatch"));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    /// Stable lexicographic order of the points by coordinates. Reordering
    /// a cloud into this order makes every downstream computation
    /// independent of the input permutation.
    pub fn canonical_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.coords.len()).collect();
        idx.sort_by(|&a, &b| {
            let pa = &self.coords[a];
            let pb = &self.coords[b];
            pa.partial_cmp(pb).expect("finite coords")
        });
        idx
    }

    /// Cloud reordered so that row `i` of the result is row `perm[i]` of
    /// `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.coords.len() {
            return Err(Error::invalid("permutation length mismatch"));
        }
        let coords = perm.iter().map(|&i| self.coords[i]).collect();
        let feats = match &self.feats {
            None => None,
            Some(f) => {
                let c = f.shape()[1];
                let mut data = Vec::with_capacity(f.numel());
                for &i in perm {
                    data.extend_from_slice(f.row(i));
                }
                Some(Tensor::new(vec![perm.len(), c], data)?)
            }
        };
        let labels = self
            .labels
            .as_ref()
            .map(|l| perm.iter().map(|&i| l[i]).collect());
        PointCloud::new(coords, feats, labels)
    }

    /// Translate every coordinate by a constant vector.
    pub fn translated(&self, t: [T; 3]) -> Self {
        let coords = self
            .coords
            .iter()
            .map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]])
            .collect();
        PointCloud {
            coords,
            feats: self.feats.clone(),
            labels: self.labels.clone(),
        }
    }
}

#[inline]
pub fn dist2<T: Float>(a: &[T; 3], b: &[T; 3]) -> T {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
pub fn dist<T: Float>(a: &[T; 3], b: &[T; 3]) -> T {
    dist2(a, b).sqrt()
}

/// Result of a spatial query: per-centroid neighbor index lists sorted
/// ascending by distance (ties by lowest index), with matching distances.
#[derive(Debug, Clone)]
pub struct NeighborIndex<T> {
    pub centroids: Vec<[T; 3]>,
    /// Indices into the source cloud when centroids were sampled from it.
    pub centroid_ids: Option<Vec<usize>>,
    pub neighbors: Vec<Vec<usize>>,
    pub distances: Vec<Vec<T>>,
}

/// Farthest point sampling. The seed picks the first centroid through a
/// deterministic PRNG; every following centroid maximizes the minimum
/// distance to the already-chosen set, ties by lowest index.
pub fn fps<T: Float>(cloud: &PointCloud<T>, m: usize, seed: u64) -> Result<Vec<usize>> {
    fps_coords(cloud.coords(), m, seed)
}

/// [`fps`] over a bare coordinate slice (token anchors are not clouds).
pub fn fps_coords<T: Float>(coords: &[[T; 3]], m: usize, seed: u64) -> Result<Vec<usize>> {
    let n = coords.len();
    if m == 0 || m > n {
        return Err(Error::invalid(format!(
            "fps: need 1 <= m <= {n}, got m = {m}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.gen_range(0..n);
    let mut chosen = Vec::with_capacity(m);
    let mut selected = vec![false; n];
    let mut min_d2: Vec<T> = coords.iter().map(|p| dist2(p, &coords[first])).collect();
    chosen.push(first);
    selected[first] = true;

    while chosen.len() < m {
        let mut best = usize::MAX;
        let mut best_d = T::neg_infinity();
        for (i, &d) in min_d2.iter().enumerate() {
            if !selected[i] && d > best_d {
                best = i;
                best_d = d;
            }
        }
        chosen.push(best);
        selected[best] = true;
        for (i, d) in min_d2.iter_mut().enumerate() {
            let nd = dist2(&coords[i], &coords[best]);
            if nd < *d {
                *d = nd;
            }
        }
    }
    Ok(chosen)
}

/// First index fps would select for this seed and cloud size. Exposed so an
/// independent oracle can share the seeding rule.
pub fn fps_first_index(n: usize, seed: u64) -> usize {
    ChaCha8Rng::seed_from_u64(seed).gen_range(0..n)
}

/// For each centroid, up to `cap` source points with distance ≤ `radius`,
/// sorted ascending by distance (ties by lowest index). A centroid with no
/// in-radius point yields an empty list.
pub fn ball_query_sorted<T: Float>(
    cloud: &PointCloud<T>,
    centroids: &[[T; 3]],
    radius: T,
    cap: usize,
) -> Result<NeighborIndex<T>> {
    ball_query_coords(cloud.coords(), centroids, radius, cap)
}

/// [`ball_query_sorted`] over a bare coordinate slice.
pub fn ball_query_coords<T: Float>(
    coords: &[[T; 3]],
    centroids: &[[T; 3]],
    radius: T,
    cap: usize,
) -> Result<NeighborIndex<T>> {
    if radius <= T::zero() || radius.is_nan() {
        return Err(Error::invalid(format!(
            "ball query radius must be > 0, got {radius}"
        )));
    }
    if cap == 0 {
        return Err(Error::invalid("ball query cap must be >= 1"));
    }
    let mut neighbors = Vec::with_capacity(centroids.len());
    let mut distances = Vec::with_capacity(centroids.len());
    for c in centroids {
        let mut hits: Vec<(T, usize)> = Vec::new();
        for (i, p) in coords.iter().enumerate() {
            let d = dist(p, c);
            if d <= radius {
                hits.push((d, i));
            }
        }
        hits.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        hits.truncate(cap);
        neighbors.push(hits.iter().map(|&(_, i)| i).collect());
        distances.push(hits.iter().map(|&(d, _)| d).collect());
    }
    Ok(NeighborIndex {
        centroids: centroids.to_vec(),
        centroid_ids: None,
        neighbors,
        distances,
    })
}

/// Exact k nearest source points per query, sorted ascending by distance,
/// ties by lowest index. Brute force; see [`knn_accel`] for the grid path.
pub fn knn<T: Float>(
    queries: &[[T; 3]],
    cloud: &PointCloud<T>,
    k: usize,
) -> Result<NeighborIndex<T>> {
    knn_coords(queries, cloud.coords(), k)
}

/// [`knn`] over a bare coordinate slice.
pub fn knn_coords<T: Float>(
    queries: &[[T; 3]],
    coords: &[[T; 3]],
    k: usize,
) -> Result<NeighborIndex<T>> {
    let n = coords.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!(
            "knn: need 1 <= k <= {n}, got k = {k}"
        )));
    }
    let mut neighbors = Vec::with_capacity(queries.len());
    let mut distances = Vec::with_capacity(queries.len());
    for q in queries {
        let mut all: Vec<(T, usize)> = coords
            .iter()
            .enumerate()
            .map(|(i, p)| (dist(p, q), i))
            .collect();
        all.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        all.truncate(k);
        neighbors.push(all.iter().map(|&(_, i)| i).collect());
        distances.push(all.iter().map(|&(d, _)| d).collect());
    }
    Ok(NeighborIndex {
        centroids: queries.to_vec(),
        centroid_ids: None,
        neighbors,
        distances,
    })
}

/// Exact K-NN through a uniform grid with expanding shells. Same contract
/// and identical results to [`knn`], subquadratic for large inputs.
pub fn knn_accel<T: Float>(
    queries: &[[T; 3]],
    cloud: &PointCloud<T>,
    k: usize,
) -> Result<NeighborIndex<T>> {
    knn_accel_coords(queries, cloud.coords(), k)
}

/// [`knn_accel`] over a bare coordinate slice.
pub fn knn_accel_coords<T: Float>(
    queries: &[[T; 3]],
    coords: &[[T; 3]],
    k: usize,
) -> Result<NeighborIndex<T>> {
    let n = coords.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!(
            "knn: need 1 <= k <= {n}, got k = {k}"
        )));
    }
    let grid = UniformGrid::build(coords);
    let mut neighbors = Vec::with_capacity(queries.len());
    let mut distances = Vec::with_capacity(queries.len());
    let mut scratch: Vec<(T, usize)> = Vec::new();
    for q in queries {
        grid.knn_into(coords, q, k, &mut scratch);
        neighbors.push(scratch.iter().map(|&(_, i)| i).collect());
        distances.push(scratch.iter().map(|&(d, _)| d).collect());
    }
    Ok(NeighborIndex {
        centroids: queries.to_vec(),
        centroid_ids: None,
        neighbors,
        distances,
    })
}

struct UniformGrid<T> {
    origin: [T; 3],
    cell: T,
    dims: [i64; 3],
    cells: std::collections::HashMap<[i64; 3], Vec<usize>>,
}

impl<T: Float> UniformGrid<T> {
    fn build(coords: &[[T; 3]]) -> Self {
        let mut lo = coords[0];
        let mut hi = coords[0];
        for p in coords {
            for d in 0..3 {
                if p[d] < lo[d] {
                    lo[d] = p[d];
                }
                if p[d] > hi[d] {
                    hi[d] = p[d];
                }
            }
        }
        let extent = (0..3)
            .map(|d| hi[d] - lo[d])
            .fold(T::zero(), |a, b| if b > a { b } else { a });
        // Aim for ~1 point per cell along the longest axis.
        let per_axis = (coords.len() as f64).cbrt().ceil().max(1.0);
        let cell = if extent > T::zero() {
            extent / T::of(per_axis)
        } else {
            T::one()
        };
        let mut dims = [1i64; 3];
        let mut cells: std::collections::HashMap<[i64; 3], Vec<usize>> =
            std::collections::HashMap::new();
        for (i, p) in coords.iter().enumerate() {
            let key = Self::key(&lo, cell, p);
            for d in 0..3 {
                dims[d] = dims[d].max(key[d] + 1);
            }
            cells.entry(key).or_default().push(i);
        }
        UniformGrid {
            origin: lo,
            cell,
            dims,
            cells,
        }
    }

    /// Cell key for grid construction; source points sit inside the bounds
    /// so fp noise is the only reason a component could go negative.
    fn key(origin: &[T; 3], cell: T, p: &[T; 3]) -> [i64; 3] {
        let raw = Self::key_raw(origin, cell, p);
        [raw[0].max(0), raw[1].max(0), raw[2].max(0)]
    }

    /// Unclamped cell key; queries may fall anywhere relative to the grid.
    fn key_raw(origin: &[T; 3], cell: T, p: &[T; 3]) -> [i64; 3] {
        let mut k = [0i64; 3];
        for d in 0..3 {
            k[d] = ((p[d] - origin[d]) / cell).floor().as_f64() as i64;
        }
        k
    }

    /// Collect candidates shell by shell until the kth best distance is
    /// strictly inside the scanned region, then sort by (distance, index).
    fn knn_into(&self, coords: &[[T; 3]], q: &[T; 3], k: usize, out: &mut Vec<(T, usize)>) {
        out.clear();
        let qk = Self::key_raw(&self.origin, self.cell, q);
        // Enough rings to reach every occupied cell from the query's cell,
        // wherever the query lies.
        let max_ring = (0..3)
            .map(|d| qk[d].abs().max((self.dims[d] - 1 - qk[d]).abs()))
            .max()
            .expect("3 dims")
            + 1;
        let mut cands: Vec<(T, usize)> = Vec::new();
        for r in 0..=max_ring {
            self.scan_ring(coords, q, &qk, r, &mut cands);
            if cands.len() >= k {
                // kth smallest distance so far
                let mut ds: Vec<T> = cands.iter().map(|&(d, _)| d).collect();
                ds.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
                let dk = ds[k - 1];
                // Unscanned cells are at Chebyshev ring > r, hence at
                // distance >= r * cell from anywhere in the query cell.
                if dk < T::of_usize(r as usize) * self.cell {
                    break;
                }
            }
        }
        cands.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        cands.truncate(k);
        out.extend_from_slice(&cands);
    }

    fn scan_ring(
        &self,
        coords: &[[T; 3]],
        q: &[T; 3],
        center: &[i64; 3],
        r: i64,
        cands: &mut Vec<(T, usize)>,
    ) {
        let (cx, cy, cz) = (center[0], center[1], center[2]);
        for dx in -r..=r {
            for dy in -r..=r {
                for dz in -r..=r {
                    if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                        continue;
                    }
                    if let Some(ids) = self.cells.get(&[cx + dx, cy + dy, cz + dz]) {
                        for &i in ids {
                            cands.push((dist(&coords[i], q), i));
                        }
                    }
                }
            }
        }
    }
}

/// Inverse-distance-squared weights over the first `k` neighbor distances,
/// normalized to sum 1. If any distance falls below [`IDW_EPSILON`] the
/// result is one-hot on the nearest such neighbor.
pub fn idw_weights<T: Float>(dists: &[T], k: usize) -> Result<Vec<T>> {
    if k == 0 || k > dists.len() {
        return Err(Error::invalid(format!(
            "idw_weights: need 1 <= k <= {}, got k = {k}",
            dists.len()
        )));
    }
    let eps = T::of(IDW_EPSILON);
    let dists = &dists[..k];
    // Coincident hit: one-hot on the nearest of them.
    let mut hit: Option<(usize, T)> = None;
    for (i, &d) in dists.iter().enumerate() {
        if d < eps {
            match hit {
                Some((_, best)) if d >= best => {}
                _ => hit = Some((i, d)),
            }
        }
    }
    if let Some((i, _)) = hit {
        let mut w = vec![T::zero(); k];
        w[i] = T::one();
        return Ok(w);
    }
    let raw: Vec<T> = dists.iter().map(|&d| (d * d).recip()).collect();
    let sum: T = raw.iter().copied().sum();
    Ok(raw.into_iter().map(|w| w / sum).collect())
}
