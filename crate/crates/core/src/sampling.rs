//! Point subsampling strategies.
//!
//! Every sampler returns exactly `k` indices. When `k` exceeds the number of
//! source points, all points are taken first and the list is padded by
//! repeating it round-robin; [`SampleSelection::padded`] records this.
//! Ties are always broken by the lowest index.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::geometry::Point3;
use crate::numeric::{Matrix, Real};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SamplerKind {
    Random,
    Dfps,
    Ffps,
    Ras,
    Hybrid,
}

impl SamplerKind {
    pub const ALL: [SamplerKind; 5] = [
        SamplerKind::Random,
        SamplerKind::Dfps,
        SamplerKind::Ffps,
        SamplerKind::Ras,
        SamplerKind::Hybrid,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SamplerKind::Random => "random",
            SamplerKind::Dfps => "dfps",
            SamplerKind::Ffps => "ffps",
            SamplerKind::Ras => "ras",
            SamplerKind::Hybrid => "hybrid",
        }
    }

    /// Whether the sampler needs a second (template) feature set.
    pub fn is_relational(self) -> bool {
        matches!(self, SamplerKind::Ras | SamplerKind::Hybrid)
    }
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SamplerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SamplerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown sampler `{s}` (random|dfps|ffps|ras|hybrid)")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleSelection {
    pub indices: Vec<usize>,
    pub method: SamplerKind,
    pub padded: bool,
}

impl SampleSelection {
    /// Truncates or round-robin pads `order` (which must list distinct
    /// indices) to length `k`.
    fn finish(mut order: Vec<usize>, k: usize, method: SamplerKind) -> Self {
        let padded = k > order.len();
        if padded {
            let n = order.len();
            for i in n..k {
                order.push(order[i % n]);
            }
        } else {
            order.truncate(k);
        }
        SampleSelection {
            indices: order,
            method,
            padded,
        }
    }
}

/// `k` distinct uniform indices out of `n`.
pub fn sample_random<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> SampleSelection {
    assert!(n >= 1, "sample_random needs at least one point");
    let order = rand::seq::index::sample(rng, n, k.min(n)).into_vec();
    SampleSelection::finish(order, k, SamplerKind::Random)
}

/// Greedy farthest-point order over `n` items, starting at `start`.
/// `dist2(i, j)` must be a squared distance.
fn farthest_point_order(n: usize, k: usize, start: usize, dist2: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    let take = k.min(n);
    let mut order = Vec::with_capacity(take);
    if take == 0 {
        return order;
    }
    let mut selected = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut current = start;
    for _ in 0..take {
        order.push(current);
        selected[current] = true;
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            if selected[i] {
                continue;
            }
            let d = dist2(current, i);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        if best == usize::MAX {
            break;
        }
        current = best;
    }
    order
}

/// Distance-space farthest point sampling.
pub fn sample_dfps(coords: &[Point3], k: usize, start_index: usize) -> SampleSelection {
    assert!(!coords.is_empty(), "sample_dfps needs at least one point");
    assert!(start_index < coords.len(), "start index out of range");
    let order = farthest_point_order(coords.len(), k, start_index, |i, j| {
        coords[i].distance_squared(coords[j])
    });
    SampleSelection::finish(order, k, SamplerKind::Dfps)
}

fn row_distance_squared<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = (x - y).as_f64();
            d * d
        })
        .sum()
}

/// Feature-space farthest point sampling.
pub fn sample_ffps<T: Real>(features: &Matrix<T>, k: usize, start_index: usize) -> SampleSelection {
    assert!(features.rows() >= 1, "sample_ffps needs at least one point");
    assert!(start_index < features.rows(), "start index out of range");
    let order = farthest_point_order(features.rows(), k, start_index, |i, j| {
        row_distance_squared(features.row(i), features.row(j))
    });
    SampleSelection::finish(order, k, SamplerKind::Ffps)
}

/// Per search point, the feature distance to its nearest template point.
#[derive(Clone, Debug, PartialEq)]
pub struct RasScores {
    pub v: Vec<f64>,
}

pub fn ras_scores<T: Real>(search: &Matrix<T>, template: &Matrix<T>) -> Result<RasScores> {
    if template.rows() == 0 {
        return Err(Error::Empty("relation-aware sampling needs template features"));
    }
    if search.cols() != template.cols() {
        return Err(Error::shape(
            "ras_scores",
            format!("search has {} channels, template {}", search.cols(), template.cols()),
        ));
    }
    let v = (0..search.rows())
        .map(|i| {
            let s = search.row(i);
            let best = (0..template.rows())
                .map(|j| squared_distance_lanes(s, template.row(j)))
                .fold(f64::INFINITY, f64::min);
            best.sqrt()
        })
        .collect();
    Ok(RasScores { v })
}

/// Squared L2 distance accumulated in eight independent lanes.
fn squared_distance_lanes<T: Real>(a: &[T], b: &[T]) -> f64 {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        for l in 0..8 {
            let d = a[c * 8 + l] - b[c * 8 + l];
            acc[l] += d * d;
        }
    }
    let mut total = acc.iter().fold(T::zero(), |s, &v| s + v);
    for i in chunks * 8..a.len() {
        let d = a[i] - b[i];
        total += d * d;
    }
    total.as_f64()
}

/// All indices ordered by ascending score, ties by index.
fn ras_order(scores: &RasScores) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.v.len()).collect();
    order.sort_by(|&a, &b| scores.v[a].total_cmp(&scores.v[b]).then(a.cmp(&b)));
    order
}

/// The `k` search points closest in feature space to the template.
pub fn sample_ras<T: Real>(search: &Matrix<T>, template: &Matrix<T>, k: usize) -> Result<SampleSelection> {
    if search.rows() == 0 {
        return Err(Error::Empty("relation-aware sampling needs search points"));
    }
    let scores = ras_scores(search, template)?;
    Ok(SampleSelection::finish(ras_order(&scores), k, SamplerKind::Ras))
}

/// Half of the points by relation-aware ranking, the rest uniformly from the
/// remaining points.
pub fn sample_hybrid<T: Real, R: Rng + ?Sized>(
    search: &Matrix<T>,
    template: &Matrix<T>,
    k: usize,
    rng: &mut R,
) -> Result<SampleSelection> {
    let n = search.rows();
    if n == 0 {
        return Err(Error::Empty("relation-aware sampling needs search points"));
    }
    let order = ras_order(&ras_scores(search, template)?);
    if k >= n {
        return Ok(SampleSelection::finish(order, k, SamplerKind::Hybrid));
    }
    let ras_count = k / 2;
    let mut picked = order[..ras_count].to_vec();
    let mut taken = vec![false; n];
    for &i in &picked {
        taken[i] = true;
    }
    let rest: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
    let extra = rand::seq::index::sample(rng, rest.len(), k - ras_count);
    picked.extend(extra.iter().map(|j| rest[j]));
    Ok(SampleSelection {
        indices: picked,
        method: SamplerKind::Hybrid,
        padded: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn line(xs: &[f64]) -> Vec<Point3> {
        xs.iter().map(|&x| Point3::new(x, 0.0, 0.0)).collect()
    }

    fn is_permutation(idx: &[usize], n: usize) -> bool {
        let mut s = idx.to_vec();
        s.sort_unstable();
        s == (0..n).collect::<Vec<_>>()
    }

    #[test]
    fn random_sampler() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_random(10, 10, &mut rng);
        assert!(is_permutation(&s.indices, 10) && !s.padded);
        assert_eq!(sample_random(1, 1, &mut rng).indices, vec![0]);
        let p = sample_random(3, 7, &mut rng);
        assert!(p.padded);
        assert_eq!(p.indices.len(), 7);
        assert_eq!(p.indices[3..6], p.indices[0..3]);
        let a = sample_random(100, 5, &mut ChaCha8Rng::seed_from_u64(2024)).indices;
        let b = sample_random(100, 5, &mut ChaCha8Rng::seed_from_u64(2024)).indices;
        assert_eq!(a, b);
    }

    #[test]
    fn dfps_examples() {
        let pts = line(&[0.0, 1.0, 2.0, 3.0, 10.0]);
        assert_eq!(sample_dfps(&pts, 3, 0).indices, vec![0, 4, 3]);
        assert!(is_permutation(&sample_dfps(&pts, 5, 2).indices, 5));
        let padded = sample_dfps(&pts, 7, 0);
        assert!(padded.padded && padded.indices.len() == 7);
    }

    #[test]
    fn dfps_prefers_distinct_points_over_duplicates() {
        let pts = line(&[0.0, 0.0, 1.0, 2.0, 5.0]);
        for start in 0..5 {
            let s = sample_dfps(&pts, 4, start).indices;
            assert!(!(s.contains(&0) && s.contains(&1)), "start {start}: {s:?}");
        }
    }

    #[test]
    fn ffps_on_coordinates_equals_dfps() {
        let pts = line(&[0.3, -1.0, 2.5, 7.0, 4.0, 4.1]);
        let feats = Matrix::<f64>::from_fn(pts.len(), 3, |r, c| pts[r].to_array()[c]);
        for k in 1..=6 {
            assert_eq!(sample_ffps(&feats, k, 1).indices, sample_dfps(&pts, k, 1).indices);
        }
    }

    #[test]
    fn ffps_one_hot_features() {
        let feats = Matrix::<f64>::from_fn(8, 4, |r, c| if r % 4 == c { 1.0 } else { 0.0 });
        for start in 0..8 {
            let s = sample_ffps(&feats, 4, start).indices;
            let mut hot: Vec<usize> = s.iter().map(|i| i % 4).collect();
            hot.sort_unstable();
            assert_eq!(hot, vec![0, 1, 2, 3]);
        }
    }

    fn ras_fixture() -> (Matrix<f64>, Matrix<f64>) {
        let template = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let search = Matrix::from_rows(&[&[1.0, 0.0], &[0.9, 0.1], &[-1.0, 0.0], &[0.0, -1.0]]);
        (search, template)
    }

    #[test]
    fn ras_scores_example() {
        let (search, template) = ras_fixture();
        let v = ras_scores(&search, &template).unwrap().v;
        let expected = [0.0, 0.02f64.sqrt(), 2f64.sqrt(), 2f64.sqrt()];
        for (a, b) in v.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        let swapped = Matrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert_eq!(ras_scores(&search, &swapped).unwrap().v, v);
        assert!(ras_scores(&search, &Matrix::zeros(0, 2)).is_err());
        assert!(ras_scores(&search, &Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn ras_selection() {
        let (search, template) = ras_fixture();
        assert_eq!(sample_ras(&search, &template, 1).unwrap().indices, vec![0]);
        assert_eq!(sample_ras(&search, &template, 3).unwrap().indices, vec![0, 1, 2]);
        assert!(is_permutation(&sample_ras(&search, &template, 4).unwrap().indices, 4));
    }

    #[test]
    fn hybrid_selection() {
        let search = Matrix::<f64>::from_fn(20, 3, |r, c| ((r * 3 + c) as f64 * 0.77).sin());
        let template = Matrix::<f64>::from_fn(5, 3, |r, c| ((r * 5 + c) as f64 * 0.31).cos());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let all = sample_hybrid(&search, &template, 20, &mut rng).unwrap();
        assert!(is_permutation(&all.indices, 20));
        let ras = sample_ras(&search, &template, 4).unwrap().indices;
        for _ in 0..10 {
            let h = sample_hybrid(&search, &template, 8, &mut rng).unwrap().indices;
            assert_eq!(h[..4], ras[..]);
            let mut u = h.clone();
            u.sort_unstable();
            u.dedup();
            assert_eq!(u.len(), 8);
        }
    }

    #[test]
    fn sampler_names_round_trip() {
        for k in SamplerKind::ALL {
            assert_eq!(k.as_str().parse::<SamplerKind>().unwrap(), k);
        }
        assert!("fps".parse::<SamplerKind>().is_err());
    }
}
