//! Coarse per-point head, refinement head and box decoding.
//!
//! All coordinates here live in the canonical frame of the reference box
//! (the template object sits at the origin facing +x).

use rand::Rng;

use crate::geometry::{ball_query, Box3D, Point3};
use crate::numeric::params_join as join;
use crate::numeric::{Matrix, Mlp, MlpCache, Parameterized, Real};
use crate::{Error, Result};

/// Per-seed classification logit and `(Δx, Δy, Δz, Δθ)` regression.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub cls_logits: Matrix<T>,
    pub reg: Matrix<T>,
}

impl<T: Real> Prediction<T> {
    pub fn zeros(n: usize) -> Self {
        Prediction {
            cls_logits: Matrix::zeros(n, 1),
            reg: Matrix::zeros(n, 4),
        }
    }

    pub fn len(&self) -> usize {
        self.cls_logits.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cast<U: Real>(&self) -> Prediction<U> {
        Prediction {
            cls_logits: self.cls_logits.cast(),
            reg: self.reg.cast(),
        }
    }

    /// Index of the highest logit, lowest index on ties.
    pub fn best(&self) -> Option<usize> {
        let logits = self.cls_logits.data();
        let mut best: Option<usize> = None;
        for (i, &v) in logits.iter().enumerate() {
            if best.is_none_or(|b| v > logits[b]) {
                best = Some(i);
            }
        }
        best
    }

    pub fn reg_row(&self, i: usize) -> [f64; 4] {
        let r = self.reg.row(i);
        [r[0].as_f64(), r[1].as_f64(), r[2].as_f64(), r[3].as_f64()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights<T> {
    pub coarse_cls: Mlp<T>,
    pub coarse_reg: Mlp<T>,
    pub refine: Option<Mlp<T>>,
}

impl<T: Real> HeadWeights<T> {
    /// `hidden` sizes the coarse heads, `refine_hidden` the refinement head
    /// (omitted when `refine` is off).
    pub fn new<R: Rng + ?Sized>(
        channels: usize,
        hidden: &[usize],
        refine_hidden: &[usize],
        refine: bool,
        batch_norm: bool,
        rng: &mut R,
    ) -> Self {
        let dims = |input: usize, inner: &[usize], out: usize| {
            let mut d = vec![input];
            d.extend_from_slice(inner);
            d.push(out);
            d
        };
        HeadWeights {
            coarse_cls: Mlp::new(&dims(channels, hidden, 1), false, batch_norm, rng),
            coarse_reg: Mlp::new(&dims(channels, hidden, 4), false, batch_norm, rng),
            refine: refine.then(|| Mlp::new(&dims(3 * channels, refine_hidden, 5), false, batch_norm, rng)),
        }
    }

    pub fn commit_coarse(&mut self, cache: &CoarseCache<T>) {
        self.coarse_cls.commit(&cache.cls);
        self.coarse_reg.commit(&cache.reg);
    }

    pub fn commit_refine(&mut self, cache: &RefineCache<T>) {
        if let Some(m) = self.refine.as_mut() {
            m.commit(&cache.mlp);
        }
    }
}

impl<T: Real> Parameterized<T> for HeadWeights<T> {
    fn tensors<'a>(&'a self, prefix: &str, buffers: bool, out: &mut Vec<(String, &'a Matrix<T>)>) {
        self.coarse_cls.tensors(&join(prefix, "coarse_cls"), buffers, out);
        self.coarse_reg.tensors(&join(prefix, "coarse_reg"), buffers, out);
        if let Some(m) = &self.refine {
            m.tensors(&join(prefix, "refine"), buffers, out);
        }
    }

    fn tensors_mut<'a>(&'a mut self, buffers: bool, out: &mut Vec<&'a mut Matrix<T>>) {
        self.coarse_cls.tensors_mut(buffers, out);
        self.coarse_reg.tensors_mut(buffers, out);
        if let Some(m) = &mut self.refine {
            m.tensors_mut(buffers, out);
        }
    }
}

#[derive(Clone, Debug)]
pub struct CoarseCache<T> {
    cls: MlpCache<T>,
    reg: MlpCache<T>,
}

pub fn coarse_predict<T: Real>(
    features: &Matrix<T>,
    w: &HeadWeights<T>,
    train: bool,
) -> Result<(Prediction<T>, CoarseCache<T>)> {
    if features.rows() == 0 {
        return Err(Error::Empty("coarse head input"));
    }
    let (cls_logits, cls) = w.coarse_cls.forward(features, train)?;
    let (reg, reg_cache) = w.coarse_reg.forward(features, train)?;
    Ok((Prediction { cls_logits, reg }, CoarseCache { cls, reg: reg_cache }))
}

pub fn coarse_backward<T: Real>(
    w: &HeadWeights<T>,
    cache: &CoarseCache<T>,
    d: &Prediction<T>,
    grad: &mut HeadWeights<T>,
) -> Matrix<T> {
    let mut dx = w.coarse_cls.backward(&cache.cls, &d.cls_logits, &mut grad.coarse_cls);
    dx.add_assign(&w.coarse_reg.backward(&cache.reg, &d.reg, &mut grad.coarse_reg));
    dx
}

/// Applies the coarse motion `x ↦ R(Δθ)·x + anchor + Δ` to template-frame
/// points.
pub fn apply_motion(points: &[Point3], anchor: Point3, reg: [f64; 4]) -> Vec<Point3> {
    let shift = anchor + Point3::new(reg[0], reg[1], reg[2]);
    points.iter().map(|&p| p.rotate_z(reg[3]) + shift).collect()
}

/// Maps seeds into the template frame through the inverse of the motion
/// predicted at seed `anchor_index`.
pub fn prm_offset_at(seeds: &[Point3], anchor: Point3, reg: [f64; 4]) -> Vec<Point3> {
    let shift = anchor + Point3::new(reg[0], reg[1], reg[2]);
    seeds.iter().map(|&s| (s - shift).rotate_z(-reg[3])).collect()
}

/// Template-frame correspondences of `seeds` under the best coarse
/// prediction, with that prediction's index.
pub fn prm_offset<T: Real>(seeds: &[Point3], coarse: &Prediction<T>) -> Result<(Vec<Point3>, usize)> {
    if seeds.len() != coarse.len() {
        return Err(Error::shape("prm_offset", "seed count differs from prediction rows"));
    }
    let best = coarse.best().ok_or(Error::Empty("coarse prediction"))?;
    Ok((prm_offset_at(seeds, seeds[best], coarse.reg_row(best)), best))
}

#[derive(Clone, Debug)]
pub struct PoolCache {
    /// Winning source row per output cell, `None` for empty neighborhoods.
    winners: Vec<Option<usize>>,
    sources: usize,
    channels: usize,
}

/// Max-pools the features of each query's ball-query neighbors; an empty
/// neighborhood pools to zero.
pub fn local_pool<T: Real>(
    queries: &[Point3],
    coords: &[Point3],
    feats: &Matrix<T>,
    radius: f64,
    max_neighbors: usize,
) -> Result<(Matrix<T>, PoolCache)> {
    if radius.is_nan() || radius <= 0.0 {
        return Err(Error::Config(format!("pool radius must be positive, got {radius}")));
    }
    if feats.rows() != coords.len() {
        return Err(Error::shape("local_pool", "feature rows differ from point count"));
    }
    let c = feats.cols();
    let groups = ball_query(queries, coords, radius, max_neighbors);
    let mut out = Matrix::zeros(queries.len(), c);
    let mut winners = vec![None; queries.len() * c];
    for (qi, g) in groups.iter().enumerate() {
        let Some((&first, rest)) = g.split_first() else {
            continue;
        };
        let dst = out.row_mut(qi);
        let win = &mut winners[qi * c..(qi + 1) * c];
        dst.copy_from_slice(feats.row(first));
        win.iter_mut().for_each(|w| *w = Some(first));
        for &j in rest {
            for (ch, &v) in feats.row(j).iter().enumerate() {
                if v > dst[ch] {
                    dst[ch] = v;
                    win[ch] = Some(j);
                }
            }
        }
    }
    Ok((
        out,
        PoolCache {
            winners,
            sources: coords.len(),
            channels: c,
        },
    ))
}

pub fn local_pool_backward<T: Real>(cache: &PoolCache, d_out: &Matrix<T>) -> Matrix<T> {
    let c = cache.channels;
    let mut d = Matrix::zeros(cache.sources, c);
    for (cell, w) in cache.winners.iter().enumerate() {
        if let Some(src) = *w {
            let (q, ch) = (cell / c, cell % c);
            let v = d.get(src, ch) + d_out.get(q, ch);
            d.set(src, ch, v);
        }
    }
    d
}

#[derive(Clone, Debug)]
pub struct RefineCache<T> {
    mlp: MlpCache<T>,
    channels: usize,
}

/// Runs the refinement MLP on `[F^s, F^t, X̂^s]`.
pub fn refine_predict<T: Real>(
    matched: &Matrix<T>,
    search_pooled: &Matrix<T>,
    template_pooled: &Matrix<T>,
    w: &HeadWeights<T>,
    train: bool,
) -> Result<(Prediction<T>, RefineCache<T>)> {
    let mlp = w.refine.as_ref().ok_or(Error::Config("refinement head is disabled".into()))?;
    let n = matched.rows();
    if search_pooled.rows() != n || template_pooled.rows() != n {
        return Err(Error::shape("refine_predict", "inputs have different row counts"));
    }
    let c = matched.cols();
    if search_pooled.cols() != c || template_pooled.cols() != c {
        return Err(Error::shape("refine_predict", "inputs have different widths"));
    }
    let input = Matrix::hcat(&[search_pooled, template_pooled, matched])?;
    let (y, cache) = mlp.forward(&input, train)?;
    Ok((
        Prediction {
            cls_logits: y.columns(0, 1),
            reg: y.columns(1, 5),
        },
        RefineCache { mlp: cache, channels: c },
    ))
}

/// Returns `(d matched, d search pooled, d template pooled)`.
pub fn refine_backward<T: Real>(
    w: &HeadWeights<T>,
    cache: &RefineCache<T>,
    d: &Prediction<T>,
    grad: &mut HeadWeights<T>,
) -> (Matrix<T>, Matrix<T>, Matrix<T>) {
    let mlp = w.refine.as_ref().expect("refine cache implies refine head");
    let g = grad.refine.as_mut().expect("matching structure");
    let dy = Matrix::hcat(&[&d.cls_logits, &d.reg]).expect("prediction rows agree");
    let dx = mlp.backward(&cache.mlp, &dy, g);
    let c = cache.channels;
    (dx.columns(2 * c, 3 * c), dx.columns(0, c), dx.columns(c, 2 * c))
}

/// Box at the best seed plus its offset, yaw relative to `reference`, size
/// copied from `reference`.
pub fn decode_box<T: Real>(pred: &Prediction<T>, seeds: &[Point3], reference: &Box3D) -> Result<Box3D> {
    if seeds.len() != pred.len() {
        return Err(Error::shape("decode_box", "seed count differs from prediction rows"));
    }
    let best = pred.best().ok_or(Error::Empty("prediction"))?;
    let r = pred.reg_row(best);
    Box3D::new(seeds[best] + Point3::new(r[0], r[1], r[2]), reference.size, reference.yaw + r[3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn pred(logits: &[f64], reg: &[[f64; 4]]) -> Prediction<f64> {
        Prediction {
            cls_logits: Matrix::from_vec(logits.len(), 1, logits.to_vec()).unwrap(),
            reg: Matrix::from_vec(reg.len(), 4, reg.iter().flatten().copied().collect()).unwrap(),
        }
    }

    #[test]
    fn zero_weight_heads_emit_biases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut w = HeadWeights::<f64>::new(6, &[5, 4], &[4, 4, 4, 4], true, false, &mut rng);
        for m in [&mut w.coarse_cls, &mut w.coarse_reg] {
            for l in &mut m.layers {
                l.linear.weight.fill(0.0);
            }
        }
        let x = Matrix::from_fn(3, 6, |r, c| (r + c) as f64);
        let (p, _) = coarse_predict(&x, &w, false).unwrap();
        assert_eq!(p.cls_logits.shape(), (3, 1));
        assert_eq!(p.reg.shape(), (3, 4));
        let cls_bias = w.coarse_cls.layers.last().unwrap().linear.bias.get(0, 0);
        assert!(p.cls_logits.data().iter().all(|&v| v == cls_bias));
        for r in 0..3 {
            assert_eq!(p.reg.row(r), w.coarse_reg.layers.last().unwrap().linear.bias.row(0));
        }
    }

    #[test]
    fn prm_examples() {
        let seeds = [Point3::new(2.0, 0.0, 0.0), Point3::new(-1.0, 3.0, 0.5)];
        assert_eq!(prm_offset_at(&seeds, Point3::ORIGIN, [0.0; 4]), seeds.to_vec());
        let moved = prm_offset_at(&[Point3::new(2.0, 0.0, 0.0)], Point3::ORIGIN, [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(moved, vec![Point3::new(1.0, 0.0, 0.0)]);
        let reg = [0.3, -0.2, 0.1, 0.7];
        let anchor = Point3::new(0.5, 0.25, -0.1);
        let back = apply_motion(&prm_offset_at(&seeds, anchor, reg), anchor, reg);
        for (a, b) in back.iter().zip(&seeds) {
            assert!(a.distance(*b) < 1e-9);
        }
    }

    #[test]
    fn prm_uses_best_seed() {
        let seeds = [Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 0.0, 0.0)];
        let p = pred(&[0.1, 2.0], &[[9.0, 9.0, 9.0, 0.0], [0.5, 0.0, 0.0, 0.0]]);
        let (c, best) = prm_offset(&seeds, &p).unwrap();
        assert_eq!(best, 1);
        assert!(c[1].distance(Point3::new(-0.5, 0.0, 0.0)) < 1e-12);
    }

    #[test]
    fn pool_examples() {
        let coords = [Point3::new(0.0, 0.0, 0.0), Point3::new(5.0, 0.0, 0.0), Point3::new(5.5, 0.0, 0.0)];
        let feats = Matrix::<f64>::from_rows(&[&[1.0, -2.0], &[3.0, 0.5], &[-1.0, 4.0]]);
        let queries = [Point3::new(0.1, 0.0, 0.0), Point3::new(5.2, 0.0, 0.0), Point3::new(20.0, 0.0, 0.0)];
        let (out, cache) = local_pool(&queries, &coords, &feats, 1.0, 16).unwrap();
        assert_eq!(out.row(0), &[1.0, -2.0]);
        assert_eq!(out.row(1), &[3.0, 4.0]);
        assert_eq!(out.row(2), &[0.0, 0.0]);
        let d = local_pool_backward(&cache, &Matrix::filled(3, 2, 1.0));
        assert_eq!(d.data(), &[1.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
        assert!(local_pool(&queries, &coords, &feats, 0.0, 16).is_err());
    }

    #[test]
    fn refine_rejects_width_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = HeadWeights::<f64>::new(4, &[4, 4], &[4, 4, 4, 4], true, false, &mut rng);
        let a = Matrix::zeros(3, 4);
        let b = Matrix::zeros(3, 5);
        assert!(refine_predict(&a, &a, &b, &w, false).is_err());
        assert!(refine_predict(&a, &a, &Matrix::zeros(2, 4), &w, false).is_err());
        let (p, _) = refine_predict(&a, &a, &a, &w, false).unwrap();
        assert_eq!((p.cls_logits.shape(), p.reg.shape()), ((3, 1), (3, 4)));
    }

    #[test]
    fn refine_is_row_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = HeadWeights::<f64>::new(3, &[4, 4], &[6, 5, 5, 4], true, false, &mut rng);
        let m = |seed: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            Matrix::<f64>::from_fn(5, 3, |_, _| r.random::<f64>() - 0.5)
        };
        let (x, fs, ft) = (m(4), m(5), m(6));
        let perm = [4, 2, 0, 1, 3];
        let (base, _) = refine_predict(&x, &fs, &ft, &w, false).unwrap();
        let (moved, _) =
            refine_predict(&x.gather_rows(&perm), &fs.gather_rows(&perm), &ft.gather_rows(&perm), &w, false).unwrap();
        assert_eq!(moved.reg, base.reg.gather_rows(&perm));
        assert_eq!(moved.cls_logits, base.cls_logits.gather_rows(&perm));
    }

    #[test]
    fn decode_examples() {
        let seeds = [Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 2.0, 0.0)];
        let reference = Box3D::new(Point3::ORIGIN, [4.0, 2.0, 1.5], 0.0).unwrap();
        let b = decode_box(&pred(&[0.0, 1.0], &[[0.0; 4], [1.0, 0.0, 0.0, 0.0]]), &seeds, &reference).unwrap();
        assert_eq!(b.center, Point3::new(2.0, 2.0, 0.0));
        assert_eq!((b.size, b.yaw), (reference.size, 0.0));
        let b = decode_box(&pred(&[3.0, 1.0], &[[0.0; 4], [0.0; 4]]), &seeds, &reference).unwrap();
        assert_eq!(b.center, seeds[0]);
        let turned = Box3D::new(Point3::ORIGIN, [4.0, 2.0, 1.5], 3.0).unwrap();
        let b = decode_box(&pred(&[1.0, 1.0], &[[0.0, 0.0, 0.0, 0.3], [0.0; 4]]), &seeds, &turned).unwrap();
        assert!((b.yaw - (3.3 - 2.0 * PI)).abs() < 1e-12);
        assert_eq!(b.center, seeds[0]);
    }

    #[test]
    fn decode_ignores_monotone_logit_transforms() {
        let seeds: Vec<Point3> = (0..6).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        let logits = [0.3, -1.0, 2.5, 2.5, 0.0, 1.0];
        let reg = [[0.1, 0.2, 0.3, 0.4]; 6];
        let reference = Box3D::new(Point3::ORIGIN, [1.0, 1.0, 1.0], 0.0).unwrap();
        let base = decode_box(&pred(&logits, &reg), &seeds, &reference).unwrap();
        let squashed: Vec<f64> = logits.iter().map(|&l| (3.0 * l).exp() + 1.0).collect();
        assert_eq!(decode_box(&pred(&squashed, &reg), &seeds, &reference).unwrap(), base);
        assert_eq!(base.center.x, 2.1);
    }
}
