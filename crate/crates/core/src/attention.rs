//! Relation attention and the template/search transformer built from it.

use rand::Rng;

use crate::numeric::params_join as join;
use crate::numeric::{
    l2_normalize_rows, l2_normalize_rows_backward, relu, relu_backward, softmax_rows, softmax_rows_backward,
    Linear, Matrix, Parameterized, Real,
};
use crate::{Error, Result};

/// One attention block: projections `wq`, `wk`, `wv` and the output map
/// `phi` (linear then ReLU).
#[derive(Clone, Debug, PartialEq)]
pub struct RamWeights<T> {
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub phi: Linear<T>,
    pub use_l2_norm: bool,
    pub use_offset: bool,
    pub eps: f64,
}

/// Score matrix before (`a`) and after (`p`) the row softmax.
#[derive(Clone, Debug)]
pub struct AttentionTrace<T> {
    pub a: Matrix<T>,
    pub p: Matrix<T>,
}

#[derive(Clone, Debug)]
pub struct RamCache<T> {
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    qn: Matrix<T>,
    kn: Matrix<T>,
    q_norms: Vec<T>,
    k_norms: Vec<T>,
    vp: Matrix<T>,
    p: Matrix<T>,
    r: Matrix<T>,
    z: Matrix<T>,
}

impl<T: Real> RamWeights<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, use_l2_norm: bool, use_offset: bool, eps: f64, rng: &mut R) -> Self {
        RamWeights {
            wq: Linear::new(channels, channels, rng),
            wk: Linear::new(channels, channels, rng),
            wv: Linear::new(channels, channels, rng),
            phi: Linear::new(channels, channels, rng),
            use_l2_norm,
            use_offset,
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.wq.input_dim()
    }
}

fn check_tokens<T: Real>(op: &'static str, name: &str, m: &Matrix<T>, c: usize) -> Result<()> {
    if m.rows() == 0 {
        return Err(Error::shape(op, format!("{name} has no tokens")));
    }
    if m.cols() != c {
        return Err(Error::shape(op, format!("{name} has {} channels, expected {c}", m.cols())));
    }
    Ok(())
}

fn normalize<T: Real>(x: &Matrix<T>, on: bool, eps: f64) -> (Matrix<T>, Vec<T>) {
    if on {
        l2_normalize_rows(x, T::of(eps))
    } else {
        (x.clone(), Vec::new())
    }
}

fn normalize_backward<T: Real>(y: &Matrix<T>, norms: &[T], dy: Matrix<T>, on: bool, eps: f64) -> Matrix<T> {
    if on {
        l2_normalize_rows_backward(y, norms, &dy, T::of(eps))
    } else {
        dy
    }
}

/// `out = φ(Q − P·V')` (or `φ(P·V')` without offset), where `P` is the row
/// softmax of the (optionally cosine) similarity of the projected queries
/// and keys.
pub fn ram_attention<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    w: &RamWeights<T>,
) -> Result<(Matrix<T>, AttentionTrace<T>, RamCache<T>)> {
    let c = w.channels();
    check_tokens("ram_attention", "query", q, c)?;
    check_tokens("ram_attention", "key", k, c)?;
    check_tokens("ram_attention", "value", v, c)?;
    if k.rows() != v.rows() {
        return Err(Error::shape("ram_attention", "key and value token counts differ"));
    }
    let (qn, q_norms) = normalize(&w.wq.forward(q)?, w.use_l2_norm, w.eps);
    let (kn, k_norms) = normalize(&w.wk.forward(k)?, w.use_l2_norm, w.eps);
    let vp = w.wv.forward(v)?;
    let a = qn.matmul_t(&kn);
    let p = softmax_rows(&a);
    let attended = p.matmul(&vp);
    let r = if w.use_offset { q.sub(&attended) } else { attended };
    let z = w.phi.forward(&r)?;
    let out = relu(&z);
    let cache = RamCache {
        q: q.clone(),
        k: k.clone(),
        v: v.clone(),
        qn,
        kn,
        q_norms,
        k_norms,
        vp,
        p: p.clone(),
        r,
        z,
    };
    Ok((out, AttentionTrace { a, p }, cache))
}

/// Accumulates weight gradients and returns `(dQ, dK, dV)`.
pub fn ram_backward<T: Real>(
    w: &RamWeights<T>,
    cache: &RamCache<T>,
    d_out: &Matrix<T>,
    grad: &mut RamWeights<T>,
) -> (Matrix<T>, Matrix<T>, Matrix<T>) {
    let dz = relu_backward(&cache.z, d_out);
    let dr = w.phi.backward(&cache.r, &dz, &mut grad.phi);
    let (mut dq, d_attended) = if w.use_offset {
        let mut neg = dr.clone();
        neg.scale(-T::one());
        (dr, neg)
    } else {
        (Matrix::zeros(cache.q.rows(), cache.q.cols()), dr)
    };
    let dp = d_attended.matmul_t(&cache.vp);
    let dvp = cache.p.t_matmul(&d_attended);
    let da = softmax_rows_backward(&cache.p, &dp);
    let dqn = da.matmul(&cache.kn);
    let dkn = da.t_matmul(&cache.qn);
    let dqp = normalize_backward(&cache.qn, &cache.q_norms, dqn, w.use_l2_norm, w.eps);
    let dkp = normalize_backward(&cache.kn, &cache.k_norms, dkn, w.use_l2_norm, w.eps);
    dq.add_assign(&w.wq.backward(&cache.q, &dqp, &mut grad.wq));
    let dk = w.wk.backward(&cache.k, &dkp, &mut grad.wk);
    let dv = w.wv.backward(&cache.v, &dvp, &mut grad.wv);
    (dq, dk, dv)
}

impl<T: Real> Parameterized<T> for RamWeights<T> {
    fn tensors<'a>(&'a self, prefix: &str, buffers: bool, out: &mut Vec<(String, &'a Matrix<T>)>) {
        self.wq.tensors(&join(prefix, "wq"), buffers, out);
        self.wk.tensors(&join(prefix, "wk"), buffers, out);
        self.wv.tensors(&join(prefix, "wv"), buffers, out);
        self.phi.tensors(&join(prefix, "phi"), buffers, out);
    }

    fn tensors_mut<'a>(&'a mut self, buffers: bool, out: &mut Vec<&'a mut Matrix<T>>) {
        self.wq.tensors_mut(buffers, out);
        self.wk.tensors_mut(buffers, out);
        self.wv.tensors_mut(buffers, out);
        self.phi.tensors_mut(buffers, out);
    }
}

/// Shared self-attention for both branches, then search-to-template
/// cross-attention.
#[derive(Clone, Debug, PartialEq)]
pub struct PrtWeights<T> {
    pub self_ram: RamWeights<T>,
    pub cross_ram: RamWeights<T>,
}

impl<T: Real> PrtWeights<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, use_l2_norm: bool, use_offset: bool, eps: f64, rng: &mut R) -> Self {
        PrtWeights {
            self_ram: RamWeights::new(channels, use_l2_norm, use_offset, eps, rng),
            cross_ram: RamWeights::new(channels, use_l2_norm, use_offset, eps, rng),
        }
    }
}

impl<T: Real> Parameterized<T> for PrtWeights<T> {
    fn tensors<'a>(&'a self, prefix: &str, buffers: bool, out: &mut Vec<(String, &'a Matrix<T>)>) {
        self.self_ram.tensors(&join(prefix, "self"), buffers, out);
        self.cross_ram.tensors(&join(prefix, "cross"), buffers, out);
    }

    fn tensors_mut<'a>(&'a mut self, buffers: bool, out: &mut Vec<&'a mut Matrix<T>>) {
        self.self_ram.tensors_mut(buffers, out);
        self.cross_ram.tensors_mut(buffers, out);
    }
}

#[derive(Clone, Debug)]
pub struct PrtOutput<T> {
    /// Relation-enhanced search features.
    pub matched: Matrix<T>,
    pub search_self: Matrix<T>,
    pub template_self: Matrix<T>,
    /// Search self, template self, cross.
    pub traces: [AttentionTrace<T>; 3],
}

#[derive(Clone, Debug)]
pub struct PrtCache<T> {
    search: RamCache<T>,
    template: RamCache<T>,
    cross: RamCache<T>,
}

pub fn prt_forward<T: Real>(
    search: &Matrix<T>,
    template: &Matrix<T>,
    w: &PrtWeights<T>,
) -> Result<(PrtOutput<T>, PrtCache<T>)> {
    let (xs, ts, cs) = ram_attention(search, search, search, &w.self_ram)?;
    let (xt, tt, ct) = ram_attention(template, template, template, &w.self_ram)?;
    let (matched, tc, cc) = ram_attention(&xs, &xt, &xt, &w.cross_ram)?;
    Ok((
        PrtOutput {
            matched,
            search_self: xs,
            template_self: xt,
            traces: [ts, tt, tc],
        },
        PrtCache {
            search: cs,
            template: ct,
            cross: cc,
        },
    ))
}

/// Returns `(d search, d template)` for a gradient on the matched features.
pub fn prt_backward<T: Real>(
    w: &PrtWeights<T>,
    cache: &PrtCache<T>,
    d_matched: &Matrix<T>,
    grad: &mut PrtWeights<T>,
) -> (Matrix<T>, Matrix<T>) {
    let (dxs, mut dxt, dxt_v) = ram_backward(&w.cross_ram, &cache.cross, d_matched, &mut grad.cross_ram);
    dxt.add_assign(&dxt_v);
    let sum3 = |(mut a, b, c): (Matrix<T>, Matrix<T>, Matrix<T>)| {
        a.add_assign(&b);
        a.add_assign(&c);
        a
    };
    let ds = sum3(ram_backward(&w.self_ram, &cache.search, &dxs, &mut grad.self_ram));
    let dt = sum3(ram_backward(&w.self_ram, &cache.template, &dxt, &mut grad.self_ram));
    (ds, dt)
}

#[derive(Clone, Debug)]
pub struct CosineCache<T> {
    template: Matrix<T>,
    sn: Matrix<T>,
    tn: Matrix<T>,
    s_norms: Vec<T>,
    t_norms: Vec<T>,
    p: Matrix<T>,
    eps: f64,
}

/// Parameter-free matching: `softmax_rows(cos(X^s, X^t))·X^t`.
pub fn cosine_match<T: Real>(
    search: &Matrix<T>,
    template: &Matrix<T>,
    eps: f64,
) -> Result<(Matrix<T>, AttentionTrace<T>, CosineCache<T>)> {
    check_tokens("cosine_match", "search", search, search.cols())?;
    check_tokens("cosine_match", "template", template, search.cols())?;
    let (sn, s_norms) = l2_normalize_rows(search, T::of(eps));
    let (tn, t_norms) = l2_normalize_rows(template, T::of(eps));
    let a = sn.matmul_t(&tn);
    let p = softmax_rows(&a);
    let out = p.matmul(template);
    let cache = CosineCache {
        template: template.clone(),
        sn,
        tn,
        s_norms,
        t_norms,
        p: p.clone(),
        eps,
    };
    Ok((out, AttentionTrace { a, p }, cache))
}

pub fn cosine_match_backward<T: Real>(cache: &CosineCache<T>, d_out: &Matrix<T>) -> (Matrix<T>, Matrix<T>) {
    let dp = d_out.matmul_t(&cache.template);
    let mut dt = cache.p.t_matmul(d_out);
    let da = softmax_rows_backward(&cache.p, &dp);
    let dsn = da.matmul(&cache.tn);
    let dtn = da.t_matmul(&cache.sn);
    let eps = T::of(cache.eps);
    let ds = l2_normalize_rows_backward(&cache.sn, &cache.s_norms, &dsn, eps);
    dt.add_assign(&l2_normalize_rows_backward(&cache.tn, &cache.t_norms, &dtn, eps));
    (ds, dt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tokens(n: usize, c: usize, seed: u64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(n, c, |_, _| rng.random::<f64>() * 2.0 - 1.0)
    }

    fn weights(c: usize, norm: bool, offset: bool, seed: u64) -> RamWeights<f64> {
        RamWeights::new(c, norm, offset, 1e-12, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn single_key_attends_fully() {
        let w = weights(4, true, true, 1);
        let q = tokens(5, 4, 2);
        let kv = tokens(1, 4, 3);
        let (out, trace, _) = ram_attention(&q, &kv, &kv, &w).unwrap();
        assert!(trace.p.data().iter().all(|&p| p == 1.0));
        let vp = w.wv.forward(&kv).unwrap();
        let mut r = q.clone();
        for i in 0..5 {
            for (x, &v) in r.row_mut(i).iter_mut().zip(vp.row(0)) {
                *x -= v;
            }
        }
        let expect = relu(&w.phi.forward(&r).unwrap());
        for (a, b) in out.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_scores_are_bounded_and_rows_sum_to_one() {
        let w = weights(6, true, true, 4);
        let (_, trace, _) = ram_attention(&tokens(7, 6, 5), &tokens(9, 6, 6), &tokens(9, 6, 7), &w).unwrap();
        assert!(trace.a.data().iter().all(|&a| (-1.0 - 1e-12..=1.0 + 1e-12).contains(&a)));
        for r in 0..trace.p.rows() {
            assert!((trace.p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let w = weights(4, true, true, 8);
        assert!(ram_attention(&tokens(3, 5, 1), &tokens(3, 4, 2), &tokens(3, 4, 3), &w).is_err());
        assert!(ram_attention(&tokens(3, 4, 1), &tokens(3, 4, 2), &tokens(2, 4, 3), &w).is_err());
        assert!(cosine_match(&tokens(3, 4, 1), &tokens(3, 5, 2), 1e-12).is_err());
    }

    #[test]
    fn identical_branches_give_identical_self_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = PrtWeights::<f64>::new(5, true, true, 1e-12, &mut rng);
        let x = tokens(8, 5, 10);
        let (out, _) = prt_forward(&x, &x, &w).unwrap();
        assert_eq!(out.search_self, out.template_self);
        assert_eq!(out.matched.shape(), (8, 5));
    }

    #[test]
    fn self_weights_are_shared_by_both_branches() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = PrtWeights::<f64>::new(5, true, true, 1e-12, &mut rng);
        let (s, t) = (tokens(8, 5, 12), tokens(6, 5, 13));
        let (base, _) = prt_forward(&s, &t, &w).unwrap();
        let mut w2 = w.clone();
        w2.self_ram.phi.bias.data_mut().iter_mut().for_each(|b| *b += 0.5);
        let (moved, _) = prt_forward(&s, &t, &w2).unwrap();
        assert_ne!(base.search_self, moved.search_self);
        assert_ne!(base.template_self, moved.template_self);
    }

    #[test]
    fn search_permutation_is_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let w = PrtWeights::<f64>::new(6, true, true, 1e-12, &mut rng);
        let (s, t) = (tokens(12, 6, 15), tokens(7, 6, 16));
        let perm: Vec<usize> = vec![3, 0, 11, 5, 7, 1, 9, 2, 10, 4, 8, 6];
        let (base, _) = prt_forward(&s, &t, &w).unwrap();
        let (moved, _) = prt_forward(&s.gather_rows(&perm), &t, &w).unwrap();
        let expect = base.matched.gather_rows(&perm);
        for (a, b) in moved.matched.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let tperm: Vec<usize> = vec![6, 2, 4, 0, 1, 5, 3];
        let (moved_t, _) = prt_forward(&s, &t.gather_rows(&tperm), &w).unwrap();
        for (a, b) in moved_t.matched.data().iter().zip(base.matched.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_match_on_one_hot_rows() {
        let eye = Matrix::<f64>::identity(3);
        let (out, trace, _) = cosine_match(&eye, &eye, 1e-12).unwrap();
        let e = std::f64::consts::E;
        let hi = e / (e + 2.0);
        let lo = 1.0 / (e + 2.0);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { hi } else { lo };
                assert!((out.get(i, j) - expect).abs() < 1e-12);
                assert!((trace.a.get(i, j) - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
            let row = out.row(i);
            let best = (0..3).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(best, i);
        }
    }

    #[test]
    fn cosine_scores_ignore_row_scale() {
        let (s, t) = (tokens(4, 3, 17), tokens(5, 3, 18));
        let (_, base, _) = cosine_match(&s, &t, 1e-12).unwrap();
        let mut s2 = s.clone();
        s2.row_mut(2).iter_mut().for_each(|v| *v *= 7.5);
        let mut t2 = t.clone();
        t2.row_mut(0).iter_mut().for_each(|v| *v *= 0.2);
        let (_, scaled, _) = cosine_match(&s2, &t2, 1e-12).unwrap();
        for (a, b) in base.a.data().iter().zip(scaled.a.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
