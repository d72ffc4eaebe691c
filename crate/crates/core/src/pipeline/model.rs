use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    cosine_match, cosine_match_backward, prt_backward, prt_forward, AttentionTrace, CosineCache, PrtCache,
    PrtWeights,
};
use crate::backbone::{Backbone, BackboneCache, SelectionPlan};
use crate::config::{ModelConfig, TrainConfig};
use crate::geometry::Point3;
use crate::heads::{
    coarse_backward, coarse_predict, local_pool, local_pool_backward, prm_offset, refine_backward,
    refine_predict, CoarseCache, HeadWeights, PoolCache, Prediction, RefineCache,
};
use crate::numeric::params_join as join;
use crate::numeric::{Checkpoint, Matrix, Parameterized, Real};
use crate::Result;

/// Accumulated wall time per named stage. A disabled clock records nothing.
#[derive(Clone, Debug, Default)]
pub struct StageClock {
    enabled: bool,
    last: Option<Instant>,
    pub stages: Vec<(&'static str, Duration)>,
}

impl StageClock {
    pub fn on() -> Self {
        StageClock {
            enabled: true,
            ..Default::default()
        }
    }

    pub fn off() -> Self {
        StageClock::default()
    }

    pub fn start(&mut self) {
        if self.enabled {
            self.last = Some(Instant::now());
        }
    }

    /// Charges the time since the previous lap to `name`.
    pub fn lap(&mut self, name: &'static str) {
        let Some(last) = self.last else { return };
        let now = Instant::now();
        match self.stages.iter_mut().find(|s| s.0 == name) {
            Some(s) => s.1 += now - last,
            None => self.stages.push((name, now - last)),
        }
        self.last = Some(now);
    }
}

/// Backbone, matcher and heads behind one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackerNet<T> {
    pub config: ModelConfig,
    pub backbone: Backbone<T>,
    /// `None` when the matcher is plain cosine similarity.
    pub prt: Option<PrtWeights<T>>,
    pub heads: HeadWeights<T>,
}

/// Every discrete choice of one forward pass. Replaying a plan makes the
/// network a smooth function of its weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForwardPlan {
    pub backbone: SelectionPlan,
    pub correspondences: Option<Vec<Point3>>,
}

#[derive(Clone, Debug)]
pub struct NetOutput<T> {
    pub coarse: Prediction<T>,
    pub refined: Option<Prediction<T>>,
    /// Search seeds, row-aligned with the predictions.
    pub seeds: Vec<Point3>,
    pub template_coords: Vec<Point3>,
    pub correspondences: Option<Vec<Point3>>,
    pub traces: Vec<AttentionTrace<T>>,
    pub plan: ForwardPlan,
}

impl<T: Real> NetOutput<T> {
    /// The refined prediction when present, the coarse one otherwise.
    pub fn final_prediction(&self) -> &Prediction<T> {
        self.refined.as_ref().unwrap_or(&self.coarse)
    }
}

#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
enum MatcherCache<T> {
    Prt(PrtCache<T>),
    Cosine(CosineCache<T>),
}

#[derive(Clone, Debug)]
struct RefineState<T> {
    head: RefineCache<T>,
    search_pool: PoolCache,
    template_pool: PoolCache,
}

#[derive(Clone, Debug)]
pub struct NetCache<T> {
    backbone: BackboneCache<T>,
    matcher: MatcherCache<T>,
    coarse: CoarseCache<T>,
    refine: Option<RefineState<T>>,
}

impl<T: Real> TrackerNet<T> {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let c = config.channels();
        let backbone = Backbone::new(config, rng);
        let prt = config
            .use_prt
            .then(|| PrtWeights::new(c, config.use_l2_norm, config.use_offset, config.l2_eps, rng));
        let heads = HeadWeights::new(
            c,
            &config.head_hidden,
            &config.refine_hidden,
            config.use_prm,
            config.batch_norm,
            rng,
        );
        TrackerNet {
            config: config.clone(),
            backbone,
            prt,
            heads,
        }
    }

    pub fn seeded(config: &ModelConfig, seed: u64) -> Self {
        TrackerNet::new(config, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Template and search points are expected in the canonical frame of the
    /// reference box.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        template: &[Point3],
        search: &[Point3],
        plan: Option<&ForwardPlan>,
        rng: &mut R,
        train: bool,
    ) -> Result<(NetOutput<T>, NetCache<T>)> {
        self.forward_timed(template, search, plan, rng, train, &mut StageClock::off())
    }

    /// `forward` that records per-stage wall time into `clock`.
    pub fn forward_timed<R: Rng + ?Sized>(
        &self,
        template: &[Point3],
        search: &[Point3],
        plan: Option<&ForwardPlan>,
        rng: &mut R,
        train: bool,
        clock: &mut StageClock,
    ) -> Result<(NetOutput<T>, NetCache<T>)> {
        let cfg = &self.config;
        clock.start();
        let (bb, bb_cache) =
            self.backbone
                .extract_features(cfg, template, search, plan.map(|p| &p.backbone), rng, train)?;
        clock.lap("backbone");
        let (matched, traces, matcher) = match &self.prt {
            Some(w) => {
                let (out, cache) = prt_forward(&bb.search.features, &bb.template.features, w)?;
                (out.matched, out.traces.into(), MatcherCache::Prt(cache))
            }
            None => {
                let (out, trace, cache) = cosine_match(&bb.search.features, &bb.template.features, cfg.l2_eps)?;
                (out, vec![trace], MatcherCache::Cosine(cache))
            }
        };
        clock.lap(if self.prt.is_some() { "prt" } else { "cosine_match" });
        let (coarse, coarse_cache) = coarse_predict(&matched, &self.heads, train)?;
        clock.lap("coarse_head");
        let seeds = bb.search.coords.clone();
        let mut refined = None;
        let mut refine = None;
        let mut correspondences = None;
        if cfg.use_prm {
            let corr = match plan.and_then(|p| p.correspondences.clone()) {
                Some(c) => c,
                None => prm_offset(&seeds, &coarse)?.0,
            };
            let (fs, search_pool) = local_pool(
                &seeds,
                &bb.search.coords,
                &bb.search.features,
                cfg.pool_radius,
                cfg.pool_max_neighbors,
            )?;
            let (ft, template_pool) = local_pool(
                &corr,
                &bb.template.coords,
                &bb.template.features,
                cfg.pool_radius,
                cfg.pool_max_neighbors,
            )?;
            let (pred, head) = refine_predict(&matched, &fs, &ft, &self.heads, train)?;
            refined = Some(pred);
            refine = Some(RefineState {
                head,
                search_pool,
                template_pool,
            });
            correspondences = Some(corr);
            clock.lap("prm");
        }
        let plan = ForwardPlan {
            backbone: bb.plan,
            correspondences: correspondences.clone(),
        };
        Ok((
            NetOutput {
                coarse,
                refined,
                seeds,
                template_coords: bb.template.coords,
                correspondences,
                traces,
                plan,
            },
            NetCache {
                backbone: bb_cache,
                matcher,
                coarse: coarse_cache,
                refine,
            },
        ))
    }

    /// Accumulates into `grad` the weight gradients for the given prediction
    /// gradients.
    pub fn backward(
        &self,
        cache: &NetCache<T>,
        d_coarse: &Prediction<T>,
        d_refined: Option<&Prediction<T>>,
        grad: &mut TrackerNet<T>,
    ) {
        let mut d_matched = coarse_backward(&self.heads, &cache.coarse, d_coarse, &mut grad.heads);
        let mut pooled = None;
        if let (Some(state), Some(d)) = (&cache.refine, d_refined) {
            let (dm, dfs, dft) = refine_backward(&self.heads, &state.head, d, &mut grad.heads);
            d_matched.add_assign(&dm);
            pooled = Some((
                local_pool_backward(&state.search_pool, &dfs),
                local_pool_backward(&state.template_pool, &dft),
            ));
        }
        let (mut ds, mut dt) = match &cache.matcher {
            MatcherCache::Prt(c) => prt_backward(
                self.prt.as_ref().expect("prt cache implies prt weights"),
                c,
                &d_matched,
                grad.prt.as_mut().expect("matching structure"),
            ),
            MatcherCache::Cosine(c) => cosine_match_backward(c, &d_matched),
        };
        if let Some((ps, pt)) = pooled {
            ds.add_assign(&ps);
            dt.add_assign(&pt);
        }
        self.backbone.backward(&cache.backbone, &dt, &ds, &mut grad.backbone);
    }

    /// Folds batch-norm statistics of a training pass into the running
    /// buffers.
    pub fn commit(&mut self, cache: &NetCache<T>) {
        self.backbone.commit(&cache.backbone);
        self.heads.commit_coarse(&cache.coarse);
        if let Some(r) = &cache.refine {
            self.heads.commit_refine(&r.head);
        }
    }

    /// Same weights at another precision.
    pub fn cast<U: Real>(&self) -> TrackerNet<U> {
        let mut out = TrackerNet::<U>::seeded(&self.config, 0);
        let src = self.named_tensors(true);
        let mut dst = Vec::new();
        out.tensors_mut(true, &mut dst);
        for ((_, s), d) in src.into_iter().zip(dst) {
            *d = s.cast();
        }
        out
    }

    pub fn to_checkpoint(&self, train: &TrainConfig) -> Checkpoint {
        Checkpoint::from_model(self, train.to_text())
    }

    /// Rebuilds the network described by the embedded run configuration.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(TrainConfig, Self)> {
        let cfg = TrainConfig::from_text(&ckpt.config)?;
        let mut net = TrackerNet::seeded(&cfg.model, 0);
        ckpt.load_into(&mut net)?;
        Ok((cfg, net))
    }
}

impl<T: Real> Parameterized<T> for TrackerNet<T> {
    fn tensors<'a>(&'a self, prefix: &str, buffers: bool, out: &mut Vec<(String, &'a Matrix<T>)>) {
        self.backbone.tensors(&join(prefix, "backbone"), buffers, out);
        if let Some(p) = &self.prt {
            p.tensors(&join(prefix, "prt"), buffers, out);
        }
        self.heads.tensors(&join(prefix, "heads"), buffers, out);
    }

    fn tensors_mut<'a>(&'a mut self, buffers: bool, out: &mut Vec<&'a mut Matrix<T>>) {
        self.backbone.tensors_mut(buffers, out);
        if let Some(p) = &mut self.prt {
            p.tensors_mut(buffers, out);
        }
        self.heads.tensors_mut(buffers, out);
    }
}
