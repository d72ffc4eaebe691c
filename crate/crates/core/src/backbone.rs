//! Two-branch set-abstraction feature extractor.
//!
//! One parameter set serves both the template and the search branch. Raw
//! coordinates are first embedded point-wise (relative to the template
//! centroid, so the features are translation invariant), then each level
//! subsamples centroids, groups ball-query neighbors, runs a shared MLP on
//! `[relative xyz / radius, neighbor feature]` and max-pools per group.
//!
//! The search branch may sample relation-aware against the template branch's
//! features at the same level, so template level `ℓ` is sampled first.

use rand::Rng;

use crate::config::{LevelConfig, ModelConfig};
use crate::geometry::{ball_query, Point3};
use crate::numeric::{Matrix, Mlp, MlpCache, Parameterized, Real};
use crate::numeric::params_join as join;
use crate::sampling::{
    sample_dfps, sample_ffps, sample_hybrid, sample_random, sample_ras, SampleSelection, SamplerKind,
};
use crate::{Error, Result};

/// Radius and neighbor cap of one set-abstraction level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grouping {
    pub radius: f64,
    pub max_neighbors: usize,
}

impl From<&LevelConfig> for Grouping {
    fn from(l: &LevelConfig) -> Self {
        Grouping {
            radius: l.radius,
            max_neighbors: l.max_neighbors,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SaCache<T> {
    /// Source row of every grouped row.
    sources: Vec<usize>,
    mlp: MlpCache<T>,
    /// Per output cell, the grouped row that won the max-pool.
    winners: Vec<usize>,
    input_rows: usize,
    input_cols: usize,
}

/// Groups neighbors of the selected centroids, encodes them with `mlp` and
/// max-pools per centroid. A centroid without neighbors groups itself.
pub fn set_abstraction<T: Real>(
    mlp: &Mlp<T>,
    coords: &[Point3],
    feats: &Matrix<T>,
    grouping: Grouping,
    selection: &[usize],
    train: bool,
) -> Result<(Vec<Point3>, Matrix<T>, SaCache<T>)> {
    if feats.rows() != coords.len() {
        return Err(Error::shape("set_abstraction", "feature rows differ from point count"));
    }
    if mlp.input_dim() != feats.cols() + 3 {
        return Err(Error::shape(
            "set_abstraction",
            format!("MLP expects {} inputs, got 3 + {}", mlp.input_dim(), feats.cols()),
        ));
    }
    if let Some(&bad) = selection.iter().find(|&&i| i >= coords.len()) {
        return Err(Error::shape("set_abstraction", format!("selection index {bad} out of range")));
    }
    let centroids: Vec<Point3> = selection.iter().map(|&i| coords[i]).collect();
    let mut groups = ball_query(&centroids, coords, grouping.radius, grouping.max_neighbors);
    for (g, &c) in groups.iter_mut().zip(selection) {
        if g.is_empty() {
            g.push(c);
        }
    }
    let total: usize = groups.iter().map(Vec::len).sum();
    let c_in = feats.cols();
    let inv_r = 1.0 / grouping.radius;
    let mut grouped = Matrix::zeros(total, 3 + c_in);
    let mut sources = Vec::with_capacity(total);
    let mut row = 0;
    for (g, &center) in groups.iter().zip(&centroids) {
        for &j in g {
            let rel = (coords[j] - center) * inv_r;
            let dst = grouped.row_mut(row);
            dst[0] = T::of(rel.x);
            dst[1] = T::of(rel.y);
            dst[2] = T::of(rel.z);
            dst[3..].copy_from_slice(feats.row(j));
            sources.push(j);
            row += 1;
        }
    }
    let (encoded, mlp_cache) = mlp.forward(&grouped, train)?;
    let c_out = encoded.cols();
    let mut out = Matrix::zeros(groups.len(), c_out);
    let mut winners = vec![0usize; groups.len() * c_out];
    let mut start = 0;
    for (gi, g) in groups.iter().enumerate() {
        let dst = out.row_mut(gi);
        let win = &mut winners[gi * c_out..(gi + 1) * c_out];
        dst.copy_from_slice(encoded.row(start));
        win.iter_mut().for_each(|w| *w = start);
        for r in start + 1..start + g.len() {
            for (ch, &v) in encoded.row(r).iter().enumerate() {
                if v > dst[ch] {
                    dst[ch] = v;
                    win[ch] = r;
                }
            }
        }
        start += g.len();
    }
    let cache = SaCache {
        sources,
        mlp: mlp_cache,
        winners,
        input_rows: coords.len(),
        input_cols: c_in,
    };
    Ok((centroids, out, cache))
}

/// Accumulates MLP gradients and returns the gradient of the input features.
pub fn set_abstraction_backward<T: Real>(
    mlp: &Mlp<T>,
    cache: &SaCache<T>,
    d_out: &Matrix<T>,
    grad: &mut Mlp<T>,
) -> Matrix<T> {
    let c_out = d_out.cols();
    let mut d_encoded = Matrix::zeros(cache.sources.len(), c_out);
    for g in 0..d_out.rows() {
        for ch in 0..c_out {
            let r = cache.winners[g * c_out + ch];
            let v = d_encoded.get(r, ch) + d_out.get(g, ch);
            d_encoded.set(r, ch, v);
        }
    }
    let d_grouped = mlp.backward(&cache.mlp, &d_encoded, grad);
    let mut d_feats = Matrix::zeros(cache.input_rows, cache.input_cols);
    for (r, &src) in cache.sources.iter().enumerate() {
        let from = &d_grouped.row(r)[3..];
        for (d, &v) in d_feats.row_mut(src).iter_mut().zip(from) {
            *d += v;
        }
    }
    d_feats
}

/// Shared weights of the feature extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T> {
    pub embed: Mlp<T>,
    pub levels: Vec<Mlp<T>>,
}

/// Indices chosen by the samplers, per level, for both branches.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SelectionPlan {
    pub template: Vec<Vec<usize>>,
    pub search: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct BranchLevel<T> {
    pub coords: Vec<Point3>,
    pub features: Matrix<T>,
}

#[derive(Clone, Debug)]
pub struct BackboneOutput<T> {
    pub template: BranchLevel<T>,
    pub search: BranchLevel<T>,
    /// Inputs to every level (the embedding output first), both branches.
    pub template_levels: Vec<BranchLevel<T>>,
    pub search_levels: Vec<BranchLevel<T>>,
    pub plan: SelectionPlan,
}

#[derive(Clone, Debug)]
pub struct BackboneCache<T> {
    embed_template: MlpCache<T>,
    embed_search: MlpCache<T>,
    template: Vec<SaCache<T>>,
    search: Vec<SaCache<T>>,
}

fn relative_rows<T: Real>(coords: &[Point3], anchor: Point3) -> Matrix<T> {
    Matrix::from_fn(coords.len(), 3, |r, c| T::of((coords[r] - anchor).to_array()[c]))
}

#[allow(clippy::too_many_arguments)]
fn select<T: Real, R: Rng + ?Sized>(
    kind: SamplerKind,
    coords: &[Point3],
    feats: &Matrix<T>,
    template_feats: Option<&Matrix<T>>,
    k: usize,
    start: usize,
    rng: &mut R,
) -> Result<SampleSelection> {
    let start = start.min(coords.len() - 1);
    let relational = |name| template_feats.ok_or(Error::Config(format!("{name} sampling needs template features")));
    Ok(match kind {
        SamplerKind::Random => sample_random(coords.len(), k, rng),
        SamplerKind::Dfps => sample_dfps(coords, k, start),
        SamplerKind::Ffps => sample_ffps(feats, k, start),
        SamplerKind::Ras => sample_ras(feats, relational("ras")?, k)?,
        SamplerKind::Hybrid => sample_hybrid(feats, relational("hybrid")?, k, rng)?,
    })
}

impl<T: Real> Backbone<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut dims = vec![3];
        dims.extend_from_slice(&cfg.embed_dims);
        let embed = Mlp::new(&dims, true, cfg.batch_norm, rng);
        let mut c_in = cfg.embed_width();
        let levels = cfg
            .levels
            .iter()
            .map(|l| {
                let mut d = vec![c_in + 3];
                d.extend_from_slice(&l.mlp);
                c_in = *l.mlp.last().expect("validated");
                Mlp::new(&d, true, cfg.batch_norm, rng)
            })
            .collect();
        Backbone { embed, levels }
    }

    /// Embeds both clouds and runs every level. With `plan`, the recorded
    /// selections are reused instead of sampling.
    #[allow(clippy::too_many_arguments)]
    pub fn extract_features<R: Rng + ?Sized>(
        &self,
        cfg: &ModelConfig,
        template: &[Point3],
        search: &[Point3],
        plan: Option<&SelectionPlan>,
        rng: &mut R,
        train: bool,
    ) -> Result<(BackboneOutput<T>, BackboneCache<T>)> {
        if template.is_empty() {
            return Err(Error::Empty("template cloud"));
        }
        if search.is_empty() {
            return Err(Error::Empty("search cloud"));
        }
        if cfg.levels.len() != self.levels.len() {
            return Err(Error::shape("extract_features", "config and weights disagree on level count"));
        }
        let anchor = {
            let sum = template.iter().fold(Point3::ORIGIN, |a, &p| a + p);
            sum * (1.0 / template.len() as f64)
        };
        let (ft, embed_template) = self.embed.forward(&relative_rows(template, anchor), train)?;
        let (fs, embed_search) = self.embed.forward(&relative_rows(search, anchor), train)?;
        let mut t = BranchLevel {
            coords: template.to_vec(),
            features: ft,
        };
        let mut s = BranchLevel {
            coords: search.to_vec(),
            features: fs,
        };
        let mut out_plan = SelectionPlan::default();
        let mut cache = BackboneCache {
            embed_template,
            embed_search,
            template: Vec::with_capacity(cfg.levels.len()),
            search: Vec::with_capacity(cfg.levels.len()),
        };
        let mut template_levels = Vec::with_capacity(cfg.levels.len());
        let mut search_levels = Vec::with_capacity(cfg.levels.len());
        for (li, (level, mlp)) in cfg.levels.iter().zip(&self.levels).enumerate() {
            let (sel_t, sel_s) = match plan {
                Some(p) => (
                    p.template.get(li).cloned().ok_or(Error::shape("extract_features", "plan too short"))?,
                    p.search.get(li).cloned().ok_or(Error::shape("extract_features", "plan too short"))?,
                ),
                None => {
                    let st = select(
                        level.template_sampler,
                        &t.coords,
                        &t.features,
                        None,
                        level.template_points,
                        cfg.fps_start_index,
                        rng,
                    )?;
                    let ss = select(
                        level.search_sampler,
                        &s.coords,
                        &s.features,
                        Some(&t.features),
                        level.search_points,
                        cfg.fps_start_index,
                        rng,
                    )?;
                    (st.indices, ss.indices)
                }
            };
            let grouping = Grouping::from(level);
            let (tc, tf, tcache) = set_abstraction(mlp, &t.coords, &t.features, grouping, &sel_t, train)?;
            let (sc, sf, scache) = set_abstraction(mlp, &s.coords, &s.features, grouping, &sel_s, train)?;
            template_levels.push(std::mem::replace(&mut t, BranchLevel { coords: tc, features: tf }));
            search_levels.push(std::mem::replace(&mut s, BranchLevel { coords: sc, features: sf }));
            cache.template.push(tcache);
            cache.search.push(scache);
            out_plan.template.push(sel_t);
            out_plan.search.push(sel_s);
        }
        Ok((
            BackboneOutput {
                template: t,
                search: s,
                template_levels,
                search_levels,
                plan: out_plan,
            },
            cache,
        ))
    }

    pub fn backward(
        &self,
        cache: &BackboneCache<T>,
        d_template: &Matrix<T>,
        d_search: &Matrix<T>,
        grad: &mut Backbone<T>,
    ) {
        let mut dt = d_template.clone();
        let mut ds = d_search.clone();
        for li in (0..self.levels.len()).rev() {
            let mlp = &self.levels[li];
            dt = set_abstraction_backward(mlp, &cache.template[li], &dt, &mut grad.levels[li]);
            ds = set_abstraction_backward(mlp, &cache.search[li], &ds, &mut grad.levels[li]);
        }
        self.embed.backward_params(&cache.embed_template, &dt, &mut grad.embed);
        self.embed.backward_params(&cache.embed_search, &ds, &mut grad.embed);
    }

    pub fn commit(&mut self, cache: &BackboneCache<T>) {
        self.embed.commit(&cache.embed_template);
        self.embed.commit(&cache.embed_search);
        for (li, mlp) in self.levels.iter_mut().enumerate() {
            mlp.commit(&cache.template[li].mlp);
            mlp.commit(&cache.search[li].mlp);
        }
    }
}

impl<T: Real> Parameterized<T> for Backbone<T> {
    fn tensors<'a>(&'a self, prefix: &str, buffers: bool, out: &mut Vec<(String, &'a Matrix<T>)>) {
        self.embed.tensors(&join(prefix, "embed"), buffers, out);
        for (i, l) in self.levels.iter().enumerate() {
            l.tensors(&join(prefix, &format!("sa{i}")), buffers, out);
        }
    }

    fn tensors_mut<'a>(&'a mut self, buffers: bool, out: &mut Vec<&'a mut Matrix<T>>) {
        self.embed.tensors_mut(buffers, out);
        for l in &mut self.levels {
            l.tensors_mut(buffers, out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, seed: u64, spread: f64) -> Vec<Point3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Point3::new(
                    (rng.random::<f64>() - 0.5) * spread,
                    (rng.random::<f64>() - 0.5) * spread,
                    (rng.random::<f64>() - 0.5) * spread * 0.5,
                )
            })
            .collect()
    }

    #[test]
    fn single_point_groups_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::<f64>::new(&[5, 4], true, false, &mut rng);
        let feats = Matrix::from_rows(&[&[0.3, -0.7]]);
        let g = Grouping {
            radius: 0.3,
            max_neighbors: 8,
        };
        let (c, out, _) = set_abstraction(&mlp, &[Point3::new(1.0, 2.0, 3.0)], &feats, g, &[0], false).unwrap();
        assert_eq!(c, vec![Point3::new(1.0, 2.0, 3.0)]);
        let input = Matrix::from_rows(&[&[0.0, 0.0, 0.0, 0.3, -0.7]]);
        assert_eq!(out, mlp.forward(&input, false).unwrap().0);
    }

    #[test]
    fn max_pool_ignores_neighbor_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mlp = Mlp::<f32>::new(&[7, 8, 6], true, false, &mut rng);
        let coords = cloud(16, 3, 0.4);
        let feats = Matrix::<f32>::from_fn(16, 4, |r, c| ((r * 4 + c) as f32 * 0.37).sin());
        let g = Grouping {
            radius: 0.5,
            max_neighbors: 64,
        };
        let (_, base, _) = set_abstraction(&mlp, &coords, &feats, g, &[0, 5, 9], false).unwrap();
        // Reverse the point order: every neighborhood is visited in reverse.
        let perm: Vec<usize> = (0..16).rev().collect();
        let coords_r: Vec<Point3> = perm.iter().map(|&i| coords[i]).collect();
        let feats_r = feats.gather_rows(&perm);
        let sel_r: Vec<usize> = [0usize, 5, 9].iter().map(|&i| 15 - i).collect();
        let (_, permuted, _) = set_abstraction(&mlp, &coords_r, &feats_r, g, &sel_r, false).unwrap();
        assert_eq!(base, permuted);
    }

    #[test]
    fn output_counts_follow_config() {
        let cfg = TrainConfig::tiny().model;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bb = Backbone::<f32>::new(&cfg, &mut rng);
        let t = cloud(cfg.template_input_points, 5, 2.0);
        let s = cloud(cfg.search_input_points, 6, 5.0);
        let (out, _) = bb.extract_features(&cfg, &t, &s, None, &mut rng, false).unwrap();
        for (li, l) in cfg.levels.iter().enumerate() {
            assert_eq!(out.plan.search[li].len(), l.search_points);
            assert_eq!(out.plan.template[li].len(), l.template_points);
        }
        assert_eq!(out.search.features.shape(), (cfg.search_seeds(), cfg.channels()));
        assert_eq!(out.template.coords.len(), cfg.levels[2].template_points);
        assert!(bb.extract_features(&cfg, &[], &s, None, &mut rng, false).is_err());
    }
}
