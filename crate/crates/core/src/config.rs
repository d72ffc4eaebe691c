//! Run configuration and its plain-text `key = value` format.
//!
//! Lines are `key = value`; `#` starts a comment. An optional first
//! assignment `profile = <name>` selects the base profile the remaining keys
//! override. List values are comma separated; per-level channel lists are
//! separated by `/` (`sa_mlp = 64/128/256`). Unknown keys are rejected.

use std::fmt::Write as _;

use crate::sampling::SamplerKind;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LevelConfig {
    pub radius: f64,
    pub max_neighbors: usize,
    pub mlp: Vec<usize>,
    pub search_points: usize,
    pub template_points: usize,
    pub search_sampler: SamplerKind,
    pub template_sampler: SamplerKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub template_input_points: usize,
    pub search_input_points: usize,
    pub embed_dims: Vec<usize>,
    pub levels: Vec<LevelConfig>,
    pub fps_start_index: usize,
    /// Hidden widths of the coarse classification/regression heads.
    pub head_hidden: Vec<usize>,
    /// Hidden widths of the refinement head.
    pub refine_hidden: Vec<usize>,
    pub pool_radius: f64,
    pub pool_max_neighbors: usize,
    pub batch_norm: bool,
    pub use_prt: bool,
    pub use_prm: bool,
    pub use_offset: bool,
    pub use_l2_norm: bool,
    pub l2_eps: f64,
}

impl ModelConfig {
    /// Channel width of the backbone output.
    pub fn channels(&self) -> usize {
        self.levels
            .last()
            .and_then(|l| l.mlp.last().copied())
            .unwrap_or_else(|| self.embed_width())
    }

    pub fn embed_width(&self) -> usize {
        *self.embed_dims.last().expect("validated non-empty")
    }

    pub fn search_seeds(&self) -> usize {
        self.levels.last().map_or(self.search_input_points, |l| l.search_points)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_divisor: f64,
    pub lr_step_epochs: usize,
    pub lambda: f64,
    pub distortion_range: f64,
    pub template_extend_ratio: f64,
    pub search_margin: f64,
    pub model: ModelConfig,
}

pub const PROFILES: [&str; 4] = ["desk", "paper", "tiny", "check"];

fn levels(
    radii: &[f64],
    max_neighbors: usize,
    mlps: &[&[usize]],
    search: &[usize],
    template: &[usize],
) -> Vec<LevelConfig> {
    (0..radii.len())
        .map(|i| LevelConfig {
            radius: radii[i],
            max_neighbors,
            mlp: mlps[i].to_vec(),
            search_points: search[i],
            template_points: template[i],
            search_sampler: SamplerKind::Hybrid,
            template_sampler: SamplerKind::Dfps,
        })
        .collect()
}

impl TrainConfig {
    /// Desk-scale defaults: 1024/512 input points, 3 set-abstraction levels.
    pub fn desk() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 200,
            batch_size: 8,
            lr: 1e-3,
            lr_divisor: 5.0,
            lr_step_epochs: 40,
            lambda: 1.0,
            distortion_range: 0.3,
            template_extend_ratio: 0.1,
            search_margin: 2.0,
            model: ModelConfig {
                template_input_points: 512,
                search_input_points: 1024,
                embed_dims: vec![32],
                levels: levels(
                    &[0.3, 0.5, 0.7],
                    32,
                    &[&[64], &[128], &[256]],
                    &[512, 256, 128],
                    &[256, 128, 64],
                ),
                fps_start_index: 0,
                head_hidden: vec![128, 128],
                refine_hidden: vec![256, 256, 128, 128],
                pool_radius: 1.0,
                pool_max_neighbors: 32,
                batch_norm: false,
                use_prt: true,
                use_prm: true,
                use_offset: true,
                use_l2_norm: true,
                l2_eps: 1e-12,
            },
        }
    }

    /// Desk pyramid with the published schedule and batch normalization.
    pub fn paper() -> Self {
        let mut c = TrainConfig::desk();
        c.epochs = 160;
        c.batch_size = 64;
        c.model.batch_norm = true;
        c
    }

    /// Small network for fast learning experiments.
    pub fn tiny() -> Self {
        let mut c = TrainConfig::desk();
        c.epochs = 300;
        c.batch_size = 4;
        c.lr_step_epochs = 150;
        c.model.template_input_points = 128;
        c.model.search_input_points = 256;
        c.model.embed_dims = vec![32];
        c.model.levels = levels(
            &[0.3, 0.5, 0.7],
            16,
            &[&[32], &[64], &[64]],
            &[128, 64, 32],
            &[64, 32, 16],
        );
        c.model.head_hidden = vec![64, 64];
        c.model.refine_hidden = vec![64, 64, 64, 32];
        c.model.pool_max_neighbors = 16;
        c
    }

    /// Minimal network for finite-difference checks (8-point inputs).
    pub fn check() -> Self {
        let mut c = TrainConfig::desk();
        c.epochs = 1;
        c.batch_size = 1;
        c.model.template_input_points = 8;
        c.model.search_input_points = 8;
        c.model.embed_dims = vec![4];
        c.model.levels = levels(
            &[0.3, 0.5, 0.7],
            4,
            &[&[5], &[6, 6], &[6]],
            &[6, 4, 3],
            &[4, 3, 2],
        );
        c.model.head_hidden = vec![5, 4];
        c.model.refine_hidden = vec![6, 5, 5, 4];
        c.model.pool_max_neighbors = 4;
        c
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(TrainConfig::desk()),
            "paper" => Ok(TrainConfig::paper()),
            "tiny" => Ok(TrainConfig::tiny()),
            "check" => Ok(TrainConfig::check()),
            other => Err(Error::Config(format!(
                "unknown profile `{other}` (expected one of {})",
                PROFILES.join(", ")
            ))),
        }
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let drops = epoch.checked_div(self.lr_step_epochs).unwrap_or(0);
        self.lr / self.lr_divisor.powi(drops as i32)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let entries = parse_key_values(text)?;
        let mut config = TrainConfig::desk();
        for (i, (line, key, value)) in entries.iter().enumerate() {
            if key == "profile" {
                if i != 0 {
                    return Err(Error::Config(format!(
                        "line {line}: `profile` must be the first assignment"
                    )));
                }
                config = TrainConfig::profile(value)?;
            } else {
                config
                    .set(key, value)
                    .map_err(|e| Error::Config(format!("line {line}: {e}")))?;
            }
        }
        config.validate()?;
        Ok(config)
    }

    /// Applies `key=value` overrides in order, then validates.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "lr_divisor" => self.lr_divisor = parse(key, value)?,
            "lr_step_epochs" => self.lr_step_epochs = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "distortion_range" => self.distortion_range = parse(key, value)?,
            "template_extend_ratio" => self.template_extend_ratio = parse(key, value)?,
            "search_margin" => self.search_margin = parse(key, value)?,
            "template_input_points" => m.template_input_points = parse(key, value)?,
            "search_input_points" => m.search_input_points = parse(key, value)?,
            "embed_dims" => m.embed_dims = parse_list(key, value)?,
            "sa_radius" => {
                let v: Vec<f64> = parse_list(key, value)?;
                resize_levels(&mut m.levels, v.len());
                for (l, r) in m.levels.iter_mut().zip(v) {
                    l.radius = r;
                }
            }
            "sa_max_neighbors" => broadcast(key, value, &mut m.levels, |l, v| l.max_neighbors = v)?,
            "sa_mlp" => {
                let groups: Vec<&str> = value.split('/').collect();
                if groups.len() != m.levels.len() {
                    return Err(level_count_error(key, groups.len(), m.levels.len()));
                }
                for (l, g) in m.levels.iter_mut().zip(groups) {
                    l.mlp = parse_list(key, g)?;
                }
            }
            "search_points" => broadcast(key, value, &mut m.levels, |l, v| l.search_points = v)?,
            "template_points" => broadcast(key, value, &mut m.levels, |l, v| l.template_points = v)?,
            "search_sampler" => broadcast(key, value, &mut m.levels, |l, v| l.search_sampler = v)?,
            "template_sampler" => broadcast(key, value, &mut m.levels, |l, v| l.template_sampler = v)?,
            "fps_start_index" => m.fps_start_index = parse(key, value)?,
            "head_hidden" => m.head_hidden = parse_list(key, value)?,
            "refine_hidden" => m.refine_hidden = parse_list(key, value)?,
            "pool_radius" => m.pool_radius = parse(key, value)?,
            "pool_max_neighbors" => m.pool_max_neighbors = parse(key, value)?,
            "batch_norm" => m.batch_norm = parse_bool(key, value)?,
            "use_prt" => m.use_prt = parse_bool(key, value)?,
            "use_prm" => m.use_prm = parse_bool(key, value)?,
            "use_offset" => m.use_offset = parse_bool(key, value)?,
            "use_l2_norm" => m.use_l2_norm = parse_bool(key, value)?,
            "l2_eps" => m.l2_eps = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        let m = &self.model;
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return fail(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(self.lr_divisor.is_finite() && self.lr_divisor > 0.0) {
            return fail("lr_divisor must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        for (name, v) in [
            ("distortion_range", self.distortion_range),
            ("template_extend_ratio", self.template_extend_ratio),
            ("search_margin", self.search_margin),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return fail(format!("{name} must be non-negative"));
            }
        }
        if m.template_input_points == 0 || m.search_input_points == 0 {
            return fail("input point counts must be positive".into());
        }
        if m.embed_dims.is_empty() || m.embed_dims.contains(&0) {
            return fail("embed_dims must list positive widths".into());
        }
        if m.levels.is_empty() {
            return fail("at least one set-abstraction level is required".into());
        }
        for (i, l) in m.levels.iter().enumerate() {
            if !(l.radius.is_finite() && l.radius > 0.0) {
                return fail(format!("level {i}: radius must be positive"));
            }
            if l.max_neighbors == 0 || l.search_points == 0 || l.template_points == 0 {
                return fail(format!("level {i}: counts must be positive"));
            }
            if l.mlp.is_empty() || l.mlp.contains(&0) {
                return fail(format!("level {i}: sa_mlp must list positive widths"));
            }
            if l.template_sampler.is_relational() {
                return fail(format!(
                    "level {i}: template sampler `{}` needs a template of its own",
                    l.template_sampler
                ));
            }
        }
        if m.head_hidden.contains(&0) || m.refine_hidden.contains(&0) {
            return fail("head widths must be positive".into());
        }
        if !(m.pool_radius.is_finite() && m.pool_radius > 0.0) || m.pool_max_neighbors == 0 {
            return fail("pool radius and neighbor cap must be positive".into());
        }
        if !(m.l2_eps.is_finite() && m.l2_eps > 0.0) {
            return fail("l2_eps must be positive".into());
        }
        Ok(())
    }

    /// Serializes every field; `from_text(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let per_level = |f: &dyn Fn(&LevelConfig) -> String| {
            m.levels.iter().map(f).collect::<Vec<_>>().join(",")
        };
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr", format!("{:?}", self.lr));
        kv("lr_divisor", format!("{:?}", self.lr_divisor));
        kv("lr_step_epochs", self.lr_step_epochs.to_string());
        kv("lambda", format!("{:?}", self.lambda));
        kv("distortion_range", format!("{:?}", self.distortion_range));
        kv("template_extend_ratio", format!("{:?}", self.template_extend_ratio));
        kv("search_margin", format!("{:?}", self.search_margin));
        kv("template_input_points", m.template_input_points.to_string());
        kv("search_input_points", m.search_input_points.to_string());
        kv("embed_dims", join(&m.embed_dims));
        kv("sa_radius", per_level(&|l| format!("{:?}", l.radius)));
        kv("sa_max_neighbors", per_level(&|l| l.max_neighbors.to_string()));
        kv(
            "sa_mlp",
            m.levels.iter().map(|l| join(&l.mlp)).collect::<Vec<_>>().join("/"),
        );
        kv("search_points", per_level(&|l| l.search_points.to_string()));
        kv("template_points", per_level(&|l| l.template_points.to_string()));
        kv("search_sampler", per_level(&|l| l.search_sampler.to_string()));
        kv("template_sampler", per_level(&|l| l.template_sampler.to_string()));
        kv("fps_start_index", m.fps_start_index.to_string());
        kv("head_hidden", join(&m.head_hidden));
        kv("refine_hidden", join(&m.refine_hidden));
        kv("pool_radius", format!("{:?}", m.pool_radius));
        kv("pool_max_neighbors", m.pool_max_neighbors.to_string());
        kv("batch_norm", m.batch_norm.to_string());
        kv("use_prt", m.use_prt.to_string());
        kv("use_prm", m.use_prm.to_string());
        kv("use_offset", m.use_offset.to_string());
        kv("use_l2_norm", m.use_l2_norm.to_string());
        kv("l2_eps", format!("{:?}", m.l2_eps));
        s
    }
}

/// Splits `key = value` lines, dropping comments and blank lines.
/// Returns `(line number, key, value)` triples.
pub fn parse_key_values(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        out.push((i + 1, k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub(crate) fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

pub(crate) fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

pub(crate) fn parse_list<V: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<V>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v)).collect()
}

fn level_count_error(key: &str, got: usize, levels: usize) -> Error {
    Error::Config(format!("`{key}` lists {got} levels, config has {levels}"))
}

/// One value for all levels, or one per level.
fn broadcast<V: std::str::FromStr + Clone>(
    key: &str,
    value: &str,
    levels: &mut [LevelConfig],
    mut apply: impl FnMut(&mut LevelConfig, V),
) -> Result<()> {
    let vals: Vec<V> = value
        .split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
        })
        .collect::<Result<_>>()?;
    match vals.len() {
        1 => levels.iter_mut().for_each(|l| apply(l, vals[0].clone())),
        n if n == levels.len() => levels.iter_mut().zip(vals).for_each(|(l, v)| apply(l, v)),
        n => return Err(level_count_error(key, n, levels.len())),
    }
    Ok(())
}

/// Grows by repeating the last level, or truncates.
fn resize_levels(levels: &mut Vec<LevelConfig>, n: usize) {
    if n < levels.len() {
        levels.truncate(n);
    }
    while levels.len() < n {
        let last = levels.last().cloned().expect("profiles define at least one level");
        levels.push(last);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_profile_round_trips() {
        for name in PROFILES {
            let c = TrainConfig::profile(name).unwrap();
            c.validate().unwrap();
            assert_eq!(TrainConfig::from_text(&c.to_text()).unwrap(), c, "{name}");
        }
    }

    #[test]
    fn lr_schedule_divides_every_step() {
        let c = TrainConfig::paper();
        assert_eq!(c.lr_at_epoch(0), 0.001);
        assert_eq!(c.lr_at_epoch(39), 0.001);
        assert!((c.lr_at_epoch(40) - 0.0002).abs() < 1e-18);
        assert!((c.lr_at_epoch(80) - 0.00004).abs() < 1e-18);
    }

    #[test]
    fn overrides_and_profiles() {
        let c = TrainConfig::from_text(
            "profile = tiny\n# comment\nlambda = 0.5  # inline\nsearch_sampler = random,ras,hybrid\n",
        )
        .unwrap();
        assert_eq!(c.lambda, 0.5);
        assert_eq!(c.model.search_input_points, 256);
        let samplers: Vec<_> = c.model.levels.iter().map(|l| l.search_sampler).collect();
        assert_eq!(samplers, [SamplerKind::Random, SamplerKind::Ras, SamplerKind::Hybrid]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(TrainConfig::from_text("bogus = 1").is_err());
        assert!(TrainConfig::from_text("lambda = 1\nprofile = tiny").is_err());
        assert!(TrainConfig::from_text("lr = -1").is_err());
        assert!(TrainConfig::from_text("lambda = -0.1").is_err());
        assert!(TrainConfig::from_text("template_sampler = ras").is_err());
        assert!(TrainConfig::from_text("sa_mlp = 1/2").is_err());
        assert!(TrainConfig::from_text("search_points = 1,2").is_err());
        assert!(TrainConfig::from_text("no equals sign").is_err());
        assert!(TrainConfig::from_text("use_prt = maybe").is_err());
        let mut c = TrainConfig::desk();
        assert!(c.apply_overrides(&["epochs"]).is_err());
        c.apply_overrides(&["epochs=3", "use_prm = false"]).unwrap();
        assert_eq!((c.epochs, c.model.use_prm), (3, false));
    }

    #[test]
    fn level_count_follows_radius_list() {
        let c = TrainConfig::from_text("sa_radius = 0.3,0.5\nsa_mlp = 8/16\nsearch_points = 64,32\ntemplate_points = 32,16").unwrap();
        assert_eq!(c.model.levels.len(), 2);
        assert_eq!(c.model.channels(), 16);
    }
}
