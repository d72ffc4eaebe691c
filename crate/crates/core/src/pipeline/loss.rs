use crate::geometry::{wrap_angle, Box3D, Point3};
use crate::heads::Prediction;
use crate::numeric::{bce_with_logits, masked_mse, Matrix, Real};
use crate::{Error, Result};

/// Per-seed training targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub cls: Matrix<f64>,
    pub reg: Matrix<f64>,
    pub pos_mask: Vec<bool>,
}

/// A seed is positive iff it lies inside `gt`; regression targets point
/// from every seed to the box center, with the yaw change from
/// `template_yaw`.
pub fn make_targets(seeds: &[Point3], gt: &Box3D, template_yaw: f64) -> Targets {
    let pos_mask: Vec<bool> = seeds.iter().map(|&s| gt.contains(s)).collect();
    let dyaw = wrap_angle(gt.yaw - template_yaw);
    let cls = Matrix::from_fn(seeds.len(), 1, |r, _| if pos_mask[r] { 1.0 } else { 0.0 });
    let reg = Matrix::from_fn(seeds.len(), 4, |r, c| match c {
        0 => gt.center.x - seeds[r].x,
        1 => gt.center.y - seeds[r].y,
        2 => gt.center.z - seeds[r].z,
        _ => dyaw,
    });
    Targets { cls, reg, pos_mask }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls_coarse: f64,
    pub reg_coarse: f64,
    pub cls_refined: f64,
    pub reg_refined: f64,
}

impl LossBreakdown {
    pub fn add(&mut self, other: &LossBreakdown) {
        self.total += other.total;
        self.cls_coarse += other.cls_coarse;
        self.reg_coarse += other.reg_coarse;
        self.cls_refined += other.cls_refined;
        self.reg_refined += other.reg_refined;
    }

    pub fn scaled(&self, s: f64) -> LossBreakdown {
        LossBreakdown {
            total: self.total * s,
            cls_coarse: self.cls_coarse * s,
            reg_coarse: self.reg_coarse * s,
            cls_refined: self.cls_refined * s,
            reg_refined: self.reg_refined * s,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LossGrads<T> {
    pub coarse: Prediction<T>,
    pub refined: Option<Prediction<T>>,
}

fn stage<T: Real>(pred: &Prediction<T>, targets: &Targets) -> Result<(f64, f64, Prediction<T>)> {
    if pred.len() != targets.pos_mask.len() {
        return Err(Error::shape("total_loss", "prediction rows differ from target rows"));
    }
    let (cls, d_cls) = bce_with_logits(&pred.cls_logits, &targets.cls.cast())?;
    let (reg, d_reg) = masked_mse(&pred.reg, &targets.reg.cast(), &targets.pos_mask)?;
    Ok((
        cls.as_f64(),
        reg.as_f64(),
        Prediction {
            cls_logits: d_cls,
            reg: d_reg,
        },
    ))
}

/// Coarse BCE + positive-only MSE, plus `lambda` times the same on the
/// refined prediction.
pub fn total_loss<T: Real>(
    coarse: &Prediction<T>,
    refined: Option<&Prediction<T>>,
    targets: &Targets,
    lambda: f64,
) -> Result<(LossBreakdown, LossGrads<T>)> {
    let (cls_coarse, reg_coarse, d_coarse) = stage(coarse, targets)?;
    let mut out = LossBreakdown {
        total: cls_coarse + reg_coarse,
        cls_coarse,
        reg_coarse,
        ..Default::default()
    };
    let d_refined = match refined {
        Some(p) => {
            let (c, r, mut d) = stage(p, targets)?;
            out.cls_refined = c;
            out.reg_refined = r;
            out.total += lambda * (c + r);
            d.cls_logits.scale(T::of(lambda));
            d.reg.scale(T::of(lambda));
            Some(d)
        }
        None => None,
    };
    Ok((
        out,
        LossGrads {
            coarse: d_coarse,
            refined: d_refined,
        },
    ))
}
