use serde::{Deserialize, Serialize};

use super::config::HcdConfig;
use super::losses::{
    cross_entropy, decompose, fuse_teacher, kl_div, mask_ground_truth, orth_loss, sub_ce_loss,
    sub_kd_loss, SubLogits,
};
use super::{HcdError, Result};
use crate::tensor::{Graph, Var};

/// Per-term values of one loss evaluation.
///
/// `kl` and `sub_kl` already include the temperature factor; terms whose
/// weight is zero are not evaluated and read 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub sub_ce: f64,
    pub kl: f64,
    pub sub_kl: f64,
    pub orth: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Name of the first non-finite term, in column order.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("ce", self.ce),
            ("sub_ce", self.sub_ce),
            ("kl", self.kl),
            ("sub_kl", self.sub_kl),
            ("orth", self.orth),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

fn weighted(g: &mut Graph, acc: Var, term: Var, w: f64) -> Result<Var> {
    let t = if w == 1.0 { term } else { g.scale(term, w) };
    Ok(g.add(acc, t)?)
}

/// `CE + sub_CE + lambda KL + beta sub_KL + omega orth` for one batch.
///
/// `shared` holds the CFM output of every selected stage. The sub-logits
/// are decomposed, fused with the teacher logits, used unmasked by the two
/// sub-logit losses, and masked at the label only for the orthogonality term.
pub fn hcd_total_loss(
    g: &mut Graph,
    zs: Var,
    shared: &[Var],
    zt: Var,
    labels: &[usize],
    cfg: &HcdConfig,
) -> Result<(Var, LossBreakdown)> {
    cfg.validate(cfg.stages.iter().copied().max().unwrap_or(0))?;
    if shared.len() != cfg.stages.len() {
        return Err(HcdError::Config(format!(
            "{} shared-logit tensors for {} selected stages",
            shared.len(),
            cfg.stages.len()
        )));
    }
    let k = match *g.shape(zs) {
        [_, k] => k,
        ref s => {
            return Err(HcdError::Width(format!(
                "student logits must be [B, K], got {s:?}"
            )))
        }
    };
    let mut out = LossBreakdown::default();

    let ce = cross_entropy(g, zs, labels)?;
    out.ce = g.value(ce).item();

    let mut fused: SubLogits = Vec::with_capacity(shared.len());
    for &z in shared {
        let parts = decompose(g, z, cfg.n, k)?;
        let stage = parts
            .into_iter()
            .map(|p| fuse_teacher(g, p, zt, cfg.fusion))
            .collect::<Result<Vec<_>>>()?;
        fused.push(stage);
    }

    let sub_ce = sub_ce_loss(g, &fused, labels)?;
    out.sub_ce = g.value(sub_ce).item();
    let mut total = g.add(ce, sub_ce)?;

    if cfg.lambda != 0.0 {
        let kl = kl_div(g, zt, zs, cfg.tau)?;
        let kl = g.scale(kl, cfg.kl_scale());
        out.kl = g.value(kl).item();
        total = weighted(g, total, kl, cfg.lambda)?;
    }
    if cfg.beta != 0.0 {
        let sub_kl = sub_kd_loss(
            g,
            &fused,
            zs,
            cfg.tau,
            cfg.kl_scale(),
            cfg.detach_student_in_sub_kd,
        )?;
        out.sub_kl = g.value(sub_kl).item();
        total = weighted(g, total, sub_kl, cfg.beta)?;
    }
    if cfg.omega != 0.0 {
        let masked = fused
            .iter()
            .map(|stage| {
                stage
                    .iter()
                    .map(|&z| mask_ground_truth(g, z, labels, cfg.eps_mask))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<SubLogits>>()?;
        let orth = orth_loss(g, &masked, cfg.theta)?;
        out.orth = g.value(orth).item();
        total = weighted(g, total, orth, cfg.omega)?;
    }
    out.total = g.value(total).item();
    Ok((total, out))
}
