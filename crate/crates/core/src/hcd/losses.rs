use super::config::FusionMode;
use super::{HcdError, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Sub-logits grouped by stage: `sub[i][j]` is `z_i^j`, each `[B, K]`.
pub type SubLogits = Vec<Vec<Var>>;

fn batch_and_classes(g: &Graph, z: Var, op: &str) -> Result<(usize, usize)> {
    match *g.shape(z) {
        [b, k] if b > 0 && k > 0 => Ok((b, k)),
        ref s => Err(HcdError::Width(format!(
            "{op}: expected non-empty [B, K] logits, got {s:?}"
        ))),
    }
}

fn one_hot(labels: &[usize], k: usize, on: f64, off: f64) -> Result<Tensor> {
    let mut data = vec![off; labels.len() * k];
    for (r, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(HcdError::Label { label: y, k });
        }
        data[r * k + y] = on;
    }
    Ok(Tensor::new(vec![labels.len(), k], data)?)
}

fn check_batch(labels: &[usize], b: usize) -> Result<()> {
    if labels.len() != b {
        return Err(HcdError::Width(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    Ok(())
}

fn same_shape(g: &Graph, a: Var, b: Var, op: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(HcdError::Width(format!(
            "{op}: shapes {:?} and {:?} differ",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

/// Mean over the batch of `-log softmax(z)[y]`.
pub fn cross_entropy(g: &mut Graph, z: Var, labels: &[usize]) -> Result<Var> {
    let (b, k) = batch_and_classes(g, z, "cross_entropy")?;
    check_batch(labels, b)?;
    let hot = g.constant(one_hot(labels, k, 1.0, 0.0)?);
    let logp = g.log_softmax_t(z, 1.0)?;
    let picked = g.mul(logp, hot)?;
    let s = g.sum_all(picked);
    Ok(g.scale(s, -1.0 / b as f64))
}

/// `sum_b KL(softmax(p/tau) || exp(logq))`, with `logq` already a log-softmax.
fn kl_sum_against(g: &mut Graph, p_logits: Var, logq: Var, tau: f64) -> Result<Var> {
    let p = g.softmax_t(p_logits, tau)?;
    let logp = g.log_softmax_t(p_logits, tau)?;
    let diff = g.sub(logp, logq)?;
    let terms = g.mul(p, diff)?;
    Ok(g.sum_all(terms))
}

/// Batch-mean `KL(softmax(p/tau) || softmax(q/tau))`, unscaled.
pub fn kl_div(g: &mut Graph, p_logits: Var, q_logits: Var, tau: f64) -> Result<Var> {
    same_shape(g, p_logits, q_logits, "kl_div")?;
    let (b, _) = batch_and_classes(g, p_logits, "kl_div")?;
    let logq = g.log_softmax_t(q_logits, tau)?;
    let s = kl_sum_against(g, p_logits, logq, tau)?;
    Ok(g.scale(s, 1.0 / b as f64))
}

/// Split `[B, n*K]` shared logits into `n` blocks of `K` columns.
pub fn decompose(g: &mut Graph, z: Var, n: usize, k: usize) -> Result<Vec<Var>> {
    let width = match *g.shape(z) {
        [_, w] => w,
        ref s => {
            return Err(HcdError::Width(format!(
                "decompose: expected rank-2 logits, got {s:?}"
            )))
        }
    };
    if n == 0 || k == 0 || width != n * k {
        return Err(HcdError::Width(format!(
            "decompose: width {width} is not n*K = {n}*{k}"
        )));
    }
    (0..n)
        .map(|j| Ok(g.slice_cols(z, j * k, (j + 1) * k)?))
        .collect()
}

/// Column-wise concatenation of sub-logits, the inverse of [`decompose`].
pub fn concat_sub_logits(g: &mut Graph, parts: &[Var]) -> Result<Var> {
    let (&first, rest) = parts
        .split_first()
        .ok_or_else(|| HcdError::Width("concat_sub_logits: no parts".into()))?;
    rest.iter()
        .try_fold(first, |acc, &p| Ok(g.concat_cols(acc, p)?))
}

pub fn fuse_teacher(g: &mut Graph, z: Var, zt: Var, mode: FusionMode) -> Result<Var> {
    mode.validate()?;
    same_shape(g, z, zt, "fuse_teacher")?;
    if g.requires_grad(zt) {
        return Err(HcdError::Config(
            "teacher logits must not require gradients".into(),
        ));
    }
    Ok(match mode {
        FusionMode::Add => g.add(z, zt)?,
        FusionMode::Ratio { l1: a, l2: b } | FusionMode::Weighted { l3: a, l4: b } => {
            let zs = g.scale(z, a);
            let ts = g.scale(zt, b);
            g.add(zs, ts)?
        }
        FusionMode::None => z,
    })
}

fn count(sub: &SubLogits) -> Result<(usize, usize)> {
    let l = sub.len();
    let n = sub.first().map_or(0, Vec::len);
    if l == 0 || n == 0 || sub.iter().any(|s| s.len() != n) {
        return Err(HcdError::Width(
            "sub-logits must be a non-empty l x n grid".into(),
        ));
    }
    Ok((l, n))
}

/// `kl_scale / (l n) * sum_ij KL(p_i^j || p^s)`, batch-averaged.
///
/// With `detach_student` the student side is treated as a constant target.
pub fn sub_kd_loss(
    g: &mut Graph,
    sub: &SubLogits,
    zs: Var,
    tau: f64,
    kl_scale: f64,
    detach_student: bool,
) -> Result<Var> {
    let (l, n) = count(sub)?;
    let (b, _) = batch_and_classes(g, zs, "sub_kd_loss")?;
    let student = if detach_student { g.detach(zs) } else { zs };
    let logq = g.log_softmax_t(student, tau)?;
    let mut acc = None;
    for &z in sub.iter().flatten() {
        same_shape(g, z, zs, "sub_kd_loss")?;
        let kl = kl_sum_against(g, z, logq, tau)?;
        acc = Some(match acc {
            Some(a) => g.add(a, kl)?,
            None => kl,
        });
    }
    Ok(g.scale(acc.unwrap(), kl_scale / (l * n * b) as f64))
}

/// Mean over stages, sub-logits and batch of the cross-entropy of each sub-logit.
pub fn sub_ce_loss(g: &mut Graph, sub: &SubLogits, labels: &[usize]) -> Result<Var> {
    let (l, n) = count(sub)?;
    let mut acc = None;
    for &z in sub.iter().flatten() {
        let ce = cross_entropy(g, z, labels)?;
        acc = Some(match acc {
            Some(a) => g.add(a, ce)?,
            None => ce,
        });
    }
    Ok(g.scale(acc.unwrap(), 1.0 / (l * n) as f64))
}

/// Copy of `z` with the ground-truth column of each row replaced by `-eps`.
///
/// Other entries are bit-identical to the input and no gradient flows
/// through the replaced entries.
pub fn mask_ground_truth(g: &mut Graph, z: Var, labels: &[usize], eps: f64) -> Result<Var> {
    let (b, k) = batch_and_classes(g, z, "mask_ground_truth")?;
    check_batch(labels, b)?;
    let keep = g.constant(one_hot(labels, k, 0.0, 1.0)?);
    // -0.0 is the exact additive identity, including for signed zeros.
    let fill = g.constant(one_hot(labels, k, -eps, -0.0)?);
    let kept = g.mul(z, keep)?;
    Ok(g.add(kept, fill)?)
}

/// Thresholded squared cosine similarity between every ordered pair of
/// distinct sub-logits, averaged over stages, pairs and batch. Zero for `n = 1`.
pub fn orth_loss(g: &mut Graph, masked: &SubLogits, theta: f64) -> Result<Var> {
    let (l, n) = count(masked)?;
    let (b, _) = batch_and_classes(g, masked[0][0], "orth_loss")?;
    if n < 2 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let mut acc = None;
    for stage in masked {
        let unit = stage
            .iter()
            .map(|&z| Ok(g.l2_normalize_rows(z)?))
            .collect::<Result<Vec<_>>>()?;
        for p in 0..n {
            for q in 0..n {
                if p == q {
                    continue;
                }
                let a = g.row_dot(unit[p], unit[q])?;
                let h = g.hinge(a, theta);
                let sq = g.mul(h, h)?;
                let s = g.sum_all(sq);
                acc = Some(match acc {
                    Some(t) => g.add(t, s)?,
                    None => s,
                });
            }
        }
    }
    Ok(g.scale(acc.unwrap(), 1.0 / (l * n * (n - 1) * b) as f64))
}

/// `alpha * CE(z_s, y) + (1 - alpha) * tau^2 * KL(p_t || p_s)`.
pub fn vanilla_kd_loss(
    g: &mut Graph,
    zs: Var,
    zt: Var,
    labels: &[usize],
    alpha: f64,
    tau: f64,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(HcdError::Config(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    let ce = cross_entropy(g, zs, labels)?;
    let kl = kl_div(g, zt, zs, tau)?;
    let a = g.scale(ce, alpha);
    let c = g.scale(kl, (1.0 - alpha) * tau * tau);
    Ok(g.add(a, c)?)
}
