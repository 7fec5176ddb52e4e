use super::config::HcdConfig;
use super::{HcdError, Result};
use crate::nn::{AffineMap, ConvBlock, ParamSpec, Session, StudentConfig, StudentNet};
use crate::tensor::Var;

/// Projector from one student stage plus the teacher feature to `n*K`
/// shared logits: two conv blocks, global pooling, concatenation with the
/// teacher feature, `FC1 -> ReLU -> FC2`.
#[derive(Debug, Clone, PartialEq)]
pub struct CfmHead {
    pub stage: usize,
    c_in: usize,
    d: usize,
    block1: ConvBlock,
    block2: ConvBlock,
    fc1: AffineMap,
    fc2: AffineMap,
}

impl CfmHead {
    pub fn new(stage: usize, c_in: usize, m: usize, d: usize, n: usize, k: usize) -> Self {
        let p = format!("cfm{stage}");
        Self {
            stage,
            c_in,
            d,
            block1: ConvBlock::new(format!("{p}.conv1"), c_in, m),
            block2: ConvBlock::new(format!("{p}.conv2"), m, m),
            fc1: AffineMap::new(format!("{p}.fc1"), m + d, d),
            fc2: AffineMap::new(format!("{p}.fc2"), d, n * k),
        }
    }

    pub fn out_width(&self) -> usize {
        self.fc2.out_dim
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        [
            self.block1.param_specs(),
            self.block2.param_specs(),
            self.fc1.param_specs(),
            self.fc2.param_specs(),
        ]
        .concat()
    }

    /// Shared logits `[B, n*K]` for a stage feature `[B, C_i, H, W]` and
    /// detached teacher features `[B, d]`.
    pub fn forward(&self, s: &mut Session<'_>, stage_feat: Var, teacher_feat: Var) -> Result<Var> {
        let fs = s.graph.shape(stage_feat).to_vec();
        let ft = s.graph.shape(teacher_feat).to_vec();
        if fs.len() != 4 || fs[1] != self.c_in {
            return Err(HcdError::Width(format!(
                "cfm{}: stage feature {fs:?} does not have {} channels",
                self.stage, self.c_in
            )));
        }
        if ft != [fs[0], self.d] {
            return Err(HcdError::Width(format!(
                "cfm{}: teacher feature {ft:?}, expected [{}, {}]",
                self.stage, fs[0], self.d
            )));
        }
        if s.graph.requires_grad(teacher_feat) {
            return Err(HcdError::Config(
                "teacher features must not require gradients".into(),
            ));
        }
        let h = self.block1.forward(s, stage_feat)?;
        let h = self.block2.forward(s, h)?;
        let pooled = s.graph.adaptive_avg_pool(h)?;
        let cat = s.graph.concat_cols(pooled, teacher_feat)?;
        let hidden = self.fc1.forward(s, cat)?;
        let hidden = s.graph.relu(hidden);
        Ok(self.fc2.forward(s, hidden)?)
    }
}

/// Student backbone plus one CFM head per selected stage (none for the
/// plain CE and KD methods).
#[derive(Debug, Clone, PartialEq)]
pub struct DistillNet {
    pub student: StudentNet,
    pub heads: Vec<CfmHead>,
}

pub struct NetOutput {
    pub logits: Var,
    /// Shared logits of each head, in stage order.
    pub shared: Vec<Var>,
}

impl DistillNet {
    pub fn new(student: StudentConfig, hcd: Option<&HcdConfig>) -> Result<Self> {
        let k = student.num_classes;
        let shapes = student.stage_shapes();
        let student = StudentNet::new(student)?;
        let heads = match hcd {
            Some(cfg) => {
                cfg.validate(shapes.len())?;
                cfg.stages
                    .iter()
                    .map(|&i| CfmHead::new(i, shapes[i - 1].0, cfg.m, cfg.d, cfg.n, k))
                    .collect()
            }
            None => Vec::new(),
        };
        Ok(Self { student, heads })
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = self.student.param_specs();
        for h in &self.heads {
            specs.extend(h.param_specs());
        }
        specs
    }

    pub fn forward(
        &self,
        s: &mut Session<'_>,
        x: Var,
        teacher_feat: Option<Var>,
    ) -> Result<NetOutput> {
        let out = self.student.forward(s, x)?;
        let mut shared = Vec::with_capacity(self.heads.len());
        if !self.heads.is_empty() {
            let ft = teacher_feat
                .ok_or_else(|| HcdError::Config("CFM heads need teacher features".into()))?;
            for h in &self.heads {
                shared.push(h.forward(s, out.stage_feats[h.stage - 1], ft)?);
            }
        }
        Ok(NetOutput {
            logits: out.logits,
            shared,
        })
    }
}
