use serde::{Deserialize, Serialize};

use super::layers::{AffineMap, ConvBlock};
use super::session::Session;
use super::{NnError, ParamSpec, ParamStore, Result};
use crate::tensor::Var;

/// Shape of the desk-scale CNN student.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Output channels of each stage; the stage count is its length.
    pub channels: Vec<usize>,
}

impl StudentConfig {
    pub fn desk(in_channels: usize, height: usize, width: usize, num_classes: usize) -> Self {
        Self {
            in_channels,
            height,
            width,
            num_classes,
            channels: vec![16, 32, 64, 64],
        }
    }

    /// `(C_i, H_i, W_i)` of every stage output, in order.
    pub fn stage_shapes(&self) -> Vec<(usize, usize, usize)> {
        let (mut h, mut w) = (self.height, self.width);
        self.channels
            .iter()
            .map(|&c| {
                if h >= 2 && w >= 2 {
                    h /= 2;
                    w /= 2;
                }
                (c, h, w)
            })
            .collect()
    }
}

pub struct StudentOutput {
    /// `z^s`, `[B, K]`.
    pub logits: Var,
    /// Stage outputs `G_i^s`, one per stage.
    pub stage_feats: Vec<Var>,
}

/// Stack of `ConvBlock + 2x2 average-pool` stages followed by global average
/// pooling and a linear classifier. Every stage output is exposed.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentNet {
    cfg: StudentConfig,
    stages: Vec<ConvBlock>,
    classifier: AffineMap,
}

impl StudentNet {
    pub fn new(cfg: StudentConfig) -> Result<Self> {
        if cfg.channels.is_empty() || cfg.num_classes == 0 || cfg.in_channels == 0 {
            return Err(NnError::Config(format!(
                "degenerate student config {cfg:?}"
            )));
        }
        let mut in_ch = cfg.in_channels;
        let stages = cfg
            .channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let block = ConvBlock::new(format!("stage{}", i + 1), in_ch, c);
                in_ch = c;
                block
            })
            .collect();
        let classifier = AffineMap::new("classifier", in_ch, cfg.num_classes);
        Ok(Self {
            cfg,
            stages,
            classifier,
        })
    }

    /// Rebuild the architecture from the tensors of a checkpoint.
    pub fn from_store(store: &ParamStore, height: usize, width: usize) -> Result<Self> {
        let mut channels = Vec::new();
        let mut in_channels = None;
        for i in 1.. {
            let Ok(k) = store.get(&format!("stage{i}.conv.weight")) else {
                break;
            };
            in_channels.get_or_insert(k.shape()[1]);
            channels.push(k.shape()[0]);
        }
        let in_channels =
            in_channels.ok_or_else(|| NnError::MissingParam("stage1.conv.weight".into()))?;
        let num_classes = store.get("classifier.bias")?.len();
        Self::new(StudentConfig {
            in_channels,
            height,
            width,
            num_classes,
            channels,
        })
    }

    pub fn config(&self) -> &StudentConfig {
        &self.cfg
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs: Vec<ParamSpec> = self.stages.iter().flat_map(|s| s.param_specs()).collect();
        specs.extend(self.classifier.param_specs());
        specs
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<StudentOutput> {
        let shape = s.graph.shape(x).to_vec();
        let c = &self.cfg;
        if shape.len() != 4 || shape[1..] != [c.in_channels, c.height, c.width] {
            return Err(NnError::InputShape {
                expected: vec![c.in_channels, c.height, c.width],
                actual: shape,
            });
        }
        let mut h = x;
        let mut stage_feats = Vec::with_capacity(self.stages.len());
        for block in &self.stages {
            h = block.forward(s, h)?;
            let sh = s.graph.shape(h);
            if sh[2] >= 2 && sh[3] >= 2 {
                h = s.graph.avg_pool2x2(h)?;
            }
            stage_feats.push(h);
        }
        let pooled = s.graph.adaptive_avg_pool(h)?;
        let logits = self.classifier.forward(s, pooled)?;
        Ok(StudentOutput {
            logits,
            stage_feats,
        })
    }
}
