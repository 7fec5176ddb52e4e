//! Finite-difference check of the complete HCD objective with respect to
//! every trainable parameter of student and CFM heads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{HarnessError, Result};
use crate::hcd::{hcd_total_loss, DistillNet, HcdConfig};
use crate::nn::{Mode, ParamStore, Session, StudentConfig};
use crate::tensor::{grad_check, CoordSelection, GradCheckOptions, GradCheckReport, Tensor};

#[derive(Debug, Clone)]
pub struct GradSuiteOptions {
    pub batch: usize,
    pub classes: usize,
    pub n: usize,
    /// Number of student stages, all feeding CFM heads.
    pub stages: usize,
    pub m: usize,
    pub d: usize,
    pub side: usize,
    /// Sampled parameter coordinates.
    pub coords: usize,
    pub seed: u64,
    pub check: GradCheckOptions,
}

impl Default for GradSuiteOptions {
    fn default() -> Self {
        Self {
            batch: 4,
            classes: 10,
            n: 4,
            stages: 4,
            m: 8,
            d: 32,
            side: 16,
            coords: 600,
            seed: 0,
            check: GradCheckOptions::default(),
        }
    }
}

pub struct GradSuiteReport {
    pub report: GradCheckReport,
    pub parameters: usize,
    pub coordinates_total: usize,
}

pub fn run_grad_suite(opts: &GradSuiteOptions) -> Result<GradSuiteReport> {
    if opts.batch < 2 || opts.stages == 0 {
        return Err(HarnessError::Config(
            "gradient suite needs batch >= 2 and at least one stage".into(),
        ));
    }
    let base = [16, 32, 64, 64];
    let channels: Vec<usize> = (0..opts.stages).map(|i| base[i.min(3)]).collect();
    let cfg = HcdConfig {
        n: opts.n,
        m: opts.m,
        d: opts.d,
        stages: (1..=opts.stages).collect(),
        ..HcdConfig::default()
    };
    let student = StudentConfig {
        in_channels: 1,
        height: opts.side,
        width: opts.side,
        num_classes: opts.classes,
        channels,
    };
    let net = DistillNet::new(student, Some(&cfg))?;
    let store = ParamStore::init(&net.param_specs(), opts.seed)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9);
    let mut normal = |shape: &[usize], scale: f64| {
        let len = shape.iter().product();
        let data = (0..len)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                scale * e
            })
            .collect::<Vec<f64>>();
        Tensor::new(shape.to_vec(), data).unwrap()
    };
    let x = normal(&[opts.batch, 1, opts.side, opts.side], 1.0);
    let ft = normal(&[opts.batch, opts.d], 1.0);
    let zt = normal(&[opts.batch, opts.classes], 2.0);
    let labels: Vec<usize> = (0..opts.batch)
        .map(|_| rng.random_range(0..opts.classes))
        .collect();

    let trainable = store.trainable_indices();
    let inputs: Vec<Tensor> = trainable
        .iter()
        .map(|&i| store.entry(i).tensor.clone())
        .collect();
    let f =
        |g: &mut crate::tensor::Graph, vars: &[crate::tensor::Var]| -> Result<crate::tensor::Var> {
            let bound: Vec<(usize, crate::tensor::Var)> = trainable
                .iter()
                .copied()
                .zip(vars.iter().copied())
                .collect();
            let mut s = Session::prebound(g, &store, Mode::Train, &bound);
            let xv = s.graph.constant(x.clone());
            let fv = s.graph.constant(ft.clone());
            let zv = s.graph.constant(zt.clone());
            let out = net.forward(&mut s, xv, Some(fv))?;
            let (loss, _) = hcd_total_loss(s.graph, out.logits, &out.shared, zv, &labels, &cfg)?;
            Ok(loss)
        };
    let check = GradCheckOptions {
        coords: CoordSelection::Sample {
            count: opts.coords,
            seed: opts.seed,
        },
        ..opts.check.clone()
    };
    let report = grad_check(f, &inputs, &check)?;
    Ok(GradSuiteReport {
        report,
        parameters: inputs.len(),
        coordinates_total: inputs.iter().map(Tensor::len).sum(),
    })
}
