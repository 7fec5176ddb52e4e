#![allow(dead_code)]

use hcd_core::hcd::{orth_loss, sub_ce_loss, sub_kd_loss, vanilla_kd_loss};
use hcd_core::tensor::{conv2d_forward, matmul_forward, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ORACLE_TOL: f64 = 1e-12;
pub const ORACLE_INSTANCES: usize = 120;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rand_vec(rng, n, scale)).unwrap()
}

/// Relative-or-absolute closeness with the floor at 1.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let k = t.shape()[1];
    t.data().chunks(k).map(|r| r.to_vec()).collect()
}

pub fn naive_log_softmax(z: &[f64], tau: f64) -> Vec<f64> {
    let mut m = f64::NEG_INFINITY;
    for &v in z {
        if v / tau > m {
            m = v / tau;
        }
    }
    let mut s = 0.0;
    for &v in z {
        s += (v / tau - m).exp();
    }
    z.iter().map(|&v| v / tau - m - s.ln()).collect()
}

pub fn naive_kl(p_logits: &[f64], q_logits: &[f64], tau: f64) -> f64 {
    let lp = naive_log_softmax(p_logits, tau);
    let lq = naive_log_softmax(q_logits, tau);
    let mut s = 0.0;
    for k in 0..lp.len() {
        s += lp[k].exp() * (lp[k] - lq[k]);
    }
    s
}

pub fn naive_ce(z: &Tensor, labels: &[usize]) -> f64 {
    let r = rows(z);
    let mut s = 0.0;
    for (b, row) in r.iter().enumerate() {
        s -= naive_log_softmax(row, 1.0)[labels[b]];
    }
    s / r.len() as f64
}

pub fn naive_sub_ce(sub: &[Vec<Tensor>], labels: &[usize]) -> f64 {
    let mut s = 0.0;
    let mut count = 0.0;
    for stage in sub {
        for z in stage {
            s += naive_ce(z, labels);
            count += 1.0;
        }
    }
    s / count
}

pub fn naive_sub_kd(sub: &[Vec<Tensor>], zs: &Tensor, tau: f64, kl_scale: f64) -> f64 {
    let student = rows(zs);
    let mut s = 0.0;
    let mut count = 0.0;
    for stage in sub {
        for z in stage {
            for (b, row) in rows(z).iter().enumerate() {
                s += naive_kl(row, &student[b], tau);
            }
            count += 1.0;
        }
    }
    kl_scale * s / (count * student.len() as f64)
}

pub fn naive_vanilla_kd(zs: &Tensor, zt: &Tensor, labels: &[usize], alpha: f64, tau: f64) -> f64 {
    let s = rows(zs);
    let t = rows(zt);
    let mut kl = 0.0;
    for b in 0..s.len() {
        kl += naive_kl(&t[b], &s[b], tau);
    }
    alpha * naive_ce(zs, labels) + (1.0 - alpha) * tau * tau * kl / s.len() as f64
}

pub fn naive_orth(masked: &[Vec<Tensor>], theta: f64) -> f64 {
    let n = masked[0].len();
    if n < 2 {
        return 0.0;
    }
    let batch = masked[0][0].shape()[0];
    let mut s = 0.0;
    for stage in masked {
        let unit: Vec<Vec<Vec<f64>>> = stage
            .iter()
            .map(|z| {
                rows(z)
                    .into_iter()
                    .map(|r| {
                        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                        r.iter().map(|v| v / norm).collect()
                    })
                    .collect()
            })
            .collect();
        for b in 0..batch {
            for p in 0..n {
                for q in 0..n {
                    if p == q {
                        continue;
                    }
                    let mut a = 0.0;
                    for k in 0..unit[p][b].len() {
                        a += unit[p][b][k] * unit[q][b][k];
                    }
                    let h = (a - theta).max(0.0);
                    s += h * h;
                }
            }
        }
    }
    s / (masked.len() * n * (n - 1) * batch) as f64
}

pub fn naive_matmul(a: &Tensor, w: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], w.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.data()[i * k + p] * w.data()[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// 3x3, stride 1, zero padding 1 cross-correlation.
pub fn naive_conv2d(x: &Tensor, k: &Tensor) -> Vec<f64> {
    let [b, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let o = k.shape()[0];
    let xi = |bb: usize, cc: usize, i: isize, j: isize| -> f64 {
        if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
            0.0
        } else {
            x.data()[((bb * c + cc) * h + i as usize) * w + j as usize]
        }
    };
    let mut out = vec![0.0; b * o * h * w];
    for bb in 0..b {
        for oo in 0..o {
            for i in 0..h {
                for j in 0..w {
                    let mut s = 0.0;
                    for cc in 0..c {
                        for di in 0..3 {
                            for dj in 0..3 {
                                let kv = k.data()[((oo * c + cc) * 3 + di) * 3 + dj];
                                s += kv
                                    * xi(
                                        bb,
                                        cc,
                                        i as isize + di as isize - 1,
                                        j as isize + dj as isize - 1,
                                    );
                            }
                        }
                    }
                    out[((bb * o + oo) * h + i) * w + j] = s;
                }
            }
        }
    }
    out
}

fn grid(rng: &mut ChaCha8Rng, l: usize, n: usize, b: usize, k: usize) -> Vec<Vec<Tensor>> {
    (0..l)
        .map(|_| (0..n).map(|_| rand_tensor(rng, &[b, k], 3.0)).collect())
        .collect()
}

fn labels(rng: &mut ChaCha8Rng, b: usize, k: usize) -> Vec<usize> {
    (0..b).map(|_| rng.random_range(0..k)).collect()
}

fn on_graph<F>(sub: &[Vec<Tensor>], f: F) -> f64
where
    F: FnOnce(&mut Graph, &Vec<Vec<hcd_core::tensor::Var>>) -> hcd_core::tensor::Var,
{
    let mut g = Graph::new();
    let vars = sub
        .iter()
        .map(|s| s.iter().map(|t| g.constant(t.clone())).collect())
        .collect();
    let out = f(&mut g, &vars);
    g.value(out).item()
}

/// Largest relative error of each graph function against its loop oracle.
pub struct OracleSweep {
    pub instances: usize,
    pub results: Vec<(&'static str, f64)>,
}

pub fn oracle_sweep(instances: usize, seed: u64) -> OracleSweep {
    let mut r = rng(seed);
    let mut worst = [0.0f64; 6];
    let mut track = |i: usize, a: f64, b: f64| {
        let e = (a - b).abs() / b.abs().max(1.0);
        if !(e <= worst[i]) {
            worst[i] = e;
        }
    };
    for _ in 0..instances {
        let l = r.random_range(1..=3);
        let n = r.random_range(1..=4);
        let b = r.random_range(1..=4);
        let k = r.random_range(2..=7);
        let sub = grid(&mut r, l, n, b, k);
        let zs = rand_tensor(&mut r, &[b, k], 3.0);
        let zt = rand_tensor(&mut r, &[b, k], 3.0);
        let y = labels(&mut r, b, k);
        let tau = r.random_range(0.5..6.0);
        let theta = r.random_range(0.0..1.0);
        let alpha = r.random_range(0.0..1.0);
        let scale = if r.random_bool(0.5) { tau * tau } else { 1.0 };

        let got = on_graph(&sub, |g, v| orth_loss(g, v, theta).unwrap());
        track(0, got, naive_orth(&sub, theta));

        let got = on_graph(&sub, |g, v| {
            let s = g.constant(zs.clone());
            sub_kd_loss(g, v, s, tau, scale, false).unwrap()
        });
        track(1, got, naive_sub_kd(&sub, &zs, tau, scale));

        let got = on_graph(&sub, |g, v| sub_ce_loss(g, v, &y).unwrap());
        track(2, got, naive_sub_ce(&sub, &y));

        let got = on_graph(&[], |g, _| {
            let s = g.constant(zs.clone());
            let t = g.constant(zt.clone());
            vanilla_kd_loss(g, s, t, &y, alpha, tau).unwrap()
        });
        track(3, got, naive_vanilla_kd(&zs, &zt, &y, alpha, tau));

        let (bb, c, h, w, o) = (
            r.random_range(1..=2),
            r.random_range(1..=3),
            r.random_range(1..=5),
            r.random_range(1..=5),
            r.random_range(1..=3),
        );
        let x = rand_tensor(&mut r, &[bb, c, h, w], 1.0);
        let kern = rand_tensor(&mut r, &[o, c, 3, 3], 1.0);
        let got = conv2d_forward(&x, &kern).unwrap();
        for (a, e) in got.data().iter().zip(naive_conv2d(&x, &kern)) {
            track(4, *a, e);
        }

        let (m, kk, nn) = (
            r.random_range(1..=6),
            r.random_range(1..=9),
            r.random_range(1..=6),
        );
        let a = rand_tensor(&mut r, &[m, kk], 1.0);
        let wt = rand_tensor(&mut r, &[kk, nn], 1.0);
        let got = matmul_forward(&a, &wt).unwrap();
        for (x, e) in got.data().iter().zip(naive_matmul(&a, &wt)) {
            track(5, *x, e);
        }
    }
    let names = [
        "orth_loss",
        "sub_kd_loss",
        "sub_ce_loss",
        "vanilla_kd_loss",
        "conv2d",
        "matmul",
    ];
    OracleSweep {
        instances,
        results: names.into_iter().zip(worst).collect(),
    }
}

use hcd_core::harness::{gen_dataset, Dataset, DatasetKind, ExperimentConfig, GenOptions, Method};
use hcd_core::teacher::{synth_teacher, write_dump, SynthTeacherOptions, TeacherDump};
use std::path::{Path, PathBuf};

/// A few-second experiment: 160 blobs of 1x8x8 in 4 classes, a 2-stage
/// student and an 8-wide teacher, written under `dir`.
pub struct Tiny {
    pub data: Dataset,
    pub dump: TeacherDump,
    pub data_path: PathBuf,
    pub teacher_path: PathBuf,
}

impl Tiny {
    pub fn new(dir: &Path) -> Self {
        let opts = GenOptions {
            n: 160,
            k: 4,
            h: 8,
            w: 8,
            ..GenOptions::desk(DatasetKind::Blobs, 3)
        };
        let data = gen_dataset(&opts).unwrap();
        let dump = synth_teacher(
            &data.images,
            data.shape(),
            &data.labels,
            data.k,
            &SynthTeacherOptions::new(0.9, 8, 4),
        )
        .unwrap();
        let data_path = dir.join("tiny.hcdx");
        let teacher_path = dir.join("tiny.hcdt");
        data.save(&data_path).unwrap();
        write_dump(&teacher_path, &dump).unwrap();
        Self {
            data,
            dump,
            data_path,
            teacher_path,
        }
    }

    pub fn config(&self, method: Method, out: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            method,
            dataset: self.data_path.clone(),
            teacher: Some(self.teacher_path.clone()),
            out_dir: out.to_path_buf(),
            test_count: 40,
            channels: vec![4, 8],
            record_timing: false,
            ..Default::default()
        };
        cfg.hcd.stages = vec![1, 2];
        cfg.hcd.m = 4;
        cfg.hcd.d = 8;
        cfg.sgd.epochs = 3;
        cfg.sgd.batch_size = 16;
        cfg.sgd.lr_milestones = vec![2];
        cfg
    }
}
