mod common;

use std::fs;

use common::Tiny;
use hcd_core::harness::{
    self, ablate_with, gen_dataset, read_ablation, read_metrics, train, train_with, Axis,
    DatasetKind, ExperimentConfig, GenOptions, HarnessError, Method, ABLATION_HEADER,
    CHECKPOINT_FILE, METRICS_FILE, METRICS_HEADER,
};
use hcd_core::teacher::TeacherError;

#[test]
fn ce_on_blobs_fits_the_training_set() {
    let data = gen_dataset(&GenOptions::desk(DatasetKind::Blobs, 0)).unwrap();
    let cfg = ExperimentConfig {
        method: Method::Ce,
        dataset: "unused".into(),
        record_timing: false,
        ..Default::default()
    };
    let out = train_with(&cfg, &data, None, &mut |_| Ok(())).unwrap();
    let last = out.rows.last().unwrap();
    assert_eq!(out.rows.len(), 30);
    assert!(last.train_acc >= 95.0, "train acc {}", last.train_acc);
}

#[test]
fn hcd_breakdown_sums_every_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let tiny = Tiny::new(dir.path());
    let cfg = tiny.config(Method::Hcd, &dir.path().join("run"));
    let out = train(&cfg, None).unwrap();
    let h = &cfg.hcd;
    for r in &out.rows {
        let sum = r.ce + r.sub_ce + h.lambda * r.kl + h.beta * r.sub_kl + h.omega * r.orth;
        assert!(
            (sum - r.total).abs() <= 1e-10,
            "epoch {}: {sum} vs {}",
            r.epoch,
            r.total
        );
        assert!(r.kl > 0.0 && r.sub_kl > 0.0 && r.sub_ce > 0.0);
        assert_eq!(r.sec, 0.0);
    }
    let text = fs::read_to_string(dir.path().join("run").join(METRICS_FILE)).unwrap();
    assert_eq!(text.lines().next().unwrap(), METRICS_HEADER);
    assert_eq!(text.lines().count(), 1 + cfg.sgd.epochs);
    assert_eq!(
        read_metrics(&dir.path().join("run").join(METRICS_FILE)).unwrap(),
        out.rows
    );
}

#[test]
fn switched_off_hcd_reports_only_ce_terms() {
    let dir = tempfile::tempdir().unwrap();
    let tiny = Tiny::new(dir.path());
    let mut cfg = tiny.config(Method::Hcd, &dir.path().join("run"));
    cfg.hcd.lambda = 0.0;
    cfg.hcd.beta = 0.0;
    cfg.hcd.omega = 0.0;
    let out = train_with(&cfg, &tiny.data, Some(&tiny.dump), &mut |_| Ok(())).unwrap();
    for r in &out.rows {
        assert_eq!((r.kl, r.sub_kl, r.orth), (0.0, 0.0, 0.0));
        assert!(r.sub_ce > 0.0);
        assert!((r.total - (r.ce + r.sub_ce)).abs() <= 1e-12);
    }
}

#[test]
fn identical_seeds_give_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let tiny = Tiny::new(dir.path());
    let read = |name: &str| {
        let run = dir.path().join(name);
        train(&tiny.config(Method::Hcd, &run), None).unwrap();
        (
            fs::read(run.join(METRICS_FILE)).unwrap(),
            fs::read(run.join(CHECKPOINT_FILE)).unwrap(),
        )
    };
    assert_eq!(read("a"), read("b"));
}

#[test]
fn different_seeds_differ() {
    let dir = tempfile::tempdir().unwrap();
    let tiny = Tiny::new(dir.path());
    let mut a = tiny.config(Method::Ce, &dir.path().join("a"));
    a.sgd.epochs = 1;
    let mut b = a.clone();
    b.seed = 1;
    let ra = train_with(&a, &tiny.data, None, &mut |_| Ok(())).unwrap();
    let rb = train_with(&b, &tiny.data, None, &mut |_| Ok(())).unwrap();
    assert_ne!(ra.rows[0].total, rb.rows[0].total);
}

#[test]
fn inputs_are_left_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let tiny = Tiny::new(dir.path());
    let before = (
        fs::read(&tiny.data_path).unwrap(),
        fs::read(&tiny.teacher_path).unwrap(),
    );
    let mut cfg = tiny.config(Method::Hcd, &dir.path().join("run"));
    cfg.sgd.epochs = 1;
    train(&cfg, None).unwrap();
    let after = (
        fs::read(&tiny.data_path).unwrap(),
        fs::read(&tiny.teacher_path).unwrap(),
    );
    assert!(before == after);
}

#[test]
fn checkpoint_evaluates_to_the_reported_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let tiny = Tiny::new(dir.path());
    let cfg = tiny.config(Method::Kd, &dir.path().join("run"));
    let out = train(&cfg, None).unwrap();
    let n = tiny.data.n;
    let acc = harness::evaluate(
        &dir.path().join("run").join(CHECKPOINT_FILE),
        &tiny.data,
        n - cfg.test_count..n,
    )
    .unwrap();
    assert_eq!(acc, out.final_test_acc());
}

#[test]
fn non_finite_loss_names_the_term() {
    let dir = tempfile::tempdir().unwrap();
    let tiny = Tiny::new(dir.path());
    let mut cfg = tiny.config(Method::Kd, &dir.path().join("run"));
    cfg.hcd.tau = 1e-320;
    let err = train_with(&cfg, &tiny.data, Some(&tiny.dump), &mut |_| Ok(()))
        .err()
        .unwrap();
    match err {
        HarnessError::NonFinite { epoch, batch, term } => {
            assert_eq!((epoch, batch, term), (1, 0, "kl"));
        }
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn teacher_width_mismatch_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let tiny = Tiny::new(dir.path());
    let mut cfg = tiny.config(Method::Hcd, &dir.path().join("run"));
    cfg.hcd.d = 32;
    let err = train(&cfg, None).err().unwrap();
    assert!(matches!(
        err,
        HarnessError::Teacher(TeacherError::Mismatch { .. })
    ));
    assert!(err.is_validation());
    assert!(err.to_string().contains("d=8"), "{err}");
}

#[test]
fn missing_teacher_is_rejected_for_distillation() {
    let dir = tempfile::tempdir().unwrap();
    let tiny = Tiny::new(dir.path());
    let mut cfg = tiny.config(Method::Kd, &dir.path().join("run"));
    cfg.teacher = None;
    assert!(train(&cfg, None).err().unwrap().is_validation());
}

#[test]
fn ablation_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let tiny = Tiny::new(dir.path());
    let mut cfg = tiny.config(Method::Hcd, &dir.path().join("abl"));
    cfg.sgd.epochs = 1;
    let values = vec!["1".to_string(), "2".to_string()];
    let rows = ablate_with(
        &cfg,
        &tiny.data,
        Some(&tiny.dump),
        Axis::N,
        &values,
        &[0, 1],
        2,
    )
    .unwrap();
    assert_eq!(rows.len(), 4);
    let path = dir.path().join("abl").join(harness::ABLATION_FILE);
    let text = fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), ABLATION_HEADER);
    assert_eq!(read_ablation(&path).unwrap(), rows);
    let cells: Vec<_> = rows.iter().map(|r| (r.value.as_str(), r.seed)).collect();
    assert_eq!(cells, [("1", 0), ("1", 1), ("2", 0), ("2", 1)]);
}

#[test]
fn ablation_rejects_bad_values_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let tiny = Tiny::new(dir.path());
    let cfg = tiny.config(Method::Hcd, &dir.path().join("abl"));
    let err = ablate_with(
        &cfg,
        &tiny.data,
        Some(&tiny.dump),
        Axis::Stages,
        &["1+5".to_string()],
        &[0],
        1,
    )
    .unwrap_err();
    assert!(err.is_validation());
    assert!(!dir.path().join("abl").join(harness::ABLATION_FILE).exists());
}
