use std::fs;
use std::path::Path;

use fedic::error::Error;
use fedic::eval::{load_model, prepare_data, run_experiment, ExperimentConfig, Method, CSV_HEADER, METRICS_FILE, SUMMARY_FILE};

fn toy(method: &str) -> ExperimentConfig {
    let text = format!(
        r#"{{
        "data": {{
            "source": {{"synthetic": {{"class_count": 4, "feature_dim": 6, "cluster_spread": 1.5}}}},
            "test_per_class": 20, "aux_per_class": 6, "ulb_size": 60,
            "long_tail": {{"imbalance_factor": 10, "head_count": 60}}
        }},
        "partition": {{"client_count": 5, "alpha": 0.3}},
        "model": {{"hidden": [12], "feature_dim": 8}},
        "rounds": {{"total_rounds": 4, "active_ratio": 0.6, "local_epochs": 1, "batch_size": 16, "local_lr": 0.05}},
        "calibration": {{"steps": 20, "batch_size": 16, "lr": 0.001, "fine_tune_steps": 10, "fine_tune_lr": 0.01, "fine_tune_batch_size": 16}},
        "distillation": {{"lambda": 0.5, "temperature": 1.0, "steps": 10, "aux_batch_size": 16, "ulb_batch_size": 16, "lr": 0.001}},
        "groups": {{"many_above": 30, "few_below": 10}},
        "method": "{method}",
        "seeds": [3, 8]
    }}"#
    );
    ExperimentConfig::from_json(&text).unwrap()
}

fn read(dir: &Path, f: &str) -> Vec<u8> {
    fs::read(dir.join(f)).unwrap()
}

#[test]
fn identical_runs_write_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = toy("fedic");
    run_experiment(&cfg, Some(a.path())).unwrap();
    run_experiment(&cfg, Some(b.path())).unwrap();
    assert_eq!(read(a.path(), METRICS_FILE), read(b.path(), METRICS_FILE));
    assert_eq!(read(a.path(), SUMMARY_FILE), read(b.path(), SUMMARY_FILE));
}

#[test]
fn csv_layout() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&toy("fedic"), Some(dir.path())).unwrap();
    let csv = String::from_utf8(read(dir.path(), METRICS_FILE)).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2 * 4);
    for r in &rows {
        let cells: Vec<&str> = r.split(',').collect();
        assert_eq!(cells.len(), 10);
        assert_eq!(cells[1], "fedic");
        assert!(!cells[7].is_empty(), "teacher accuracy present for fedic");
        assert_eq!(cells[9], "0");
    }
    let summary: serde_json::Value = serde_json::from_slice(&read(dir.path(), SUMMARY_FILE)).unwrap();
    assert_eq!(summary["method"], "fedic");
    assert_eq!(summary["student_stats"]["acc_all"]["n"], 2);
    assert!(summary["student_stats"]["acc_all"]["std"].is_number());
    assert_eq!(summary["config"]["seeds"], serde_json::json!([3, 8]));
}

#[test]
fn disabled_stages_give_the_fedavg_stream() {
    let fedavg = run_experiment(&toy("fedavg"), None).unwrap();
    let plain = run_experiment(&toy("ablation-a"), None).unwrap();
    for (x, y) in fedavg.seeds.iter().zip(&plain.seeds) {
        let sx: Vec<_> = x.rounds.iter().map(|r| &r.student).collect();
        let sy: Vec<_> = y.rounds.iter().map(|r| &r.student).collect();
        assert_eq!(sx, sy);
        assert!(x.rounds.iter().all(|r| r.teacher.is_none()));
        assert!(y.rounds.iter().all(|r| r.teacher.is_some()));
    }
}

#[test]
fn plain_ensemble_teacher_matches_saved_models() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy("ablation-a");
    cfg.save_models = true;
    let report = run_experiment(&cfg, Some(dir.path())).unwrap();
    for seed in &report.seeds {
        let mdir = dir.path().join("models").join(format!("seed-{}", seed.seed));
        let mut paths: Vec<_> = fs::read_dir(&mdir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.file_name().unwrap().to_str().unwrap().starts_with("local-"))
            .collect();
        paths.sort();
        assert_eq!(paths.len(), 3);
        let models: Vec<_> = paths.iter().map(|p| load_model(p).unwrap()).collect();
        let test = prepare_data(&cfg, seed.seed).unwrap().test;
        let (x, y) = test.full_batch::<f32>();
        let logits: Vec<_> = models.iter().map(|m| m.logits(&x).unwrap()).collect();
        let mut correct = 0;
        for (i, &label) in y.iter().enumerate() {
            let avg: Vec<f64> = (0..4)
                .map(|c| logits.iter().map(|l| l.row(i)[c] as f64).sum::<f64>() / models.len() as f64)
                .collect();
            let pred = (0..4).fold(0, |b, c| if avg[c] > avg[b] { c } else { b });
            correct += (pred == label) as usize;
        }
        let teacher = seed.final_teacher.as_ref().unwrap();
        assert_eq!(teacher.overall, correct as f64 / x.rows() as f64);
    }
}

#[test]
fn ablation_teachers_reuse_the_run_teacher() {
    let mut cfg = toy("ablation-d");
    cfg.evaluate_ablation_teachers = true;
    let report = run_experiment(&cfg, None).unwrap();
    for s in &report.seeds {
        assert_eq!(s.ablation_teachers.keys().collect::<Vec<_>>(), ["a", "b", "c", "d"]);
        assert_eq!(s.final_teacher.as_ref(), s.ablation_teachers.get("d"));
    }
}

#[test]
fn unknown_keys_are_rejected() {
    let good = serde_json::to_value(toy("fedavg")).unwrap();
    let mut bad = good.clone();
    bad["rounds"]["momentum"] = serde_json::json!(0.9);
    assert!(matches!(ExperimentConfig::from_json(&bad.to_string()), Err(Error::Config(_))));
    let mut bad = good.clone();
    bad["extra"] = serde_json::json!(1);
    assert!(ExperimentConfig::from_json(&bad.to_string()).is_err());
    assert!(ExperimentConfig::from_json(&good.to_string()).is_ok());
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = toy("fedic");
    c.data.aux_per_class = 0;
    assert!(c.validate().is_err());
    let mut c = toy("fedavg");
    c.seeds.clear();
    assert!(c.validate().is_err());
    let mut c = toy("fedic");
    c.distillation.lambda = 2.0;
    assert!(c.validate().is_err());
    assert_eq!("ablation-h".parse::<Method>().unwrap().server_plan(), Method::Fedic.server_plan());
}

#[test]
fn failures_name_their_stage() {
    let mut c = toy("fedavg");
    c.data.source = fedic::eval::DataSource::Files {
        pool: "/nonexistent/pool.fltd".into(),
        test: "/nonexistent/test.fltd".into(),
        unlabeled: "/nonexistent/ulb.fltd".into(),
    };
    match run_experiment(&c, None) {
        Err(Error::Stage { stage, .. }) => assert_eq!(stage, "data"),
        other => panic!("unexpected {other:?}"),
    }
}
