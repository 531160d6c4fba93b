use super::*;
use crate::models::ShallowParams;
use crate::split::make_aligned_splits;
use crate::synth::{generate_cohort, unit_pattern, CohortSpec, ComponentRef, ComponentSpec, SubjectVariability, TaskGenSpec, Waveform};
use alloc::string::ToString;
use alloc::vec;

fn cohort(n_subjects: usize, snr: f64) -> Vec<TaskDataset> {
    let comp = |id: &str, center: f64, f: f64, w: &[f64]| ComponentSpec {
        id: id.into(),
        waveform: Waveform { center_ms: center, width_ms: 90.0, frequency_hz: f, amplitude: 1.0 },
        spatial_pattern: unit_pattern(w),
    };
    let r = |id: &str| ComponentRef { component: id.into(), polarity: 1 };
    let task = |id: &str, on: &str| {
        let mut classes = BTreeMap::new();
        classes.insert("off".to_string(), vec![r("base")]);
        classes.insert("on".to_string(), vec![r("base"), r(on)]);
        TaskGenSpec { task_id: id.into(), label_space: vec!["off".into(), "on".into()], classes, noise_snr_db: snr }
    };
    let spec = CohortSpec {
        n_subjects,
        m: 64,
        c: 4,
        sampling_rate: 128.0,
        components: vec![
            comp("base", 200.0, 0.0, &[1.0, 1.0, 1.0, 1.0]),
            comp("a", 250.0, 10.0, &[1.0, -1.0, 0.0, 0.0]),
            comp("b", 250.0, 10.0, &[0.0, 0.0, 1.0, -1.0]),
        ],
        tasks: vec![task("A", "a"), task("B", "b"), task("C", "a")],
        subject_variability: SubjectVariability { gain_std: 0.1, latency_jitter_ms: 10.0 },
    };
    generate_cohort(&spec, 12, 3).unwrap().into_values().collect()
}

fn config(seed: u64) -> GridConfig {
    let mut cfg = GridConfig::new(ArchKind::Shallow, seed);
    cfg.arch = ArchParams::Shallow(ShallowParams { n_filters: 6, filter_time_length: 9, pool_time_length: 16, pool_time_stride: 8, drop_prob: 0.25 });
    cfg.train.learning_rate = 3e-3;
    cfg.train.max_epochs = 12;
    cfg.train.patience = 4;
    cfg.train.batch_size = 32;
    cfg
}

fn plan(tasks: &[TaskDataset], k: usize) -> AlignedSplitPlan {
    make_aligned_splits(&tasks[0].subjects(), k, 11).unwrap()
}

#[test]
fn grid_shape_freeze_and_audit() {
    let tasks = cohort(10, 15.0);
    let p = plan(&tasks, 5);
    let out = run_transfer_grid(&tasks, &p, &config(1)).unwrap();
    let m = &out.matrix;
    assert_eq!(m.tasks, vec!["A", "B", "C"]);
    assert_eq!(m.chance, vec![0.5; 3]);
    for (i, row) in m.cells.iter().enumerate() {
        for (j, c) in row.iter().enumerate() {
            assert_eq!(c.fold_accuracies.len(), 5);
            assert_eq!(c.reference, i == j);
            assert_eq!(c.subject_accuracies().len(), 10);
        }
    }
    // 5 folds x 3 sources x 2 targets
    let checks = out.freeze_checks();
    assert_eq!(checks.len(), 30);
    assert!(checks.iter().all(|(_, c)| c.freeze.as_ref().is_some_and(|f| f.before == f.after)));
    assert_eq!(audit_usage(&p, &out.usage()).unwrap(), 45);

    // A and C share the discriminative component; B does not
    let s = |a: &str, b: &str| m.cell(a, b).unwrap().mean;
    assert!(s("A", "A") > 0.9 && s("B", "B") > 0.9);
    assert!(s("A", "C") > 0.85, "A->C {}", s("A", "C"));

    let csv = m.to_csv();
    assert!(csv.starts_with("source,A,B,C\nA,"));
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.contains('±'));
}

#[test]
fn leaked_subject_is_caught() {
    let tasks = cohort(6, 15.0);
    let p = plan(&tasks, 3);
    let leak = UsageEntry {
        fold: 1,
        stage: Stage::Probe,
        source: "A".into(),
        target: "B".into(),
        subjects: [p.folds[1].test_subjects[0].clone()].into_iter().collect(),
    };
    assert!(matches!(audit_usage(&p, &[leak]), Err(Error::Leakage(_))));
}

#[test]
fn diagonal_equals_standard_decoding() {
    let tasks = cohort(6, 15.0);
    let p = plan(&tasks, 3);
    let cfg = config(4);
    let unit = run_unit(&tasks, &p, &cfg, 2, "B").unwrap();
    let b = &tasks[1];
    let seed = pretrain_seed(cfg.master_seed(), 2, "B");
    let mut model = Model::build(&cfg.arch_spec(b), seed).unwrap();
    let f = &p.folds[2];
    let batch = |s: &[String]| Batch::from_trials(&b.select(s), b.m, b.c).unwrap();
    fit(&mut model, &batch(&f.train_subjects), &batch(&f.val_subjects), &cfg.train.with_seed(seed)).unwrap();
    let e = evaluate(&model, &batch(&f.test_subjects)).unwrap();
    assert_eq!(unit.cells[0].target, "B");
    assert_eq!(unit.cells[0].evaluation, e);
}

#[test]
fn single_task_grid_is_one_by_one() {
    let tasks = cohort(6, 15.0);
    let one = vec![tasks[0].clone()];
    let p = plan(&one, 3);
    let out = run_transfer_grid(&one, &p, &config(2)).unwrap();
    assert_eq!(out.matrix.cells.len(), 1);
    assert_eq!(out.matrix.cells[0].len(), 1);
    assert!(out.matrix.cells[0][0].reference);
    assert!(out.freeze_checks().is_empty());
}

#[test]
fn grid_is_deterministic_and_units_are_order_free() {
    let tasks = cohort(6, 10.0);
    let p = plan(&tasks, 3);
    let cfg = config(9);
    let a = run_transfer_grid(&tasks, &p, &cfg).unwrap();
    let b = run_transfer_grid(&tasks, &p, &cfg).unwrap();
    assert_eq!(a, b);
    let mut units: Vec<UnitResult> = grid_units(&tasks, &p).into_iter().rev().map(|(f, s)| run_unit(&tasks, &p, &cfg, f, &s).unwrap()).collect();
    units.reverse();
    assert_eq!(assemble(&tasks, &p, ArchKind::Shallow, &units).unwrap(), a.matrix);
}

#[test]
fn probing_own_source_matches_reference() {
    let tasks = cohort(8, 15.0);
    let p = plan(&tasks, 4);
    let cfg = config(5);
    let a = &tasks[0];
    let f = &p.folds[0];
    let batch = |s: &[String]| Batch::from_trials(&a.select(s), a.m, a.c).unwrap();
    let (tr, va, te) = (batch(&f.train_subjects), batch(&f.val_subjects), batch(&f.test_subjects));
    let mut model = Model::build(&cfg.arch_spec(a), 1).unwrap();
    fit(&mut model, &tr, &va, &cfg.train).unwrap();
    let reference = evaluate(&model, &te).unwrap().balanced_accuracy;
    let probe_cfg = TrainConfig { max_epochs: 40, patience: 10, ..cfg.train.with_seed(77) };
    let (probed, _, freeze) = linear_probe(&model, &tr, &va, 2, &probe_cfg).unwrap();
    assert_eq!(freeze.before, freeze.after);
    assert_eq!(probed.representer_digest(), model.representer_digest());
    let probed_acc = evaluate(&probed, &te).unwrap().balanced_accuracy;
    assert!((probed_acc - reference).abs() <= 0.05, "probe {probed_acc} vs reference {reference}");
}

#[test]
fn untrained_representer_on_hard_data_is_near_chance() {
    let tasks = cohort(8, -25.0);
    let p = plan(&tasks, 4);
    let cfg = config(6);
    let a = &tasks[1];
    let f = &p.folds[1];
    let batch = |s: &[String]| Batch::from_trials(&a.select(s), a.m, a.c).unwrap();
    let model = Model::build(&cfg.arch_spec(a), 3).unwrap();
    let (probed, _, _) = linear_probe(&model, &batch(&f.train_subjects), &batch(&f.val_subjects), 2, &cfg.train).unwrap();
    let acc = evaluate(&probed, &batch(&f.test_subjects)).unwrap().balanced_accuracy;
    assert!((acc - 0.5).abs() <= 0.1, "random representer accuracy {acc}");
}

#[test]
fn input_errors() {
    let tasks = cohort(6, 10.0);
    let p = plan(&tasks, 3);
    let cfg = config(1);
    // mismatched shapes
    let mut bad = tasks.clone();
    bad[1].c = 2;
    bad[1].trials.iter_mut().for_each(|t| t.samples.truncate(t.samples.len() / 2));
    assert!(matches!(run_transfer_grid(&bad, &p, &cfg), Err(Error::Shape(_))));
    // plan does not cover the cohort
    let small = make_aligned_splits(&tasks[0].subjects()[..5], 2, 1).unwrap();
    assert!(matches!(run_transfer_grid(&tasks, &small, &cfg), Err(Error::Dataset(_))));
    assert!(run_unit(&tasks, &p, &cfg, 7, "A").is_err());
    assert!(run_unit(&tasks, &p, &cfg, 0, "Z").is_err());
    // probing with data of another shape
    let model = Model::build(&cfg.arch_spec(&tasks[0]), 1).unwrap();
    let wrong = Batch::<f32>::from_trials(&bad[1].select(&bad[1].subjects()), 64, 2).unwrap();
    assert!(matches!(linear_probe(&model, &wrong, &wrong, 2, &cfg.train), Err(Error::Shape(_))));
    // failing cells are named
    let mut tiny = cfg.clone();
    tiny.train.learning_rate = -1.0;
    let err = run_unit(&tasks, &p, &tiny, 1, "C").unwrap_err();
    assert!(format!("{err}").contains("fold 1, source C"), "{err}");
}
