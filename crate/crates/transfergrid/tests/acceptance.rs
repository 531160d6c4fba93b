//! Acceptance run: prints one PASS/FAIL line per criterion and fails if any
//! criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use transfergrid::artifacts::{DETERMINISTIC_OUTPUTS, GRAPH_DOT};
use transfergrid::dataio;
use transfergrid::fsutil::read_json;
use transfergrid::pipeline::{self, PipelineConfig, TrainOverrides, RUN_MANIFEST, UNITS_DIR};
use transfergrid_core::analysis::{
    bonferroni_adjust, emit_transfer_graph, exhaustive_average_linkage, normal_cdf, permutation_signed_rank, rescale, rescale_scores, stouffer_combine,
    upgma_cluster, TransferabilityScores,
};
use transfergrid_core::dataset::TaskDataset;
use transfergrid_core::engine::{Graph, Tensor};
use transfergrid_core::models::{finite_diff_check, ArchKind, ArchParams, ArchitectureSpec, EegnetParams, InceptionParams, Mode, Model, ShallowParams};
use transfergrid_core::seed;
use transfergrid_core::split::make_aligned_splits;
use transfergrid_core::synth::{generate_cohort, CohortSpec, ComponentRef, ComponentSpec, SubjectVariability, TaskGenSpec, Waveform};
use transfergrid_core::transfer::{audit_usage, run_transfer_grid, GridConfig, TransferMatrix, UnitResult};

use common::{fixture, quick_config};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn scratch() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| tempfile::tempdir().unwrap()).path()
}

// --- 1 ---------------------------------------------------------------------

fn reduced_specs() -> Vec<ArchitectureSpec> {
    let base = |params| ArchitectureSpec { m: 32, c: 3, n_classes: 2, sampling_rate: 32.0, params };
    vec![
        base(ArchParams::Shallow(ShallowParams { n_filters: 4, filter_time_length: 5, pool_time_length: 10, pool_time_stride: 5, drop_prob: 0.5 })),
        base(ArchParams::Eegnet(EegnetParams { f1: 2, depth: 2, f2: 4, kernel_length: 8, separable_length: 4, pool1: 2, pool2: 2, drop_prob: 0.25 })),
        base(ArchParams::Inception(InceptionParams { scales_s: vec![0.25, 0.125, 0.0625], n_filters: 2, depth: 2, pool1: 2, pool2: 2, drop_prob: 0.25 })),
    ]
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut ok = true;
    for spec in reduced_specs() {
        let mut model: Model<f64> = Model::build(&spec, 21).map_err(|e| e.to_string())?;
        let mut rng = seed::rng(22);
        let x = Tensor::from_vec(&[5, 1, spec.m, spec.c], (0..5 * spec.m * spec.c).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        // non-default batch-norm statistics
        model.set_mode(Mode::Train);
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let f = model.forward_graph(&mut g, xi, Some(&mut seed::rng(1))).map_err(|e| e.to_string())?;
        model.update_running_stats(&f.batch_stats);
        model.set_mode(Mode::Eval);
        let r = finite_diff_check(&model, &x, 1e-4).map_err(|e| e.to_string())?;
        ok &= r.passed;
        parts.push(format!("{} max rel err {:.2e} over {} coords", spec.kind().name(), r.report.max_rel_error, r.report.checked));
    }
    let t = start.elapsed();
    check(ok && t < Duration::from_secs(60), format!("{}; {:.1} s", parts.join(", "), t.as_secs_f64()))
}

// --- 2 ---------------------------------------------------------------------

fn rescale_suite() -> Outcome {
    let cases = [(0.44, 0.5, 0.8, 0.0), (0.5, 0.5, 0.8, 0.0), (0.8, 0.5, 0.8, 1.0), (0.65, 0.5, 0.8, 0.5)];
    let got: Vec<Option<f64>> = cases.iter().map(|&(a, c, r, _)| rescale(a, c, r)).collect();
    let ok = cases.iter().zip(&got).all(|(c, g)| g.is_some_and(|v| (v - c.3).abs() < 1e-12));
    check(ok, format!("clamp/zero/fixed point/midpoint -> {got:?}"))
}

// --- shared planted-asymmetry grid (3, 4, 5, 10) ---------------------------

struct PlantedRun {
    dir: PathBuf,
    data: PathBuf,
    matrix: TransferMatrix,
    units: Vec<UnitResult>,
    elapsed: Duration,
    tasks: Vec<TaskDataset>,
    generated: BTreeMap<String, TaskDataset>,
}

fn planted() -> Result<&'static PlantedRun, String> {
    static RUN: OnceLock<Result<PlantedRun, String>> = OnceLock::new();
    RUN.get_or_init(|| {
        let start = Instant::now();
        let spec_path = fixture("nested_cohort.json");
        let data = scratch().join("nested_data");
        pipeline::synthesize(&spec_path, &data, 20, 7).map_err(|e| e.to_string())?;
        let spec: CohortSpec = read_json(&spec_path).map_err(|e| e.to_string())?;
        let generated = generate_cohort(&spec, 20, 7).map_err(|e| e.to_string())?;
        let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
        let cfg = PipelineConfig {
            data: data.clone(),
            archs: vec![ArchKind::Shallow],
            folds: 5,
            seed: 7,
            out: scratch().join("nested_run"),
            threshold: 0.05,
            permutations: 10_000,
            jobs,
            split: None,
            overrides: TrainOverrides { learning_rate: Some(1e-3), max_epochs: Some(60), patience: Some(15) },
        };
        let dir = pipeline::run_pipeline(&cfg).map_err(|e| e.to_string())?.remove(0);
        let elapsed = start.elapsed();
        let matrix: TransferMatrix = read_json(&dir.join("matrix.json")).map_err(|e| e.to_string())?;
        let mut units = Vec::new();
        let mut files: Vec<PathBuf> = fs::read_dir(dir.join(UNITS_DIR)).unwrap().map(|e| e.unwrap().path()).filter(|p| !p.ends_with("index.json")).collect();
        files.sort();
        for f in files {
            units.push(read_json::<UnitResult>(&f).map_err(|e| e.to_string())?);
        }
        let tasks = dataio::load_datasets(&data).map_err(|e| e.to_string())?;
        Ok(PlantedRun { dir, data, matrix, units, elapsed, tasks, generated })
    })
    .as_ref()
    .map_err(Clone::clone)
}

fn freeze_invariant() -> Outcome {
    let run = planted()?;
    let probes: Vec<_> = run.units.iter().flat_map(|u| u.cells.iter().filter_map(|c| c.freeze.as_ref())).collect();
    let violations = probes.iter().filter(|f| f.before != f.after).count();
    let expected = run.matrix.n_folds * run.matrix.tasks.len() * (run.matrix.tasks.len() - 1);
    check(
        violations == 0 && probes.len() == expected,
        format!("{} tasks x {} folds: {} probes checked, {violations} digest changes", run.matrix.tasks.len(), run.matrix.n_folds, probes.len()),
    )
}

fn leakage_audit() -> Outcome {
    let run = planted()?;
    let manifest: pipeline::RunManifest = read_json(&run.dir.join(RUN_MANIFEST)).map_err(|e| e.to_string())?;
    let usage: Vec<_> = run.units.iter().flat_map(|u| u.usage.iter().cloned()).collect();
    let mut overlaps = 0;
    for u in &usage {
        let test: BTreeSet<&String> = manifest.plan.folds[u.fold].test_subjects.iter().collect();
        overlaps += u.subjects.iter().filter(|s| test.contains(s)).count();
    }
    let audited = audit_usage(&manifest.plan, &usage).map_err(|e| e.to_string())?;
    check(overlaps == 0 && audited == usage.len() && !usage.is_empty(), format!("{} gradient-update logs, {overlaps} test-subject overlaps", usage.len()))
}

fn planted_asymmetry() -> Outcome {
    let run = planted()?;
    let m = &run.matrix;
    let (a, b) = (m.index("A").ok_or("task A missing")?, m.index("B").ok_or("task B missing")?);
    let (ab, ba) = (m.cells[a][b].mean, m.cells[b][a].mean);
    let (ca, cb) = (m.chance[a], m.chance[b]);
    check(
        ab >= cb + 0.10 && ba <= ca + 0.05 && run.elapsed < Duration::from_secs(30 * 60),
        format!(
            "a(A,B) = {ab:.3} (need >= {:.2}), a(B,A) = {ba:.3} (need <= {:.2}), a(A,A) = {:.3}; {:.0} s",
            cb + 0.10,
            ca + 0.05,
            m.cells[a][a].mean,
            run.elapsed.as_secs_f64()
        ),
    )
}

// --- 6 ---------------------------------------------------------------------

fn separable_cohort() -> CohortSpec {
    let s = 1.0 / 8f64.sqrt();
    CohortSpec {
        n_subjects: 10,
        m: 128,
        c: 8,
        sampling_rate: 128.0,
        components: vec![
            ComponentSpec {
                id: "base".into(),
                waveform: Waveform { center_ms: 300.0, width_ms: 120.0, frequency_hz: 0.0, amplitude: 1.0 },
                spatial_pattern: vec![s; 8],
            },
            ComponentSpec {
                id: "target".into(),
                waveform: Waveform { center_ms: 600.0, width_ms: 100.0, frequency_hz: 6.0, amplitude: 1.0 },
                spatial_pattern: vec![0.5, 0.5, -0.5, -0.5, 0.0, 0.0, 0.0, 0.0],
            },
        ],
        tasks: vec![TaskGenSpec {
            task_id: "sep".into(),
            label_space: vec!["absent".into(), "present".into()],
            classes: BTreeMap::from([
                ("absent".to_string(), vec![ComponentRef { component: "base".into(), polarity: 1 }]),
                (
                    "present".to_string(),
                    vec![ComponentRef { component: "base".into(), polarity: 1 }, ComponentRef { component: "target".into(), polarity: 1 }],
                ),
            ]),
            noise_snr_db: 10.0,
        }],
        subject_variability: SubjectVariability { gain_std: 0.1, latency_jitter_ms: 10.0 },
    }
}

fn decoding_sanity() -> Outcome {
    let ds = generate_cohort(&separable_cohort(), 30, 11).map_err(|e| e.to_string())?.remove("sep").unwrap();
    let mut shuffled = ds.clone();
    let mut labels: Vec<usize> = shuffled.trials.iter().map(|t| t.label).collect();
    labels.shuffle(&mut seed::rng(12));
    shuffled.trials.iter_mut().zip(labels).for_each(|(t, l)| t.label = l);

    let plan = make_aligned_splits(&ds.subjects(), 5, 13).map_err(|e| e.to_string())?;
    let mut cfg = GridConfig::new(ArchKind::Shallow, 14);
    cfg.train.learning_rate = 1e-3;
    cfg.train.max_epochs = 60;
    cfg.train.patience = 15;
    let real = run_transfer_grid(std::slice::from_ref(&ds), &plan, &cfg).map_err(|e| e.to_string())?.matrix.cells[0][0].mean;
    let control = run_transfer_grid(&[shuffled], &plan, &cfg).map_err(|e| e.to_string())?.matrix.cells[0][0].mean;
    check(real >= 0.90 && (control - 0.5).abs() <= 0.05, format!("separable diagonal {real:.3} (need >= 0.90), shuffled labels {control:.3} (need 0.50 +- 0.05)"))
}

// --- 7 ---------------------------------------------------------------------

fn statistics_calibration() -> Outcome {
    const N: usize = 10;
    const REPS: usize = 1000;
    // attainable p-values: every sign pattern of the ranks 1..N
    let mut support = BTreeSet::new();
    let zeros = vec![0.0; N];
    for mask in 0u32..1 << N {
        let d: Vec<f64> = (0..N).map(|i| if mask >> i & 1 == 1 { (i + 1) as f64 } else { -((i + 1) as f64) }).collect();
        support.insert(permutation_signed_rank(&d, &zeros, 1, 0).map_err(|e| e.to_string())?.p_value.to_bits());
    }
    let mut rng = seed::rng(99);
    let mut ps = Vec::with_capacity(REPS);
    for rep in 0..REPS {
        let x: Vec<f64> = (0..N).map(|_| rng.gen::<f64>()).collect();
        let y: Vec<f64> = (0..N).map(|_| rng.gen::<f64>()).collect();
        ps.push(permutation_signed_rank(&x, &y, 1, rep as u64).map_err(|e| e.to_string())?.p_value);
    }
    let ks = support
        .iter()
        .map(|&b| {
            let t = f64::from_bits(b);
            (ps.iter().filter(|&&p| p <= t).count() as f64 / REPS as f64 - t).abs()
        })
        .fold(0.0, f64::max);
    let rejections = ps.iter().filter(|&&p| p <= 0.05).count() as f64 / REPS as f64;

    let s = stouffer_combine(&[0.05, 0.05], &[1.0, 1.0]).map_err(|e| e.to_string())?;
    let oracle = 1.0 - normal_cdf(2.0 * 1.6448536269514722 / 2f64.sqrt());
    let bonf = bonferroni_adjust(&[0.01, 0.02, 0.5]).map_err(|e| e.to_string())?;
    let bonf_ok = bonf == vec![0.03, 0.06, 1.0] && bonferroni_adjust(&[0.2]).unwrap() == vec![0.2];
    check(
        ks < 0.05 && (s.p_value - 0.0100).abs() <= 0.0005 && (s.p_value - oracle).abs() < 1e-12 && bonf_ok,
        format!(
            "KS {ks:.4} over {REPS} null replicates (n = {N}, {} attainable p-values, P(p <= 0.05) = {rejections:.3}); Stouffer(0.05, 0.05) = {:.5}; Bonferroni {bonf:?}",
            support.len(),
            s.p_value
        ),
    )
}

// --- 8 ---------------------------------------------------------------------

fn upgma_oracle() -> Outcome {
    let mut rng = seed::rng(8);
    let mut worst: f64 = 0.0;
    let mut mismatched = 0;
    for _ in 0..200 {
        let n = rng.gen_range(4..=6);
        let tasks: Vec<String> = (0..n).map(|i| format!("T{i}")).collect();
        let values = (0..n).map(|i| (0..n).map(|j| Some(if i == j { 1.0 } else { rng.gen_range(-0.2..1.3f64).max(0.0) })).collect()).collect();
        let scores = TransferabilityScores { tasks: tasks.clone(), values, undefined: vec![], source_digest: String::new() };
        let fast = upgma_cluster(&scores).map_err(|e| e.to_string())?;
        let rows = scores.defined_rows();
        let d: Vec<Vec<f64>> = rows.iter().map(|a| rows.iter().map(|b| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()).collect()).collect();
        let slow = exhaustive_average_linkage(&tasks, &d).map_err(|e| e.to_string())?;
        for (f, s) in fast.merges.iter().zip(&slow.merges) {
            if (f.a, f.b, f.size) != (s.a, s.b, s.size) {
                mismatched += 1;
            }
            worst = worst.max((f.height - s.height).abs());
        }
        if fast.merges.len() != slow.merges.len() {
            mismatched += 1;
        }
    }
    check(mismatched == 0 && worst <= 1e-12, format!("200 matrices: {mismatched} merge mismatches, max height error {worst:.1e}"))
}

// --- 9 ---------------------------------------------------------------------

fn determinism() -> Outcome {
    let root = scratch().join("determinism");
    let data = root.join("data");
    pipeline::synthesize(&fixture("tiny_cohort.json"), &data, 8, 5).map_err(|e| e.to_string())?;
    let first = root.join("run1");
    pipeline::run_pipeline(&quick_config(&data, &first)).map_err(|e| e.to_string())?;
    let second = root.join("run2");
    pipeline::rerun(&first.join(RUN_MANIFEST), &second, 2).map_err(|e| e.to_string())?;
    let mut differing = Vec::new();
    for f in DETERMINISTIC_OUTPUTS {
        if fs::read(first.join(f)).map_err(|e| e.to_string())? != fs::read(second.join(f)).map_err(|e| e.to_string())? {
            differing.push(f);
        }
    }
    check(differing.is_empty(), format!("{} files compared across two runs, differing: {differing:?}", DETERMINISTIC_OUTPUTS.len()))
}

// --- 10 --------------------------------------------------------------------

fn format_checks() -> Outcome {
    let run = planted()?;
    let mut graphs = vec![fs::read_to_string(run.dir.join(GRAPH_DOT)).map_err(|e| e.to_string())?];
    // odd labels and an undefined column
    let mut odd = rescale_scores(&run.matrix).map_err(|e| e.to_string())?;
    odd.tasks = vec!["odd \"name\"".into(), "B\\2".into(), "C d".into()];
    odd.values.iter_mut().for_each(|r| r[2] = None);
    odd.undefined = vec![odd.tasks[2].clone()];
    graphs.push(emit_transfer_graph(&odd, 0.0).map_err(|e| e.to_string())?);
    let mut parse_errors = Vec::new();
    for g in &graphs {
        if let Err(e) = graphviz_rust::parse(g) {
            parse_errors.push(e);
        }
    }
    let mut inexact = 0;
    for t in &run.tasks {
        let g = &run.generated[&t.task_id];
        let same = g.label_space == t.label_space
            && g.trials.len() == t.trials.len()
            && g.trials.iter().zip(&t.trials).all(|(a, b)| a.label == b.label && a.subject == b.subject && a.samples.iter().zip(&b.samples).all(|(x, y)| x.to_bits() == y.to_bits()));
        inexact += usize::from(!same);
    }
    check(
        parse_errors.is_empty() && inexact == 0 && !run.tasks.is_empty(),
        format!(
            "{} DOT files parsed ({} errors); {} datasets under {} re-read, {inexact} not bit-exact",
            graphs.len(),
            parse_errors.len(),
            run.tasks.len(),
            run.data.file_name().unwrap().to_string_lossy()
        ),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("gradient correctness", gradient_correctness),
        ("rescaling examples", rescale_suite),
        ("freeze invariant", freeze_invariant),
        ("leakage audit", leakage_audit),
        ("planted asymmetry", planted_asymmetry),
        ("decoding sanity", decoding_sanity),
        ("statistics calibration", statistics_calibration),
        ("UPGMA oracle equivalence", upgma_oracle),
        ("determinism", determinism),
        ("format checks", format_checks),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {:>2} [{tag}] {name}: {detail}", i + 1);
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
