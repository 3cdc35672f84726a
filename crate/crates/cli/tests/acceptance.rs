//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any
//! fails. Criterion 6 trains both default-size models and dominates the
//! runtime (tens of minutes).

#[path = "../../core/tests/support/contracts.rs"]
mod contracts;
#[path = "../../core/tests/support/oracle.rs"]
mod oracle;
#[path = "../../core/tests/support/oracle_cases.rs"]
mod oracle_cases;
#[path = "../../core/tests/support/seeding.rs"]
mod seeding;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use d3r_core::density::{drfl, make_gt_density, seed_queries, DrflConfig, GtDensitySpec, QuerySeedConfig};
use d3r_core::harness::experiments::ConvergenceOutcome;
use d3r_core::harness::{ablate, compare_convergence, gradcheck_suite, train, viz_kernels, ExperimentConfig};
use d3r_core::kernels::KernelFamily;
use d3r_core::model::Family;
use d3r_core::nn::gradcheck::{numeric_gradient, relative_error};
use d3r_core::scenes::{ObjectBox, SceneAnnotation};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GOLDEN_GABOR: &[u8] = include_bytes!("golden/gabor_grid_64.pgm");

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn c1_gradients() -> Outcome {
    let r = gradcheck_suite().map_err(|e| e.to_string())?;
    let failed: Vec<&str> = r.lines.iter().filter(|l| !l.ok).map(|l| l.block.as_str()).collect();
    ensure(r.epsilon == 1e-5 && r.tolerance == 1e-4, || format!("eps {} tol {}", r.epsilon, r.tolerance))?;
    ensure(r.lines.iter().any(|l| l.block.starts_with("pipeline")), || "no pipeline line".into())?;
    ensure(r.lines.iter().any(|l| l.expect_failure), || "no negative control".into())?;
    ensure(r.pass, || format!("failing blocks: {failed:?}"))?;
    let worst = r.lines.iter().filter(|l| !l.expect_failure).map(|l| l.max_rel_error).fold(0.0, f64::max);
    let control = r.lines.iter().find(|l| l.expect_failure).map(|l| l.max_rel_error).unwrap_or(f64::NAN);
    Ok(format!("{} blocks, worst rel err {worst:.2e}; negative control {control:.2e}", r.lines.len() - 1))
}

fn c2_oracles() -> Outcome {
    let results = oracle_cases::all(oracle_cases::INSTANCES);
    let bad: Vec<String> = results.iter().filter(|(_, d)| d.is_nan() || *d > 1e-9).map(|(n, d)| format!("{n} {d:.2e}")).collect();
    ensure(bad.is_empty(), || format!("over 1e-9: {}", bad.join(", ")))?;
    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    Ok(format!("{} ops × {} instances, worst |Δ| {worst:.2e}", results.len(), oracle_cases::INSTANCES))
}

fn c3_shapes() -> Outcome {
    let n = contracts::check_shape_grid()?;
    Ok(format!("{n} shape assertions"))
}

fn object(cx: f64, cy: f64) -> ObjectBox {
    ObjectBox { cx, cy, w: 6.0, h: 6.0, class: "object".into() }
}

fn c4_mass() -> Outcome {
    let spec = GtDensitySpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (w, h) = (128usize, 128usize);
    let mut worst = 0.0f64;
    for count in 0..=200usize {
        // Every third object hugs a border or corner.
        let objects = (0..count)
            .map(|i| {
                let mut x = rng.random_range(0.0..w as f64);
                let mut y = rng.random_range(0.0..h as f64);
                match i % 6 {
                    0 => x = 0.0,
                    2 => y = h as f64 - 1e-6,
                    4 => (x, y) = (w as f64 - 0.25, 0.5),
                    _ => {}
                }
                object(x, y)
            })
            .collect();
        let ann = SceneAnnotation { id: count as i64, width: w, height: h, objects };
        let map = make_gt_density(&ann, &spec).map_err(|e| e.to_string())?;
        let err = (map.sum() - count as f64).abs();
        ensure(err <= 1e-4, || format!("{count} objects: mass {}", map.sum()))?;
        ensure(map.iter().all(|&v| v >= 0.0), || format!("{count} objects: negative density"))?;
        worst = worst.max(err);
    }
    Ok(format!("counts 0..=200, worst |mass - count| {worst:.2e}"))
}

fn c5_drfl() -> Outcome {
    let cfg = DrflConfig { beta: 4.0, gamma: 1.0, ..DrflConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (rows, cols) = (6, 7);
    let mut worst = 0.0f64;
    for trial in 0..50 {
        let gt: Vec<f64> = (0..rows * cols)
            .map(|i| if i % 3 == 0 { rng.random_range(0.02..0.3) } else { rng.random_range(0.0..0.005) })
            .collect();
        let g = Array2::from_shape_vec((rows, cols), gt.clone()).expect("shape");
        let at_target = drfl(g.view(), g.view(), &cfg).map_err(|e| e.to_string())?.0;
        ensure(at_target == 0.0, || format!("trial {trial}: loss at pred = gt is {at_target}"))?;
        // Offsets of at least 0.01 keep every entry off the pred = gt switch.
        let pred: Vec<f64> = gt
            .iter()
            .map(|&v| {
                let d = rng.random_range(0.01..0.2);
                if rng.random_bool(0.5) { v + d } else { v - d }
            })
            .collect();
        let p = Array2::from_shape_vec((rows, cols), pred.clone()).expect("shape");
        let (_, grad) = drfl(p.view(), g.view(), &cfg).map_err(|e| e.to_string())?;
        let f = |x: &[f64]| drfl(Array2::from_shape_vec((rows, cols), x.to_vec()).expect("shape").view(), g.view(), &cfg).expect("shapes").0;
        let num = numeric_gradient(&f, &pred, 1e-5);
        for (a, n) in grad.iter().zip(&num) {
            worst = worst.max(relative_error(*a, *n));
        }
    }
    ensure(worst <= 1e-4, || format!("gradient rel err {worst:.2e}"))?;
    let one = |p: f64, g: f64| {
        drfl(Array2::from_elem((1, 1), p).view(), Array2::from_elem((1, 1), g).view(), &cfg).expect("shapes").0
    };
    let ratio = one(0.0, 1.0) / one(1.0, 0.0);
    ensure(ratio == 5.0, || format!("under/over ratio {ratio}"))?;
    Ok(format!("zero at target; under/over ratio {ratio}; gradient rel err {worst:.2e}"))
}

fn c6_convergence(dir: &Path, slot: &mut Option<ConvergenceOutcome>) -> Outcome {
    let cfg = ExperimentConfig { out_dir: dir.to_path_buf(), ..ExperimentConfig::default() };
    let o = compare_convergence(&cfg).map_err(|e| e.to_string())?;
    let r = &o.report;
    let detail = format!(
        "val DRFL gabor {:.4e} vs none {:.4e}; mae {:.4e} vs {:.4e}; peak recall {:.4} vs {:.4}",
        r.dual.final_val_drfl, r.baseline.final_val_drfl, r.dual.mae, r.baseline.mae, r.dual.peak_recall, r.baseline.peak_recall
    );
    let pass = r.pass;
    *slot = Some(o);
    if pass {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c7_ablation(dir: &Path) -> Outcome {
    let mut cfg = ExperimentConfig::small();
    cfg.n_train = 16;
    cfg.n_val = 8;
    cfg.epochs = 2;
    cfg.scenes.width = 64;
    cfg.scenes.height = 64;
    let mut tables = Vec::new();
    for run in ["a", "b"] {
        let c = ExperimentConfig { out_dir: dir.join(run), ..cfg.clone() };
        tables.push(ablate(&c).map_err(|e| e.to_string())?);
    }
    let t = &tables[0];
    let labels: Vec<&str> = t.rows.iter().map(|r| r.label.as_str()).collect();
    ensure(labels == ["baseline", "haar", "fourier", "gabor"], || format!("rows {labels:?}"))?;
    ensure(t.rows.iter().all(|r| r.status == "ok"), || "an arm failed".into())?;
    ensure(t.rows.iter().all(|r| r.dataset_hash == t.dataset_hash), || "rows disagree on the dataset".into())?;
    let mut files = vec!["ablation.json".to_string(), "ablation.txt".to_string()];
    files.extend(Family::ALL.iter().map(|f| format!("{}/loss.csv", f.as_str())));
    for f in &files {
        let a = std::fs::read(dir.join("a").join(f)).map_err(|e| format!("{f}: {e}"))?;
        let b = std::fs::read(dir.join("b").join(f)).map_err(|e| format!("{f}: {e}"))?;
        ensure(a == b, || format!("{f} differs between reruns"))?;
    }
    Ok(format!("4 rows on dataset {}, {} files byte-identical across reruns", &t.dataset_hash[..12], files.len()))
}

fn c8_queries(outcome: Option<&ConvergenceOutcome>) -> Outcome {
    let cfg = QuerySeedConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for m in 0..50 {
        let (rows, cols) = (rng.random_range(3..=64), rng.random_range(3..=64));
        let levels = [0.0, 0.25, 0.5, 1.0];
        let map = Array2::from_shape_fn((rows, cols), |_| {
            if rng.random_bool(0.5) { levels[rng.random_range(0..levels.len())] } else { rng.random_range(-0.2..1.0) }
        });
        let got = seed_queries(map.view(), &cfg).map_err(|e| e.to_string())?;
        ensure(got == seeding::seed_reference(&map, cfg.k, cfg.d_min), || format!("map {m} ({rows}×{cols}) differs from oracle"))?;
    }
    let o = outcome.ok_or("criterion 6 produced no trained gabor model")?;
    let q = &o.dual.final_val.query_dense;
    ensure(q.k == 120 && q.radius == 4.0, || format!("k {} radius {}", q.k, q.radius))?;
    ensure(q.n_objects > 0, || "no dense validation objects".into())?;
    let detail = format!(
        "50 maps match oracle; dense val ({} images, {} objects): density {:.4} vs uniform {:.4}",
        q.n_images, q.n_objects, q.density_recall, q.uniform_recall
    );
    ensure(q.density_recall >= q.uniform_recall, || detail.clone())?;
    Ok(detail)
}

fn c9_overfit(dir: &Path) -> Outcome {
    let cfg = ExperimentConfig { n_train: 8, n_val: 8, epochs: 200, out_dir: dir.to_path_buf(), ..ExperimentConfig::default() };
    let r = train(&cfg).map_err(|e| e.to_string())?;
    let first = r.epochs.first().ok_or("no epochs")?.train_drfl;
    let last = r.epochs.last().ok_or("no epochs")?.train_drfl;
    let detail = format!("epoch 1 {first:.4e}, epoch 200 {last:.4e} ({:.2}%)", 100.0 * last / first);
    ensure(last < 0.1 * first, || detail.clone())?;
    Ok(detail)
}

fn c10_viz(dir: &Path) -> Outcome {
    let out = dir.join("kernels.pgm");
    let bin = env!("CARGO_BIN_EXE_d3r");
    let status = Command::new(bin).args(["viz-kernels", "gabor", "--out"]).arg(&out).status().map_err(|e| e.to_string())?;
    ensure(status.success(), || format!("viz-kernels exited with {status}"))?;
    let bytes = std::fs::read(&out).map_err(|e| e.to_string())?;
    ensure(bytes == GOLDEN_GABOR, || format!("{} bytes differ from the {}-byte golden grid", bytes.len(), GOLDEN_GABOR.len()))?;
    let m = viz_kernels(KernelFamily::Gabor, 64, &dir.join("lib.pgm")).map_err(|e| e.to_string())?;
    ensure(m.n_groups == 4 && m.n_scales == 2, || format!("{} angles × {} scales", m.n_groups, m.n_scales))?;
    let header = format!("P5\n{} {}\n255\n", m.width, m.height);
    ensure(bytes.starts_with(header.as_bytes()), || "PGM header does not match the manifest".into())?;
    let again = Command::new(bin).args(["viz-kernels", "gabor", "--out"]).arg(&out).output().map_err(|e| e.to_string())?;
    ensure(again.status.code() == Some(1), || format!("overwrite without --force exited {:?}", again.status.code()))?;
    Ok(format!("4 angles × 2 scales, {}×{} px, {} bytes match golden", m.width, m.height, bytes.len()))
}

struct Line {
    id: u8,
    name: &'static str,
    budget: Option<Duration>,
}

fn report(line: Line, run: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
        let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    let took = start.elapsed();
    let over = line.budget.is_some_and(|b| took > b);
    let budget = match line.budget {
        Some(b) => format!("{:.1} s, budget {} s", took.as_secs_f64(), b.as_secs()),
        None => format!("{:.1} s", took.as_secs_f64()),
    };
    let (ok, detail) = match result {
        Ok(d) if over => (false, format!("{d}; over time budget")),
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    println!("{} [{}] {} ({budget}): {detail}", if ok { "PASS" } else { "FAIL" }, line.id, line.name);
    ok
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temp dir");
    let sub = |name: &str| {
        let p = tmp.path().join(name);
        std::fs::create_dir_all(&p).expect("temp subdir");
        p
    };
    let secs = |s| Some(Duration::from_secs(s));
    let mut convergence = None;
    let (d6, d7, d9, d10) = (sub("convergence"), sub("ablation"), sub("overfit"), sub("viz"));
    let results = [
        report(Line { id: 1, name: "gradient suite", budget: secs(300) }, c1_gradients),
        report(Line { id: 2, name: "oracle equivalence", budget: secs(120) }, c2_oracles),
        report(Line { id: 3, name: "shape and channel contract", budget: secs(60) }, c3_shapes),
        report(Line { id: 4, name: "density mass conservation", budget: secs(60) }, c4_mass),
        report(Line { id: 5, name: "DRFL properties", budget: secs(60) }, c5_drfl),
        report(Line { id: 6, name: "convergence, gabor vs none", budget: None }, || c6_convergence(&d6, &mut convergence)),
        report(Line { id: 7, name: "ablation reproducibility", budget: None }, || c7_ablation(&d7)),
        report(Line { id: 8, name: "query seeding", budget: secs(300) }, || c8_queries(convergence.as_ref())),
        report(Line { id: 9, name: "overfit smoke test", budget: secs(600) }, || c9_overfit(&d9)),
        report(Line { id: 10, name: "gabor kernel grid", budget: secs(10) }, || c10_viz(&d10)),
    ];
    let failed = results.iter().filter(|ok| !**ok).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
