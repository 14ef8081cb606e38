//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed. Criteria 6 and 7 train full-size models and
//! take most of the half hour this suite needs.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use depthlane::dataset::{generate, read_dataset, write_dataset, Dataset};
use depthlane::pipeline::{self, frozen_groups, model_config, Phase};
use depthlane::{DepthMode, TrainConfig};
use depthlane_core::losses::{self, LaneTarget, OffsetLoss, PUSH_EPS};
use depthlane_core::metrics::MetricsAccumulator;
use depthlane_core::network::{
    fuse, DepthDistribution, NetInput, ParamGroup, PrimeDepthFeature, PrimeFvFeature, Tensor,
};
use depthlane_core::objective::{self, ObjectiveConfig, TrainingExample};
use depthlane_core::postprocess::{extract_lanes, oracle_prediction};
use depthlane_core::scene::{self, DepthTruth};
use depthlane_core::{ClusterParams, EvalProtocol, Model, ModelConfig, SceneParams};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Outcome of one criterion: pass flag and a one-line summary.
type Verdict = (bool, String);

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// 1. Every per-pixel depth distribution sums to one.
fn depth_normalization() -> Verdict {
    let mut r = rng(1);
    let mut worst: f64 = 0.0;
    let mut negative = false;
    for trial in 0..100u64 {
        let config = ModelConfig {
            seed: trial,
            ..ModelConfig::tiny()
        };
        let model = Model::new(config.clone()).unwrap();
        let (h, w) = (config.image_height, config.image_width);
        let scale = if trial % 2 == 0 { 1.0 } else { 50.0 };
        let image = Tensor::from_vec(
            3,
            h,
            w,
            (0..3 * h * w).map(|_| scale * r.gen_range(-1.0..1.0)).collect(),
        );
        let input = NetInput {
            image,
            intrinsics: config.camera.normalized_intrinsics(w, h),
        };
        let (_, depth) = model.predict(&input).unwrap();
        let (d, fh, fw) = depth.0.shape();
        for y in 0..fh {
            for x in 0..fw {
                let s: f64 = (0..d).map(|k| depth.at(y, x, k)).sum();
                worst = worst.max((s - 1.0).abs());
                negative |= (0..d).any(|k| depth.at(y, x, k) < 0.0);
            }
        }
    }
    (
        worst <= 1e-6 && !negative,
        format!("100 models, max |sum - 1| = {worst:.1e}"),
    )
}

// 2. Broadcast fusion against a triple loop, and rank one per width slice.
fn fusion_oracle() -> Verdict {
    let mut r = rng(2);
    let mut worst_err: f64 = 0.0;
    let mut worst_ratio: f64 = 0.0;
    for (d, w, c) in [(4, 8, 3), (24, 32, 16)] {
        let x = Tensor::from_vec(1, d, w, (0..d * w).map(|_| r.gen_range(0.0..1.0)).collect());
        let f = Tensor::from_vec(c, 1, w, (0..c * w).map(|_| r.gen_range(-2.0..2.0)).collect());
        let b = fuse(&PrimeDepthFeature(x.clone()), &PrimeFvFeature(f.clone())).unwrap();
        assert_eq!(b.shape(), (d, w, c));
        for wi in 0..w {
            let mut slice = DMatrix::zeros(d, c);
            for di in 0..d {
                for ci in 0..c {
                    let oracle = x.at(0, di, wi) * f.at(ci, 0, wi);
                    worst_err = worst_err.max((b.at(di, wi, ci) - oracle).abs());
                    slice[(di, ci)] = b.at(di, wi, ci);
                }
            }
            let mut sv: Vec<f64> = slice.singular_values().iter().copied().collect();
            sv.sort_by(|a, b| b.total_cmp(a));
            if sv[0] > 0.0 {
                worst_ratio = worst_ratio.max(sv[1] / sv[0]);
            }
        }
    }
    (
        worst_err <= 1e-7 && worst_ratio < 1e-6,
        format!("max |B - oracle| = {worst_err:.1e}, max s2/s1 = {worst_ratio:.1e}"),
    )
}

// 3. Analytic gradients of the weighted objective against central differences.
fn gradient_check() -> Verdict {
    const EPS: f64 = 1e-6;
    const TOL: f64 = 1e-3;
    // denominator floor; see the decisions on gradient checking
    const FLOOR: f64 = 1e-4;
    let config = ModelConfig::tiny();
    let obj = ObjectiveConfig::default();
    if obj.weights.as_array().iter().any(|w| *w <= 0.0) {
        return (false, "objective weights are not all positive".into());
    }
    let mut model = Model::new(config.clone()).unwrap();
    let sample = scene::generate(&config.scene_params().varied(11)).unwrap();
    let ex = TrainingExample::new(&sample, &config).unwrap();
    let mut grads = model.params().zero_grads();
    objective::loss_and_grad(&model, &ex, &obj, &mut grads).unwrap();

    let mut r = rng(3);
    let mut picks = Vec::new();
    for (id, t) in model.params().iter() {
        let mut idx: Vec<usize> = (0..t.data.len()).collect();
        idx.shuffle(&mut r);
        picks.extend(idx.into_iter().take(4).map(|j| (id, j)));
    }
    let total = model.params().scalar_count();
    while picks.len() < 260 {
        picks.push(model.params().locate(r.gen_range(0..total)).unwrap());
    }
    let mut worst: f64 = 0.0;
    let mut above_floor = 0;
    for &(id, j) in &picks {
        let orig = model.params().get(id)[j];
        model.params_mut().get_mut(id)[j] = orig + EPS;
        let up = objective::loss(&model, &ex, &obj).unwrap().total;
        model.params_mut().get_mut(id)[j] = orig - EPS;
        let down = objective::loss(&model, &ex, &obj).unwrap().total;
        model.params_mut().get_mut(id)[j] = orig;
        let numeric = (up - down) / (2.0 * EPS);
        let analytic = grads.get(id)[j];
        worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR));
        if analytic.abs().max(numeric.abs()) >= FLOOR {
            above_floor += 1;
        }
    }
    (
        picks.len() >= 200 && worst < TOL,
        format!(
            "{} parameters of {total} ({above_floor} with |grad| >= {FLOOR:.0e}), worst relative error {worst:.1e}",
            picks.len()
        ),
    )
}

// 4. Hand-computed loss values.
fn loss_oracles() -> Verdict {
    let mut notes = Vec::new();
    let mut ok = true;

    // one pixel at a time, so no averaging rounds the per-pixel value
    for d in [2usize, 6, 24, 100] {
        for k in 0..d {
            let pred = DepthDistribution(Tensor::filled(d, 1, 1, 1.0 / d as f64));
            let truth = DepthTruth {
                height: 1,
                width: 1,
                bins: vec![Some(k as u16)],
            };
            let got = losses::depth_loss(&pred, &truth).unwrap().value;
            let exact = got == (d - 1) as f64 / d as f64 || got == 1.0 - 1.0 / d as f64;
            ok &= exact;
            if !exact {
                notes.push(format!("depth D={d} bin {k}: {got}"));
            }
        }
    }

    let half = vec![0.5; 10];
    let gt: Vec<f64> = (0..10).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let conf = losses::conf_loss(&half, &gt).unwrap();
    ok &= (conf - std::f64::consts::LN_2).abs() <= 1e-9;

    // two lanes collapsed onto their means, 10 apart
    let ids = [1, 1, 1, 2, 2, 0];
    let emb = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 6.0, 8.0, 6.0, 8.0, -4.0, 9.0];
    let inst = losses::instance_loss(&emb, 2, &ids).unwrap();
    ok &= (inst - 1.0 / (10.0 + PUSH_EPS)).abs() <= 1e-9;

    let t = LaneTarget {
        rows: 1,
        cols: 3,
        confidence: vec![0.0, 1.0, 0.0],
        instance: vec![0, 1, 0],
        x_offset: vec![0.0, 0.5, 0.0],
        z_offset: vec![0.0, 1.0, 0.0],
        lane_count: 1,
    };
    let l1 = losses::offset_losses(&[9.0, 0.75, -3.0], &[7.0, 1.5, 2.0], &t, 0.5, OffsetLoss::L1).unwrap();
    let l2 = losses::offset_losses(&[0.0, 0.75, 0.0], &[0.0, 1.5, 0.0], &t, 0.5, OffsetLoss::L2).unwrap();
    ok &= l1 == (0.25, 0.5) && l2 == (0.0625, 0.25);

    let mut line = format!(
        "depth (D-1)/D for D in 2,6,24,100; conf {:.1e} off ln 2; instance {:.1e} off 1/(10+eps); offsets L1 {l1:?} L2 {l2:?}",
        (conf - std::f64::consts::LN_2).abs(),
        (inst - 1.0 / (10.0 + PUSH_EPS)).abs()
    );
    if !notes.is_empty() {
        line = format!("{line}; {}", notes.join(", "));
    }
    (ok, line)
}

/// Zero error in meters: x is rebuilt as column edge plus offset times cell
/// width, which rounds in the last bits.
const ZERO_ERR: f64 = 1e-12;

// 5. Ground truth through the oracle prediction, post-processing and metrics.
fn ground_truth_round_trip() -> Verdict {
    let data = generate(&SceneParams::default(), 500, 40).unwrap();
    let grid = data.spec.grid;
    let protocol = EvalProtocol::default();
    let half_cell = grid.cell_length() / 2.0;
    let mut worst_dy: f64 = 0.0;
    let mut failures = Vec::new();
    let mut total = MetricsAccumulator::new();
    for (s, seed) in data.samples.iter().zip(&data.seeds) {
        let target = LaneTarget::from_lanes(&s.lanes, &grid);
        let lanes: Vec<_> = extract_lanes(&oracle_prediction(&target), &ClusterParams::default(), &grid)
            .into_iter()
            .map(|l| l.points)
            .collect();
        for p in lanes.iter().flatten() {
            let dy = s
                .lanes
                .iter()
                .flatten()
                .filter(|g| (g.x - p.x).abs() < grid.cell_width())
                .map(|g| (g.y - p.y).abs())
                .fold(f64::INFINITY, f64::min);
            worst_dy = worst_dy.max(dy);
        }
        let mut acc = MetricsAccumulator::new();
        acc.add(&lanes, &s.lanes, &protocol);
        total.add(&lanes, &s.lanes, &protocol);
        let m = acc.report();
        let errs = [m.x_err_near, m.x_err_far, m.z_err_near, m.z_err_far];
        if m.f1 != 1.0 || errs.iter().any(|e| *e > ZERO_ERR) {
            failures.push(format!("seed {seed}: {m:?}"));
        }
    }
    let m = total.report();
    let ok = failures.is_empty() && worst_dy <= half_cell && data.len() == 40;
    let mut line = format!(
        "40 samples, F1 {:.3}, errors x {:.1e}/{:.1e} z {:.1e}/{:.1e}, max |dy| {worst_dy:.2} (limit {half_cell:.2})",
        m.f1, m.x_err_near, m.x_err_far, m.z_err_near, m.z_err_far
    );
    if let Some(first) = failures.first() {
        line = format!("{line}; {} bad samples, first {first}", failures.len());
    }
    (ok, line)
}

fn overfit_config(dir: &Path) -> TrainConfig {
    TrainConfig {
        dataset: dir.join("train"),
        out_dir: dir.join("run"),
        ..TrainConfig::default()
    }
}

const ABLATION_ROWS: [&str; 5] = ["no-depth", "no-dat", "full", "method1", "method3"];

// 6 and 7 share one ablation run on the overfit set; "full" is method3.
fn overfit_and_ablation(dir: &Path) -> (Verdict, Verdict) {
    let cfg = overfit_config(dir);
    let names: Vec<String> = ABLATION_ROWS.iter().map(|s| s.to_string()).collect();
    let start = Instant::now();
    let table = match pipeline::ablate(&cfg, &names) {
        Ok(t) => t,
        Err(e) => return ((false, format!("ablation failed: {e}")), (false, "no table".into())),
    };
    println!(
        "ablation on 20 training samples, {} steps, {:.0} s:",
        cfg.steps,
        start.elapsed().as_secs_f64()
    );
    print!("{}", table.render());

    let full = &table.row("method3").unwrap().report;
    let six = (
        full.f1 >= 0.90 && full.x_err_near <= 0.2,
        format!(
            "method3 train F1 {:.3}, x_err_near {:.3} m after {} steps",
            full.f1, full.x_err_near, cfg.steps
        ),
    );

    let f1 = |n: &str| table.row(n).unwrap().report.f1;
    let seven = (
        f1("full") >= f1("no-depth") - 0.02 && f1("method3") >= f1("method1") - 0.02,
        format!(
            "F1 full {:.3} vs no-depth {:.3}; method3 {:.3} vs method1 {:.3} (band 0.02)",
            f1("full"),
            f1("no-depth"),
            f1("method3"),
            f1("method1")
        ),
    );
    (six, seven)
}

// 8. Frozen sets of methods 1 and 2 are bitwise unchanged by training.
fn freeze_contract(dir: &Path) -> Verdict {
    let data = read_dataset(&dir.join("train")).unwrap();
    let base = TrainConfig {
        steps: 100,
        pretrain_steps: 50,
        depth_mode: DepthMode::Method1,
        ..overfit_config(dir)
    };
    let pre_dir = dir.join("freeze");
    let (pre_path, _) = pipeline::pretrain_depth(&TrainConfig {
        out_dir: pre_dir.clone(),
        ..base.clone()
    })
    .unwrap();
    let pre = depthlane::checkpoint::load_as_saved(&pre_path).unwrap();
    let mut parts = Vec::new();
    let mut ok = true;
    for mode in [DepthMode::Method1, DepthMode::Method2] {
        let cfg = TrainConfig {
            depth_mode: mode,
            ..base.clone()
        };
        let (model, record) = pipeline::train_model(&cfg, &data, None, Some(&pre)).unwrap();
        // the model the trainer starts from: pretrained groups copied in, the
        // rest freshly initialized from the same seed
        let start = Model::new(model_config(&cfg, &data).unwrap()).unwrap();
        let groups = frozen_groups(mode);
        let mut frozen = 0;
        let mut changed = Vec::new();
        let mut trainable_moved = false;
        for (_, t) in model.params().iter() {
            let group = ParamGroup::of(&t.name);
            let reference = if pipeline::PRETRAINED_GROUPS.contains(&group) {
                &pre
            } else {
                &start
            };
            let before = reference.params().get(reference.params().find(&t.name).unwrap());
            let same = before.iter().zip(&t.data).all(|(a, b)| a.to_bits() == b.to_bits());
            if groups.contains(&group) {
                frozen += t.data.len();
                if !same {
                    changed.push(t.name.clone());
                }
            } else if !same {
                trainable_moved = true;
            }
        }
        let steps = record.losses(Phase::Train).len();
        ok &= changed.is_empty() && frozen > 0 && trainable_moved && steps == 100;
        parts.push(format!(
            "{}: {frozen} frozen scalars, {} changed",
            mode.name(),
            changed.len()
        ));
    }
    (ok, format!("{} over 100 steps", parts.join("; ")))
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

// 9. Generation and training are reproducible from their seeds.
fn determinism(dir: &Path) -> Verdict {
    let gen = |out: &Path| {
        let status = Command::new(env!("CARGO_BIN_EXE_depthlane"))
            .args(["gen-data", "--train", "6", "--val", "2", "--seed", "42", "--out"])
            .arg(out)
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        files(out)
    };
    let a = gen(&dir.join("gen_a"));
    let b = gen(&dir.join("gen_b"));
    // two manifests and eight sample records
    let same_data = a == b && a.len() == 10;

    let data: Dataset = read_dataset(&dir.join("train")).unwrap();
    let cfg = TrainConfig {
        steps: 30,
        ..overfit_config(dir)
    };
    let run = || pipeline::train_model(&cfg, &data, None, None).unwrap().1;
    let (ra, rb) = (run(), run());
    let la = ra.losses(Phase::Train);
    let lb = rb.losses(Phase::Train);
    let same_losses =
        la.len() == 30 && la.iter().zip(&lb).all(|(x, y)| x.to_bits() == y.to_bits()) && la.len() == lb.len();
    (
        same_data && same_losses,
        format!(
            "gen-data {} files byte-identical: {same_data}; 30-step loss sequences identical: {same_losses}",
            a.len()
        ),
    )
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(&SceneParams::default(), 0, 20).unwrap();
    write_dataset(&data, &dir.path().join("train")).unwrap();

    let mut results: Vec<(usize, &str, Verdict, f64)> = Vec::new();
    let mut run = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Verdict| {
        let start = Instant::now();
        let v = f();
        let secs = start.elapsed().as_secs_f64();
        println!(
            "{} {n} {name}: {} ({secs:.1} s)",
            if v.0 { "PASS" } else { "FAIL" },
            v.1
        );
        results.push((n, name, v, secs));
    };
    run(1, "depth normalization", &mut depth_normalization);
    run(2, "fusion oracle", &mut fusion_oracle);
    run(3, "gradient check", &mut gradient_check);
    run(4, "loss oracles", &mut loss_oracles);
    run(5, "ground-truth round trip", &mut ground_truth_round_trip);
    let mut ablation = None;
    run(6, "overfit", &mut || {
        let (six, seven) = overfit_and_ablation(dir.path());
        ablation = Some(seven);
        six
    });
    run(7, "ablation direction", &mut || ablation.take().unwrap());
    run(8, "freeze contract", &mut || freeze_contract(dir.path()));
    run(9, "determinism", &mut || determinism(dir.path()));

    println!("\nsummary:");
    for (n, name, (ok, _), secs) in &results {
        println!("{} {n} {name} ({secs:.1} s)", if *ok { "PASS" } else { "FAIL" });
    }
    let failed = results.iter().filter(|r| !r.2 .0).count();
    if failed > 0 {
        println!("{failed} of {} criteria failed", results.len());
        std::process::exit(1);
    }
}
