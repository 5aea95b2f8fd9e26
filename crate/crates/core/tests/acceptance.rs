//! Acceptance checks, one line of output per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the verdict lines always
//! show up in `cargo test` output. `ACCEPTANCE_ONLY=1,5` runs a subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use r2p_core::metrics::{
    chamfer_points, emd_approx_points, emd_exact_capped, nearest_neighbors, ChamferMode, EmdSolver, KdTree,
    DEFAULT_AUCTION_EPS, DEFAULT_EXACT_CAP,
};
use r2p_core::model::{
    attach_loss, loss, read_model, write_model, LossSpec, MetricOptions, Mode, ModelConfig, R2PModel,
};
use r2p_core::pointcloud::{depth_to_cloud, pixel_footprint, project_cloud, union_views, Dataset, Point, PointCloud, Source};
use r2p_core::synth::{build_dataset, quantization_tolerance, render_views, sample_dense, CameraRig, Category, ObjectSpec, SynthConfig};
use r2p_core::tensor::{Graph, Tensor};
use r2p_core::train::{ablate_losses, lr_at, train_run, RunOptions, TrainConfig};

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rand_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
    (0..n)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect()
}

fn pc(points: Vec<Point>) -> PointCloud {
    PointCloud::new(points, Source::Unknown).unwrap()
}

fn d(a: &Point, b: &Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn cd(a: &[Point], b: &[Point]) -> f64 {
    chamfer_points(a, b, ChamferMode::Euclidean).unwrap()
}

fn emd(a: &[Point], b: &[Point]) -> f64 {
    emd_exact_capped(a, b, DEFAULT_EXACT_CAP).unwrap().cost
}

/// Double loop over both directions, no shared code with the library.
fn chamfer_oracle(a: &[Point], b: &[Point]) -> f64 {
    let dir = |p: &[Point], q: &[Point]| {
        p.iter()
            .map(|x| q.iter().map(|y| d(x, y)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / p.len() as f64
    };
    dir(a, b) + dir(b, a)
}

/// Minimum mean matched distance over all n! bijections (Heap's algorithm).
fn permutation_oracle(a: &[Point], b: &[Point]) -> f64 {
    let n = a.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let cost = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| d(&a[i], &b[j])).sum::<f64>() / n as f64;
    let mut best = cost(&perm);
    let mut c = vec![0; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(cost(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

fn criterion_1() -> Verdict {
    let started = Instant::now();
    let (n, m, h) = (16, 32, 1e-5);
    let model = R2PModel::new(ModelConfig::tiny(n, m), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::new(vec![2, n, 3], (0..2 * n * 3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let gt: Vec<PointCloud> = (0..2).map(|_| pc(rand_cloud(&mut rng, m))).collect();
    let opts = MetricOptions {
        emd: EmdSolver::Exact,
        ..Default::default()
    };

    let mut worst = 0.0f64;
    let (mut checked, mut skipped) = (0, 0);
    for spec in [LossSpec::L1, LossSpec::L3] {
        // Loss plus the discrete choices it was computed under: ReLU signs,
        // max-pool winners, nearest neighbours and the EMD assignment.
        let eval = |model: &R2PModel| {
            let mut f = model.forward_pass(&x, Mode::Train).unwrap();
            let mut pattern = f.pass.graph.branch_pattern();
            for v in [f.p_m, f.p_o] {
                let clouds = PointCloud::from_batch_tensor(f.pass.graph.value(v), Source::Output).unwrap();
                for (c, g) in clouds.iter().zip(&gt) {
                    pattern.extend(nearest_neighbors(c.points(), g.points()).iter().map(|p| p.0));
                    pattern.extend(nearest_neighbors(g.points(), c.points()).iter().map(|p| p.0));
                    if spec.uses_emd() {
                        pattern.extend(EmdSolver::Exact.solve(c.points(), g.points()).unwrap().assignment);
                    }
                }
            }
            let (l, b) = attach_loss(&mut f.pass.graph, f.p_m, f.p_o, &gt, &spec, &opts).unwrap();
            (f, l, b.total, pattern)
        };
        let (f, l, _, base) = eval(&model);
        let grads = f.pass.graph.backward(l).unwrap();
        let analytic: Vec<Vec<f64>> = f.pass.param_vars().iter().map(|v| grads.get(*v).unwrap().to_vec()).collect();
        let mut probe = model.clone();
        for (pi, g) in analytic.iter().enumerate() {
            for (e, &a) in g.iter().enumerate() {
                let orig = probe.params()[pi].data()[e];
                probe.params_mut()[pi].data_mut()[e] = orig + h;
                let (_, _, lp, pp) = eval(&probe);
                probe.params_mut()[pi].data_mut()[e] = orig - h;
                let (_, _, lm, pm) = eval(&probe);
                probe.params_mut()[pi].data_mut()[e] = orig;
                // A stencil that straddles a kink measures a different piece of the function.
                if pp != base || pm != base {
                    skipped += 1;
                    continue;
                }
                let fd = (lp - lm) / (2.0 * h);
                worst = worst.max((fd - a).abs() / fd.abs().max(a.abs()).max(1e-6));
                checked += 1;
            }
        }
    }
    let took = started.elapsed();
    check(
        worst < 1e-4 && took < Duration::from_secs(120),
        format!("max rel err {worst:.2e} over {checked} entries ({skipped} kink stencils skipped), {took:.1?}"),
    )
}

fn criterion_2() -> Verdict {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(21);

    let mut cd_err = 0.0f64;
    for _ in 0..200 {
        let (a, b) = (rand_cloud(&mut rng, 256), rand_cloud(&mut rng, 256));
        // Force the tree path; the library would brute-force clouds this small.
        let (ta, tb) = (KdTree::build(&a), KdTree::build(&b));
        let dir = |q: &[Point], t: &KdTree| q.iter().map(|p| t.nearest(p).unwrap().1.sqrt()).sum::<f64>() / q.len() as f64;
        let tree = dir(&a, &tb) + dir(&b, &ta);
        let oracle = chamfer_oracle(&a, &b);
        cd_err = cd_err.max((tree - oracle).abs()).max((cd(&a, &b) - oracle).abs());
    }
    for _ in 0..5 {
        let (a, b) = (rand_cloud(&mut rng, 700), rand_cloud(&mut rng, 900));
        cd_err = cd_err.max((cd(&a, &b) - chamfer_oracle(&a, &b)).abs());
    }

    let mut perm_err = 0.0f64;
    for n in 1..=6 {
        for _ in 0..20 {
            let (a, b) = (rand_cloud(&mut rng, n), rand_cloud(&mut rng, n));
            perm_err = perm_err.max((emd(&a, &b) - permutation_oracle(&a, &b)).abs());
        }
    }

    let mut auction_rel = 0.0f64;
    for _ in 0..50 {
        let (a, b) = (rand_cloud(&mut rng, 128), rand_cloud(&mut rng, 128));
        let exact = emd(&a, &b);
        let approx = emd_approx_points(&a, &b, DEFAULT_AUCTION_EPS).unwrap().cost;
        auction_rel = auction_rel.max((approx - exact).abs() / exact);
    }
    let took = started.elapsed();
    check(
        cd_err <= 1e-12 && perm_err <= 1e-9 && auction_rel <= 0.01 && took < Duration::from_secs(300),
        format!("(a) cd {cd_err:.1e} (b) hungarian {perm_err:.1e} (c) auction rel {auction_rel:.2e}, {took:.1?}"),
    )
}

fn criterion_3() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut failures = Vec::new();
    let (mut perm_err, mut trans_err) = (0.0f64, 0.0f64);
    for i in 0..100 {
        let n = rng.random_range(1..=48);
        let (a, b) = (rand_cloud(&mut rng, n), rand_cloud(&mut rng, n));
        if cd(&a, &b) != cd(&b, &a) {
            failures.push(format!("pair {i}: cd asymmetric"));
        }
        let (mut pa, mut pb) = (a.clone(), b.clone());
        pa.shuffle(&mut rng);
        pb.shuffle(&mut rng);
        perm_err = perm_err
            .max((cd(&a, &b) - cd(&pa, &pb)).abs())
            .max((emd(&a, &b) - emd(&pa, &pb)).abs());
        let t: Point = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
        let shift = |p: &[Point]| p.iter().map(|q| [q[0] + t[0], q[1] + t[1], q[2] + t[2]]).collect::<Vec<_>>();
        let (sa, sb) = (shift(&a), shift(&b));
        trans_err = trans_err
            .max((cd(&a, &b) - cd(&sa, &sb)).abs())
            .max((emd(&a, &b) - emd(&sa, &sb)).abs());
        if cd(&a, &b) > 2.0 * emd(&a, &b) + 1e-12 {
            failures.push(format!("pair {i}: cd > 2 emd"));
        }
    }
    check(
        failures.is_empty() && perm_err <= 1e-12 && trans_err <= 1e-12,
        format!("100 pairs: permutation {perm_err:.1e}, translation {trans_err:.1e}, other failures {failures:?}"),
    )
}

fn criterion_4() -> Verdict {
    let cfg = ModelConfig::default();
    let model = R2PModel::new(cfg, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let base = rand_cloud(&mut rng, cfg.n);
    let reference = model.reconstruct(&pc(base.clone())).unwrap();
    let mut mismatches = 0;
    for _ in 0..100 {
        let mut shuffled = base.clone();
        shuffled.shuffle(&mut rng);
        if model.reconstruct(&pc(shuffled)).unwrap() != reference {
            mismatches += 1;
        }
    }

    let mut shapes_ok = true;
    for b in [1, 2, 3] {
        let x = Tensor::new(vec![b, cfg.n, 3], (0..b * cfg.n * 3).map(|_| rng.random()).collect()).unwrap();
        let (p_m, p_o) = model.forward(&x).unwrap();
        let train = model.forward_pass(&x, Mode::Train).unwrap();
        for t in [&p_m, &p_o, train.p_m(), train.p_o()] {
            shapes_ok &= t.shape() == [b, cfg.m, 3];
        }
    }

    let mut bytes = Vec::new();
    write_model(&mut bytes, &model).unwrap();
    let back = read_model(&mut bytes.as_slice()).unwrap();
    let bits = |m: &R2PModel| -> Vec<u64> { m.params().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect() };
    let mut again = Vec::new();
    write_model(&mut again, &back).unwrap();
    let round_trip = bits(&model) == bits(&back) && again == bytes && back.reconstruct(&pc(base)).unwrap() == reference;

    check(
        mismatches == 0 && shapes_ok && round_trip,
        format!("{mismatches}/100 permutations differ, shapes ok {shapes_ok}, checkpoint bit-exact {round_trip}"),
    )
}

fn eval_cd(model: &R2PModel, ds: &Dataset) -> f64 {
    let inputs: Vec<&PointCloud> = ds.samples.iter().map(|s| &s.input).collect();
    let (_, p_o) = model.forward(&PointCloud::batch_tensor(&inputs).unwrap()).unwrap();
    let outs = PointCloud::from_batch_tensor(&p_o, Source::Output).unwrap();
    outs.iter().zip(&ds.samples).map(|(o, s)| cd(o.points(), s.target.points())).sum::<f64>() / ds.len() as f64
}

fn criterion_5() -> Verdict {
    let started = Instant::now();
    let data = build_dataset(&SynthConfig {
        categories: vec![Category::Box],
        count: 4,
        n: 256,
        m: 1024,
        seed: 5,
        ..SynthConfig::default()
    })
    .unwrap();
    // 250 epochs of two batches of two: 500 steps.
    let cfg = TrainConfig {
        epochs: 250,
        batch_size: 2,
        loss: LossSpec::L1,
        seed: 1,
        checkpoint_interval: 0,
        ..TrainConfig::default()
    };
    let mut model = R2PModel::new(cfg.model, 1).unwrap();
    let before = eval_cd(&model, &data);
    let (report, _) = train_run(&mut model, &data, &cfg, RunOptions::default()).unwrap();
    let after = eval_cd(&model, &data);
    let took = started.elapsed();

    // Determinism: a repeat of the first epochs follows the same loss trajectory bit for bit.
    let mut repeat = R2PModel::new(cfg.model, 1).unwrap();
    let opts = RunOptions {
        stop_after_epoch: Some(4),
        ..Default::default()
    };
    let (short, _) = train_run(&mut repeat, &data, &cfg, opts).unwrap();
    let deterministic = short.step_losses[..] == report.step_losses[..short.step_losses.len()];

    let ratio = after / before;
    check(
        report.step_losses.len() == 500 && ratio < 0.1 && deterministic && took < Duration::from_secs(600),
        format!(
            "cd {before:.4} -> {after:.4} (ratio {ratio:.3}) after {} steps, deterministic {deterministic}, {took:.1?}",
            report.step_losses.len()
        ),
    )
}

fn criterion_6() -> Verdict {
    let cfg = TrainConfig::default();
    let (epochs, lr) = (cfg.epochs, cfg.lr);
    let half = epochs / 2;
    let mut worst = 0.0f64;
    for e in 0..epochs {
        // Hand form: flat, then a straight line through (half - 1, lr) and (epochs - 1, 0).
        let expected = if e < half {
            lr
        } else {
            lr * (epochs - 1 - e) as f64 / half as f64
        };
        worst = worst.max((lr_at(&cfg, e).unwrap() - expected).abs());
    }
    let exact_ends = lr_at(&cfg, 0).unwrap() == 2e-4 && lr_at(&cfg, half - 1).unwrap() == 2e-4 && lr_at(&cfg, epochs - 1).unwrap() == 0.0;
    check(
        epochs == 200 && lr == 2e-4 && worst <= 1e-18 && exact_ends && lr_at(&cfg, epochs).is_err(),
        format!("{epochs} epochs at {lr:e}: max pointwise deviation {worst:.1e}, exact endpoints {exact_ends}"),
    )
}

fn criterion_7() -> Verdict {
    let started = Instant::now();
    let data = build_dataset(&SynthConfig {
        categories: vec![Category::Box, Category::ChairLike],
        count: 150,
        n: ABLATION_N,
        m: ABLATION_M,
        seed: 2024,
        ..SynthConfig::default()
    })
    .unwrap();
    let (train, test) = data.split(140).unwrap();
    let w = ABLATION_WIDTH;
    let base = TrainConfig {
        epochs: ABLATION_EPOCHS,
        batch_size: 2,
        lr: ABLATION_LR,
        seed: 0,
        checkpoint_interval: 0,
        model: ModelConfig {
            n: ABLATION_N,
            m: ABLATION_M,
            h1: w,
            h2: 2 * w,
            h3: 4 * w,
            h4: 8 * w,
            d1: ABLATION_DECODER,
            d2: ABLATION_DECODER,
            batchnorm: true,
        },
        ..TrainConfig::default()
    };
    let table = ablate_losses(&train, &test, &base, &[1, 2, 3]).unwrap();
    let row = |v: &str| table.row(v).unwrap();
    let (l1, l2, l3, l4) = (row("l1"), row("l2"), row("l3"), row("l4"));
    let cd_dir = l2.cd >= l3.cd;
    let emd_dir = l1.emd >= l3.emd;
    let l4_cd = (l4.cd - l3.cd).abs() / l3.cd;
    let l4_emd = (l4.emd - l3.emd).abs() / l3.emd;
    let took = started.elapsed();
    let summary: Vec<String> = table
        .rows
        .iter()
        .map(|r| format!("{} cd {:.4} emd {:.4}", r.variant, r.cd, r.emd))
        .collect();
    check(
        cd_dir && emd_dir && l4_cd <= 0.1 && l4_emd <= 0.1 && took < Duration::from_secs(7200),
        format!(
            "CD(l2)>=CD(l3) {cd_dir}, EMD(l1)>=EMD(l3) {emd_dir}, l4 vs l3 cd {:.1}% emd {:.1}% [{}], {took:.1?}",
            100.0 * l4_cd,
            100.0 * l4_emd,
            summary.join("; ")
        ),
    )
}

const ABLATION_N: usize = 128;
const ABLATION_M: usize = 256;
const ABLATION_WIDTH: usize = 64;
const ABLATION_DECODER: usize = 512;
const ABLATION_EPOCHS: usize = 10;
const ABLATION_LR: f64 = 5e-4;

fn criterion_8() -> Verdict {
    let rig = CameraRig::default();
    let spec = ObjectSpec::cube(0.6);
    let dense = sample_dense(&spec, 50_000.0, 8).unwrap();
    let intrinsics = rig.intrinsics();

    // Every back-projected pixel lies within one pixel footprint of a real point.
    let mut worst_ratio = 0.0f64;
    let mut pixels = 0;
    let views = render_views(&dense, &rig).unwrap();
    for pose in rig.poses().unwrap() {
        let img = project_cloud(&dense, intrinsics, pose, rig.width, rig.height);
        let back = depth_to_cloud(&img).unwrap();
        pixels += back.len();
        for (p, (_, d2)) in back.points().iter().zip(nearest_neighbors(back.points(), dense.points())) {
            let depth = pose.to_camera(&Vector3::new(p[0], p[1], p[2])).z;
            worst_ratio = worst_ratio.max(d2.sqrt() / pixel_footprint(&intrinsics, depth));
        }
    }

    // Each vertical face is seen by the camera facing it.
    let union = union_views(&views).unwrap();
    let eps = quantization_tolerance(&rig, &dense).unwrap();
    let labeled = spec.sample_surface_labeled(20_000, 9).unwrap();
    let mut coverage = Vec::new();
    for (axis, sign) in [(0, 1), (0, -1), (1, 1), (1, -1)] {
        let face: Vec<Point> = labeled
            .iter()
            .filter(|(_, f)| f.axis == axis && f.sign == sign)
            .map(|(p, _)| *p)
            .collect();
        let hit = nearest_neighbors(&face, union.points())
            .iter()
            .filter(|(_, d2)| d2.sqrt() <= eps)
            .count();
        coverage.push(hit as f64 / face.len() as f64);
    }
    let min_cov = coverage.iter().cloned().fold(1.0, f64::min);
    check(
        worst_ratio <= 1.0 && pixels > 0 && min_cov >= 0.9,
        format!(
            "{pixels} pixels, worst error {:.2} px footprints; side-face coverage min {min_cov:.3} at eps {eps:.4} m",
            worst_ratio
        ),
    )
}

fn criterion_9() -> Verdict {
    let gt = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
    let p_m = vec![[0.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
    let p_o = vec![[0.0, 0.0, 1.0], [2.0, 0.0, 0.0]];
    // By hand:
    //   p_m: nearest distances 0,1 one way and 0,1 back, so CD = 0.5 + 0.5 = 1.
    //        The two bijections cost (0 + sqrt2)/2 and (1 + 1)/2, so EMD = sqrt2/2.
    //   p_o: nearest distances 1,1 both ways, CD = 2.
    //        Bijections cost (1 + 1)/2 and (sqrt2 + 2)/2, so EMD = 1.
    let r2 = 2f64.sqrt();
    let (cd_m, emd_m, cd_o, emd_o) = (1.0, r2 / 2.0, 2.0, 1.0);
    let alpha = 0.1;
    // Second batch item reconstructs perfectly and contributes zero, halving the batch mean.
    let expected = [
        ("l1", 0.5 * (cd_m + alpha * cd_o)),
        ("l2", 0.5 * (emd_m + alpha * emd_o)),
        ("l3", 0.5 * ((cd_m + emd_m) + alpha * (cd_o + emd_o))),
        ("l4", 0.5 * (cd_m + alpha * emd_o)),
        ("l5", 0.5 * (emd_m + alpha * cd_o)),
    ];
    let opts = MetricOptions {
        emd: EmdSolver::Exact,
        ..Default::default()
    };
    let pms = [pc(p_m), pc(gt.clone())];
    let pos = [pc(p_o), pc(gt.clone())];
    let gts = [pc(gt.clone()), pc(gt)];
    let flat = |cs: &[PointCloud]| PointCloud::batch_tensor(&cs.iter().collect::<Vec<_>>()).unwrap();
    let mut worst = 0.0f64;
    for ((name, spec), (want_name, want)) in LossSpec::variants().into_iter().zip(expected) {
        assert_eq!(name, want_name);
        let spec = spec.with_alpha(alpha);
        let got = loss(&pms, &pos, &gts, &spec, &opts).unwrap().total;
        let mut g = Graph::new();
        let (vm, vo) = (g.constant(flat(&pms)), g.constant(flat(&pos)));
        let (l, _) = attach_loss(&mut g, vm, vo, &gts, &spec, &opts).unwrap();
        let graph_value = g.value(l).data()[0];
        worst = worst.max((got - want).abs()).max((graph_value - want).abs());
    }
    check(worst <= 1e-12, format!("five variants on 2-point fixtures, max deviation {worst:.1e}"))
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Verdict); 9] = [
        (1, "gradient soundness", criterion_1),
        (2, "metric oracles", criterion_2),
        (3, "metric properties", criterion_3),
        (4, "architecture contract", criterion_4),
        (5, "learning smoke test", criterion_5),
        (6, "schedule fidelity", criterion_6),
        (7, "ablation direction", criterion_7),
        (8, "pipeline round trip", criterion_8),
        (9, "loss definition", criterion_9),
    ];
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let mut failed = 0;
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let verdict = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match verdict {
            Ok(detail) => println!("criterion {id} ({name}): PASS  {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id} ({name}): FAIL  {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
