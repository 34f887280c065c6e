//! Acceptance suite. Prints one PASS/FAIL line per criterion. Exits nonzero
//! on failure only when `ALRAO_ACCEPTANCE_STRICT` is set.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::Rng as _;
use rand_distr::StandardNormal;

use alrao::averaging::{switch_bruteforce_oracle, Averaging, BmaState, SwitchState, DEFAULT_THETA};
use alrao::engine::{build_alrao, AlraoSpec, AveragingKind, UpdateRule};
use alrao::features::LrInterval;
use alrao::harness::experiments::{
    run_frozen_on, run_grid_cell, run_grid_on, run_interval_sweep_on, sweep_alrao_cell,
};
use alrao::harness::output::{emit_csv, read_posterior};
use alrao::harness::run::{prepare_data, train_on, RunOptions, Splits};
use alrao::harness::{run_convex_check, RunLog, TrainConfig, Verdict};
use alrao::nn::{
    batch_cross_entropy, finite_diff_gradient, relative_error, Activation, GradientSet, Layer,
    Mode, Network, Padding,
};
use alrao::optim::plain_sgd_step;
use alrao::rng::{rng_from_seed, Rng};
use alrao::Tensor;

const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn out_root() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn config(name: &str) -> TrainConfig {
    let p = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name);
    TrainConfig::from_file(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.sample(StandardNormal)).collect(),
    )
    .unwrap()
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Worst relative error of parameter and input gradients of `<net(x), r>`.
fn layer_case(net: &Network, x: &Tensor, mode: Mode, rng: &mut Rng) -> f64 {
    let (y, cache) = net.forward(x, mode).unwrap();
    let r = randn(y.shape(), rng);
    let (grads, dx) = net.backward(&cache, &r).unwrap();
    let mut worst: f64 = 0.0;
    if !grads.tensors.is_empty() {
        let fd = finite_diff_gradient(
            |p| {
                let mut n2 = net.clone();
                n2.set_params(p).unwrap();
                dot(&n2.forward(x, mode).unwrap().0, &r)
            },
            &net.clone_params(),
            1e-5,
        )
        .unwrap();
        worst = worst.max(relative_error(&grads, &fd));
    }
    let fdx = finite_diff_gradient(
        |p| dot(&net.forward(&p[0], mode).unwrap().0, &r),
        std::slice::from_ref(x),
        1e-5,
    )
    .unwrap();
    worst.max(relative_error(&GradientSet { tensors: vec![dx] }, &fdx))
}

fn criterion_1() -> Outcome {
    let mut rng = rng_from_seed(1);
    let mut layer_worst: f64 = 0.0;
    for i in 0..120 {
        let act = [Activation::Tanh, Activation::Relu, Activation::Sigmoid][i % 3];
        let mut net = match i % 6 {
            0 => Network::builder(&[5]).dense(4, &mut rng).build(),
            1 => Network::builder(&[2, 5, 5])
                .conv2d(3, 3, Padding::Valid, &mut rng)
                .build(),
            2 => Network::builder(&[2, 4, 4])
                .conv2d(2, 3, Padding::Same, &mut rng)
                .build(),
            3 => Network::builder(&[4]).batchnorm().build(),
            4 => Network::builder(&[4]).activation(act).build(),
            _ => Network::builder(&[1, 6, 6])
                .conv2d(2, 3, Padding::Valid, &mut rng)
                .activation(act)
                .dense(3, &mut rng)
                .build(),
        }
        .unwrap();
        if let Layer::BatchNorm1d(b) = &mut net.layers_mut()[0] {
            b.gain = randn(&[4], &mut rng);
            b.bias = randn(&[4], &mut rng);
        }
        let mut shape = vec![3];
        shape.extend_from_slice(net.input_shape());
        let x = randn(&shape, &mut rng);
        let mode = if i % 4 == 3 { Mode::Eval } else { Mode::Train };
        layer_worst = layer_worst.max(layer_case(&net, &x, mode, &mut rng));
    }

    let mut mix_worst: f64 = 0.0;
    for i in 0..100u64 {
        let mut init = rng_from_seed(100 + i);
        let body = Network::builder(&[4])
            .dense(5, &mut init)
            .activation(Activation::Tanh)
            .build()
            .unwrap();
        let spec = AlraoSpec {
            n_cl: 1 + (i as usize % 4),
            num_classes: 3,
            interval: LrInterval::new(1e-3, 1.0).unwrap(),
            averaging: AveragingKind::Bma,
            update: UpdateRule::Sgd,
        };
        let mut m = build_alrao(body, &spec, &mut init, &mut rng_from_seed(200 + i)).unwrap();
        m.averaging = Averaging::Bma(BmaState {
            log_w: (0..spec.n_cl)
                .map(|_| rng.random_range(-3.0..0.0))
                .collect(),
        });
        let x = randn(&[6, 4], &mut rng);
        let ys: Vec<usize> = (0..6).map(|_| rng.random_range(0..3)).collect();
        let (_, analytic) = m.body_gradient(&x, &ys, Mode::Train).unwrap();
        let numeric = finite_diff_gradient(
            |p| {
                let mut m2 = m.clone();
                m2.preclassifier.set_params(p).unwrap();
                m2.mixture_loss(&x, &ys, Mode::Train).unwrap()
            },
            &m.preclassifier.clone_params(),
            1e-5,
        )
        .unwrap();
        mix_worst = mix_worst.max(relative_error(&analytic, &numeric));
    }
    Outcome {
        pass: layer_worst < 1e-5 && mix_worst < 1e-5,
        detail: format!("layers worst {layer_worst:.2e}, mixture worst {mix_worst:.2e} (120 layer and 100 mixture cases)"),
    }
}

fn criterion_2() -> Outcome {
    let mut rng = rng_from_seed(2);
    let mut worst: f64 = 0.0;
    for i in 0..200 {
        let t_len = rng.random_range(1..=6);
        let n_cl = rng.random_range(1..=3);
        let theta = if i % 2 == 0 { 0.5 } else { 0.999 };
        let rows: Vec<Vec<f64>> = (0..t_len)
            .map(|_| (0..n_cl).map(|_| -3.0 * rng.random::<f64>()).collect())
            .collect();
        let mut s = SwitchState::new(n_cl, theta).unwrap();
        for t in 1..=t_len {
            let got = s.update(&rows[t - 1]).unwrap();
            let want = switch_bruteforce_oracle(&rows[..t], n_cl, theta).unwrap();
            for (a, b) in got.iter().zip(&want) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Outcome {
        pass: worst < 1e-10,
        detail: format!("max deviation {worst:.2e} over 200 instances"),
    }
}

fn criterion_3() -> Outcome {
    let eta = 0.05;
    let mut init = rng_from_seed(3);
    let body = Network::builder(&[5])
        .dense(8, &mut init)
        .activation(Activation::Tanh)
        .dense(8, &mut init)
        .activation(Activation::Tanh)
        .build()
        .unwrap();
    let spec = AlraoSpec {
        n_cl: 1,
        num_classes: 3,
        interval: LrInterval::degenerate(eta).unwrap(),
        averaging: AveragingKind::Switch {
            theta: DEFAULT_THETA,
        },
        update: UpdateRule::Sgd,
    };
    let mut m = build_alrao(body, &spec, &mut init, &mut rng_from_seed(4)).unwrap();
    let mut plain = m.as_network(0).unwrap();
    let mut data = rng_from_seed(5);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let x = randn(&[8, 5], &mut data);
        let ys: Vec<usize> = (0..8).map(|_| data.random_range(0..3)).collect();
        m.step(&x, &ys).unwrap();
        let (out, cache) = plain.forward(&x, Mode::Train).unwrap();
        let (_, g) = batch_cross_entropy(&out, &ys).unwrap();
        let (grads, _) = plain.backward(&cache, &g).unwrap();
        plain_sgd_step(&mut plain.params_mut(), &grads, eta).unwrap();
        let a = m.as_network(0).unwrap();
        for (ta, tb) in a.params().iter().zip(plain.params()) {
            for (x, y) in ta.data().iter().zip(tb.data()) {
                if x != y {
                    worst = worst.max((x - y).abs() / x.abs().max(y.abs()));
                }
            }
        }
    }
    Outcome {
        pass: worst < 1e-10,
        detail: format!("max relative deviation {worst:.2e} over 200 steps"),
    }
}

fn criterion_4() -> Outcome {
    let r = run_convex_check(&config("blobs.conf")).unwrap();
    alrao::harness::emit_convex(&r, &out_root().join("c4")).unwrap();
    Outcome {
        pass: r.verdict == Verdict::Pass,
        detail: format!(
            "{}: lambda {:.4}, L* {:.6}, Alrao {:.6}, tol {:e}",
            r.verdict,
            r.lambda,
            r.l_star,
            r.alrao_loss.unwrap_or(f64::NAN),
            r.tol
        ),
    }
}

struct GridRun {
    best_lr: Option<f64>,
    best_top1: f64,
}

/// Criterion-6 runs for one dataset and seed.
struct SeedRuns {
    data: Splits,
    cfg: TrainConfig,
    grid: GridRun,
    alrao: RunLog,
}

fn seed_runs(base: &TrainConfig, seed: u64, tag: &str) -> SeedRuns {
    let cfg = TrainConfig {
        seed,
        ..base.clone()
    };
    let data = prepare_data(&cfg).unwrap();
    let g = run_grid_on(&cfg, &data, &cfg.grid).unwrap();
    let grid = GridRun {
        best_lr: g.best_lr(),
        best_top1: g
            .best_run()
            .and_then(|r| r.test)
            .map_or(f64::NAN, |m| m.top1),
    };
    let alrao = train_on(&cfg, &data, "alrao", RunOptions::from_config(&cfg)).unwrap();
    emit_csv(&alrao, &out_root().join(format!("c6/{tag}-seed{seed}"))).unwrap();
    SeedRuns {
        data,
        cfg,
        grid,
        alrao,
    }
}

fn criterion_5(blobs0: &SeedRuns) -> Outcome {
    let chance = (blobs0.data.train.meta.num_classes as f64).ln();
    let bar = 0.5 * chance;
    let Some(best) = blobs0.grid.best_lr else {
        return Outcome {
            pass: false,
            detail: "every grid run failed".into(),
        };
    };
    let cells = run_interval_sweep_on(&blobs0.cfg, &blobs0.data, &blobs0.cfg.sweep_grid).unwrap();
    alrao::harness::emit_sweep(&cells, &blobs0.cfg.sweep_grid, &out_root().join("c5")).unwrap();
    let containing: Vec<_> = cells
        .iter()
        .filter(|c| !c.is_sgd() && c.eta_min <= best && best <= c.eta_max)
        .collect();
    let bad: Vec<String> = containing
        .iter()
        .filter(|c| c.loss() >= bar)
        .map(|c| format!("[{:e},{:e}]={:.3}", c.eta_min, c.eta_max, c.loss()))
        .collect();
    let failing_diag: Vec<String> = cells
        .iter()
        .filter(|c| c.is_sgd() && (c.log.failed() || c.loss() >= bar))
        .map(|c| format!("{:e}={:.3}", c.eta_min, c.loss()))
        .collect();
    let worst = containing.iter().map(|c| c.loss()).fold(0.0, f64::max);
    Outcome {
        pass: !containing.is_empty() && bad.is_empty() && !failing_diag.is_empty(),
        detail: format!(
            "best SGD lr {best:e}; {} intervals contain it, worst final val loss {worst:.3} (bar {bar:.3}){}; failing diagonal cells {:?}",
            containing.len(),
            if bad.is_empty() { String::new() } else { format!(", above bar {bad:?}") },
            failing_diag
        ),
    }
}

fn criterion_6(sets: &[(&str, &[SeedRuns])]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, runs) in sets {
        let sgd: Vec<f64> = runs.iter().map(|r| r.grid.best_top1).collect();
        let alrao: Vec<f64> = runs
            .iter()
            .map(|r| r.alrao.test.map_or(f64::NAN, |m| m.top1))
            .collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let gap = mean(&sgd) - mean(&alrao);
        pass &= gap <= 0.05;
        parts.push(format!(
            "{name}: SGD {:?} (lr {:?}), Alrao {:?}, mean gap {:.1} pts",
            sgd.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>(),
            runs.iter().map(|r| r.grid.best_lr).collect::<Vec<_>>(),
            alrao.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>(),
            100.0 * gap
        ));
    }
    Outcome {
        pass,
        detail: parts.join("; "),
    }
}

fn criterion_7(sets: &[(&str, &[SeedRuns])]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, runs) in sets {
        for r in *runs {
            let dir = out_root().join(format!("c6/{name}-seed{}", r.cfg.seed));
            let rows = read_posterior(fs::File::open(dir.join("posterior.csv")).unwrap()).unwrap();
            let per_epoch = r.data.train.len().div_ceil(r.cfg.batch_size) as u64;
            let top = rows.first().map_or(0, |row| row.weights.len()) - 1;
            let first = rows.iter().filter(|row| row.step <= per_epoch);
            let min_top = first
                .map(|row| row.weights[top])
                .fold(f64::INFINITY, f64::min);
            let max_later = rows
                .iter()
                .filter(|row| row.step > per_epoch)
                .flat_map(|row| row.weights.iter().copied())
                .fold(0.0, f64::max);
            let ok = min_top < 1e-3 && max_later > 0.9;
            pass &= ok;
            parts.push(format!(
                "{name}/{}: top-rate min {min_top:.2e} in epoch 1, max weight {max_later:.3} later{}",
                r.cfg.seed,
                if ok { "" } else { " FAIL" }
            ));
        }
    }
    Outcome {
        pass,
        detail: parts.join("; "),
    }
}

fn criterion_8(blobs: &[SeedRuns]) -> Outcome {
    let chance = 1.0 / blobs[0].data.train.meta.num_classes as f64;
    let ps = [0.0, 0.5, 1.0];
    let mut acc = vec![Vec::new(); ps.len()];
    for r in blobs {
        let Some(lr) = r.grid.best_lr else {
            return Outcome {
                pass: false,
                detail: "no grid-best lr".into(),
            };
        };
        let cfg = TrainConfig {
            lr,
            ..r.cfg.clone()
        };
        let runs = run_frozen_on(&cfg, &r.data, &ps).unwrap();
        alrao::harness::emit_frozen(&runs, &out_root().join(format!("c8/seed{}", cfg.seed)))
            .unwrap();
        for (i, (_, log)) in runs.iter().enumerate() {
            acc[i].push(log.test.map_or(f64::NAN, |m| m.top1));
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (m0, m5, m1) = (mean(&acc[0]), mean(&acc[1]), mean(&acc[2]));
    let half_ok = (m1 - m5).abs() <= 0.05;
    let zero_ok = (m0 - chance).abs() <= 0.03;
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|a| format!("{a:.3}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    Outcome {
        pass: half_ok && zero_ok,
        detail: format!(
            "p=1 [{}] mean {m1:.3}; p=0.5 [{}] mean {m5:.3} ({}); p=0 [{}] mean {m0:.3} vs chance {chance:.3} ({})",
            fmt(&acc[2]),
            fmt(&acc[1]),
            if half_ok { "ok" } else { "gap too large" },
            fmt(&acc[0]),
            if zero_ok { "ok" } else { "outside 3 pts" }
        ),
    }
}

fn criterion_9() -> Outcome {
    let t_len = 200;
    let mut rng = rng_from_seed(9);
    let mut switch = Averaging::switch(2, DEFAULT_THETA).unwrap();
    let mut bma = Averaging::bma(2).unwrap();
    for t in 0..t_len {
        let noise: f64 = 0.05 * rng.sample::<f64, _>(StandardNormal);
        let (good, poor) = (-0.2 + noise, -1.0 - noise);
        let row = if t < t_len / 2 {
            [good, poor]
        } else {
            [poor, good]
        };
        switch.update(&row).unwrap();
        bma.update(&row).unwrap();
    }
    let (s, b) = (switch.posterior()[1], bma.posterior()[1]);
    Outcome {
        pass: s > b,
        detail: format!("late-best expert: switch {s:.4}, BMA {b:.4}"),
    }
}

fn criterion_10(blobs0: &SeedRuns) -> Outcome {
    let root = out_root().join("c10");
    let cfg = &blobs0.cfg;
    let mut mismatched = Vec::new();
    let mut check = |label: &str, make: &dyn Fn() -> RunLog| {
        let a = root.join(format!("{label}-a"));
        let b = root.join(format!("{label}-b"));
        emit_csv(&make(), &a).unwrap();
        emit_csv(&make(), &b).unwrap();
        if fs::read(a.join("curves.csv")).unwrap() != fs::read(b.join("curves.csv")).unwrap() {
            mismatched.push(label.to_string());
        }
    };
    check("sweep-cell", &|| {
        sweep_alrao_cell(cfg, &blobs0.data, 1e-5, 10.0).unwrap().log
    });
    check("grid-cell", &|| {
        run_grid_cell(cfg, &blobs0.data, 1e-2).unwrap()
    });
    check("alrao", &|| {
        let data = prepare_data(cfg).unwrap();
        train_on(cfg, &data, "alrao", RunOptions::from_config(cfg)).unwrap()
    });
    check("frozen", &|| {
        run_frozen_on(cfg, &blobs0.data, &[0.5])
            .unwrap()
            .remove(0)
            .1
    });
    // The first Alrao run of the suite must also match its re-run.
    let first = out_root().join(format!("c6/blobs-seed{}/curves.csv", cfg.seed));
    if fs::read(first).unwrap() != fs::read(root.join("alrao-a/curves.csv")).unwrap() {
        mismatched.push("alrao vs criterion 6".into());
    }
    Outcome {
        pass: mismatched.is_empty(),
        detail: if mismatched.is_empty() {
            "sweep cell, grid cell, Alrao and frozen runs byte-identical".into()
        } else {
            format!("differs: {mismatched:?}")
        },
    }
}

fn report(id: usize, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> usize {
    let start = Instant::now();
    let o = f();
    let took = start.elapsed();
    let in_time = limit.is_none_or(|l| took < l);
    let pass = o.pass && in_time;
    println!(
        "criterion {id:>2} {name}: {} [{:.1}s{}] {}",
        if pass { "PASS" } else { "FAIL" },
        took.as_secs_f64(),
        match limit {
            Some(l) if !in_time => format!(", over {}s limit", l.as_secs()),
            _ => String::new(),
        },
        o.detail
    );
    usize::from(pass)
}

fn main() {
    let _ = fs::remove_dir_all(out_root());
    let min = |m: u64| Some(Duration::from_secs(60 * m));
    let mut passed = 0;
    passed += report(1, "gradient correctness", min(1), criterion_1);
    passed += report(2, "switch exactness", min(1), criterion_2);
    passed += report(3, "collapse identity", min(1), criterion_3);
    passed += report(4, "convex convergence", min(5), criterion_4);

    // Criterion 6 runs are shared with 5, 7, 8 and 10.
    let start = Instant::now();
    let blobs_cfg = config("blobs.conf");
    let digits_cfg = config("digits.conf");
    let blobs: Vec<SeedRuns> = SEEDS
        .iter()
        .map(|&s| seed_runs(&blobs_cfg, s, "blobs"))
        .collect();
    let digits: Vec<SeedRuns> = SEEDS
        .iter()
        .map(|&s| seed_runs(&digits_cfg, s, "digits"))
        .collect();
    let c6_time = start.elapsed();
    let sets: [(&str, &[SeedRuns]); 2] = [("blobs", &blobs), ("digits", &digits)];

    passed += report(5, "interval robustness", min(30), || criterion_5(&blobs[0]));
    passed += report(
        6,
        "gap to best SGD",
        min(30).map(|l| l.saturating_sub(c6_time)),
        || criterion_6(&sets),
    );
    passed += report(7, "posterior behavior", None, || criterion_7(&sets));
    passed += report(8, "frozen features", min(10), || criterion_8(&blobs));
    passed += report(9, "catch-up", Some(Duration::from_secs(1)), criterion_9);
    passed += report(10, "determinism", None, || criterion_10(&blobs[0]));
    println!("criterion 6 training took {:.1}s", c6_time.as_secs_f64());
    println!("{passed}/10 criteria passed");
    if passed < 10 && std::env::var_os("ALRAO_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
