//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fail.
//!
//! The benchmark criteria read the shipped configurations under `configs/`,
//! so the numbers printed here are the ones a user reproduces with the CLI.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use loraroute::adapter::{apply_pair, AdapterConfig, BoundPair, TaskAdapter};
use loraroute::backbone::{Backbone, BackboneConfig, NoOverlay, Projection};
use loraroute::composer::{compose_merge, compose_wavg, Composer, CompositionKind, Weights};
use loraroute::harness::{commands, estimate_flops, router_example_loss, run_stream, run_stream_with_hook};
use loraroute::harness::{Evaluator, FlopsMethod, FlopsShape, RunConfig, Routers, TrainedState};
use loraroute::head::ClassifierHeads;
use loraroute::memory::Regime;
use loraroute::router::{gumbel_sigmoid, BoundRouter, BoundRouterLayer, Noise, Relaxation};
use loraroute::tensor::gradcheck::max_gradient_error;
use loraroute::tensor::{Tape, Tensor, Var};
use loraroute::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FAR: &str = include_str!("../../../configs/far_domain.toml");
const NEAR: &str = include_str!("../../../configs/near_domain.toml");
const HIER: &str = include_str!("../../../configs/hierarchical.toml");
const SMOKE: &str = include_str!("../../../configs/smoke.toml");

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const GRAD_SEEDS: u64 = 20;
const GRAD_STEP: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-4;

type Criterion = fn() -> Result<Verdict>;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict { pass, detail: detail.into() })
}

fn config(text: &str) -> RunConfig {
    RunConfig::from_toml_str(text).expect("shipped configuration parses")
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Scalar read-out `Σ out ⊙ R` with a fixed random `R`, so every output
/// element contributes a distinct weight to the gradient.
fn readout(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    if tape.value(out).len() == 1 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = tape.shape(out).to_vec();
    let n = tape.value(out).len();
    let r = tape.constant(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let m = tape.mul(out, r)?;
    Ok(tape.sum(m))
}

type OpCase = (&'static str, fn(&mut ChaCha8Rng) -> Vec<Tensor>, fn(&mut Tape, &[Var]) -> Result<Var>);

fn op_cases() -> Vec<OpCase> {
    vec![
        ("matmul", |r| vec![random(r, &[3, 4], -1.0, 1.0), random(r, &[4, 2], -1.0, 1.0)], |t, v| t.matmul(v[0], v[1])),
        ("add", |r| vec![random(r, &[2, 3], -1.0, 1.0), random(r, &[2, 3], -1.0, 1.0)], |t, v| t.add(v[0], v[1])),
        ("add-row", |r| vec![random(r, &[3, 4], -1.0, 1.0), random(r, &[4], -1.0, 1.0)], |t, v| t.add(v[0], v[1])),
        ("add-scalar", |r| vec![random(r, &[3, 2], -1.0, 1.0), random(r, &[1], -1.0, 1.0)], |t, v| t.add(v[0], v[1])),
        ("mul", |r| vec![random(r, &[2, 3], -1.0, 1.0), random(r, &[2, 3], -1.0, 1.0)], |t, v| t.mul(v[0], v[1])),
        ("mul-row", |r| vec![random(r, &[3, 4], -1.0, 1.0), random(r, &[1, 4], -1.0, 1.0)], |t, v| t.mul(v[0], v[1])),
        ("mul-scalar", |r| vec![random(r, &[2, 2], -1.0, 1.0), random(r, &[1], -1.0, 1.0)], |t, v| t.mul(v[0], v[1])),
        ("scale", |r| vec![random(r, &[2, 3], -1.0, 1.0)], |t, v| Ok(t.scale(v[0], -1.7))),
        ("sigmoid", |r| vec![random(r, &[2, 3], -3.0, 3.0)], |t, v| Ok(t.sigmoid(v[0]))),
        ("relu", |r| vec![random(r, &[2, 3], -1.0, 1.0)], |t, v| Ok(t.relu(v[0]))),
        ("gelu", |r| vec![random(r, &[2, 3], -3.0, 3.0)], |t, v| Ok(t.gelu(v[0]))),
        ("log", |r| vec![random(r, &[2, 3], 0.5, 2.0)], |t, v| t.log(v[0])),
        ("softmax", |r| vec![random(r, &[3, 4], -2.0, 2.0)], |t, v| Ok(t.softmax(v[0]))),
        (
            "layer_norm",
            |r| vec![random(r, &[3, 5], -2.0, 2.0), random(r, &[5], 0.5, 1.5), random(r, &[5], -0.5, 0.5)],
            |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
        ),
        ("transpose", |r| vec![random(r, &[2, 3], -1.0, 1.0)], |t, v| t.transpose(v[0])),
        ("slice_cols", |r| vec![random(r, &[3, 5], -1.0, 1.0)], |t, v| t.slice_cols(v[0], 1, 3)),
        (
            "concat_cols",
            |r| vec![random(r, &[2, 2], -1.0, 1.0), random(r, &[2, 3], -1.0, 1.0)],
            |t, v| t.concat_cols(&[v[0], v[1]]),
        ),
        ("row", |r| vec![random(r, &[3, 4], -1.0, 1.0)], |t, v| t.row(v[0], 2)),
        ("select", |r| vec![random(r, &[2, 3], -1.0, 1.0)], |t, v| t.select(v[0], 4)),
        ("gather", |r| vec![random(r, &[5, 3], -1.0, 1.0)], |t, v| t.gather(v[0], &[4, 0, 4, 2])),
        (
            "dropout",
            |r| vec![random(r, &[2, 3], -1.0, 1.0)],
            |t, v| t.dropout_mask(v[0], vec![2.0, 0.0, 2.0, 2.0, 0.0, 2.0]),
        ),
        ("sum", |r| vec![random(r, &[2, 3], -1.0, 1.0)], |t, v| Ok(t.sum(v[0]))),
        ("mean", |r| vec![random(r, &[2, 3], -1.0, 1.0)], |t, v| Ok(t.mean(v[0]))),
        ("group_nll", |r| vec![random(r, &[1, 5], -2.0, 2.0)], |t, v| t.group_nll(v[0], &[1, 3])),
        ("cross_entropy", |r| vec![random(r, &[1, 4], -2.0, 2.0)], |t, v| t.group_nll(v[0], &[2])),
    ]
}

/// Small trained state for the router-gradient check.
fn tiny_state() -> Result<TrainedState> {
    let cfg = config(SMOKE);
    run_stream(&cfg.stream()?, &cfg)
}

fn router_gradients() -> Result<(f64, usize)> {
    let state = tiny_state()?;
    let d = state.backbone.config().hidden_dim;
    let layers = state.backbone.config().num_layers;
    let t_count = state.num_tasks();
    let view = state.memory.router_training_view(Regime::Cil, None)?;
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    for seed in 0..GRAD_SEEDS {
        for relaxation in [Relaxation::GumbelSigmoid, Relaxation::Softmax] {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let mut inputs = Vec::new();
            for _ in 0..layers {
                inputs.push(random(&mut rng, &[t_count, d], -0.5, 0.5));
                inputs.push(random(&mut rng, &[t_count], -0.5, 0.5));
            }
            let u: Vec<Vec<f64>> = (0..layers)
                .map(|_| (0..t_count).map(|_| rng.random_range(0.01..0.99)).collect())
                .collect();
            let ex = &view[rng.random_range(0..view.len())];
            let err = max_gradient_error(&inputs, GRAD_STEP, |tape, vars| {
                let layers = vars
                    .chunks(2)
                    .map(|p| BoundRouterLayer::new(tape, p[0], p[1]))
                    .collect::<Result<Vec<_>>>()?;
                let router = BoundRouter {
                    layers,
                    relaxation,
                    temperature: 0.8,
                };
                router_example_loss(&state, tape, &router, Noise::Fixed(&u), ex.tokens, Regime::Cil, 0, ex.target)
            })?;
            worst = worst.max(err);
            checks += 1;
        }
    }
    Ok((worst, checks))
}

fn c1_gradients() -> Result<Verdict> {
    let mut worst: f64 = 0.0;
    let mut worst_op = "";
    let cases = op_cases();
    for (name, make, f) in &cases {
        for seed in 0..GRAD_SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = make(&mut rng);
            let err = max_gradient_error(&inputs, GRAD_STEP, |tape, vars| {
                let out = f(tape, vars)?;
                readout(tape, out, seed)
            })?;
            if err > worst {
                worst = err;
                worst_op = name;
            }
        }
    }

    let mut delta_worst: f64 = 0.0;
    for seed in 0..GRAD_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let (d, r, n) = (6, 3, 4);
        let inputs = vec![
            random(&mut rng, &[r, d], -1.0, 1.0),
            random(&mut rng, &[d, r], -1.0, 1.0),
            random(&mut rng, &[n, d], -1.0, 1.0),
        ];
        let scaling = if seed % 2 == 0 { 1.0 } else { 0.5 };
        let err = max_gradient_error(&inputs, GRAD_STEP, |tape, v| {
            let pair = BoundPair {
                down: v[0],
                up: v[1],
                scaling,
                dropout: 0.0,
            };
            let out = apply_pair(tape, &pair, v[2], None)?;
            readout(tape, out, seed)
        })?;
        delta_worst = delta_worst.max(err);
    }

    let (router_worst, router_checks) = router_gradients()?;
    let all = worst.max(delta_worst).max(router_worst);
    verdict(
        all < GRAD_TOL,
        format!(
            "{} ops x {GRAD_SEEDS} seeds worst {worst:.2e} ({worst_op}); adapter delta {delta_worst:.2e}; \
             router loss ({router_checks} fixed-draw instances) {router_worst:.2e}; tolerance {GRAD_TOL:.0e}",
            cases.len()
        ),
    )
}

fn c2_isolation() -> Result<Verdict> {
    let mut cfg = config(SMOKE);
    cfg.data.generator.num_tasks = 3;
    let stream = cfg.stream()?;
    let mut snapshot: Vec<Vec<u8>> = Vec::new();
    let state = run_stream_with_hook(&stream, &cfg, &mut |t, bank| {
        if t == 1 {
            snapshot = bank.adapters()[..2].iter().map(|a| a.to_bytes()).collect::<Result<_>>()?;
        }
        Ok(())
    })?;
    let after: Vec<Vec<u8>> = state.bank.adapters()[..2].iter().map(|a| a.to_bytes()).collect::<Result<_>>()?;
    let trained = state.bank.get(2).layers.iter().any(|l| l.query.up.data().iter().any(|&x| x != 0.0));
    verdict(
        snapshot.len() == 2 && snapshot == after && trained,
        format!(
            "adapters 1-2 byte-identical across task-3 training: {}; task-3 adapter moved: {trained}",
            snapshot == after
        ),
    )
}

fn c3_identity() -> Result<Verdict> {
    let cfg = BackboneConfig {
        num_layers: 2,
        hidden_dim: 16,
        num_heads: 4,
        ffn_dim: 32,
        vocab_size: 50,
        max_seq_len: 12,
        seed: 11,
    };
    let backbone = Backbone::new(cfg.clone())?;
    let adapter = TaskAdapter::new("fresh", &cfg, &AdapterConfig::default(), 3)?;
    let mut heads = ClassifierHeads::new();
    heads.grow("fresh", 16, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    heads.block_mut(0).weight = random(&mut rng, &[16, 3], -1.0, 1.0);
    heads.block_mut(0).bias = random(&mut rng, &[3], -1.0, 1.0);

    let mut max_diff: f64 = 0.0;
    for k in 0..25 {
        let tokens: Vec<u32> = std::iter::once(0).chain((0..1 + k % 10).map(|_| rng.random_range(1..50))).collect();
        let logits = |with_adapter: bool| -> Result<Vec<f64>> {
            let mut tape = Tape::new();
            let bb = backbone.bind(&mut tape);
            let blocks = heads.bind(&mut tape);
            let bound = [adapter.bind(&mut tape)];
            let enc = if with_adapter {
                let mut c = Composer::new(&bound, Weights::Fixed(vec![1.0]), false);
                backbone.encode(&mut tape, &bb, &tokens, &mut c)?
            } else {
                backbone.encode(&mut tape, &bb, &tokens, &mut NoOverlay)?
            };
            let out = ClassifierHeads::all_logits(&mut tape, &blocks, enc.pooled)?;
            Ok(tape.value(out).to_vec())
        };
        let (a, b) = (logits(false)?, logits(true)?);
        for (x, y) in a.iter().zip(&b) {
            max_diff = max_diff.max((x - y).abs());
        }
    }
    verdict(max_diff == 0.0, format!("max |Δlogit| over 25 inputs = {max_diff:e}"))
}

fn c4_composition() -> Result<Verdict> {
    let cfg = BackboneConfig {
        num_layers: 2,
        hidden_dim: 12,
        num_heads: 3,
        ffn_dim: 24,
        vocab_size: 20,
        max_seq_len: 8,
        seed: 0,
    };
    let tasks = 4;
    let mut worst: f64 = 0.0;
    for k in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(k);
        let adapters = (0..tasks)
            .map(|t| {
                let mut a = TaskAdapter::new(&format!("t{t}"), &cfg, &AdapterConfig::default(), k)?;
                for layer in &mut a.layers {
                    for target in Projection::ALL {
                        let up = &mut layer.pair_mut(target).up;
                        let shape = up.shape().to_vec();
                        *up = random(&mut rng, &shape, -1.0, 1.0);
                    }
                }
                Ok(a)
            })
            .collect::<Result<Vec<_>>>()?;
        let bank = loraroute::adapter::AdapterBank::from_adapters(adapters);
        let weights: Vec<f64> = (0..tasks).map(|_| rng.random_range(0.0..1.0)).collect();
        let x = random(&mut rng, &[1 + (k as usize % 6), 12], -2.0, 2.0);
        let layer = (k % 2) as usize;
        let target = Projection::ALL[(k / 2 % 2) as usize];
        let a = compose_wavg(&bank, layer, target, &weights, &x)?;
        let b = compose_merge(&bank, layer, target, &weights, &x)?;
        let scale = a.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        let diff = a.data().iter().zip(b.data()).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
        worst = worst.max(diff / scale);
    }
    verdict(worst < 1e-10, format!("1000 pairs, max relative diff {worst:.2e} (< 1e-10)"))
}

fn c5_upper_bound() -> Result<Verdict> {
    let mut cfg = config(SMOKE);
    cfg.data.generator.num_tasks = 3;
    let stream = cfg.stream()?;
    let state = run_stream(&stream, &cfg)?;
    let routers = Routers::default();
    let full = Evaluator::new(&state, &routers)?.evaluate(CompositionKind::UpperBound, Regime::Til)?;
    let mut standalone = Vec::new();
    for t in 0..stream.num_tasks() {
        let alone = run_stream(&stream.subset(&[t])?, &cfg)?;
        let e = Evaluator::new(&alone, &routers)?.evaluate(CompositionKind::UpperBound, Regime::Til)?;
        standalone.push(e.per_task[0]);
    }
    verdict(
        full.per_task == standalone,
        format!("stream {:?} vs standalone {:?}", full.per_task, standalone),
    )
}

fn c6_gumbel() -> Result<Verdict> {
    let mut worst: f64 = 0.0;
    for i in -40..=40 {
        let z = i as f64 * 0.5;
        let exact = 1.0 / (1.0 + (-z).exp());
        worst = worst.max((gumbel_sigmoid(z, 0.5, 1.0) - exact).abs());
    }
    // Midpoint rule over u for the expectation at z = 1.
    let z = 1.0;
    let n = 200_000;
    let quad = (0..n).map(|i| gumbel_sigmoid(z, (i as f64 + 0.5) / n as f64, 1.0)).sum::<f64>() / n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let draws = 100_000;
    let mc = (0..draws).map(|_| gumbel_sigmoid(z, rng.random::<f64>(), 1.0)).sum::<f64>() / draws as f64;
    verdict(
        worst <= 1e-12 && (mc - quad).abs() <= 0.01,
        format!("u=0.5 max error {worst:.1e}; 1e5-draw mean {mc:.4} vs quadrature {quad:.4}"),
    )
}

fn c7_router_efficacy() -> Result<Verdict> {
    let cfg = config(FAR);
    let (mut wavg, mut ub, mut centroid, mut lb) = (0.0, 0.0, 0.0, 0.0);
    for &seed in &SEEDS {
        let c = cfg.with_seed(seed);
        let state = run_stream(&c.stream()?, &c)?;
        let routers = loraroute::harness::train_routers(&state, &c.router, &[Regime::Cil], c.seed)?;
        let ev = Evaluator::new(&state, &routers)?;
        wavg += ev.evaluate(CompositionKind::Wavg, Regime::Cil)?.average;
        ub += ev.evaluate(CompositionKind::UpperBound, Regime::Cil)?.average;
        centroid += ev.evaluate(CompositionKind::Centroid, Regime::Cil)?.average;
        lb += ev.evaluate(CompositionKind::LowerBound, Regime::Cil)?.average;
    }
    let k = SEEDS.len() as f64;
    let (wavg, ub, centroid, lb) = (wavg / k, ub / k, centroid / k, lb / k);
    verdict(
        wavg >= 0.95 * ub && wavg > centroid && wavg > lb,
        format!("CIL wavg {wavg:.4} vs 0.95 x upper-bound {:.4}, centroid {centroid:.4}, lower-bound {lb:.4}", 0.95 * ub),
    )
}

fn c8_memory_trend() -> Result<Verdict> {
    let root = tempfile::tempdir()?;
    let mut cfg = config(NEAR);
    cfg.output_root = root.path().to_path_buf();
    let (path, rows) = commands::sweep(&cfg, &[0.01, 0.30], &SEEDS, 1)?;
    let mean_at = |p: f64| {
        let v: Vec<f64> = rows.iter().filter(|r| r.fraction == p).map(|r| r.average).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (low, high) = (mean_at(0.01), mean_at(0.30));
    let csv_rows = std::fs::read_to_string(path)?.lines().count() - 1;
    verdict(
        high >= low && csv_rows == 2 * SEEDS.len(),
        format!("mean accuracy p=0.30 {high:.4} vs p=0.01 {low:.4}; {csv_rows} CSV rows"),
    )
}

fn c9_relaxation() -> Result<Verdict> {
    let root = tempfile::tempdir()?;
    let mut cfg = config(HIER);
    cfg.output_root = root.path().to_path_buf();
    let (_, report) = commands::ablate(&cfg, &SEEDS, 1)?;
    let gumbel = report.mean(Relaxation::GumbelSigmoid);
    let softmax = report.mean(Relaxation::Softmax);
    let dir = cfg.run_dir();
    let layers = cfg.backbone.num_layers;
    let csvs = SEEDS.iter().all(|s| {
        ["gumbel-sigmoid", "softmax"].iter().all(|r| {
            (0..layers).all(|l| dir.join(format!("seed{s}/routing_{r}_layer{l}.csv")).is_file())
        })
    });
    verdict(
        gumbel >= softmax && csvs,
        format!("gumbel-sigmoid {gumbel:.4} vs softmax {softmax:.4}; routing CSVs for both: {csvs}"),
    )
}

fn c10_flops() -> Result<Verdict> {
    let backbone = BackboneConfig::default();
    let (rank, t) = (8usize, 5u64);
    let get = |m| estimate_flops(&backbone, rank, t as usize, m).map(|e| e.flops);
    let (base, wavg, merge, centroid) = (
        get(FlopsMethod::Base)?,
        get(FlopsMethod::Wavg)?,
        get(FlopsMethod::Merge)?,
        get(FlopsMethod::Centroid)?,
    );
    let s = FlopsShape::new(&backbone, rank, t as usize);
    let (n, d, r, l) = (s.seq_len, s.dim, s.rank, s.layers);
    // Per path: x·Aᵀ and ·Bᵀ at 2·n·d·r each, plus the weighted add.
    let path = 4 * n * d * r + 2 * n * d;
    let expected = (t - 1) * 2 * l * path + l * (2 * d * t + t);
    verdict(
        merge == centroid && base < merge && merge < wavg && wavg - merge == expected,
        format!("base {base} < merge {merge} = centroid {centroid} < wavg {wavg}; wavg-merge {} vs {expected}", wavg - merge),
    )
}

fn c11_determinism() -> Result<Verdict> {
    let (a, b) = (tempfile::tempdir()?, tempfile::tempdir()?);
    let mut cfg = config(SMOKE);
    cfg.output_root = a.path().to_path_buf();
    let first = std::fs::read(commands::train(&cfg)?.join(commands::REPORT_FILE))?;
    cfg.output_root = b.path().to_path_buf();
    let second = std::fs::read(commands::train(&cfg)?.join(commands::REPORT_FILE))?;
    verdict(first == second, format!("report.json {} bytes, identical: {}", first.len(), first == second))
}

fn main() {
    let criteria: [(&str, Criterion); 11] = [
        ("gradient correctness", c1_gradients),
        ("isolation", c2_isolation),
        ("identity at init", c3_identity),
        ("composition oracle", c4_composition),
        ("upper-bound equality", c5_upper_bound),
        ("gumbel-sigmoid limits", c6_gumbel),
        ("router efficacy", c7_router_efficacy),
        ("memory-size trend", c8_memory_trend),
        ("relaxation ablation", c9_relaxation),
        ("flops structure", c10_flops),
        ("determinism", c11_determinism),
    ];
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run));
        let secs = start.elapsed().as_secs_f64();
        let (pass, detail) = match outcome {
            Ok(Ok(v)) => (v.pass, v.detail),
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(_) => (false, "panicked".to_string()),
        };
        failures += usize::from(!pass);
        println!("{} {:>2} {name}: {detail} [{secs:.1}s]", if pass { "PASS" } else { "FAIL" }, i + 1);
    }
    println!("{} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
