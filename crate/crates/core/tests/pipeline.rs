use loraroute::composer::CompositionKind;
use loraroute::data::{export_jsonl, generate_stream, Split};
use loraroute::harness::commands::{self, load_state};
use loraroute::harness::{
    run_stream, sweep_memory, train_router, train_routers, Evaluator, IngestConfig, RouterConfig, RunConfig,
};
use loraroute::memory::Regime;
use loraroute::router::Relaxation;

fn smoke() -> RunConfig {
    RunConfig::from_toml_str(include_str!("../../../configs/smoke.toml")).unwrap()
}

#[test]
fn router_training_leaves_model_untouched() {
    let cfg = smoke();
    let state = run_stream(&cfg.stream().unwrap(), &cfg).unwrap();
    let backbone = state.backbone.to_bytes();
    let adapters: Vec<Vec<u8>> = state.bank.adapters().iter().map(|a| a.to_bytes().unwrap()).collect();
    let heads = state.heads.to_bytes().unwrap();
    train_routers(&state, &cfg.router, &[Regime::Cil, Regime::Til], cfg.seed).unwrap();
    assert_eq!(state.backbone.to_bytes(), backbone);
    assert_eq!(state.heads.to_bytes().unwrap(), heads);
    for (a, before) in state.bank.adapters().iter().zip(&adapters) {
        assert_eq!(&a.to_bytes().unwrap(), before);
    }
}

#[test]
fn zero_epochs_keep_the_zero_router() {
    let cfg = smoke();
    let state = run_stream(&cfg.stream().unwrap(), &cfg).unwrap();
    let rc = RouterConfig { epochs: 0, ..cfg.router.clone() };
    let r = train_router(&state, &rc, Regime::Cil, None, 0).unwrap();
    assert!(r.epoch_losses.is_empty());
    for layer in r.stack.layers() {
        assert!(layer.weight.data().iter().chain(layer.bias.data()).all(|&x| x == 0.0));
    }
    for row in &r.static_weights {
        assert!(row.iter().all(|&w| w == 0.5));
    }
}

#[test]
fn til_routers_prefer_their_own_adapter() {
    let mut cfg = smoke();
    cfg.data.generator.train_per_task = 120;
    cfg.training.max_epochs = 10;
    cfg.router.epochs = 20;
    let state = run_stream(&cfg.stream().unwrap(), &cfg).unwrap();
    let routers = train_routers(&state, &cfg.router, &[Regime::Til], cfg.seed).unwrap();
    let scores = Evaluator::new(&state, &routers).unwrap().routing_scores(Regime::Til).unwrap();
    let last = scores.layers.last().unwrap();
    for task in 0..state.num_tasks() {
        let column: Vec<f64> = last.iter().map(|row| row[task]).collect();
        let best = (0..column.len()).max_by(|&a, &b| column[a].total_cmp(&column[b])).unwrap();
        assert_eq!(best, task, "scores for task {task}: {column:?}");
    }
}

#[test]
fn single_task_softmax_matches_upper_bound() {
    let mut cfg = smoke();
    cfg.data.generator.num_tasks = 1;
    cfg.router.relaxation = Relaxation::Softmax;
    let state = run_stream(&cfg.stream().unwrap(), &cfg).unwrap();
    let routers = train_routers(&state, &cfg.router, &[Regime::Cil, Regime::Til], 0).unwrap();
    let ev = Evaluator::new(&state, &routers).unwrap();
    for regime in [Regime::Cil, Regime::Til] {
        let wavg = ev.evaluate(CompositionKind::Wavg, regime).unwrap();
        let ub = ev.evaluate(CompositionKind::UpperBound, regime).unwrap();
        assert_eq!(wavg.per_task, ub.per_task);
    }
}

#[test]
fn persisted_state_evaluates_identically() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = smoke();
    cfg.output_root = root.path().to_path_buf();
    let run_dir = commands::train(&cfg).unwrap();
    let (loaded_cfg, loaded, loaded_routers, _) = load_state(&run_dir).unwrap();
    assert_eq!(loaded_cfg.hash(), cfg.hash());

    let state = run_stream(&cfg.stream().unwrap(), &cfg).unwrap();
    let routers = train_routers(&state, &cfg.router, &[Regime::Cil, Regime::Til], cfg.seed).unwrap();
    assert_eq!(routers, loaded_routers);
    let a = Evaluator::new(&state, &routers).unwrap();
    let b = Evaluator::new(&loaded, &loaded_routers).unwrap();
    for kind in CompositionKind::ALL {
        for regime in [Regime::Cil, Regime::Til] {
            assert_eq!(a.evaluate(kind, regime).unwrap(), b.evaluate(kind, regime).unwrap(), "{kind:?} {regime:?}");
        }
    }
}

#[test]
fn train_writes_every_artifact() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = smoke();
    cfg.output_root = root.path().join("not/yet/there");
    let dir = commands::train(&cfg).unwrap();
    for name in [
        "config.toml",
        "csv_schema.txt",
        "adapter_task1.bin",
        "adapter_task2.bin",
        "router_cil.bin",
        "router_til_task1.bin",
        "router_til_task2.bin",
        "memory.jsonl",
        "report.json",
        "accuracy.csv",
        "flops.csv",
        "routing_cil_layer0.csv",
        "routing_til_layer1.csv",
    ] {
        assert!(dir.join(name).is_file(), "missing {name}");
    }
    let echoed = RunConfig::load(&dir.join("config.toml")).unwrap();
    assert_eq!(echoed.hash(), cfg.hash());
}

#[test]
fn sweep_has_one_row_per_seed_and_fraction() {
    let mut cfg = smoke();
    cfg.router.epochs = 1;
    let rows = sweep_memory(&cfg, &[0.05, 0.2, 0.5], &[0, 1], 1).unwrap();
    assert_eq!(rows.len(), 6);
    assert!(rows.windows(2).all(|w| w[0].memory_entries <= w[1].memory_entries || w[0].seed != w[1].seed));
}

#[test]
fn sweep_rejects_zero_fraction() {
    assert!(sweep_memory(&smoke(), &[0.0, 0.1], &[0], 1).is_err());
}

#[test]
fn workers_do_not_change_results() {
    let mut cfg = smoke();
    cfg.router.epochs = 1;
    let one = sweep_memory(&cfg, &[0.1], &[0, 1], 1).unwrap();
    let two = sweep_memory(&cfg, &[0.1], &[0, 1], 2).unwrap();
    assert_eq!(one, two);
}

#[test]
fn ingested_stream_trains_like_generated() {
    let cfg = smoke();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stream.jsonl");
    let generated = generate_stream(&cfg.data.generator).unwrap();
    export_jsonl(&generated, &path).unwrap();

    let mut ingested = cfg.clone();
    ingested.data.ingest = Some(IngestConfig {
        path: path.clone(),
        schema: Default::default(),
    });
    let a = cfg.stream().unwrap();
    let b = ingested.stream().unwrap();
    assert_eq!(a.num_tasks(), b.num_tasks());
    for (x, y) in a.tasks().iter().zip(b.tasks()) {
        for split in Split::ALL {
            let tx: Vec<&Vec<u32>> = x.split(split).iter().map(|e| &e.tokens).collect();
            let ty: Vec<&Vec<u32>> = y.split(split).iter().map(|e| &e.tokens).collect();
            assert_eq!(tx, ty);
        }
    }
    let sa = run_stream(&a, &cfg).unwrap();
    let sb = run_stream(&b, &ingested).unwrap();
    assert_eq!(sa.task_logs, sb.task_logs);
}
