mod common;

use std::sync::OnceLock;

use learngene::harness::{
    load_run, run_evolution, run_gradient_trends, run_open_world_eval, run_position_ablation,
    run_sample_sweep, run_scratch_compare, save_run, snapshot_tasks, train_collective,
    CollectiveRun, DataEnv, ExperimentConfig, MetricsTable,
};
use learngene::learngene::{decode_learngene, encode_learngene};
use learngene::Error;

struct Fixture {
    cfg: ExperimentConfig,
    env: DataEnv,
    run: CollectiveRun,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cfg = common::tiny_config();
        cfg.validate().unwrap();
        let env = DataEnv::open(&cfg.data).unwrap();
        let snaps = snapshot_tasks(cfg.data.stream.num_tasks, cfg.snapshots);
        let run = train_collective(&env, &cfg.collective, &cfg.criterion, cfg.k, &snaps).unwrap();
        Fixture { cfg, env, run }
    })
}

fn xs(t: &MetricsTable, kind: &str, cond: &str, metric: &str) -> Vec<f64> {
    let mut v: Vec<f64> = t.select(kind, cond, metric).map(|r| r.x).collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

#[test]
fn collective_run_covers_the_stream() {
    let f = fixture();
    let col = &f.run.collective;
    assert_eq!(col.records.len(), f.cfg.data.stream.num_tasks);
    assert_eq!(f.run.snapshots.len(), 2);
    assert_eq!(
        f.run.snapshots.iter().map(|s| s.task).collect::<Vec<_>>(),
        vec![4, 8]
    );
    assert!(col.registry.len() <= f.cfg.data.base_count);
    assert_eq!(col.graph.num_classes(), col.registry.len());
    col.graph.replay_check().unwrap();
    // widen at tasks 3 and 6, deepen at task 5
    assert!(col.graph.depth() > 6);
    for layer in col.ledger.layers() {
        assert!(col.ledger.tasks_for(layer).len() <= 8);
    }
    let sel = f.run.learngene(&f.cfg.criterion, f.cfg.k).unwrap();
    assert_eq!(sel.k, 2);
    let depth = col.graph.depth();
    assert_eq!(sel.positions, vec![depth - 1, depth]);
    let back = decode_learngene(&encode_learngene(&sel).unwrap()).unwrap();
    assert_eq!(
        encode_learngene(&back).unwrap(),
        encode_learngene(&sel).unwrap()
    );
}

#[test]
fn checkpoint_round_trip_checks_the_hash() {
    let f = fixture();
    let dir = std::env::temp_dir().join(format!("lg-pipeline-{}", std::process::id()));
    let hash = f.cfg.collective_hash();
    let path = save_run(&f.run, &dir, "collective", &hash).unwrap();
    let back = load_run(&path, Some(&hash)).unwrap();
    assert_eq!(back.collective.graph, f.run.collective.graph);
    assert_eq!(
        back.collective.records.len(),
        f.run.collective.records.len()
    );
    assert!(matches!(
        load_run(&path, Some("000000000000")),
        Err(Error::Config(_))
    ));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn experiment_only_settings_do_not_change_the_collective_hash() {
    let cfg = common::tiny_config();
    let other = ExperimentConfig {
        seeds: vec![9],
        episodes_per_seed: 7,
        ..cfg.clone()
    };
    assert_eq!(cfg.collective_hash(), other.collective_hash());
    assert_ne!(cfg.hash(), other.hash());
    let k = ExperimentConfig {
        k: 3,
        ..cfg.clone()
    };
    assert_ne!(cfg.collective_hash(), k.collective_hash());
}

#[test]
fn scratch_compare_reports_every_epoch_for_both_conditions() {
    let f = fixture();
    let t = run_scratch_compare(&f.run, &f.env, &f.cfg).unwrap();
    let epochs: Vec<f64> = (1..=f.cfg.adapt.epochs).map(|e| e as f64).collect();
    for cond in ["individual", "scratch"] {
        assert_eq!(xs(&t, "scratch_compare", cond, "query_accuracy"), epochs);
        for r in t.select("scratch_compare", cond, "query_accuracy") {
            assert!((0.0..=1.0).contains(&r.value));
        }
    }
    assert!(t.provenance.contains_key("learngene"));
    let back = MetricsTable::from_csv(&t.to_csv()).unwrap();
    assert_eq!(back.rows_csv(), t.rows_csv());
}

#[test]
fn sample_sweep_covers_every_cap() {
    let f = fixture();
    let t = run_sample_sweep(&f.run, &f.env, &f.cfg).unwrap();
    for cond in ["individual", "scratch"] {
        assert_eq!(
            xs(&t, "sample_sweep", cond, "final_accuracy"),
            vec![3.0, 6.0]
        );
    }
}

#[test]
fn evolution_scores_each_snapshot() {
    let f = fixture();
    let t = run_evolution(&f.run, &f.env, &f.cfg).unwrap();
    assert_eq!(
        xs(&t, "evolution", "individual", "final_accuracy"),
        vec![4.0, 8.0]
    );
    assert_eq!(t.select("evolution_summary", "all", "spearman").count(), 1);
}

#[test]
fn evolution_needs_two_snapshots() {
    let f = fixture();
    let single = CollectiveRun {
        collective: f.run.collective.clone(),
        snapshots: f.run.snapshots[..1].to_vec(),
    };
    assert!(matches!(
        run_evolution(&single, &f.env, &f.cfg),
        Err(Error::Config(_))
    ));
}

#[test]
fn position_ablation_compares_placements() {
    let f = fixture();
    assert!(f.run.collective.graph.depth() < 9);
    assert!(matches!(
        run_position_ablation(&f.run, &f.env, &f.cfg),
        Err(Error::Config(_))
    ));
    let pc = f.cfg.position.collective.clone().unwrap();
    let run = train_collective(&f.env, &pc, &f.cfg.criterion, f.cfg.k, &[]).unwrap();
    let t = run_position_ablation(&run, &f.env, &f.cfg).unwrap();
    for cond in ["front", "middle", "top"] {
        assert_eq!(
            t.select("position_ablation", cond, "final_accuracy")
                .count(),
            f.cfg.seeds.len(),
            "{cond}"
        );
    }
    let top = t
        .select("position_ablation", "top", "final_accuracy")
        .next()
        .unwrap()
        .x;
    let front = t
        .select("position_ablation", "front", "final_accuracy")
        .next()
        .unwrap()
        .x;
    assert!(top > front);
}

#[test]
fn gradient_trends_list_every_layer() {
    let f = fixture();
    let t = run_gradient_trends(&f.run, &f.cfg).unwrap();
    let depth = f.run.collective.graph.depth();
    assert_eq!(
        t.select("gradient_summary", "layer1", "early_mean").count(),
        1
    );
    let layers: std::collections::BTreeSet<&str> = t
        .rows
        .iter()
        .filter(|r| r.kind == "gradient_trends")
        .map(|r| r.condition.as_str())
        .collect();
    assert_eq!(layers.len(), depth);
    for r in t.select("gradient_trends", "layer1", "rho") {
        assert!((0.0..=1.0).contains(&r.value));
    }
}

#[test]
fn open_world_boundaries_hold_on_trained_collective() {
    let f = fixture();
    let t = run_open_world_eval(&f.run, &f.env, &f.cfg).unwrap();
    for cond in ["base", "open"] {
        assert_eq!(t.mean_at("open_world", cond, "flag_rate", 1.0), Some(0.0));
        assert_eq!(t.mean_at("open_world", cond, "flag_rate", 0.0), Some(1.0));
        let rates: Vec<f64> = f
            .cfg
            .open
            .lambdas
            .iter()
            .map(|&l| t.mean_at("open_world", cond, "flag_rate", l).unwrap())
            .collect();
        assert!(rates.windows(2).all(|w| w[1] <= w[0]), "{cond}: {rates:?}");
    }
}

#[test]
fn experiments_are_reproducible() {
    let f = fixture();
    let a = run_scratch_compare(&f.run, &f.env, &f.cfg).unwrap();
    let b = run_scratch_compare(&f.run, &f.env, &f.cfg).unwrap();
    assert_eq!(a.rows_csv(), b.rows_csv());
    let snaps = snapshot_tasks(f.cfg.data.stream.num_tasks, f.cfg.snapshots);
    let again =
        train_collective(&f.env, &f.cfg.collective, &f.cfg.criterion, f.cfg.k, &snaps).unwrap();
    assert_eq!(
        run_gradient_trends(&again, &f.cfg).unwrap().rows_csv(),
        run_gradient_trends(&f.run, &f.cfg).unwrap().rows_csv()
    );
}
