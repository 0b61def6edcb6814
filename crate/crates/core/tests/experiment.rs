use std::collections::BTreeSet;
use std::fs;
use std::process::Command;

use cfdt::experiment::{
    self, generate_layouts, ExperimentConfig, Histogram, RunDir, RunReport, Scenario, Variant,
};
use cfdt::gridworld::LayoutId;

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        n_cf_envs: 10,
        n_target_envs: 8,
        n_factual: 4,
        rollouts_per_env: 2,
        ate_rollouts: 3,
        n_seeds: 2,
        seed: 31,
        ..ExperimentConfig::default()
    };
    cfg.dt.training_steps = 120;
    cfg.dt.batch_size = 4;
    cfg.dt.embed_dim = 8;
    cfg.dt.layers = 1;
    cfg
}

#[test]
fn counterfactual_and_target_sets_are_disjoint_at_full_scale() {
    let cfg = ExperimentConfig {
        n_cf_envs: 2000,
        n_target_envs: 1000,
        ..ExperimentConfig::default()
    };
    let layouts = generate_layouts(&cfg).unwrap();
    let cf: BTreeSet<LayoutId> = layouts.counterfactual.iter().map(|l| l.id()).collect();
    let target: BTreeSet<LayoutId> = layouts.target.iter().map(|l| l.id()).collect();
    assert_eq!(layouts.target.len(), 1000);
    assert!(cf.is_disjoint(&target));
    assert!(!target.contains(&layouts.source.id()));
    assert_eq!(layouts.leaked_targets(), 0);
}

#[test]
fn scenarios_set_target_obstacle_counts() {
    let easy = generate_layouts(&ExperimentConfig::default()).unwrap();
    assert!(easy.target.iter().all(|l| l.obstacles.len() == 6));
    let hard_cfg = ExperimentConfig::default().with_scenario(Scenario::Hard);
    let hard = generate_layouts(&hard_cfg).unwrap();
    assert!(hard.target.iter().all(|l| l.obstacles.len() == 7));
    assert!(hard.counterfactual.iter().all(|l| l.obstacles.len() == 6));
    assert_eq!(easy.source, hard.source);
}

#[test]
fn same_seed_same_manifest() {
    let cfg = tiny();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    experiment::gen(&cfg, &RunDir::new(a.path())).unwrap();
    experiment::gen(&cfg, &RunDir::new(b.path())).unwrap();
    for f in ["manifest.json", "layouts/source.json", "layouts/counterfactual.json", "layouts/target.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn staged_pipeline_produces_consistent_outputs() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::new(dir.path());
    let manifest = experiment::gen(&cfg, &run).unwrap();
    assert_eq!(manifest.target_overlap, 0);
    assert!(matches!(experiment::train(&run, Variant::DtF), Err(cfdt::CfdtError::Incomplete(_))));

    let data = experiment::collect(&run).unwrap();
    assert!(data.factual.iter().all(|t| t.layout_id == manifest.source_layout));
    assert_eq!(data.ate.len(), cfg.n_cf_envs);
    assert_eq!(data.counterfactual.len(), cfg.n_cf_envs * cfg.rollouts_per_env);
    assert!(data.ate.iter().all(|a| a.ate == a.cf_mean_return - a.source_mean_return));

    assert!(matches!(experiment::eval(&run, Variant::DtF), Err(cfdt::CfdtError::Incomplete(_))));
    for v in Variant::TRAINED {
        experiment::train(&run, v).unwrap();
    }
    let trace = fs::read_to_string(run.loss_trace(Variant::DtFcfAte, 1)).unwrap();
    let steps: Vec<&str> = trace.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["0", "100"]);

    assert!(matches!(experiment::report(&run), Err(cfdt::CfdtError::Incomplete(_))));
    for v in Variant::ALL {
        let s = experiment::eval(&run, v).unwrap();
        assert!((0.0..=1.0).contains(&s.goal_rate));
        for seed in &s.per_seed {
            assert_eq!(seed.histogram.total(), cfg.n_target_envs);
        }
        let csv = fs::read_to_string(run.eval(v, "csv")).unwrap();
        assert_eq!(csv.lines().next().unwrap(), "layout_id,total_return,length,reached_goal,agent_variant,seed");
        assert_eq!(csv.lines().count(), 1 + cfg.n_seeds * cfg.n_target_envs);
    }
    let report = experiment::report(&run).unwrap();
    assert_eq!(report.agents.len(), 6);
    assert_eq!(report.orderings.len(), 3);
    assert_eq!(report.config, cfg);
    let f = report.agent(Variant::DtF).unwrap();
    assert_eq!((f.composition.as_str(), f.beta, f.n_trajectories), ("factual", 0.0, cfg.n_factual));
    let w = report.agent(Variant::DtFcfAte).unwrap();
    assert_eq!(w.beta, cfg.beta);
    assert_eq!(w.n_trajectories, cfg.n_factual + cfg.n_cf_envs * cfg.rollouts_per_env);
    let parsed: RunReport = serde_json::from_str(&fs::read_to_string(run.report("json")).unwrap()).unwrap();
    assert_eq!(parsed, report);
    assert_eq!(fs::read_to_string(run.report("csv")).unwrap().lines().count(), 7);
}

#[test]
fn histogram_counts_every_episode() {
    let returns = [-1.0, 0.91, 0.1, 1.0, 0.55, -1.0, 0.95];
    let h = Histogram::new(&returns, -1.0);
    assert_eq!(h.total(), returns.len());
    assert_eq!(h.failure_count, 2);
    assert_eq!(h.other_count, 0);
}

#[test]
fn cli_runs_end_to_end_deterministically() {
    let exe = env!("CARGO_BIN_EXE_cfdt");
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("cfg.toml");
    fs::write(
        &config,
        "n_cf_envs = 6\nn_target_envs = 5\nn_factual = 2\nn_seeds = 1\nrollouts_per_env = 1\nate_rollouts = 2\n\
         [dt]\ntraining_steps = 20\nbatch_size = 4\nembed_dim = 8\nlayers = 1\n",
    )
    .unwrap();
    let outs: Vec<_> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            let status = Command::new(exe)
                .args(["--deterministic", "run", "--seed", "5", "--scenario", "hard", "--config"])
                .arg(&config)
                .arg("--out")
                .arg(&out)
                .output()
                .unwrap();
            assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
            out
        })
        .collect();
    let a = fs::read(outs[0].join("report.json")).unwrap();
    assert_eq!(a, fs::read(outs[1].join("report.json")).unwrap());
    let report: RunReport = serde_json::from_slice(&a).unwrap();
    assert_eq!(report.scenario, Scenario::Hard);
    assert_eq!(report.master_seed, 5);
    assert_eq!(report.config.n_obstacles_target, 7);

    let bad = Command::new(exe)
        .args(["gen", "--scenario", "medium", "--out"])
        .arg(dir.path().join("c"))
        .output()
        .unwrap();
    assert!(!bad.status.success());
    let missing = Command::new(exe)
        .args(["eval", "--variant", "dt-f", "--out"])
        .arg(dir.path().join("nowhere"))
        .output()
        .unwrap();
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("missing"));
}
