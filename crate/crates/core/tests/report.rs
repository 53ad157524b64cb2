use exforge::attack::{run_attack, AttackConfig, MetricsRecord, METRICS_HEADER};
use exforge::data::{generate, SyntheticSpec};
use exforge::nn::{Activation, Network};
use exforge::oracle::LocalOracle;
use exforge::report::{collect_runs, parse_metrics_csv, queries_to_reach, table1_csv, table3_csv};
use exforge::SeededRng;

fn record(q: u64, acc: f64) -> MetricsRecord {
    MetricsRecord { queries_used: q, accuracy: acc, fidelity: acc, loss_mean: None, grad_norm_l1: None, grad_norm_kl: None, wall_ms: 1 }
}

#[test]
fn first_crossing_is_reported() {
    let m = [record(0, 0.3), record(100, 0.7), record(200, 0.9), record(300, 0.8)];
    assert_eq!(queries_to_reach(&m, 0.7), Some(100));
    assert_eq!(queries_to_reach(&m, 0.85), Some(200));
    assert_eq!(queries_to_reach(&m, 0.95), None);
}

#[test]
fn metrics_header_is_enforced() {
    assert!(parse_metrics_csv("a,b\n1,2\n").is_err());
    let ok = format!("{METRICS_HEADER}\n10,0.5,0.25,,1e-3,,7\n");
    let recs = parse_metrics_csv(&ok).unwrap();
    assert_eq!(recs[0].queries_used, 10);
    assert_eq!(recs[0].loss_mean, None);
    assert_eq!(recs[0].grad_norm_l1, Some(1e-3));
    assert!(parse_metrics_csv(&format!("{METRICS_HEADER}\n10,x,0.25,,,,7\n")).is_err());
}

#[test]
fn tables_from_run_directories() {
    let root = tempfile::tempdir().unwrap();
    let victim = Network::mlp(&[2, 8, 3], Activation::Relu, Activation::Identity, &mut SeededRng::new(0)).unwrap();
    let test = generate(&SyntheticSpec::spirals(200, 1)).unwrap();
    for (name, m) in [("m1/s0", 1), ("m1/s1", 1), ("m4/s0", 4)] {
        let cfg = AttackConfig {
            budget: 3000,
            batch: 10,
            student_hidden: vec![8],
            generator_hidden: vec![8],
            eval_every: 500,
            fwd: exforge::zo::FwdDiffConfig { m, ..Default::default() },
            seed: name.len() as u64 + m as u64,
            ..AttackConfig::default()
        };
        let oracle = LocalOracle::new(victim.clone(), cfg.budget, true);
        run_attack(&oracle, &test, &cfg).unwrap().write(&root.path().join(name)).unwrap();
    }
    std::fs::create_dir_all(root.path().join("unrelated")).unwrap();

    let runs = collect_runs(root.path()).unwrap();
    assert_eq!(runs.len(), 3);
    let t1 = table1_csv(&runs, root.path());
    let lines: Vec<&str> = t1.lines().collect();
    assert_eq!(lines[0], "run,loss,logits,m,budget,queries_used,accuracy,victim_accuracy,normalized_accuracy,fidelity");
    assert!(lines[1].starts_with("m1/s0,l1,recovered,1,3000,"));
    assert!(lines[3].starts_with("m4/s0,l1,recovered,4,3000,"));

    let t3 = table3_csv(&runs, 0.0);
    let lines: Vec<&str> = t3.lines().collect();
    assert_eq!(lines[0], "m,target_accuracy,runs,runs_reaching,queries,queries_millions");
    assert_eq!(lines[1], "1,0,2,2,0,0.000000");
    assert_eq!(lines[2], "4,0,1,1,0,0.000000");
    let unreachable = table3_csv(&runs, 2.0);
    assert!(unreachable.lines().nth(1).unwrap().ends_with(",2,0,,"));
}
