mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

use common::synthetic_config;
use exitprune::runner::{
    compare_runs, emit_reports, load_checkpoint, run, Phase, RunOptions, RunState, CHECKPOINT_FILE,
    COMPARISON_CSV, CSV_FILES, CURVE_CSV, EXITS_CSV,
};
use exitprune::tensorcore::ParamRef;
use exitprune::Error;

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap()
}

fn assert_same_csvs(a: &Path, b: &Path) {
    for name in CSV_FILES {
        assert_eq!(read(a, name), read(b, name), "{name} differs");
    }
}

#[test]
fn same_config_and_seed_give_identical_csvs() {
    let tmp = tempfile::tempdir().unwrap();
    for approach in [1, 2] {
        let a = tmp.path().join(format!("a{approach}"));
        let b = tmp.path().join(format!("b{approach}"));
        run(synthetic_config(&a, approach), &RunOptions::default()).unwrap();
        run(synthetic_config(&b, approach), &RunOptions::default()).unwrap();
        assert_same_csvs(&a, &b);
    }
}

#[test]
fn interrupted_run_resumes_to_identical_reports() {
    let tmp = tempfile::tempdir().unwrap();
    for approach in [1, 2] {
        let full = tmp.path().join(format!("full{approach}"));
        run(synthetic_config(&full, approach), &RunOptions::default()).unwrap();
        for stop in [1, 3] {
            let part = tmp.path().join(format!("part{approach}_{stop}"));
            let first = run(
                synthetic_config(&part, approach),
                &RunOptions {
                    stop_after_steps: Some(stop),
                    ..Default::default()
                },
            )
            .unwrap();
            assert!(!first.completed);
            assert!(!part.join(CURVE_CSV).exists());
            let resumed = run(
                synthetic_config(&part, approach),
                &RunOptions {
                    resume: true,
                    ..Default::default()
                },
            )
            .unwrap();
            assert!(resumed.completed);
            assert_same_csvs(&full, &part);
        }
    }
}

#[test]
fn resume_refuses_a_different_experiment() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("r");
    let cfg = synthetic_config(&dir, 1);
    run(
        cfg.clone(),
        &RunOptions {
            stop_after_steps: Some(1),
            ..Default::default()
        },
    )
    .unwrap();
    let mut other = cfg;
    other.prune_fraction = 0.2;
    let err = run(
        other,
        &RunOptions {
            resume: true,
            ..Default::default()
        },
    )
    .unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn approach1_history_and_schedule() {
    let tmp = tempfile::tempdir().unwrap();
    let art = run(synthetic_config(tmp.path(), 1), &RunOptions::default()).unwrap();
    let h = &art.state.history;
    assert_eq!(h.rounds.len(), 3);
    assert_eq!(h.evaluations.len(), 4);
    assert_eq!(h.evaluations[0].phase, Phase::Baseline);
    assert!(h.evaluations.iter().all(|e| !e.points.is_empty()));
    // Whole-network scope: survivors follow the floor recurrence.
    let total = art.state.masks.total();
    let mut survivors = total;
    for r in &h.rounds {
        assert_eq!(r.phase, Phase::Joint);
        assert_eq!(r.newly_masked as usize, survivors / 10);
        survivors -= survivors / 10;
    }
    assert_eq!(art.state.masks.nnz(), survivors);
    // Every weight tensor is in scope.
    let prunable = art.state.masks.prunable();
    for (r, _) in art.state.net.params().iter() {
        assert_eq!(prunable.contains(r), r.role == exitprune::tensorcore::ParamRole::Weight, "{r}");
    }
}

#[test]
fn zero_rounds_is_a_baseline_only_run() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = synthetic_config(tmp.path(), 1);
    cfg.rounds = 0;
    let art = run(cfg, &RunOptions::default()).unwrap();
    assert!(art.state.history.rounds.is_empty());
    assert_eq!(art.state.history.evaluations.len(), 1);
    let rounds = read(tmp.path(), "rounds.csv");
    assert_eq!(rounds.lines().count(), 1);
    assert!(read(tmp.path(), CURVE_CSV).lines().skip(1).all(|l| l.starts_with("0,")));
}

#[test]
fn approach2_phases_keep_their_scopes() {
    let tmp = tempfile::tempdir().unwrap();
    for freeze in [false, true] {
        let dir = tmp.path().join(format!("f{freeze}"));
        let mut cfg = synthetic_config(&dir, 2);
        cfg.freeze_backbone_phase_b = freeze;
        let rounds_a = cfg.rounds as u32;
        // Pretrain + phase A rounds + head attachment.
        let mid = run(
            cfg.clone(),
            &RunOptions {
                stop_after_steps: Some(rounds_a + 2),
                ..Default::default()
            },
        )
        .unwrap();
        let mid_state = mid.state;
        assert!(mid_state.net.internal_heads_attached());
        let baseline = mid_state.history.evaluations.last().unwrap();
        assert_eq!(baseline.phase, Phase::Baseline);
        assert_eq!(baseline.round, rounds_a);
        // Internal heads never saw phase A.
        for h in &mid_state.history.rounds {
            assert_eq!(h.phase, Phase::Base);
            assert!(h.pre_accuracy[0].is_none());
        }
        for r in mid_state.net.head_weight_refs() {
            if r != mid_state.net.final_head_weight_ref() {
                assert_eq!(mid_state.masks.nnz_of(&r), mid_state.masks.get(&r).map(|m| m.len()));
            }
        }

        let end = run(
            cfg,
            &RunOptions {
                resume: true,
                ..Default::default()
            },
        )
        .unwrap()
        .state;
        for r in mid_state.net.backbone_weight_refs() {
            assert_eq!(mid_state.masks.get(&r), end.masks.get(&r), "{r} mask changed in phase B");
            if freeze {
                let a = mid_state.net.params().get(&r).unwrap().data();
                let b = end.net.params().get(&r).unwrap().data();
                assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()), "{r} moved");
            }
        }
        if freeze {
            let bias = ParamRef::bias("conv1");
            assert_eq!(
                mid_state.net.params().get(&bias).unwrap().data(),
                end.net.params().get(&bias).unwrap().data()
            );
        }
        // Phase B survivors in the head scope follow the floor recurrence,
        // and the final classifier keeps losing weights.
        let heads = end.net.head_weight_refs();
        let nnz = |s: &RunState, refs: &[ParamRef]| -> usize { refs.iter().map(|r| s.masks.nnz_of(r).unwrap()).sum() };
        let mut survivors = nnz(&mid_state, &heads);
        for r in end.history.rounds.iter().filter(|r| r.phase == Phase::Heads) {
            assert_eq!(r.newly_masked as usize, survivors / 10);
            survivors -= survivors / 10;
        }
        assert_eq!(nnz(&end, &heads), survivors);
        let fin = end.net.final_head_weight_ref();
        assert!(end.masks.nnz_of(&fin) <= mid_state.masks.nnz_of(&fin));
    }
}

#[test]
fn curve_rows_match_exit_costs() {
    let tmp = tempfile::tempdir().unwrap();
    run(synthetic_config(tmp.path(), 1), &RunOptions::default()).unwrap();
    let exits = read(tmp.path(), EXITS_CSV);
    let cost = |round: &str, exit: usize| -> f64 {
        exits
            .lines()
            .skip(1)
            .map(|l| l.split(',').collect::<Vec<_>>())
            .find(|c| c[0] == round && c[2] == exit.to_string())
            .map(|c| c[4].parse().unwrap())
            .unwrap()
    };
    let curve = read(tmp.path(), CURVE_CSV);
    let mut rows = 0;
    for line in curve.lines().skip(1) {
        let c: Vec<&str> = line.split(',').collect();
        let fractions: Vec<f64> = c[4..].iter().map(|v| v.parse().unwrap()).collect();
        assert!((fractions.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        let expected: f64 = fractions.iter().enumerate().map(|(j, f)| f * cost(c[0], j)).sum();
        let got: f64 = c[3].parse().unwrap();
        assert!((got - expected).abs() <= 1e-6 * expected, "{line}");
        rows += 1;
    }
    assert_eq!(rows, 4 * 21);
}

#[test]
fn report_from_checkpoint_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    run(synthetic_config(tmp.path(), 2), &RunOptions::default()).unwrap();
    let state = RunState::from_checkpoint(load_checkpoint(&tmp.path().join(CHECKPOINT_FILE)).unwrap()).unwrap();
    let again = tmp.path().join("again");
    emit_reports(&state, &again).unwrap();
    assert_same_csvs(tmp.path(), &again);
}

#[test]
fn invalid_config_fails_before_any_work() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("never");
    let mut cfg = synthetic_config(&dir, 1);
    cfg.prune_fraction = 1.5;
    assert!(matches!(run(cfg, &RunOptions::default()), Err(Error::Config(_))));
    assert!(!dir.exists());
}

#[test]
fn locked_output_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join(".exitprune.lock"), "").unwrap();
    let err = run(synthetic_config(tmp.path(), 1), &RunOptions::default()).unwrap_err();
    assert!(matches!(err, Error::State(_)), "{err}");
}

#[test]
fn comparing_a_run_with_itself_gives_unit_ratios() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    run(synthetic_config(&a, 1), &RunOptions::default()).unwrap();
    let c = compare_runs(&a, &a, &tmp.path().join("cmp")).unwrap();
    assert!(!c.rows.is_empty());
    for r in &c.rows {
        assert_eq!(r.ratio, 1.0);
    }
    assert_eq!(c.accuracy_gap_at_budget, Some(0.0));
    let csv = read(&tmp.path().join("cmp"), COMPARISON_CSV);
    assert_eq!(csv.lines().next(), Some("accuracy_level,flops_a1,flops_a2,ratio"));
}

#[test]
fn comparing_different_networks_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run(synthetic_config(&a, 1), &RunOptions::default()).unwrap();
    let mut cfg = synthetic_config(&b, 1);
    cfg.network.exit_after = vec![1];
    cfg.loss_weights = vec![1.0, 1.0];
    run(cfg, &RunOptions::default()).unwrap();
    let err = compare_runs(&a, &b, &tmp.path().join("cmp")).unwrap_err();
    assert!(matches!(err, Error::Comparison(_)), "{err}");
}

#[test]
fn cli_reports_machine_readable_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "prune_fraction = 2\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_exitprune"))
        .args(["run", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.lines().any(|l| l.starts_with("error: kind=config message=\"")), "{stderr}");
}

#[test]
fn cli_run_compare_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("exp.cfg");
    let cfg = synthetic_config(&tmp.path().join("unused"), 1);
    fs::write(&cfg_path, cfg.to_text()).unwrap();
    let bin = env!("CARGO_BIN_EXE_exitprune");
    for (approach, dir) in [("1", "r1"), ("2", "r2")] {
        let out = Command::new(bin)
            .args(["run", cfg_path.to_str().unwrap(), "--quiet", "--approach", approach, "--seed", "5", "--out"])
            .arg(tmp.path().join(dir))
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let echo = read(&tmp.path().join(dir), "config.echo");
        assert!(echo.contains(&format!("approach = {approach}\n")));
        assert!(echo.contains("seed = 5\n"));
    }
    let out = Command::new(bin)
        .args(["compare"])
        .arg(tmp.path().join("r1"))
        .arg(tmp.path().join("r2"))
        .arg("--out")
        .arg(tmp.path().join("cmp"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("cmp").join(COMPARISON_CSV).exists());
    let out = Command::new(bin)
        .arg("report")
        .arg(tmp.path().join("r2").join(CHECKPOINT_FILE))
        .arg("--out")
        .arg(tmp.path().join("rep"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_same_csvs(&tmp.path().join("r2"), &tmp.path().join("rep"));
}
