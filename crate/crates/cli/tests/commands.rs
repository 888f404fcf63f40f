//! Library-level behaviour of the run, sweep and compare commands.

use std::fs;
use std::path::{Path, PathBuf};

use ocgrid::model::{generate_default_scenario, ControllerArch, ObserverArch, ScenarioConfig};
use ocgrid_cli::*;

fn small(seed: u64) -> ScenarioConfig {
    generate_default_scenario(seed, 6).unwrap()
}

fn write_scenario(dir: &Path, cfg: &ScenarioConfig) -> PathBuf {
    let p = dir.join("scenario.toml");
    cfg.save(&p).unwrap();
    p
}

fn entries(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

#[test]
fn run_writes_exactly_five_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let path = write_scenario(tmp.path(), &small(1));
    let out = tmp.path().join("run");
    let m = cmd_run(&path, &out, &Overrides::default()).unwrap();
    assert_eq!(entries(&out), [EVALUATION_FILE, MANIFEST_FILE, PLOTS_DIR, RECORDS_FILE, TRACE_FILE]);
    assert_eq!(entries(&out.join(PLOTS_DIR)), ["convergence.svg", "messages.svg", "quality.svg"]);
    assert_eq!(m.status, RunStatus::Complete);
    assert_eq!(m.run_id, m.config_hash[..12]);
    assert_eq!(RunManifest::load(&out).unwrap(), m);
    let eval = RunEvaluation::load(&out).unwrap();
    assert_eq!(eval.compromised.len(), 1);
}

#[test]
fn repeated_runs_share_hash_and_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let path = write_scenario(tmp.path(), &small(2));
    let a = cmd_run(&path, &tmp.path().join("a"), &Overrides::default()).unwrap();
    let b = cmd_run(&path, &tmp.path().join("b"), &Overrides::default()).unwrap();
    assert_eq!(a.config_hash, b.config_hash);
    for f in [TRACE_FILE, RECORDS_FILE, EVALUATION_FILE] {
        assert!(fs::read(a.output_dir.join(f)).unwrap() == fs::read(b.output_dir.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn overrides_change_the_config_hash_but_not_the_base_hash() {
    let cfg = small(3);
    let mut other = cfg.clone();
    Overrides {
        controller: Some(ControllerArch::Decentralized),
        level: Some(3),
        ..Overrides::default()
    }
    .apply(&mut other);
    assert_eq!(other.controller_arch, ControllerArch::Decentralized);
    assert_eq!(other.info_level, 3);
    assert_ne!(config_hash(&cfg).unwrap(), config_hash(&other).unwrap());
    assert_eq!(base_hash(&cfg).unwrap(), base_hash(&other).unwrap());
    other.seed += 1;
    assert_ne!(base_hash(&cfg).unwrap(), base_hash(&other).unwrap());
}

#[test]
fn invalid_scenario_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(0);
    cfg.control_interval = cfg.incident_interval;
    cfg.agents[0].unit.feasible_schedules.clear();
    let path = write_scenario(tmp.path(), &cfg);
    let err = cmd_run(&path, &tmp.path().join("r"), &Overrides::default()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let CliError::Validation(v) = err else { panic!("expected validation error") };
    assert!(v.len() >= 2, "every violation is listed: {v:?}");
    assert!(!tmp.path().join("r").exists());
}

#[test]
fn tick_cap_failure_leaves_failed_manifest_and_partial_trace() {
    let tmp = tempfile::tempdir().unwrap();
    let path = write_scenario(tmp.path(), &small(4));
    let out = tmp.path().join("r");
    let err = cmd_run(
        &path,
        &out,
        &Overrides {
            tick_cap: Some(3),
            ..Overrides::default()
        },
    )
    .unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(matches!(RunManifest::load(&out).unwrap().status, RunStatus::Failed(_)));
    assert!(!fs::read(out.join(TRACE_FILE)).unwrap().is_empty());
    assert!(!out.join(RECORDS_FILE).exists());
}

#[test]
fn empty_matrix_runs_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let r = sweep_config(&small(0), "s", &Matrix::default(), tmp.path()).unwrap();
    assert!(r.cells.is_empty());
    assert_eq!(r.summary.lines().count(), 1, "header only");
    assert!(Matrix::default().cells(&small(0)).is_empty());
}

#[test]
fn level_sweep_keeps_other_dimensions() {
    let tmp = tempfile::tempdir().unwrap();
    let mut base = small(5);
    base.observer_arch = ObserverArch::Decentralized;
    let matrix = Matrix {
        levels: vec![1, 2, 3, 4],
        ..Matrix::default()
    };
    let r = sweep_config(&base, "s", &matrix, tmp.path()).unwrap();
    assert_eq!(r.cells.len(), 4);
    for (cell, level) in r.cells.iter().zip(1u8..) {
        assert_eq!(cell.manifest.info_level, level);
        assert_eq!(cell.manifest.observer_arch, ObserverArch::Decentralized);
        assert_eq!(cell.manifest.controller_arch, base.controller_arch);
        assert_eq!(cell.manifest.seed, base.seed);
        assert_eq!(cell.manifest.status, RunStatus::Complete);
    }
    assert_eq!(r.summary.lines().count(), 5);
    assert_eq!(fs::read_to_string(tmp.path().join(SUMMARY_FILE)).unwrap(), r.summary);
    // Value-aware detectors need level 3 or more.
    let detected: Vec<bool> = r.cells.iter().map(|c| c.evaluation.as_ref().unwrap().detected()).collect();
    assert!(detected[3]);
}

#[test]
fn matrix_is_a_cartesian_product() {
    let m = Matrix {
        observers: vec![ObserverArch::Centralized, ObserverArch::MultiLeveled],
        levels: vec![],
        controllers: vec![ControllerArch::None, ControllerArch::Centralized, ControllerArch::Decentralized],
    };
    let cells = m.cells(&small(0));
    assert_eq!(cells.len(), 6);
    assert!(cells.iter().all(|c| c.1 == 4));
}

#[test]
fn compare_self_has_no_differences() {
    let tmp = tempfile::tempdir().unwrap();
    let path = write_scenario(tmp.path(), &small(6));
    let a = cmd_run(&path, &tmp.path().join("a"), &Overrides::default()).unwrap();
    let c = cmd_compare(&[a.output_dir.clone(), a.output_dir.clone()]).unwrap();
    assert!(c.differences.is_empty());
    assert!(c.report.ends_with("differences,0\n"));
}

#[test]
fn compare_across_controllers_reports_differences() {
    let tmp = tempfile::tempdir().unwrap();
    let path = write_scenario(tmp.path(), &small(7));
    let runs: Vec<PathBuf> = [ControllerArch::None, ControllerArch::Centralized]
        .into_iter()
        .map(|c| {
            let o = Overrides {
                controller: Some(c),
                ..Overrides::default()
            };
            cmd_run(&path, &tmp.path().join(c.to_string()), &o).unwrap().output_dir
        })
        .collect();
    let c = cmd_compare(&runs).unwrap();
    assert_eq!(c.runs.len(), 2);
    // Without control the disruption persists into the last phase.
    assert!(!c.differences.is_empty());
}

#[test]
fn compare_refuses_mismatched_or_incomplete_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let p = write_scenario(tmp.path(), &small(8));
    let a = cmd_run(&p, &tmp.path().join("a"), &Overrides::default()).unwrap().output_dir;
    let b = cmd_run(
        &p,
        &tmp.path().join("b"),
        &Overrides {
            seed: Some(99),
            ..Overrides::default()
        },
    )
    .unwrap()
    .output_dir;
    assert!(matches!(cmd_compare(&[a.clone(), b]), Err(CliError::Runtime(m)) if m.contains("different base")));

    let failed = tmp.path().join("f");
    let _ = cmd_run(
        &p,
        &failed,
        &Overrides {
            tick_cap: Some(3),
            ..Overrides::default()
        },
    );
    assert!(matches!(cmd_compare(&[a.clone(), failed]), Err(CliError::Runtime(m)) if m.contains("not complete")));
    assert!(cmd_compare(&[a]).is_err());
}
