use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn gpgm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gpgm")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = gpgm(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fresh_dir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(format!("cli-{name}"));
    let _ = fs::remove_dir_all(&dir);
    dir
}

fn key_values(text: &str) -> BTreeMap<String, String> {
    text.lines().filter_map(|l| l.split_once(" = ")).map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

fn floats(s: &str) -> Vec<f64> {
    s.split(',').map(|v| v.parse().unwrap()).collect()
}

fn csv_rows(text: &str) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    (header, lines.map(floats).collect())
}

#[test]
fn infer_writes_artifacts_that_reproduce_the_report() {
    let dir = fresh_dir("infer-lv");
    let d = dir.to_str().unwrap();
    ok(&["infer", "--preset", "lv-x1obs", "--seed", "7", "--out", d]);
    for f in ["config.ini", "data.csv", "chain.csv", "trace.csv", "report.txt"] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
    let report = key_values(&fs::read_to_string(dir.join("report.txt")).unwrap());
    assert_eq!(report["seed"], "7");
    let truth = floats(&report["theta_true"]);

    // relative errors recompute exactly from the persisted estimates
    for (est, err) in [("theta_fgpgm", "rel_err_fgpgm"), ("theta_refined", "rel_err_refined")] {
        let want: Vec<f64> = floats(&report[est]).iter().zip(&truth).map(|(e, t)| (e - t).abs() / t.abs()).collect();
        assert_eq!(floats(&report[err]), want, "{err}");
    }

    // the sampler estimate is the mean of the retained chain rows
    let (header, chain) = csv_rows(&fs::read_to_string(dir.join("chain.csv")).unwrap());
    assert_eq!(header, ["sweep", "theta1", "theta2", "theta3", "theta4", "logdensity"]);
    assert_eq!(chain.len(), 4000);
    let kept: Vec<&Vec<f64>> = chain.iter().filter(|r| r[0] >= 500.0).collect();
    assert_eq!(kept.len(), 3500);
    let fgpgm = floats(&report["theta_fgpgm"]);
    for (j, want) in fgpgm.iter().enumerate() {
        let mean = kept.iter().map(|r| r[j + 1]).sum::<f64>() / kept.len() as f64;
        assert!((mean - want).abs() <= 1e-12 * want.abs(), "theta{}: {mean} vs {want}", j + 1);
    }

    // the refinement trace starts at the sampler estimate and ends at the refined point
    let (header, trace) = csv_rows(&fs::read_to_string(dir.join("trace.csv")).unwrap());
    assert_eq!(&header[..3], ["iter", "objective", "grad_norm"]);
    assert_eq!(trace[0][3..], fgpgm[..]);
    let last = trace.last().unwrap();
    assert_eq!(last[3..], floats(&report["theta_refined"])[..]);
    assert_eq!(last[1], report["objective_refined"].parse::<f64>().unwrap());
    assert_eq!(trace[0][1], report["objective_fgpgm"].parse::<f64>().unwrap());
    assert!(trace.windows(2).all(|w| w[1][1] <= w[0][1]));
}

#[test]
fn reruns_are_byte_identical() {
    let (a, b) = (fresh_dir("rerun-a"), fresh_dir("rerun-b"));
    for dir in [&a, &b] {
        ok(&["infer", "--preset", "lv-x2obs", "--seed", "3", "--out", dir.to_str().unwrap()]);
    }
    for f in ["config.ini", "data.csv", "chain.csv", "trace.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn fhn_run_uses_the_requested_budget() {
    let dir = fresh_dir("infer-fhn");
    ok(&["infer", "--preset", "fhn-x1obs", "--mcmc-samples", "3500", "--out", dir.to_str().unwrap()]);
    let (_, chain) = csv_rows(&fs::read_to_string(dir.join("chain.csv")).unwrap());
    assert_eq!(chain.iter().filter(|r| r[0] >= 500.0).count(), 3500);
    let report = key_values(&fs::read_to_string(dir.join("report.txt")).unwrap());
    assert_eq!(floats(&report["theta_refined"]).len(), 3);
}

#[test]
fn sensitivity_table_has_one_row_per_parameter() {
    let dir = fresh_dir("sens-pt");
    ok(&["sensitivity", "--preset", "pt", "--out", dir.to_str().unwrap()]);
    let text = fs::read_to_string(dir.join("sensitivity.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "parameter,x1,x2,x3,x4,x5");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 6);
    for (j, row) in rows.iter().enumerate() {
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells[0], format!("theta{}", j + 1));
        assert!(cells[1..].iter().all(|c| c.parse::<f64>().unwrap() >= 0.0));
    }
}

#[test]
fn simulated_data_feeds_fit_gp_and_config_reloads() {
    let dir = fresh_dir("simulate");
    let d = dir.to_str().unwrap();
    ok(&["simulate", "--preset", "lv-x1obs", "--seed", "1", "--out", d]);
    let data = fs::read_to_string(dir.join("data.csv")).unwrap();
    assert!(data.starts_with("time,x1\n"));
    assert_eq!(data.lines().count(), 21);
    assert!(fs::read_to_string(dir.join("truth.csv")).unwrap().starts_with("time,x1,x2\n"));

    let gp = ok(&["fit-gp", "--preset", "lv-x1obs", "--data", dir.join("data.csv").to_str().unwrap()]);
    assert!(gp.starts_with("[x1]\n"));
    // fitting the simulated file matches fitting in-process data for the same seed
    assert_eq!(gp, ok(&["fit-gp", "--preset", "lv-x1obs", "--seed", "1"]));

    let config = dir.join("config.ini");
    let again = ok(&["simulate", "--config", config.to_str().unwrap()]);
    assert_eq!(again, data);
}

#[test]
fn refine_only_reports_the_local_minimum() {
    let out = ok(&["refine-only", "--preset", "fhn-x2obs", "--seed", "0", "--theta0", "1.51,2.2,1.78"]);
    let kv = key_values(&out);
    let refined: f64 = kv["objective_refined"].parse().unwrap();
    let truth: f64 = kv["objective_true"].parse().unwrap();
    assert!(refined > truth, "{refined} vs {truth}");
}

#[test]
fn repeat_runs_each_seed_in_its_own_directory() {
    let dir = fresh_dir("repeat");
    ok(&["simulate", "--preset", "lv-x1obs", "--seed", "10", "--repeat", "3", "--out", dir.to_str().unwrap()]);
    let mut seen = Vec::new();
    for s in 10..13 {
        let data = fs::read_to_string(dir.join(format!("seed-{s}")).join("data.csv")).unwrap();
        assert_eq!(data, ok(&["simulate", "--preset", "lv-x1obs", "--seed", &s.to_string()]));
        seen.push(data);
    }
    assert!(seen[0] != seen[1] && seen[1] != seen[2]);
}

#[test]
fn flags_override_the_preset() {
    let dir = fresh_dir("flags");
    let d = dir.to_str().unwrap();
    ok(&[
        "infer",
        "--preset",
        "lv-x1obs",
        "--mcmc-samples",
        "40",
        "--burnin",
        "10",
        "--gamma",
        "0.5",
        "--strict-paper-caching",
        "--out",
        d,
    ]);
    let ini = fs::read_to_string(dir.join("config.ini")).unwrap();
    let kv = key_values(&ini);
    assert_eq!(kv["mcmc.samples"], "40");
    assert_eq!(kv["mcmc.burnin"], "10");
    assert_eq!(kv["gamma"], "0.5");
    assert_eq!(kv["mcmc.strict_paper_caching"], "true");
    assert_eq!(fs::read_to_string(dir.join("chain.csv")).unwrap().lines().count(), 51);
}

#[test]
fn failures_exit_nonzero_with_a_stage_tag() {
    let cases: [(&[&str], &str); 4] = [
        (&["infer"], "config"),
        (&["infer", "--preset", "nope"], "config"),
        (&["simulate", "--preset", "fhn-x1obs", "--fhn-standard-sign", "false"], "simulate"),
        (&["infer", "--preset", "lv-x1obs", "--gamma=-1"], "gamma"),
    ];
    for (args, needle) in cases {
        let out = gpgm(args);
        assert!(!out.status.success(), "{args:?} succeeded");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.starts_with("error: ") && err.contains(needle), "{args:?}: {err}");
    }

    let dir = fresh_dir("bad-config");
    fs::create_dir_all(&dir).unwrap();
    let path = dir.join("bad.ini");
    fs::write(&path, "preset = lv-x1obs\nnot_a_key = 1\n").unwrap();
    let out = gpgm(&["infer", "--config", path.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("not_a_key"));

    let out = gpgm(&["infer", "--config", path.to_str().unwrap(), "--preset", "fhn-x1obs"]);
    assert!(!out.status.success());
}
