use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn relgate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relgate")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn scratch(name: &str) -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = fs::remove_dir_all(&d);
    fs::create_dir_all(&d).unwrap();
    d
}

const SMALL: &str = r#"
train_samples = 600
clean_samples = 600
write_traces = true
train.epochs = 80
stream.batches = 15
stream.batch_size = 16
"#;

/// `SMALL` plus `extra`; keys set in `extra` replace those in `SMALL`.
fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let keys: Vec<&str> = extra.lines().filter_map(|l| l.split_once(" = ").map(|(k, _)| k)).collect();
    let base: Vec<&str> = SMALL
        .lines()
        .filter(|l| l.split_once(" = ").is_none_or(|(k, _)| !keys.contains(&k)))
        .collect();
    let p = dir.join("config.toml");
    fs::write(&p, format!("{}\n{extra}", base.join("\n"))).unwrap();
    p
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn ladder_run_writes_one_trace_per_method_and_one_summary() {
    let d = scratch("ladder");
    let cfg = write_config(&d, r#"methods = ["base", "base+controller", "gated-full+controller"]"#);
    let out = d.join("out");
    let o = relgate(&["run", "--config", p(&cfg), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let traces: Vec<_> = fs::read_dir(out.join("traces")).unwrap().collect();
    assert_eq!(traces.len(), 3);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    let mut lines = summary.lines();
    assert_eq!(
        lines.next().unwrap(),
        "relgate.summary.v1,method,ordering,s_target,seed,err,mean_r_src,resets,batches,status"
    );
    assert_eq!(lines.count(), 3);
    assert!(out.join("effective_config.toml").exists());
}

#[test]
fn source_only_summary_is_frozen_source_error_and_rerun_is_identical() {
    let d = scratch("source_only");
    let cfg = write_config(&d, r#"methods = ["source-only"]"#);
    let a = d.join("a");
    let b = d.join("b");
    assert!(relgate(&["run", "--config", p(&cfg), "--out", p(&a)]).status.success());
    assert!(relgate(&["run", "--config", p(&cfg), "--out", p(&b), "--jobs", "2"]).status.success());
    let sa = fs::read(a.join("summary.csv")).unwrap();
    assert_eq!(sa, fs::read(b.join("summary.csv")).unwrap());
    let trace = fs::read_dir(a.join("traces")).unwrap().next().unwrap().unwrap().path();
    let text = fs::read_to_string(trace).unwrap();
    assert!(text.lines().skip(1).all(|l| l.ends_with(",0")));
    let row = String::from_utf8(sa).unwrap().lines().nth(1).unwrap().to_string();
    assert!(row.contains(",source-only,iid,,0,"), "{row}");
}

#[test]
fn tau_gate_sweep_counts_runs_and_rows() {
    let d = scratch("tau_sweep");
    let cfg = write_config(&d, "methods = [\"gated-full+controller\"]\nseeds = [0, 1, 2]");
    let out = d.join("out");
    let o = relgate(&["sweep", "--config", p(&cfg), "--axis", "tau_gate", "--values", "0.20,0.30,0.40,0.50", "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("12 runs, 4 rows"), "{}", stdout(&o));
    let rep = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert!(rep.starts_with("relgate.sweep.v1,axis,value,method,ordering,s_target,n,err_mean,err_std,mean_r_src,resets_mean\n"));
    assert_eq!(rep.lines().count(), 5);
}

#[test]
fn lambda_sweep_from_config_reports_attenuation_column() {
    let d = scratch("lambda_sweep");
    let cfg = write_config(&d, "methods = [\"gated-full\"]\n\n[sweep]\naxis = \"lambda\"\nvalues = [0.5, 1.0, 2.0, 4.0, 8.0]");
    let out = d.join("out");
    let o = relgate(&["sweep", "--config", p(&cfg), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rep = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = rep.lines().skip(1).collect();
    assert_eq!(rows.len(), 5);
    for r in rows {
        let r_src: f64 = r.split(',').nth(9).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&r_src));
    }
}

#[test]
fn empty_sweep_axis_is_an_error() {
    let d = scratch("empty_sweep");
    let cfg = write_config(&d, "");
    let o = relgate(&["sweep", "--config", p(&cfg), "--axis", "lambda", "--out", p(&d.join("out"))]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("sweep.values"), "{}", stderr(&o));
    let o = relgate(&["sweep", "--config", p(&cfg), "--axis", "lamda", "--values", "1"]);
    assert!(!o.status.success());
}

#[test]
fn config_errors_name_the_key() {
    let d = scratch("bad_config");
    let cfg = write_config(&d, "[adapter]\nrho = 1.5");
    let o = relgate(&["run", "--config", p(&cfg), "--out", p(&d.join("out"))]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("`adapter.rho`"), "{}", stderr(&o));
    assert!(!d.join("out").exists());

    let cfg = write_config(&d, "methods = [\"base\", \"gated-ful\"]");
    let o = relgate(&["run", "--config", p(&cfg)]);
    assert!(stderr(&o).contains("`methods[1]`"), "{}", stderr(&o));

    let cfg = write_config(&d, "[adapter]\nlamda = 2.0");
    let o = relgate(&["run", "--config", p(&cfg)]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("`adapter.lamda`"), "{}", stderr(&o));
}

#[test]
fn print_effective_config_resolves_and_exits() {
    let d = scratch("effective");
    let cfg = write_config(&d, "methods = [\"gated-full+controller\"]");
    let o = relgate(&["run", "--config", p(&cfg), "--seed-list", "4,5", "--print-effective-config", "--out", p(&d.join("out"))]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("seeds = [4, 5]"), "{text}");
    assert!(text.contains("tau_gate = 0.4"), "{text}");
    assert!(text.contains("[adapter]") && text.contains("lambda = 2.0"), "{text}");
    assert!(!d.join("out").exists());
}

#[test]
fn calibrate_writes_blobs_manifests_and_table() {
    let d = scratch("calibrate");
    let cfg = write_config(&d, "");
    let out = d.join("out");
    let o = relgate(&["calibrate", "--config", p(&cfg), "--targets", "0.6,0.3", "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(out.join("calibration.csv")).unwrap();
    assert!(table.starts_with("relgate.calibration.v1,seed,s_target,s_actual,epsilon,iterations,sha256\n"));
    assert_eq!(table.lines().count(), 3);
    let files: Vec<_> = fs::read_dir(out.join("sources")).unwrap().collect();
    assert_eq!(files.len(), 4);
}

#[test]
fn unreachable_calibration_target_fails_with_bracket() {
    let d = scratch("calibrate_fail");
    let cfg = write_config(&d, "clean_samples = 7\ncalibration_tol = 0.001");
    let o = relgate(&["calibrate", "--config", p(&cfg), "--targets", "0.5", "--out", p(&d.join("out"))]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("bracket") && err.contains("0.5714") && err.contains("0.4286"), "{err}");
}

#[test]
fn analyze_recipes_on_bundled_fixtures() {
    let d = scratch("analyze");
    let o = relgate(&["analyze", "harm-slope", "--out", p(&d)]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("= 12.92") && stdout(&o).contains("= 11.43") && stdout(&o).contains("= 1.13"));
    let o = relgate(&["analyze", "reliability", "--out", p(&d)]);
    assert!(stdout(&o).contains("AUC 1.000"), "{}", stdout(&o));
    let o = relgate(&["analyze", "wtl", "--out", p(&d)]);
    assert!(stdout(&o).contains("51/2/1"));
    let o = relgate(&["analyze", "paired", "--out", p(&d)]);
    assert_eq!(stdout(&o).matches("agrees").count(), 6);
    assert!(!stdout(&o).contains("DISAGREES"));
}

#[test]
fn analyze_reports_row_and_column_on_schema_mismatch() {
    let d = scratch("analyze_bad");
    let bad = d.join("bad.csv");
    fs::write(&bad, "method,ordering,s_target,seed,err\nx,iid,0.5,0,12\nx,iid,0.5,1,oops\n").unwrap();
    let o = relgate(&["analyze", "harm-slope", "--input", p(&bad), "--out", p(&d)]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("row 3"), "{}", stderr(&o));
    fs::write(&bad, "cell,split,ungated_err\nhard,1,3\n").unwrap();
    let o = relgate(&["analyze", "wtl", "--input", p(&bad), "--out", p(&d)]);
    assert!(stderr(&o).contains("column `gated_err`"), "{}", stderr(&o));
}

#[test]
fn analyze_windows_on_a_run_trace() {
    let d = scratch("windows");
    let cfg = write_config(&d, "methods = [\"base\"]");
    let out = d.join("out");
    assert!(relgate(&["run", "--config", p(&cfg), "--out", p(&out)]).status.success());
    let trace = fs::read_dir(out.join("traces")).unwrap().next().unwrap().unwrap().path();
    let o = relgate(&["analyze", "windows", "--input", p(&trace), "--window", "5", "--stride", "5", "--out", p(&d)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rep = fs::read_to_string(d.join("windows.csv")).unwrap();
    assert_eq!(rep.lines().count(), 1 + 3);
}

#[test]
fn verify_passes_and_fault_injection_is_caught() {
    let quick = ["--gradient-configs", "3", "--stats-instances", "5", "--resamples", "20000", "--collapse-batches", "40"];
    let o = relgate(&[&["verify"], &quick[..]].concat());
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("all 9 checks passed"));

    let o = relgate(&[&["verify", "--verbose"], &quick[..]].concat());
    assert!(stdout(&o).contains("tolerance 1.000e-4"), "{}", stdout(&o));

    let o = relgate(&[&["verify", "--inject-fault"], &quick[..]].concat());
    assert!(!o.status.success());
    let text = stdout(&o);
    let line = text.lines().find(|l| l.starts_with("FAIL")).unwrap();
    assert!(line.contains("source-collapse invariance") && line.contains("theta* dependence"), "{line}");
    assert!(stderr(&o).contains("violated: source-collapse invariance"));
}
