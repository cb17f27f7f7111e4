use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use brainenc::config::keys_help;
use brainenc::eval::{parse_report_csv, ALL};

fn brainenc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_brainenc")).args(args).output().unwrap()
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

fn ok(args: &[&str]) {
    let out = brainenc(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn synth(dir: &Path, extra: &[&str]) {
    let mut args = vec!["synth", "--seed", "3", "--out"];
    let d = s(dir);
    args.push(&d);
    args.extend(["--set", "synth.n_parcels=5", "--set", "synth.t_samples=150"]);
    args.extend(extra);
    ok(&args);
}

#[test]
fn noiseless_linear_run_reaches_unit_correlation() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, &["--set", "synth.snr=1e12", "--set", "synth.ood_ar1=0"]);
    let cfg = s(&data.join("data.cfg"));
    let fit = tmp.path().join("fit");
    ok(&["fit", "--config", &cfg, "--out", &s(&fit)]);
    let pred = tmp.path().join("pred");
    ok(&["predict", "--config", &cfg, "--model", &s(&fit.join("model.nmel")), "--out", &s(&pred)]);
    let eval = tmp.path().join("eval");
    ok(&["eval", "--config", &cfg, "--predictions", &s(&pred.join("predictions")), "--out", &s(&eval)]);

    let rows = parse_report_csv(&fs::read_to_string(eval.join("report.csv")).unwrap()).unwrap();
    let overall = rows
        .iter()
        .find(|r| r.meta.subject_id == ALL && r.meta.source_id == ALL)
        .unwrap();
    assert!(overall.mean_rho >= 0.999, "mean rho {}", overall.mean_rho);
    assert!(!eval.join(".brainenc.lock").exists());
}

#[test]
fn missing_source_is_a_data_error_and_writes_no_model() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, &[]);
    fs::remove_file(data.join("features/train-001.audio.nmef")).unwrap();
    let fit = tmp.path().join("fit");
    let out = brainenc(&["fit", "--config", &s(&data.join("data.cfg")), "--out", &s(&fit)]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("code=3") && err.contains("train-001"), "{err}");
    assert!(!fit.join("model.nmel").exists());
    assert!(!fit.join("fit_log.csv").exists());
}

#[test]
fn bad_configuration_exits_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = s(&tmp.path().join("o"));
    for args in [
        vec!["synth", "--out", &out_dir, "--set", "synth.no_such_key=1"],
        vec!["synth", "--out", &out_dir, "--set", "synth.t_samples=many"],
        vec!["fit", "--out", &out_dir, "--set", "model.family=forest"],
        vec!["fit", "--out", &out_dir],
    ] {
        let out = brainenc(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "this line has no equals sign\n").unwrap();
    let out = brainenc(&["synth", "--config", &s(&cfg), "--out", &out_dir]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_lists_every_configuration_key() {
    let keys: Vec<String> = keys_help()
        .lines()
        .filter_map(|l| l.split_whitespace().next().map(str::to_string))
        .filter(|k| k.contains('.') || k == "seed")
        .collect();
    assert!(keys.len() > 30);
    for sub in ["synth", "fit", "predict", "eval", "report"] {
        let out = brainenc(&[sub, "--help"]);
        assert!(out.status.success());
        let text = String::from_utf8_lossy(&out.stdout);
        for k in &keys {
            assert!(text.contains(k.as_str()), "{sub} --help lacks {k}");
        }
    }
}

#[test]
fn held_lock_refuses_a_second_run() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("busy");
    fs::create_dir_all(&dir).unwrap();
    fs::write(dir.join(".brainenc.lock"), "1\n").unwrap();
    let out = brainenc(&["synth", "--out", &s(&dir)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("in use"));
    assert!(!dir.join("manifest.tsv").exists());

    fs::remove_file(dir.join(".brainenc.lock")).unwrap();
    ok(&["synth", "--out", &s(&dir), "--set", "synth.t_samples=40"]);
    assert!(dir.join("manifest.tsv").exists());
    assert!(!dir.join(".brainenc.lock").exists());
}

#[test]
fn report_merges_runs_into_a_table() {
    let tmp = tempfile::tempdir().unwrap();
    let header = "subject_id,source_id,model_tag,n_parcels_defined,n_samples,mean_rho\n";
    let a = tmp.path().join("a.csv");
    let b = tmp.path().join("b.csv");
    fs::write(&a, format!("{header}sub-01,m1,lin,4,10,5.0e-1\nsub-01,m2,lin,4,10,3.0e-1\n")).unwrap();
    fs::write(&b, format!("{header}sub-01,m1,att,4,10,6.0e-1\nsub-01,m2,att,4,10,2.0e-1\n")).unwrap();
    let out = tmp.path().join("r");
    ok(&["report", &s(&a), &s(&b), "--out", &s(&out)]);
    let table = fs::read_to_string(out.join("table.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "source_id,att,lin");
    let all: Vec<f64> = lines
        .iter()
        .find(|l| l.starts_with(ALL))
        .unwrap()
        .split(',')
        .skip(1)
        .map(|v| v.parse().unwrap())
        .collect();
    assert!((all[0] - 0.4).abs() < 1e-12 && (all[1] - 0.4).abs() < 1e-12);
}
