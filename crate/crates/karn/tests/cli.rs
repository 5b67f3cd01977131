use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use karn::checkpoint::Checkpoint;
use karn::commands::{self, EvaluationReport};
use karn::config::{parse_override, RunConfig};
use karn::report::{read_forecast, read_report};
use karn::synth::{generate, Profile, SynthConfig};
use karn_core::loss::metric_suite;
use karn_core::train::MetricsReport;

fn karn(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_karn"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("spawn karn")
}

fn ok(o: Output) -> String {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

const SMALL: [&str; 12] = [
    "--set",
    "hidden_size=8",
    "--set",
    "num_layers=1",
    "--set",
    "max_epochs=3",
    "--set",
    "strict_domains=false",
    "--set",
    "features=[\"load\", \"hour_of_day\", \"day_of_week\"]",
    "--set",
    "seed=2",
];

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend(SMALL);
    v
}

/// Synthetic CSV plus prepared data under `dir`.
fn prepared(dir: &Path, profile: &str, hours: usize) -> PathBuf {
    let csv = dir.join("load.csv");
    let hours = hours.to_string();
    ok(karn(dir, &["gen-synthetic", "--profile", profile, "--hours", &hours, "--seed", "4", "-o", csv.to_str().unwrap()]));
    ok(karn(dir, &with_small(&["prepare", "--data", csv.to_str().unwrap()])));
    csv
}

fn find_file(root: &Path, name: &str) -> PathBuf {
    for entry in std::fs::read_dir(root).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            let hit = find_file(&p, name);
            if hit.exists() {
                return hit;
            }
        } else if p.file_name().unwrap() == name {
            return p;
        }
    }
    root.join("missing").join(name)
}

#[test]
fn gen_synthetic_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let read = |name: &str, seed: &str| {
        let p = dir.path().join(name);
        ok(karn(dir.path(), &["gen-synthetic", "--profile", "house", "--hours", "700", "--seed", seed, "-o", p.to_str().unwrap()]));
        std::fs::read(p).unwrap()
    };
    let a = read("a.csv", "7");
    assert_eq!(a, read("b.csv", "7"));
    assert_ne!(a, read("c.csv", "8"));
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().next().unwrap(), "timestamp,load_kwh,temperature_c");
    assert_eq!(text.lines().count(), 701);
}

#[test]
fn ev_spikes_are_detectable_at_the_configured_rate() {
    let days = 365;
    let g = generate(&SynthConfig::new(Profile::Ev, 24 * days, 21)).unwrap();
    let found: Vec<usize> = (0..g.series.len()).filter(|&t| g.series.load[t] > 75.0).collect();
    assert_eq!(found, g.spike_hours);
    let expected = 0.5 * days as f64;
    let sd = expected.sqrt();
    assert!((found.len() as f64 - expected).abs() < 4.0 * sd, "{} spikes, expected about {expected}", found.len());
}

#[test]
fn clinic_has_no_level_shifts() {
    let weekly_jump = |p: Profile| {
        let s = generate(&SynthConfig::new(p, 24 * 365, 9)).unwrap().series;
        (168..s.len()).map(|t| (s.load[t] - s.load[t - 168]).abs()).fold(0.0, f64::max)
    };
    assert!(weekly_jump(Profile::Clinic) < 8.0);
    assert!(weekly_jump(Profile::House) > 8.0);
}

#[test]
fn train_then_evaluate_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    prepared(dir.path(), "clean", 24 * 40);
    let stdout = ok(karn(dir.path(), &with_small(&["train", "--model", "gru"])));
    assert!(stdout.contains("persistence SMAPE"));
    let report_path = find_file(&dir.path().join("runs"), "report.json");
    let report: MetricsReport = read_report(&report_path).unwrap();
    let run = report_path.parent().unwrap();
    for f in ["model.ckpt", "curve.csv", "forecast_test.csv"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let curve = std::fs::read_to_string(run.join("curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), report.epochs_run + 1);

    let eval_dir = dir.path().join("eval");
    let ckpt = run.join("model.ckpt");
    ok(karn(
        dir.path(),
        &with_small(&["evaluate", "--checkpoint", ckpt.to_str().unwrap(), "--split", "test", "--svg", "--output", eval_dir.to_str().unwrap()]),
    ));
    let eval: EvaluationReport = serde_json::from_slice(&std::fs::read(eval_dir.join("evaluation_test.json")).unwrap()).unwrap();
    assert_eq!(eval.metrics, report.test.unwrap());
    assert!(eval_dir.join("forecast_test.svg").exists());

    let (actual, forecast) = read_forecast(&eval_dir.join("forecast_test.csv")).unwrap();
    assert_eq!(actual.len(), eval.windows * 24);
    assert_eq!(eval.windows, 192 - 24 - 24 + 1);
    let again = metric_suite(&forecast, &actual);
    assert!((again.smape - eval.metrics.smape).abs() < 1e-9);
    assert_eq!(
        std::fs::read(eval_dir.join("forecast_test.csv")).unwrap(),
        std::fs::read(run.join("forecast_test.csv")).unwrap()
    );
}

#[test]
fn exit_codes_follow_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let csv = prepared(dir.path(), "clean", 24 * 10);
    let code = |args: &[&str]| karn(dir.path(), args).status.code();

    assert_eq!(code(&["prepare", "--data", csv.to_str().unwrap(), "--set", "load_column=kw"]), Some(3));
    assert_eq!(code(&["prepare", "--data", "/nonexistent/load.csv"]), Some(1));
    assert_eq!(code(&["train", "--set", "hiden_size=8"]), Some(2));
    assert_eq!(code(&["train", "--set", "hidden_size=100"]), Some(2));
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "window = 0\n").unwrap();
    assert_eq!(code(&["train", "--config", cfg.to_str().unwrap()]), Some(2));

    let short = dir.path().join("short.csv");
    std::fs::write(&short, "timestamp,load_kwh,temperature_c\n2021-01-01T00:00:00,1.0,2.0\n").unwrap();
    assert_eq!(code(&["prepare", "--data", short.to_str().unwrap()]), Some(3));

    let stderr = String::from_utf8(karn(dir.path(), &["prepare", "--data", csv.to_str().unwrap(), "--set", "load_column=kw"]).stderr).unwrap();
    assert!(stderr.contains("kw"), "{stderr}");
}

#[test]
fn gradient_check_command_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(karn(dir.path(), &["check-gradients", "--seeds", "1"]));
    assert_eq!(out.lines().filter(|l| l.ends_with("pass")).count(), 4);
}

fn search_config(dir: &Path) -> RunConfig {
    let mut o: Vec<_> = SMALL
        .chunks(2)
        .map(|c| parse_override(c[1]).unwrap())
        .collect();
    o.push(("out".into(), toml::Value::String(dir.display().to_string())));
    o.push(parse_override("max_epochs=2").unwrap());
    o.push(parse_override("budget=4").unwrap());
    o.push(parse_override("jobs=2").unwrap());
    o.push(parse_override("search_models=[\"karn\", \"rnn\"]").unwrap());
    RunConfig::load(None, &o).unwrap()
}

#[test]
fn search_writes_trials_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    prepared(dir.path(), "spiky", 24 * 12);
    let cfg = search_config(dir.path());
    let first = commands::search(&cfg).unwrap();
    assert_eq!(first.trials.len(), 4);
    assert_eq!((first.ran, first.resumed), (4, 0));
    let w = first.winner.unwrap();
    let best = first.trials[w].val_loss().unwrap();
    assert!(first.trials.iter().filter_map(|t| t.val_loss()).all(|v| v >= best));
    let tested = first.trials.iter().filter(|t| t.report.as_ref().is_some_and(|r| r.test.is_some())).count();
    assert_eq!(tested, 1);
    let search = dir.path().join("search");
    for f in ["best.ckpt", "best_report.json", "best_forecast_test.csv", "ranking.csv"] {
        assert!(search.join(f).exists(), "{f} missing");
    }
    let ranking = std::fs::read_to_string(search.join("ranking.csv")).unwrap();
    assert_eq!(ranking.lines().count(), 5);
    assert!(ranking.lines().nth(1).unwrap().starts_with(&format!("1,{},", first.trials[w].index)));

    let victim = karn::search::trial_dir(&search, &first.trials[(w + 1) % 4].config);
    std::fs::remove_file(victim.join("report.json")).unwrap();
    let second = commands::search(&cfg).unwrap();
    assert_eq!((second.ran, second.resumed), (1, 3));
    assert_eq!(second.trials.len(), 4);
    assert_eq!(second.winner, first.winner);
}

#[test]
fn extend_grid_preserves_forecasts() {
    let dir = tempfile::tempdir().unwrap();
    prepared(dir.path(), "house", 24 * 20);
    let mut train = with_small(&["train", "--model", "karn"]);
    train.extend(["--set", "grid_points=5", "--set", "num_layers=2"]);
    ok(karn(dir.path(), &train));
    let ckpt = find_file(&dir.path().join("runs"), "model.ckpt");
    let fine = dir.path().join("fine.ckpt");
    let out = ok(karn(
        dir.path(),
        &with_small(&["extend-grid", "--checkpoint", ckpt.to_str().unwrap(), "--grid-points", "10", "-o", fine.to_str().unwrap()]),
    ));
    let json = &out[..out.rfind("\nwrote").unwrap()];
    let report: commands::ExtendReport = serde_json::from_str(json).unwrap();
    assert_eq!(report.layers.len(), 2);
    for l in &report.layers {
        assert_eq!((l.from, l.to), (5, 10));
        assert!(l.max_deviation < 1e-6, "{l:?}");
    }
    assert!(report.params_after > report.params_before);
    let reloaded = Checkpoint::load(&fine).unwrap();
    let net = reloaded.model.as_karn().unwrap();
    assert!(net.layers().iter().all(|l| l.grid.interior_count() == 10));
    assert_eq!(reloaded.config.as_ref().unwrap().grid_points, Some(10));

    let again = karn(
        dir.path(),
        &with_small(&["extend-grid", "--checkpoint", fine.to_str().unwrap(), "--grid-points", "10", "-o", fine.to_str().unwrap()]),
    );
    assert_eq!(again.status.code(), Some(2));
    let gru = dir.path().join("gru");
    ok(karn(dir.path(), &with_small(&["train", "--model", "gru", "--out", gru.to_str().unwrap(), "--prepared", dir.path().join("prepared").to_str().unwrap()])));
    let gru_ckpt = find_file(&gru.join("runs"), "model.ckpt");
    let refused = karn(
        dir.path(),
        &with_small(&["extend-grid", "--checkpoint", gru_ckpt.to_str().unwrap(), "--grid-points", "10", "-o", fine.to_str().unwrap()]),
    );
    assert_eq!(refused.status.code(), Some(2));
}
