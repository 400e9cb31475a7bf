use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_trajseq"))
}

fn smoke_data() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/smoke.jsonl")
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Writes a config whose outputs live in `dir` and whose data is `data`.
fn config(dir: &Path, data: &Path, extra: &str) -> PathBuf {
    let text = format!(
        "seed = 5\n{extra}\n[paths]\ndata = {:?}\ncheckpoint = {:?}\nmetrics = {:?}\nseries = {:?}\npredictions = {:?}\n",
        data,
        dir.join("model.ckpt"),
        dir.join("metrics.csv"),
        dir.join("series.csv"),
        dir.join("pred.jsonl"),
    );
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p
}

const TINY_MODEL: &str = "[model]\ncell_dim = 8\nembed_dim_per_axis = 4\nbeam_width = 5\n\
                          [train]\nlr0 = 0.005\nbatch_size = 64\nmax_epochs = 1\n";

fn hash_line(o: &Output) -> String {
    stdout(o)
        .lines()
        .find(|l| l.contains("sha256"))
        .unwrap()
        .split_whitespace()
        .last()
        .unwrap()
        .to_string()
}

#[test]
fn datagen_is_deterministic_and_reports_counts() {
    let dir = TempDir::new().unwrap();
    let a = run(bin()
        .args(["--seed", "9", "datagen", "--out"])
        .arg(dir.path().join("a.jsonl")));
    let b = run(bin()
        .args(["--seed", "9", "datagen", "--out"])
        .arg(dir.path().join("b.jsonl")));
    assert_eq!(hash_line(&a), hash_line(&b));
    assert_eq!(
        fs::read(dir.path().join("a.jsonl")).unwrap(),
        fs::read(dir.path().join("b.jsonl")).unwrap()
    );
    let line = stdout(&a)
        .lines()
        .find(|l| l.starts_with("usable"))
        .unwrap()
        .to_string();
    let n: usize = line.rsplit(' ').next().unwrap().parse().unwrap();
    assert!((1200..=1450).contains(&n), "{line}");
    let c = run(bin()
        .args(["--seed", "10", "datagen", "--out"])
        .arg(dir.path().join("c.jsonl")));
    assert_ne!(hash_line(&a), hash_line(&c));
}

#[test]
fn invalid_maneuver_mix_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(
        &cfg,
        "[scenario.maneuver_mix]\nlane_keep = 0.5\nlane_change = 0.5\ncut_in = 0.5\nmerge = 0.0\n",
    )
    .unwrap();
    let out = bin()
        .arg("--config")
        .arg(&cfg)
        .args(["datagen", "--out"])
        .arg(dir.path().join("x.jsonl"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(stderr(&out).contains("invalid config"), "{}", stderr(&out));
    assert!(!dir.path().join("x.jsonl").exists());
}

#[test]
fn kalman_eval_on_the_smoke_dataset() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), &smoke_data(), "");
    let out = run(bin().arg("--config").arg(&cfg).args(["eval", "--kalman"]));
    let text = stdout(&out);
    let header = text.lines().nth(1).unwrap();
    assert!(
        header.contains("MAE@1") && !header.contains("@3"),
        "{header}"
    );
    let series = fs::read_to_string(dir.path().join("series.csv")).unwrap();
    assert!(series.starts_with("omega,delta,metric,value"));
    assert!(
        series
            .lines()
            .skip(1)
            .filter(|l| !l.starts_with('#'))
            .all(|l| l.starts_with("1,")),
        "{series}"
    );
}

#[test]
fn train_predict_eval_round() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), &smoke_data(), TINY_MODEL);
    run(bin().arg("--config").arg(&cfg).arg("train"));
    assert!(dir.path().join("model.ckpt").exists());
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("epoch,train_nll,val_nll,lr"));
    let epoch0: Vec<f64> = lines
        .next()
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    let ln757 = 757f64.ln();
    assert!(((epoch0[2] - ln757) / ln757).abs() < 0.05, "{epoch0:?}");

    let predict = |extra: &[&str], name: &str| -> Vec<serde_json::Value> {
        let out = dir.path().join(name);
        run(bin()
            .arg("--config")
            .arg(&cfg)
            .args(["predict", "--input"])
            .arg(smoke_data())
            .arg("--out")
            .arg(&out)
            .args(extra));
        fs::read_to_string(&out)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    };
    let beam = predict(&[], "beam.jsonl");
    assert_eq!(beam.len(), 18);
    for v in &beam {
        let hyps = v["hypotheses"].as_array().unwrap();
        assert_eq!(hyps.len(), 5);
        let lps: Vec<f64> = hyps
            .iter()
            .map(|h| h["log_prob"].as_f64().unwrap())
            .collect();
        assert!(lps.windows(2).all(|w| w[0] >= w[1]), "{lps:?}");
        assert_eq!(hyps[0]["classes"].as_array().unwrap().len(), 10);
    }
    let k1 = predict(&["--beam-width", "1"], "k1.jsonl");
    let greedy = predict(&["--greedy"], "greedy.jsonl");
    assert_eq!(k1, greedy);
    let short = predict(&["--horizon", "3"], "short.jsonl");
    assert_eq!(
        short[0]["hypotheses"][0]["cells"].as_array().unwrap().len(),
        3
    );

    let out = run(bin().arg("--config").arg(&cfg).arg("eval"));
    let text = stdout(&out);
    let header = text.lines().nth(1).unwrap();
    let p1 = header.find("MAE@1").unwrap();
    let p3 = header.find("MAE@3").unwrap();
    let p5 = header.find("MAE@5").unwrap();
    assert!(p1 < p3 && p3 < p5, "{header}");

    let bad = bin()
        .arg("--config")
        .arg(&cfg)
        .args(["eval", "--omega", "1,7"])
        .output()
        .unwrap();
    assert!(!bad.status.success());
    assert!(stderr(&bad).contains("omega 7"), "{}", stderr(&bad));
}

#[test]
fn too_few_frames_names_the_vehicle() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), &smoke_data(), TINY_MODEL);
    run(bin().arg("--config").arg(&cfg).arg("train"));
    let text = fs::read_to_string(smoke_data()).unwrap();
    let mut rec: serde_json::Value = serde_json::from_str(text.lines().nth(4).unwrap()).unwrap();
    rec["frames"].as_array_mut().unwrap().truncate(12);
    let input = dir.path().join("short.jsonl");
    fs::write(&input, format!("{rec}\n")).unwrap();
    let out = bin()
        .arg("--config")
        .arg(&cfg)
        .args(["predict", "--input"])
        .arg(&input)
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = stderr(&out);
    let want = format!(
        "scenario {} vehicle {}",
        rec["scenario_id"], rec["vehicle_id"]
    );
    assert!(err.contains(&want) && err.contains("12"), "{err}");
}

#[test]
fn overfit_mode_memorizes() {
    let dir = TempDir::new().unwrap();
    let model = "[model]\ncell_dim = 32\nembed_dim_per_axis = 16\n";
    let cfg = config(dir.path(), &smoke_data(), model);
    let out = run(bin()
        .arg("--config")
        .arg(&cfg)
        .args(["train", "--overfit", "16"]));
    let text = stdout(&out);
    let first: usize = text
        .lines()
        .find_map(|l| l.strip_prefix("nll below 0.1 after "))
        .unwrap_or_else(|| panic!("{text}"))
        .trim_end_matches(" steps")
        .parse()
        .unwrap();
    assert!(first <= 2000, "{text}");
    let last = text
        .lines()
        .filter(|l| l.starts_with("epoch"))
        .last()
        .unwrap();
    let val: f64 = last.split_whitespace().nth(7).unwrap().parse().unwrap();
    assert!(val < 0.1, "{last}");
    let pct: f64 = text
        .lines()
        .last()
        .unwrap()
        .split('(')
        .nth(1)
        .unwrap()
        .trim_end_matches("%)")
        .parse()
        .unwrap();
    assert!(pct >= 95.0, "{text}");
}

#[test]
fn missing_dataset_is_an_error() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), &dir.path().join("nope.jsonl"), TINY_MODEL);
    let out = bin()
        .arg("--config")
        .arg(&cfg)
        .arg("train")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(stderr(&out).contains("nope.jsonl"), "{}", stderr(&out));
}

#[test]
fn verify_passes_and_lists_checks() {
    let out = run(bin().arg("verify"));
    let text = stdout(&out);
    for name in [
        "gradient",
        "beam-exhaustive",
        "quantization",
        "softmax",
        "kalman-cv",
    ] {
        let line = text.lines().find(|l| l.starts_with(name)).unwrap();
        assert!(
            line.contains("PASS") && line.contains("max error"),
            "{line}"
        );
    }
}

#[test]
fn perturbed_gradient_fails_verify() {
    let out = bin()
        .args(["verify", "--perturb-gradient"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(
        stderr(&out).contains("failed checks: gradient"),
        "{}",
        stderr(&out)
    );
}
