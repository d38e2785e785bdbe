use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dsgld::experiment::{read_metrics, KEYS};

fn dsgld(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsgld"))
        .args(args)
        .output()
        .unwrap()
}

fn write(path: &Path, text: &str) -> String {
    fs::write(path, text).unwrap();
    path.to_str().unwrap().to_string()
}

const SMALL: &str =
    "synth_users = 50\nsynth_items = 50\nsynth_density = 0.2\ndim = 4\nminibatch_size = 50\n";

#[test]
fn ten_rounds_give_ten_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(&dir.path().join("run.cfg"), SMALL);
    let out = dir.path().join("m.csv");
    let o = dsgld(&[
        "run",
        "--config",
        &cfg,
        "--algorithm",
        "sgld",
        "--out",
        out.to_str().unwrap(),
        "--max_rounds",
        "10",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_metrics(&out).unwrap();
    assert_eq!(rows.len(), 10);
    assert!(rows
        .windows(2)
        .all(|w| w[0].wall_clock_s <= w[1].wall_clock_s));
    assert!(String::from_utf8_lossy(&o.stdout).contains("final test RMSE"));
}

#[test]
fn trace_shows_the_two_chain_rotation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        &dir.path().join("run.cfg"),
        &format!("{SMALL}workers = 4\nchains = 2\ntrace = true\n"),
    );
    let out = dir.path().join("m.csv");
    let o = dsgld(&[
        "run",
        "--config",
        &cfg,
        "--algorithm",
        "dsgld-s",
        "--out",
        out.to_str().unwrap(),
        "--max_rounds",
        "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let trace = fs::read_to_string(dir.path().join("m.csv.trace")).unwrap();
    // Blocks are numbered row-major on the 2 × 2 grid; the diagonals are {0, 3} and {1, 2}.
    assert_eq!(
        trace,
        "round\tchain\tgroup\tblocks\n1\t0\t0\t0,3\n1\t1\t1\t1,2\n2\t0\t1\t1,2\n2\t1\t0\t0,3\n"
    );
}

#[test]
fn same_seed_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        &dir.path().join("run.cfg"),
        &format!("{SMALL}algorithm = dsgld-c\nworkers = 3\nchains = 3\nclock = logical\nmax_rounds = 25\nburn_in_rmse_threshold = 2\n"),
    );
    let out = dir.path().join("m.csv");
    let run = || {
        let o = dsgld(&[
            "run",
            "--config",
            &cfg,
            "--seed",
            "5",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        fs::read(&out).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn resolved_config_is_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(&dir.path().join("run.cfg"), SMALL);
    let out = dir.path().join("m.csv");
    let o = dsgld(&[
        "run",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--max_rounds=1",
    ]);
    assert!(o.status.success());
    let text = fs::read_to_string(&out).unwrap();
    for (key, _) in KEYS {
        assert!(
            text.contains(&format!("# {key} = ")),
            "{key} missing from the echo"
        );
    }
    for line in [
        "# round_length = 50",
        "# thin = 10",
        "# hyper_interval = 50",
        "# gamma_decay = 0.51",
        "# tau = 2",
    ] {
        assert!(text.contains(line), "{line}");
    }
}

#[test]
fn bad_keys_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(&dir.path().join("run.cfg"), "no_such_key = 3\n");
    let o = dsgld(&["run", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_key"));

    let o = dsgld(&["run", "--algorithm", "dsgld-s", "--workers", "3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("workers"));
}

#[test]
fn synth_then_run_then_summarize() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(
        &dir.path().join("spec"),
        "users = 40\nitems = 30\ndim_true = 3\nnoise_sd = 0.5\ndensity = 0.3\nseed = 4\n",
    );
    let data = dir.path().join("ratings.tsv");
    let o = dsgld(&["synth", "--spec", &spec, "--out", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(&data).unwrap().lines().count(), 360);
    let truth = fs::read_to_string(dir.path().join("ratings.tsv.truth")).unwrap();
    assert!(truth.starts_with("# U 40 3"));

    let run = |algo: &str, name: &str| {
        let out = dir.path().join(name);
        let o = dsgld(&[
            "run",
            "--algorithm",
            algo,
            "--out",
            out.to_str().unwrap(),
            "--dataset",
            data.to_str().unwrap(),
            "--dim",
            "3",
            "--max_rounds",
            "20",
            "--minibatch_size",
            "50",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let sgld = run("sgld", "sgld.csv");
    let sgd = run("sgd", "sgd.csv");
    let o = dsgld(&[
        "summarize",
        "--metrics",
        sgld.to_str().unwrap(),
        "--baseline",
        sgd.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("sgld: final test RMSE"));
    assert!(text.contains("relative improvement over sgd"));
}

#[test]
fn gibbs_runs_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(&dir.path().join("run.cfg"), SMALL);
    let out = dir.path().join("g.csv");
    let o = dsgld(&[
        "run",
        "--config",
        &cfg,
        "--algorithm",
        "gibbs",
        "--max_rounds",
        "5",
        "--thin",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_metrics(&out).unwrap();
    assert_eq!(rows.len(), 5);
    assert_eq!(rows.last().unwrap().samples_collected, 5);
}
