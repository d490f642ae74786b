use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn nadpex(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nadpex"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

const TINY: [&str; 10] = [
    "--set",
    "seeds=1,2",
    "--set",
    "total_steps=256",
    "--set",
    "batch_steps=64",
    "--set",
    "hidden=8",
    "--set",
    "epochs=2",
];

#[test]
fn bad_configuration_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = nadpex(&["train", "--set", "dropout_rate=0.7"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("dropout_rate"));
    assert_eq!(code(&nadpex(&["train", "--preset", "nope"], dir.path())), 1);
    assert_eq!(code(&nadpex(&["frobnicate"], dir.path())), 1);
    assert_eq!(code(&nadpex(&["--help"], dir.path())), 0);
}

#[test]
fn train_plot_replay_and_resume_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let mut args = vec!["train", "--preset", "sparse-b", "--output-dir", "run", "--set", "dump_trajectories=true"];
    args.extend(TINY);
    let o = nadpex(&args, p);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics_1.csv", "metrics_2.csv", "summary.json", "curves.svg", "config.echo", "checkpoint_1.json"] {
        assert!(p.join("run").join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(p.join("run/metrics_1.csv")).unwrap().lines().count(), 5);

    let o = nadpex(&["plot", "run", "-o", "out.svg"], p);
    assert_eq!(code(&o), 0);
    let svg = fs::read_to_string(p.join("out.svg")).unwrap();
    assert!(svg.contains("run (n=2)"));
    let o = nadpex(&["plot", "solo=run/metrics_1.csv", "-o", "solo.svg"], p);
    assert_eq!(code(&o), 0);
    assert_eq!(code(&nadpex(&["plot", "missing_dir"], p)), 1);

    let o = nadpex(
        &["replay", "run/trajectories_1.csv", "--env", "mountaincar", "--variant", "sparse"],
        p,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).contains("0 mismatches"));
    let o = nadpex(&["replay", "run/trajectories_1.csv", "--env", "mountaincar", "--variant", "dense"], p);
    assert_eq!(code(&o), 3);

    let o = nadpex(&["resume", "run/checkpoint_1.json", "--total-steps", "512", "--output-dir", "more"], p);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let resumed = fs::read_to_string(p.join("more/metrics_1.csv")).unwrap();
    assert_eq!(resumed.lines().count(), 1 + 5);
    let mut longer = vec!["train", "--preset", "sparse-b", "--output-dir", "long"];
    longer.extend(TINY);
    longer.extend(["--set", "total_steps=512", "--set", "seeds=1"]);
    assert_eq!(code(&nadpex(&longer, p)), 0);
    let full = fs::read_to_string(p.join("long/metrics_1.csv")).unwrap();
    let tail: Vec<&str> = full.lines().skip(4).collect();
    assert_eq!(resumed.lines().skip(1).collect::<Vec<_>>(), tail);
}

#[test]
fn check_subset_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = nadpex(&["check", "--only", "gae_direct_sum", "--only", "kl_bound_sweep", "--csv", "g.csv"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let csv = fs::read_to_string(dir.path().join("g.csv")).unwrap();
    assert!(csv.lines().count() >= 3);
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(1) == Some("true")));
    assert_eq!(code(&nadpex(&["check", "--only", "bogus"], dir.path())), 1);
    let list = nadpex(&["check", "--list"], dir.path());
    assert!(String::from_utf8_lossy(&list.stdout).contains("finite_differences"));
}
