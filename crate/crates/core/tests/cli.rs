mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::SMALL_CONFIG_TOML;

fn cvrlab(args: &[&str], output_root: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cvrlab"));
    cmd.args(args);
    match output_root {
        Some(root) => cmd.env("CVRLAB_OUTPUT_ROOT", root),
        None => cmd.env_remove("CVRLAB_OUTPUT_ROOT"),
    };
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn oracle_check_passes() {
    let o = cvrlab(&["oracle-check", "--samples", "2000"], None);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("pass"));
}

#[test]
fn gradcheck_passes() {
    let o = cvrlab(&["gradcheck", "--variant", "esm2"], None);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("gradcheck esm2"));
}

#[test]
fn usage_and_config_errors_exit_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cvrlab(&["frobnicate"], None).status.code(), Some(1));
    assert_eq!(
        cvrlab(&["train", "--variant", "gmcm", "--seed", "1"], None).status.code(),
        Some(1)
    );
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "seeds = []\n").unwrap();
    let o = cvrlab(&["gen", "--config", bad.to_str().unwrap()], Some(dir.path()));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("seeds"));
    let zero = dir.path().join("zero.toml");
    std::fs::write(&zero, "[generator.targets]\nclick = 0.0\n").unwrap();
    let o = cvrlab(&["gen", "--config", zero.to_str().unwrap()], Some(dir.path()));
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gen_train_eval_report_flow() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("out");
    let config = dir.path().join("exp.toml");
    std::fs::write(&config, SMALL_CONFIG_TOML).unwrap();
    let cfg = config.to_str().unwrap();

    // nothing trained yet: a runtime failure naming the missing runs
    let o = cvrlab(&["report", "--config", cfg], Some(&root));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("base-seed3"));

    let o = cvrlab(&["gen", "--config", cfg], Some(&root));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(root.join("data/train.csv").exists());
    assert!(root.join("data/test.manifest").exists());

    for v in ["base", "hm3"] {
        let o = cvrlab(&["train", "--config", cfg, "--variant", v, "--seed", "3"], Some(&root));
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let ck = root.join(format!("runs/{v}-seed3/model.ckpt"));
        assert!(ck.exists());
        let o = cvrlab(
            &["eval", "--config", cfg, "--checkpoint", ck.to_str().unwrap()],
            Some(&root),
        );
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        assert!(stdout(&o).contains("CVR AUC"));
    }
    let o = cvrlab(&["eval", "--config", cfg, "--oracle"], Some(&root));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let o = cvrlab(&["report", "--config", cfg], Some(&root));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = stdout(&o);
    assert!(table.contains("HM3") && table.contains("BASE") && table.contains("oracle"));
    assert!(table.contains("± n/a"), "{table}");
    assert!(root.join("report.kv").exists());

    let o = cvrlab(
        &["eval", "--config", cfg, "--checkpoint", "/nonexistent/model.ckpt"],
        Some(&root),
    );
    assert_eq!(o.status.code(), Some(1));
}
