use std::path::PathBuf;
use std::process::{Command, Output};

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn cgc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cgc")).args(args).current_dir(root()).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn count_prints_the_gated_total() {
    let o = cgc(&["count", "--arch", "archs/resnet50.json", "--cgc"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("25.59M"), "{}", stdout(&o));
    let csv = cgc(&["count", "--arch", "archs/resnet110.json", "--stages", "res3", "--csv"]);
    assert!(stdout(&csv).starts_with("id,kind,stage,"));
}

#[test]
fn usage_errors_exit_with_two() {
    for args in [
        &["count"][..],
        &["count", "--arch", "archs/missing.json"],
        &["count", "--arch", "archs/resnet110.json", "--variant", "bogus"],
        &["count", "--arch", "archs/resnet110.json", "--stages", "res9"],
        &["train", "--config", "configs/smoke.cfg", "--set", "colour=blue"],
        &["frobnicate"],
    ] {
        let o = cgc(args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        let err = String::from_utf8_lossy(&o.stderr);
        assert_eq!(err.trim().lines().count(), 1, "{args:?}: {err}");
    }
}

#[test]
fn help_lists_flags() {
    let o = cgc(&["train", "--help"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for flag in ["--config", "--data", "--out", "--seed", "--epochs", "--set"] {
        assert!(text.contains(flag), "{flag}");
    }
    assert!(stdout(&cgc(&["--help"])).contains("analyze-gates"));
}

#[test]
fn train_writes_metrics_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = cgc(&["train", "--config", "configs/smoke.cfg", "--epochs", "1", "--set", "synth_train=64", "--out", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap(), stdout(&o));
    let ckpt = dir.path().join("model.ckpt");
    let stats = dir.path().join("stats.csv");
    let a = cgc(&["analyze-gates", "--ckpt", ckpt.to_str().unwrap(), "--out", stats.to_str().unwrap()]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert!(stdout(&a).starts_with("classes 4\nfrac_inter_gt_intra "));
    assert!(std::fs::read_to_string(stats).unwrap().contains("# summary"));
    let bad = cgc(&["analyze-gates", "--ckpt", ckpt.to_str().unwrap(), "--layer", "fc", "--out", "/dev/null"]);
    assert_eq!(bad.status.code(), Some(2));
}
