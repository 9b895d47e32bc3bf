use std::path::Path;
use std::process::{Command, Output};

fn mmfs(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmfs"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const SMALL: &[&str] = &["--data", "data", "--dim", "8", "--eval-episodes", "2"];

fn gen(dir: &Path) {
    ok(&mmfs(
        &[
            "gen-data",
            "--out",
            "data",
            "--num-classes",
            "4",
            "--image-size",
            "32",
            "--samples-per-class",
            "6",
            "--dim",
            "8",
        ],
        dir,
    ));
}

fn train(dir: &Path, extra: &[&str]) {
    let mut args = vec!["train"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--epochs", "1", "--episodes-per-epoch", "4", "--lr", "1e-3", "--out", "ck.json"]);
    args.extend_from_slice(extra);
    ok(&mmfs(&args, dir));
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn train_then_eval_on_generated_data() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path());
    assert!(dir.path().join("data/manifest.json").exists());
    train(dir.path(), &[]);
    let ck = json(&dir.path().join("ck.json"));
    assert_eq!(ck["format"], "mmfs-checkpoint");
    assert_eq!(ck["epoch"], 1);

    let mut args = vec!["eval", "--checkpoint", "ck.json", "--out", "r1.json"];
    args.extend_from_slice(SMALL);
    let stdout = ok(&mmfs(&args, dir.path()));
    assert!(stdout.contains("mIoU"));
    args[4] = "r2.json";
    ok(&mmfs(&args, dir.path()));
    let (r1, r2) = (json(&dir.path().join("r1.json")), json(&dir.path().join("r2.json")));
    assert_eq!(r1, r2);
    // fold 0 of four classes holds out class 1
    let ids: Vec<u64> = r1["classes"].as_array().unwrap().iter().map(|c| c["class_id"].as_u64().unwrap()).collect();
    assert_eq!(ids, vec![1]);
    assert_eq!(r1["episodes"], 2);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path());
    std::fs::write(
        dir.path().join("run.toml"),
        "fold = 1\nshots = 2\n[pipeline]\nlambda = 0.5\n[optim]\nepochs = 3\n",
    )
    .unwrap();
    train(dir.path(), &["--config", "run.toml", "--fold", "2"]);
    let ck = json(&dir.path().join("ck.json"));
    assert_eq!(ck["config"]["fold"], 2);
    assert_eq!(ck["config"]["shots"], 2);
    assert_eq!(ck["config"]["pipeline"]["lambda"], 0.5);
    assert_eq!(ck["config"]["optim"]["epochs"], 1);
}

#[test]
fn ablate_and_dump_priors() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path());
    train(dir.path(), &[]);
    let mut args = vec!["ablate", "--checkpoint", "ck.json", "--out", "abl"];
    args.extend_from_slice(SMALL);
    let table = ok(&mmfs(&args, dir.path()));
    assert!(table.contains("Text + Audio") && table.contains("Semantic only"));
    let mods = json(&dir.path().join("abl/modalities.json"));
    let paths = json(&dir.path().join("abl/paths.json"));
    assert_eq!(mods["runs"].as_array().unwrap().len(), 7);
    assert_eq!(paths["runs"].as_array().unwrap().len(), 3);
    assert_eq!(mods["runs"][0]["report"], paths["runs"][0]["report"]);
    assert!(dir.path().join("abl/table.txt").exists());

    let mut args = vec!["dump-priors", "--checkpoint", "ck.json", "--out", "priors"];
    args.extend_from_slice(SMALL);
    ok(&mmfs(&args, dir.path()));
    for f in ["prior_visual", "prior_text", "prior_audio", "mask_init", "mask_pred", "target", "query"] {
        assert!(dir.path().join(format!("priors/{f}.png")).exists(), "{f}");
    }
}

#[test]
fn zero_shot_eval_without_visual() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path());
    train(dir.path(), &[]);
    let mut args = vec!["eval", "--checkpoint", "ck.json", "--out", "zs.json", "--shots", "0", "--drop-visual"];
    args.extend_from_slice(SMALL);
    ok(&mmfs(&args, dir.path()));
    let r = json(&dir.path().join("zs.json"));
    assert_eq!(r["shots"], 0);
    assert_eq!(r["modalities"]["visual"], false);
    assert!(r["miou"].as_f64().unwrap().is_finite());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = mmfs(&["train", "--lambda", "2", "--out", "x.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = mmfs(&["train", "--drop-visual", "--drop-text", "--drop-audio"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = mmfs(&["train", "--no-semantic", "--no-geometric"], dir.path());
    assert_eq!(out.status.code(), Some(2));

    gen(dir.path());
    let mut args = vec!["train"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--epochs", "1", "--episodes-per-epoch", "8", "--lr", "1e300"]);
    let out = mmfs(&args, dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("episode seed"));

    train(dir.path(), &[]);
    let mut args = vec!["eval", "--checkpoint", "ck.json", "--stride", "8"];
    args.extend_from_slice(SMALL);
    let out = mmfs(&args, dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("incompatible checkpoint"));
}
