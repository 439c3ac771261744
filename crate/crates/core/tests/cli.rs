use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cea(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cea")).args(args).output().unwrap()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    fs::write(
        &path,
        format!(
            "[experiment]\nenv = \"gridworld\"\nagent = \"dqn\"\nseeds = [1]\nepisodes = 4\nout_dir = {:?}\nlearning_starts = 64\n\n[dqn]\nhidden = [16]\nbatch_size = 32\n\n[sta]\nhidden = [16]\ntrain_steps = 20\ncorpus_size = 300\n\n[cea]\naugment_period = 2\nbase_batch = 8\n",
            dir.join("default_out").to_str().unwrap()
        ),
    )
    .unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn sample_demo_emits_trace() {
    let out = cea(&["sample-demo", "--dim", "1", "--seed", "2"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("iter,entropy,c0_0,c1_0,c2_0"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 101);
    assert!(rows.windows(2).all(|w| w[1][1] >= w[0][1]));

    let two = cea(&["sample-demo", "--dim", "2", "--mode", "paper"]);
    assert!(two.status.success());
    assert!(String::from_utf8(two.stdout).unwrap().starts_with("iter,entropy,c0_0,c0_1,"));
    assert!(!cea(&["sample-demo", "--dim", "3"]).status.success());
}

#[test]
fn train_overrides_and_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out_dir = tmp.path().join("run");
    let out = cea(&["train", "--config", &cfg, "--seed-list", "7,8", "--cea", "off", "--per", "off", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8(out.stdout).unwrap().starts_with("backbone:"));
    for f in ["returns_7.csv", "returns_8.csv", "augment_log.csv", "sta_loss.csv", "priorities_dump.jsonl", "summary.json"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(out_dir.join("augment_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1);
    assert!(!tmp.path().join("default_out").exists());
}

#[test]
fn ablate_runs_every_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out_dir = tmp.path().join("abl");
    let out = cea(&["ablate", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 4);
    for d in ["backbone", "backbone_PER", "backbone_CEA", "backbone_CEA_PER"] {
        assert!(out_dir.join(d).join("summary.json").exists(), "{d}");
    }
    assert!(out_dir.join("ablation.json").exists());
}

#[test]
fn sta_pretrain_writes_checkpoint_and_losses() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = tmp.path().join("sta.bin");
    let losses = tmp.path().join("loss.csv");
    let cfg = write_config(tmp.path());
    let out = cea(&[
        "sta-pretrain", "--env", "gridworld", "--transitions", "300", "--config", &cfg,
        "--out", ckpt.to_str().unwrap(), "--loss-csv", losses.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let model = cea_core::sta::StaModel::load(&ckpt).unwrap();
    assert!(model.is_trained());
    assert_eq!(model.state_dim(), 4);
    let text = fs::read_to_string(losses).unwrap();
    assert_eq!(text.lines().next(), Some("step,recon,kl,total"));
    assert_eq!(text.lines().count(), 1 + 20);
}

#[test]
fn failures_exit_non_zero_with_message() {
    let out = cea(&["train", "--config", "/nonexistent/cfg.toml"]);
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error:"));

    let out = cea(&["sta-pretrain", "--env", "atari", "--out", "/tmp/never.bin"]);
    assert!(!out.status.success());

    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[experiment]\nenv = \"gridworld\"\nagent = \"ddpg\"\n").unwrap();
    let out = cea(&["train", "--config", bad.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().contains("configuration error"));
}
