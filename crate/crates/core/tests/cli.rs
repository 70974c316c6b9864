use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn elimipl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_elimipl")).args(args).output().expect("spawn elimipl")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_dataset(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("small.jsonl");
    let out = elimipl(&["generate", "--m", "40", "--min-bag", "4", "--max-bag", "8", "--seed", "2", "--out", p(&data)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    data
}

#[test]
fn version_mentions_formats() {
    let out = elimipl(&["--version"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("mipl-v1") && text.contains("elimipl-ckpt-v1"), "{text}");
}

#[test]
fn generate_writes_dataset_and_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let prov = dir.path().join("small.provenance.jsonl");
    assert!(prov.exists());
    let ds = elimipl::load_dataset(&data).unwrap();
    assert_eq!((ds.len(), ds.k(), ds.d(), ds.r()), (40, 5, 10, Some(1)));
    assert_eq!(fs::read_to_string(&prov).unwrap().lines().count(), 40);

    // same seed, same bytes
    let again = dir.path().join("again.jsonl");
    elimipl(&["generate", "--m", "40", "--min-bag", "4", "--max-bag", "8", "--seed", "2", "--out", p(&again)]);
    assert_eq!(fs::read(&data).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn train_eval_export_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let ckpt = dir.path().join("m.ckpt");
    let log = dir.path().join("log.csv");
    let out = elimipl(&[
        "train", "--data", p(&data), "--epochs", "4", "--batch-size", "8", "--embed-dim", "8", "--out", p(&ckpt), "--log",
        p(&log),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let log_text = fs::read_to_string(&log).unwrap();
    let mut lines = log_text.lines();
    assert_eq!(lines.next().unwrap(), "epoch,lr,loss_total,loss_ma,loss_sp,loss_in,train_acc,test_acc");
    assert_eq!(lines.count(), 4);

    let out = elimipl(&["eval", "--data", p(&data), "--ckpt", p(&ckpt)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    let values: Vec<f64> = text.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(values.len(), 4);
    assert!((0.0..=1.0).contains(&values[0]));

    let att = dir.path().join("att.csv");
    let prov = dir.path().join("small.provenance.jsonl");
    let out = elimipl(&["export-attention", "--data", p(&data), "--ckpt", p(&ckpt), "--provenance", p(&prov), "--out", p(&att)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let att_text = fs::read_to_string(&att).unwrap();
    assert!(att_text.starts_with("bag_id,instance_index,score,provenance_class\n"));
    let ds = elimipl::load_dataset(&data).unwrap();
    let total: usize = ds.bags().iter().map(|b| b.num_instances()).sum();
    assert_eq!(att_text.lines().count(), total + 1);
}

#[test]
fn experiment_writes_results_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let results = dir.path().join("results.csv");
    let summary = dir.path().join("summary.csv");
    let out = elimipl(&[
        "ablate", "--data", p(&data), "--variants", "cli,ce", "--seeds", "2", "--epochs", "2", "--embed-dim", "4",
        "--results", p(&results), "--summary", p(&summary),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let r = fs::read_to_string(&results).unwrap();
    assert!(r.starts_with("dataset,variant,r,seed,split_seed,test_acc,mean_prob_true,mean_prob_false_cand,mean_prob_noncand\n"));
    assert_eq!(r.lines().count(), 1 + 2 * 2);
    let s = fs::read_to_string(&summary).unwrap();
    assert_eq!(s.lines().count(), 1 + 2 * 2);
    assert!(s.lines().any(|l| l.starts_with("synth,ce,1,std,2,")));
}

#[test]
fn config_file_supplies_flags_and_cli_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# two quick epochs\nepochs = 2\nembed-dim = 4\nbatch-size=8\n").unwrap();
    let log = dir.path().join("log.csv");
    let out = elimipl(&["train", "--config", p(&cfg), "--data", p(&data), "--epochs", "3", "--log", p(&log)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(&log).unwrap().lines().count(), 1 + 3);

    fs::write(&cfg, "no-such-flag = 1\n").unwrap();
    let out = elimipl(&["train", "--config", p(&cfg), "--data", p(&data)]);
    assert_eq!(code(&out), 1);
}

#[test]
fn gradcheck_passes() {
    let out = elimipl(&["gradcheck", "--cases", "5"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("max relative error"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    // unknown subcommand and bad values are usage errors
    assert_eq!(code(&elimipl(&["frobnicate"])), 1);
    assert_eq!(code(&elimipl(&["train", "--data", "x", "--variant", "nope"])), 1);
    // missing dataset
    let missing = dir.path().join("missing.jsonl");
    assert_eq!(code(&elimipl(&["train", "--data", p(&missing)])), 1);
    // malformed dataset
    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "{\"format\":\"mipl-v1\",\"k\":3,\"d\":2}\n{\"bag_id\":\"a\"}\n").unwrap();
    let out = elimipl(&["train", "--data", p(&bad)]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.jsonl:2:"), "{}", String::from_utf8_lossy(&out.stderr));
    // r outside 1..=k-2
    assert_eq!(code(&elimipl(&["generate", "--r", "4", "--out", p(&dir.path().join("g.jsonl"))])), 1);
    // divergence is a runtime failure
    let data = small_dataset(dir.path());
    let out = elimipl(&["train", "--data", p(&data), "--epochs", "2", "--embed-dim", "4", "--lr", "1e300"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    // unwritable output
    let out = elimipl(&[
        "train", "--data", p(&data), "--epochs", "1", "--embed-dim", "4", "--out", p(&dir.path().join("no/such/dir/m.ckpt")),
    ]);
    assert_eq!(code(&out), 2);
}
