use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use nodulesat::io::read_checkpoint;

fn nodulesat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nodulesat"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn report_value(o: &Output, key: &str) -> f64 {
    stdout(o)
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")).map(|v| v.parse().unwrap()))
        .unwrap_or_else(|| panic!("no {key} in {}", stdout(o)))
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["synth", "--out", path(out)];
    args.extend_from_slice(extra);
    nodulesat(&args)
}

#[test]
fn synth_writes_requested_bags_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let flags = ["--bags", "2000", "--keys", "8", "--nmin", "2", "--nmax", "8", "--seed", "7"];
    let a = synth(&dir.path().join("a"), &flags);
    assert!(a.status.success(), "{a:?}");
    assert_eq!(report_value(&a, "bags"), 2000.0);
    assert!(report_value(&a, "positive_rate") > 0.0);
    let manifest = fs::read_to_string(dir.path().join("a/manifest.csv")).unwrap();
    let ids: std::collections::HashSet<&str> = manifest.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ids.len(), 2000);

    synth(&dir.path().join("b"), &flags);
    assert_eq!(fs::read(dir.path().join("a/manifest.csv")).unwrap(), fs::read(dir.path().join("b/manifest.csv")).unwrap());
}

#[test]
fn synth_refuses_non_empty_output_without_force() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("keep.txt"), "x").unwrap();
    let o = synth(dir.path(), &["--bags", "3", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--force"));
    let o = synth(dir.path(), &["--bags", "3", "--seed", "1", "--force"]);
    assert!(o.status.success());
}

#[test]
fn synth_rejects_empty_bag_range() {
    let dir = tempfile::tempdir().unwrap();
    let o = synth(&dir.path().join("x"), &["--nmin", "0", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!dir.path().join("x").exists());
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let p = dir.join("run.cfg");
    fs::write(&p, body).unwrap();
    p
}

fn log_losses(out: &Path) -> Vec<(usize, f64)> {
    fs::read_to_string(out.join("train_log.csv"))
        .unwrap()
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            assert_eq!(f.len(), 3, "{l}");
            (f[0].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect()
}

const FEATURE_RUN: &str = "task = synth-relational\nseed = 5\ndata.train = train\ndata.test = test\n\
model.sat.L = 1\nmodel.sat.H = 16\nmodel.sat.g = 4\noptim.lr = 3e-3\ntrain.batch_bags = 10\ntrain.epochs = 5\n";

fn feature_data(dir: &Path) {
    let small = ["--bags", "50", "--nmin", "2", "--nmax", "6", "--width", "16", "--mask", "0.2"];
    assert!(synth(&dir.join("train"), &[&small[..], &["--seed", "1"]].concat()).status.success());
    assert!(synth(&dir.join("test"), &[&small[..], &["--seed", "2"]].concat()).status.success());
}

#[test]
fn train_logs_epochs_and_smoothed_loss_does_not_increase() {
    let dir = tempfile::tempdir().unwrap();
    feature_data(dir.path());
    let cfg = write_config(dir.path(), FEATURE_RUN);
    let out = dir.path().join("run");
    let o = nodulesat(&["train", "--config", path(&cfg), "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = log_losses(&out);
    assert_eq!(log.iter().map(|e| e.0).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
    let smoothed: Vec<f64> = log.windows(2).map(|w| (w[0].1 + w[1].1) / 2.0).collect();
    assert!(smoothed.windows(2).all(|w| w[1] <= w[0]), "{log:?}");
    assert!(out.join("checkpoint.nsat").exists());
    assert!(out.join("predictions.csv").exists());

    // same flags, fresh directory: identical log
    let again = dir.path().join("again");
    nodulesat(&["train", "--config", path(&cfg), "--out", path(&again)]);
    assert_eq!(fs::read(out.join("train_log.csv")).unwrap(), fs::read(again.join("train_log.csv")).unwrap());

    let o = nodulesat(&[
        "eval",
        "--metric",
        "auc",
        "--predictions",
        path(&out.join("predictions.csv")),
        "--manifest",
        path(&dir.path().join("test/manifest.csv")),
    ]);
    assert!(o.status.success());
    assert!((0.0..=1.0).contains(&report_value(&o, "auc")));
}

#[test]
fn resume_continues_the_epoch_counter() {
    let dir = tempfile::tempdir().unwrap();
    feature_data(dir.path());
    let cfg = write_config(dir.path(), FEATURE_RUN);
    let straight = dir.path().join("straight");
    nodulesat(&["train", "--config", path(&cfg), "--out", path(&straight), "--epochs", "4"]);

    let out = dir.path().join("run");
    nodulesat(&["train", "--config", path(&cfg), "--out", path(&out), "--epochs", "2"]);
    let ckpt = out.join("checkpoint.nsat");
    let o = nodulesat(&["train", "--config", path(&cfg), "--out", path(&out), "--epochs", "4", "--resume", path(&ckpt)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(log_losses(&out), log_losses(&straight));
    assert_eq!(read_checkpoint(&ckpt).unwrap(), read_checkpoint(&straight.join("checkpoint.nsat")).unwrap());
}

#[test]
fn frozen_backbone_mode_leaves_backbone_weights_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let data = ["--bags", "6", "--nmin", "1", "--nmax", "3", "--payload", "voxel", "--edge", "8", "--seed", "3"];
    assert!(synth(&dir.path().join("train"), &data).status.success());
    let cfg = write_config(
        dir.path(),
        "task = fpr\nseed = 2\ndata.train = train\nmodel.backbone = tiny\nmodel.sat.L = 1\nmodel.sat.H = 8\n\
         model.sat.g = 4\ntrain.batch_bags = 3\ntrain.mode = end-to-end\n",
    );
    let out = dir.path().join("run");
    let o = nodulesat(&["train", "--config", path(&cfg), "--out", path(&out), "--epochs", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = out.join("checkpoint.nsat");
    let before = read_checkpoint(&ckpt).unwrap();
    let o = nodulesat(&[
        "train", "--config", path(&cfg), "--out", path(&out), "--epochs", "3", "--resume", path(&ckpt), "--mode",
        "frozen-backbone",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let after = read_checkpoint(&ckpt).unwrap();
    let pick = |entries: &[nodulesat::module::NamedArray], prefix: &str| {
        entries.iter().filter(|e| e.name.starts_with(prefix)).cloned().collect::<Vec<_>>()
    };
    assert!(!pick(&before, "backbone.").is_empty());
    assert_eq!(pick(&before, "backbone."), pick(&after, "backbone."));
    assert_ne!(pick(&before, "head."), pick(&after, "head."));
}

#[test]
fn divergent_training_aborts_with_the_step_index() {
    let dir = tempfile::tempdir().unwrap();
    feature_data(dir.path());
    let cfg = write_config(dir.path(), &FEATURE_RUN.replace("optim.lr = 3e-3", "optim.lr = 1e300"));
    let o = nodulesat(&["train", "--config", path(&cfg), "--out", path(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(3), "{o:?}");
    assert!(String::from_utf8_lossy(&o.stderr).contains("step "));
}

#[test]
fn train_requires_existing_paths_and_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "task = synth-relational\nseed = 1\ndata.train = missing\n");
    let o = nodulesat(&["train", "--config", path(&cfg), "--out", path(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(1));
    let cfg = write_config(dir.path(), "task = synth-relational\ndata.train = .\n");
    let o = nodulesat(&["train", "--config", path(&cfg), "--out", path(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(1));
}

fn eval_cpm(dir: &Path, rows: &str) -> Output {
    let p = dir.join("candidates.csv");
    fs::write(&p, format!("seriesuid,x_mm,y_mm,z_mm,score,truth,noduleid\n{rows}")).unwrap();
    nodulesat(&["eval", "--metric", "cpm", "--candidates", path(&p)])
}

#[test]
fn cpm_reports() {
    let dir = tempfile::tempdir().unwrap();
    let perfect = eval_cpm(dir.path(), "s1,0,0,0,0.9,1,a\ns2,0,0,0,0.8,1,b\ns2,0,0,0,0.1,0,\n");
    assert!(perfect.status.success());
    assert_eq!(report_value(&perfect, "cpm"), 1.0);

    // A at 0.9 is found with zero false positives, so the two lowest targets
    // already see sensitivity 0.5
    let worked = eval_cpm(
        dir.path(),
        "s1,0,0,0,0.9,1,A\ns1,0,0,0,0.8,0,\ns2,0,0,0,0.6,0,\ns2,0,0,0,0.4,1,B\ns1,0,0,0,0.3,0,\n",
    );
    assert!((report_value(&worked, "cpm") - 5.5 / 7.0).abs() < 1e-12);
    assert_eq!(report_value(&worked, "sensitivity@0.125"), 0.5);

    let none = eval_cpm(dir.path(), "s1,0,0,0,0.9,0,\n");
    assert_eq!(none.status.code(), Some(2));
}

#[test]
fn auc_reports_and_single_class_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("manifest.csv");
    let p = dir.path().join("predictions.csv");
    fs::write(&m, "bag_id,instance_ref,label\nb,0,1\nb,1,0\nb,2,1\nb,3,0\nb,4,?\n").unwrap();
    fs::write(&p, "bag_id,instance_index,probability\nb,0,0.9\nb,1,0.8\nb,2,0.7\nb,3,0.3\nb,4,0.99\n").unwrap();
    let o = nodulesat(&["eval", "--metric", "auc", "--predictions", path(&p), "--manifest", path(&m)]);
    assert!(o.status.success());
    assert_eq!(report_value(&o, "auc"), 0.75);
    assert_eq!(report_value(&o, "instances"), 4.0);

    fs::write(&m, "bag_id,instance_ref,label\nb,0,1\nb,1,1\nb,2,1\nb,3,1\nb,4,?\n").unwrap();
    let o = nodulesat(&["eval", "--metric", "auc", "--predictions", path(&p), "--manifest", path(&m)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("both classes"));
}

#[test]
fn verify_passes_and_detects_a_corrupted_shuffle() {
    let o = nodulesat(&["verify"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(!text.contains("FAIL"));
    for ratio in ["expected=4", "expected=16", "expected=32"] {
        assert!(text.lines().any(|l| l.starts_with("PASS param-ratio") && l.contains(ratio)));
    }

    let o = nodulesat(&["verify", "--inject-shuffle-fault"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).lines().any(|l| l.starts_with("FAIL equivariance")));
}

#[test]
fn gradcheck_runs_the_gradient_subset() {
    let o = nodulesat(&["gradcheck"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.lines().filter(|l| l.starts_with("PASS ")).all(|l| l.starts_with("PASS grad.")));
    assert!(!text.contains("equivariance"));
}

#[test]
fn unsupported_thread_count_is_a_validation_error() {
    let o = nodulesat(&["--threads", "4", "verify"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bench_reports_timings() {
    let o = nodulesat(&["bench", "--sizes", "4,8", "--repeats", "1"]);
    assert!(o.status.success());
    assert!(report_value(&o, "sat_fwd_bwd_ms@n=8") > 0.0);
}
