use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use aclrec_core::simulation::{planted_ratings, PlantedConfig};

struct Workspace {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    /// A directory with `ratings.dat` ("::"-separated) and `run.toml`.
    fn new(extra_config: &str) -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let log = planted_ratings(&PlantedConfig {
            n_users: 60,
            n_items: 150,
            ratings_per_user: 20,
            seed: 5,
            ..PlantedConfig::default()
        })
        .unwrap();
        let mut text = String::new();
        for it in &log.interactions {
            text.push_str(&format!(
                "{}::{}::{}::{}\n",
                log.user_ids[it.user], log.item_ids[it.item], it.value, it.order
            ));
        }
        fs::write(root.join("ratings.dat"), text).unwrap();
        let config = format!(
            "seed = 5\n[data]\npath = \"ratings.dat\"\nseparator = \"::\"\nmin_n = 5\n\
             [sim]\nepochs = 3\n[train]\ndim = 4\nmax_epochs = 2\n{extra_config}"
        );
        fs::write(root.join("run.toml"), config).unwrap();
        Workspace { _tmp: tmp, root }
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_aclrec"))
            .args(args)
            .current_dir(&self.root)
            .env("ACLREC_LOG", "error")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "aclrec {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

fn cmd<'a>(out: &'a str, sub: &'a str) -> [&'a str; 5] {
    ["--config", "run.toml", "--out", out, sub]
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn prepare_writes_split_and_is_reproducible() {
    let ws = Workspace::new("");
    ws.ok(&cmd("a", "prepare"));
    ws.ok(&cmd("b", "prepare"));
    for f in [
        "train.tsv",
        "val.tsv",
        "test.tsv",
        "remap.tsv",
        "summary.json",
    ] {
        assert_eq!(
            read(&ws.path(&format!("a/prepared/{f}"))),
            read(&ws.path(&format!("b/prepared/{f}")))
        );
    }
    let summary: serde_json::Value =
        serde_json::from_slice(&read(&ws.path("a/prepared/summary.json"))).unwrap();
    assert_eq!(summary["n_users"], 60);
    assert!(ws.path("a/prepared/resolved_config.toml").exists());
    assert!(!ws.path("a/.aclrec.lock").exists());
}

#[test]
fn min_n_filter_drops_short_histories() {
    let ws = Workspace::new("");
    let out = ws.run(&["--config", "run.toml", "--out", "a", "prepare"]);
    assert!(out.status.success());
    let strict = Command::new(env!("CARGO_BIN_EXE_aclrec"))
        .args(cmd("b", "prepare"))
        .current_dir(&ws.root)
        .env("ACLREC_DATA_MIN_N", "1000")
        .env("ACLREC_DATA_MAX_N", "2000")
        .output()
        .unwrap();
    assert_eq!(
        strict.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&strict.stderr)
    );
}

#[test]
fn simulate_requires_prepared_data() {
    let ws = Workspace::new("");
    let out = ws.run(&cmd("a", "simulate"));
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("aclrec prepare"), "{stderr}");
}

#[test]
fn simulate_replicates_get_their_own_directories() {
    let ws = Workspace::new("");
    ws.ok(&cmd("a", "prepare"));
    ws.ok(&[
        "--config",
        "run.toml",
        "--out",
        "a",
        "simulate",
        "--replicates",
        "2",
    ]);
    for r in ["rep_00", "rep_01"] {
        for f in [
            "clicks.tsv",
            "p_exposure.tsv",
            "p_relevance.tsv",
            "manifest.json",
            "prepared/train.tsv",
        ] {
            assert!(ws.path(&format!("a/sim/{r}/{f}")).exists(), "{r}/{f}");
        }
    }
    assert_ne!(
        read(&ws.path("a/sim/rep_00/clicks.tsv")),
        read(&ws.path("a/sim/rep_01/clicks.tsv"))
    );
}

#[test]
fn zero_shift_without_noise_keeps_stage_one_exposure() {
    let ws = Workspace::new("");
    ws.ok(&cmd("a", "prepare"));
    let out = Command::new(env!("CARGO_BIN_EXE_aclrec"))
        .args(cmd("a", "simulate"))
        .current_dir(&ws.root)
        .env("ACLREC_SIM_KAPPA", "0")
        .env("ACLREC_SIM_SIGMA2", "0")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let manifest: serde_json::Value =
        serde_json::from_slice(&read(&ws.path("a/sim/manifest.json"))).unwrap();
    assert_eq!(manifest["stage2_equals_stage1"], true);
    assert_eq!(
        read(&ws.path("a/sim/p_exposure.tsv")),
        read(&ws.path("a/sim/stage1_exposure.tsv"))
    );
}

#[test]
fn acl_training_writes_both_checkpoints_and_a_log() {
    let ws = Workspace::new("mode = \"acl\"\nf_kind = \"GMF\"\ng_kind = \"GMF\"\n");
    ws.ok(&cmd("a", "prepare"));
    ws.ok(&cmd("a", "simulate"));
    ws.ok(&cmd("a", "train"));
    let g: serde_json::Value = serde_json::from_slice(&read(&ws.path("a/train/g.json"))).unwrap();
    assert!(g["head"].is_object());
    let f: serde_json::Value = serde_json::from_slice(&read(&ws.path("a/train/f.json"))).unwrap();
    assert!(f["head"].is_null());
    let log = String::from_utf8(read(&ws.path("a/train/train_log.jsonl"))).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(rec["objective"].is_number());
        assert!(rec["g_val_hit10"].is_number());
    }
}

#[test]
fn robust_weighting_needs_a_propensity_model() {
    let ws = Workspace::new("mode = \"erm\"\n[eval]\nweightings = [\"Robust\"]\n");
    ws.ok(&cmd("a", "prepare"));
    ws.ok(&cmd("a", "simulate"));
    ws.ok(&cmd("a", "train"));
    let out = ws.run(&cmd("a", "evaluate"));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Robust"));
}

#[test]
fn oracle_weighting_on_explicit_data_is_a_data_error() {
    let ws = Workspace::new("mode = \"erm\"\n[eval]\nweightings = [\"OracleUnbiased\"]\n");
    ws.ok(&cmd("a", "prepare"));
    ws.ok(&cmd("a", "train"));
    let out = ws.run(&cmd("a", "evaluate"));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn report_over_one_run_leaves_std_empty() {
    let ws = Workspace::new("mode = \"erm\"\n");
    ws.ok(&cmd("a", "prepare"));
    ws.ok(&cmd("a", "simulate"));
    ws.ok(&cmd("a", "train"));
    ws.ok(&cmd("a", "evaluate"));
    ws.ok(&["--out", "rep", "report", "a"]);
    let csv = String::from_utf8(read(&ws.path("rep/report.csv"))).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    let std_col = header.iter().position(|h| *h == "ndcg@10_std").unwrap();
    let mean_col = header.iter().position(|h| *h == "ndcg@10_mean").unwrap();
    assert_eq!(row[std_col], "");
    assert!(row[mean_col].parse::<f64>().is_ok());
    assert_eq!(row[0], "erm");
}

#[test]
fn report_refuses_mixed_protocols() {
    let ws = Workspace::new("mode = \"erm\"\n");
    for (run, cutoffs) in [("a", "[10]"), ("b", "[5, 10]")] {
        ws.ok(&cmd(run, "prepare"));
        ws.ok(&cmd(run, "train"));
        let out = Command::new(env!("CARGO_BIN_EXE_aclrec"))
            .args(cmd(run, "evaluate"))
            .current_dir(&ws.root)
            .env("ACLREC_EVAL_CUTOFFS", cutoffs)
            .output()
            .unwrap();
        assert!(out.status.success());
    }
    let out = ws.run(&["--out", "rep", "report", "a", "b"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cutoffs"));
}

#[test]
fn unknown_config_key_exits_with_config_error() {
    let ws = Workspace::new("learning_rate = 0.1\n");
    let out = ws.run(&cmd("a", "prepare"));
    assert_eq!(out.status.code(), Some(1));
    assert!(!ws.path("a").exists());
}

#[test]
fn locked_run_directory_is_refused() {
    let ws = Workspace::new("");
    fs::create_dir_all(ws.path("a")).unwrap();
    fs::write(ws.path("a/.aclrec.lock"), "1").unwrap();
    let out = ws.run(&cmd("a", "prepare"));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));
    assert!(ws.path("a/.aclrec.lock").exists());
}

#[test]
fn ps_training_logs_both_stages() {
    let ws = Workspace::new("mode = \"ps\"\n");
    ws.ok(&cmd("a", "prepare"));
    ws.ok(&cmd("a", "simulate"));
    ws.ok(&cmd("a", "train"));
    assert!(ws.path("a/train/stage1_log.jsonl").exists());
    assert!(ws.path("a/train/g.json").exists());
    let state: serde_json::Value =
        serde_json::from_slice(&read(&ws.path("a/train/state.json"))).unwrap();
    assert!(state["stop_reason"]["reason"].is_string());
}
