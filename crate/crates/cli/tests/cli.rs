use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mitobench::backbone::BackboneSpec;
use mitobench::bench::{BenchConfig, ResultsStore};
use mitobench::ingest::DatasetManifest;
use mitobench::splits::SplitPlan;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mitobench"));
    c.env_remove("MITOBENCH_IMAGE_ROOT");
    c
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    if std::env::var_os("CLI_TEST_VERBOSE").is_some() {
        eprintln!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    /// Synthetic images for `domains`, plus a config registering a tiny backbone.
    fn new(domains: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let synth = root.join("synth.json");
        std::fs::write(
            &synth,
            r#"{"image_size": 192, "figures_per_image": 3, "hard_negatives_per_image": 3,
                "blob_radius": 8.0, "min_spacing": 36.0, "name": "tiny"}"#,
        )
        .unwrap();
        let out = run(bin().args(["synth", "--config"]).arg(&synth).arg("--out").arg(root.join("images")).args([
            "--domains",
            domains,
            "--cases-per-domain",
            "5",
        ]));
        assert_eq!(code(&out), 0, "{}", stderr(&out));

        let mut cfg = BenchConfig::default();
        let mut spec = BackboneSpec::toy("tiny", 1, 16, 2, 32, 4);
        spec.input_size = 32;
        cfg.backbones.push(spec);
        cfg.train.batch_size = 4;
        cfg.train.epoch_length = 8;
        cfg.train.pseudo_epochs = 2;
        cfg.train.max_lr = 1e-3;
        cfg.train.random_bank = 8;
        cfg.lora.rank = 2;
        cfg.lora.alpha = 2.0;
        std::fs::write(root.join("config.json"), serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        Workspace { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn manifest(&self) -> PathBuf {
        self.path("images/manifest.jsonl")
    }
}

fn store_len(path: &Path) -> usize {
    ResultsStore::open(path).unwrap().len()
}

#[test]
fn split_train_eval_report_round_trip() {
    let ws = Workspace::new("A");
    let plan = ws.path("plan.jsonl");
    let out = run(bin().args(["split", "--kind", "scaling", "--seed", "3", "--manifest"]).arg(ws.manifest()).arg("--out").arg(&plan));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("20 sessions"));
    let parsed = SplitPlan::load(&plan).unwrap();
    assert_eq!(parsed.seed, 3);

    let store = ws.path("results.jsonl");
    let train = |fold: &str| {
        run(bin()
            .args(["train", "--model", "tiny", "--mode", "lora", "--fold", fold, "--fraction", "1"])
            .arg("--manifest")
            .arg(ws.manifest())
            .arg("--plan")
            .arg(&plan)
            .arg("--config")
            .arg(ws.path("config.json"))
            .arg("--store")
            .arg(&store))
    };
    let out = train("2");
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(store_len(&store), 1);
    let ckpt = stdout(&out).lines().find_map(|l| l.strip_prefix("checkpoint ")).map(PathBuf::from).unwrap();
    assert!(ckpt.exists());
    assert!(ckpt.with_extension("").with_extension("trace.jsonl").exists() || ckpt.parent().unwrap().read_dir().unwrap().count() == 2);
    let again = train("2");
    assert_eq!(code(&again), 0);
    assert!(stdout(&again).contains("already complete"));
    assert_eq!(store_len(&store), 1);

    // Test manifest restricted to the plan's fixed test cases.
    let mut test = DatasetManifest::load(ws.manifest()).unwrap();
    test.records.retain(|r| parsed.test_cases.contains(&r.case_id));
    let test_path = ws.path("test.jsonl");
    test.save(&test_path).unwrap();
    let out = run(bin()
        .arg("eval")
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--test")
        .arg(&test_path)
        .arg("--store")
        .arg(&store)
        .arg("--config")
        .arg(ws.path("config.json")));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let eval: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let records = ResultsStore::open(&store).unwrap();
    assert_eq!(records.len(), 2);
    // Evaluating the checkpoint reproduces the session's own test metrics.
    assert_eq!(eval["auroc"].as_f64(), records.records()[0].eval.auroc);

    let report_dir = ws.path("report");
    let out = run(bin().args(["report", "--format", "csv"]).arg("--store").arg(&store).arg("--out").arg(&report_dir));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(report_dir.join("results_full_data.csv").exists());
    assert!(!report_dir.join("report.md").exists());
}

#[test]
fn sweeps_resume_and_partial_failures() {
    let ws = Workspace::new("A,B");
    let store = ws.path("results.jsonl");
    let scaling = |env_root: Option<&Path>, manifest: &Path, store: &Path| {
        let mut c = bin();
        c.args(["scaling", "--models", "tiny", "--modes", "probe"])
            .arg("--manifest")
            .arg(manifest)
            .arg("--config")
            .arg(ws.path("config.json"))
            .arg("--store")
            .arg(store);
        if let Some(r) = env_root {
            c.env("MITOBENCH_IMAGE_ROOT", r);
        }
        run(&mut c)
    };
    let out = scaling(None, &ws.manifest(), &store);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).starts_with("20 new records"), "{}", stdout(&out));
    assert_eq!(store_len(&store), 20);
    let out = scaling(None, &ws.manifest(), &store);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).starts_with("0 new records"), "{}", stdout(&out));

    // A manifest without an image root only works through the environment variable.
    let mut bare = DatasetManifest::load(ws.manifest()).unwrap();
    bare.image_root = None;
    let bare_path = ws.path("bare.jsonl");
    bare.save(&bare_path).unwrap();
    let elsewhere = ws.path("other.jsonl");
    let out = scaling(Some(&ws.path("images")), &bare_path, &elsewhere);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(store_len(&elsewhere), 20);
    let broken = ws.path("broken.jsonl");
    let out = scaling(None, &bare_path, &broken);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("failed"));

    let cross = ws.path("cross.jsonl");
    let out = run(bin()
        .args(["crossdomain", "--models", "tiny", "--modes", "lora"])
        .arg("--manifest")
        .arg(ws.manifest())
        .arg("--config")
        .arg(ws.path("config.json"))
        .arg("--store")
        .arg(&cross));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(store_len(&cross), 20);

    let report_dir = ws.path("report");
    let out = run(bin().arg("report").arg("--store").arg(&cross).arg("--out").arg(&report_dir));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(report_dir.join("report.md").exists());
    assert!(report_dir.join("crossdomain_matrix.csv").exists());
}

#[test]
fn cross_domain_plans_and_single_session() {
    let ws = Workspace::new("A,B,C");
    let plans = ws.path("plans");
    let out = run(bin().args(["split", "--kind", "crossdomain"]).arg("--manifest").arg(ws.manifest()).arg("--out").arg(&plans));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(std::fs::read_dir(&plans).unwrap().count(), 3);

    let store = ws.path("results.jsonl");
    let out = run(bin()
        .args(["train", "--model", "tiny", "--mode", "probe", "--domain", "B", "--fold", "4"])
        .arg("--manifest")
        .arg(ws.manifest())
        .arg("--plan")
        .arg(&plans)
        .arg("--config")
        .arg(ws.path("config.json"))
        .arg("--store")
        .arg(&store));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let records = ResultsStore::open(&store).unwrap();
    assert_eq!(records.len(), 3);
    assert!(records.records().iter().all(|r| r.train_domain.as_deref() == Some("B") && r.fold_index == 4));
}

#[test]
fn validation_errors_exit_with_2() {
    let ws = Workspace::new("A");
    let store = ws.path("results.jsonl");
    let sweep = |models: &str, modes: &str, config: &Path| {
        run(bin()
            .args(["scaling", "--models", models, "--modes", modes])
            .arg("--manifest")
            .arg(ws.manifest())
            .arg("--config")
            .arg(config)
            .arg("--store")
            .arg(&store))
    };
    let cfg = ws.path("config.json");
    assert_eq!(code(&sweep("no-such-model", "probe", &cfg)), 2);
    assert_eq!(code(&sweep("tiny", "bogus", &cfg)), 2);

    let bad = ws.path("bad.toml");
    std::fs::write(&bad, "[train]\nmax_lr = -1.0\n").unwrap();
    let out = sweep("tiny", "probe", &bad);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    std::fs::write(&bad, "[train]\nno_such_key = 1\n").unwrap();
    assert_eq!(code(&sweep("tiny", "probe", &bad)), 2);

    let out = run(bin().arg("report").arg("--store").arg(ws.path("empty.jsonl")).arg("--out").arg(ws.path("r")));
    assert_eq!(code(&out), 2);
    assert!(!ws.path("r").exists());

    let out = run(bin().args(["split", "--kind", "crossdomain"]).arg("--manifest").arg(ws.manifest()).arg("--out").arg(ws.path("p")));
    assert_eq!(code(&out), 2, "single-domain manifest: {}", stderr(&out));
    assert_eq!(store_len(&store), 0);
}

#[test]
fn import_reports_counts_and_published_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("a.csv");
    std::fs::write(&csv, "slide,x,y,label,w,h\ns1,10,10,mitosis,100,100\ns1,20,20,imposter,100,100\ns2,500,5,mitosis,100,100\n")
        .unwrap();
    let mapping = dir.path().join("map.toml");
    std::fs::write(
        &mapping,
        "format = \"csv\"\ncase_id = \"slide\"\nimage_ref = \"slide\"\nx = \"x\"\ny = \"y\"\nlabel = \"label\"\nwidth = \"w\"\nheight = \"h\"\n",
    )
    .unwrap();
    let out_path = dir.path().join("m.jsonl");
    let out = run(bin()
        .arg("import")
        .arg("--source")
        .arg(&csv)
        .arg("--mapping")
        .arg(&mapping)
        .arg("--out")
        .arg(&out_path)
        .args(["--published", "CCMCT"]));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report["totals"]["mitotic_figure"], 1);
    assert_eq!(report["quarantined"].as_array().unwrap().len(), 1);
    assert!(stderr(&out).contains("44880 published"));
    assert_eq!(DatasetManifest::load(&out_path).unwrap().records.len(), 2);

    std::fs::write(&mapping, "format = \"xml\"\n").unwrap();
    let out = run(bin().arg("import").arg("--source").arg(&csv).arg("--mapping").arg(&mapping).arg("--out").arg(&out_path));
    assert_eq!(code(&out), 2);
}
