use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = r#"{
  "seed": 4,
  "data.train_scenes": 32,
  "data.dev_scenes": 8,
  "data.test_scenes": 16,
  "data.parallel_pairs": 32,
  "train.pretrain.steps": 6,
  "train.pretrain.batch_size": 4,
  "train.pretrain.warmup_steps": 2,
  "train.finetune.steps": 3,
  "train.finetune.batch_size": 4,
  "train.finetune.warmup_steps": 1,
  "train.checkpoint_every": 2,
  "eval.top_k": 4
}"#;

fn cclm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cclm"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = cclm(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("config.json"), SMALL).unwrap();
        let f = Self { dir };
        ok(&[
            "gen-data",
            "--config",
            p(&f.config()),
            "--out",
            p(&f.corpus()),
        ]);
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self) -> PathBuf {
        self.path("config.json")
    }

    fn corpus(&self) -> PathBuf {
        self.path("corpus")
    }

    fn train(&self, out: &str, extra: &[&str]) -> String {
        let (out, config, corpus) = (self.path(out), self.config(), self.corpus());
        let mut args = vec![
            "train",
            "--config",
            p(&config),
            "--corpus",
            p(&corpus),
            "--out",
            p(&out),
        ];
        args.extend_from_slice(extra);
        ok(&args)
    }
}

fn digest_line(stdout: &str) -> String {
    stdout
        .lines()
        .find(|l| l.starts_with("checkpoint "))
        .unwrap()
        .rsplit(' ')
        .next()
        .unwrap()
        .to_string()
}

#[test]
fn gen_data_is_reproducible_and_creates_directories() {
    let f = Fixture::new();
    let nested = f.path("a/b/corpus");
    let again = ok(&["gen-data", "--config", p(&f.config()), "--out", p(&nested)]);
    let first = fs::read_to_string(f.corpus().join("manifest.json")).unwrap();
    assert_eq!(
        first,
        fs::read_to_string(nested.join("manifest.json")).unwrap()
    );
    assert!(again.starts_with("corpus digest "));
    assert!(nested.join("config.resolved.json").is_file());
}

#[test]
fn malformed_config_names_the_line() {
    let f = Fixture::new();
    let bad = f.path("bad.json");
    fs::write(
        &bad,
        "{\n  \"seed\": 1,\n  \"train.pretrain.stepz\": 3\n}\n",
    )
    .unwrap();
    let out = cclm(&["gen-data", "--config", p(&bad), "--out", p(&f.path("x"))]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));
    fs::write(&bad, "{\n  \"seed\": 1\n  \"eval.top_k\": 2\n}\n").unwrap();
    let out = cclm(&["gen-data", "--config", p(&bad), "--out", p(&f.path("x"))]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));
}

#[test]
fn training_is_deterministic_and_resumable() {
    let f = Fixture::new();
    let a = f.train("a", &[]);
    let b = f.train("b", &[]);
    let log = |d: &str| fs::read_to_string(f.path(d).join("loss_log.tsv")).unwrap();
    assert_eq!(log("a"), log("b"));
    assert_eq!(digest_line(&a), digest_line(&b));
    assert_eq!(log("a").lines().count(), 1 + 9);
    assert!(f.path("a/config.resolved.json").is_file());

    let cut = f.train("c", &["--stop-after", "5"]);
    assert!(cut.starts_with("stopped after 5 steps"));
    assert_eq!(log("c").lines().count(), 1 + 5);
    let resumed = f.train("c", &["--resume"]);
    assert_eq!(log("a"), log("c"));
    assert_eq!(digest_line(&a), digest_line(&resumed));
}

#[test]
fn ablation_flag_selects_the_variant() {
    let f = Fixture::new();
    let out = f.train("np", &["--ablation", "w/o-parallel"]);
    assert!(out.contains(", 0 translation batches"), "{out}");
    let resolved = fs::read_to_string(f.path("np/config.resolved.json")).unwrap();
    assert!(resolved.contains("\"train.ablation\": \"w/o-parallel\""));
    let bad = cclm(&[
        "train",
        "--corpus",
        p(&f.corpus()),
        "--out",
        p(&f.path("z")),
        "--ablation",
        "w/o-images",
    ]);
    assert!(!bad.status.success());
}

#[test]
fn corpus_digest_mismatch_refuses_to_train() {
    let f = Fixture::new();
    let other = f.path("other.json");
    fs::write(&other, SMALL.replace("\"seed\": 4", "\"seed\": 5")).unwrap();
    let out = cclm(&[
        "train",
        "--config",
        p(&other),
        "--corpus",
        p(&f.corpus()),
        "--out",
        p(&f.path("r")),
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("digest"), "{}", stderr(&out));
    assert!(!f.path("r/loss_log.tsv").exists());
}

#[test]
fn eval_and_export() {
    let f = Fixture::new();
    f.train("run", &[]);
    let run = f.path("run");
    let (corpus, config) = (f.corpus(), f.config());
    let eval = |out: &str, extra: &[&str]| {
        let out = f.path(out);
        let mut args = vec![
            "eval",
            "--checkpoint",
            p(&run),
            "--corpus",
            p(&corpus),
            "--out",
            p(&out),
            "--config",
            p(&config),
        ];
        args.extend_from_slice(extra);
        let table = ok(&args);
        (table, fs::read_to_string(out).unwrap())
    };
    let (table, first) = eval("r1.json", &[]);
    let (_, second) = eval("r2.json", &[]);
    assert_eq!(first, second);
    assert!(table.contains("M=16, top_k=4"));
    let report: serde_json::Value = serde_json::from_str(&first).unwrap();
    assert_eq!(report["languages"].as_array().unwrap().len(), 3);
    assert_eq!(report["loss_curve"].as_array().unwrap().len(), 9);
    for l in report["languages"].as_array().unwrap() {
        for dir in ["image_to_text", "text_to_image"] {
            let r = &l[dir];
            let (r1, r5, r10) = (
                r["r1"].as_f64().unwrap(),
                r["r5"].as_f64().unwrap(),
                r["r10"].as_f64().unwrap(),
            );
            assert!(r1 <= r5 && r5 <= r10);
        }
    }
    // Larger input grid via position interpolation.
    let (table, _) = eval("r48.json", &["--image-size", "48"]);
    assert!(table.contains("L0"));

    let out = cclm(&[
        "eval",
        "--checkpoint",
        p(&f.path("missing")),
        "--corpus",
        p(&f.corpus()),
        "--out",
        p(&f.path("m.json")),
    ]);
    assert!(!out.status.success());

    let export = |out: &str| {
        let out = f.path(out);
        let msg = ok(&[
            "export-embeddings",
            "--checkpoint",
            p(&run),
            "--corpus",
            p(&f.corpus()),
            "--out",
            p(&out),
        ]);
        (msg, fs::read_to_string(out).unwrap())
    };
    let (msg, a) = export("e1.tsv");
    let (_, b) = export("e2.tsv");
    assert_eq!(a, b);
    assert!(msg.starts_with("wrote 64 embeddings"));
    assert_eq!(a.lines().count(), 1 + 16 * (1 + 3));
    assert!(a.starts_with("item_id\tmodality\tlanguage\texample_id\te0\t"));
}

#[test]
fn eval_reports_the_first_mismatched_parameter() {
    let f = Fixture::new();
    f.train("run", &[]);
    let ckpt = f.path("run/checkpoints/step-0000009");
    let manifest = ckpt.join("manifest.json");
    let text = fs::read_to_string(&manifest).unwrap();
    fs::write(
        &manifest,
        text.replace("\"proj_dim\": 32", "\"proj_dim\": 16"),
    )
    .unwrap();
    let out = cclm(&[
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--corpus",
        p(&f.corpus()),
        "--out",
        p(&f.path("x.json")),
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("head.proj_v"), "{}", stderr(&out));
}

#[test]
fn gradcheck_lists_every_primitive_and_detects_faults() {
    let out = ok(&["gradcheck", "--trials", "3"]);
    for op in cclm::autograd::PRIMITIVES {
        assert!(
            out.lines().any(|l| l.split_whitespace().next() == Some(op)),
            "{op} missing"
        );
    }
    assert!(out.contains("total_loss/cross_modal") && out.contains("total_loss/cross_lingual"));
    assert!(out.contains("all 25 gradient checks passed"));

    let bad = cclm(&["gradcheck", "--trials", "3", "--inject-fault", "softmax"]);
    assert!(!bad.status.success());
    let text = String::from_utf8(bad.stdout).unwrap();
    assert!(
        text.lines()
            .any(|l| l.starts_with("softmax") && l.contains("FAIL")),
        "{text}"
    );
}
