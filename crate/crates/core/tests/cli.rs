use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rolegraph::checkpoint::Checkpoint;

fn rolegraph(run_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rolegraph"))
        .arg("--run-dir")
        .arg(run_dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const SMALL: &[&str] = &[
    "--set", "d_t=4", "--set", "max_seq_len=4", "--set", "n_min=5", "--set", "batch_size=50",
    "--set", "pretrain_max_epochs=1", "--set", "max_epochs=1", "--set", "lr=0.001",
];

struct Fixture {
    _tmp: tempfile::TempDir,
    run: PathBuf,
    data: PathBuf,
    edges: String,
}

fn fixture() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    ok(rolegraph(&run, &["gen-synth", "--nodes", "20", "--edges", "300"]));
    let data = run.join("data");
    let edges = data.join("edges.csv").display().to_string();
    Fixture {
        _tmp: tmp,
        run,
        data,
        edges,
    }
}

fn with_small<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    let mut v: Vec<&str> = SMALL.to_vec();
    v.extend_from_slice(extra);
    v
}

#[test]
fn missing_features_is_a_config_error_without_artifacts() {
    let f = fixture();
    let missing = f.run.join("nowhere").display().to_string();
    for split in ["train", "val"] {
        ok(rolegraph(&f.run, &with_small(&["precompute", "--edges", &f.edges, "--split", split])));
    }
    let out = rolegraph(&f.run, &with_small(&["pretrain", "--edges", &f.edges, "--features", &missing]));
    assert_eq!(out.status.code(), Some(2));
    assert!(!f.run.join("pretrain").exists());
    assert!(!f.run.join("manifest-pretrain.json").exists());

    let labels = f.data.join("labels.json").display().to_string();
    let out = rolegraph(
        &f.run,
        &with_small(&[
            "finetune", "--edges", &f.edges, "--features", &missing, "--labels", &labels, "--ablation", "pretrain",
        ]),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(!f.run.join("finetune").exists());
}

#[test]
fn overrides_reach_the_checkpoint() {
    let f = fixture();
    let data = f.data.display().to_string();
    let mut args = with_small(&["--set", "d_c=6"]);
    for split in ["train", "val"] {
        let mut a = args.clone();
        a.extend(["precompute", "--edges", &f.edges, "--split", split]);
        ok(rolegraph(&f.run, &a));
    }
    args.extend(["pretrain", "--edges", &f.edges, "--features", &data]);
    ok(rolegraph(&f.run, &args));
    let ck = Checkpoint::load(&f.run.join("pretrain/model.ckpt")).unwrap();
    assert_eq!(ck.meta.run_config["d_c"], 6);
    assert_eq!(ck.meta.encoder.d_c, 6);
    assert_eq!(ck.params.value(ck.params.expect("proj_node.w")).ncols(), 6);
}

#[test]
fn unknown_override_and_bad_flags_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = rolegraph(tmp.path(), &["--set", "dmodel=3", "gen-synth"]);
    assert_eq!(out.status.code(), Some(2));
    let out = rolegraph(tmp.path(), &["gen-synth", "--nodes", "-4"]);
    assert_eq!(out.status.code(), Some(2));
    let out = rolegraph(tmp.path(), &["gen-synth", "--classes", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn corrupt_cache_is_a_format_error() {
    let f = fixture();
    let data = f.data.display().to_string();
    for split in ["train", "val"] {
        ok(rolegraph(&f.run, &with_small(&["precompute", "--edges", &f.edges, "--split", split])));
    }
    let cache = f.run.join("cache/train.dgnb");
    let mut bytes = std::fs::read(&cache).unwrap();
    bytes.truncate(bytes.len() / 2);
    std::fs::write(&cache, bytes).unwrap();
    let out = rolegraph(&f.run, &with_small(&["pretrain", "--edges", &f.edges, "--features", &data]));
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn full_pipeline_writes_manifests_and_aggregates() {
    let f = fixture();
    let data = f.data.display().to_string();
    let labels = f.data.join("labels.json").display().to_string();
    for split in ["train", "val"] {
        ok(rolegraph(&f.run, &with_small(&["precompute", "--edges", &f.edges, "--split", split])));
    }
    ok(rolegraph(&f.run, &with_small(&["pretrain", "--edges", &f.edges, "--features", &data])));
    let ckpt = f.run.join("pretrain/model.ckpt").display().to_string();

    // An ablated finetune cannot start from a full backbone.
    let out = rolegraph(
        &f.run,
        &with_small(&[
            "finetune", "--edges", &f.edges, "--features", &data, "--labels", &labels, "--from-checkpoint", &ckpt,
            "--ablation", "rspe",
        ]),
    );
    assert_eq!(out.status.code(), Some(2));

    ok(rolegraph(
        &f.run,
        &with_small(&[
            "finetune", "--edges", &f.edges, "--features", &data, "--labels", &labels, "--from-checkpoint", &ckpt,
            "--seeds", "4,5",
        ]),
    ));
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(f.run.join("finetune/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["per_seed"].as_array().unwrap().len(), 2);
    let per: Vec<f64> = summary["per_seed"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["test"]["macro_f1"].as_f64().unwrap())
        .collect();
    let mean = summary["test_macro_f1"]["mean"].as_f64().unwrap();
    assert!((mean - (per[0] + per[1]) / 2.0).abs() < 1e-12);

    let fine = f.run.join("finetune/seed_4/model.ckpt").display().to_string();
    ok(rolegraph(
        &f.run,
        &with_small(&["evaluate", "--checkpoint", &fine, "--edges", &f.edges, "--features", &data, "--labels", &labels]),
    ));
    ok(rolegraph(
        &f.run,
        &with_small(&[
            "probe", "--checkpoint", &fine, "--edges", &f.edges, "--features", &data, "--kind", "global", "--dump-scores",
        ]),
    ));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(f.run.join("probe_global.json")).unwrap()).unwrap();
    assert_eq!(
        report["scores"].as_array().unwrap().len() as u64,
        report["num_samples"].as_u64().unwrap()
    );

    for cmd in ["gen-synth", "precompute", "pretrain", "finetune", "evaluate", "probe"] {
        let m: serde_json::Value =
            serde_json::from_slice(&std::fs::read(f.run.join(format!("manifest-{cmd}.json"))).unwrap()).unwrap();
        assert_eq!(m["command"], cmd);
        assert!(m["wall_time_secs"].as_f64().unwrap() >= 0.0);
        for digest in m["inputs"].as_object().unwrap().values() {
            assert_eq!(digest.as_str().unwrap().len(), 64);
        }
    }
}
