use std::path::Path;
use std::process::{Command, Output};

use segsynth::synth::write_demo_corpus;
use segsynth::ClassTaxonomy;

const SMALL: &[&str] = &[
    "--set",
    "mrlf.base_latent_h=8",
    "--set",
    "mrlf.base_latent_w=8",
    "--set",
    "mrlf.stride=4",
    "--set",
    "diffusion.steps=5",
    "--set",
    "diffusion.downscale=4",
];

fn run(registry: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segsynth"))
        .args(args)
        .env("SEGSYNTH_REGISTRY", registry)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn small(args: &[&str]) -> Vec<String> {
    args.iter().chain(SMALL).map(|s| s.to_string()).collect()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn corpus(dir: &Path, n: usize, size: usize) {
    write_demo_corpus(dir, n, (size, size), 3, &ClassTaxonomy::driving()).unwrap();
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["generate", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));
    let o = run(tmp.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    let out = tmp.path().join("x");
    let o = run(tmp.path(), &["generate", "--out", out.to_str().unwrap(), "--set", "mrlf.nope=1"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("nope"));
}

#[test]
fn help_lists_consumed_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let cases: &[(&str, &[&str])] = &[
        ("generate", &["run.seed", "mrlf.stride", "mrlf.area_threshold", "generation.n", "prompt.mix_ratio", "rcg.temperature", "diffusion.eta"]),
        ("stats", &["rcg.temperature"]),
        ("finetune", &["finetune.iterations", "finetune.learning_rate", "finetune.crop_size"]),
        ("train-control", &["control.iterations", "control.crop_size", "rcg.enabled"]),
        ("demo", &["mrlf.s", "diffusion.steps"]),
    ];
    for (cmd, keys) in cases {
        let o = run(tmp.path(), &[cmd, "--help"]);
        assert!(o.status.success());
        let text = stdout(&o);
        for k in *keys {
            assert!(text.contains(k), "`{cmd} --help` lacks {k}");
        }
    }
    assert!(!stdout(&run(tmp.path(), &["stats", "--help"])).contains("mrlf."));
}

#[test]
fn stats_probabilities_sum_to_one() {
    let tmp = tempfile::tempdir().unwrap();
    corpus(tmp.path(), 12, 32);
    let masks = tmp.path().join("masks");
    let o = run(tmp.path(), &["stats", "--masks", masks.to_str().unwrap(), "--temperature", "0.01", "--json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let doc: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let sum: f64 = doc["classes"].as_array().unwrap().iter().map(|c| c["probability"].as_f64().unwrap()).sum();
    assert!((sum - 1.0).abs() < 1e-9);
    assert_eq!(doc["temperature"].as_f64(), Some(0.01));
    let o = run(tmp.path(), &["stats", "--masks", masks.to_str().unwrap()]);
    assert!(stdout(&o).contains("train"));
    let o = run(tmp.path(), &["stats", "--masks", tmp.path().join("none").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn generate_is_seeded_and_validates() {
    let tmp = tempfile::tempdir().unwrap();
    let reg = tmp.path().join("reg");
    let gen = |name: &str, seed: &str| {
        let out = tmp.path().join(name);
        let args = small(&["generate", "--n", "4", "--seed", seed, "--workers", "2", "--out", out.to_str().unwrap()]);
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let o = run(&reg, &args);
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read(out.join("manifest.json")).unwrap()
    };
    let a = gen("a", "7");
    assert_eq!(a, gen("b", "7"));
    assert_ne!(a, gen("c", "8"));
    let a_dir = tmp.path().join("a");
    assert!(run(&reg, &["validate", a_dir.to_str().unwrap()]).status.success());
    assert!(a_dir.join("config.toml").exists());

    let victim = std::fs::read_dir(a_dir.join("images")).unwrap().next().unwrap().unwrap().path();
    std::fs::remove_file(&victim).unwrap();
    let o = run(&reg, &["validate", a_dir.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let job = victim.file_stem().unwrap().to_string_lossy().into_owned();
    assert!(stdout(&o).contains(&job));
}

#[test]
fn demo_output_validates() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("demo");
    let args = small(&["demo", "--out", out.to_str().unwrap()]);
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let o = run(tmp.path(), &args);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(tmp.path(), &["validate", out.to_str().unwrap(), "--json"]);
    assert!(o.status.success());
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["jobs_checked"], 1);
}

#[test]
fn training_stages_in_order() {
    let tmp = tempfile::tempdir().unwrap();
    let reg = tmp.path().join("reg");
    corpus(&tmp.path().join("src"), 4, 32);
    let masks = tmp.path().join("src/masks");
    let images = tmp.path().join("src/images");
    let train = [
        "--set", "control.crop_size=16", "--set", "control.iterations=20", "--set", "control.learning_rate=0.01",
        "--set", "finetune.crop_size=16", "--set", "finetune.iterations=20", "--set", "finetune.learning_rate=0.001",
    ];
    let with = |base: &[&str]| -> Vec<String> { small(base).into_iter().chain(train.iter().map(|s| s.to_string())).collect() };
    let call = |args: Vec<String>| run(&reg, &args.iter().map(String::as_str).collect::<Vec<_>>());

    let early = call(with(&["train-control", "--masks", masks.to_str().unwrap(), "--images", images.to_str().unwrap()]));
    assert_eq!(early.status.code(), Some(1));
    assert!(stderr(&early).contains("finetune"), "{}", stderr(&early));

    let ft = call(with(&["finetune", "--images", images.to_str().unwrap()]));
    assert!(ft.status.success(), "{}", stderr(&ft));
    assert!(stdout(&ft).contains("checkpoint U_S"));

    let prior = call(with(&["train-control", "--masks", masks.to_str().unwrap(), "--images", images.to_str().unwrap(), "--base", "U_P"]));
    assert_eq!(prior.status.code(), Some(1));
    assert!(stderr(&prior).contains("protocol"));

    let ctl = call(with(&["train-control", "--masks", masks.to_str().unwrap(), "--images", images.to_str().unwrap()]));
    assert!(ctl.status.success(), "{}", stderr(&ctl));
    assert!(reg.join("control_S").is_dir());
    assert!(std::fs::read_dir(reg.join("runs")).unwrap().count() >= 2);

    let out = tmp.path().join("ds");
    let g = call(small(&["generate", "--n", "2", "--masks", masks.to_str().unwrap(), "--out", out.to_str().unwrap()]));
    assert!(g.status.success(), "{}", stderr(&g));
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["model"]["base"], "U_P");
    assert_eq!(manifest["model"]["control_trained_against"], "U_S");
}
