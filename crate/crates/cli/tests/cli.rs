use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use egovos::config::RunConfig;
use egovos::dataio::png_io;
use egovos::metrics::{evaluate_dataset, evaluate_sequence};
use egovos::pipeline::{self, load_dataset};
use egovos::Model;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_egovos"))
}

fn tiny_config(dir: &Path) -> PathBuf {
    let mut cfg = RunConfig::benchmark();
    cfg.synth.clip.height = 32;
    cfg.synth.clip.width = 32;
    cfg.synth.clip.frames = 6;
    cfg.synth.clip.min_radius = 4.0;
    cfg.synth.clip.max_radius = 6.0;
    cfg.synth.train_clips = 2;
    cfg.synth.eval_clips = 2;
    cfg.train.stage1.iterations = 3;
    cfg.train.stage1.batch_size = 1;
    cfg.train.stage1.max_skip = 1;
    cfg.tta.enabled = false;
    cfg.tta.scales = vec![1.0];
    let p = dir.join("tiny.json");
    fs::write(&p, cfg.to_json()).unwrap();
    p
}

fn run(cmd: &mut Command) -> String {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "command failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn synth_train_infer_eval_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg_path = tiny_config(d);
    let data = d.join("data");
    let run_dir = d.join("run");
    run(bin().args(["synth", "--config"]).arg(&cfg_path).arg("--out").arg(&data));
    assert!(data.join("train/dataset.json").is_file());
    assert!(data.join("config.resolved.json").is_file());

    run(bin().args(["train", "--config"]).arg(&cfg_path).arg("--out").arg(&run_dir));
    assert!(run_dir.join("checkpoint/index.json").is_file());
    let csv = fs::read_to_string(run_dir.join("loss_stage1.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);

    let eval_set = data.join("eval/dataset.json");
    run(bin()
        .args(["infer", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&run_dir)
        .arg("--checkpoint")
        .arg(run_dir.join("checkpoint"))
        .arg("--data")
        .arg(&eval_set));
    assert!(run_dir.join("masks/eval0000/00005.png").is_file());

    let stdout = run(bin()
        .args(["eval", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&run_dir)
        .arg("--predictions")
        .arg(run_dir.join("masks"))
        .arg("--data")
        .arg(&eval_set));
    assert!(stdout.contains("J&F"), "{stdout}");
    assert!(run_dir.join("scores.txt").is_file());
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run_dir.join("scores.json")).unwrap()).unwrap();

    // Same computation in process.
    let cfg = RunConfig::read(&cfg_path).unwrap().resolve().unwrap();
    let model = Model::load(&run_dir.join("checkpoint"), cfg.model.clone()).unwrap();
    let entries = load_dataset(&eval_set).unwrap();
    let scores = entries
        .iter()
        .map(|e| {
            let s = &e.sequence;
            let p = egovos::inference::infer_sequence(&model, s, &cfg.tta.variants().unwrap()).unwrap();
            evaluate_sequence(&s.id, &p, &s.masks, &s.annotated, None).unwrap()
        })
        .collect();
    let expected = evaluate_dataset(scores).unwrap();
    assert_eq!(report["jf"].as_f64().unwrap().to_bits(), expected.jf.to_bits());
    assert_eq!(report["j"].as_f64().unwrap().to_bits(), expected.j.to_bits());
    assert_eq!(report["f"].as_f64().unwrap().to_bits(), expected.f.to_bits());
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg_path = tiny_config(d);
    run(bin().args(["synth", "--config"]).arg(&cfg_path).arg("--out").arg(d.join("data")));
    let eval_set = d.join("data/eval/dataset.json");
    let masks = d.join("gt_masks");
    for e in load_dataset(&eval_set).unwrap() {
        for (i, m) in &e.sequence.masks {
            png_io::write_mask(&masks.join(&e.sequence.id).join(format!("{i:05}.png")), m).unwrap();
        }
    }
    run(bin()
        .args(["eval", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(d.join("score"))
        .arg("--predictions")
        .arg(&masks)
        .arg("--data")
        .arg(&eval_set));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("score/scores.json")).unwrap()).unwrap();
    assert_eq!(report["jf"].as_f64().unwrap(), 1.0);
}

#[test]
fn ablate_emits_four_rows_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg_path = tiny_config(d);
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = d.join(name);
        let stdout = run(bin()
            .args(["ablate", "--config"])
            .arg(&cfg_path)
            .args(["--seed", "3", "--scales", "1.0", "--flip", "--out"])
            .arg(&out));
        assert!(stdout.contains("Fusion"), "{stdout}");
        let rows: Vec<BTreeMap<String, serde_json::Value>> =
            serde_json::from_str(&fs::read_to_string(out.join(pipeline::ABLATION_JSON)).unwrap()).unwrap();
        assert_eq!(rows.len(), 4);
        let resolved = RunConfig::read(&out.join("config.resolved.json")).unwrap();
        assert_eq!(resolved.seed, 3);
        assert_eq!(resolved.tta.scales, vec![1.0]);
        assert!(resolved.tta.flip && resolved.tta.enabled);
        outputs.push(fs::read(out.join(pipeline::ABLATION_JSON)).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn bad_inputs_fail_with_named_causes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let bad = d.join("bad.json");
    fs::write(&bad, r#"{"seed": 1, "fusoin": {}}"#).unwrap();
    let out = bin().args(["train", "--config"]).arg(&bad).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("fusoin"));

    let cfg_path = tiny_config(d);
    let out = bin()
        .args(["infer", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(d.join("o"))
        .arg("--checkpoint")
        .arg(d.join("missing"))
        .arg("--data")
        .arg(d.join("nothing"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing"));
}
