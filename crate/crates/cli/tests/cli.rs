use std::fs;
use std::path::Path;
use std::process::Command;

fn wm(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_wm"))
        .args(args)
        .output()
        .expect("spawn wm");
    assert!(
        out.status.success(),
        "wm {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn wm_fails(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_wm"))
        .args(args)
        .output()
        .expect("spawn wm");
    assert!(!out.status.success(), "wm {args:?} should fail");
    String::from_utf8(out.stderr).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn lexicon_and_encode() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.txt");
    fs::write(
        &corpus,
        "pick the apple from the table and place it in the drawer\nclose the drawer\n",
    )
    .unwrap();
    let lex = dir.path().join("lex.json");
    wm(&[
        "lexicon",
        "build",
        "--corpus",
        p(&corpus),
        "--verbs",
        "pick,place,close",
        "--preps",
        "from,in,on",
        "-o",
        p(&lex),
    ]);
    let doc: serde_json::Value = serde_json::from_slice(&fs::read(&lex).unwrap()).unwrap();
    assert_eq!(doc["verbs"], serde_json::json!(["pick", "place", "close"]));
    assert_eq!(doc["prepositions"], serde_json::json!(["from", "in"]));

    let emb = dir.path().join("emb.mdtn");
    wm(&[
        "encode",
        "--lexicon",
        p(&lex),
        "--instruction",
        "close the drawer",
        "-o",
        p(&emb),
    ]);
    let t: wm_tensor::Tensor<f32> = wm_tensor::io::read(&emb).unwrap();
    assert_eq!(t.dims(), &[4, 16]);
    assert!(t.data()[16..].iter().all(|&x| x == 0.0));
    let err = wm_fails(&[
        "encode",
        "--lexicon",
        p(&lex),
        "--instruction",
        "place it from the drawer",
        "-o",
        p(&emb),
    ]);
    assert!(err.contains("place"), "{err}");
}

#[test]
fn datagen_train_sample_eval_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data_cfg = root.join("data.json");
    fs::write(
        &data_cfg,
        r#"{"world": {"size": 32, "frames": 4, "sprite": 6, "place": 10, "lift": 6, "max_step": 4, "texture": 0.03},
            "eval_per_split": 2}"#,
    )
    .unwrap();
    let data = root.join("data");
    wm(&[
        "datagen",
        "--config",
        p(&data_cfg),
        "--out",
        p(&data),
        "--episodes",
        "6",
        "--seed",
        "1",
    ]);
    assert!(data.join("split.json").exists());

    let run_cfg = root.join("run.json");
    fs::write(
        &run_cfg,
        r#"{"model": {"frames": 4, "channels": [8, 16], "decoder_layers": 2, "time_dim": 16,
                      "guidance": {"router_hidden": 8},
                      "injection": {"decoder_layer_count": 2, "inject_every": 1, "fusion": "xattn"}},
            "train": {"steps": 3, "batch": 2, "log_every": 1},
            "sampler": {"steps": 2},
            "embed_dim": 8}"#,
    )
    .unwrap();
    let ckpt = root.join("ckpt");
    let out = wm(&["train", "--config", p(&run_cfg), "--data", p(&data), "--out", p(&ckpt)]);
    assert!(out.contains("trained 3 steps"), "{out}");
    assert!(ckpt.join("checkpoint.json").exists());

    let episode = fs::read_dir(data.join("episodes"))
        .unwrap()
        .flat_map(|e| fs::read_dir(e.unwrap().path()).unwrap())
        .map(|e| e.unwrap().path())
        .find(|d| fs::read_to_string(d.join("meta.json")).unwrap().contains("\"unseen\""))
        .expect("an unseen episode");
    let video = root.join("video");
    wm(&[
        "sample",
        "--ckpt",
        p(&ckpt),
        "--obs",
        p(&episode),
        "--mode",
        "tree",
        "--fusion",
        "xattn",
        "-o",
        p(&video),
    ]);
    let frame: wm_tensor::Tensor<f32> = wm_tensor::io::read(video.join("frame_0004.mdtn")).unwrap();
    assert_eq!(frame.dims(), &[3, 32, 32]);
    assert!(video.join("frame_0001.ppm").exists());
    let err = wm_fails(&[
        "sample",
        "--ckpt",
        p(&ckpt),
        "--obs",
        p(&episode),
        "--fusion",
        "additive",
        "-o",
        p(&video),
    ]);
    assert!(err.contains("xattn"), "{err}");

    let mask = root.join("mask.mdtn");
    wm(&[
        "mask",
        "--frames",
        p(&episode),
        "--extractor",
        "synthetic",
        "-o",
        p(&mask),
    ]);
    let m: wm_tensor::Tensor<f32> = wm_tensor::io::read(&mask).unwrap();
    assert_eq!(m.dims(), &[1, 32, 32]);

    let variants = root.join("variants.json");
    fs::write(
        &variants,
        format!(
            r#"{{"variants": [{{"name": "full", "checkpoint": "{}"}}, {{"name": "full_decomp", "checkpoint": "{}", "mode": "decomposed"}}],
                "splits": ["unseen"], "eval": {{"sampler": {{"steps": 2}}, "max_episodes": 1}}}}"#,
            p(&ckpt),
            p(&ckpt)
        ),
    )
    .unwrap();
    let reports = root.join("reports");
    let table = wm(&[
        "eval",
        "--data",
        p(&data),
        "--variants",
        p(&variants),
        "-o",
        p(&reports),
    ]);
    assert!(table.starts_with("variant\tpsnr_unseen"), "{table}");
    assert!(table.contains("\nfull\t") && table.contains("\nfull_decomp\t"));
    assert!(reports.join("full_unseen.json").exists());

    let weights = root.join("weights.json");
    wm(&[
        "weights-report",
        "--ckpt",
        p(&ckpt),
        "--n",
        "3",
        "--data",
        p(&data),
        "-o",
        p(&weights),
    ]);
    let doc: serde_json::Value = serde_json::from_slice(&fs::read(&weights).unwrap()).unwrap();
    assert_eq!(doc["modalities"].as_array().unwrap().len(), 4);

    let err = wm_fails(&[
        "eval",
        "--data",
        p(&data),
        "--ckpt",
        p(&root.join("nope")),
        "-o",
        p(&reports),
    ]);
    assert!(err.contains("nope"), "{err}");
}
