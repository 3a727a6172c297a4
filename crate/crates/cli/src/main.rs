use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use wm_core::action_tree::LexiconFile;
use wm_core::adapter::Fusion;
use wm_core::diffusion::NoiseSchedule;
use wm_core::eval::{evaluate_model, write_reports, ExperimentConfig, Variant};
use wm_core::modalities::{
    dynamic_mask, observe, observe_first_frame, FeatureExtractor, FileExtractor, SyntheticExtractor,
};
use wm_core::pipeline::{
    fit, load_checkpoint, observation_conds, prepare_all, sample_with_texts, save_checkpoint, to_latent, weight_report,
    CheckpointMeta, RunConfig, TextEncoder, TextMode,
};
use wm_core::spriteworld::{
    all_templates, frame_name, generate_episode, read_episode, read_frames, Dataset, DatasetConfig,
};
use wm_tensor::{io, Tensor};

#[derive(Parser)]
#[command(name = "wm", about = "Instruction-conditioned sprite-world video model")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Lexicon utilities.
    Lexicon {
        #[command(subcommand)]
        cmd: LexiconCmd,
    },
    /// Encode one instruction into its action-tree slot matrix.
    Encode {
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        instruction: String,
        #[arg(short = 'o', long)]
        out: PathBuf,
    },
    /// Dynamic mask of a frame sequence.
    Mask {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long, value_enum, default_value = "synthetic")]
        extractor: Extractor,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(short = 'o', long)]
        out: PathBuf,
    },
    /// Generate a sprite-world dataset.
    Datagen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model on the training split of a dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample a clip from the first frame of an episode.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        obs: PathBuf,
        #[arg(long)]
        instruction: Option<String>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Must match the checkpoint; fusion weights are not interchangeable.
        #[arg(long, value_enum)]
        fusion: Option<FusionArg>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short = 'o', long)]
        out: PathBuf,
    },
    /// Evaluate checkpoints on the seen/unseen splits.
    Eval {
        /// Extra checkpoint evaluated as variant `model`.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        variants: Option<PathBuf>,
        #[arg(short = 'o', long)]
        out: PathBuf,
    },
    /// Mean router weights per modality and level.
    WeightsReport {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        /// Dataset to draw observations from; fresh episodes otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short = 'o', long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum LexiconCmd {
    Build {
        /// One instruction per line.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_delimiter = ',')]
        verbs: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        preps: Vec<String>,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short = 'o', long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Extractor {
    Synthetic,
    File,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Tree,
    Decomposed,
}

impl From<Mode> for TextMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Tree => TextMode::Tree,
            Mode::Decomposed => TextMode::Decomposed,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FusionArg {
    Additive,
    Xattn,
}

impl From<FusionArg> for Fusion {
    fn from(f: FusionArg) -> Self {
        match f {
            FusionArg::Additive => Fusion::Additive,
            FusionArg::Xattn => Fusion::Xattn,
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => {
            let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(T::default()),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

/// Binary PPM next to each frame tensor, for quick viewing.
fn write_ppm(path: &Path, frame: &Tensor<f32>) -> Result<()> {
    let (h, w) = (frame.dims()[1], frame.dims()[2]);
    let plane = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for p in 0..plane {
        for c in 0..3 {
            out.push((frame.data()[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(path, out)?;
    Ok(())
}

fn lexicon_build(corpus: &Path, verbs: &[String], preps: &[String], dim: usize, seed: u64, out: &Path) -> Result<()> {
    let text = fs::read_to_string(corpus).with_context(|| format!("reading {}", corpus.display()))?;
    let lines: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    let v: Vec<&str> = verbs.iter().map(String::as_str).collect();
    let p: Vec<&str> = preps.iter().map(String::as_str).collect();
    let file = LexiconFile::from_corpus(&lines, &v, &p, dim, seed)?;
    file.save(out)?;
    println!(
        "{} verbs, {} prepositions, n_max {} -> {}",
        file.verbs.len(),
        file.prepositions.len(),
        file.n_max,
        out.display()
    );
    Ok(())
}

fn encode(lexicon: &Path, instruction: &str, out: &Path) -> Result<()> {
    let file = LexiconFile::load(lexicon)?;
    let emb = file.encode(instruction)?;
    io::write(out, &emb.slots)?;
    println!("{:?} -> {}", emb.slots.dims(), out.display());
    Ok(())
}

fn mask(frames: &Path, extractor: Extractor, features: Option<&Path>, out: &Path) -> Result<()> {
    let frames = read_frames(frames)?;
    let ex: Box<dyn FeatureExtractor<f32>> = match (extractor, features) {
        (Extractor::Synthetic, _) => Box::new(SyntheticExtractor::default()),
        (Extractor::File, Some(dir)) => Box::new(FileExtractor::open(dir)?),
        (Extractor::File, None) => bail!("--extractor file needs --features <dir>"),
    };
    let m = dynamic_mask(&frames, ex.as_ref())?;
    io::write(out, &m)?;
    println!("mask {:?}, mean {:.4} -> {}", m.dims(), m.mean(), out.display());
    Ok(())
}

fn datagen(config: Option<&Path>, out: &Path, episodes: usize, seed: u64) -> Result<()> {
    let cfg: DatasetConfig = read_json(config)?;
    let ds = Dataset::generate(&cfg, episodes, seed)?;
    fs::create_dir_all(out)?;
    ds.write(out)?;
    write_json(&out.join("dataset.json"), &cfg)?;
    println!(
        "{} train, {} seen eval, {} unseen eval episodes ({} seen / {} unseen templates) -> {}",
        ds.train.len(),
        ds.eval_seen.len(),
        ds.eval_unseen.len(),
        ds.seen.len(),
        ds.unseen.len(),
        out.display()
    );
    Ok(())
}

fn train(config: Option<&Path>, data: &Path, out: &Path) -> Result<()> {
    let cfg = read_json::<RunConfig>(config)?.with_defaults();
    let ds = Dataset::read(data)?;
    if ds.train.is_empty() {
        bail!("no training episodes under {}", data.display());
    }
    let text = TextEncoder::for_corpus(&ds.corpus(), cfg.embed_dim, cfg.text_seed)?;
    let ex = SyntheticExtractor::default();
    let prepared = prepare_all(&ds.train, &text, &ex, cfg.model.patch)?;
    let (model, store, log) = fit(&cfg, &text, &prepared, |step, loss| {
        eprintln!("step {step:>6}  loss {loss:.5}")
    })?;
    let meta = CheckpointMeta {
        model: model.config.clone(),
        lexicon: text.file.clone(),
        mode: cfg.train.mode,
        train: Some(cfg.train.clone()),
        schedule: cfg.schedule.clone(),
        sampler: cfg.sampler.clone(),
    };
    save_checkpoint(out, &meta, &store)?;
    write_json(&out.join("train_log.json"), &log)?;
    let (head, tail) = log.head_tail(50);
    println!(
        "trained {} steps in {:.1}s, loss {head:.4} -> {tail:.4}, checkpoint -> {}",
        log.losses.len(),
        log.seconds,
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn sample(
    ckpt: &Path,
    obs: &Path,
    instruction: Option<&str>,
    mode: Option<Mode>,
    fusion: Option<FusionArg>,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let loaded = load_checkpoint(ckpt)?;
    if let Some(f) = fusion {
        let want: Fusion = f.into();
        if loaded.model.config.injection.fusion != want {
            bail!(
                "checkpoint was trained with {} fusion, not {}",
                loaded.model.config.injection.fusion.name(),
                want.name()
            );
        }
    }
    let (ep, _) = read_episode(obs)?;
    let instruction = instruction.unwrap_or(&ep.instruction);
    let mode = mode.map(TextMode::from).unwrap_or(loaded.meta.mode);
    let model = &loaded.model;
    let prior = loaded.store.get(model.mask_prior).clone();
    let ex = SyntheticExtractor::default();
    let scene = observe_first_frame(&ep.frame(0), &ep.depth_gt, &ex, &prior)?;
    let patch = model.config.patch;
    let first = to_latent(&scene.rgb, patch)?;
    let conds = observation_conds(&scene, model.modalities(), patch)?;
    let rows = loaded.text.rows(instruction, mode)?;
    let sched = NoiseSchedule::from_config(&loaded.meta.schedule)?;
    let video = sample_with_texts(
        model,
        &loaded.store,
        &first,
        &conds,
        &rows,
        &sched,
        &loaded.meta.sampler,
        seed,
    )?;
    fs::create_dir_all(out)?;
    for t in 0..video.dims()[0] {
        let frame = video.index_first(t);
        let name = frame_name(t + 1);
        io::write(out.join(&name), &frame)?;
        write_ppm(&out.join(name.replace(".mdtn", ".ppm")), &frame)?;
    }
    println!(
        "{} frames for \"{instruction}\" ({} mode, {} forwards) -> {}",
        video.dims()[0],
        mode.name(),
        model.forward_count(),
        out.display()
    );
    Ok(())
}

fn eval(ckpt: Option<&Path>, data: &Path, variants: Option<&Path>, out: &Path) -> Result<()> {
    let mut exp: ExperimentConfig = match variants {
        Some(p) => serde_json::from_slice(&fs::read(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => ExperimentConfig {
            variants: Vec::new(),
            splits: vec!["seen".into(), "unseen".into()],
            eval: Default::default(),
        },
    };
    if let Some(c) = ckpt {
        exp.variants.push(Variant {
            name: "model".into(),
            checkpoint: c.to_path_buf(),
            mode: None,
        });
    }
    if exp.variants.is_empty() {
        bail!("nothing to evaluate: pass --ckpt or --variants");
    }
    let ds = Dataset::read(data)?;
    let ex = SyntheticExtractor::default();
    let mut reports = Vec::new();
    for v in &exp.variants {
        let loaded = load_checkpoint(&v.checkpoint).with_context(|| format!("variant `{}`", v.name))?;
        let mode = v.mode.unwrap_or(loaded.meta.mode);
        let sched = NoiseSchedule::from_config(&loaded.meta.schedule)?;
        let mut split_data = BTreeMap::new();
        split_data.insert("seen", &ds.eval_seen);
        split_data.insert("unseen", &ds.eval_unseen);
        for split in &exp.splits {
            let eps = split_data
                .get(split.as_str())
                .with_context(|| format!("unknown split `{split}`"))?;
            let prepared = prepare_all(eps, &loaded.text, &ex, loaded.model.config.patch)?;
            let r = evaluate_model(
                &v.name,
                split,
                &loaded.model,
                &loaded.store,
                &prepared,
                mode,
                &sched,
                &exp.eval,
            )?;
            eprintln!(
                "{:<12} {:<7} psnr {:.3}  ssim {:.4}  flow {:.4}  fwd/step {:.2}",
                v.name, split, r.psnr, r.ssim, r.flow_error, r.forwards_per_step
            );
            reports.push(r);
        }
    }
    write_reports(out, &reports)?;
    print!("{}", fs::read_to_string(out.join("comparison.tsv"))?);
    Ok(())
}

fn weights_report(ckpt: &Path, n: usize, data: Option<&Path>, seed: u64, out: &Path) -> Result<()> {
    let loaded = load_checkpoint(ckpt)?;
    let episodes = match data {
        Some(d) => {
            let ds = Dataset::read(d)?;
            ds.eval_seen
                .into_iter()
                .chain(ds.eval_unseen)
                .chain(ds.train)
                .take(n)
                .collect::<Vec<_>>()
        }
        None => {
            let world = DatasetConfig::default().world;
            let templates = all_templates();
            (0..n)
                .map(|i| generate_episode(&world, &templates[i * 7 % templates.len()], seed + i as u64))
                .collect::<wm_core::Result<Vec<_>>>()?
        }
    };
    let ex = SyntheticExtractor::default();
    let scenes = episodes
        .iter()
        .map(|ep| observe(&ep.frame_list(), &ep.depth_gt, &ex))
        .collect::<wm_core::Result<Vec<_>>>()?;
    let report = weight_report(&loaded.model, &loaded.store, &scenes)?;
    write_json(out, &report)?;
    for (l, w) in report.levels.iter().enumerate() {
        let cells: Vec<String> = report
            .modalities
            .iter()
            .zip(w)
            .map(|(m, v)| format!("{}={v:.4}", m.name()))
            .collect();
        println!("level {l}: {}", cells.join("  "));
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Lexicon {
            cmd:
                LexiconCmd::Build {
                    corpus,
                    verbs,
                    preps,
                    dim,
                    seed,
                    out,
                },
        } => lexicon_build(&corpus, &verbs, &preps, dim, seed, &out),
        Cmd::Encode {
            lexicon,
            instruction,
            out,
        } => encode(&lexicon, &instruction, &out),
        Cmd::Mask {
            frames,
            extractor,
            features,
            out,
        } => mask(&frames, extractor, features.as_deref(), &out),
        Cmd::Datagen {
            config,
            out,
            episodes,
            seed,
        } => datagen(config.as_deref(), &out, episodes, seed),
        Cmd::Train { config, data, out } => train(config.as_deref(), &data, &out),
        Cmd::Sample {
            ckpt,
            obs,
            instruction,
            mode,
            fusion,
            seed,
            out,
        } => sample(&ckpt, &obs, instruction.as_deref(), mode, fusion, seed, &out),
        Cmd::Eval {
            ckpt,
            data,
            variants,
            out,
        } => eval(ckpt.as_deref(), &data, variants.as_deref(), &out),
        Cmd::WeightsReport {
            ckpt,
            n,
            data,
            seed,
            out,
        } => weights_report(&ckpt, n, data.as_deref(), seed, &out),
    }
}
