//! Glue between episodes and the world model: text rows, latents and
//! conditions, the training loop, conditioned sampling and checkpoints.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use wm_tensor::io::{load_params, save_params};
use wm_tensor::{Adam, Graph, ParamStore, Tensor, Var};

use crate::action_tree::{
    decompose_primitives, parse_instruction, slot_rows, ActionTree, EmbeddingTable, Lexicon, LexiconFile,
};
use crate::diffusion::{q_sample, randn_like, sample_loop, NoiseSchedule, SamplerConfig, ScheduleConfig};
use crate::error::{Error, Result};
use crate::guidance::{weight_report as guidance_report, Modality, WeightReport, ALL_MODALITIES};
use crate::modalities::{observe, FeatureExtractor, SceneObservation};
use crate::model::{ModelConfig, ModelInput, WorldModel};
use crate::nn::{patchify, unpatchify};
use crate::spriteworld::{Episode, PREPS, VERBS};

/// How the instruction reaches the model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextMode {
    /// One pass over the whole action-tree embedding.
    #[default]
    Tree,
    /// One pass per primitive; predicted noises are averaged.
    Decomposed,
}

impl TextMode {
    pub fn name(self) -> &'static str {
        match self {
            TextMode::Tree => "tree",
            TextMode::Decomposed => "decomposed",
        }
    }
}

/// Instruction → table rows, via the lexicon file's tree and table.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub file: LexiconFile,
    pub lexicon: Lexicon,
    pub tree: Option<ActionTree>,
    pub table: EmbeddingTable,
}

impl TextEncoder {
    pub fn new(file: LexiconFile) -> Result<Self> {
        Ok(Self {
            lexicon: file.lexicon()?,
            tree: file.tree()?,
            table: file.table()?,
            file,
        })
    }

    /// Encoder for a sprite-world corpus with the default action words.
    pub fn for_corpus<S: AsRef<str>>(corpus: &[S], embed_dim: usize, seed: u64) -> Result<Self> {
        Self::new(LexiconFile::from_corpus(corpus, &VERBS, &PREPS, embed_dim, seed)?)
    }

    pub fn n_max(&self) -> usize {
        self.file.n_max.max(1)
    }

    pub fn vocab(&self) -> usize {
        self.table.len()
    }

    fn rows_for(&self, text: &str, validate: bool) -> Result<Vec<Option<usize>>> {
        let seq = match (&self.tree, validate) {
            (Some(tree), true) => parse_instruction(text, tree)?,
            _ => self.lexicon.sequence(text)?,
        };
        if seq.n() == 0 {
            return Err(Error::NoVerb(text.to_string()));
        }
        slot_rows(&seq, &self.table, self.n_max())
    }

    /// Rows of the full action-tree embedding.
    pub fn tree_rows(&self, instruction: &str) -> Result<Vec<Option<usize>>> {
        self.rows_for(instruction, true)
    }

    /// Rows for each primitive of the instruction.
    pub fn primitive_rows(&self, instruction: &str) -> Result<Vec<Vec<Option<usize>>>> {
        decompose_primitives(instruction, &self.lexicon)?
            .iter()
            .map(|p| self.rows_for(p, false))
            .collect()
    }

    pub fn rows(&self, instruction: &str, mode: TextMode) -> Result<Vec<Vec<Option<usize>>>> {
        match mode {
            TextMode::Tree => Ok(vec![self.tree_rows(instruction)?]),
            TextMode::Decomposed => self.primitive_rows(instruction),
        }
    }
}

/// `[3, H, W]` in [0, 1] → latent `[3p², H/p, W/p]` in [-1, 1].
pub fn to_latent(frame: &Tensor<f32>, patch: usize) -> Result<Tensor<f32>> {
    patchify(&frame.map(|v| 2.0 * v - 1.0), patch)
}

pub fn from_latent(z: &Tensor<f32>, patch: usize) -> Result<Tensor<f32>> {
    Ok(unpatchify(z, patch)?.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)))
}

pub fn modality_map(obs: &SceneObservation<f32>, m: Modality) -> &Tensor<f32> {
    match m {
        Modality::Depth => &obs.depth,
        Modality::Semantic => &obs.semantic,
        Modality::Rgb => &obs.rgb,
        Modality::Mask => &obs.dyn_mask,
    }
}

/// Patchified conditions for `mods`, each `[C_m·p², h, w]`.
pub fn observation_conds(obs: &SceneObservation<f32>, mods: &[Modality], patch: usize) -> Result<Vec<Tensor<f32>>> {
    mods.iter().map(|&m| patchify(modality_map(obs, m), patch)).collect()
}

/// An episode preprocessed for training and evaluation.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub instruction: String,
    pub task_id: String,
    /// `[Cz, h, w]`.
    pub first: Tensor<f32>,
    /// Frames 1..=F as latents, `[F·Cz, h, w]` flattened per frame.
    pub target: Tensor<f32>,
    /// All four modalities in canonical order.
    pub conds: Vec<Tensor<f32>>,
    pub tree_rows: Vec<Option<usize>>,
    pub primitive_rows: Vec<Vec<Option<usize>>>,
    pub observation: SceneObservation<f32>,
}

impl Prepared {
    pub fn conds_for(&self, mods: &[Modality]) -> Vec<&Tensor<f32>> {
        mods.iter()
            .map(|m| &self.conds[ALL_MODALITIES.iter().position(|x| x == m).expect("known modality")])
            .collect()
    }

    pub fn rows(&self, mode: TextMode) -> Vec<Vec<Option<usize>>> {
        match mode {
            TextMode::Tree => vec![self.tree_rows.clone()],
            TextMode::Decomposed => self.primitive_rows.clone(),
        }
    }
}

pub fn prepare(ep: &Episode, text: &TextEncoder, ex: &dyn FeatureExtractor<f32>, patch: usize) -> Result<Prepared> {
    let frames = ep.frame_list();
    let obs = observe(&frames, &ep.depth_gt, ex)?;
    let latents = frames.iter().map(|f| to_latent(f, patch)).collect::<Result<Vec<_>>>()?;
    let d = latents[0].dims().to_vec();
    let target = Tensor::stack(&latents[1..])?;
    let f = latents.len() - 1;
    Ok(Prepared {
        instruction: ep.instruction.clone(),
        task_id: ep.task_id.clone(),
        first: latents[0].clone(),
        target: target.into_reshape(&[f * d[0], d[1], d[2]])?,
        conds: observation_conds(&obs, &ALL_MODALITIES, patch)?,
        tree_rows: text.tree_rows(&ep.instruction)?,
        primitive_rows: text.primitive_rows(&ep.instruction)?,
        observation: obs,
    })
}

pub fn prepare_all(
    eps: &[Episode],
    text: &TextEncoder,
    ex: &dyn FeatureExtractor<f32>,
    patch: usize,
) -> Result<Vec<Prepared>> {
    eps.iter().map(|e| prepare(e, text, ex, patch)).collect()
}

/// Mean dynamic mask over a set of episodes, used when only frame 0 exists.
pub fn mean_mask(data: &[Prepared]) -> Result<Tensor<f32>> {
    let first = data.first().ok_or_else(|| Error::Input("no episodes".into()))?;
    let mut acc = Tensor::zeros(first.observation.dyn_mask.dims());
    for p in data {
        acc = acc.zip_map(&p.observation.dyn_mask, |a, b| a + b)?;
    }
    let n = data.len() as f32;
    Ok(acc.map(|v| v / n))
}

fn stack_refs(items: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let owned: Vec<Tensor<f32>> = items.iter().map(|t| (*t).clone()).collect();
    Ok(Tensor::stack(&owned)?)
}

/// Batched model input; `text[i]` are the rows for sample `i`.
pub fn batch_input(
    model: &WorldModel,
    sched: &NoiseSchedule,
    items: &[&Prepared],
    z_t: Tensor<f32>,
    t: Vec<usize>,
    text: Vec<Vec<Option<usize>>>,
) -> Result<ModelInput<f32>> {
    let mods = model.modalities().to_vec();
    let first = stack_refs(&items.iter().map(|p| &p.first).collect::<Vec<_>>())?;
    let conds = (0..mods.len())
        .map(|k| {
            let per: Vec<&Tensor<f32>> = items.iter().map(|p| p.conds_for(&mods)[k]).collect();
            stack_refs(&per)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelInput {
        z_t,
        alpha_bar: t.iter().map(|&k| sched.alpha_bar[k]).collect(),
        t,
        first,
        text,
        conds,
    })
}

/// Noised batch and the noise that produced it.
pub struct NoisedBatch {
    pub z_t: Tensor<f32>,
    pub eps: Tensor<f32>,
    pub t: Vec<usize>,
}

pub fn noise_batch<R: Rng>(s: &NoiseSchedule, items: &[&Prepared], frames: usize, rng: &mut R) -> Result<NoisedBatch> {
    let mut zs = Vec::with_capacity(items.len());
    let mut es = Vec::with_capacity(items.len());
    let mut ts = Vec::with_capacity(items.len());
    for p in items {
        let t = rng.random_range(1..=s.steps);
        let eps = randn_like::<f32, _>(p.target.dims(), rng);
        zs.push(q_sample(s, &p.target, t, &eps)?);
        es.push(eps);
        ts.push(t);
    }
    let d = items[0].target.dims();
    let cz = d[0] / frames;
    let dims = [items.len() * frames, cz, d[1], d[2]];
    Ok(NoisedBatch {
        z_t: Tensor::stack(&zs)?.into_reshape(&dims)?,
        eps: Tensor::stack(&es)?.into_reshape(&dims)?,
        t: ts,
    })
}

/// Predicted noise averaged over each sample's text passes. Samples with
/// fewer passes than the batch maximum get zero weight on the extra passes.
#[allow(clippy::too_many_arguments)]
pub fn averaged_eps(
    model: &WorldModel,
    sched: &NoiseSchedule,
    g: &mut Graph<f32>,
    s: &ParamStore<f32>,
    items: &[&Prepared],
    z_t: &Tensor<f32>,
    t: &[usize],
    passes: &[Vec<Vec<Option<usize>>>],
) -> Result<Var> {
    let k_max = passes.iter().map(Vec::len).max().unwrap_or(0);
    if k_max == 0 || passes.iter().any(Vec::is_empty) {
        return Err(Error::Input("every sample needs at least one text pass".into()));
    }
    let f = model.config.frames;
    let mut acc: Option<Var> = None;
    for k in 0..k_max {
        let text = passes.iter().map(|p| p[k.min(p.len() - 1)].clone()).collect();
        let input = batch_input(model, sched, items, z_t.clone(), t.to_vec(), text)?;
        let pred = model.forward(g, s, &input)?;
        let term = if passes.iter().all(|p| p.len() == 1) {
            pred
        } else {
            let w: Vec<f32> = passes
                .iter()
                .flat_map(|p| {
                    let v = if k < p.len() { 1.0 / p.len() as f32 } else { 0.0 };
                    std::iter::repeat_n(v, f)
                })
                .collect();
            let wv = g.constant(Tensor::new(&[w.len(), 1, 1, 1], w)?);
            g.mul(pred, wv)?
        };
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    Ok(acc.expect("k_max >= 1"))
}

/// Records the noise-prediction loss for one batch and returns it.
pub fn training_loss<R: Rng>(
    model: &WorldModel,
    g: &mut Graph<f32>,
    s: &ParamStore<f32>,
    sched: &NoiseSchedule,
    items: &[&Prepared],
    mode: TextMode,
    rng: &mut R,
) -> Result<Var> {
    if items.is_empty() {
        return Err(Error::Input("training batch is empty".into()));
    }
    let nb = noise_batch(sched, items, model.config.frames, rng)?;
    let passes: Vec<_> = items.iter().map(|p| p.rows(mode)).collect();
    let pred = averaged_eps(model, sched, g, s, items, &nb.z_t, &nb.t, &passes)?;
    let eps = g.constant(nb.eps);
    Ok(g.mse(pred, eps)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub mode: TextMode,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch: 4,
            lr: 2e-3,
            clip_norm: Some(1.0),
            seed: 0,
            mode: TextMode::Tree,
            log_every: 50,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
    pub seconds: f64,
}

impl TrainLog {
    /// Mean of the first and last `k` losses.
    pub fn head_tail(&self, k: usize) -> (f64, f64) {
        let k = k.clamp(1, self.losses.len().max(1));
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
        (
            mean(&self.losses[..k.min(self.losses.len())]),
            mean(&self.losses[self.losses.len().saturating_sub(k)..]),
        )
    }
}

/// Adam on random minibatches of `data`.
pub fn train(
    model: &WorldModel,
    store: &mut ParamStore<f32>,
    data: &[Prepared],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    mut on_log: impl FnMut(usize, f64),
) -> Result<TrainLog> {
    if data.is_empty() || cfg.batch == 0 {
        return Err(Error::Input("training needs episodes and a positive batch size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.lr);
    if let Some(c) = cfg.clip_norm {
        opt = opt.with_clip(c);
    }
    let start = Instant::now();
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let items: Vec<&Prepared> = (0..cfg.batch)
            .map(|_| data.choose(&mut rng).expect("non-empty"))
            .collect();
        let mut g = Graph::new();
        let loss = training_loss(model, &mut g, store, sched, &items, cfg.mode, &mut rng)?;
        let lv = g.value(loss).data()[0] as f64;
        if !lv.is_finite() {
            return Err(Error::Training {
                step,
                msg: format!("loss is {lv}"),
            });
        }
        let grads = g.backward(loss)?;
        opt.step(store, &grads).map_err(|e| Error::Training {
            step,
            msg: e.to_string(),
        })?;
        log.losses.push(lv);
        if cfg.log_every > 0 && (step + 1) % cfg.log_every == 0 {
            on_log(step + 1, lv);
        }
    }
    log.seconds = start.elapsed().as_secs_f64();
    Ok(log)
}

/// Samples `[F, 3, H, W]` given the frame-0 latent, conditions for the
/// model's modalities and one or more text passes whose noises are averaged.
#[allow(clippy::too_many_arguments)]
pub fn sample_with_texts(
    model: &WorldModel,
    store: &ParamStore<f32>,
    first: &Tensor<f32>,
    conds: &[Tensor<f32>],
    texts: &[Vec<Option<usize>>],
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Tensor<f32>> {
    if texts.is_empty() {
        return Err(Error::Input("no text conditioning".into()));
    }
    let c = &model.config;
    let fd = first.dims().to_vec();
    let first_b = first.reshape(&[1, fd[0], fd[1], fd[2]])?;
    let conds_b = conds
        .iter()
        .map(|t| {
            let d = t.dims();
            t.reshape(&[1, d[0], d[1], d[2]])
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let denoiser = |z: &Tensor<f32>, t: usize| -> Result<Tensor<f32>> {
        let mut acc: Option<Tensor<f32>> = None;
        for rows in texts {
            let input = ModelInput {
                z_t: z.clone(),
                t: vec![t],
                alpha_bar: vec![sched.alpha_bar[t]],
                first: first_b.clone(),
                text: vec![rows.clone()],
                conds: conds_b.clone(),
            };
            let e = model.predict(store, &input)?;
            acc = Some(match acc {
                None => e,
                Some(a) => a.zip_map(&e, |x, y| x + y)?,
            });
        }
        let n = texts.len() as f32;
        Ok(acc.expect("non-empty").map(|v| v / n))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = sample_loop(sched, &denoiser, &[c.frames, fd[0], fd[1], fd[2]], cfg, &mut rng)?;
    let frames = (0..c.frames)
        .map(|i| from_latent(&z.index_first(i), c.patch))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&frames)?)
}

fn obs_inputs(model: &WorldModel, obs: &SceneObservation<f32>) -> Result<(Tensor<f32>, Vec<Tensor<f32>>)> {
    let p = model.config.patch;
    Ok((to_latent(&obs.rgb, p)?, observation_conds(obs, model.modalities(), p)?))
}

/// Action-tree conditioned sampling: one network pass per denoising step.
#[allow(clippy::too_many_arguments)]
pub fn sample_video(
    model: &WorldModel,
    store: &ParamStore<f32>,
    text: &TextEncoder,
    obs: &SceneObservation<f32>,
    instruction: &str,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Tensor<f32>> {
    let rows = text.tree_rows(instruction)?;
    let (first, conds) = obs_inputs(model, obs)?;
    sample_with_texts(model, store, &first, &conds, &[rows], sched, cfg, seed)
}

/// Decomposition baseline: one pass per primitive per step, noises averaged.
#[allow(clippy::too_many_arguments)]
pub fn sample_decomposed(
    model: &WorldModel,
    store: &ParamStore<f32>,
    text: &TextEncoder,
    obs: &SceneObservation<f32>,
    instruction: &str,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Tensor<f32>> {
    let rows = text.primitive_rows(instruction)?;
    let (first, conds) = obs_inputs(model, obs)?;
    sample_with_texts(model, store, &first, &conds, &rows, sched, cfg, seed)
}

/// Mean router scores over `observations`.
pub fn weight_report(
    model: &WorldModel,
    store: &ParamStore<f32>,
    observations: &[SceneObservation<f32>],
) -> Result<WeightReport> {
    let g = model
        .guidance
        .as_ref()
        .ok_or_else(|| Error::Config("model has no guidance branches".into()))?;
    let inputs = observations
        .iter()
        .map(|o| observation_conds(o, model.modalities(), model.config.patch))
        .collect::<Result<Vec<_>>>()?;
    guidance_report(g, store, &inputs)
}

/// Full training document: architecture, optimizer, noise schedule and
/// sampler defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub schedule: ScheduleConfig,
    pub sampler: SamplerConfig,
    pub embed_dim: usize,
    pub text_seed: u64,
    pub init_seed: u64,
}

impl RunConfig {
    pub fn with_defaults(mut self) -> Self {
        if self.embed_dim == 0 {
            self.embed_dim = 16;
        }
        self
    }
}

/// Builds a model for `cfg`, stores the dataset-mean mask prior and trains.
pub fn fit(
    cfg: &RunConfig,
    text: &TextEncoder,
    data: &[Prepared],
    on_log: impl FnMut(usize, f64),
) -> Result<(WorldModel, ParamStore<f32>, TrainLog)> {
    let (model, mut store) = build_model(fit_text(cfg.model.clone(), text), text, cfg.init_seed)?;
    store.assign(model.mask_prior, mean_mask(data)?)?;
    let sched = NoiseSchedule::from_config(&cfg.schedule)?;
    let log = train(&model, &mut store, data, &sched, &cfg.train, on_log)?;
    Ok((model, store, log))
}

/// Everything needed to rebuild a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub lexicon: LexiconFile,
    pub mode: TextMode,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
}

pub const META_FILE: &str = "checkpoint.json";

pub fn build_model(model: ModelConfig, text: &TextEncoder, seed: u64) -> Result<(WorldModel, ParamStore<f32>)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = WorldModel::new(model, text.table.vectors(), &mut store, &mut rng)?;
    Ok((m, store))
}

/// Model config sized to the text encoder.
pub fn fit_text(mut model: ModelConfig, text: &TextEncoder) -> ModelConfig {
    model.embed_dim = text.table.dim();
    model.n_max = text.n_max();
    model.vocab = text.vocab();
    model
}

pub fn save_checkpoint(dir: &Path, meta: &CheckpointMeta, store: &ParamStore<f32>) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_params(dir.join("params"), store)?;
    fs::write(dir.join(META_FILE), serde_json::to_vec_pretty(meta)?)?;
    Ok(())
}

pub struct Loaded {
    pub meta: CheckpointMeta,
    pub model: WorldModel,
    pub store: ParamStore<f32>,
    pub text: TextEncoder,
}

pub fn load_checkpoint(dir: &Path) -> Result<Loaded> {
    let meta_path = dir.join(META_FILE);
    if !meta_path.exists() {
        return Err(Error::MissingCheckpoint {
            variant: dir
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            path: dir.display().to_string(),
        });
    }
    let meta: CheckpointMeta = serde_json::from_slice(&fs::read(&meta_path)?)?;
    let text = TextEncoder::new(meta.lexicon.clone())?;
    let (model, mut store) = build_model(meta.model.clone(), &text, 0)?;
    load_params(dir.join("params"), &mut store)?;
    Ok(Loaded {
        meta,
        model,
        store,
        text,
    })
}
