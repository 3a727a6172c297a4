//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 6, 7 and 8 judge trained models and are reported without
//! failing the run; every other criterion is a hard property and a FAIL
//! exits non-zero. `WM_ACCEPTANCE=1,4,10` restricts the run to a subset.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::oracles::{fuse_oracle, mask_oracle, random_frames, raw, ssim_oracle};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wm_core::action_tree::{build_lexicon, build_tree, embed_instruction, parse_instruction};
use wm_core::adapter::{schedule_layers, Fusion, InjectionSchedule, LayerSplit};
use wm_core::diffusion::{NoiseSchedule, SamplerConfig};
use wm_core::eval::{
    comparison_table, evaluate_model, flow_error, luma, psnr, ssim, ssim_plane, write_reports, EvalConfig,
    MetricsReport,
};
use wm_core::guidance::{fuse, GuidanceConfig, Modality, Router, ALL_MODALITIES};
use wm_core::modalities::{dilate, dynamic_mask, mask_iou, observe, SyntheticExtractor, MASK_THRESHOLD};
use wm_core::model::ModelConfig;
use wm_core::nn::Builder;
use wm_core::pipeline::{
    build_model, fit, fit_text, prepare, prepare_all, sample_with_texts, train, weight_report, Prepared, RunConfig,
    TextEncoder, TextMode, TrainConfig,
};
use wm_core::spriteworld::{all_templates, generate_episode, Dataset, DatasetConfig, WorldConfig, PREPS, VERBS};
use wm_tensor::gradcheck;
use wm_tensor::{Graph, ParamStore, Tensor};

// criterion 1
const ZERO_INIT_SEEDS: u64 = 10;
const ZERO_INIT_TOL: f64 = 1e-6;
// criterion 2
const GRADCHECK_SEEDS: u64 = 20;
// criterion 3
const SCORE_SUM_TOL: f64 = 1e-6;
const FUSION_TOL: f64 = 1e-12;
// criterion 4
const MASK_TOL: f64 = 1e-12;
const MASK_CASES: usize = 100;
const MIN_IOU: f64 = 0.9;
// criterion 6
const OVERFIT_EPISODES: usize = 10;
const OVERFIT_STEPS: usize = 500;
const OVERFIT_RATIO: f64 = 0.1;
const LOSS_WINDOW: usize = 10;
const TRAIN_EPISODES: usize = 2000;
const TRAIN_BUDGET_SECS: f64 = 1800.0;
// criteria 7 and 8
const SEEDS: u64 = 3;
const EVAL_EPISODES: usize = 24;
const EVAL_SAMPLER_STEPS: usize = 20;
const MIN_PSNR_GAIN: f64 = 0.5;
const MIN_SSIM_GAIN: f64 = 0.01;
// criterion 9
const ABLATION_STEPS: usize = 40;
const ABLATION_EVAL_EPISODES: usize = 4;
const INJECTION_POINTS: usize = 2;
// criterion 10
const SSIM_TOL: f64 = 1e-9;
const WEIGHT_OBSERVATIONS: usize = 100;
const UNIFORM_TOL: f64 = 1e-6;

const INSTRUCTION: &str = "pick the apple from the table and place it in the drawer";

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

fn world_text() -> TextEncoder {
    let corpus: Vec<String> = all_templates().iter().map(|t| t.instruction()).collect();
    TextEncoder::for_corpus(&corpus, 16, 0).unwrap()
}

fn zero_init_identity() -> Outcome {
    let text = world_text();
    let templates = all_templates();
    let ex = SyntheticExtractor::default();
    let sched = NoiseSchedule::default();
    let sampler = SamplerConfig {
        steps: 10,
        ..Default::default()
    };
    let mut worst = 0.0f64;
    for seed in 0..ZERO_INIT_SEEDS {
        // a non-empty modality subset from the seed bits, alternating fusion
        let bits = 1 + (seed as usize * 7) % 15;
        let mods: Vec<Modality> = (0..4)
            .filter(|i| bits & (1 << i) != 0)
            .map(|i| ALL_MODALITIES[i])
            .collect();
        let fusion = if seed % 2 == 0 { Fusion::Additive } else { Fusion::Xattn };
        let base_cfg = ModelConfig {
            guidance: None,
            injection: InjectionSchedule::new(6, 3, fusion),
            ..Default::default()
        };
        let guided_cfg = ModelConfig {
            guidance: Some(GuidanceConfig {
                modalities: mods.clone(),
                ..Default::default()
            }),
            ..base_cfg.clone()
        };
        let (base, bs) = build_model(fit_text(base_cfg, &text), &text, seed).unwrap();
        let (guided, gs) = build_model(fit_text(guided_cfg, &text), &text, seed).unwrap();
        let ep = generate_episode(
            &WorldConfig::default(),
            &templates[(seed as usize * 11) % templates.len()],
            seed,
        )
        .unwrap();
        let p = prepare(&ep, &text, &ex, 4).unwrap();
        let conds: Vec<Tensor<f32>> = p.conds_for(&mods).into_iter().cloned().collect();
        let rows = p.rows(TextMode::Tree);
        let a = sample_with_texts(&base, &bs, &p.first, &[], &rows, &sched, &sampler, seed).unwrap();
        let b = sample_with_texts(&guided, &gs, &p.first, &conds, &rows, &sched, &sampler, seed).unwrap();
        worst = worst.max(a.max_abs_diff(&b) as f64);
    }
    outcome(
        worst <= ZERO_INIT_TOL,
        format!("max |guided - base| = {worst:.2e} over {ZERO_INIT_SEEDS} seeds (tol {ZERO_INIT_TOL:e})"),
    )
}

fn gradient_check() -> Outcome {
    let reports = gradcheck::run_suite(GRADCHECK_SEEDS);
    let worst = reports.iter().map(|r| r.worst).fold(0.0, f64::max);
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    outcome(
        failed.is_empty(),
        format!(
            "{} kernels x {GRADCHECK_SEEDS} seeds, eps {:e}, worst relative error {worst:.2e} (tol {:e}){}",
            reports.len(),
            gradcheck::EPS,
            gradcheck::TOL,
            if failed.is_empty() {
                String::new()
            } else {
                format!(", failing: {failed:?}")
            }
        ),
    )
}

fn router_and_fusion() -> Outcome {
    let mut sum_err = 0.0f64;
    for patch in [1, 2] {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng(patch as u64);
        let mut b = Builder::new(&mut store, &mut r);
        let router = Router::new(&mut b, "r", 4, 2, 6, patch);
        let ids: Vec<_> = store.ids().collect();
        let mut init = rng(100 + patch as u64);
        for id in ids {
            let d = store.get(id).dims().to_vec();
            store.assign(id, Tensor::randn(&d, 0.5, &mut init)).unwrap();
        }
        let mut data = rng(200 + patch as u64);
        for _ in 0..100 {
            let mut g = Graph::new();
            let levels: Vec<_> = (0..4)
                .map(|_| g.input(Tensor::randn(&[2, 2, 4, 4], 3.0, &mut data)))
                .collect();
            let s = router.route(&mut g, &store, &levels).unwrap();
            let v = g.value(s);
            let (h, w) = (v.dims()[2], v.dims()[3]);
            for n in 0..2 {
                for y in 0..h {
                    for x in 0..w {
                        let total: f64 = (0..4).map(|m| v.get(&[n, m, y, x])).sum();
                        sum_err = sum_err.max((total - 1.0).abs());
                    }
                }
            }
        }
    }

    let mut r = rng(7);
    let mut fuse_err = 0.0f64;
    for _ in 0..20 {
        let pyr: Vec<Tensor<f64>> = (0..4).map(|_| Tensor::randn(&[2, 3, 5, 4], 1.0, &mut r)).collect();
        let logits = Tensor::<f64>::randn(&[2, 4, 5, 4], 2.0, &mut r);
        let mut g = Graph::new();
        let l = g.input(logits);
        let scores = wm_core::guidance::softmax_modalities(&mut g, l).unwrap();
        let sv = g.value(scores).clone();
        let lv: Vec<_> = pyr.iter().map(|p| g.input(p.clone())).collect();
        let f = fuse(&mut g, &lv, scores).unwrap();
        fuse_err = fuse_err.max(g.value(f).max_abs_diff(&fuse_oracle(&pyr, &sv)));
    }

    let pyr: Vec<Tensor<f64>> = (0..4).map(|_| Tensor::randn(&[1, 3, 4, 4], 1.0, &mut r)).collect();
    let one_hot_exact = (0..4).all(|sel| {
        let mut g = Graph::new();
        let lv: Vec<_> = pyr.iter().map(|p| g.input(p.clone())).collect();
        let sv = g.input(Tensor::from_fn(
            &[1, 4, 4, 4],
            |i| if i / 16 == sel { 1.0 } else { 0.0 },
        ));
        let f = fuse(&mut g, &lv, sv).unwrap();
        g.value(f) == &pyr[sel]
    });
    outcome(
        sum_err <= SCORE_SUM_TOL && fuse_err <= FUSION_TOL && one_hot_exact,
        format!(
            "score sum error {sum_err:.1e} (tol {SCORE_SUM_TOL:e}), fusion vs loop oracle {fuse_err:.1e} \
             (tol {FUSION_TOL:e}), one-hot exact: {one_hot_exact}"
        ),
    )
}

fn dynamic_masks() -> Outcome {
    let mut r = rng(0);
    let mut oracle_err = 0.0f64;
    for _ in 0..MASK_CASES {
        let t = r.random_range(2..6);
        let (h, w) = (r.random_range(1..7), r.random_range(1..7));
        let frames = random_frames(&mut r, t, h, w);
        let got = dynamic_mask(&frames, &raw()).unwrap();
        for (g, e) in got.data().iter().zip(mask_oracle(&frames)) {
            oracle_err = oracle_err.max((g - e).abs());
        }
    }
    let still = random_frames(&mut r, 1, 6, 6).remove(0);
    let zero = dynamic_mask(&[still.clone(), still.clone(), still], &raw())
        .unwrap()
        .max_abs()
        == 0.0;

    let ex = SyntheticExtractor::default();
    let cfg = WorldConfig::default();
    let mut ious = Vec::new();
    for (k, tpl) in all_templates().iter().step_by(3).enumerate() {
        let ep = generate_episode(&cfg, tpl, 40 + k as u64).unwrap();
        if ep.mask_gt.sum() == 0.0 {
            continue;
        }
        let m = dynamic_mask(&ep.frame_list(), &ex).unwrap();
        ious.push(mask_iou(&m, &dilate(&ep.mask_gt, 1).unwrap(), MASK_THRESHOLD).unwrap());
    }
    let iou = mean(&ious);
    let min = ious.iter().cloned().fold(f64::INFINITY, f64::min);
    outcome(
        oracle_err <= MASK_TOL && zero && iou >= MIN_IOU,
        format!(
            "oracle error {oracle_err:.1e} over {MASK_CASES} inputs (tol {MASK_TOL:e}), identical frames zero: {zero}, \
             sprite IoU mean {iou:.3} min {min:.3} over {} episodes (min mean {MIN_IOU})",
            ious.len()
        ),
    )
}

fn action_tree() -> Outcome {
    let templates = all_templates();
    let mut corpus: Vec<String> = templates.iter().map(|t| t.instruction()).collect();
    corpus.push(INSTRUCTION.to_string());
    let lex = build_lexicon(&corpus, &VERBS, &PREPS).unwrap();
    let tree = build_tree(&corpus, &lex).unwrap();
    let words = parse_instruction(INSTRUCTION, &tree).unwrap().words().join(",");
    let parsed = words == "pick,from,place,in";

    let text = world_text();
    let n_max = text.n_max();
    let dim = text.table.dim();
    let mut roundtrip = true;
    let mut layout = true;
    for t in &templates {
        let seq = parse_instruction(&t.instruction(), &tree).unwrap();
        roundtrip &= seq.pairs == t.action_pairs();
        let emb = embed_instruction(&seq, &text.table, n_max).unwrap();
        layout &= emb.width() == 2 * n_max * dim && emb.flat()[2 * seq.n() * dim..].iter().all(|&v| v == 0.0);
    }

    let small = common::text();
    let data = common::episodes(&small, 6, 0);
    let two = data
        .iter()
        .find(|p| p.primitive_rows.len() == 2)
        .expect("a two-primitive episode");
    let (m, s) = common::tiny_model(None, Fusion::Additive, &small, 0);
    let sched = NoiseSchedule::default();
    let cfg = SamplerConfig {
        steps: 4,
        ..Default::default()
    };
    let steps = sched.respaced(cfg.steps).unwrap().len();
    let mut counts = Vec::new();
    for mode in [TextMode::Tree, TextMode::Decomposed] {
        m.reset_forward_count();
        sample_with_texts(&m, &s, &two.first, &[], &two.rows(mode), &sched, &cfg, 0).unwrap();
        counts.push(m.forward_count());
    }
    let forwards = counts == [steps, 2 * steps];
    outcome(
        parsed && roundtrip && layout && forwards,
        format!(
            "example parses to [{words}], width {} with zero padding: {layout}, parse(generate) identity over {} templates: \
             {roundtrip}, forwards per {steps} steps tree {} vs decomposed {} (n = 2)",
            2 * n_max * dim,
            templates.len(),
            counts[0],
            counts[1]
        ),
    )
}

fn metric_sanity() -> Outcome {
    let mut r = rng(3);
    let v = Tensor::<f32>::from_fn(&[8, 3, 32, 32], |_| r.random_range(0.0..1.0));
    let p = psnr(&v, &v).unwrap().mean;
    let s = ssim(&v, &v).unwrap();
    let f = flow_error(&v, &v).unwrap();
    let identical = p == 99.0 && (s - 1.0).abs() < 1e-12 && f == 0.0;

    let mut ssim_err = 0.0f64;
    for seed in 0..5 {
        let mut r = rng(10 + seed);
        let a = Tensor::<f32>::from_fn(&[1, 3, 20, 24], |_| r.random_range(0.0..1.0));
        let noise = Tensor::<f32>::from_fn(&[1, 3, 20, 24], |_| r.random_range(-0.2..0.2));
        let b = Tensor::from_fn(a.dims(), |i| (a.data()[i] + noise.data()[i]).clamp(0.0, 1.0));
        let (la, lb) = (luma(&a, 0).unwrap(), luma(&b, 0).unwrap());
        ssim_err = ssim_err.max((ssim_plane(&la, &lb, 20, 24).unwrap() - ssim_oracle(&la, &lb, 20, 24)).abs());
    }

    let text = world_text();
    let (model, store) = build_model(fit_text(ModelConfig::default(), &text), &text, 0).unwrap();
    let templates = all_templates();
    let ex = SyntheticExtractor::default();
    let observations: Vec<_> = (0..WEIGHT_OBSERVATIONS)
        .map(|i| {
            let ep = generate_episode(&WorldConfig::default(), &templates[i % templates.len()], i as u64).unwrap();
            observe(&ep.frame_list(), &ep.depth_gt, &ex).unwrap()
        })
        .collect();
    let rep = weight_report(&model, &store, &observations).unwrap();
    let uniform_err = rep
        .levels
        .iter()
        .flatten()
        .map(|w| (w - 0.25).abs())
        .fold(0.0, f64::max);
    outcome(
        identical && ssim_err <= SSIM_TOL && uniform_err <= UNIFORM_TOL,
        format!(
            "identical clips: psnr {p} ssim {s:.12} flow {f}, ssim vs oracle {ssim_err:.1e} (tol {SSIM_TOL:e}), \
             fresh weights max |w - 0.25| {uniform_err:.1e} over {WEIGHT_OBSERVATIONS} observations"
        ),
    )
}

/// Lowest trailing-window mean loss, reported against the first window.
fn overfit(train_data: &[Prepared], text: &TextEncoder) -> Outcome {
    let (model, mut store) = build_model(fit_text(ModelConfig::default(), text), text, 0).unwrap();
    let cfg = TrainConfig {
        steps: OVERFIT_STEPS,
        log_every: 0,
        ..Default::default()
    };
    let log = train(
        &model,
        &mut store,
        &train_data[..OVERFIT_EPISODES],
        &NoiseSchedule::default(),
        &cfg,
        |_, _| {},
    )
    .unwrap();
    let initial = mean(&log.losses[..LOSS_WINDOW]);
    let (best, at) = log
        .losses
        .windows(LOSS_WINDOW)
        .enumerate()
        .map(|(i, w)| (mean(w), i + LOSS_WINDOW))
        .fold((f64::INFINITY, 0), |a, b| if b.0 < a.0 { b } else { a });
    outcome(
        best < OVERFIT_RATIO * initial,
        format!(
            "{OVERFIT_EPISODES}-episode overfit: initial loss {initial:.4}, best {LOSS_WINDOW}-step mean {best:.4} at step {at} \
             (ratio {:.3}, need < {OVERFIT_RATIO}) within {OVERFIT_STEPS} steps",
            best / initial
        ),
    )
}

#[derive(Clone, Copy)]
enum Kind {
    Full,
    Vanilla,
    TreeOnly,
}

impl Kind {
    fn name(self) -> &'static str {
        match self {
            Kind::Full => "full",
            Kind::Vanilla => "vanilla",
            Kind::TreeOnly => "tree_only",
        }
    }

    fn config(self, seed: u64) -> RunConfig {
        let mut cfg = RunConfig {
            init_seed: seed,
            ..Default::default()
        }
        .with_defaults();
        cfg.train.seed = seed;
        cfg.train.log_every = 0;
        if !matches!(self, Kind::Full) {
            cfg.model.guidance = None;
        }
        if matches!(self, Kind::Vanilla) {
            cfg.train.mode = TextMode::Decomposed;
        }
        cfg
    }
}

struct Trained {
    report: MetricsReport,
    train_seconds: f64,
}

fn train_and_eval(kind: Kind, seed: u64, text: &TextEncoder, train_data: &[Prepared], unseen: &[Prepared]) -> Trained {
    let cfg = kind.config(seed);
    let (model, store, log) = fit(&cfg, text, train_data, |_, _| {}).unwrap();
    let ec = EvalConfig {
        sampler: SamplerConfig {
            steps: EVAL_SAMPLER_STEPS,
            ..cfg.sampler.clone()
        },
        max_episodes: Some(EVAL_EPISODES),
        seed,
    };
    let sched = NoiseSchedule::from_config(&cfg.schedule).unwrap();
    let name = format!("{}_s{seed}", kind.name());
    let report = evaluate_model(&name, "unseen", &model, &store, unseen, cfg.train.mode, &sched, &ec).unwrap();
    println!(
        "  {name}: train {:.0}s, psnr {:.3} ssim {:.4} flow {:.4} forwards/step {:.2}",
        log.seconds, report.psnr, report.ssim, report.flow_error, report.forwards_per_step
    );
    Trained {
        report,
        train_seconds: log.seconds,
    }
}

fn ablations(text: &TextEncoder, train_data: &[Prepared], unseen: &[Prepared]) -> Outcome {
    let layers = ModelConfig::default().decoder_layers;
    let variants = [
        ("additive", InjectionSchedule::new(layers, 3, Fusion::Additive)),
        ("xattn", InjectionSchedule::new(layers, 3, Fusion::Xattn)),
        (
            "upper",
            InjectionSchedule::split(layers, LayerSplit::Upper, Fusion::Additive),
        ),
        (
            "lower",
            InjectionSchedule::split(layers, LayerSplit::Lower, Fusion::Additive),
        ),
    ];
    let mut reports = Vec::new();
    let mut points = Vec::new();
    for (name, injection) in variants {
        points.push(schedule_layers(&injection).unwrap());
        let mut cfg = RunConfig::default().with_defaults();
        cfg.model.injection = injection;
        cfg.train.steps = ABLATION_STEPS;
        cfg.train.log_every = 0;
        let (model, store, _) = fit(&cfg, text, train_data, |_, _| {}).unwrap();
        let ec = EvalConfig {
            sampler: SamplerConfig {
                steps: 10,
                ..Default::default()
            },
            max_episodes: Some(ABLATION_EVAL_EPISODES),
            seed: 0,
        };
        let sched = NoiseSchedule::from_config(&cfg.schedule).unwrap();
        reports.push(evaluate_model(name, "unseen", &model, &store, unseen, TextMode::Tree, &sched, &ec).unwrap());
    }
    let dir = tempfile::tempdir().unwrap();
    write_reports(dir.path(), &reports).unwrap();
    let table = comparison_table(&reports);
    print!("{}", table.lines().map(|l| format!("  {l}\n")).collect::<String>());
    let written = reports
        .iter()
        .all(|r| dir.path().join(format!("{}_unseen.json", r.variant)).exists());
    let finite = reports
        .iter()
        .all(|r| r.psnr.is_finite() && r.ssim.is_finite() && r.flow_error.is_finite());
    let two_each = points.iter().all(|p| p.len() == INJECTION_POINTS);
    outcome(
        written && finite && two_each && table.lines().count() == 1 + reports.len(),
        format!("4 variants trained {ABLATION_STEPS} steps and evaluated, injection layers {points:?}, reports written: {written}"),
    )
}

fn selected() -> Option<Vec<u32>> {
    std::env::var("WM_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect())
}

fn main() -> ExitCode {
    let only = selected();
    let want = |id: u32| only.as_ref().is_none_or(|o| o.contains(&id));
    let mut results: Vec<(u32, &str, bool, Outcome)> = Vec::new();
    let mut record = |id: u32, name: &'static str, asserted: bool, o: Outcome| {
        println!(
            "criterion {id} [{name}]: {} {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((id, name, asserted, o));
    };

    if want(1) {
        record(1, "zero-init identity", true, zero_init_identity());
    }
    if want(2) {
        record(2, "gradient check", true, gradient_check());
    }
    if want(3) {
        record(3, "router and fusion", true, router_and_fusion());
    }
    if want(4) {
        record(4, "dynamic mask", true, dynamic_masks());
    }
    if want(5) {
        record(5, "action tree", true, action_tree());
    }
    if want(10) {
        record(10, "metrics and weight report", true, metric_sanity());
    }

    if want(6) || want(7) || want(8) || want(9) {
        let start = Instant::now();
        let dc = DatasetConfig {
            eval_per_split: EVAL_EPISODES,
            ..Default::default()
        };
        let ds = Dataset::generate(&dc, TRAIN_EPISODES, 0).unwrap();
        let text = TextEncoder::for_corpus(&ds.corpus(), 16, 0).unwrap();
        let ex = SyntheticExtractor::default();
        let train_data = prepare_all(&ds.train, &text, &ex, 4).unwrap();
        let unseen = prepare_all(&ds.eval_unseen, &text, &ex, 4).unwrap();
        let data_seconds = start.elapsed().as_secs_f64();

        if want(9) {
            record(
                9,
                "ablations end to end",
                true,
                ablations(&text, &train_data[..200], &unseen),
            );
        }
        let mut runs: Vec<(Kind, u64, Trained)> = Vec::new();
        if want(6) || want(7) || want(8) {
            for seed in 0..SEEDS {
                for kind in [Kind::Full, Kind::Vanilla, Kind::TreeOnly] {
                    if seed > 0 && !(want(7) || want(8)) {
                        continue;
                    }
                    if matches!(kind, Kind::TreeOnly) && !want(8) {
                        continue;
                    }
                    if matches!(kind, Kind::Vanilla) && !(want(7) || want(8)) {
                        continue;
                    }
                    let t = train_and_eval(kind, seed, &text, &train_data, &unseen);
                    runs.push((kind, seed, t));
                }
            }
        }
        let pick = |k: &str, f: fn(&MetricsReport) -> f64| -> Vec<f64> {
            runs.iter()
                .filter(|(kind, _, _)| kind.name() == k)
                .map(|(_, _, t)| f(&t.report))
                .collect()
        };
        if want(6) {
            let o = overfit(&train_data, &text);
            let full_secs = data_seconds
                + runs
                    .iter()
                    .find(|(k, s, _)| matches!(k, Kind::Full) && *s == 0)
                    .unwrap()
                    .2
                    .train_seconds;
            let fast = full_secs <= TRAIN_BUDGET_SECS;
            record(
                6,
                "training",
                false,
                outcome(
                    o.pass && fast,
                    format!(
                        "{}; full toy run ({TRAIN_EPISODES} episodes, 32x32, F=8) data+train {full_secs:.0}s (budget {TRAIN_BUDGET_SECS:.0}s)",
                        o.detail
                    ),
                ),
            );
        }
        if want(7) {
            let (fp, vp) = (mean(&pick("full", |r| r.psnr)), mean(&pick("vanilla", |r| r.psnr)));
            let (fs, vs) = (mean(&pick("full", |r| r.ssim)), mean(&pick("vanilla", |r| r.ssim)));
            record(
                7,
                "full vs vanilla on unseen",
                false,
                outcome(
                    fp - vp >= MIN_PSNR_GAIN && fs - vs >= MIN_SSIM_GAIN,
                    format!(
                        "mean over {SEEDS} seeds: psnr {fp:.3} vs {vp:.3} ({:+.3} dB, need +{MIN_PSNR_GAIN}), \
                         ssim {fs:.4} vs {vs:.4} ({:+.4}, need +{MIN_SSIM_GAIN})",
                        fp - vp,
                        fs - vs
                    ),
                ),
            );
        }
        if want(8) {
            let (tf, vf) = (
                mean(&pick("tree_only", |r| r.flow_error)),
                mean(&pick("vanilla", |r| r.flow_error)),
            );
            let (tw, vw) = (
                mean(&pick("tree_only", |r| r.forwards_per_step)),
                mean(&pick("vanilla", |r| r.forwards_per_step)),
            );
            record(
                8,
                "tree vs decomposition",
                false,
                outcome(
                    tf <= vf && tw < vw,
                    format!("mean over {SEEDS} seeds: flow error tree {tf:.4} vs decomposed {vf:.4}, forwards/step {tw:.2} vs {vw:.2}"),
                ),
            );
        }
    }

    results.sort_by_key(|r| r.0);
    println!("\nsummary");
    for (id, name, asserted, o) in &results {
        let note = if !o.pass && !asserted {
            " (reported, not asserted)"
        } else {
            ""
        };
        println!(
            "criterion {id} [{name}]: {}{note}",
            if o.pass { "PASS" } else { "FAIL" }
        );
    }
    if results.iter().any(|(_, _, asserted, o)| *asserted && !o.pass) {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
