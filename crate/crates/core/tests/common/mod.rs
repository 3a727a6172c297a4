#![allow(dead_code)]

pub mod oracles;

use wm_core::adapter::{Fusion, InjectionSchedule};
use wm_core::guidance::{GuidanceConfig, Modality, ALL_MODALITIES};
use wm_core::modalities::SyntheticExtractor;
use wm_core::model::{ModelConfig, WorldModel};
use wm_core::pipeline::{build_model, fit_text, prepare_all, Prepared, TextEncoder};
use wm_core::spriteworld::{all_templates, generate_episode, WorldConfig};
use wm_tensor::ParamStore;

pub const FRAMES: usize = 4;

pub fn world() -> WorldConfig {
    WorldConfig {
        frames: FRAMES,
        max_step: 4,
        ..Default::default()
    }
}

pub fn text() -> TextEncoder {
    let corpus: Vec<String> = all_templates().iter().map(|t| t.instruction()).collect();
    TextEncoder::for_corpus(&corpus, 8, 0).unwrap()
}

/// A small UNet: two levels, two decoder layers, both injected.
pub fn tiny_config(mods: Option<&[Modality]>, fusion: Fusion, text: &TextEncoder) -> ModelConfig {
    let cfg = ModelConfig {
        frames: FRAMES,
        channels: vec![8, 16],
        decoder_layers: 2,
        time_dim: 16,
        guidance: mods.map(|m| GuidanceConfig {
            modalities: m.to_vec(),
            router_hidden: 8,
            ..Default::default()
        }),
        injection: InjectionSchedule::new(2, 1, fusion),
        ..Default::default()
    };
    fit_text(cfg, text)
}

pub fn tiny_model(
    mods: Option<&[Modality]>,
    fusion: Fusion,
    text: &TextEncoder,
    seed: u64,
) -> (WorldModel, ParamStore<f32>) {
    build_model(tiny_config(mods, fusion, text), text, seed).unwrap()
}

pub fn full() -> Option<&'static [Modality]> {
    Some(&ALL_MODALITIES)
}

/// `n` prepared episodes cycling through the templates from `offset`.
pub fn episodes(text: &TextEncoder, n: usize, offset: usize) -> Vec<Prepared> {
    let all = all_templates();
    let eps: Vec<_> = (0..n)
        .map(|i| generate_episode(&world(), &all[(offset + i * 7) % all.len()], 100 + i as u64).unwrap())
        .collect();
    prepare_all(&eps, text, &SyntheticExtractor::default(), 4).unwrap()
}
