use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wm_core::adapter::{replicate_frames, replicate_temporal, Adapter, AdditiveInjection, CrossAttnInjection};
use wm_core::nn::Builder;
use wm_tensor::{Graph, ParamStore, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Sets every parameter in the store to fresh small random values.
fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let d = store.get(id).dims().to_vec();
        store.assign(id, Tensor::randn(&d, 0.3, &mut r)).unwrap();
    }
}

fn max_frame_diff(v: &Tensor<f64>, frames: usize) -> f64 {
    let per = v.numel() / frames;
    let mut m: f64 = 0.0;
    for t in 1..frames {
        for i in 0..per {
            m = m.max((v.data()[t * per + i] - v.data()[i]).abs());
        }
    }
    m
}

#[test]
fn replicate_index_probes() {
    let x = Tensor::<f64>::randn(&[3, 4, 5], 1.0, &mut rng(0));
    let r = replicate_temporal(&x, 8).unwrap();
    let mut probe = rng(1);
    for _ in 0..200 {
        use rand::Rng;
        let (t, c, i, j) = (
            probe.random_range(0..8),
            probe.random_range(0..3),
            probe.random_range(0..4),
            probe.random_range(0..5),
        );
        assert_eq!(r.get(&[t, c, i, j]), x.get(&[c, i, j]));
    }
    let one = replicate_temporal(&x, 1).unwrap();
    assert_eq!(one.dims(), &[1, 3, 4, 5]);
    assert_eq!(one.data(), x.data());

    let mut g = Graph::<f64>::new();
    let b = g.input(Tensor::randn(&[2, 3, 4, 5], 1.0, &mut rng(2)));
    let rep = replicate_frames(&mut g, b, 4).unwrap();
    let (src, out) = (g.value(b).clone(), g.value(rep).clone());
    assert_eq!(out.dims(), &[8, 3, 4, 5]);
    for s in 0..2 {
        for t in 0..4 {
            assert_eq!(out.index_first(s * 4 + t), src.index_first(s));
        }
    }
}

fn adapter(pos: bool, seed: u64, frames: usize) -> (Adapter, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let mut b = Builder::new(&mut store, &mut r);
    let a = Adapter::new(&mut b, "adapter", 4, 6, frames, pos);
    randomize(&mut store, seed + 100);
    (a, store)
}

#[test]
fn constant_in_time_input_stays_constant_without_positions() {
    let frames = 5;
    let (a, store) = adapter(false, 3, frames);
    let x = replicate_temporal(&Tensor::randn(&[4, 6, 6], 1.0, &mut rng(4)), frames).unwrap();
    let mut g = Graph::new();
    let xv = g.input(x);
    let y = a.adapt(&mut g, &store, xv).unwrap();
    assert_eq!(g.dims(y), &[frames, 6, 6, 6]);
    assert!(max_frame_diff(g.value(y), frames) < 1e-12);
}

#[test]
fn positions_break_time_symmetry() {
    let frames = 5;
    let (a, store) = adapter(true, 5, frames);
    let x = replicate_temporal(&Tensor::randn(&[4, 6, 6], 1.0, &mut rng(6)), frames).unwrap();
    let mut g = Graph::new();
    let xv = g.input(x);
    let y = a.adapt(&mut g, &store, xv).unwrap();
    assert!(max_frame_diff(g.value(y), frames) > 1e-6);
}

#[test]
fn staged_composition_matches_separate_stages() {
    let frames = 4;
    let (a, store) = adapter(true, 7, frames);
    let x = Tensor::randn(&[2 * frames, 4, 5, 5], 1.0, &mut rng(8));

    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let out = a.adapt(&mut g, &store, xv).unwrap();
    let composed = g.value(out).clone();

    // each stage in its own graph, feeding captured values forward
    let mut cur = x;
    for stage in 0..4 {
        let mut g = Graph::new();
        let v = g.input(cur);
        let y = match stage {
            0 => a.stage_spatial_conv(&mut g, &store, v),
            1 => a.stage_temporal_conv(&mut g, &store, v),
            2 => a.stage_spatial_attn(&mut g, &store, v),
            _ => a.stage_temporal_attn(&mut g, &store, v),
        }
        .unwrap();
        cur = g.value(y).clone();
    }
    assert!(composed.max_abs_diff(&cur) < 1e-12);
}

#[test]
fn temporal_conv_uses_replicate_padding() {
    let frames = 3;
    let (a, mut store) = adapter(false, 9, frames);
    // kernel taps [1, 0, 0] per channel: output frame t reads frame t-1 (edge clamped)
    let c = 6;
    let w = Tensor::from_fn(&[c, c, 3, 1], |i| {
        let (o, k, tap) = (i / (3 * c), (i / 3) % c, i % 3);
        if o == k && tap == 0 {
            1.0
        } else {
            0.0
        }
    });
    store.assign(a.temporal.weight, w).unwrap();
    store.assign(a.temporal.bias, Tensor::zeros(&[c])).unwrap();
    let x = Tensor::randn(&[frames, c, 2, 2], 1.0, &mut rng(10));
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = a.stage_temporal_conv(&mut g, &store, xv).unwrap();
    let y = g.value(y);
    assert_eq!(y.index_first(0), x.index_first(0));
    assert_eq!(y.index_first(1), x.index_first(0));
    assert_eq!(y.index_first(2), x.index_first(1));
}

fn additive(seed: u64) -> (AdditiveInjection, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let mut b = Builder::new(&mut store, &mut r);
    let inj = AdditiveInjection::new(&mut b, "inj", 3, 5);
    (inj, store)
}

fn run_additive(
    inj: &AdditiveInjection,
    s: &ParamStore<f64>,
    h: &Tensor<f64>,
    r: Option<&Tensor<f64>>,
    gd: &Tensor<f64>,
) -> Tensor<f64> {
    let mut g = Graph::new();
    let hv = g.input(h.clone());
    let rv = r.map(|r| g.input(r.clone()));
    let gv = g.input(gd.clone());
    let out = inj.forward(&mut g, s, hv, rv, gv).unwrap();
    g.value(out).clone()
}

#[test]
fn additive_injection_is_identity_at_init() {
    let (inj, store) = additive(11);
    let mut r = rng(12);
    let h = Tensor::randn(&[4, 5, 3, 3], 1.0, &mut r);
    let res = Tensor::randn(&[4, 5, 3, 3], 1.0, &mut r);
    let gd = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut r);
    let out = run_additive(&inj, &store, &h, Some(&res), &gd);
    let want = h.zip_map(&res, |a, b| a + b).unwrap();
    assert_eq!(out, want);
}

#[test]
fn additive_injection_matches_elementwise_oracle() {
    let (inj, mut store) = additive(13);
    randomize(&mut store, 14);
    let mut r = rng(15);
    let h = Tensor::randn(&[2, 5, 3, 4], 1.0, &mut r);
    let res = Tensor::randn(&[2, 5, 3, 4], 1.0, &mut r);
    let gd = Tensor::randn(&[2, 3, 3, 4], 1.0, &mut r);
    let out = run_additive(&inj, &store, &h, Some(&res), &gd);
    let w = store.get(inj.proj.weight);
    let bias = store.get(inj.proj.bias);
    let want = Tensor::from_fn(h.dims(), |i| {
        let (n, c, p) = (i / 60, (i / 12) % 5, i % 12);
        let proj = bias.data()[c]
            + (0..3)
                .map(|k| w.data()[c * 3 + k] * gd.data()[n * 36 + k * 12 + p])
                .sum::<f64>();
        h.data()[i] + res.data()[i] + proj
    });
    assert!(out.max_abs_diff(&want) < 1e-12);

    // residual = 0: the difference is the projection alone
    let zero = Tensor::zeros(h.dims());
    let only = run_additive(&inj, &store, &h, Some(&zero), &gd);
    let proj = run_additive(&inj, &store, &zero, None, &gd);
    assert!(only.zip_map(&h, |a, b| a - b).unwrap().max_abs_diff(&proj) < 1e-12);
}

#[test]
fn additive_injection_is_linear_in_guidance() {
    let (inj, mut store) = additive(16);
    randomize(&mut store, 17);
    let mut r = rng(18);
    let h = Tensor::randn(&[2, 5, 3, 3], 1.0, &mut r);
    let g1 = Tensor::randn(&[2, 3, 3, 3], 1.0, &mut r);
    let g2 = Tensor::randn(&[2, 3, 3, 3], 1.0, &mut r);
    let sum = g1.zip_map(&g2, |a, b| a + b).unwrap();
    let f = |gd: &Tensor<f64>| run_additive(&inj, &store, &h, None, gd);
    let (a, b, c, d) = (f(&sum), f(&g1), f(&g2), f(&Tensor::zeros(g1.dims())));
    let resid = Tensor::from_fn(a.dims(), |i| a.data()[i] - b.data()[i] - c.data()[i] + d.data()[i]);
    assert!(resid.max_abs() < 1e-12);
}

fn xattn(seed: u64, frames: usize) -> (CrossAttnInjection, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let mut b = Builder::new(&mut store, &mut r);
    let inj = CrossAttnInjection::new(&mut b, "x", 3, 4, frames);
    (inj, store)
}

fn run_xattn(inj: &CrossAttnInjection, s: &ParamStore<f64>, h: &Tensor<f64>, gd: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let hv = g.input(h.clone());
    let gv = g.input(gd.clone());
    let out = inj.forward(&mut g, s, hv, gv).unwrap();
    g.value(out).clone()
}

#[test]
fn cross_attention_is_identity_at_init() {
    let (inj, store) = xattn(19, 2);
    let mut r = rng(20);
    let h = Tensor::randn(&[2, 4, 3, 3], 1.0, &mut r);
    let gd = Tensor::randn(&[2, 3, 3, 3], 1.0, &mut r);
    assert_eq!(run_xattn(&inj, &store, &h, &gd), h);
}

/// Token matrix `[T·h·w, C]` of one clip from `[T, C, h, w]`.
fn tokens(x: &Tensor<f64>) -> Vec<Vec<f64>> {
    let d = x.dims();
    let (t, c, hw) = (d[0], d[1], d[2] * d[3]);
    (0..t * hw)
        .map(|n| (0..c).map(|k| x.data()[(n / hw) * c * hw + k * hw + n % hw]).collect())
        .collect()
}

fn linear(rows: &[Vec<f64>], w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Vec<Vec<f64>> {
    let (i, o) = (w.dims()[0], w.dims()[1]);
    rows.iter()
        .map(|r| {
            (0..o)
                .map(|j| (0..i).map(|k| r[k] * w.data()[k * o + j]).sum::<f64>() + b.map_or(0.0, |b| b.data()[j]))
                .collect()
        })
        .collect()
}

#[test]
fn cross_attention_matches_two_step_oracle() {
    let frames = 2;
    let (inj, mut store) = xattn(21, frames);
    randomize(&mut store, 22);
    let mut r = rng(23);
    let h = Tensor::randn(&[frames, 4, 2, 3], 1.0, &mut r);
    let gd = Tensor::randn(&[frames, 3, 2, 3], 1.0, &mut r);
    let out = run_xattn(&inj, &store, &h, &gd);

    let a = &inj.attn;
    let get = |l: &wm_core::nn::Linear| (store.get(l.weight).clone(), l.bias.map(|b| store.get(b).clone()));
    let (qt, kt) = (tokens(&h), tokens(&gd));
    let (wq, bq) = get(&a.q);
    let (wk, bk) = get(&a.k);
    let (wv, bv) = get(&a.v);
    let (wo, bo) = get(&a.o);
    let q = linear(&qt, &wq, bq.as_ref());
    let k = linear(&kt, &wk, bk.as_ref());
    let v = linear(&kt, &wv, bv.as_ref());
    let d = q[0].len() as f64;
    let mut att = Vec::new();
    for qi in &q {
        let logits: Vec<f64> = k
            .iter()
            .map(|kj| qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() / d.sqrt())
            .collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        let row: Vec<f64> = (0..v[0].len())
            .map(|c| e.iter().zip(&v).map(|(p, vj)| p / z * vj[c]).sum())
            .collect();
        att.push(row);
    }
    let o = linear(&att, &wo, bo.as_ref());
    let hw = 6;
    let want = Tensor::from_fn(h.dims(), |i| {
        let (t, c, p) = (i / (4 * hw), (i / hw) % 4, i % hw);
        h.data()[i] + o[t * hw + p][c]
    });
    assert!(out.max_abs_diff(&want) < 1e-10);
}

#[test]
fn single_guidance_token_gives_same_update_everywhere() {
    let (inj, mut store) = xattn(24, 1);
    randomize(&mut store, 25);
    let mut r = rng(26);
    let h = Tensor::randn(&[1, 4, 3, 3], 1.0, &mut r);
    let gd = Tensor::randn(&[1, 3, 1, 1], 1.0, &mut r);
    let out = run_xattn(&inj, &store, &h, &gd);
    let delta = out.zip_map(&h, |a, b| a - b).unwrap();
    for c in 0..4 {
        let first = delta.data()[c * 9];
        assert!((0..9).all(|p| (delta.data()[c * 9 + p] - first).abs() < 1e-12));
    }
}
