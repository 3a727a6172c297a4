//! Synthetic sprite-world manipulation episodes with analytic ground truth.
//!
//! A scene holds the places named by the instruction (mat, box, tray) on a
//! textured floor and one moving sprite: the target object, or the box lid
//! for `close`. Motion is integer-valued per frame, so flow is exact.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use wm_tensor::{io, Tensor};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Place {
    Mat,
    Box,
    Tray,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prep {
    From,
    In,
    On,
    Toward,
}

pub const COLORS: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];
pub const SHAPES: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];
pub const PLACES: [Place; 3] = [Place::Mat, Place::Box, Place::Tray];
pub const VERBS: [&str; 4] = ["pick", "place", "push", "close"];
pub const PREPS: [&str; 4] = ["from", "in", "on", "toward"];

impl Color {
    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }

    /// Whether cell (x, y) of an s×s sprite box is covered.
    fn covers(self, x: usize, y: usize, s: usize) -> bool {
        let c = (s as f64 - 1.0) / 2.0;
        let (fx, fy) = (x as f64 - c, y as f64 - c);
        match self {
            Shape::Square => true,
            Shape::Circle => fx * fx + fy * fy <= (s as f64 / 2.0 + 0.1).powi(2),
            Shape::Triangle => fx.abs() <= (y as f64 + 1.0) / 2.0,
        }
    }
}

impl Place {
    pub fn name(self) -> &'static str {
        match self {
            Place::Mat => "mat",
            Place::Box => "blue box",
            Place::Tray => "tray",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Place::Mat => "mat",
            Place::Box => "box",
            Place::Tray => "tray",
        }
    }

    /// Surface height above the floor.
    fn height(self) -> f32 {
        match self {
            Place::Mat => 0.2,
            Place::Box => 1.5,
            Place::Tray => 0.6,
        }
    }

    fn class(self) -> usize {
        match self {
            Place::Mat => CLASS_MAT,
            Place::Box => CLASS_BOX,
            Place::Tray => CLASS_TRAY,
        }
    }
}

impl Prep {
    pub fn name(self) -> &'static str {
        match self {
            Prep::From => "from",
            Prep::In => "in",
            Prep::On => "on",
            Prep::Toward => "toward",
        }
    }
}

/// Semantic classes; the channel order of `semantic_gt`.
pub const CLASS_NAMES: [&str; 9] = ["floor", "mat", "box", "tray", "lid", "red", "green", "blue", "yellow"];
pub const NUM_CLASSES: usize = CLASS_NAMES.len();
const CLASS_FLOOR: usize = 0;
const CLASS_MAT: usize = 1;
const CLASS_BOX: usize = 2;
const CLASS_TRAY: usize = 3;
const CLASS_LID: usize = 4;

/// Reference RGB per semantic class.
pub const PALETTE: [[f32; 3]; NUM_CLASSES] = [
    [0.55, 0.50, 0.45],
    [0.45, 0.25, 0.50],
    [0.10, 0.12, 0.40],
    [0.80, 0.80, 0.80],
    [0.45, 0.28, 0.10],
    [0.90, 0.15, 0.15],
    [0.15, 0.75, 0.20],
    [0.20, 0.40, 0.95],
    [0.95, 0.85, 0.10],
];

fn color_class(c: Color) -> usize {
    5 + COLORS.iter().position(|&x| x == c).unwrap()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Object {
    pub color: Color,
    pub shape: Shape,
}

impl Object {
    pub fn key(&self) -> String {
        format!("{}-{}", self.color.name(), self.shape.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    /// pick X from A and place it {prep} B
    PickPlace(Prep),
    /// pick X from A
    Pick,
    /// place X {prep} B
    Place(Prep),
    /// push X toward B
    Push,
    /// close the box
    Close,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    #[default]
    Scripted,
    Static,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TaskTemplate {
    pub pattern: Pattern,
    pub object: Option<Object>,
    pub source: Option<Place>,
    pub dest: Option<Place>,
    #[serde(default)]
    pub motion: Motion,
}

impl TaskTemplate {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Template(format!("{m}: {self:?}")));
        let (obj, src, dst) = (self.object.is_some(), self.source, self.dest);
        match self.pattern {
            Pattern::PickPlace(p) => {
                if !obj || src.is_none() || dst.is_none() || src == dst {
                    return bad("pick-place needs an object and two distinct places");
                }
                if !matches!(p, Prep::In | Prep::On) {
                    return bad("place takes `in` or `on`");
                }
            }
            Pattern::Pick => {
                if !obj || src.is_none() || dst.is_some() {
                    return bad("pick needs an object and a source");
                }
            }
            Pattern::Place(p) => {
                if !obj || src.is_some() || dst.is_none() || !matches!(p, Prep::In | Prep::On) {
                    return bad("place needs an object, a destination and `in`/`on`");
                }
            }
            Pattern::Push => {
                if !obj || src.is_some() || dst.is_none() {
                    return bad("push needs an object and a destination");
                }
            }
            Pattern::Close => {
                if obj || src.is_some() || dst != Some(Place::Box) {
                    return bad("close applies to the box only");
                }
            }
        }
        Ok(())
    }

    fn obj_text(&self) -> String {
        let o = self.object.expect("validated");
        format!("the {} {}", o.color.name(), o.shape.name())
    }

    pub fn instruction(&self) -> String {
        let place = |p: Option<Place>| format!("the {}", p.expect("validated").name());
        match self.pattern {
            Pattern::PickPlace(p) => format!(
                "pick {} from {} and place it {} {}",
                self.obj_text(),
                place(self.source),
                p.name(),
                place(self.dest)
            ),
            Pattern::Pick => format!("pick {} from {}", self.obj_text(), place(self.source)),
            Pattern::Place(p) => format!("place {} {} {}", self.obj_text(), p.name(), place(self.dest)),
            Pattern::Push => format!("push {} toward {}", self.obj_text(), place(self.dest)),
            Pattern::Close => format!("close {}", place(self.dest)),
        }
    }

    pub fn action_pairs(&self) -> Vec<(String, Option<String>)> {
        let pair = |v: &str, p: Option<Prep>| (v.to_string(), p.map(|p| p.name().to_string()));
        match self.pattern {
            Pattern::PickPlace(p) => vec![pair("pick", Some(Prep::From)), pair("place", Some(p))],
            Pattern::Pick => vec![pair("pick", Some(Prep::From))],
            Pattern::Place(p) => vec![pair("place", Some(p))],
            Pattern::Push => vec![pair("push", Some(Prep::Toward))],
            Pattern::Close => vec![pair("close", None)],
        }
    }

    fn pattern_key(&self) -> String {
        self.action_pairs()
            .iter()
            .map(|(v, p)| format!("{v}{}", p.as_deref().unwrap_or("")))
            .collect::<Vec<_>>()
            .join("-")
    }

    /// Directory-safe combination key.
    pub fn task_id(&self) -> String {
        let opt = |p: Option<Place>| p.map_or("none", Place::key);
        let mut id = format!(
            "{}_{}_{}_{}",
            self.pattern_key(),
            self.object.map_or("none".to_string(), |o| o.key()),
            opt(self.source),
            opt(self.dest)
        );
        if self.motion == Motion::Static {
            id.push_str("_static");
        }
        id
    }

    /// (verb, object) combinations; `close` pairs with its place.
    pub fn verb_object_combos(&self) -> Vec<(String, String)> {
        let obj = self
            .object
            .map_or_else(|| self.dest.map_or("none", Place::key).to_string(), |o| o.key());
        self.action_pairs().into_iter().map(|(v, _)| (v, obj.clone())).collect()
    }

    pub fn verb_prep_combos(&self) -> Vec<(String, String)> {
        self.action_pairs()
            .into_iter()
            .map(|(v, p)| (v, p.unwrap_or_else(|| "none".into())))
            .collect()
    }

    /// Atomic tokens: verbs, prepositions, colors, shapes, places.
    pub fn atoms(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for (v, p) in self.action_pairs() {
            out.insert(format!("verb:{v}"));
            if let Some(p) = p {
                out.insert(format!("prep:{p}"));
            }
        }
        if let Some(o) = self.object {
            out.insert(format!("color:{}", o.color.name()));
            out.insert(format!("shape:{}", o.shape.name()));
        }
        for p in [self.source, self.dest].into_iter().flatten() {
            out.insert(format!("place:{}", p.key()));
        }
        out
    }
}

/// Every template of the grammar, in a fixed order.
pub fn all_templates() -> Vec<TaskTemplate> {
    let mut out = Vec::new();
    let t = |pattern, object, source, dest| TaskTemplate {
        pattern,
        object,
        source,
        dest,
        motion: Motion::Scripted,
    };
    let fits = |p: Prep, dest: Place| match p {
        Prep::In => matches!(dest, Place::Box | Place::Tray),
        Prep::On => matches!(dest, Place::Mat | Place::Tray),
        _ => false,
    };
    for color in COLORS {
        for shape in SHAPES {
            let o = Some(Object { color, shape });
            for src in PLACES {
                for dst in PLACES {
                    for p in [Prep::In, Prep::On] {
                        if src != dst && fits(p, dst) {
                            out.push(t(Pattern::PickPlace(p), o, Some(src), Some(dst)));
                        }
                    }
                }
            }
            for src in PLACES {
                out.push(t(Pattern::Pick, o, Some(src), None));
            }
            for dst in PLACES {
                for p in [Prep::In, Prep::On] {
                    if fits(p, dst) {
                        out.push(t(Pattern::Place(p), o, None, Some(dst)));
                    }
                }
                out.push(t(Pattern::Push, o, None, Some(dst)));
            }
        }
    }
    out.push(t(Pattern::Close, None, None, Some(Place::Box)));
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub size: usize,
    /// Predicted frames; episodes hold `frames + 1` images.
    pub frames: usize,
    pub sprite: usize,
    pub place: usize,
    pub lift: usize,
    /// Largest per-frame displacement per axis.
    pub max_step: i32,
    pub texture: f32,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            size: 32,
            frames: 8,
            sprite: 6,
            place: 10,
            lift: 6,
            max_step: 2,
            texture: 0.03,
        }
    }
}

/// Max per-frame displacement per axis; matches the flow search radius.
pub const MAX_STEP: i32 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: i32,
    pub y: i32,
    pub w: i32,
    pub h: i32,
}

impl Rect {
    fn gap_overlaps(&self, o: &Rect, gap: i32) -> bool {
        self.x - gap < o.x + o.w
            && o.x - gap < self.x + self.w
            && self.y - gap < o.y + o.h
            && o.y - gap < self.y + self.h
    }

    pub fn contains_rect(&self, o: &Rect) -> bool {
        o.x >= self.x && o.y >= self.y && o.x + o.w <= self.x + self.w && o.y + o.h <= self.y + self.h
    }

    fn center(&self) -> (f64, f64) {
        (self.x as f64 + self.w as f64 / 2.0, self.y as f64 + self.h as f64 / 2.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub places: Vec<(Place, Rect)>,
    /// Top-left corner of the moving sprite per frame.
    pub trajectory: Vec<(i32, i32)>,
    /// Extent of the moving sprite's bounding box.
    pub mover: (i32, i32),
}

impl Layout {
    pub fn place_rect(&self, p: Place) -> Option<Rect> {
        self.places.iter().find(|(q, _)| *q == p).map(|(_, r)| *r)
    }

    pub fn mover_rect(&self, t: usize) -> Rect {
        let (x, y) = self.trajectory[t];
        Rect {
            x,
            y,
            w: self.mover.0,
            h: self.mover.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Episode {
    pub instruction: String,
    pub template: TaskTemplate,
    pub task_id: String,
    pub seed: u64,
    /// `[F+1, 3, H, W]` in [0, 1].
    pub frames: Tensor<f32>,
    /// Raw first-frame depth `[1, H, W]` (larger is farther).
    pub depth_gt: Tensor<f32>,
    /// First-frame one-hot classes `[NUM_CLASSES, H, W]`.
    pub semantic_gt: Tensor<f32>,
    /// Union of moved-sprite footprints `[1, H, W]`.
    pub mask_gt: Tensor<f32>,
    /// Per-pixel (dx, dy) from frame t to t+1, `[F, 2, H, W]`.
    pub flow_gt: Tensor<f32>,
    pub layout: Layout,
}

impl Episode {
    pub fn frame(&self, t: usize) -> Tensor<f32> {
        self.frames.index_first(t)
    }

    pub fn frame_list(&self) -> Vec<Tensor<f32>> {
        (0..self.frames.dims()[0]).map(|t| self.frame(t)).collect()
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

enum Mover {
    Object(Object),
    Lid,
}

impl Mover {
    fn covers(&self, x: usize, y: usize, s: usize) -> bool {
        match self {
            Mover::Object(o) => o.shape.covers(x, y, s),
            Mover::Lid => true,
        }
    }

    fn class(&self) -> usize {
        match self {
            Mover::Object(o) => color_class(o.color),
            Mover::Lid => CLASS_LID,
        }
    }
}

fn sample_layout(cfg: &WorldConfig, tpl: &TaskTemplate, rng: &mut ChaCha8Rng) -> Option<Layout> {
    let n = cfg.size as i32;
    let (pw, s) = (cfg.place as i32, cfg.sprite as i32);
    let margin = 1;
    let mut names: Vec<Place> = [tpl.source, tpl.dest].into_iter().flatten().collect();
    names.dedup();
    let rand_rect = |rng: &mut ChaCha8Rng, w: i32, h: i32| Rect {
        x: rng.random_range(margin..=n - w - margin),
        y: rng.random_range(margin..=n - h - margin),
        w,
        h,
    };
    let mut places: Vec<(Place, Rect)> = Vec::new();
    for p in names {
        let r = rand_rect(rng, pw, pw);
        if places.iter().any(|(_, o)| r.gap_overlaps(o, 2)) {
            return None;
        }
        places.push((p, r));
    }
    let rect_of = |p: Option<Place>| places.iter().find(|(q, _)| Some(*q) == p).map(|(_, r)| *r);
    let centered = |r: Rect, w: i32, h: i32| (r.x + (r.w - w) / 2, r.y + (r.h - h) / 2);

    let (mover, start, end) = match tpl.pattern {
        Pattern::Close => {
            let bx = rect_of(tpl.dest)?;
            let side = if rng.random_bool(0.5) { -1 } else { 1 };
            let lid = Rect {
                x: bx.x + side * (pw + 1),
                ..bx
            };
            if lid.x < 0 || lid.x + lid.w > n {
                return None;
            }
            ((pw, pw), (lid.x, lid.y), (bx.x, bx.y))
        }
        Pattern::PickPlace(_) | Pattern::Pick => {
            let src = rect_of(tpl.source)?;
            let (cx, cy) = centered(src, s, s);
            let start = (cx + rng.random_range(-1..=1), cy + rng.random_range(-1..=1));
            let end = match tpl.pattern {
                Pattern::Pick => (start.0, start.1 - cfg.lift as i32),
                _ => centered(rect_of(tpl.dest)?, s, s),
            };
            ((s, s), start, end)
        }
        Pattern::Place(_) | Pattern::Push => {
            let start_rect = rand_rect(rng, s, s);
            if places.iter().any(|(_, o)| start_rect.gap_overlaps(o, 1)) {
                return None;
            }
            let start = (start_rect.x, start_rect.y);
            let dst = rect_of(tpl.dest)?;
            let end = match tpl.pattern {
                Pattern::Place(_) => centered(dst, s, s),
                _ => {
                    // stop just short of the destination
                    let (tx, ty) = dst.center();
                    let (sx, sy) = start_rect.center();
                    let (dx, dy) = (tx - sx, ty - sy);
                    let len = dx.abs().max(dy.abs());
                    let stop = (pw + s) as f64 / 2.0 + 1.0;
                    if len <= stop {
                        return None;
                    }
                    let k = (len - stop) / len;
                    (start.0 + (dx * k).round() as i32, start.1 + (dy * k).round() as i32)
                }
            };
            ((s, s), start, end)
        }
    };
    let (start, end) = if tpl.motion == Motion::Static {
        (start, start)
    } else {
        (start, end)
    };
    let f = cfg.frames as i32;
    let trajectory: Vec<(i32, i32)> = (0..=f)
        .map(|t| {
            let lerp = |a: i32, b: i32| a + ((b - a) as f64 * t as f64 / f as f64).round() as i32;
            (lerp(start.0, end.0), lerp(start.1, end.1))
        })
        .collect();
    let travel = (end.0 - start.0).abs().max((end.1 - start.1).abs());
    if tpl.motion == Motion::Scripted && travel < s.min(mover.0) {
        return None;
    }
    for w in trajectory.windows(2) {
        let cap = cfg.max_step.min(MAX_STEP);
        if (w[1].0 - w[0].0).abs() > cap || (w[1].1 - w[0].1).abs() > cap {
            return None;
        }
    }
    for &(x, y) in &trajectory {
        if x < 0 || y < 0 || x + mover.0 > n || y + mover.1 > n {
            return None;
        }
    }
    Some(Layout {
        places,
        trajectory,
        mover,
    })
}

const LAYOUT_ATTEMPTS: usize = 5000;

/// Renders an episode; deterministic in (config, template, seed).
pub fn generate_episode(cfg: &WorldConfig, tpl: &TaskTemplate, seed: u64) -> Result<Episode> {
    tpl.validate()?;
    if cfg.frames == 0 || cfg.sprite == 0 || cfg.place < cfg.sprite + 2 || cfg.size < 2 * cfg.place + 4 {
        return Err(Error::Config(format!("world config too small: {cfg:?}")));
    }
    let task_id = tpl.task_id();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(&task_id));
    let layout = (0..LAYOUT_ATTEMPTS)
        .find_map(|_| sample_layout(cfg, tpl, &mut rng))
        .ok_or_else(|| Error::Template(format!("no in-canvas layout for {task_id}")))?;

    let (n, f) = (cfg.size, cfg.frames);
    let plane = n * n;
    let texture: Vec<[f32; 3]> = (0..plane)
        .map(|_| {
            let mut c = PALETTE[CLASS_FLOOR];
            for v in &mut c {
                *v += rng.random_range(-cfg.texture..=cfg.texture);
            }
            c
        })
        .collect();

    let mover = match (tpl.pattern, tpl.object) {
        (Pattern::Close, _) => Mover::Lid,
        (_, Some(o)) => Mover::Object(o),
        _ => unreachable!("validated"),
    };

    // static layers: class and depth per pixel
    let floor_depth = |y: usize| 10.0 + 0.05 * (n - 1 - y) as f32;
    let mut base_class = vec![CLASS_FLOOR; plane];
    let mut base_depth: Vec<f32> = (0..plane).map(|i| floor_depth(i / n)).collect();
    for (p, r) in &layout.places {
        for y in r.y..r.y + r.h {
            for x in r.x..r.x + r.w {
                let i = y as usize * n + x as usize;
                base_class[i] = p.class();
                base_depth[i] = floor_depth(y as usize) - p.height();
            }
        }
    }

    let mut frames = vec![0.0f32; (f + 1) * 3 * plane];
    let mut mask = vec![0.0f32; plane];
    let mut flow = vec![0.0f32; f * 2 * plane];
    let mut depth0 = base_depth.clone();
    let mut class0 = base_class.clone();
    let moved = layout.trajectory.first() != layout.trajectory.last();
    let lift_of = |t: usize| -> f32 {
        if tpl.pattern == Pattern::Pick {
            (layout.trajectory[0].1 - layout.trajectory[t].1) as f32
        } else {
            0.0
        }
    };
    for t in 0..=f {
        let mut class = base_class.clone();
        let (mx, my) = layout.trajectory[t];
        let (mw, mh) = layout.mover;
        let step = layout.trajectory.get(t + 1).map(|&(x, y)| (x - mx, y - my));
        for sy in 0..mh as usize {
            for sx in 0..mw as usize {
                if !mover.covers(sx, sy, mw as usize) {
                    continue;
                }
                let (x, y) = (mx as usize + sx, my as usize + sy);
                let i = y * n + x;
                if t == 0 {
                    let under = base_depth[i];
                    depth0[i] = match mover {
                        Mover::Lid => floor_depth(y) - Place::Box.height() - 0.2,
                        Mover::Object(_) => under - 0.6 - 0.1 * lift_of(0),
                    };
                    class0[i] = mover.class();
                }
                class[i] = mover.class();
                if moved {
                    mask[i] = 1.0;
                }
                if let (Some((dx, dy)), true) = (step, t < f) {
                    flow[(t * 2) * plane + i] = dx as f32;
                    flow[(t * 2 + 1) * plane + i] = dy as f32;
                }
            }
        }
        for i in 0..plane {
            let rgb = if class[i] == CLASS_FLOOR {
                texture[i]
            } else {
                PALETTE[class[i]]
            };
            for c in 0..3 {
                frames[(t * 3 + c) * plane + i] = rgb[c];
            }
        }
    }

    let mut sem = vec![0.0f32; NUM_CLASSES * plane];
    for (i, &c) in class0.iter().enumerate() {
        sem[c * plane + i] = 1.0;
    }

    Ok(Episode {
        instruction: tpl.instruction(),
        template: tpl.clone(),
        task_id,
        seed,
        frames: Tensor::new(&[f + 1, 3, n, n], frames)?,
        depth_gt: Tensor::new(&[1, n, n], depth0)?,
        semantic_gt: Tensor::new(&[NUM_CLASSES, n, n], sem)?,
        mask_gt: Tensor::new(&[1, n, n], mask)?,
        flow_gt: Tensor::new(&[f, 2, n, n], flow)?,
        layout,
    })
}

const SPLIT_ATTEMPTS: u64 = 256;

/// Compositional split: every unseen template carries a verb-object or
/// verb-preposition combination absent from the seen set, and every atom
/// stays covered by the seen set.
///
/// Whole combination groups move to the unseen side, so when no grouping hits
/// the exact unseen count the closest smaller split is returned.
pub fn split_tasks(
    templates: &[TaskTemplate],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<TaskTemplate>, Vec<TaskTemplate>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio {ratio} outside (0, 1)")));
    }
    let n = templates.len();
    let target = n - ((ratio * n as f64).round() as usize).min(n);
    if target == 0 || target == n {
        return Err(Error::Config(format!("{n} templates cannot be split at ratio {ratio}")));
    }
    let mut groups: BTreeMap<(u8, String, String), Vec<usize>> = BTreeMap::new();
    for (i, t) in templates.iter().enumerate() {
        for (v, o) in t.verb_object_combos() {
            groups.entry((0, v, o)).or_default().push(i);
        }
        for (v, p) in t.verb_prep_combos() {
            groups.entry((1, v, p)).or_default().push(i);
        }
    }
    let all_atoms: BTreeSet<String> = templates.iter().flat_map(|t| t.atoms()).collect();
    let covered = |unseen: &[bool]| -> bool {
        let seen: BTreeSet<String> = templates
            .iter()
            .zip(unseen)
            .filter(|(_, &u)| !u)
            .flat_map(|(t, _)| t.atoms())
            .collect();
        seen == all_atoms
    };
    let keys: Vec<_> = groups.keys().cloned().collect();
    let mut best: Option<Vec<bool>> = None;
    let mut best_count = 0;
    for attempt in 0..SPLIT_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(attempt));
        let mut order = keys.clone();
        order.shuffle(&mut rng);
        let mut unseen = vec![false; n];
        let mut count = 0;
        for k in &order {
            let fresh: Vec<usize> = groups[k].iter().copied().filter(|&i| !unseen[i]).collect();
            if fresh.is_empty() || count + fresh.len() > target {
                continue;
            }
            for &i in &fresh {
                unseen[i] = true;
            }
            if covered(&unseen) {
                count += fresh.len();
            } else {
                for &i in &fresh {
                    unseen[i] = false;
                }
            }
            if count == target {
                break;
            }
        }
        if count > best_count {
            best_count = count;
            best = Some(unseen);
        }
        if best_count == target {
            break;
        }
    }
    let unseen = best.ok_or_else(|| Error::Config(format!("{n} templates admit no compositional split")))?;
    let (mut s, mut u) = (Vec::new(), Vec::new());
    for (t, flag) in templates.iter().zip(unseen) {
        if flag {
            u.push(t.clone());
        } else {
            s.push(t.clone());
        }
    }
    Ok((s, u))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Seen,
    Unseen,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Seen => "seen",
            Split::Unseen => "unseen",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub instruction: String,
    pub task_id: String,
    pub seed: u64,
    pub split: Split,
    pub template: TaskTemplate,
    pub layout: Layout,
}

pub fn frame_name(t: usize) -> String {
    format!("frame_{t:04}.mdtn")
}

pub fn episode_dir(root: &Path, task_id: &str, seed: u64) -> PathBuf {
    root.join("episodes").join(task_id).join(seed.to_string())
}

/// Writes `episodes/<task_id>/<seed>/` under `root`; returns the directory.
pub fn write_episode(root: &Path, ep: &Episode, split: Split) -> Result<PathBuf> {
    let dir = episode_dir(root, &ep.task_id, ep.seed);
    fs::create_dir_all(&dir)?;
    for t in 0..ep.frames.dims()[0] {
        io::write(dir.join(frame_name(t)), &ep.frame(t))?;
    }
    io::write(dir.join("depth.mdtn"), &ep.depth_gt)?;
    io::write(dir.join("sem.mdtn"), &ep.semantic_gt)?;
    io::write(dir.join("mask.mdtn"), &ep.mask_gt)?;
    io::write(dir.join("flow.mdtn"), &ep.flow_gt)?;
    let meta = EpisodeMeta {
        instruction: ep.instruction.clone(),
        task_id: ep.task_id.clone(),
        seed: ep.seed,
        split,
        template: ep.template.clone(),
        layout: ep.layout.clone(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    Ok(dir)
}

/// Loads consecutive `frame_XXXX.mdtn` files from a directory.
pub fn read_frames(dir: &Path) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::new();
    loop {
        let p = dir.join(frame_name(out.len()));
        if !p.exists() {
            break;
        }
        out.push(io::read(p)?);
    }
    if out.is_empty() {
        return Err(Error::Input(format!("no frame_0000.mdtn in {}", dir.display())));
    }
    Ok(out)
}

pub fn read_episode(dir: &Path) -> Result<(Episode, Split)> {
    let meta: EpisodeMeta = serde_json::from_slice(&fs::read(dir.join("meta.json"))?)?;
    let frames = read_frames(dir)?;
    let refs: Vec<Tensor<f32>> = frames;
    Ok((
        Episode {
            instruction: meta.instruction,
            template: meta.template,
            task_id: meta.task_id,
            seed: meta.seed,
            frames: Tensor::stack(&refs)?,
            depth_gt: io::read(dir.join("depth.mdtn"))?,
            semantic_gt: io::read(dir.join("sem.mdtn"))?,
            mask_gt: io::read(dir.join("mask.mdtn"))?,
            flow_gt: io::read(dir.join("flow.mdtn"))?,
            layout: meta.layout,
        },
        meta.split,
    ))
}

/// Every episode directory under `root/episodes`, sorted.
pub fn list_episodes(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let base = root.join("episodes");
    if !base.is_dir() {
        return Err(Error::Input(format!("{} has no episodes/ directory", root.display())));
    }
    for task in fs::read_dir(&base)? {
        let task = task?.path();
        if !task.is_dir() {
            continue;
        }
        for ep in fs::read_dir(&task)? {
            let ep = ep?.path();
            if ep.join("meta.json").exists() {
                out.push(ep);
            }
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub world: WorldConfig,
    pub split_ratio: f64,
    pub split_seed: u64,
    pub eval_per_split: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            split_ratio: 0.9,
            split_seed: 0,
            eval_per_split: 200,
        }
    }
}

/// In-memory dataset: training episodes on seen templates plus held-out
/// evaluation episodes for seen and unseen templates.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub seen: Vec<TaskTemplate>,
    pub unseen: Vec<TaskTemplate>,
    pub train: Vec<Episode>,
    pub eval_seen: Vec<Episode>,
    pub eval_unseen: Vec<Episode>,
}

fn episodes_for(
    cfg: &WorldConfig,
    templates: &[TaskTemplate],
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Episode>> {
    (0..count)
        .map(|i| {
            // cycle templates so every one is covered before repeats
            let tpl = &templates[i % templates.len()];
            generate_episode(cfg, tpl, rng.random::<u32>() as u64)
        })
        .collect()
}

impl Dataset {
    pub fn generate(cfg: &DatasetConfig, train: usize, seed: u64) -> Result<Self> {
        let (mut seen, unseen) = split_tasks(&all_templates(), cfg.split_ratio, cfg.split_seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        seen.shuffle(&mut rng);
        let train_eps = episodes_for(&cfg.world, &seen, train, &mut rng)?;
        let eval_seen = episodes_for(&cfg.world, &seen, cfg.eval_per_split, &mut rng)?;
        let eval_unseen = episodes_for(&cfg.world, &unseen, cfg.eval_per_split, &mut rng)?;
        Ok(Self {
            seen,
            unseen,
            train: train_eps,
            eval_seen,
            eval_unseen,
        })
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        let groups = [
            (&self.train, Split::Train),
            (&self.eval_seen, Split::Seen),
            (&self.eval_unseen, Split::Unseen),
        ];
        for (eps, split) in groups {
            for ep in eps {
                write_episode(root, ep, split)?;
            }
        }
        let split_doc = serde_json::json!({
            "seen": self.seen.iter().map(TaskTemplate::task_id).collect::<Vec<_>>(),
            "unseen": self.unseen.iter().map(TaskTemplate::task_id).collect::<Vec<_>>(),
        });
        fs::write(root.join("split.json"), serde_json::to_vec_pretty(&split_doc)?)?;
        Ok(())
    }

    pub fn read(root: &Path) -> Result<Self> {
        let mut by_split: HashMap<&'static str, Vec<Episode>> = HashMap::new();
        let mut seen = BTreeSet::new();
        let mut unseen = BTreeSet::new();
        for dir in list_episodes(root)? {
            let (ep, split) = read_episode(&dir)?;
            match split {
                Split::Unseen => unseen.insert(ep.template.clone()),
                _ => seen.insert(ep.template.clone()),
            };
            by_split.entry(split.name()).or_default().push(ep);
        }
        let mut take = |k: &str| by_split.remove(k).unwrap_or_default();
        Ok(Self {
            train: take("train"),
            eval_seen: take("seen"),
            eval_unseen: take("unseen"),
            seen: seen.into_iter().collect(),
            unseen: unseen.into_iter().collect(),
        })
    }

    pub fn corpus(&self) -> Vec<String> {
        self.seen
            .iter()
            .chain(&self.unseen)
            .map(TaskTemplate::instruction)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grammar_templates_are_valid_and_unique() {
        let all = all_templates();
        assert_eq!(all.len(), 12 * (8 + 3 + 4 + 3) + 1);
        let ids: BTreeSet<String> = all.iter().map(TaskTemplate::task_id).collect();
        assert_eq!(ids.len(), all.len());
        for t in &all {
            t.validate().unwrap();
        }
    }

    #[test]
    fn long_form_instruction() {
        let t = TaskTemplate {
            pattern: Pattern::PickPlace(Prep::In),
            object: Some(Object {
                color: Color::Red,
                shape: Shape::Square,
            }),
            source: Some(Place::Mat),
            dest: Some(Place::Box),
            motion: Motion::Scripted,
        };
        assert_eq!(
            t.instruction(),
            "pick the red square from the mat and place it in the blue box"
        );
    }

    #[test]
    fn invalid_template_rejected() {
        let t = TaskTemplate {
            pattern: Pattern::Close,
            object: None,
            source: None,
            dest: Some(Place::Mat),
            motion: Motion::Scripted,
        };
        assert!(matches!(
            generate_episode(&WorldConfig::default(), &t, 0),
            Err(Error::Template(_))
        ));
    }

    #[test]
    fn every_template_renders() {
        let cfg = WorldConfig::default();
        for t in all_templates() {
            let ep = generate_episode(&cfg, &t, 5).unwrap();
            assert_eq!(ep.frames.dims(), &[9, 3, 32, 32]);
            assert!(ep.mask_gt.sum() > 0.0, "{}", ep.task_id);
        }
    }
}
