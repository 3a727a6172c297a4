mod common;

use std::collections::BTreeSet;

use wm_core::spriteworld::{
    all_templates, generate_episode, list_episodes, read_episode, split_tasks, write_episode, Dataset, DatasetConfig,
    Motion, Pattern, Place, Split, TaskTemplate, WorldConfig,
};

fn episodes(cfg: &WorldConfig, stride: usize) -> Vec<wm_core::spriteworld::Episode> {
    all_templates()
        .iter()
        .step_by(stride)
        .enumerate()
        .map(|(k, t)| generate_episode(cfg, t, 1000 + k as u64).unwrap())
        .collect()
}

#[test]
fn end_state_matches_the_instruction() {
    let cfg = WorldConfig::default();
    for ep in episodes(&cfg, 3) {
        let tpl = &ep.template;
        let f = cfg.frames;
        let (start, end) = (ep.layout.mover_rect(0), ep.layout.mover_rect(f));
        let rect = |p: Option<Place>| ep.layout.place_rect(p.unwrap()).unwrap();
        match tpl.pattern {
            Pattern::PickPlace(_) => {
                assert!(rect(tpl.source).contains_rect(&start), "{}", ep.task_id);
                assert!(rect(tpl.dest).contains_rect(&end), "{}", ep.task_id);
            }
            Pattern::Place(_) => assert!(rect(tpl.dest).contains_rect(&end), "{}", ep.task_id),
            Pattern::Pick => {
                assert!(rect(tpl.source).contains_rect(&start), "{}", ep.task_id);
                assert_eq!(end.x, start.x);
                assert_eq!(start.y - end.y, cfg.lift as i32);
            }
            Pattern::Push => {
                let d = rect(tpl.dest);
                let dist = |r: &wm_core::spriteworld::Rect| {
                    let (cx, cy) = (r.x as f64 + r.w as f64 / 2.0, r.y as f64 + r.h as f64 / 2.0);
                    let (tx, ty) = (d.x as f64 + d.w as f64 / 2.0, d.y as f64 + d.h as f64 / 2.0);
                    (cx - tx).hypot(cy - ty)
                };
                assert!(dist(&end) < dist(&start), "{}", ep.task_id);
                assert!(!d.contains_rect(&end));
            }
            Pattern::Close => assert_eq!(end, rect(Some(Place::Box))),
        }
    }
}

#[test]
fn generation_is_deterministic_per_seed() {
    let cfg = common::world();
    let tpl = &all_templates()[17];
    let a = generate_episode(&cfg, tpl, 3).unwrap();
    let b = generate_episode(&cfg, tpl, 3).unwrap();
    let c = generate_episode(&cfg, tpl, 4).unwrap();
    assert_eq!(a.frames, b.frames);
    assert_eq!(a.flow_gt, b.flow_gt);
    assert_eq!(a.layout, b.layout);
    assert_ne!(a.frames, c.frames);
}

#[test]
fn pixels_outside_the_footprint_never_change() {
    let cfg = WorldConfig::default();
    let n = cfg.size;
    let plane = n * n;
    for ep in episodes(&cfg, 7) {
        let rects: Vec<_> = (0..=cfg.frames).map(|t| ep.layout.mover_rect(t)).collect();
        for p in 0..plane {
            let (x, y) = ((p % n) as i32, (p / n) as i32);
            if rects
                .iter()
                .any(|r| x >= r.x && x < r.x + r.w && y >= r.y && y < r.y + r.h)
            {
                continue;
            }
            for t in 1..=cfg.frames {
                for c in 0..3 {
                    let d = ep.frames.data();
                    assert_eq!(d[(t * 3 + c) * plane + p], d[c * plane + p], "{} t={t}", ep.task_id);
                }
            }
            assert_eq!(ep.mask_gt.data()[p], 0.0);
        }
    }
}

#[test]
fn flow_warps_sprite_pixels_onto_the_next_frame() {
    let cfg = WorldConfig::default();
    let n = cfg.size;
    let plane = n * n;
    for ep in episodes(&cfg, 5) {
        let d = ep.frames.data();
        let fl = ep.flow_gt.data();
        let mut moved = 0;
        for t in 0..cfg.frames {
            for p in 0..plane {
                let (dx, dy) = (fl[t * 2 * plane + p], fl[(t * 2 + 1) * plane + p]);
                if ep.mask_gt.data()[p] == 0.0 && dx == 0.0 && dy == 0.0 {
                    continue;
                }
                let r = ep.layout.mover_rect(t);
                let (x, y) = ((p % n) as i32, (p / n) as i32);
                let inside = x >= r.x && x < r.x + r.w && y >= r.y && y < r.y + r.h;
                if !inside || (dx == 0.0 && dy == 0.0) {
                    continue;
                }
                let (x2, y2) = (x + dx as i32, y + dy as i32);
                let q = y2 as usize * n + x2 as usize;
                for c in 0..3 {
                    assert_eq!(d[((t + 1) * 3 + c) * plane + q], d[(t * 3 + c) * plane + p]);
                }
                moved += 1;
            }
        }
        assert!(moved > 0, "{}", ep.task_id);
    }
}

#[test]
fn static_template_produces_a_still_clip() {
    let cfg = WorldConfig::default();
    let tpl = TaskTemplate {
        motion: Motion::Static,
        ..all_templates()[5].clone()
    };
    assert!(tpl.task_id().ends_with("_static"));
    let ep = generate_episode(&cfg, &tpl, 2).unwrap();
    let first = ep.frame(0);
    for t in 1..=cfg.frames {
        assert_eq!(ep.frame(t), first);
    }
    assert_eq!(ep.mask_gt.sum(), 0.0);
    assert_eq!(ep.flow_gt.max_abs(), 0.0);
}

/// Unseen templates each carry a verb-object or verb-preposition pair
/// absent from the seen set; every atom stays covered by the seen set.
#[test]
fn compositional_split_satisfies_coverage_oracle() {
    let all = all_templates();
    for seed in 0..3 {
        let (seen, unseen) = split_tasks(&all, 0.9, seed).unwrap();
        assert_eq!(seen.len() + unseen.len(), all.len());
        assert!(!unseen.is_empty() && unseen.len() <= all.len() - (0.9 * all.len() as f64).round() as usize);
        let vo: BTreeSet<_> = seen.iter().flat_map(TaskTemplate::verb_object_combos).collect();
        let vp: BTreeSet<_> = seen.iter().flat_map(TaskTemplate::verb_prep_combos).collect();
        for u in &unseen {
            let novel = u.verb_object_combos().iter().any(|c| !vo.contains(c))
                || u.verb_prep_combos().iter().any(|c| !vp.contains(c));
            assert!(novel, "{} has no novel combination", u.task_id());
        }
        let atoms = |ts: &[TaskTemplate]| ts.iter().flat_map(TaskTemplate::atoms).collect::<BTreeSet<_>>();
        assert_eq!(atoms(&seen), atoms(&all));
    }
    assert!(split_tasks(&all, 1.0, 0).is_err());
}

#[test]
fn episode_and_dataset_roundtrip_through_disk() {
    let cfg = common::world();
    let ep = generate_episode(&cfg, &all_templates()[40], 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = write_episode(dir.path(), &ep, Split::Unseen).unwrap();
    let (back, split) = read_episode(&path).unwrap();
    assert_eq!(split, Split::Unseen);
    assert_eq!(back.frames, ep.frames);
    assert_eq!(back.flow_gt, ep.flow_gt);
    assert_eq!(back.mask_gt, ep.mask_gt);
    assert_eq!(back.template, ep.template);
    assert_eq!(back.layout, ep.layout);

    let dc = DatasetConfig {
        world: cfg,
        eval_per_split: 3,
        ..Default::default()
    };
    let ds = Dataset::generate(&dc, 5, 1).unwrap();
    let root = tempfile::tempdir().unwrap();
    ds.write(root.path()).unwrap();
    assert_eq!(list_episodes(root.path()).unwrap().len(), 11);
    let back = Dataset::read(root.path()).unwrap();
    assert_eq!(back.train.len(), 5);
    assert_eq!(back.eval_unseen.len(), 3);
    let ids = |eps: &[wm_core::spriteworld::Episode]| eps.iter().map(|e| e.task_id.clone()).collect::<BTreeSet<_>>();
    assert_eq!(ids(&back.eval_unseen), ids(&ds.eval_unseen));
    let unseen_ids: BTreeSet<_> = ds.unseen.iter().map(TaskTemplate::task_id).collect();
    assert!(ds.train.iter().all(|e| !unseen_ids.contains(&e.task_id)));
}
