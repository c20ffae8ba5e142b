//! Brute-force cross-checks of the geometric and decoupling stages.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tid_core::geometry::iou;
use tid_core::harness::{generate_scene, SceneSpec};
use tid_core::sfdm::{
    align, baseline_bg_obj_loss, information_value, SfdmConfig,
};
use tid_core::{BBox, GroundTruth, Tensor};

/// IoU of integer boxes by counting unit cells.
fn counted_iou(a: [i32; 4], b: [i32; 4]) -> f64 {
    let inside = |r: [i32; 4], x: i32, y: i32| x >= r[0] && x < r[2] && y >= r[1] && y < r[3];
    let (mut inter, mut union) = (0u32, 0u32);
    for y in -2..14 {
        for x in -2..14 {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += u32::from(ia && ib);
            union += u32::from(ia || ib);
        }
    }
    if union == 0 { 0.0 } else { f64::from(inter) / f64::from(union) }
}

#[test]
fn iou_matches_cell_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let bx = |b: [i32; 4]| BBox::new(b[0].into(), b[1].into(), b[2].into(), b[3].into()).unwrap();
    assert!((iou(&bx([0, 0, 2, 2]), &bx([1, 1, 3, 3])) - 1.0 / 7.0).abs() < 1e-15);
    for _ in 0..500 {
        let mut draw = || {
            let x = rng.random_range(0..8);
            let y = rng.random_range(0..8);
            [x, y, x + rng.random_range(1..5), y + rng.random_range(1..5)]
        };
        let (a, b) = (draw(), draw());
        assert!((iou(&bx(a), &bx(b)) - counted_iou(a, b)).abs() < 1e-12, "{a:?} {b:?}");
    }
}

fn info_oracle(h: usize, w: usize, boxes: &[[f64; 4]], scale: f64) -> Vec<f64> {
    let mut out = vec![0.0f64; h * w];
    for (i, slot) in out.iter_mut().enumerate() {
        let (x, y) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
        for b in boxes {
            let v = if x >= b[0] && x <= b[2] && y >= b[1] && y <= b[3] {
                1.0
            } else {
                let (cx, cy) = ((b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0);
                let (hw, hh) = ((b[2] - b[0]) * scale / 2.0, (b[3] - b[1]) * scale / 2.0);
                let in_vicinity = (x - cx).abs() <= hw && (y - cy).abs() <= hh;
                if in_vicinity {
                    let dx = (b[0] - x).max(x - b[2]).max(0.0);
                    let dy = (b[1] - y).max(y - b[3]).max(0.0);
                    // Distance from a box corner to the matching vicinity corner.
                    let reach = (hw - (b[2] - b[0]) / 2.0).hypot(hh - (b[3] - b[1]) / 2.0);
                    (1.0 - dx.hypot(dy) / reach).max(0.0)
                } else {
                    0.0
                }
            };
            *slot = slot.max(v);
        }
    }
    out
}

#[test]
fn information_value_matches_oracle() {
    let cfg = SfdmConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let (h, w) = (rng.random_range(4..24), rng.random_range(4..24));
        let m = rng.random_range(0..4);
        let boxes: Vec<[f64; 4]> = (0..m)
            .map(|_| {
                let x = rng.random_range(0.0..w as f64 - 1.0);
                let y = rng.random_range(0.0..h as f64 - 1.0);
                [x, y, x + rng.random_range(0.5..6.0), y + rng.random_range(0.5..6.0)]
            })
            .collect();
        let gt = GroundTruth::new(
            boxes.iter().map(|b| BBox::new(b[0], b[1], b[2], b[3]).unwrap()).collect(),
            vec![0; m],
        )
        .unwrap();
        let got = information_value((h, w), &gt, &cfg);
        let want = info_oracle(h, w, &boxes, cfg.vicinity_scale);
        for (i, (&g, &o)) in got.data().iter().zip(&want).enumerate() {
            assert!((g - o).abs() < 1e-12, "cell {i}: {g} vs {o}");
        }
    }
}

#[test]
fn baseline_loss_two_pass() {
    let cfg = SfdmConfig::default();
    for seed in 0..5 {
        let scene = generate_scene(&SceneSpec { seed, ..SceneSpec::default() }).unwrap();
        let (t, s) = (&scene.teacher.feature, &scene.student.feature);
        let (c, h, w) = t.dims3().unwrap();
        let report = baseline_bg_obj_loss(t, s, &scene.gt, &cfg).unwrap();

        // Pass one: object membership. Pass two: the two sums.
        let mut is_obj = vec![false; h * w];
        for (p, flag) in is_obj.iter_mut().enumerate() {
            let (x, y) = ((p % w) as f64 + 0.5, (p / w) as f64 + 0.5);
            *flag = scene.gt.boxes().iter().any(|b| x >= b.x1 && x <= b.x2 && y >= b.y1 && y <= b.y2);
        }
        let (mut obj, mut bg) = (0.0, 0.0);
        for (i, (&a, &b)) in t.data().iter().zip(s.data()).enumerate() {
            let d = f64::from(a) - f64::from(b);
            if is_obj[i % (h * w)] { obj += d * d } else { bg += d * d }
        }
        let n = (c * h * w) as f64;
        let want = cfg.alpha_obj * obj / n + cfg.alpha_bg * bg / n;
        assert!((report.total - want).abs() <= 1e-12 * want, "seed {seed}");
        assert!((report.per_tier.high - cfg.alpha_obj * obj / n).abs() <= 1e-12 * want);
    }
}

#[test]
fn align_matches_matrix_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (cs, hs, ws) = (3, 3, 5);
    let (c, h, w) = (2, 6, 10);
    let student: Vec<f32> = (0..cs * hs * ws).map(|_| rng.random_range(-1.0..1.0)).collect();
    let proj: Vec<f32> = (0..c * cs).map(|_| rng.random_range(-1.0..1.0)).collect();
    let st = Tensor::new(vec![cs, hs, ws], student.clone()).unwrap();
    let pt = Tensor::new(vec![c, cs], proj.clone()).unwrap();
    let got = align(&st, (c, h, w), Some(&pt)).unwrap();

    // Upsample every input channel first, then apply the projection.
    let up: Vec<Vec<f64>> = (0..cs)
        .map(|ic| {
            (0..h * w)
                .map(|p| {
                    let (i, j) = (p / w, p % w);
                    let (si, sj) = ((i as f64 * hs as f64 / h as f64).floor() as usize, (j as f64 * ws as f64 / w as f64).floor() as usize);
                    f64::from(student[(ic * hs + si) * ws + sj])
                })
                .collect()
        })
        .collect();
    for oc in 0..c {
        for p in 0..h * w {
            let want: f64 = (0..cs).map(|ic| f64::from(proj[oc * cs + ic]) * up[ic][p]).sum();
            let g = f64::from(got.data()[oc * h * w + p]);
            assert!((g - want).abs() < 1e-6, "channel {oc} cell {p}: {g} vs {want}");
        }
    }

    assert!(align(&st, (cs, hs, ws), None).unwrap().bit_eq(&st));
    assert!(align(&st, (c, h, w), None).is_err());
}
