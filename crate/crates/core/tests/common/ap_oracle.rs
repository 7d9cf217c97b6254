//! Exhaustive reference for average precision and a generator of small
//! random detection problems.

use attn_align::detector::{iou, BoundingBox, Detection};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const IOU: f64 = 0.5;

/// Reference AP: selects detections one at a time by scanning for the best
/// remaining (score, then image, then position), matches each against every
/// ground truth of the whole set, and takes the precision envelope by direct
/// maximization over later ranks.
pub fn reference_ap(dets: &[Vec<Detection>], gts: &[Vec<BoundingBox>], class: usize) -> Option<f64> {
    let all_gt: Vec<(usize, &BoundingBox)> = gts
        .iter()
        .enumerate()
        .flat_map(|(i, g)| g.iter().map(move |b| (i, b)))
        .collect();
    let num_gt = all_gt.iter().filter(|(_, b)| b.class_id == class).count();
    if num_gt == 0 {
        return None;
    }
    let mut pending: Vec<(usize, usize)> = Vec::new();
    for (i, d) in dets.iter().enumerate() {
        for (j, det) in d.iter().enumerate() {
            if det.bbox.class_id == class {
                pending.push((i, j));
            }
        }
    }
    let better = |a: (usize, usize), b: (usize, usize)| {
        let (sa, sb) = (dets[a.0][a.1].score, dets[b.0][b.1].score);
        sa > sb || (sa == sb && (a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)))
    };
    let mut used = vec![false; all_gt.len()];
    let mut hits = Vec::new();
    while !pending.is_empty() {
        let mut k = 0;
        for c in 1..pending.len() {
            if better(pending[c], pending[k]) {
                k = c;
            }
        }
        let (img, j) = pending.remove(k);
        let det = &dets[img][j].bbox;
        let mut best: Option<usize> = None;
        for (g, (gi, gb)) in all_gt.iter().enumerate() {
            if *gi != img || gb.class_id != class || used[g] {
                continue;
            }
            if best.is_none_or(|b| iou(det, gb) > iou(det, all_gt[b].1)) {
                best = Some(g);
            }
        }
        match best {
            Some(g) if iou(det, all_gt[g].1) >= IOU => {
                used[g] = true;
                hits.push(true);
            }
            _ => hits.push(false),
        }
    }
    let precision: Vec<f64> = (0..hits.len())
        .map(|r| hits[..=r].iter().filter(|&&h| h).count() as f64 / (r + 1) as f64)
        .collect();
    let mut total = 0.0;
    for r in 0..hits.len() {
        if hits[r] {
            total += precision[r..].iter().copied().fold(f64::MIN, f64::max);
        }
    }
    Some(total / num_gt as f64)
}

/// Boxes on a coarse lattice so that IoU ties and exact thresholds occur.
fn lattice_box(rng: &mut ChaCha8Rng, class_id: usize) -> BoundingBox {
    let q = |rng: &mut ChaCha8Rng, lo: u32, hi: u32| rng.random_range(lo..=hi) as f64 / 10.0;
    let w = q(rng, 1, 4);
    let h = q(rng, 1, 4);
    BoundingBox::new(q(rng, 2, 8), q(rng, 2, 8), w, h, class_id)
}

pub fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<Vec<Detection>>, Vec<Vec<BoundingBox>>) {
    let images = rng.random_range(1..=5);
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    for _ in 0..images {
        let g: Vec<BoundingBox> = (0..rng.random_range(0..=4))
            .map(|_| {
                let c = rng.random_range(0..2);
                lattice_box(rng, c)
            })
            .collect();
        let d: Vec<Detection> = (0..rng.random_range(0..=6))
            .map(|_| {
                let c = rng.random_range(0..2);
                // half of the detections are jittered copies of a ground truth
                let bbox = match g.get(rng.random_range(0..g.len().max(1) * 2)) {
                    Some(b) if rng.random_bool(0.8) => BoundingBox {
                        cx: b.cx + rng.random_range(-2..=2) as f64 / 40.0,
                        cy: b.cy + rng.random_range(-2..=2) as f64 / 40.0,
                        class_id: c,
                        ..*b
                    },
                    _ => lattice_box(rng, c),
                };
                Detection {
                    bbox,
                    score: rng.random_range(1..=5) as f64 / 5.0,
                }
            })
            .collect();
        gts.push(g);
        dets.push(d);
    }
    (dets, gts)
}
