//! Brute-force reference implementations, written without the library's helpers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use udadet::codec::{decode, encode_targets, BBox, BoxAnnotation, DecodeParams};
use udadet::eval::ScoredBox;
use udadet::tensor::Tensor;

/// Intersection over union from the overlap rectangle.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let area = |r: &BBox| (r.x2 - r.x1) * (r.y2 - r.y1);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Cells of a single `h×w` map that are ≥ all eight neighbours and not tied with
/// an earlier (row-major) neighbour.
pub fn peaks_8(map: &[f64], h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = map[y * w + x];
            let mut keep = true;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                    if (dy, dx) == (0, 0) || yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                        continue;
                    }
                    let u = map[yy as usize * w + xx as usize];
                    let earlier = (yy, xx) < (y as i64, x as i64);
                    if u > v || (u == v && earlier) {
                        keep = false;
                    }
                }
            }
            if keep {
                out.push((y, x));
            }
        }
    }
    out
}

/// All-point interpolated AP recomputed from scratch for every ranking prefix.
///
/// The interpolated precision at recall `j/G` is the best precision of any prefix
/// that has found at least `j` objects; AP sums those over `j` with weight `1/G`.
pub fn brute_force_ap(dets: &[ScoredBox], gts: &[(usize, BBox)], thr: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut ranked: Vec<usize> = (0..dets.len()).collect();
    // descending score, earlier input first on ties
    ranked.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let mut prefix = Vec::new();
    for k in 1..=ranked.len() {
        let mut taken = vec![false; gts.len()];
        let mut tp = 0;
        for &d in &ranked[..k] {
            let mut best = None;
            let mut best_iou = -1.0;
            for (g, (img, bb)) in gts.iter().enumerate() {
                if taken[g] || *img != dets[d].image {
                    continue;
                }
                let o = iou(&dets[d].bbox, bb);
                if o >= thr && o > best_iou {
                    best = Some(g);
                    best_iou = o;
                }
            }
            if let Some(g) = best {
                taken[g] = true;
                tp += 1;
            }
        }
        prefix.push((tp, tp as f64 / k as f64));
    }
    let g = gts.len();
    (1..=g)
        .map(|j| prefix.iter().filter(|(tp, _)| *tp >= j).map(|&(_, p)| p).fold(0.0, f64::max) / g as f64)
        .sum()
}

/// A small random detection problem with score ties and near-duplicate boxes.
pub fn random_ap_instance(r: &mut ChaCha8Rng) -> (Vec<ScoredBox>, Vec<(usize, BBox)>) {
    let images = r.gen_range(1..=3);
    let mut gts = Vec::new();
    for img in 0..images {
        for _ in 0..r.gen_range(0..=4) {
            let (x, y) = (r.gen_range(0.0..40.0), r.gen_range(0.0..40.0));
            let (w, h) = (r.gen_range(5.0..20.0), r.gen_range(5.0..20.0));
            gts.push((img, BBox::new(x, y, x + w, y + h)));
        }
    }
    let mut dets = Vec::new();
    for _ in 0..r.gen_range(0..=12) {
        let image = r.gen_range(0..images);
        let near: Vec<&BBox> = gts.iter().filter(|(i, _)| *i == image).map(|(_, b)| b).collect();
        let bbox = if !near.is_empty() && r.gen_bool(0.7) {
            let b = near[r.gen_range(0..near.len())];
            let j = |r: &mut ChaCha8Rng| r.gen_range(-3.0..3.0);
            BBox::new(b.x1 + j(r), b.y1 + j(r), b.x2 + j(r), b.y2 + j(r))
        } else {
            let (x, y) = (r.gen_range(0.0..40.0), r.gen_range(0.0..40.0));
            BBox::new(x, y, x + r.gen_range(5.0..20.0), y + r.gen_range(5.0..20.0))
        };
        // coarse scores so that ties occur
        let score = r.gen_range(1..=6) as f64 / 6.0;
        dets.push(ScoredBox { image, bbox, score });
    }
    (dets, gts)
}

/// Boxes on a 128×128 image (stride 4) whose center cells are pairwise at
/// Chebyshev distance ≥ 2, so that every center is a strict heatmap peak.
pub fn random_separated_boxes(r: &mut ChaCha8Rng, count: usize, classes: usize) -> Vec<BoxAnnotation> {
    let mut out: Vec<BoxAnnotation> = Vec::new();
    let mut cells: Vec<(i64, i64)> = Vec::new();
    while out.len() < count {
        let (w, h): (f64, f64) = (r.gen_range(4.0..60.0), r.gen_range(4.0..60.0));
        let (x, y) = (r.gen_range(0.0..128.0 - w), r.gen_range(0.0..128.0 - h));
        let cell = (((x + w / 2.0) / 4.0).floor() as i64, ((y + h / 2.0) / 4.0).floor() as i64);
        if cells.iter().any(|c| (c.0 - cell.0).abs() <= 1 && (c.1 - cell.1).abs() <= 1) {
            continue;
        }
        cells.push(cell);
        out.push(BoxAnnotation::new(x, y, x + w, y + h, r.gen_range(0..classes)));
    }
    out
}

/// Encodes boxes, decodes the resulting maps as if they were predictions, and
/// returns for each box the best IoU among same-class detections (0 when none).
pub fn codec_round_trip(boxes: &[BoxAnnotation], classes: usize) -> Vec<f64> {
    let maps = encode_targets(boxes, (128, 128), 4, classes, 0.7).unwrap();
    let (hm, off, size) = maps.to_tensors::<f64>().unwrap();
    let params = DecodeParams {
        top_k: 100,
        score_threshold: 0.5,
    };
    let dets = decode(&hm, &off, &size, 0, 4, &params).unwrap();
    boxes
        .iter()
        .map(|b| {
            dets.iter()
                .filter(|d| d.class_id == b.class_id)
                .map(|d| iou(&d.bbox, &b.bbox))
                .fold(0.0, f64::max)
        })
        .collect()
}

pub fn random_map(r: &mut ChaCha8Rng, h: usize, w: usize, levels: Option<u32>) -> Tensor<f64> {
    let v: Vec<f64> = (0..h * w)
        .map(|_| match levels {
            Some(l) => r.gen_range(0..l) as f64 / l as f64,
            None => r.gen_range(0.0..1.0),
        })
        .collect();
    Tensor::from_f64(&[1, 1, h, w], &v).unwrap()
}
