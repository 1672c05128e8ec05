//! Box annotations ⇄ center-point training targets.
//!
//! Grid coordinates are input-pixel coordinates divided by the output stride R. The
//! heatmap cell `(x, y)` of class `c` covers input pixels `[x·R, (x+1)·R)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{max_pool3x3_argmax, Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("image size {height}×{width} is not divisible by the output stride {stride}")]
    Indivisible { height: usize, width: usize, stride: usize },
    #[error("class id {class_id} out of range for {num_classes} classes")]
    ClassOutOfRange { class_id: usize, num_classes: usize },
    #[error("map shapes disagree: {0}")]
    Shape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Axis-aligned box in input-pixel coordinates, `x2 > x1`, `y2 > y1` when valid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x2 > self.x1 && self.y2 > self.y1 && [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
    }

    pub fn clip(&self, width: f64, height: f64) -> Self {
        Self {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }

    /// Intersection over union; 0 for disjoint or degenerate boxes.
    pub fn iou(&self, other: &BBox) -> f64 {
        let iw = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let ih = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub bbox: BBox,
    pub class_id: usize,
}

impl BoxAnnotation {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64, class_id: usize) -> Self {
        Self {
            bbox: BBox::new(x1, y1, x2, y2),
            class_id,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// Heatmap cell that carries an object center.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ObjectCell {
    pub grid_x: usize,
    pub grid_y: usize,
    pub class_id: usize,
}

/// Training targets of one image. All maps are channel-major, `C×h×w` / `2×h×w`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMaps {
    pub num_classes: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    pub heatmap: Vec<f64>,
    pub offset: Vec<f64>,
    pub size: Vec<f64>,
    pub objects: Vec<ObjectCell>,
    /// Boxes dropped because they had no area after clipping.
    pub skipped: usize,
}

impl TargetMaps {
    pub fn heatmap_at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.heatmap[(c * self.grid_height + y) * self.grid_width + x]
    }

    fn plane(&self) -> usize {
        self.grid_height * self.grid_width
    }
}

/// Largest integer displacement radius (≥ 1, in grid units) for which a box whose
/// corners move by at most that much still overlaps the original with IoU at
/// least `min_overlap`.
///
/// Solves the translation, shrink and growth cases in closed form and keeps the
/// smallest root.
pub fn gaussian_radius(width: f64, height: f64, min_overlap: f64) -> f64 {
    let (w, h, o) = (width, height, min_overlap);
    // translation by (r, r): (w−r)(h−r)(1+o) = 2o·wh
    let b1 = w + h;
    let c1 = w * h * (1.0 - o) / (1.0 + o);
    let r1 = (b1 - (b1 * b1 - 4.0 * c1).max(0.0).sqrt()) / 2.0;
    // both corners inward: (w−2r)(h−2r) = o·wh
    let b2 = 2.0 * (w + h);
    let c2 = (1.0 - o) * w * h;
    let r2 = (b2 - (b2 * b2 - 16.0 * c2).max(0.0).sqrt()) / 8.0;
    // both corners outward: wh = o(w+2r)(h+2r)
    let a3 = 4.0 * o;
    let b3 = 2.0 * o * (w + h);
    let c3 = (o - 1.0) * w * h;
    let r3 = (-b3 + (b3 * b3 - 4.0 * a3 * c3).max(0.0).sqrt()) / (2.0 * a3);
    let r = r1.min(r2).min(r3);
    if r.is_finite() {
        r.floor().max(1.0)
    } else {
        1.0
    }
}

/// Converts boxes to heatmap / offset / size targets.
///
/// Each object splats `exp(−d²/(2σ²))`, `σ = radius/3`, onto its class channel,
/// centred on the integer cell containing the box center; overlapping splats keep
/// the element-wise maximum. Offset and size are written at the center cell only.
pub fn encode_targets(
    boxes: &[BoxAnnotation],
    image_size: (usize, usize),
    stride: usize,
    num_classes: usize,
    min_overlap: f64,
) -> Result<TargetMaps, CodecError> {
    let (height, width) = image_size;
    if stride == 0 || height % stride != 0 || width % stride != 0 {
        return Err(CodecError::Indivisible { height, width, stride });
    }
    let (gh, gw) = (height / stride, width / stride);
    let plane = gh * gw;
    let mut maps = TargetMaps {
        num_classes,
        grid_height: gh,
        grid_width: gw,
        heatmap: vec![0.0; num_classes * plane],
        offset: vec![0.0; 2 * plane],
        size: vec![0.0; 2 * plane],
        objects: Vec::new(),
        skipped: 0,
    };
    let r = stride as f64;
    for ann in boxes {
        if ann.class_id >= num_classes {
            return Err(CodecError::ClassOutOfRange {
                class_id: ann.class_id,
                num_classes,
            });
        }
        let b = ann.bbox.clip(width as f64, height as f64);
        if !b.is_valid() {
            maps.skipped += 1;
            continue;
        }
        let (cx, cy) = b.center();
        let (px, py) = (cx / r, cy / r);
        let gx = (px.floor() as usize).min(gw - 1);
        let gy = (py.floor() as usize).min(gh - 1);
        let (bw, bh) = (b.width() / r, b.height() / r);

        let radius = gaussian_radius(bw, bh, min_overlap);
        let sigma = radius / 3.0;
        let reach = radius as isize;
        let channel = &mut maps.heatmap[ann.class_id * plane..(ann.class_id + 1) * plane];
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let (x, y) = (gx as isize + dx, gy as isize + dy);
                if x < 0 || y < 0 || x >= gw as isize || y >= gh as isize {
                    continue;
                }
                let v = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
                let cell = &mut channel[y as usize * gw + x as usize];
                *cell = cell.max(v);
            }
        }
        let at = gy * gw + gx;
        maps.offset[at] = px - gx as f64;
        maps.offset[plane + at] = py - gy as f64;
        maps.size[at] = bw;
        maps.size[plane + at] = bh;
        let cell = ObjectCell {
            grid_x: gx,
            grid_y: gy,
            class_id: ann.class_id,
        };
        if !maps.objects.contains(&cell) {
            maps.objects.push(cell);
        }
    }
    if maps.skipped > 0 {
        log::warn!("encode_targets: skipped {} degenerate box(es)", maps.skipped);
    }
    Ok(maps)
}

/// Decoding parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeParams {
    pub top_k: usize,
    pub score_threshold: f64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            top_k: 100,
            score_threshold: 0.1,
        }
    }
}

/// Peak cells `(class, y, x, score)` of one image's `C×h×w` heatmap.
///
/// A cell is a peak when it is ≥ all 8 neighbours; among equal neighbours only the
/// one with the lowest row-major index counts. Equivalent to `Ŷ == maxpool3x3(Ŷ)`
/// with the max pool's first-index tie-break.
pub fn find_peaks<T: Scalar>(heatmap: &[T], channels: usize, h: usize, w: usize) -> Vec<(usize, usize, usize, f64)> {
    let arg = max_pool3x3_argmax(&[1, channels, h, w], heatmap);
    let mut out = Vec::new();
    for (i, &a) in arg.iter().enumerate() {
        if a == i {
            let (c, rem) = (i / (h * w), i % (h * w));
            out.push((c, rem / w, rem % w, heatmap[i].to_f64().unwrap_or(f64::NAN)));
        }
    }
    out
}

/// Decodes image `index` of NCHW head outputs into scored boxes.
///
/// Keeps the `top_k` highest peaks across all classes, then drops scores below the
/// threshold. Boxes are in input pixels.
pub fn decode<T: Scalar>(
    heatmap: &Tensor<T>,
    offset: &Tensor<T>,
    size: &Tensor<T>,
    index: usize,
    stride: usize,
    params: &DecodeParams,
) -> Result<Vec<Detection>, CodecError> {
    let hs = heatmap.shape();
    if hs.len() != 4 || index >= hs[0] {
        return Err(CodecError::Shape(format!("heatmap shape {hs:?} for image {index}")));
    }
    let (c, h, w) = (hs[1], hs[2], hs[3]);
    for (name, t) in [("offset", offset), ("size", size)] {
        let s = t.shape();
        if s.len() != 4 || s[0] != hs[0] || s[1] != 2 || s[2] != h || s[3] != w {
            return Err(CodecError::Shape(format!("{name} {s:?} vs heatmap {hs:?}")));
        }
    }
    let plane = h * w;
    let hm = &heatmap.data()[index * c * plane..(index + 1) * c * plane];
    let off = &offset.data()[index * 2 * plane..(index + 1) * 2 * plane];
    let sz = &size.data()[index * 2 * plane..(index + 1) * 2 * plane];

    let mut peaks = find_peaks(hm, c, h, w);
    // stable: equal scores keep (class, y, x) order
    peaks.sort_by(|a, b| b.3.total_cmp(&a.3));
    peaks.truncate(params.top_k);

    let r = stride as f64;
    let f = |v: T| v.to_f64().unwrap_or(f64::NAN);
    Ok(peaks
        .into_iter()
        .filter(|p| p.3 >= params.score_threshold)
        .map(|(class_id, y, x, score)| {
            let at = y * w + x;
            let cx = (x as f64 + f(off[at])) * r;
            let cy = (y as f64 + f(off[plane + at])) * r;
            let bw = f(sz[at]) * r;
            let bh = f(sz[plane + at]) * r;
            Detection {
                bbox: BBox::new(cx - bw / 2.0, cy - bh / 2.0, cx + bw / 2.0, cy + bh / 2.0),
                class_id,
                score,
            }
        })
        .collect())
}

/// Per-batch stacked targets.
#[derive(Debug, Clone)]
pub struct TargetBatch<T> {
    pub heatmap: Tensor<T>,
    pub offset: Tensor<T>,
    pub size: Tensor<T>,
    pub objects: Vec<Vec<ObjectCell>>,
}

impl<T: Scalar> TargetBatch<T> {
    pub fn stack(maps: &[TargetMaps]) -> Result<Self, CodecError> {
        let first = maps.first().ok_or_else(|| CodecError::Shape("empty target batch".into()))?;
        let (c, h, w) = (first.num_classes, first.grid_height, first.grid_width);
        if maps.iter().any(|m| (m.num_classes, m.grid_height, m.grid_width) != (c, h, w)) {
            return Err(CodecError::Shape("target maps in a batch differ in size".into()));
        }
        let n = maps.len();
        let cat = |f: &dyn Fn(&TargetMaps) -> &Vec<f64>| -> Vec<T> { maps.iter().flat_map(|m| f(m).iter().map(|&v| T::lit(v))).collect() };
        Ok(Self {
            heatmap: Tensor::new(vec![n, c, h, w], cat(&|m| &m.heatmap))?,
            offset: Tensor::new(vec![n, 2, h, w], cat(&|m| &m.offset))?,
            size: Tensor::new(vec![n, 2, h, w], cat(&|m| &m.size))?,
            objects: maps.iter().map(|m| m.objects.clone()).collect(),
        })
    }

    pub fn batch_len(&self) -> usize {
        self.objects.len()
    }
}

impl TargetMaps {
    /// Tensor views `(heatmap, offset, size)` with a leading batch axis of 1.
    pub fn to_tensors<T: Scalar>(&self) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>), CodecError> {
        let (h, w) = (self.grid_height, self.grid_width);
        debug_assert_eq!(self.plane(), h * w);
        Ok((
            Tensor::from_f64(&[1, self.num_classes, h, w], &self.heatmap)?,
            Tensor::from_f64(&[1, 2, h, w], &self.offset)?,
            Tensor::from_f64(&[1, 2, h, w], &self.size)?,
        ))
    }
}
