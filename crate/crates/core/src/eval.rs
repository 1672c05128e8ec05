//! AP@IoU metrics, heatmap statistics, map exports and throughput measurement.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{decode, encode_targets, BBox, BoxAnnotation, CodecError, DecodeParams, Detection};
use crate::data::{quantize, stack_images, DataError, DatasetManifest, Image};
use crate::losses::{entropy_map, LossError};
use crate::model::{DetectorParams, ModelError};
use crate::tensor::{Scalar, Tape, Tensor};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation set is empty")]
    EmptyTestSet,
    #[error("evaluation set {0:?} is unlabeled")]
    Unlabeled(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {detail}")]
    Output { path: PathBuf, detail: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

/// A scored box attributed to one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub image: usize,
    pub bbox: BBox,
    pub score: f64,
}

/// All-point interpolated average precision of one class.
///
/// Detections are visited by descending score (ties keep input order). Each takes
/// the highest-IoU ground-truth box of its image that is still unmatched and
/// overlaps by at least `iou_threshold`; otherwise it counts as a false positive.
/// Returns 0 when `ground_truth` is empty.
pub fn average_precision(detections: &[ScoredBox], ground_truth: &[(usize, BBox)], iou_threshold: f64) -> f64 {
    if ground_truth.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score));
    let mut used = vec![false; ground_truth.len()];
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(order.len());
    for (rank, &d) in order.iter().enumerate() {
        let det = &detections[d];
        let mut best: Option<(usize, f64)> = None;
        for (g, (img, gt)) in ground_truth.iter().enumerate() {
            if *img != det.image || used[g] {
                continue;
            }
            let o = det.bbox.iou(gt);
            if o >= iou_threshold && best.map_or(true, |(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        if let Some((g, _)) = best {
            used[g] = true;
            tp += 1;
        }
        points.push((tp as f64 / ground_truth.len() as f64, tp as f64 / (rank + 1) as f64));
    }
    // precision envelope from the right, integrated over recall steps
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut envelope = vec![0.0; points.len()];
    let mut running: f64 = 0.0;
    for i in (0..points.len()).rev() {
        running = running.max(points[i].1);
        envelope[i] = running;
    }
    for (i, &(recall, _)) in points.iter().enumerate() {
        if recall > prev_recall {
            ap += (recall - prev_recall) * envelope[i];
            prev_recall = recall;
        }
    }
    ap
}

/// Arithmetic mean over every cell of every map.
pub fn heatmap_mean<'a>(maps: impl IntoIterator<Item = &'a [f64]>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for m in maps {
        sum += m.iter().sum::<f64>();
        n += m.len();
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: usize,
    pub name: String,
    /// `None` when the class has no ground truth in the evaluation set.
    pub ap: Option<f64>,
    pub num_ground_truth: usize,
    pub num_detections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_images: usize,
    pub iou_threshold: f64,
    pub classes: Vec<ClassReport>,
    /// Mean AP over classes that have ground truth.
    pub map: f64,
    pub num_detections: usize,
    pub mean_heatmap_predicted: f64,
    pub mean_heatmap_ground_truth: f64,
    /// Mean normalised entropy of the predicted heatmaps.
    pub mean_entropy: f64,
    pub images_per_second: f64,
}

/// Settings for [`evaluate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub decode: DecodeParams,
    pub iou_threshold: f64,
    pub min_overlap: f64,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            decode: DecodeParams::default(),
            iou_threshold: 0.5,
            min_overlap: 0.7,
            batch_size: 8,
        }
    }
}

/// Runs the detector on labeled images and aggregates metrics.
pub fn evaluate_images<T: Scalar>(params: &DetectorParams<T>, images: &[Image], boxes: &[Vec<BoxAnnotation>], class_names: &[String], opts: &EvalOptions) -> Result<EvalReport, EvalError> {
    if images.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    if images.len() != boxes.len() {
        return Err(EvalError::Invalid("images and annotations differ in count".into()));
    }
    let c = params.num_classes;
    if class_names.len() != c {
        return Err(EvalError::Invalid(format!("{} class names for a {c}-class model", class_names.len())));
    }
    let stride = params.output_stride();
    let mut detections: Vec<Vec<ScoredBox>> = vec![Vec::new(); c];
    let mut ground_truth: Vec<Vec<(usize, BBox)>> = vec![Vec::new(); c];
    let (mut pred_sum, mut gt_sum, mut cells, mut ent_sum, mut ent_cells) = (0.0, 0.0, 0usize, 0.0, 0usize);
    let mut elapsed = 0.0;

    for (chunk_i, chunk) in images.chunks(opts.batch_size.max(1)).enumerate() {
        let base = chunk_i * opts.batch_size.max(1);
        let batch = stack_images::<T>(chunk);
        let start = Instant::now();
        let out = params.predict(&batch)?;
        let mut per_image = Vec::with_capacity(chunk.len());
        for i in 0..chunk.len() {
            per_image.push(decode(&out.heatmap, &out.offset, &out.size, i, stride, &opts.decode)?);
        }
        elapsed += start.elapsed().as_secs_f64();

        pred_sum += out.heatmap.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).sum::<f64>();
        cells += out.heatmap.numel();
        let mut tape = Tape::new();
        let h = tape.constant(out.heatmap);
        if c >= 2 {
            let e = entropy_map(&mut tape, h)?;
            ent_sum += tape.data(e).iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).sum::<f64>();
            ent_cells += tape.shape(e).iter().product::<usize>();
        }
        for (i, dets) in per_image.into_iter().enumerate() {
            let image = base + i;
            let img = &chunk[i];
            for d in dets {
                detections[d.class_id].push(ScoredBox {
                    image,
                    bbox: d.bbox,
                    score: d.score,
                });
            }
            let gt = &boxes[image];
            let maps = encode_targets(gt, (img.height, img.width), stride, c, opts.min_overlap)?;
            gt_sum += maps.heatmap.iter().sum::<f64>();
            for a in gt {
                let b = a.bbox.clip(img.width as f64, img.height as f64);
                if b.is_valid() {
                    ground_truth[a.class_id].push((image, b));
                }
            }
        }
    }

    let mut classes = Vec::with_capacity(c);
    let mut present = Vec::new();
    for k in 0..c {
        let ap = if ground_truth[k].is_empty() {
            None
        } else {
            let ap = average_precision(&detections[k], &ground_truth[k], opts.iou_threshold);
            present.push(ap);
            Some(ap)
        };
        classes.push(ClassReport {
            class_id: k,
            name: class_names[k].clone(),
            ap,
            num_ground_truth: ground_truth[k].len(),
            num_detections: detections[k].len(),
        });
    }
    let map = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    Ok(EvalReport {
        num_images: images.len(),
        iou_threshold: opts.iou_threshold,
        classes,
        map,
        num_detections: detections.iter().map(Vec::len).sum(),
        mean_heatmap_predicted: pred_sum / cells as f64,
        mean_heatmap_ground_truth: gt_sum / cells as f64,
        mean_entropy: if ent_cells > 0 { ent_sum / ent_cells as f64 } else { 0.0 },
        images_per_second: images.len() as f64 / elapsed.max(1e-12),
    })
}

/// Evaluates a labeled manifest.
pub fn evaluate<T: Scalar>(params: &DetectorParams<T>, testset: &DatasetManifest, opts: &EvalOptions) -> Result<EvalReport, EvalError> {
    if testset.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    if !testset.labeled {
        return Err(EvalError::Unlabeled(testset.split.clone()));
    }
    if let Some(a) = testset.images.iter().flat_map(|r| &r.annotations).find(|a| a.class_id >= params.num_classes) {
        return Err(EvalError::Invalid(format!("class id {} out of range for {} classes", a.class_id, params.num_classes)));
    }
    let images = crate::data::load_images(testset)?;
    let boxes: Vec<_> = testset.images.iter().map(|r| r.annotations.clone()).collect();
    evaluate_images(params, &images, &boxes, &testset.class_names, opts)
}

fn save_gray(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<(), EvalError> {
    let bytes: Vec<u8> = values.iter().map(|&v| quantize(v as f32)).collect();
    let img = image::GrayImage::from_raw(width as u32, height as u32, bytes).expect("buffer matches dimensions");
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| EvalError::Output {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

/// Writes one grayscale PNG per heatmap channel plus one for the entropy map of
/// each image, values mapped `[0, 1] → [0, 255]` with round-half-up. File names are
/// `<name>_heatmap_c<k>.png` and `<name>_entropy.png`.
pub fn export_maps<T: Scalar>(params: &DetectorParams<T>, images: &[(String, Image)], out_dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    std::fs::create_dir_all(out_dir).map_err(|e| EvalError::Output {
        path: out_dir.to_path_buf(),
        detail: e.to_string(),
    })?;
    let mut written = Vec::new();
    for (name, img) in images {
        let out = params.predict(&stack_images::<T>(std::slice::from_ref(img)))?;
        written.extend(export_heatmap(&out.heatmap, name, out_dir)?);
    }
    Ok(written)
}

/// Renders an already computed `1×C×h×w` heatmap and its entropy map.
pub fn export_heatmap<T: Scalar>(heatmap: &Tensor<T>, name: &str, out_dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    let s = heatmap.shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(EvalError::Invalid(format!("expected a 1×C×h×w heatmap, got {s:?}")));
    }
    let (c, h, w) = (s[1], s[2], s[3]);
    let values = heatmap.to_f64_vec();
    let mut written = Vec::with_capacity(c + 1);
    for k in 0..c {
        let path = out_dir.join(format!("{name}_heatmap_c{k}.png"));
        save_gray(&path, w, h, &values[k * h * w..(k + 1) * h * w])?;
        written.push(path);
    }
    let mut tape = Tape::new();
    let hv = tape.constant(heatmap.clone());
    let ent = if c >= 2 {
        let e = entropy_map(&mut tape, hv)?;
        tape.value(e).to_f64_vec()
    } else {
        vec![0.0; h * w]
    };
    let path = out_dir.join(format!("{name}_entropy.png"));
    save_gray(&path, w, h, &ent)?;
    written.push(path);
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvInfo {
    pub os: String,
    pub arch: String,
    pub logical_cpus: usize,
    pub threads_used: usize,
    pub dtype: String,
    pub crate_version: String,
}

impl EnvInfo {
    pub fn current<T: Scalar>() -> Self {
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            logical_cpus: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            threads_used: 1,
            dtype: T::DTYPE.to_string(),
            crate_version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub image_height: usize,
    pub image_width: usize,
    pub iterations: usize,
    pub warmup: usize,
    pub median_forward_ms: f64,
    pub median_decode_ms: f64,
    pub median_total_ms: f64,
    pub images_per_second: f64,
    pub env: EnvInfo,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Single-image forward + decode timing. Needs at least 10 timed iterations.
pub fn throughput<T: Scalar>(params: &DetectorParams<T>, height: usize, width: usize, iterations: usize, warmup: usize, decode_params: &DecodeParams) -> Result<ThroughputReport, EvalError> {
    if iterations < 10 {
        return Err(EvalError::Invalid(format!("throughput needs at least 10 iterations, got {iterations}")));
    }
    let mut img = Image::filled(width, height, 0.0);
    for (i, v) in img.data.iter_mut().enumerate() {
        *v = ((i * 7919) % 256) as f32 / 255.0;
    }
    let input = stack_images::<T>(std::slice::from_ref(&img));
    let stride = params.output_stride();
    let mut forward = Vec::with_capacity(iterations);
    let mut decoding = Vec::with_capacity(iterations);
    let mut total = Vec::with_capacity(iterations);
    for i in 0..warmup + iterations {
        let t0 = Instant::now();
        let out = params.predict(&input)?;
        let t1 = Instant::now();
        let dets: Vec<Detection> = decode(&out.heatmap, &out.offset, &out.size, 0, stride, decode_params)?;
        let t2 = Instant::now();
        std::hint::black_box(dets);
        if i >= warmup {
            forward.push((t1 - t0).as_secs_f64() * 1e3);
            decoding.push((t2 - t1).as_secs_f64() * 1e3);
            total.push((t2 - t0).as_secs_f64() * 1e3);
        }
    }
    let median_total_ms = median(total);
    Ok(ThroughputReport {
        image_height: height,
        image_width: width,
        iterations,
        warmup,
        median_forward_ms: median(forward),
        median_decode_ms: median(decoding),
        median_total_ms,
        images_per_second: 1e3 / median_total_ms,
        env: EnvInfo::current::<T>(),
    })
}

/// Aligned text table: one row per run, one column per class, mAP last.
pub fn format_table(rows: &[(String, EvalReport)]) -> String {
    let Some((_, first)) = rows.first() else {
        return String::new();
    };
    let names: Vec<&str> = first.classes.iter().map(|c| c.name.as_str()).collect();
    let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max("method".len());
    let col_w = names.iter().map(|n| n.len()).max().unwrap_or(0).max(6);
    let mut out = format!("{:<label_w$}", "method");
    for n in &names {
        out.push_str(&format!(" {n:>col_w$}"));
    }
    out.push_str(&format!(" {:>col_w$}\n", "mAP"));
    for (label, r) in rows {
        out.push_str(&format!("{label:<label_w$}"));
        for c in &r.classes {
            match c.ap {
                Some(ap) => out.push_str(&format!(" {ap:>col_w$.3}")),
                None => out.push_str(&format!(" {:>col_w$}", "-")),
            }
        }
        out.push_str(&format!(" {:>col_w$.3}\n", r.map));
    }
    out
}
