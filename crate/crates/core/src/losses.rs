//! Detection loss and the two unsupervised adaptation objectives.
//!
//! Every loss is recorded on a [`Tape`] so gradients come from the same graph that
//! produced the value. Batched inputs are reduced by averaging per-image losses.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{ObjectCell, TargetBatch};
use crate::model::OutputVars;
use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var};

/// Clamp used by every logarithm inside the losses.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("{0}")]
    Config(String),
    #[error("mode {mode} needs a target-domain heatmap")]
    MissingTarget { mode: UdaMode },
    #[error("probability {0} outside the open interval (0, 1)")]
    Domain(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Adaptation objective added on target-domain images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum UdaMode {
    /// Detection loss on source images only.
    #[default]
    Baseline,
    /// Entropy minimisation.
    Em,
    /// Maximum squares loss.
    Msl,
}

impl fmt::Display for UdaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UdaMode::Baseline => "baseline",
            UdaMode::Em => "em",
            UdaMode::Msl => "msl",
        })
    }
}

impl FromStr for UdaMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(UdaMode::Baseline),
            "em" => Ok(UdaMode::Em),
            "msl" => Ok(UdaMode::Msl),
            other => Err(format!("unknown mode {other:?} (expected baseline, em or msl)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_h: f64,
    pub lambda_size: f64,
    pub lambda_off: f64,
    pub lambda_ent: f64,
    pub lambda_ms: f64,
    /// Focal exponent on the prediction.
    pub alpha: f64,
    /// Focal exponent on the penalty reduction `(1 − Y)`.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_h: 1.0,
            lambda_size: 0.1,
            lambda_off: 1.0,
            lambda_ent: 0.0001,
            lambda_ms: 0.3,
            alpha: 2.0,
            beta: 4.0,
        }
    }
}

fn check_same_shape<T: Scalar>(tape: &Tape<T>, v: Var, t: &Tensor<T>, what: &str) -> Result<(), LossError> {
    if tape.shape(v) != t.shape() {
        return Err(LossError::Shape(format!("{what}: prediction {:?} vs target {:?}", tape.shape(v), t.shape())));
    }
    Ok(())
}

/// Penalty-reduced pixel-wise focal loss on a sigmoid heatmap.
///
/// Per image: `−1/max(N,1) · Σ [(1−Ŷ)^α log Ŷ]` over cells with `Y = 1` plus
/// `(1−Y)^β Ŷ^α log(1−Ŷ)` over the others; `N` is the image's object count.
pub fn focal_loss<T: Scalar>(
    tape: &mut Tape<T>,
    heatmap: Var,
    target: &Tensor<T>,
    object_counts: &[usize],
    alpha: f64,
    beta: f64,
) -> Result<Var, LossError> {
    check_same_shape(tape, heatmap, target, "focal_loss")?;
    let shape = target.shape().to_vec();
    if shape.len() != 4 || shape[0] != object_counts.len() {
        return Err(LossError::Shape(format!("focal_loss: {} object counts for heatmap {shape:?}", object_counts.len())));
    }
    let per_image = shape[1..].iter().product::<usize>();
    let batch = T::from_usize(shape[0]).unwrap();
    let one = T::one();
    let mut pos_w = vec![T::zero(); target.numel()];
    let mut neg_w = vec![T::zero(); target.numel()];
    for (i, &y) in target.data().iter().enumerate() {
        let norm = batch * T::from_usize(object_counts[i / per_image].max(1)).unwrap();
        if y == one {
            pos_w[i] = one / norm;
        } else {
            neg_w[i] = (one - y).powf(T::lit(beta)) / norm;
        }
    }
    let pos_w = tape.constant(Tensor::new(shape.clone(), pos_w)?);
    let neg_w = tape.constant(Tensor::new(shape, neg_w)?);

    let eps = T::lit(LOG_EPS);
    let one_minus = tape.affine(heatmap, -one, one);
    let log_p = tape.log_clamped(heatmap, eps)?;
    let log_q = tape.log_clamped(one_minus, eps)?;
    let pos_focus = tape.powf(one_minus, T::lit(alpha));
    let neg_focus = tape.powf(heatmap, T::lit(alpha));

    let pos = tape.mul(pos_focus, log_p)?;
    let pos = tape.mul(pos, pos_w)?;
    let neg = tape.mul(neg_focus, log_q)?;
    let neg = tape.mul(neg, neg_w)?;
    let total = tape.add(pos, neg)?;
    let total = tape.sum(total);
    Ok(tape.scalar_mul(total, -one))
}

/// L1 error of a 2-channel regression map at object cells only.
///
/// Per image the absolute errors of the `2N` values are summed and divided by
/// `2·max(N,1)`. Without any objects in the batch the loss is a constant zero.
pub fn l1_at_objects<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    target: &Tensor<T>,
    objects: &[Vec<ObjectCell>],
) -> Result<Var, LossError> {
    check_same_shape(tape, pred, target, "l1_at_objects")?;
    let s = target.shape();
    if s.len() != 4 || s[1] != 2 || s[0] != objects.len() {
        return Err(LossError::Shape(format!("l1_at_objects: map {s:?} for {} images", objects.len())));
    }
    let (h, w) = (s[2], s[3]);
    let plane = h * w;
    let batch = T::from_usize(s[0]).unwrap();
    let mut idx = Vec::new();
    let mut tgt = Vec::new();
    let mut weight = Vec::new();
    for (b, cells) in objects.iter().enumerate() {
        let norm = T::lit(2.0) * T::from_usize(cells.len().max(1)).unwrap() * batch;
        for cell in cells {
            if cell.grid_x >= w || cell.grid_y >= h {
                return Err(LossError::Shape(format!("object cell ({}, {}) outside {w}×{h} grid", cell.grid_x, cell.grid_y)));
            }
            for ch in 0..2 {
                let i = (b * 2 + ch) * plane + cell.grid_y * w + cell.grid_x;
                idx.push(i);
                tgt.push(target.data()[i]);
                weight.push(T::one() / norm);
            }
        }
    }
    if idx.is_empty() {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let n = idx.len();
    let picked = tape.gather(pred, idx)?;
    let tgt = tape.constant(Tensor::new(vec![n], tgt)?);
    let weight = tape.constant(Tensor::new(vec![n], weight)?);
    let diff = tape.sub(picked, tgt)?;
    let diff = tape.abs(diff);
    let weighted = tape.mul(diff, weight)?;
    Ok(tape.sum(weighted))
}

/// Components of the detection loss, each a scalar on the tape.
#[derive(Debug, Clone, Copy)]
pub struct DetectionLoss {
    pub heatmap: Var,
    pub size: Var,
    pub offset: Var,
    pub total: Var,
}

/// `λ_h·L_h + λ_size·L_size + λ_off·L_off`.
pub fn weighted_detection<T: Scalar>(tape: &mut Tape<T>, heatmap: Var, size: Var, offset: Var, w: &LossWeights) -> Result<DetectionLoss, LossError> {
    let a = tape.scalar_mul(heatmap, T::lit(w.lambda_h));
    let b = tape.scalar_mul(size, T::lit(w.lambda_size));
    let c = tape.scalar_mul(offset, T::lit(w.lambda_off));
    let ab = tape.add(a, b)?;
    let total = tape.add(ab, c)?;
    Ok(DetectionLoss {
        heatmap,
        size,
        offset,
        total,
    })
}

pub fn detection_loss<T: Scalar>(tape: &mut Tape<T>, output: &OutputVars, targets: &TargetBatch<T>, w: &LossWeights) -> Result<DetectionLoss, LossError> {
    let counts: Vec<usize> = targets.objects.iter().map(Vec::len).collect();
    let lh = focal_loss(tape, output.heatmap, &targets.heatmap, &counts, w.alpha, w.beta)?;
    let lsize = l1_at_objects(tape, output.size, &targets.size, &targets.objects)?;
    let loff = l1_at_objects(tape, output.offset, &targets.offset, &targets.objects)?;
    weighted_detection(tape, lh, lsize, loff, w)
}

fn num_channels<T: Scalar>(tape: &Tape<T>, v: Var) -> Result<usize, LossError> {
    let s = tape.shape(v);
    if s.len() != 4 {
        return Err(LossError::Shape(format!("expected N×C×h×w, got {s:?}")));
    }
    Ok(s[1])
}

/// Normalised per-pixel entropy `−1/log C · Σ_c p log p` of class probabilities,
/// N×1×h×w, values in [0, 1].
pub fn entropy_from_probs<T: Scalar>(tape: &mut Tape<T>, probs: Var) -> Result<Var, LossError> {
    let c = num_channels(tape, probs)?;
    if c < 2 {
        return Err(LossError::Config(format!("entropy needs at least 2 classes, got {c}")));
    }
    let logp = tape.log_clamped(probs, T::lit(LOG_EPS))?;
    let plogp = tape.mul(probs, logp)?;
    let s = tape.sum_channels(plogp)?;
    Ok(tape.scalar_mul(s, T::lit(-1.0 / (c as f64).ln())))
}

/// Entropy map of a heatmap after a softmax across classes.
pub fn entropy_map<T: Scalar>(tape: &mut Tape<T>, heatmap: Var) -> Result<Var, LossError> {
    let c = num_channels(tape, heatmap)?;
    if c < 2 {
        return Err(LossError::Config(format!("entropy needs at least 2 classes, got {c}")));
    }
    let probs = tape.channel_softmax(heatmap)?;
    entropy_from_probs(tape, probs)
}

/// Mean of the entropy map over pixels (and images).
pub fn entropy_loss<T: Scalar>(tape: &mut Tape<T>, heatmap: Var) -> Result<Var, LossError> {
    let e = entropy_map(tape, heatmap)?;
    Ok(tape.mean(e))
}

/// Mean normalised entropy of a heatmap batch, computed without gradients.
pub fn mean_entropy<T: Scalar>(heatmap: &Tensor<T>) -> Result<f64, LossError> {
    let mut tape = Tape::new();
    let h = tape.constant(heatmap.clone());
    let l = entropy_loss(&mut tape, h)?;
    Ok(tape.item(l).to_f64().unwrap_or(f64::NAN))
}

/// `−R/(h·w) · Σ_c Σ_xy p²` of class probabilities, averaged over images.
pub fn max_squares_from_probs<T: Scalar>(tape: &mut Tape<T>, probs: Var, stride: usize) -> Result<Var, LossError> {
    let c = num_channels(tape, probs)?;
    let sq = tape.square(probs);
    let m = tape.mean(sq);
    Ok(tape.scalar_mul(m, T::lit(-(stride as f64) * c as f64)))
}

/// Maximum squares loss of a heatmap after a softmax across classes. Lies in
/// `[−R, −R/C]`.
pub fn max_squares_loss<T: Scalar>(tape: &mut Tape<T>, heatmap: Var, stride: usize) -> Result<Var, LossError> {
    num_channels(tape, heatmap)?;
    let probs = tape.channel_softmax(heatmap)?;
    max_squares_from_probs(tape, probs, stride)
}

#[derive(Debug, Clone, Copy)]
pub struct CombinedLoss {
    pub uda: Option<Var>,
    pub total: Var,
}

/// Adds the adaptation term computed on `target_heatmap` to the source detection
/// loss. Baseline mode ignores the target input.
pub fn combined_loss<T: Scalar>(
    tape: &mut Tape<T>,
    mode: UdaMode,
    detection: &DetectionLoss,
    target_heatmap: Option<Var>,
    w: &LossWeights,
    stride: usize,
) -> Result<CombinedLoss, LossError> {
    let (term, lambda) = match (mode, target_heatmap) {
        (UdaMode::Baseline, _) => {
            return Ok(CombinedLoss {
                uda: None,
                total: detection.total,
            })
        }
        (mode, None) => return Err(LossError::MissingTarget { mode }),
        (UdaMode::Em, Some(t)) => (entropy_loss(tape, t)?, w.lambda_ent),
        (UdaMode::Msl, Some(t)) => (max_squares_loss(tape, t, stride)?, w.lambda_ms),
    };
    let scaled = tape.scalar_mul(term, T::lit(lambda));
    let total = tape.add(detection.total, scaled)?;
    Ok(CombinedLoss { uda: Some(term), total })
}

/// Scalar values of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_h: f64,
    pub l_size: f64,
    pub l_off: f64,
    pub l_det: f64,
    pub l_uda: Option<f64>,
    pub l_total: f64,
    pub target_mean_heatmap: Option<f64>,
    pub target_mean_entropy: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientKind {
    Entropy,
    MaxSquares,
}

/// Gradient of a two-class single-pixel loss with respect to the probability `p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientPoint {
    pub p: f64,
    /// Central difference through the loss operations (h = 1e-5).
    pub finite_difference: f64,
    /// Reverse-mode gradient through the same operations.
    pub autodiff: f64,
    /// `|log((1−p)/p)|` for entropy, `|2 − 4p|` for max squares.
    pub closed_form: f64,
}

const PROFILE_STEP: f64 = 1e-5;

fn binary_loss(p: f64, kind: GradientKind, track: bool) -> Result<(f64, Option<f64>), LossError> {
    let mut tape = Tape::<f64>::new();
    let leaf = Tensor::from_f64(&[1, 1, 1, 1], &[p])?.with_requires_grad(track);
    let pv = tape.leaf(&leaf);
    let qv = tape.affine(pv, -1.0, 1.0);
    let probs = tape.concat_channels(&[pv, qv])?;
    let loss = match kind {
        // undo the 1/log 2 normalisation to get −p log p − (1−p) log(1−p)
        GradientKind::Entropy => {
            let e = entropy_from_probs(&mut tape, probs)?;
            let e = tape.mean(e);
            tape.scalar_mul(e, std::f64::consts::LN_2)
        }
        // R = 1 on a 1×1 map: −p² − (1−p)²
        GradientKind::MaxSquares => max_squares_from_probs(&mut tape, probs, 1)?,
    };
    let value = tape.item(loss);
    if !track {
        return Ok((value, None));
    }
    tape.backward(loss)?;
    Ok((value, tape.grad(pv).map(|g| g[0])))
}

/// Gradient magnitudes of the binary entropy and maximum squares losses at each
/// probability in `ps`.
pub fn gradient_profile(ps: &[f64], kind: GradientKind) -> Result<Vec<GradientPoint>, LossError> {
    ps.iter()
        .map(|&p| {
            if !(p > 0.0 && p < 1.0) {
                return Err(LossError::Domain(p));
            }
            let (up, _) = binary_loss(p + PROFILE_STEP, kind, false)?;
            let (down, _) = binary_loss(p - PROFILE_STEP, kind, false)?;
            let (_, grad) = binary_loss(p, kind, true)?;
            let closed_form = match kind {
                GradientKind::Entropy => ((1.0 - p) / p).ln().abs(),
                GradientKind::MaxSquares => (2.0 - 4.0 * p).abs(),
            };
            Ok(GradientPoint {
                p,
                finite_difference: ((up - down) / (2.0 * PROFILE_STEP)).abs(),
                autodiff: grad.unwrap_or(0.0).abs(),
                closed_form,
            })
        })
        .collect()
}

/// Probability grid 0.01, 0.02, …, 0.99.
pub fn default_probability_grid() -> Vec<f64> {
    (1..=99).map(|i| i as f64 / 100.0).collect()
}

/// One CSV row: `p, grad_entropy, grad_msl` (finite-difference magnitudes).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientRow {
    pub p: f64,
    pub grad_entropy: f64,
    pub grad_msl: f64,
}

pub fn gradient_table(ps: &[f64]) -> Result<Vec<GradientRow>, LossError> {
    let ent = gradient_profile(ps, GradientKind::Entropy)?;
    let msl = gradient_profile(ps, GradientKind::MaxSquares)?;
    Ok(ent
        .iter()
        .zip(&msl)
        .map(|(e, m)| GradientRow {
            p: e.p,
            grad_entropy: e.finite_difference,
            grad_msl: m.finite_difference,
        })
        .collect())
}

pub fn write_gradient_csv<W: Write>(rows: &[GradientRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "p,grad_entropy,grad_msl")?;
    for r in rows {
        writeln!(out, "{},{},{}", r.p, r.grad_entropy, r.grad_msl)?;
    }
    Ok(())
}

pub fn read_gradient_csv(text: &str) -> Result<Vec<GradientRow>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some("p,grad_entropy,grad_msl") => {}
        other => return Err(format!("unexpected header {other:?}")),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| format!("row {i}: {e}"));
            if f.len() != 3 {
                return Err(format!("row {i}: expected 3 fields, got {}", f.len()));
            }
            Ok(GradientRow {
                p: parse(f[0])?,
                grad_entropy: parse(f[1])?,
                grad_msl: parse(f[2])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf4(tape: &mut Tape<f64>, shape: &[usize], vals: &[f64]) -> Var {
        tape.leaf(&Tensor::from_f64(shape, vals).unwrap().with_requires_grad(true))
    }

    #[test]
    fn focal_single_cell_examples() {
        for (y, want) in [(1.0, 0.25 * 2f64.ln()), (0.0, 0.25 * 2f64.ln())] {
            let mut t = Tape::new();
            let p = leaf4(&mut t, &[1, 1, 1, 1], &[0.5]);
            let target = Tensor::from_f64(&[1, 1, 1, 1], &[y]).unwrap();
            let l = focal_loss(&mut t, p, &target, &[1], 2.0, 4.0).unwrap();
            assert!((t.item(l) - want).abs() < 1e-12, "y={y}");
            assert!((want - 0.1733).abs() < 1e-4);
        }
    }

    #[test]
    fn focal_near_perfect_prediction_vanishes() {
        let y = [1.0, 0.0, 0.0, 0.0];
        let pred = [1.0 - 1e-9, 1e-9, 1e-9, 1e-9];
        let mut t = Tape::new();
        let p = leaf4(&mut t, &[1, 1, 2, 2], &pred);
        let target = Tensor::from_f64(&[1, 1, 2, 2], &y).unwrap();
        let l = focal_loss(&mut t, p, &target, &[1], 2.0, 4.0).unwrap();
        assert!(t.item(l) < 1e-12);
    }

    #[test]
    fn l1_examples() {
        let obj = vec![vec![ObjectCell {
            grid_x: 1,
            grid_y: 0,
            class_id: 0,
        }]];
        let mut pred = vec![0.0; 8];
        let mut tgt = vec![0.0; 8];
        pred[1] = 3.0;
        pred[5] = 3.0;
        tgt[1] = 4.0;
        tgt[5] = 6.0;
        let mut t = Tape::new();
        let p = leaf4(&mut t, &[1, 2, 2, 2], &pred);
        let target = Tensor::from_f64(&[1, 2, 2, 2], &tgt).unwrap();
        let l = l1_at_objects(&mut t, p, &target, &obj).unwrap();
        assert_eq!(t.item(l), 2.0);

        let p2 = leaf4(&mut t, &[1, 2, 2, 2], &tgt);
        let l = l1_at_objects(&mut t, p2, &target, &obj).unwrap();
        assert_eq!(t.item(l), 0.0);

        let l = l1_at_objects(&mut t, p, &target, &[vec![]]).unwrap();
        assert_eq!(t.item(l), 0.0);
        assert!(!t.requires_grad(l));
    }

    #[test]
    fn weighted_detection_sum() {
        let mut t = Tape::<f64>::new();
        let h = leaf4(&mut t, &[], &[1.0]);
        let s = leaf4(&mut t, &[], &[2.0]);
        let o = leaf4(&mut t, &[], &[3.0]);
        let w = LossWeights::default();
        let d = weighted_detection(&mut t, h, s, o, &w).unwrap();
        assert!((t.item(d.total) - 4.2).abs() < 1e-12);

        let w2 = LossWeights {
            lambda_size: 2.0 * w.lambda_size,
            ..w
        };
        let d2 = weighted_detection(&mut t, h, s, o, &w2).unwrap();
        assert!((t.item(d2.total) - t.item(d.total) - w.lambda_size * 2.0).abs() < 1e-12);
    }

    #[test]
    fn entropy_examples() {
        let mut t = Tape::<f64>::new();
        let uniform = t.constant(Tensor::full(&[1, 6, 2, 2], 0.4));
        let e = entropy_map(&mut t, uniform).unwrap();
        assert!(t.data(e).iter().all(|&v| (v - 1.0).abs() < 1e-12));

        let probs = t.constant(Tensor::from_f64(&[1, 2, 1, 1], &[0.9, 0.1]).unwrap());
        let e = entropy_from_probs(&mut t, probs).unwrap();
        let want = -(0.9 * 0.9f64.ln() + 0.1 * 0.1f64.ln()) / 2f64.ln();
        assert!((t.data(e)[0] - want).abs() < 1e-12);
        assert!((want - 0.4690).abs() < 1e-4);

        let onehot = t.constant(Tensor::from_f64(&[1, 3, 1, 1], &[60.0, -60.0, -60.0]).unwrap());
        let e = entropy_map(&mut t, onehot).unwrap();
        assert!(t.data(e)[0] < 1e-20);

        let single = t.constant(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(matches!(entropy_map(&mut t, single), Err(LossError::Config(_))));
    }

    #[test]
    fn entropy_loss_is_mean_of_map() {
        // channels (a, b) per pixel arranged so the maps are {1, 0.4690, 0, 0}
        let mut t = Tape::<f64>::new();
        let probs = t.constant(Tensor::from_f64(&[1, 2, 2, 2], &[0.5, 0.9, 1.0, 0.0, 0.5, 0.1, 0.0, 1.0]).unwrap());
        let e = entropy_from_probs(&mut t, probs).unwrap();
        let l = t.mean(e);
        let want = (1.0 + 0.468_995_593_589_281_2) / 4.0;
        assert!((t.item(l) - want).abs() < 1e-12);
        assert!((want - 0.3673).abs() < 1e-4);
    }

    #[test]
    fn max_squares_examples() {
        let mut t = Tape::<f64>::new();
        let p = t.constant(Tensor::from_f64(&[1, 2, 1, 1], &[0.5, 0.5]).unwrap());
        let l = max_squares_from_probs(&mut t, p, 4).unwrap();
        assert_eq!(t.item(l), -2.0);

        let onehot = t.constant(Tensor::from_f64(&[1, 2, 1, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let l = max_squares_from_probs(&mut t, onehot, 4).unwrap();
        assert_eq!(t.item(l), -4.0);

        let uniform = t.constant(Tensor::full(&[2, 6, 3, 3], 0.7));
        let l = max_squares_loss(&mut t, uniform, 4).unwrap();
        assert!((t.item(l) + 4.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn combined_loss_modes() {
        let mut t = Tape::<f64>::new();
        let h = leaf4(&mut t, &[], &[1.0]);
        let s = leaf4(&mut t, &[], &[2.0]);
        let o = leaf4(&mut t, &[], &[3.0]);
        let w = LossWeights::default();
        let det = weighted_detection(&mut t, h, s, o, &w).unwrap();

        let base = combined_loss(&mut t, UdaMode::Baseline, &det, None, &w, 4).unwrap();
        assert_eq!(base.total, det.total);
        assert!(base.uda.is_none());
        assert!(matches!(
            combined_loss(&mut t, UdaMode::Em, &det, None, &w, 4),
            Err(LossError::MissingTarget { mode: UdaMode::Em })
        ));

        // a 1×1 two-class heatmap with entropy 0.8 needs specific logits; check the
        // weighting against the term actually produced instead
        let hm = t.constant(Tensor::from_f64(&[1, 2, 1, 1], &[0.2, 0.9]).unwrap());
        let em = combined_loss(&mut t, UdaMode::Em, &det, Some(hm), &w, 4).unwrap();
        let ent = t.item(em.uda.unwrap());
        assert!((t.item(em.total) - (4.2 + 1e-4 * ent)).abs() < 1e-12);
        let msl = combined_loss(&mut t, UdaMode::Msl, &det, Some(hm), &w, 4).unwrap();
        let ms = t.item(msl.uda.unwrap());
        assert!((t.item(msl.total) - (4.2 + 0.3 * ms)).abs() < 1e-12);
    }

    #[test]
    fn combined_weighting_arithmetic() {
        assert!((4.2 + 0.0001 * 0.8 - 4.20008f64).abs() < 1e-12);
        assert!((4.2 + 0.3 * -2.0 - 3.6f64).abs() < 1e-12);
    }

    #[test]
    fn gradient_profile_points() {
        let ent = gradient_profile(&[0.5, 0.99], GradientKind::Entropy).unwrap();
        let msl = gradient_profile(&[0.5, 0.99], GradientKind::MaxSquares).unwrap();
        assert!(ent[0].finite_difference < 1e-9 && ent[0].autodiff < 1e-12);
        assert!(msl[0].finite_difference < 1e-9 && msl[0].autodiff < 1e-12);
        assert!((ent[1].closed_form - 4.59511985013459).abs() < 1e-12);
        assert!((ent[1].autodiff - ent[1].closed_form).abs() < 1e-9);
        assert!((msl[1].closed_form - 1.96).abs() < 1e-12);
        assert!((msl[1].autodiff - 1.96).abs() < 1e-9);
        assert!(gradient_profile(&[1.0], GradientKind::Entropy).is_err());
        assert!(gradient_profile(&[0.0], GradientKind::MaxSquares).is_err());
    }

    #[test]
    fn gradient_csv_round_trip() {
        let rows = gradient_table(&[0.25, 0.9]).unwrap();
        let mut buf = Vec::new();
        write_gradient_csv(&rows, &mut buf).unwrap();
        let back = read_gradient_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("EM".parse::<UdaMode>().unwrap(), UdaMode::Em);
        assert!("adv".parse::<UdaMode>().is_err());
    }
}
