//! Central finite-difference gradient checks at f64.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use udadet::codec::{encode_targets, BoxAnnotation, ObjectCell, TargetBatch};
use udadet::losses::{self, LossWeights, UdaMode};
use udadet::model::OutputVars;
use udadet::tensor::{Tape, Tensor, Var};

use super::{away_from_zero, uniform};

/// Builds a scalar loss from the recorded inputs.
pub type LossFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Var>;

pub struct Case {
    pub inputs: Vec<Tensor<f64>>,
    pub loss: LossFn,
}

fn evaluate(case: &Case, inputs: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let l = (case.loss)(&mut tape, &vars);
    tape.item(l)
}

/// Reverse-mode gradients of every input.
pub fn autodiff(case: &Case) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.leaf(&t.clone().with_requires_grad(true))).collect();
    let l = (case.loss)(&mut tape, &vars);
    tape.backward(l).unwrap();
    vars.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect()
}

/// Central differences with a step scaled to each coordinate.
pub fn finite_difference(case: &Case) -> Vec<Vec<f64>> {
    let mut inputs = case.inputs.clone();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].numel()];
        for (j, slot) in g.iter_mut().enumerate() {
            let x = inputs[i].data()[j];
            let h = 1e-6 * x.abs().max(1.0);
            inputs[i].data_mut()[j] = x + h;
            let up = evaluate(case, &inputs);
            inputs[i].data_mut()[j] = x - h;
            let down = evaluate(case, &inputs);
            inputs[i].data_mut()[j] = x;
            *slot = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)` per input, maximised over inputs; 0 when both vanish.
pub fn relative_error(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let norm = |v: &[f64]| v.iter().map(|e| e * e).sum::<f64>().sqrt();
            let diff: Vec<f64> = x.iter().zip(y).map(|(p, q)| p - q).collect();
            let scale = norm(x).max(norm(y));
            if scale == 0.0 {
                0.0
            } else {
                norm(&diff) / scale
            }
        })
        .fold(0.0, f64::max)
}

pub fn check(case: &Case) -> f64 {
    relative_error(&autodiff(case), &finite_difference(case))
}

/// Reduces a tensor to a scalar with fixed random weights so that every output
/// element contributes a distinct amount.
fn project(tape: &mut Tape<f64>, v: Var, weights: &Tensor<f64>) -> Var {
    let w = tape.constant(weights.clone());
    let m = tape.mul(v, w).unwrap();
    tape.sum(m)
}

fn projected(rng: &mut ChaCha8Rng, op: impl Fn(&mut Tape<f64>, &[Var]) -> Var + 'static, out_shape: &[usize]) -> LossFn {
    let weights = uniform(rng, out_shape, -1.0, 1.0);
    Box::new(move |t, v| {
        let y = op(t, v);
        project(t, y, &weights)
    })
}

fn small_nchw(rng: &mut ChaCha8Rng, max_c: usize) -> Vec<usize> {
    vec![rng.gen_range(1..=2), rng.gen_range(1..=max_c), rng.gen_range(1..=5), rng.gen_range(1..=5)]
}

/// Tape operations and their random-instance generators.
pub fn op_cases() -> Vec<(&'static str, fn(&mut ChaCha8Rng) -> Case)> {
    vec![
        ("add", |r| binary(r, |t, a, b| t.add(a, b).unwrap())),
        ("sub", |r| binary(r, |t, a, b| t.sub(a, b).unwrap())),
        ("mul", |r| binary(r, |t, a, b| t.mul(a, b).unwrap())),
        ("affine", |r| {
            let (s, k) = (r.gen_range(-2.0..2.0), r.gen_range(-1.0..1.0));
            unary(r, -2.0, 2.0, move |t, a| t.affine(a, s, k))
        }),
        ("scalar_mul", |r| {
            let s = r.gen_range(-3.0..3.0);
            unary(r, -2.0, 2.0, move |t, a| t.scalar_mul(a, s))
        }),
        ("relu", |r| {
            let shape = small_nchw(r, 3);
            let x = away_from_zero(r, &shape, 0.05, 2.0);
            let loss = projected(r, |t, v| t.relu(v[0]), &shape);
            Case { inputs: vec![x], loss }
        }),
        ("sigmoid", |r| unary(r, -4.0, 4.0, |t, a| t.sigmoid(a))),
        ("log_clamped", |r| unary(r, 0.1, 3.0, |t, a| t.log_clamped(a, 1e-12).unwrap())),
        ("square", |r| unary(r, -2.0, 2.0, |t, a| t.square(a))),
        ("powf", |r| {
            let p = r.gen_range(0.5..3.0);
            unary(r, 0.2, 2.0, move |t, a| t.powf(a, p))
        }),
        ("abs", |r| {
            let shape = small_nchw(r, 3);
            let x = away_from_zero(r, &shape, 0.05, 2.0);
            let loss = projected(r, |t, v| t.abs(v[0]), &shape);
            Case { inputs: vec![x], loss }
        }),
        ("sum", |r| {
            let shape = small_nchw(r, 3);
            Case {
                inputs: vec![uniform(r, &shape, -1.0, 1.0)],
                loss: Box::new(|t, v| {
                    let s = t.sum(v[0]);
                    t.square(s)
                }),
            }
        }),
        ("mean", |r| {
            let shape = small_nchw(r, 3);
            Case {
                inputs: vec![uniform(r, &shape, -1.0, 1.0)],
                loss: Box::new(|t, v| {
                    let s = t.mean(v[0]);
                    t.square(s)
                }),
            }
        }),
        ("max_pool3x3", |r| unary(r, -1.0, 1.0, |t, a| t.max_pool3x3(a).unwrap())),
        ("conv2d", conv_case),
        ("upsample2x", |r| {
            let shape = small_nchw(r, 3);
            let out = vec![shape[0], shape[1], shape[2] * 2, shape[3] * 2];
            let x = uniform(r, &shape, -1.0, 1.0);
            let loss = projected(r, |t, v| t.upsample2x(v[0]).unwrap(), &out);
            Case { inputs: vec![x], loss }
        }),
        ("channel_softmax", |r| unary_c(r, 4, -3.0, 3.0, |t, a| t.channel_softmax(a).unwrap())),
        ("sum_channels", |r| {
            let shape = small_nchw(r, 4);
            let out = vec![shape[0], 1, shape[2], shape[3]];
            let x = uniform(r, &shape, -1.0, 1.0);
            let loss = projected(r, |t, v| t.sum_channels(v[0]).unwrap(), &out);
            Case { inputs: vec![x], loss }
        }),
        ("gather", |r| {
            let shape = small_nchw(r, 3);
            let n: usize = shape.iter().product();
            let k = r.gen_range(1..=2 * n);
            let idx: Vec<usize> = (0..k).map(|_| r.gen_range(0..n)).collect();
            let x = uniform(r, &shape, -1.0, 1.0);
            let loss = projected(r, move |t, v| t.gather(v[0], idx.clone()).unwrap(), &[k]);
            Case { inputs: vec![x], loss }
        }),
        ("concat_channels", |r| {
            let (n, h, w) = (r.gen_range(1..=2), r.gen_range(1..=4), r.gen_range(1..=4));
            let parts = r.gen_range(2..=3);
            let cs: Vec<usize> = (0..parts).map(|_| r.gen_range(1..=3)).collect();
            let inputs: Vec<Tensor<f64>> = cs.iter().map(|&c| uniform(r, &[n, c, h, w], -1.0, 1.0)).collect();
            let out = [n, cs.iter().sum(), h, w];
            let loss = projected(r, |t, v| t.concat_channels(v).unwrap(), &out);
            Case { inputs, loss }
        }),
    ]
}

fn unary(r: &mut ChaCha8Rng, lo: f64, hi: f64, op: impl Fn(&mut Tape<f64>, Var) -> Var + 'static) -> Case {
    unary_c(r, 3, lo, hi, op)
}

fn unary_c(r: &mut ChaCha8Rng, max_c: usize, lo: f64, hi: f64, op: impl Fn(&mut Tape<f64>, Var) -> Var + 'static) -> Case {
    let shape = small_nchw(r, max_c);
    let x = uniform(r, &shape, lo, hi);
    let loss = projected(r, move |t, v| op(t, v[0]), &shape);
    Case { inputs: vec![x], loss }
}

fn binary(r: &mut ChaCha8Rng, op: fn(&mut Tape<f64>, Var, Var) -> Var) -> Case {
    let shape = small_nchw(r, 3);
    let a = uniform(r, &shape, -2.0, 2.0);
    let b = uniform(r, &shape, -2.0, 2.0);
    let loss = projected(r, move |t, v| op(t, v[0], v[1]), &shape);
    Case { inputs: vec![a, b], loss }
}

fn conv_case(r: &mut ChaCha8Rng) -> Case {
    let k = [1, 3, 5][r.gen_range(0..3)];
    let stride = r.gen_range(1..=2);
    let pad = r.gen_range(0..=k / 2);
    let (n, c, o) = (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=3));
    let (h, w) = (r.gen_range(k..k + 4), r.gen_range(k..k + 4));
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let x = uniform(r, &[n, c, h, w], -1.0, 1.0);
    let wt = uniform(r, &[o, c, k, k], -1.0, 1.0);
    let b = uniform(r, &[o], -1.0, 1.0);
    let loss = projected(r, move |t, v| t.conv2d(v[0], v[1], v[2], stride, pad).unwrap(), &[n, o, ho, wo]);
    Case { inputs: vec![x, wt, b], loss }
}

/// Random boxes on a 32×32 image encoded at stride 4 for `n` images; the first
/// image always has at least one object.
pub fn random_targets(r: &mut ChaCha8Rng, n: usize, classes: usize) -> TargetBatch<f64> {
    let maps: Vec<_> = (0..n)
        .map(|i| {
            let count = r.gen_range(usize::from(i == 0)..=3);
            let boxes: Vec<BoxAnnotation> = (0..count)
                .map(|_| {
                    let (w, h) = (r.gen_range(4.0..16.0), r.gen_range(4.0..16.0));
                    let (x, y) = (r.gen_range(0.0..32.0 - w), r.gen_range(0.0..32.0 - h));
                    BoxAnnotation::new(x, y, x + w, y + h, r.gen_range(0..classes))
                })
                .collect();
            encode_targets(&boxes, (32, 32), 4, classes, 0.7).unwrap()
        })
        .collect();
    TargetBatch::stack(&maps).unwrap()
}

fn counts(objects: &[Vec<ObjectCell>]) -> Vec<usize> {
    objects.iter().map(Vec::len).collect()
}

/// Loss functions and their random-instance generators.
pub fn loss_cases() -> Vec<(&'static str, fn(&mut ChaCha8Rng) -> Case)> {
    vec![
        ("focal", |r| {
            let (n, c) = (r.gen_range(1..=2), r.gen_range(1..=3));
            let tb = random_targets(r, n, c);
            let x = uniform(r, tb.heatmap.shape(), 0.02, 0.98);
            Case {
                inputs: vec![x],
                loss: Box::new(move |t, v| losses::focal_loss(t, v[0], &tb.heatmap, &counts(&tb.objects), 2.0, 4.0).unwrap()),
            }
        }),
        ("l1_at_objects", |r| {
            let n = r.gen_range(1..=2);
            let tb = random_targets(r, n, 2);
            let x = uniform(r, tb.size.shape(), -3.0, 3.0);
            Case {
                inputs: vec![x],
                loss: Box::new(move |t, v| losses::l1_at_objects(t, v[0], &tb.size, &tb.objects).unwrap()),
            }
        }),
        ("detection", |r| {
            let (n, c) = (r.gen_range(1..=2), r.gen_range(1..=3));
            let tb = random_targets(r, n, c);
            let logits = uniform(r, tb.heatmap.shape(), -3.0, 3.0);
            let off = uniform(r, tb.offset.shape(), -1.0, 2.0);
            let size = uniform(r, tb.size.shape(), -1.0, 5.0);
            Case {
                inputs: vec![logits, off, size],
                loss: Box::new(move |t, v| {
                    let heatmap = t.sigmoid(v[0]);
                    let out = OutputVars {
                        heatmap_logits: v[0],
                        heatmap,
                        offset: v[1],
                        size: v[2],
                    };
                    losses::detection_loss(t, &out, &tb, &LossWeights::default()).unwrap().total
                }),
            }
        }),
        ("entropy", |r| {
            let shape = [r.gen_range(1..=2), r.gen_range(2..=4), r.gen_range(1..=5), r.gen_range(1..=5)];
            Case {
                inputs: vec![uniform(r, &shape, 0.02, 0.98)],
                loss: Box::new(|t, v| losses::entropy_loss(t, v[0]).unwrap()),
            }
        }),
        ("max_squares", |r| {
            let shape = [r.gen_range(1..=2), r.gen_range(1..=4), r.gen_range(1..=5), r.gen_range(1..=5)];
            Case {
                inputs: vec![uniform(r, &shape, 0.02, 0.98)],
                loss: Box::new(|t, v| losses::max_squares_loss(t, v[0], 4).unwrap()),
            }
        }),
        ("combined", |r| {
            let c = r.gen_range(2..=3);
            let tb = random_targets(r, 1, c);
            let mode = if r.gen_bool(0.5) { UdaMode::Em } else { UdaMode::Msl };
            let w = LossWeights {
                lambda_ent: r.gen_range(0.1..1.0),
                lambda_ms: r.gen_range(0.1..1.0),
                ..LossWeights::default()
            };
            let src = uniform(r, tb.heatmap.shape(), 0.02, 0.98);
            let off = uniform(r, tb.offset.shape(), -1.0, 2.0);
            let size = uniform(r, tb.size.shape(), -1.0, 5.0);
            let tgt = uniform(r, tb.heatmap.shape(), 0.02, 0.98);
            Case {
                inputs: vec![src, off, size, tgt],
                loss: Box::new(move |t, v| {
                    let counts = counts(&tb.objects);
                    let lh = losses::focal_loss(t, v[0], &tb.heatmap, &counts, w.alpha, w.beta).unwrap();
                    let ls = losses::l1_at_objects(t, v[2], &tb.size, &tb.objects).unwrap();
                    let lo = losses::l1_at_objects(t, v[1], &tb.offset, &tb.objects).unwrap();
                    let det = losses::weighted_detection(t, lh, ls, lo, &w).unwrap();
                    losses::combined_loss(t, mode, &det, Some(v[3]), &w, 4).unwrap().total
                }),
            }
        }),
    ]
}

/// Worst relative error over `instances` random cases of each generator.
pub fn run_suite(cases: &[(&'static str, fn(&mut ChaCha8Rng) -> Case)], instances: usize, seed: u64) -> Vec<(&'static str, f64)> {
    cases
        .iter()
        .enumerate()
        .map(|(i, (name, make))| {
            let mut r = super::rng(seed + i as u64);
            let worst = (0..instances).map(|_| check(&make(&mut r))).fold(0.0, f64::max);
            (*name, worst)
        })
        .collect()
}
