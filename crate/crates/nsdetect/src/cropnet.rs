//! The CropNet patch-classifier family: a contracting 3D CNN parameterized
//! by blocks-per-level, with binary cross-entropy loss, dropout model noise
//! and an Adam optimizer. Numerics go through the pluggable [`Backend`]
//! contract; [`CpuBackend`] is the self-contained reference implementation.
//!
//! `CropNet-bX-Ymm` processes a cubic ROI of edge `Y` mm (1 mm voxels) with
//! `X` conv/relu/dropout blocks per resolution level and outputs one scalar
//! in [0, 1], the probability that the ROI contains a lesion.

pub mod backend;
pub mod checkpoint;
pub mod tensor;

pub use backend::{Backend, CpuBackend};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use tensor::{add_assign_tensors, Scalar, Tensor};

use rand::{Rng as _, RngCore as _};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{fork_rng, seeded_rng, Rng};
use crate::volgrid::Roi;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropNetConfig {
    /// ROI edge in mm (= voxels at 1 mm pitch).
    pub input_edge_mm: usize,
    /// Blocks per resolution level: 2 for the teacher, 4 for the student.
    pub blocks_per_level: usize,
    pub levels: usize,
    /// Output channels per level, ascending.
    pub channel_schedule: Vec<usize>,
    pub dropout_rate: f64,
}

impl CropNetConfig {
    /// Desk-scale configuration: small channels, fast enough for CPU runs.
    pub fn desk(blocks_per_level: usize) -> Self {
        Self {
            input_edge_mm: 16,
            blocks_per_level,
            levels: 4,
            channel_schedule: vec![8, 16, 32, 64],
            dropout_rate: 0.15,
        }
    }

    /// Full-scale configuration targeting the teacher/student parameter
    /// budgets (~14M for b2, ~32M for b4).
    pub fn full_scale(blocks_per_level: usize) -> Self {
        Self {
            input_edge_mm: 16,
            blocks_per_level,
            levels: 4,
            channel_schedule: vec![64, 128, 256, 512],
            dropout_rate: 0.15,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.blocks_per_level == 0 {
            return Err(Error::InvalidParameter(
                "levels and blocks_per_level must be positive".into(),
            ));
        }
        if self.channel_schedule.len() != self.levels {
            return Err(Error::InvalidParameter(format!(
                "channel_schedule has {} entries for {} levels",
                self.channel_schedule.len(),
                self.levels
            )));
        }
        if self.channel_schedule.iter().any(|&c| c == 0) {
            return Err(Error::InvalidParameter("channel counts must be positive".into()));
        }
        let down = 1usize << (self.levels - 1);
        if self.input_edge_mm == 0 || self.input_edge_mm % down != 0 {
            return Err(Error::InvalidParameter(format!(
                "input edge {} not divisible by 2^(levels-1) = {down}",
                self.input_edge_mm
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidParameter(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Edge length of the feature map at a level.
    fn edge_at(&self, level: usize) -> usize {
        self.input_edge_mm >> level
    }

    fn flat_len(&self) -> usize {
        let e = self.edge_at(self.levels - 1);
        self.channel_schedule[self.levels - 1] * e * e * e
    }

    /// Total trainable parameter count.
    pub fn param_count(&self) -> usize {
        conv_plans(self)
            .iter()
            .map(|p| 27 * p.c_in * p.c_out + p.c_out)
            .sum::<usize>()
            + self.flat_len()
            + 1
    }
}

struct ConvPlan {
    c_in: usize,
    c_out: usize,
    edge: usize,
    /// True for the last block of a non-final level (a pool follows).
    pool_after: bool,
}

fn conv_plans(cfg: &CropNetConfig) -> Vec<ConvPlan> {
    let mut plans = Vec::with_capacity(cfg.levels * cfg.blocks_per_level);
    let mut c_prev = 1usize;
    for level in 0..cfg.levels {
        let c = cfg.channel_schedule[level];
        for block in 0..cfg.blocks_per_level {
            plans.push(ConvPlan {
                c_in: if block == 0 { c_prev } else { c },
                c_out: c,
                edge: cfg.edge_at(level),
                pool_after: block + 1 == cfg.blocks_per_level && level + 1 < cfg.levels,
            });
        }
        c_prev = c;
    }
    plans
}

/// Names of the parameter tensors in their fixed serialization order.
pub fn parameter_names(cfg: &CropNetConfig) -> Vec<String> {
    let mut names = Vec::new();
    for level in 0..cfg.levels {
        for block in 0..cfg.blocks_per_level {
            names.push(format!("l{level}.b{block}.w"));
            names.push(format!("l{level}.b{block}.b"));
        }
    }
    names.push("head.w".into());
    names.push("head.b".into());
    names
}

/// A CropNet: configuration plus the flat parameter list (conv kernels and
/// biases per block in network order, then the dense head).
#[derive(Debug, Clone, PartialEq)]
pub struct CropNetModel<T: Scalar = f32> {
    pub config: CropNetConfig,
    pub params: Vec<Tensor<T>>,
}

/// Builds a model with fan-in-scaled uniform weight init (bound
/// `sqrt(6 / fan_in)`) and zero biases, deterministically from the seed.
pub fn build_cropnet<T: Scalar>(cfg: &CropNetConfig, init_seed: u64) -> Result<CropNetModel<T>> {
    cfg.validate()?;
    let mut rng = seeded_rng(init_seed);
    let mut params = Vec::new();
    for plan in conv_plans(cfg) {
        let fan_in = 27 * plan.c_in;
        let bound = (6.0 / fan_in as f64).sqrt();
        let n = 27 * plan.c_in * plan.c_out;
        let data: Vec<T> = (0..n)
            .map(|_| T::of_f64(rng.gen_range(-bound..bound)))
            .collect();
        params.push(Tensor::from_vec(&[plan.c_out, plan.c_in, 3, 3, 3], data));
        params.push(Tensor::zeros(&[plan.c_out]));
    }
    let flat = cfg.flat_len();
    let bound = (6.0 / flat as f64).sqrt();
    let data: Vec<T> = (0..flat)
        .map(|_| T::of_f64(rng.gen_range(-bound..bound)))
        .collect();
    params.push(Tensor::from_vec(&[1, flat], data));
    params.push(Tensor::zeros(&[1]));
    Ok(CropNetModel {
        config: cfg.clone(),
        params,
    })
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const BCE_EPS: f64 = 1e-7;

/// Mean binary cross-entropy with predictions clamped to
/// `[1e-7, 1 - 1e-7]`; accumulation is done in f64.
pub fn bce_loss<T: Scalar>(preds: &[T], labels: &[u8]) -> Result<T> {
    if preds.is_empty() {
        return Err(Error::EmptyInput("bce_loss on empty batch".into()));
    }
    if preds.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels", preds.len()),
            actual: format!("{}", labels.len()),
        });
    }
    let mut acc = 0.0f64;
    for (&p, &y) in preds.iter().zip(labels) {
        acc += bce_term(p.as_f64(), y);
    }
    Ok(T::of_f64(acc / preds.len() as f64))
}

fn bce_term(p: f64, label: u8) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    if label == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

struct BlockTrace<T> {
    input: Tensor<T>,
    /// Combined relu/dropout multiplier per element: 0 where the rectifier
    /// was inactive or the unit was dropped, the inverted-dropout scale (or
    /// 1) otherwise.
    gate: Vec<T>,
}

struct SampleTrace<T> {
    blocks: Vec<BlockTrace<T>>,
    /// (argmax indices, input shape) per pool, in forward order.
    pools: Vec<(Vec<u32>, Vec<usize>)>,
    flat: Tensor<T>,
}

fn roi_tensor<T: Scalar>(cfg: &CropNetConfig, roi: &Roi) -> Result<Tensor<T>> {
    let e = cfg.input_edge_mm;
    if roi.edge != e || roi.data.len() != e * e * e {
        return Err(Error::ShapeMismatch {
            expected: format!("ROI edge {e}"),
            actual: format!("{}", roi.edge),
        });
    }
    Ok(Tensor::from_vec(
        &[1, e, e, e],
        roi.data.iter().map(|&v| T::of_f32(v)).collect(),
    ))
}

fn forward_sample<T: Scalar, B: Backend<T>>(
    m: &CropNetModel<T>,
    backend: &B,
    roi: &Roi,
    mut dropout_rng: Option<&mut Rng>,
    record: bool,
) -> Result<(T, Option<SampleTrace<T>>)> {
    let cfg = &m.config;
    let rate = cfg.dropout_rate;
    let drop_threshold = (rate * 4294967296.0) as u64 as u32;
    let keep_scale = T::of_f64(1.0 / (1.0 - rate));

    let mut cur = roi_tensor::<T>(cfg, roi)?;
    let mut blocks = Vec::new();
    let mut pools = Vec::new();

    for (i, plan) in conv_plans(cfg).iter().enumerate() {
        let w = &m.params[2 * i];
        let b = &m.params[2 * i + 1];
        let e = plan.edge;
        let mut out = Tensor::zeros(&[plan.c_out, e, e, e]);
        backend.conv3d(&cur, w, b, &mut out);
        backend.relu(&mut out.data);

        let mut gate = if record {
            Vec::with_capacity(out.len())
        } else {
            Vec::new()
        };
        match dropout_rng.as_deref_mut() {
            Some(rng) if rate > 0.0 => {
                for v in out.data.iter_mut() {
                    let keep = rng.next_u32() >= drop_threshold;
                    let g = if keep && *v > T::zero() {
                        keep_scale
                    } else {
                        T::zero()
                    };
                    if !keep {
                        *v = T::zero();
                    } else {
                        *v *= keep_scale;
                    }
                    if record {
                        gate.push(g);
                    }
                }
            }
            _ => {
                if record {
                    for &v in out.data.iter() {
                        gate.push(if v > T::zero() { T::one() } else { T::zero() });
                    }
                }
            }
        }

        if record {
            blocks.push(BlockTrace {
                input: std::mem::replace(&mut cur, Tensor::zeros(&[1])),
                gate,
            });
        }
        cur = out;

        if plan.pool_after {
            let half = e / 2;
            let mut pooled = Tensor::zeros(&[plan.c_out, half, half, half]);
            let mut idx = Vec::new();
            backend.maxpool2(&cur, &mut pooled, &mut idx);
            if record {
                pools.push((idx, cur.shape.clone()));
            }
            cur = pooled;
        }
    }

    let head_w = &m.params[m.params.len() - 2];
    let head_b = &m.params[m.params.len() - 1];
    let logit = backend.dense(&cur.data, &head_w.data, head_b.data[0]);
    let prob = sigmoid(logit);

    let trace = record.then_some(SampleTrace {
        blocks,
        pools,
        flat: cur,
    });
    Ok((prob, trace))
}

fn backward_sample<T: Scalar, B: Backend<T>>(
    m: &CropNetModel<T>,
    backend: &B,
    trace: &SampleTrace<T>,
    grad_logit: T,
) -> Vec<Tensor<T>> {
    let cfg = &m.config;
    let mut grads: Vec<Tensor<T>> = m.params.iter().map(|p| Tensor::zeros(&p.shape)).collect();
    let np = m.params.len();

    let head_w = &m.params[np - 2];
    let mut grad_flat = vec![T::zero(); trace.flat.len()];
    {
        let (gw_head, gb_head) = {
            let (a, b) = grads.split_at_mut(np - 1);
            (&mut a[np - 2], &mut b[0])
        };
        backend.dense_backward(
            &trace.flat.data,
            &head_w.data,
            grad_logit,
            &mut grad_flat,
            &mut gw_head.data,
            &mut gb_head.data[0],
        );
    }

    let plans = conv_plans(cfg);
    let mut cur_grad = Tensor::from_vec(&trace.flat.shape.clone(), grad_flat);
    let mut pool_rev = trace.pools.iter().rev();

    for (i, plan) in plans.iter().enumerate().rev() {
        if plan.pool_after {
            let (idx, in_shape) = pool_rev.next().expect("pool trace");
            let mut unpooled = Tensor::zeros(in_shape);
            backend.maxpool2_backward(&cur_grad, idx, &mut unpooled);
            cur_grad = unpooled;
        }
        let block = &trace.blocks[i];
        for (g, &gate) in cur_grad.data.iter_mut().zip(&block.gate) {
            *g *= gate;
        }
        let mut grad_input = Tensor::zeros(&block.input.shape);
        {
            let (gw, gb) = {
                let (a, b) = grads.split_at_mut(2 * i + 1);
                (&mut a[2 * i], &mut b[0])
            };
            backend.conv3d_backward(
                &block.input,
                &m.params[2 * i],
                &cur_grad,
                &mut grad_input,
                gw,
                gb,
            );
        }
        cur_grad = grad_input;
    }
    grads
}

/// Fingerprint of the eval-mode piecewise-linear region the batch lands in:
/// rectifier activity and pooling argmax choices, hashed.
///
/// The network is piecewise smooth; a central-difference gradient estimate
/// at step `h` is only a derivative when both endpoints share one smooth
/// piece, i.e. when their signatures agree. Gradient-check harnesses use
/// this to tell FD noise at a kink from an actual backpropagation error.
pub fn activation_signature<T: Scalar>(m: &CropNetModel<T>, batch: &[&Roi]) -> Result<u64> {
    m.config.validate()?;
    let backend = &CpuBackend;
    let mut hash = 0xcbf29ce484222325u64; // FNV-1a
    let mut feed = |v: u64| {
        hash ^= v;
        hash = hash.wrapping_mul(0x100000001b3);
    };
    for roi in batch {
        let mut cur = roi_tensor::<T>(&m.config, roi)?;
        for (i, plan) in conv_plans(&m.config).iter().enumerate() {
            let e = plan.edge;
            let mut out = Tensor::zeros(&[plan.c_out, e, e, e]);
            backend.conv3d(&cur, &m.params[2 * i], &m.params[2 * i + 1], &mut out);
            backend.relu(&mut out.data);
            for (j, &v) in out.data.iter().enumerate() {
                if v > T::zero() {
                    feed(j as u64);
                }
            }
            cur = out;
            if plan.pool_after {
                let half = e / 2;
                let mut pooled = Tensor::zeros(&[plan.c_out, half, half, half]);
                let mut idx = Vec::new();
                backend.maxpool2(&cur, &mut pooled, &mut idx);
                for &j in &idx {
                    feed(j as u64);
                }
                cur = pooled;
            }
        }
    }
    Ok(hash)
}

/// Batch forward pass. In train mode, dropout is applied with inverted
/// scaling using per-sample streams forked from `rng`; eval mode is
/// deterministic and ignores the rng.
pub fn forward<T: Scalar>(
    m: &CropNetModel<T>,
    batch: &[&Roi],
    train_mode: bool,
    rng: &mut Rng,
) -> Result<Vec<T>> {
    forward_with(&CpuBackend, m, batch, train_mode, rng)
}

pub fn forward_with<T: Scalar, B: Backend<T>>(
    backend: &B,
    m: &CropNetModel<T>,
    batch: &[&Roi],
    train_mode: bool,
    rng: &mut Rng,
) -> Result<Vec<T>> {
    m.config.validate()?;
    let dropout = train_mode && m.config.dropout_rate > 0.0;
    let mut sample_rngs: Vec<Option<Rng>> = Vec::with_capacity(batch.len());
    for _ in 0..batch.len() {
        sample_rngs.push(dropout.then(|| fork_rng(rng)));
    }
    batch
        .par_iter()
        .zip(sample_rngs.into_par_iter())
        .map(|(roi, mut srng)| {
            forward_sample(m, backend, roi, srng.as_mut(), false).map(|(p, _)| p)
        })
        .collect()
}

/// Deterministic eval-mode forward pass.
pub fn forward_eval<T: Scalar>(m: &CropNetModel<T>, batch: &[&Roi]) -> Result<Vec<T>> {
    let mut rng = seeded_rng(0);
    forward(m, batch, false, &mut rng)
}

/// Gradients of the weighted sum of per-sample BCE losses.
#[derive(Debug)]
pub struct BatchGradients<T: Scalar> {
    pub grads: Vec<Tensor<T>>,
    pub preds: Vec<T>,
    /// `sum_i weights[i] * bce(pred_i, label_i)`.
    pub loss: T,
}

/// Runs forward (with dropout when `train_mode`) and reverse-mode
/// backpropagation, returning the gradients of `sum_i w_i * loss_i` with
/// respect to every parameter. Per-sample work is parallel; the reduction
/// order is fixed, so results are deterministic for a given rng.
pub fn backward<T: Scalar>(
    m: &CropNetModel<T>,
    batch: &[&Roi],
    labels: &[u8],
    weights: &[T],
    train_mode: bool,
    rng: &mut Rng,
) -> Result<BatchGradients<T>> {
    backward_with(&CpuBackend, m, batch, labels, weights, train_mode, rng)
}

pub fn backward_with<T: Scalar, B: Backend<T>>(
    backend: &B,
    m: &CropNetModel<T>,
    batch: &[&Roi],
    labels: &[u8],
    weights: &[T],
    train_mode: bool,
    rng: &mut Rng,
) -> Result<BatchGradients<T>> {
    m.config.validate()?;
    if batch.is_empty() {
        return Err(Error::EmptyInput("backward on empty batch".into()));
    }
    if batch.len() != labels.len() || batch.len() != weights.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels and weights", batch.len()),
            actual: format!("{} labels, {} weights", labels.len(), weights.len()),
        });
    }
    let dropout = train_mode && m.config.dropout_rate > 0.0;
    let mut sample_rngs: Vec<Option<Rng>> = Vec::with_capacity(batch.len());
    for _ in 0..batch.len() {
        sample_rngs.push(dropout.then(|| fork_rng(rng)));
    }

    let per_sample: Vec<(T, Vec<Tensor<T>>)> = batch
        .par_iter()
        .zip(sample_rngs.into_par_iter())
        .enumerate()
        .map(|(i, (roi, mut srng))| {
            let (prob, trace) = forward_sample(m, backend, roi, srng.as_mut(), true)?;
            let trace = trace.expect("recorded");
            let p = prob.as_f64();
            let saturated = p < BCE_EPS || p > 1.0 - BCE_EPS;
            let y = T::of_f32(labels[i] as f32);
            let grad_logit = if saturated || weights[i] == T::zero() {
                T::zero()
            } else {
                weights[i] * (prob - y)
            };
            let grads = if grad_logit == T::zero() {
                m.params.iter().map(|t| Tensor::zeros(&t.shape)).collect()
            } else {
                backward_sample(m, backend, &trace, grad_logit)
            };
            Ok((prob, grads))
        })
        .collect::<Result<_>>()?;

    let mut grads: Vec<Tensor<T>> = m.params.iter().map(|p| Tensor::zeros(&p.shape)).collect();
    let mut preds = Vec::with_capacity(batch.len());
    let mut loss_acc = 0.0f64;
    for (i, (prob, g)) in per_sample.into_iter().enumerate() {
        add_assign_tensors(&mut grads, &g);
        loss_acc += weights[i].as_f64() * bce_term(prob.as_f64(), labels[i]);
        preds.push(prob);
    }
    Ok(BatchGradients {
        grads,
        preds,
        loss: T::of_f64(loss_acc),
    })
}

/// Adam optimizer state: step count, moment estimates and hyperparameters.
#[derive(Debug, Clone)]
pub struct OptState<T: Scalar> {
    pub step: u64,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
}

impl<T: Scalar> OptState<T> {
    pub fn new(model: &CropNetModel<T>, lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            step: 0,
            lr: T::of_f64(lr),
            beta1: T::of_f64(beta1),
            beta2: T::of_f64(beta2),
            epsilon: T::of_f64(epsilon),
            first_moment: model.params.iter().map(|p| Tensor::zeros(&p.shape)).collect(),
            second_moment: model.params.iter().map(|p| Tensor::zeros(&p.shape)).collect(),
        }
    }
}

/// Standard Adam update with bias correction; increments the step counter.
pub fn adam_step<T: Scalar>(
    model: &mut CropNetModel<T>,
    grads: &[Tensor<T>],
    state: &mut OptState<T>,
) -> Result<()> {
    if grads.len() != model.params.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} gradient tensors", model.params.len()),
            actual: format!("{}", grads.len()),
        });
    }
    for (g, p) in grads.iter().zip(&model.params) {
        if g.shape != p.shape {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", p.shape),
                actual: format!("{:?}", g.shape),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let one = T::one();
    let bc1 = one - state.beta1.powi(t);
    let bc2 = one - state.beta2.powi(t);
    for ((p, g), (m1, m2)) in model
        .params
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut().zip(state.second_moment.iter_mut()))
    {
        for i in 0..p.data.len() {
            let grad = g.data[i];
            m1.data[i] = state.beta1 * m1.data[i] + (one - state.beta1) * grad;
            m2.data[i] = state.beta2 * m2.data[i] + (one - state.beta2) * grad * grad;
            let mhat = m1.data[i] / bc1;
            let vhat = m2.data[i] / bc2;
            p.data[i] = p.data[i] - state.lr * mhat / (vhat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}
