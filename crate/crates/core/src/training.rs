//! Writer-independent feature learning: SGD with Nesterov momentum, weight
//! decay on weights, a step learning-rate schedule, random-crop
//! augmentation, and population batch-norm statistics computed after
//! training.

use std::io::{Cursor, Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_tensor, read_u32, read_u64, write_tensor};
use crate::losses::{remap_labels_forgery_as_class, Formulation, LossConfig};
use crate::nn::{Layer, Mode, Network, ParamKind};
use crate::preprocess::{center_crop, crop_at, draw_crop_offset, PreprocessConfig, ProcessedImage};
use crate::seed::derive_seed;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub lr_initial: f64,
    pub lr_drop_factor: f64,
    pub lr_drop_every: usize,
    pub seed: u64,
    /// Standard deviation of the Gaussian initialization of both heads.
    pub head_init_std: f64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 60,
            lr_initial: 1e-3,
            lr_drop_factor: 10.0,
            lr_drop_every: 20,
            seed: 0,
            head_init_std: 0.01,
            loss: LossConfig {
                formulation: Formulation::MultitaskL2,
                lambda: 0.95,
            },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size < 2 {
            return bad("training.batch_size must be at least 2 (batch norm needs two samples)");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("training.momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("training.weight_decay must be non-negative");
        }
        if self.epochs == 0 || self.lr_drop_every == 0 {
            return bad("training.epochs and training.lr_drop_every must be positive");
        }
        if !(self.lr_initial > 0.0) || !(self.lr_drop_factor > 0.0) {
            return bad("training.lr_initial and training.lr_drop_factor must be positive");
        }
        if !(self.head_init_std > 0.0) {
            return bad("training.head_init_std must be positive");
        }
        self.loss.validate()
    }
}

/// `lr_initial / lr_drop_factor ^ floor(epoch / lr_drop_every)`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let drops = (epoch / cfg.lr_drop_every) as i32;
    cfg.lr_initial / cfg.lr_drop_factor.powi(drops)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T = f32> {
    /// Aligned with [`Network::params`].
    pub velocity: Vec<Tensor<T>>,
    /// Number of completed epochs.
    pub epoch: usize,
    /// Learning rate of the last completed epoch.
    pub lr: f64,
}

const OPTIMIZER_MAGIC: &[u8; 4] = b"SGOP";

impl<T: Scalar> OptimizerState<T> {
    pub fn new(net: &Network<T>) -> Self {
        OptimizerState {
            velocity: net
                .params()
                .iter()
                .map(|(p, _)| Tensor::zeros(p.shape()))
                .collect(),
            epoch: 0,
            lr: 0.0,
        }
    }
}

impl OptimizerState<f32> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.write_all(OPTIMIZER_MAGIC)?;
        buf.write_all(&(self.epoch as u64).to_le_bytes())?;
        buf.write_all(&self.lr.to_bits().to_le_bytes())?;
        buf.write_all(&(self.velocity.len() as u32).to_le_bytes())?;
        for v in &self.velocity {
            write_tensor(&mut buf, v)?;
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != OPTIMIZER_MAGIC {
            return Err(Error::Format("optimizer state: bad magic".into()));
        }
        let epoch = read_u64(&mut r)? as usize;
        let lr = f64::from_bits(read_u64(&mut r)?);
        let count = read_u32(&mut r)? as usize;
        let velocity = (0..count)
            .map(|_| read_tensor(&mut r))
            .collect::<Result<Vec<_>>>()?;
        Ok(OptimizerState {
            velocity,
            epoch,
            lr,
        })
    }

    /// Checks that the velocities mirror the network's parameters.
    pub fn check_matches(&self, net: &Network<f32>) -> Result<()> {
        let params = net.params();
        let ok = params.len() == self.velocity.len()
            && params
                .iter()
                .zip(&self.velocity)
                .all(|((p, _), v)| p.shape() == v.shape());
        if ok {
            Ok(())
        } else {
            Err(Error::Format(
                "optimizer state does not match the network parameters".into(),
            ))
        }
    }
}

/// One Nesterov step. Weight decay applies to weights only:
/// `g = grad + wd p`, `v = mu v - lr g`, `p += mu v - lr g`.
///
/// Every gradient is checked for finiteness before any parameter moves.
pub fn nesterov_step<T: Scalar>(
    params: Vec<(&mut Tensor<T>, ParamKind)>,
    grads: &[Tensor<T>],
    velocity: &mut [Tensor<T>],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} velocities",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for (i, ((p, _), (g, v))) in params
        .iter()
        .zip(grads.iter().zip(velocity.iter()))
        .enumerate()
    {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::Shape(format!(
                "parameter {i}: {:?} vs gradient {:?} vs velocity {:?}",
                p.shape(),
                g.shape(),
                v.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(i));
        }
    }
    for ((p, kind), (g, v)) in params
        .into_iter()
        .zip(grads.iter().zip(velocity.iter_mut()))
    {
        let wd = if kind == ParamKind::Weight {
            weight_decay
        } else {
            0.0
        };
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            let p64 = pv.as_f64();
            let step = gv.as_f64() + wd * p64;
            let vel = momentum * vv.as_f64() - lr * step;
            *vv = T::from_f64(vel);
            *pv = T::from_f64(p64 + momentum * vel - lr * step);
        }
    }
    Ok(())
}

/// He-normal trunk weights (`std = sqrt(2 / fan_in)`), small Gaussian head
/// weights, zero biases, `gamma = 1`, `beta = 0`, and fresh population
/// statistics. Deterministic in `seed`.
pub fn init_parameters<T: Scalar>(net: &mut Network<T>, seed: u64, head_std: f64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "init"));
    let mut fill = |t: &mut Tensor<T>, std: f64| -> Result<()> {
        let normal =
            Normal::new(0.0, std).map_err(|e| Error::Config(format!("init std {std}: {e}")))?;
        for v in t.data_mut() {
            *v = T::from_f64(normal.sample(&mut rng));
        }
        Ok(())
    };
    for layer in &mut net.layers {
        match layer {
            Layer::Conv(c) => {
                let std = (2.0 / c.fan_in() as f64).sqrt();
                fill(&mut c.weight, std)?;
                if let Some(b) = &mut c.bias {
                    b.data_mut().fill(T::zero());
                }
            }
            Layer::Linear(fc) => {
                let std = (2.0 / fc.in_features as f64).sqrt();
                fill(&mut fc.weight, std)?;
                if let Some(b) = &mut fc.bias {
                    b.data_mut().fill(T::zero());
                }
            }
            Layer::BatchNorm(bn) => {
                bn.gamma.data_mut().fill(T::one());
                bn.beta.data_mut().fill(T::zero());
                bn.running_mean.data_mut().fill(T::zero());
                bn.running_var.data_mut().fill(T::one());
            }
            Layer::MaxPool(_) | Layer::Relu => {}
        }
    }
    for head in net.user_head.iter_mut().chain(net.forgery_head.iter_mut()) {
        fill(&mut head.weight, head_std)?;
        if let Some(b) = &mut head.bias {
            b.data_mut().fill(T::zero());
        }
    }
    Ok(())
}

/// Preprocessed development images with `(user, forged)` labels.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub images: Vec<ProcessedImage>,
    pub labels: Vec<(usize, bool)>,
    pub num_users: usize,
}

impl TrainingSet {
    pub fn new(
        images: Vec<ProcessedImage>,
        labels: Vec<(usize, bool)>,
        num_users: usize,
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&(y, _)) = labels.iter().find(|(y, _)| *y >= num_users) {
            return Err(Error::Index(format!("label {y} outside {num_users} users")));
        }
        Ok(TrainingSet {
            images,
            labels,
            num_users,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Keeps only what `formulation` trains on (genuine samples for the
    /// genuine-only objective).
    pub fn for_formulation(&self, formulation: Formulation) -> TrainingSet {
        if formulation.uses_forgeries() {
            self.clone()
        } else {
            self.genuine_only()
        }
    }

    /// Keeps only samples with nonzero weight under `loss`.
    pub fn for_loss(&self, loss: &LossConfig) -> TrainingSet {
        if loss.trains_on_forgeries() {
            self.clone()
        } else {
            self.genuine_only()
        }
    }

    fn genuine_only(&self) -> TrainingSet {
        let (images, labels) = self
            .images
            .iter()
            .zip(&self.labels)
            .filter(|(_, (_, forged))| !forged)
            .map(|(img, l)| (img.clone(), *l))
            .unzip();
        TrainingSet {
            images,
            labels,
            num_users: self.num_users,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// One-based index of the completed epoch.
    pub epoch: usize,
    pub loss: f64,
    pub user_loss: f64,
    pub forgery_loss: f64,
    /// Fraction of samples whose user-head argmax is the target class;
    /// NaN when no sample has a user target.
    pub user_acc: f64,
    /// Fraction of samples with `(P(f|X) >= 0.5) == forged`; NaN without a
    /// forgery head.
    pub forgery_acc: f64,
    pub lr: f64,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str = "epoch,loss,user_acc,forgery_acc,lr";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:e}",
            self.epoch, self.loss, self.user_acc, self.forgery_acc, self.lr
        )
    }
}

/// Mini-batch boundaries over `n` samples. A trailing batch of one sample
/// is merged into the previous batch, since batch norm needs two.
pub fn batch_ranges(n: usize, batch_size: usize) -> Result<Vec<std::ops::Range<usize>>> {
    if n < 2 {
        return Err(Error::InsufficientBatch(n));
    }
    let mut ranges: Vec<_> = (0..n)
        .step_by(batch_size)
        .map(|s| s..(s + batch_size).min(n))
        .collect();
    if ranges.len() > 1 && ranges.last().map(|r| r.len()) == Some(1) {
        let last = ranges.pop().expect("nonempty");
        ranges.last_mut().expect("nonempty").end = last.end;
    }
    Ok(ranges)
}

#[derive(Default)]
struct Tally {
    samples: usize,
    loss: f64,
    user_loss: f64,
    forgery_loss: f64,
    user_hits: usize,
    user_total: usize,
    forgery_hits: usize,
    forgery_total: usize,
}

impl Tally {
    fn rate(hits: usize, total: usize) -> f64 {
        if total == 0 {
            f64::NAN
        } else {
            hits as f64 / total as f64
        }
    }
}

/// Target class of the user head for a sample, if the formulation asks the
/// head to classify it.
fn user_target(
    formulation: Formulation,
    y: usize,
    forged: bool,
    num_users: usize,
) -> Option<usize> {
    match formulation {
        Formulation::ForgeryAsClass => Some(remap_labels_forgery_as_class(y, forged, num_users)),
        Formulation::MultitaskL2 | Formulation::GenuineOnly if forged => None,
        _ => Some(y),
    }
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn score_outputs(
    tally: &mut Tally,
    out: &crate::nn::NetworkOutput<f32>,
    labels: &[(usize, bool)],
    formulation: Formulation,
    num_users: usize,
) {
    for (i, &(y, forged)) in labels.iter().enumerate() {
        if let Some(p) = &out.p_user {
            if let Some(t) = user_target(formulation, y, forged, num_users) {
                tally.user_total += 1;
                tally.user_hits += usize::from(argmax(p.sample(i)) == t);
            }
        }
        if let Some(p) = &out.p_forgery {
            tally.forgery_total += 1;
            tally.forgery_hits += usize::from((p.data()[i] >= 0.5) == forged);
        }
    }
}

fn stack_crops(crops: Vec<Tensor<f32>>) -> Result<Tensor<f32>> {
    let refs: Vec<&Tensor<f32>> = crops.iter().collect();
    Tensor::stack(&refs)
}

/// One pass over the shuffled training set. Shuffling and cropping draw
/// from separate streams keyed by `(seed, epoch)`, so an epoch's randomness
/// does not depend on how earlier epochs were run.
pub fn train_epoch(
    net: &mut Network<f32>,
    set: &TrainingSet,
    cfg: &TrainConfig,
    pcfg: &PreprocessConfig,
    state: &mut OptimizerState<f32>,
) -> Result<EpochMetrics> {
    let epoch = state.epoch;
    let lr = lr_schedule(epoch, cfg);
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
        cfg.seed,
        &format!("shuffle/{epoch}"),
    )));
    let mut crop_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("crop/{epoch}")));
    let (h, w, scale) = (pcfg.input_height, pcfg.input_width, pcfg.input_scale);

    let mut tally = Tally::default();
    for range in batch_ranges(order.len(), cfg.batch_size)? {
        let idx = &order[range];
        let crops = idx
            .iter()
            .map(|&i| {
                let img = &set.images[i];
                let (top, left) = draw_crop_offset(img, h, w, &mut crop_rng)?;
                crop_at(img, top, left, h, w, scale)
            })
            .collect::<Result<Vec<_>>>()?;
        let x = stack_crops(crops)?;
        let labels: Vec<(usize, bool)> = idx.iter().map(|&i| set.labels[i]).collect();

        let (out, trace) = net.forward_traced(&x, Mode::Train)?;
        let bl = cfg.loss.batch_loss(&out, &labels, set.num_users)?;
        let grads = net.backward(
            &trace,
            bl.grad_user_logits.as_ref(),
            bl.grad_forgery_logit.as_ref(),
        )?;
        nesterov_step(
            net.params_mut(),
            &grads.params,
            &mut state.velocity,
            lr,
            cfg.momentum,
            cfg.weight_decay,
        )?;

        let n = labels.len();
        tally.samples += n;
        tally.loss += bl.loss * n as f64;
        tally.user_loss += bl.user_loss * n as f64;
        tally.forgery_loss += bl.forgery_loss * n as f64;
        score_outputs(
            &mut tally,
            &out,
            &labels,
            cfg.loss.formulation,
            set.num_users,
        );
    }
    state.epoch += 1;
    state.lr = lr;
    let n = tally.samples as f64;
    Ok(EpochMetrics {
        epoch: state.epoch,
        loss: tally.loss / n,
        user_loss: tally.user_loss / n,
        forgery_loss: tally.forgery_loss / n,
        user_acc: Tally::rate(tally.user_hits, tally.user_total),
        forgery_acc: Tally::rate(tally.forgery_hits, tally.forgery_total),
        lr,
    })
}

/// Runs epochs `state.epoch..cfg.epochs`, calling `on_epoch` after each so
/// the caller can log and checkpoint.
pub fn train(
    net: &mut Network<f32>,
    set: &TrainingSet,
    cfg: &TrainConfig,
    pcfg: &PreprocessConfig,
    state: &mut OptimizerState<f32>,
    mut on_epoch: impl FnMut(&EpochMetrics, &Network<f32>, &OptimizerState<f32>) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    state.check_matches(net)?;
    let mut history = Vec::new();
    while state.epoch < cfg.epochs {
        let m = train_epoch(net, set, cfg, pcfg, state)?;
        on_epoch(&m, net, state)?;
        history.push(m);
    }
    Ok(history)
}

/// Center crops of `images` as `[N, 1, h, w]` batches of at most `chunk`.
pub fn center_crop_batches<'a>(
    images: &'a [ProcessedImage],
    pcfg: &'a PreprocessConfig,
    chunk: usize,
) -> impl Iterator<Item = Result<Tensor<f32>>> + 'a {
    images.chunks(chunk.max(1)).map(move |part| {
        let crops = part
            .iter()
            .map(|img| center_crop(img, pcfg.input_height, pcfg.input_width, pcfg.input_scale))
            .collect::<Result<Vec<_>>>()?;
        stack_crops(crops)
    })
}

/// Running per-channel moments, merged chunk by chunk.
#[derive(Clone, Debug, Default)]
struct Moments {
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    /// Two-pass moments of one chunk, combined into the running totals.
    fn add(&mut self, x: &Tensor<f32>) -> Result<()> {
        let (n, c, spatial) = match x.shape() {
            [n, c] => (*n, *c, 1),
            [n, c, h, w] => (*n, *c, h * w),
            s => return Err(Error::Shape(format!("batch-norm input {s:?}"))),
        };
        if self.mean.is_empty() {
            self.mean = vec![0.0; c];
            self.m2 = vec![0.0; c];
        }
        let cnt = (n * spatial) as f64;
        for ch in 0..c {
            let values = (0..n).flat_map(|s| {
                x.data()[(s * c + ch) * spatial..][..spatial]
                    .iter()
                    .map(|v| f64::from(*v))
            });
            let mean = values.clone().sum::<f64>() / cnt;
            let m2: f64 = values.map(|v| (v - mean).powi(2)).sum();
            let total = self.count + cnt;
            let delta = mean - self.mean[ch];
            self.mean[ch] += delta * cnt / total;
            self.m2[ch] += m2 + delta * delta * self.count * cnt / total;
        }
        self.count += cnt;
        Ok(())
    }
}

/// Replaces every batch norm's population statistics with the mean and
/// (biased) variance of its input over the center crops of `images`.
///
/// Layers are finalized in order, each from inference-mode activations of
/// the already finalized layers below it, so the stored statistics are
/// exactly those of the inputs the layer sees at inference time.
pub fn finalize_bn_statistics(
    net: &mut Network<f32>,
    images: &[ProcessedImage],
    pcfg: &PreprocessConfig,
    chunk: usize,
) -> Result<()> {
    if images.is_empty() {
        return Err(Error::Empty("no images for batch-norm statistics".into()));
    }
    let bn_layers: Vec<usize> = net.batch_norms().map(|(i, _)| i).collect();
    for li in bn_layers {
        let mut moments = Moments::default();
        for x in center_crop_batches(images, pcfg, chunk) {
            let h = net.forward_prefix(&x?, li, Mode::Inference)?;
            moments.add(&h)?;
        }
        if let Layer::BatchNorm(bn) = &mut net.layers[li] {
            let c = bn.channels;
            bn.running_mean =
                Tensor::from_vec(&[c], moments.mean.iter().map(|&m| m as f32).collect())?;
            bn.running_var = Tensor::from_vec(
                &[c],
                moments
                    .m2
                    .iter()
                    .map(|&m| (m / moments.count) as f32)
                    .collect(),
            )?;
        }
    }
    Ok(())
}

/// Inference-mode accuracies on center crops.
pub fn evaluate_accuracy(
    net: &Network<f32>,
    set: &TrainingSet,
    formulation: Formulation,
    pcfg: &PreprocessConfig,
    chunk: usize,
) -> Result<(f64, f64)> {
    let mut tally = Tally::default();
    let chunk = chunk.max(1);
    for (b, x) in center_crop_batches(&set.images, pcfg, chunk).enumerate() {
        let out = net.forward(&x?, Mode::Inference)?;
        let start = b * chunk;
        let labels = &set.labels[start..(start + chunk).min(set.len())];
        score_outputs(&mut tally, &out, labels, formulation, set.num_users);
    }
    Ok((
        Tally::rate(tally.user_hits, tally.user_total),
        Tally::rate(tally.forgery_hits, tally.forgery_total),
    ))
}

/// Mean user cross-entropy against each sample's user label, in train mode
/// over consecutive batches of `batch`, on center crops of `set`.
pub fn mean_user_loss(
    net: &Network<f32>,
    set: &TrainingSet,
    pcfg: &PreprocessConfig,
    batch: usize,
) -> Result<f64> {
    let cfg = LossConfig {
        formulation: Formulation::GenuineOnly,
        lambda: 0.0,
    };
    let mut total = 0.0;
    let batch = batch.max(2);
    for range in batch_ranges(set.len(), batch)? {
        let crops = range
            .clone()
            .map(|i| {
                let img = &set.images[i];
                center_crop(img, pcfg.input_height, pcfg.input_width, pcfg.input_scale)
            })
            .collect::<Result<Vec<_>>>()?;
        let out = net.forward(&stack_crops(crops)?, Mode::Train)?;
        let labels: Vec<(usize, bool)> = set.labels[range.clone()]
            .iter()
            .map(|&(y, _)| (y, false))
            .collect();
        total += cfg.batch_loss(&out, &labels, set.num_users)?.user_loss * range.len() as f64;
    }
    Ok(total / set.len() as f64)
}

/// Checkpoint payload carrying the optimizer state after the network.
pub fn write_training_checkpoint<W: Write>(
    w: &mut W,
    net: &Network<f32>,
    state: &OptimizerState<f32>,
    config_hash: u64,
) -> Result<()> {
    crate::nn::checkpoint::write_checkpoint(w, net, config_hash, &state.to_bytes()?)
}

pub fn read_training_checkpoint<R: Read>(
    r: &mut R,
) -> Result<(Network<f32>, Option<OptimizerState<f32>>, u64)> {
    let ck = crate::nn::checkpoint::read_checkpoint(r)?;
    let state = if ck.extra.is_empty() {
        None
    } else {
        let s = OptimizerState::from_bytes(&ck.extra)?;
        s.check_matches(&ck.network)?;
        Some(s)
    };
    Ok((ck.network, state, ck.config_hash))
}
