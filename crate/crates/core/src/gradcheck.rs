//! Central finite-difference checks of every backward pass and every loss
//! gradient, run in `f64` on randomized small instances.
//!
//! Each check perturbs one coordinate at a time by `±STEP` and compares the
//! symmetric difference quotient with the analytic gradient. Instances are
//! built away from kinks (ReLU zero, pooling ties); for the composed network,
//! coordinates whose perturbation flips a ReLU sign or a pooling argmax are
//! counted as skipped rather than compared.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{forgery_loss, user_loss, Formulation, LossConfig};
use crate::nn::activation::{relu, relu_backward, sigmoid, sigmoid_scalar, softmax};
use crate::nn::batchnorm::channel_moments;
use crate::nn::{
    Architecture, BatchNorm, Conv2d, LayerSpec, Linear, MaxPool2d, Mode, Network, NetworkOutput,
};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-3;

/// Denominator floor of the elementwise relative error, so that entries
/// which are zero both analytically and numerically compare as equal.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub instances: usize,
    pub coordinates: usize,
    pub skipped: usize,
    /// Largest elementwise relative error over all compared coordinates.
    pub max_rel_error: f64,
    /// Largest `|a - n|_2 / max(|a|_2, |n|_2)` over the checked tensors.
    pub max_norm_rel_error: f64,
}

impl CheckReport {
    /// Composite checks through several curved layers are judged norm-wise;
    /// single layers and losses elementwise.
    pub fn composite(&self) -> bool {
        self.name.starts_with("network.")
    }

    pub fn gated_error(&self) -> f64 {
        if self.composite() {
            self.max_norm_rel_error
        } else {
            self.max_rel_error
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Default)]
struct Acc {
    instances: usize,
    coordinates: usize,
    skipped: usize,
    max: f64,
    max_norm: f64,
}

#[derive(Default)]
struct Suite {
    acc: BTreeMap<String, Acc>,
}

impl Suite {
    /// Compares `analytic` with central differences of `f` around `x0`.
    /// `f` returns `None` when the perturbed point left the smooth piece.
    fn probe(
        &mut self,
        name: &str,
        x0: &Tensor<f64>,
        analytic: &Tensor<f64>,
        mut f: impl FnMut(&Tensor<f64>) -> Result<Option<f64>>,
    ) -> Result<()> {
        assert_eq!(x0.shape(), analytic.shape(), "{name}: gradient shape");
        let acc = self.acc.entry(name.to_string()).or_default();
        acc.instances += 1;
        let mut x = x0.clone();
        let (mut diff_sq, mut a_sq, mut n_sq) = (0f64, 0f64, 0f64);
        for i in 0..x0.len() {
            let orig = x0.data()[i];
            x.data_mut()[i] = orig + STEP;
            let plus = f(&x)?;
            x.data_mut()[i] = orig - STEP;
            let minus = f(&x)?;
            x.data_mut()[i] = orig;
            match (plus, minus) {
                (Some(p), Some(m)) => {
                    let numeric = (p - m) / (2.0 * STEP);
                    acc.coordinates += 1;
                    acc.max = acc.max.max(relative_error(analytic.data()[i], numeric));
                    diff_sq += (analytic.data()[i] - numeric).powi(2);
                    a_sq += analytic.data()[i].powi(2);
                    n_sq += numeric * numeric;
                }
                _ => acc.skipped += 1,
            }
        }
        let scale = a_sq.max(n_sq).sqrt().max(REL_FLOOR);
        acc.max_norm = acc.max_norm.max(diff_sq.sqrt() / scale);
        Ok(())
    }

    fn into_reports(self) -> Vec<CheckReport> {
        self.acc
            .into_iter()
            .map(|(name, a)| CheckReport {
                name,
                instances: a.instances,
                coordinates: a.coordinates,
                skipped: a.skipped,
                max_rel_error: a.max,
                max_norm_rel_error: a.max_norm,
            })
            .collect()
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::from_vec(shape, data).expect("shape")
}

/// Entries with magnitude in `[0.05, 1)`, so no `±STEP` move crosses zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape")
}

/// Pairwise gaps of at least 0.08, so no `±STEP` move changes an ordering.
fn well_separated(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let len: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let data = order
        .into_iter()
        .map(|rank| rank as f64 * 0.1 + rng.random_range(0.0..0.01) - len as f64 * 0.05)
        .collect();
    Tensor::from_vec(shape, data).expect("shape")
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn conv_case(s: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    let (n, c, o) = (
        rng.random_range(1..=2),
        rng.random_range(1..=3),
        rng.random_range(1..=3),
    );
    let (k, stride, pad) = (
        rng.random_range(1..=3),
        rng.random_range(1..=2),
        rng.random_range(0..=1),
    );
    let (h, w) = (rng.random_range(k..k + 4), rng.random_range(k..k + 4));
    let mut conv = Conv2d::<f64>::new(c, o, k, stride, pad, true);
    conv.weight = uniform(rng, conv.weight.shape(), 1.0);
    conv.bias = Some(uniform(rng, &[o], 1.0));
    let x = uniform(rng, &[n, c, h, w], 1.0);
    let r = uniform(rng, &conv.output_shape(x.shape())?, 1.0);
    let g = conv.backward(&x, &r)?;

    s.probe("conv.input", &x, &g.input, |xp| {
        Ok(Some(dot(&conv.forward(xp)?, &r)))
    })?;
    let mut probe_conv = conv.clone();
    s.probe("conv.weight", &conv.weight, &g.weight, |wp| {
        probe_conv.weight = wp.clone();
        Ok(Some(dot(&probe_conv.forward(&x)?, &r)))
    })?;
    let mut probe_conv = conv.clone();
    let bias = conv.bias.clone().expect("bias");
    s.probe("conv.bias", &bias, &g.bias.expect("bias grad"), |bp| {
        probe_conv.bias = Some(bp.clone());
        Ok(Some(dot(&probe_conv.forward(&x)?, &r)))
    })
}

fn pool_case(s: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    let pool = MaxPool2d {
        size: rng.random_range(2..=3),
        stride: rng.random_range(1..=2),
    };
    let (n, c) = (rng.random_range(1..=2), rng.random_range(1..=2));
    let (h, w) = (
        rng.random_range(pool.size..pool.size + 4),
        rng.random_range(pool.size..pool.size + 4),
    );
    let x = well_separated(rng, &[n, c, h, w]);
    let (y, argmax) = pool.forward(&x)?;
    let r = uniform(rng, y.shape(), 1.0);
    let g = pool.backward(x.shape(), &argmax, &r)?;
    s.probe("maxpool.input", &x, &g, |xp| {
        Ok(Some(dot(&pool.forward(xp)?.0, &r)))
    })
}

fn linear_case(s: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    let (n, i, o) = (
        rng.random_range(1..=3),
        rng.random_range(1..=6),
        rng.random_range(1..=5),
    );
    let mut fc = Linear::<f64>::new(i, o, true);
    fc.weight = uniform(rng, &[o, i], 1.0);
    fc.bias = Some(uniform(rng, &[o], 1.0));
    let x = uniform(rng, &[n, i], 1.0);
    let r = uniform(rng, &[n, o], 1.0);
    let g = fc.backward(&x, &r)?;

    s.probe("linear.input", &x, &g.input, |xp| {
        Ok(Some(dot(&fc.forward(xp)?, &r)))
    })?;
    let mut probe_fc = fc.clone();
    s.probe("linear.weight", &fc.weight, &g.weight, |wp| {
        probe_fc.weight = wp.clone();
        Ok(Some(dot(&probe_fc.forward(&x)?, &r)))
    })?;
    let mut probe_fc = fc.clone();
    let bias = fc.bias.clone().expect("bias");
    s.probe("linear.bias", &bias, &g.bias.expect("bias grad"), |bp| {
        probe_fc.bias = Some(bp.clone());
        Ok(Some(dot(&probe_fc.forward(&x)?, &r)))
    })
}

fn relu_case(s: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    let shape = [rng.random_range(1..=3), rng.random_range(1..=8)];
    let x = away_from_zero(rng, &shape);
    let r = uniform(rng, &shape, 1.0);
    let g = relu_backward(&r, &x);
    s.probe("relu.input", &x, &g, |xp| Ok(Some(dot(&relu(xp), &r))))
}

fn batchnorm_case(s: &mut Suite, rng: &mut ChaCha8Rng, mode: Mode) -> Result<()> {
    let (n, c) = (rng.random_range(2..=4), rng.random_range(1..=3));
    let shape = if rng.random::<bool>() {
        vec![n, c]
    } else {
        vec![n, c, rng.random_range(1..=3), rng.random_range(1..=3)]
    };
    let mut bn = BatchNorm::<f64>::new(c);
    bn.gamma = uniform(rng, &[c], 0.5).map(|v| v + 1.0);
    bn.beta = uniform(rng, &[c], 1.0);
    bn.running_mean = uniform(rng, &[c], 1.0);
    bn.running_var = uniform(rng, &[c], 0.5).map(|v| v + 1.0);
    // Keep every channel's batch spread well above the step so the
    // normalization stays in its locally quadratic regime.
    let x = loop {
        let x = uniform(rng, &shape, 2.0);
        let (_, var, _) = channel_moments(&x)?;
        if var.iter().all(|&v| v >= 0.25) {
            break x;
        }
    };
    let (y, cache) = bn.forward(&x, mode)?;
    let r = uniform(rng, y.shape(), 1.0);
    let g = bn.backward(&cache, &r)?;
    let tag = match mode {
        Mode::Train => "batchnorm.train",
        Mode::Inference => "batchnorm.inference",
    };

    s.probe(&format!("{tag}.input"), &x, &g.input, |xp| {
        Ok(Some(dot(&bn.forward(xp, mode)?.0, &r)))
    })?;
    let mut probe_bn = bn.clone();
    s.probe(&format!("{tag}.gamma"), &bn.gamma, &g.gamma, |gp| {
        probe_bn.gamma = gp.clone();
        Ok(Some(dot(&probe_bn.forward(&x, mode)?.0, &r)))
    })?;
    let mut probe_bn = bn.clone();
    s.probe(&format!("{tag}.beta"), &bn.beta, &g.beta, |bp| {
        probe_bn.beta = bp.clone();
        Ok(Some(dot(&probe_bn.forward(&x, mode)?.0, &r)))
    })
}

fn head_loss_cases(s: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    let m = rng.random_range(2..=6);
    let z = uniform(rng, &[1, m], 3.0);
    let y = rng.random_range(0..m);
    let (_, g) = user_loss(softmax(&z).data(), y)?;
    let g = Tensor::from_vec(&[1, m], g)?;
    s.probe("softmax_cross_entropy.logits", &z, &g, |zp| {
        Ok(Some(user_loss(softmax(zp).data(), y)?.0))
    })?;

    let z = uniform(rng, &[1], 4.0);
    let forged = rng.random::<bool>();
    let (_, g) = forgery_loss(sigmoid_scalar(z.data()[0]), forged);
    let g = Tensor::from_vec(&[1], vec![g])?;
    s.probe("sigmoid_cross_entropy.logit", &z, &g, |zp| {
        Ok(Some(forgery_loss(sigmoid_scalar(zp.data()[0]), forged).0))
    })
}

fn outputs(zu: &Tensor<f64>, zf: Option<&Tensor<f64>>) -> NetworkOutput<f64> {
    NetworkOutput {
        user_logits: Some(zu.clone()),
        p_user: Some(softmax(zu)),
        forgery_logit: zf.cloned(),
        p_forgery: zf.map(sigmoid),
        phi: Tensor::zeros(&[zu.batch(), 1]),
    }
}

fn formulation_case(s: &mut Suite, rng: &mut ChaCha8Rng, formulation: Formulation) -> Result<()> {
    let (n, users) = (rng.random_range(2..=5), rng.random_range(2..=4));
    let cfg = LossConfig {
        formulation,
        lambda: if formulation.has_forgery_head() {
            rng.random_range(0.0..=1.0)
        } else {
            0.0
        },
    };
    let labels: Vec<(usize, bool)> = (0..n)
        .map(|_| {
            let forged = formulation.uses_forgeries() && rng.random::<bool>();
            (rng.random_range(0..users), forged)
        })
        .collect();
    let zu = uniform(rng, &[n, formulation.user_classes(users)], 3.0);
    let zf = formulation
        .has_forgery_head()
        .then(|| uniform(rng, &[n, 1], 3.0));
    let bl = cfg.batch_loss(&outputs(&zu, zf.as_ref()), &labels, users)?;
    let name = formulation.name();

    s.probe(
        &format!("loss.{name}.user_logits"),
        &zu,
        bl.grad_user_logits.as_ref().expect("user gradient"),
        |zp| {
            Ok(Some(
                cfg.batch_loss(&outputs(zp, zf.as_ref()), &labels, users)?
                    .loss,
            ))
        },
    )?;
    if let Some(zf) = &zf {
        s.probe(
            &format!("loss.{name}.forgery_logit"),
            zf,
            bl.grad_forgery_logit.as_ref().expect("forgery gradient"),
            |zp| {
                Ok(Some(
                    cfg.batch_loss(&outputs(&zu, Some(zp)), &labels, users)?
                        .loss,
                ))
            },
        )?;
    }
    Ok(())
}

fn tiny_network_arch() -> Architecture {
    Architecture {
        input: [1, 6, 6],
        layers: vec![
            LayerSpec::Conv {
                filters: 2,
                kernel: 3,
                stride: 1,
                pad: 1,
            },
            LayerSpec::BatchNorm,
            LayerSpec::Relu,
            LayerSpec::MaxPool { size: 2, stride: 2 },
            LayerSpec::FullyConnected { units: 4 },
            LayerSpec::BatchNorm,
            LayerSpec::Relu,
        ],
        user_classes: Some(3),
        forgery_head: true,
    }
}

/// Whole-network gradients under the multi-task loss, parameters and input.
fn network_case(s: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    let mut net = Network::<f64>::new(tiny_network_arch())?;
    for (p, kind) in net.params_mut() {
        let r = uniform(rng, p.shape(), 0.8);
        *p = match kind {
            crate::nn::ParamKind::Gamma => r.map(|v| v + 1.0),
            _ => r,
        };
    }
    let n = 4;
    let x = uniform(rng, &[n, 1, 6, 6], 1.0);
    let labels: Vec<(usize, bool)> = (0..n)
        .map(|_| (rng.random_range(0..3), rng.random::<bool>()))
        .collect();
    let cfg = LossConfig {
        formulation: Formulation::MultitaskL2,
        lambda: rng.random_range(0.1..0.9),
    };
    let (out, trace) = net.forward_traced(&x, Mode::Train)?;
    let pattern = trace.activation_pattern();
    let bl = cfg.batch_loss(&out, &labels, 3)?;
    let grads = net.backward(
        &trace,
        bl.grad_user_logits.as_ref(),
        bl.grad_forgery_logit.as_ref(),
    )?;

    let eval = |net: &Network<f64>, x: &Tensor<f64>| -> Result<Option<f64>> {
        let (out, trace) = net.forward_traced(x, Mode::Train)?;
        if trace.activation_pattern() != pattern {
            return Ok(None);
        }
        Ok(Some(cfg.batch_loss(&out, &labels, 3)?.loss))
    };

    s.probe("network.input", &x, &grads.input, |xp| eval(&net, xp))?;
    let originals: Vec<Tensor<f64>> = net.params().iter().map(|(t, _)| (*t).clone()).collect();
    for (idx, (p0, g)) in originals.iter().zip(&grads.params).enumerate() {
        let mut probe_net = net.clone();
        s.probe("network.params", p0, g, |pp| {
            *probe_net.params_mut()[idx].0 = pp.clone();
            eval(&probe_net, &x)
        })?;
    }
    Ok(())
}

/// Runs `instances` randomized instances of every check, deterministically
/// from `seed`, and returns one report per checked gradient.
pub fn gradient_suite(instances: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = Suite::default();
    for _ in 0..instances {
        conv_case(&mut s, &mut rng)?;
        pool_case(&mut s, &mut rng)?;
        linear_case(&mut s, &mut rng)?;
        relu_case(&mut s, &mut rng)?;
        batchnorm_case(&mut s, &mut rng, Mode::Train)?;
        batchnorm_case(&mut s, &mut rng, Mode::Inference)?;
        head_loss_cases(&mut s, &mut rng)?;
        for f in [
            Formulation::GenuineOnly,
            Formulation::ForgeryAsClass,
            Formulation::MultitaskL1,
            Formulation::MultitaskL2,
        ] {
            formulation_case(&mut s, &mut rng, f)?;
        }
        network_case(&mut s, &mut rng)?;
    }
    Ok(s.into_reports())
}
