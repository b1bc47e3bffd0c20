//! Feature-learning objectives: user cross-entropy, forgery binary
//! cross-entropy, and their λ-weighted combinations.
//!
//! Every per-sample loss returns its gradient with respect to the head
//! *logits* (softmax/sigmoid folded in), so the network backward pass starts
//! directly from those.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::NetworkOutput;
use crate::tensor::{Scalar, Tensor};

/// Lower bound on probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formulation {
    GenuineOnly,
    ForgeryAsClass,
    #[serde(rename = "multitask_L1")]
    MultitaskL1,
    #[serde(rename = "multitask_L2")]
    MultitaskL2,
}

impl Formulation {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "genuine_only" => Some(Self::GenuineOnly),
            "forgery_as_class" => Some(Self::ForgeryAsClass),
            "multitask_L1" | "L1" => Some(Self::MultitaskL1),
            "multitask_L2" | "L2" => Some(Self::MultitaskL2),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::GenuineOnly => "genuine_only",
            Self::ForgeryAsClass => "forgery_as_class",
            Self::MultitaskL1 => "multitask_L1",
            Self::MultitaskL2 => "multitask_L2",
        }
    }

    pub fn uses_forgeries(self) -> bool {
        self != Self::GenuineOnly
    }

    pub fn has_forgery_head(self) -> bool {
        matches!(self, Self::MultitaskL1 | Self::MultitaskL2)
    }

    /// Width of the softmax head for `num_users` development users.
    pub fn user_classes(self, num_users: usize) -> usize {
        match self {
            Self::ForgeryAsClass => 2 * num_users,
            _ => num_users,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub formulation: Formulation,
    pub lambda: f64,
}

impl LossConfig {
    /// Whether forgeries carry nonzero loss weight. Under L1 with
    /// `lambda = 0` they do not, and dropping them from the batches makes
    /// that run identical to genuine-only training.
    pub fn trains_on_forgeries(&self) -> bool {
        match self.formulation {
            Formulation::GenuineOnly => false,
            Formulation::MultitaskL1 => self.lambda != 0.0,
            _ => true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "loss.lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// `-ln p[y]` and its gradient w.r.t. the softmax logits, `p - onehot(y)`.
pub fn user_loss<T: Scalar>(p_user: &[T], y: usize) -> Result<(f64, Vec<T>)> {
    if y >= p_user.len() {
        return Err(Error::Shape(format!(
            "label {y} outside {} classes",
            p_user.len()
        )));
    }
    let loss = -p_user[y].as_f64().max(PROB_FLOOR).ln();
    let mut grad = p_user.to_vec();
    grad[y] -= T::one();
    Ok((loss, grad))
}

/// Binary cross-entropy of `P(f|X)` and its gradient w.r.t. the sigmoid
/// logit, `p - f`.
pub fn forgery_loss<T: Scalar>(p_forgery: T, forged: bool) -> (f64, T) {
    let p = p_forgery.as_f64();
    let loss = if forged {
        -p.max(PROB_FLOOR).ln()
    } else {
        -(1.0 - p).max(PROB_FLOOR).ln()
    };
    let target = if forged { T::one() } else { T::zero() };
    (loss, p_forgery - target)
}

/// Loss and logit gradients of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleLoss<T> {
    pub loss: f64,
    pub grad_user: Vec<T>,
    pub grad_forgery: T,
}

fn weighted<T: Scalar>(
    user_weight: f64,
    p_user: &[T],
    p_forgery: T,
    y: usize,
    forged: bool,
    lambda: f64,
) -> Result<SampleLoss<T>> {
    let (lc, gc) = user_loss(p_user, y)?;
    let (lf, gf) = forgery_loss(p_forgery, forged);
    Ok(SampleLoss {
        loss: user_weight * lc + lambda * lf,
        grad_user: gc
            .into_iter()
            .map(|g| T::from_f64(g.as_f64() * user_weight))
            .collect(),
        grad_forgery: T::from_f64(gf.as_f64() * lambda),
    })
}

/// `(1 - λ) L_c + λ L_f`: user classification on every sample.
pub fn loss_l1<T: Scalar>(
    p_user: &[T],
    p_forgery: T,
    y: usize,
    forged: bool,
    lambda: f64,
) -> Result<SampleLoss<T>> {
    weighted(1.0 - lambda, p_user, p_forgery, y, forged, lambda)
}

/// `(1 - f)(1 - λ) L_c + λ L_f`: user classification on genuine samples only.
pub fn loss_l2<T: Scalar>(
    p_user: &[T],
    p_forgery: T,
    y: usize,
    forged: bool,
    lambda: f64,
) -> Result<SampleLoss<T>> {
    let genuine = if forged { 0.0 } else { 1.0 };
    weighted(
        genuine * (1.0 - lambda),
        p_user,
        p_forgery,
        y,
        forged,
        lambda,
    )
}

/// Class index when each user's forgeries form a class of their own:
/// genuine samples keep `y`, forgeries of user `y` become `num_users + y`.
pub fn remap_labels_forgery_as_class(y: usize, forged: bool, num_users: usize) -> usize {
    if forged {
        num_users + y
    } else {
        y
    }
}

/// Mean-reduced batch loss with logit gradients ready for backpropagation.
#[derive(Clone, Debug)]
pub struct BatchLoss<T> {
    pub loss: f64,
    pub user_loss: f64,
    pub forgery_loss: f64,
    pub grad_user_logits: Option<Tensor<T>>,
    pub grad_forgery_logit: Option<Tensor<T>>,
}

impl LossConfig {
    /// `labels[i] = (user, forged)` for sample `i`; `num_users` is the number
    /// of development users (before any class doubling).
    pub fn batch_loss<T: Scalar>(
        &self,
        out: &NetworkOutput<T>,
        labels: &[(usize, bool)],
        num_users: usize,
    ) -> Result<BatchLoss<T>> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        let inv_n = 1.0 / n as f64;
        let p_user = out.p_user.as_ref();
        let p_forgery = out.p_forgery.as_ref();
        let needs_forgery = self.formulation.has_forgery_head() && self.lambda > 0.0;
        if p_forgery.is_none() && needs_forgery {
            return Err(Error::Config(
                "multi-task loss with λ > 0 needs a forgery head".into(),
            ));
        }
        if p_user.is_none() && !(self.formulation.has_forgery_head() && self.lambda == 1.0) {
            return Err(Error::Config("loss needs a user head".into()));
        }

        let classes = p_user.map(|p| p.shape()[1]).unwrap_or(0);
        let mut grad_user = p_user.map(|p| Tensor::zeros(p.shape()));
        let mut grad_forgery = p_forgery.map(|p| Tensor::zeros(p.shape()));
        let (mut total, mut total_c, mut total_f) = (0f64, 0f64, 0f64);

        for (i, &(y, forged)) in labels.iter().enumerate() {
            let (class, user_weight, forgery_weight) = match self.formulation {
                Formulation::GenuineOnly if forged => {
                    return Err(Error::Config(
                        "genuine-only training received a forgery".into(),
                    ))
                }
                Formulation::GenuineOnly => (y, 1.0, 0.0),
                Formulation::ForgeryAsClass => (
                    remap_labels_forgery_as_class(y, forged, num_users),
                    1.0,
                    0.0,
                ),
                Formulation::MultitaskL1 => (y, 1.0 - self.lambda, self.lambda),
                Formulation::MultitaskL2 => {
                    let genuine = if forged { 0.0 } else { 1.0 };
                    (y, genuine * (1.0 - self.lambda), self.lambda)
                }
            };
            let mut loss = 0.0;
            if let (Some(p), Some(dst)) = (p_user, grad_user.as_mut()) {
                let (lc, g) = user_loss(p.sample(i), class)?;
                total_c += lc;
                loss += user_weight * lc;
                for (d, v) in dst.data_mut()[i * classes..(i + 1) * classes]
                    .iter_mut()
                    .zip(g)
                {
                    *d = T::from_f64(v.as_f64() * user_weight * inv_n);
                }
            }
            if let (Some(p), Some(dst)) = (p_forgery, grad_forgery.as_mut()) {
                let (lf, g) = forgery_loss(p.data()[i], forged);
                total_f += lf;
                if self.formulation.has_forgery_head() {
                    loss += forgery_weight * lf;
                }
                dst.data_mut()[i] = T::from_f64(g.as_f64() * forgery_weight * inv_n);
            }
            total += loss;
        }
        Ok(BatchLoss {
            loss: total * inv_n,
            user_loss: total_c * inv_n,
            forgery_loss: total_f * inv_n,
            grad_user_logits: grad_user,
            grad_forgery_logit: grad_forgery,
        })
    }
}
