//! First-order parameter updates.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Gradients, ParamId, ParamStore};
use crate::error::Error;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(Error::InvalidArgument(format!("unknown optimizer {other:?} (expected sgd or adam)"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
        })
    }
}

/// Plain SGD or Adam (beta1 0.9, beta2 0.999, eps 1e-8).
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    t: u32,
    moments: HashMap<ParamId, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            weight_decay: 0.0,
            t: 0,
            moments: HashMap::new(),
        }
    }

    /// Decoupled weight decay: every update also shrinks the parameter by
    /// `lr * weight_decay`.
    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Applies one update to every parameter that has a gradient.
    /// Parameters in `frozen` are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, frozen: &dyn Fn(ParamId) -> bool) {
        self.t += 1;
        let lr = T::lit(self.lr);
        let shrink = T::lit(1.0 - self.lr * self.weight_decay);
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        let bc1 = T::lit(1.0 - b1.powi(self.t as i32));
        let bc2 = T::lit(1.0 - b2.powi(self.t as i32));
        let mut ids: Vec<ParamId> = grads.iter().map(|(id, _)| id).collect();
        ids.sort_by_key(|id| id.0);
        for id in ids {
            if frozen(id) {
                continue;
            }
            let g = grads.param(id).expect("listed gradient");
            let w = store.get_mut(id);
            if self.weight_decay != 0.0 {
                for p in w.data_mut() {
                    *p *= shrink;
                }
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    for (p, d) in w.data_mut().iter_mut().zip(g.data()) {
                        *p -= lr * *d;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = self
                        .moments
                        .entry(id)
                        .or_insert_with(|| (vec![T::zero(); g.len()], vec![T::zero(); g.len()]));
                    for (((p, d), m), v) in w.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = T::lit(b1) * *m + T::lit(1.0 - b1) * *d;
                        *v = T::lit(b2) * *v + T::lit(1.0 - b2) * *d * *d;
                        let mh = *m / bc1;
                        let vh = *v / bc2;
                        *p -= lr * mh / (vh.sqrt() + T::lit(eps));
                    }
                }
            }
        }
    }
}
