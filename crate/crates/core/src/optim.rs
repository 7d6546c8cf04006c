//! First-order optimizers with a fixed step size.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::params::{round_to_f32, ParamSet};
use crate::tape::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(format!("unknown optimizer {other:?} (expected sgd or adam)")),
        }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Optimizer state for one [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    momentum: f64,
    first: Vec<Mat>,
    second: Vec<Mat>,
    steps: u32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, momentum: f64, params: &ParamSet) -> Self {
        let zeros: Vec<Mat> = params.ids().map(|id| Mat::zeros(params.get(id).dim())).collect();
        Self {
            kind,
            lr,
            momentum,
            second: if kind == OptimizerKind::Adam { zeros.clone() } else { Vec::new() },
            first: zeros,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    /// Applies one update. Parameters without a gradient are left alone;
    /// results are rounded to the `f32` grid.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Mat>]) {
        self.steps += 1;
        let t = self.steps as i32;
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id.index()).and_then(|g| g.as_ref()) else {
                continue;
            };
            let i = id.index();
            let value = params.get_mut(id);
            match self.kind {
                OptimizerKind::Sgd => {
                    let m = &mut self.first[i];
                    m.zip_mut_with(g, |m, &g| *m = self.momentum * *m + g);
                    value.zip_mut_with(m, |w, &m| *w -= self.lr * m);
                }
                OptimizerKind::Adam => {
                    let c1 = 1.0 - BETA1.powi(t);
                    let c2 = 1.0 - BETA2.powi(t);
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    m.zip_mut_with(g, |m, &g| *m = BETA1 * *m + (1.0 - BETA1) * g);
                    v.zip_mut_with(g, |v, &g| *v = BETA2 * *v + (1.0 - BETA2) * g * g);
                    ndarray::Zip::from(&mut *value).and(&*m).and(&*v).for_each(|w, &m, &v| {
                        *w -= self.lr * (m / c1) / ((v / c2).sqrt() + EPS);
                    });
                }
            }
            round_to_f32(value);
        }
    }
}
