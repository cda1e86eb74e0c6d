use std::collections::HashMap;

use ndarray::{ArrayD, Zip};

use super::TrainHyperparams;
use crate::error::{Error, Result};
use crate::params::{Gradients, ModelParams};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates for one parameter set.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: u64,
    moments: HashMap<(String, String), (ArrayD<f64>, ArrayD<f64>)>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One AdamW update. Every tensor of a trainable group decays by
/// `1 - lr * weight_decay`; a missing gradient counts as zero. Buffers and
/// frozen groups are untouched.
pub fn optimizer_step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut AdamState,
    hyper: &TrainHyperparams,
) -> Result<()> {
    for (group, name, g) in grads.iter() {
        let Some(pg) = params.group(group) else {
            return Err(Error::UnknownGroup {
                name: group.to_string(),
                valid: params.group_names(),
            });
        };
        if !pg.trainable {
            return Err(Error::FrozenGradient(group.to_string()));
        }
        let Some(t) = pg.tensors.get(name) else {
            return Err(Error::MissingTensor(format!("{group}.{name}")));
        };
        if t.shape() != g.shape() {
            return Err(Error::GroupShape {
                group: group.to_string(),
                tensor: name.to_string(),
                expected: t.shape().to_vec(),
                found: g.shape().to_vec(),
            });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {group}.{name}")));
        }
    }

    state.step += 1;
    let lr = hyper.learning_rate;
    let decay = 1.0 - lr * hyper.weight_decay;
    let bc1 = 1.0 - BETA1.powi(state.step as i32);
    let bc2 = 1.0 - BETA2.powi(state.step as i32);
    for (gname, group) in params.groups_mut() {
        if !group.trainable {
            continue;
        }
        for (tname, tensor) in group.tensors.iter_mut() {
            let key = (gname.clone(), tname.clone());
            let g = grads.get(gname, tname);
            let (m, v) = state
                .moments
                .entry(key)
                .or_insert_with(|| (ArrayD::zeros(tensor.raw_dim()), ArrayD::zeros(tensor.raw_dim())));
            let update = |w: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                *w *= decay;
                *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + EPSILON);
            };
            match g {
                Some(g) => Zip::from(tensor)
                    .and(m)
                    .and(v)
                    .and(g)
                    .for_each(|w, m, v, &g| update(w, m, v, g)),
                None => Zip::from(tensor).and(m).and(v).for_each(|w, m, v| update(w, m, v, 0.0)),
            }
        }
    }
    Ok(())
}
