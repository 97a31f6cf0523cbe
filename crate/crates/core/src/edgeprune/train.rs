//! Adapter training on the toy task: logistic loss on the readout score,
//! full-batch gradient descent on the factor matrices of active sites only.
//! The backbone stays frozen.
//!
//! Gradients are analytic. The backward pass runs off the forward trace, so
//! it differentiates exactly the forward computation used for evaluation.

use std::collections::BTreeMap;

use crate::adapter::{Projection, ProviderAdapterSet, SiteId};
use crate::backbone::{Backbone, ForwardTrace, ToyTask};
use crate::linalg::{matvec, matvec_transposed, vec_add, Matrix, Vector};

use super::EdgePruneError;

/// Forward pass of one example under `set`'s active adapters.
pub fn forward_with_set(
    backbone: &Backbone,
    set: &ProviderAdapterSet,
    input: &Vector,
) -> Result<(Vector, ForwardTrace), EdgePruneError> {
    let d = backbone.hidden_dim();
    let result = backbone.forward(input, |site, x| match set.get(&site) {
        Some(entry) if entry.active => Ok(entry
            .adapter
            .delta(x)
            .expect("adapter dimensions checked at insertion")),
        _ => Ok(Vector::zeros(d)),
    })?;
    Ok(result)
}

/// Mean logistic loss of `set` over the task.
pub fn mean_loss(
    backbone: &Backbone,
    set: &ProviderAdapterSet,
    task: &ToyTask,
) -> Result<f64, EdgePruneError> {
    let mut total = 0.0;
    for (x, &label) in task.inputs.iter().zip(&task.labels) {
        let (out, _) = forward_with_set(backbone, set, x)?;
        let score = task.score(&out);
        let target = if label { 1.0 } else { -1.0 };
        total += logistic_loss(target * score);
    }
    let loss = total / task.len() as f64;
    if !loss.is_finite() {
        return Err(EdgePruneError::Diverged);
    }
    Ok(loss)
}

/// Accuracy of `set` on the task.
pub fn evaluate_metric(
    backbone: &Backbone,
    set: &ProviderAdapterSet,
    task: &ToyTask,
) -> Result<f64, EdgePruneError> {
    let mut predictions = Vec::with_capacity(task.len());
    for x in &task.inputs {
        let (out, _) = forward_with_set(backbone, set, x)?;
        predictions.push(task.predict(&out));
    }
    let metric = crate::backbone::toy_metric(&predictions, &task.labels)
        .expect("prediction count matches label count");
    if !metric.is_finite() {
        return Err(EdgePruneError::Diverged);
    }
    Ok(metric)
}

/// ln(1 + exp(-z)), computed without overflow for large |z|.
fn logistic_loss(z: f64) -> f64 {
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

/// d/dz ln(1 + exp(-z)) = -sigmoid(-z)
fn logistic_loss_grad(z: f64) -> f64 {
    -1.0 / (1.0 + z.exp())
}

/// Mean gradients of the logistic loss with respect to the factor matrices of
/// every active site. Keys are the active sites of `set`.
pub fn adapter_gradients(
    backbone: &Backbone,
    set: &ProviderAdapterSet,
    task: &ToyTask,
) -> Result<BTreeMap<SiteId, (Matrix, Matrix)>, EdgePruneError> {
    let d = backbone.hidden_dim();
    let mut grads: BTreeMap<SiteId, (Matrix, Matrix)> = set
        .entries()
        .filter(|(_, e)| e.active)
        .map(|(s, e)| {
            (
                *s,
                (
                    Matrix::zeros(d, e.adapter.rank()),
                    Matrix::zeros(e.adapter.rank(), d),
                ),
            )
        })
        .collect();
    if grads.is_empty() {
        return Ok(grads);
    }

    let inv_n = 1.0 / task.len() as f64;
    for (x, &label) in task.inputs.iter().zip(&task.labels) {
        let (out, trace) = forward_with_set(backbone, set, x)?;
        let target = if label { 1.0 } else { -1.0 };
        let dscore = logistic_loss_grad(target * task.score(&out)) * target * inv_n;
        // dL/dh_out = dscore · readout
        let g_out = crate::linalg::vec_scale(task.readout(), dscore)?;
        accumulate_example(backbone, set, &trace, g_out, &mut grads)?;
    }
    Ok(grads)
}

/// Backward pass for one example, accumulating into `grads`.
///
/// Layer forward was `h' = tanh(z) + h` with `z = Σ_s (W_s·h + δ_s)`; the
/// layer inputs are read from the trace and `z` is reconstructed from them.
#[allow(clippy::needless_range_loop)]
fn accumulate_example(
    backbone: &Backbone,
    set: &ProviderAdapterSet,
    trace: &ForwardTrace,
    g_out: Vector,
    grads: &mut BTreeMap<SiteId, (Matrix, Matrix)>,
) -> Result<(), EdgePruneError> {
    let d = backbone.hidden_dim();
    let layers = backbone.layers() as usize;
    let per_layer = Projection::ALL.len();

    // layer inputs: trace stores the same h for each site of a layer
    let mut layer_inputs: Vec<&Vector> = Vec::with_capacity(layers);
    for l in 0..layers {
        layer_inputs.push(&trace.entries[l * per_layer].activation);
    }

    // reconstruct z per layer
    let mut pre_acts: Vec<Vector> = Vec::with_capacity(layers);
    for l in 0..layers {
        let h = layer_inputs[l];
        let mut z = vec![0.0; d];
        for (k, proj) in Projection::ALL.iter().enumerate() {
            let entry = &trace.entries[l * per_layer + k];
            debug_assert_eq!(entry.site, SiteId::new(l as u32, *proj));
            let w = backbone.site_weight(&entry.site).expect("site exists");
            let projected = matvec(w, h)?;
            for ((zi, p), dv) in z
                .iter_mut()
                .zip(projected.as_slice())
                .zip(entry.delta.as_slice())
            {
                *zi += p + dv;
            }
        }
        pre_acts.push(Vector::new(z)?);
    }

    // walk layers backwards from dL/dh_out
    let mut g = g_out;
    for l in (0..layers).rev() {
        let h = layer_inputs[l];
        let z = &pre_acts[l];
        // dL/dz = g ⊙ (1 - tanh²(z))
        let gz = Vector::new(
            g.as_slice()
                .iter()
                .zip(z.as_slice())
                .map(|(gi, zi)| {
                    let t = zi.tanh();
                    gi * (1.0 - t * t)
                })
                .collect(),
        )?;
        // residual path
        let mut g_in = g.clone();
        for proj in Projection::ALL {
            let site = SiteId::new(l as u32, proj);
            let w = backbone.site_weight(&site).expect("site exists");
            g_in = vec_add(&g_in, &matvec_transposed(w, &gz)?)?;
            if let Some(entry) = set.get(&site) {
                if entry.active {
                    let adapter = &entry.adapter;
                    let scale = adapter.scale();
                    let u = matvec(adapter.b(), h)?; // r-dim
                    let at_gz = matvec_transposed(adapter.a(), &gz)?; // r-dim
                    let (ga, gb) = grads.get_mut(&site).expect("active site registered");
                    // dL/dA += scale · gz · uᵀ
                    for i in 0..d {
                        let gi = scale * gz.as_slice()[i];
                        for r in 0..adapter.rank() {
                            ga.data_mut()[i * adapter.rank() + r] += gi * u.as_slice()[r];
                        }
                    }
                    // dL/dB += scale · (Aᵀ·gz) · hᵀ
                    for r in 0..adapter.rank() {
                        let gr = scale * at_gz.as_slice()[r];
                        for j in 0..d {
                            gb.data_mut()[r * d + j] += gr * h.as_slice()[j];
                        }
                    }
                    // adapter path into g_in: scale · Bᵀ·(Aᵀ·gz)
                    let back = matvec_transposed(adapter.b(), &at_gz)?;
                    g_in = vec_add(&g_in, &crate::linalg::vec_scale(&back, scale)?)?;
                }
            }
        }
        g = g_in;
    }
    Ok(())
}

/// One full-batch gradient step applied in place to the active adapters.
fn apply_step(
    set: &mut ProviderAdapterSet,
    grads: &BTreeMap<SiteId, (Matrix, Matrix)>,
    lr: f64,
) -> Result<(), EdgePruneError> {
    for (site, (ga, gb)) in grads {
        let entry = set.get_mut(site).expect("gradient site present");
        for (w, g) in entry
            .adapter
            .a_mut()
            .data_mut()
            .iter_mut()
            .zip(ga.as_slice())
        {
            *w -= lr * g;
        }
        for (w, g) in entry
            .adapter
            .b_mut()
            .data_mut()
            .iter_mut()
            .zip(gb.as_slice())
        {
            *w -= lr * g;
        }
        entry
            .adapter
            .a()
            .validate_finite()
            .map_err(|_| EdgePruneError::Diverged)?;
        entry
            .adapter
            .b()
            .validate_finite()
            .map_err(|_| EdgePruneError::Diverged)?;
    }
    Ok(())
}

/// Gradient descent on the active adapters of `set` for `steps` steps.
pub fn train_adapters(
    backbone: &Backbone,
    task: &ToyTask,
    set: &ProviderAdapterSet,
    steps: usize,
    lr: f64,
) -> Result<ProviderAdapterSet, EdgePruneError> {
    let mut out = set.clone();
    if steps == 0 || lr == 0.0 {
        return Ok(out);
    }
    for _ in 0..steps {
        let loss = mean_loss(backbone, &out, task)?;
        if !loss.is_finite() {
            return Err(EdgePruneError::Diverged);
        }
        let grads = adapter_gradients(backbone, &out, task)?;
        apply_step(&mut out, &grads, lr)?;
    }
    Ok(out)
}
