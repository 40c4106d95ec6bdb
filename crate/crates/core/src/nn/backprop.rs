//! Forward pass, softmax cross-entropy and reverse-mode gradients.

use std::collections::BTreeMap;

use super::ops::{self, ConvGeom};
use super::{LayerSpec, ModelState};
use crate::data::ImageRecord;
use crate::error::{Error, Result};
use crate::tensor::{lit, Scalar, Tensor};

/// Subtracted from every pixel before the first layer, so a mid-gray image
/// enters the network as zero.
pub const INPUT_CENTER: f64 = 0.5;

/// How per-sample losses are combined before differentiation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    /// Mean over the batch (the default everywhere).
    Mean,
    /// Sum over the batch: each row's gradient is that sample's own gradient,
    /// independent of what else is in the batch.
    Sum,
}

/// Gradients of one parameterised layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

/// Parameter gradients aligned with `ModelState::layers`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<S: Scalar = f32> {
    pub layers: Vec<LayerGrad<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn zeros_like(model: &ModelState<S>) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: Tensor::zeros(l.weight.shape()),
                    bias: Tensor::zeros(l.bias.shape()),
                })
                .collect(),
        }
    }

    /// Gradients keyed by parameter id, e.g. `conv0.weight`.
    pub fn named<'a>(&'a self, model: &ModelState<S>) -> BTreeMap<String, &'a Tensor<S>> {
        let mut out = BTreeMap::new();
        for (id, g) in model.layer_ids().into_iter().zip(&self.layers) {
            out.insert(format!("{id}.weight"), &g.weight);
            out.insert(format!("{id}.bias"), &g.bias);
        }
        out
    }

    pub fn l2_norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|g| g.weight.data().iter().chain(g.bias.data()))
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|g| g.weight.is_finite() && g.bias.is_finite())
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &Gradients<S>, factor: S) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, &y) in a.weight.data_mut().iter_mut().zip(b.weight.data()) {
                *x += factor * y;
            }
            for (x, &y) in a.bias.data_mut().iter_mut().zip(b.bias.data()) {
                *x += factor * y;
            }
        }
    }

    pub fn negate(&mut self) {
        for g in &mut self.layers {
            g.weight.data_mut().iter_mut().for_each(|v| *v = -*v);
            g.bias.data_mut().iter_mut().for_each(|v| *v = -*v);
        }
    }
}

/// Everything one backward pass produces.
#[derive(Clone, Debug)]
pub struct BackpropOutput<S: Scalar> {
    /// Loss reduced according to the requested [`Reduction`], divided by the
    /// batch size for `Sum` as well so it is always the mean loss.
    pub mean_loss: f64,
    pub per_sample_loss: Vec<f64>,
    /// Number of rows whose argmax matches the label.
    pub correct: usize,
    pub params: Option<Gradients<S>>,
    pub input: Option<Tensor<S>>,
}

struct Trace<S: Scalar> {
    /// Input of each layer (flattened rows for dense layers).
    inputs: Vec<Vec<S>>,
    /// Pre-activation output of each layer.
    pre: Vec<Vec<S>>,
    /// Max-pool argmax indices for conv layers that pool.
    pool_idx: Vec<Option<Vec<u32>>>,
    /// (channels, h, w) of each conv layer's input.
    conv_in: Vec<(usize, usize, usize)>,
    logits: Vec<S>,
}

fn check_batch<S: Scalar>(model: &ModelState<S>, batch: &Tensor<S>) -> Result<usize> {
    let s = batch.shape();
    if s.len() != 4 || s[1..] != model.input_shape {
        return Err(Error::contract(format!(
            "batch shape {s:?} does not match model input (B, {}, {}, {})",
            model.input_shape[0], model.input_shape[1], model.input_shape[2]
        )));
    }
    if !batch.is_finite() {
        return Err(Error::contract("batch contains non-finite values"));
    }
    Ok(s[0])
}

fn check_labels<S: Scalar>(model: &ModelState<S>, batch_len: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != batch_len {
        return Err(Error::contract(format!(
            "{} labels for a batch of {batch_len}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= model.num_classes) {
        return Err(Error::contract(format!(
            "label {bad} out of range for {} classes",
            model.num_classes
        )));
    }
    Ok(())
}

fn run_forward<S: Scalar>(model: &ModelState<S>, batch: &Tensor<S>, keep: bool) -> Trace<S> {
    let b = batch.rows();
    let [mut c, mut h, mut w] = model.input_shape;
    let n_layers = model.layers.len();
    let mut x: Vec<S> = batch.data().iter().map(|&v| v - lit::<S>(INPUT_CENTER)).collect();
    let mut trace = Trace {
        inputs: Vec::new(),
        pre: Vec::new(),
        pool_idx: Vec::new(),
        conv_in: Vec::new(),
        logits: Vec::new(),
    };
    for (li, layer) in model.layers.iter().enumerate() {
        let last = li + 1 == n_layers;
        match &layer.spec {
            LayerSpec::Conv(spec) => {
                let g = ConvGeom {
                    batch: b,
                    in_c: c,
                    in_h: h,
                    in_w: w,
                    out_c: spec.out_filters,
                    k_h: spec.kernel_h,
                    k_w: spec.kernel_w,
                };
                let mut z = vec![S::zero(); b * g.out_c * g.out_plane()];
                ops::conv2d_forward(&g, &x, layer.weight.data(), layer.bias.data(), &mut z);
                let mut a = z.clone();
                ops::relu_inplace(&mut a);
                let (oh, ow) = (g.out_h(), g.out_w());
                let (next, idx) = if spec.pool {
                    let (p, idx) = ops::maxpool2_forward(&a, b * g.out_c, oh, ow);
                    h = oh / 2;
                    w = ow / 2;
                    (p, Some(idx))
                } else {
                    h = oh;
                    w = ow;
                    (a, None)
                };
                if keep {
                    trace.conv_in.push((c, g.in_h, g.in_w));
                    trace.inputs.push(std::mem::take(&mut x));
                    trace.pre.push(z);
                    trace.pool_idx.push(idx);
                }
                c = spec.out_filters;
                x = next;
            }
            LayerSpec::Dense(spec) => {
                let z = ops::dense_forward(
                    &x,
                    b,
                    spec.in_features,
                    layer.weight.data(),
                    layer.bias.data(),
                    spec.out_features,
                );
                let mut a = z.clone();
                if !last {
                    ops::relu_inplace(&mut a);
                }
                if keep {
                    trace.conv_in.push((0, 0, 0));
                    trace.inputs.push(std::mem::take(&mut x));
                    trace.pre.push(z);
                    trace.pool_idx.push(None);
                }
                x = a;
            }
        }
    }
    trace.logits = x;
    trace
}

/// Logits of shape `(B, num_classes)`.
pub fn forward<S: Scalar>(model: &ModelState<S>, batch: &Tensor<S>) -> Result<Tensor<S>> {
    let b = check_batch(model, batch)?;
    let t = run_forward(model, batch, false);
    Tensor::new(vec![b, model.num_classes], t.logits)
}

/// Stable `(log-sum-exp - z_y)` for one row, plus its softmax.
fn row_ce<S: Scalar>(row: &[S], y: usize) -> (f64, Vec<f64>) {
    let m = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
    let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = z.ln() + m - row[y].as_f64();
    (loss.max(0.0), exps.into_iter().map(|e| e / z).collect())
}

fn check_logits<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<usize> {
    if logits.shape().len() != 2 || logits.rows() != labels.len() {
        return Err(Error::contract(format!(
            "logits shape {:?} vs {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let k = logits.shape()[1];
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::contract(format!("label {bad} out of range for {k} classes")));
    }
    Ok(k)
}

/// Per-row `-log softmax(logits)[y]`.
pub fn per_sample_cross_entropy<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<Vec<f64>> {
    check_logits(logits, labels)?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &y)| row_ce(logits.row(i), y).0)
        .collect())
}

/// Mean cross-entropy over the batch.
pub fn cross_entropy<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<f64> {
    let l = per_sample_cross_entropy(logits, labels)?;
    if l.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    Ok(l.iter().sum::<f64>() / l.len() as f64)
}

fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Argmax class per row; ties go to the lowest class index.
pub fn predict<S: Scalar>(model: &ModelState<S>, batch: &Tensor<S>) -> Result<Vec<usize>> {
    let logits = forward(model, batch)?;
    Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
}

/// Full forward + backward pass.
pub fn loss_and_grads<S: Scalar>(
    model: &ModelState<S>,
    batch: &Tensor<S>,
    labels: &[usize],
    reduction: Reduction,
    want_params: bool,
    want_input: bool,
) -> Result<BackpropOutput<S>> {
    let b = check_batch(model, batch)?;
    check_labels(model, b, labels)?;
    let trace = run_forward(model, batch, true);
    let k = model.num_classes;
    let scale = match reduction {
        Reduction::Mean => 1.0 / b as f64,
        Reduction::Sum => 1.0,
    };

    let mut per_sample = Vec::with_capacity(b);
    let mut correct = 0;
    let mut grad: Vec<S> = vec![S::zero(); b * k];
    for (i, &y) in labels.iter().enumerate() {
        let row = &trace.logits[i * k..(i + 1) * k];
        let (loss, probs) = row_ce(row, y);
        per_sample.push(loss);
        if argmax(row) == y {
            correct += 1;
        }
        for (j, p) in probs.into_iter().enumerate() {
            let t = if j == y { 1.0 } else { 0.0 };
            grad[i * k + j] = lit((p - t) * scale);
        }
    }
    let mean_loss = per_sample.iter().sum::<f64>() / b as f64;

    let mut params = want_params.then(|| Gradients::zeros_like(model));
    let mut input_grad = None;
    let n_layers = model.layers.len();
    for li in (0..n_layers).rev() {
        let layer = &model.layers[li];
        let need_in = li > 0 || want_input;
        if !need_in && params.is_none() {
            break;
        }
        let x = &trace.inputs[li];
        let pre = &trace.pre[li];
        let mut scratch_w;
        let mut scratch_b;
        let (gw, gb): (&mut [S], &mut [S]) = match params.as_mut() {
            Some(p) => {
                let lg = &mut p.layers[li];
                (lg.weight.data_mut(), lg.bias.data_mut())
            }
            None => {
                scratch_w = vec![S::zero(); layer.weight.len()];
                scratch_b = vec![S::zero(); layer.bias.len()];
                (&mut scratch_w, &mut scratch_b)
            }
        };
        let mut gin = need_in.then(|| vec![S::zero(); x.len()]);
        match &layer.spec {
            LayerSpec::Dense(spec) => {
                if li + 1 != n_layers {
                    ops::relu_backward_inplace(pre, &mut grad);
                }
                ops::dense_backward(
                    x,
                    b,
                    spec.in_features,
                    layer.weight.data(),
                    spec.out_features,
                    &grad,
                    gw,
                    gb,
                    gin.as_deref_mut(),
                );
            }
            LayerSpec::Conv(spec) => {
                if let Some(idx) = &trace.pool_idx[li] {
                    grad = ops::maxpool2_backward(&grad, idx, pre.len());
                }
                ops::relu_backward_inplace(pre, &mut grad);
                let (c, h, w) = trace.conv_in[li];
                let g = ConvGeom {
                    batch: b,
                    in_c: c,
                    in_h: h,
                    in_w: w,
                    out_c: spec.out_filters,
                    k_h: spec.kernel_h,
                    k_w: spec.kernel_w,
                };
                ops::conv2d_backward(&g, x, layer.weight.data(), &grad, gw, gb, gin.as_deref_mut());
            }
        }
        match gin {
            Some(gi) if li > 0 => grad = gi,
            Some(gi) => input_grad = Some(Tensor::new(batch.shape().to_vec(), gi)?),
            None => {}
        }
    }

    Ok(BackpropOutput {
        mean_loss,
        per_sample_loss: per_sample,
        correct,
        params,
        input: input_grad,
    })
}

/// Gradient of the batch-mean cross-entropy with respect to every parameter.
pub fn grad_wrt_params<S: Scalar>(
    model: &ModelState<S>,
    batch: &Tensor<S>,
    labels: &[usize],
) -> Result<Gradients<S>> {
    let out = loss_and_grads(model, batch, labels, Reduction::Mean, true, false)?;
    Ok(out.params.expect("requested"))
}

/// Gradient of the batch-mean cross-entropy with respect to the input pixels.
pub fn grad_wrt_input<S: Scalar>(
    model: &ModelState<S>,
    batch: &Tensor<S>,
    labels: &[usize],
) -> Result<Tensor<S>> {
    let out = loss_and_grads(model, batch, labels, Reduction::Mean, false, true)?;
    Ok(out.input.expect("requested"))
}

/// Fraction of records whose argmax prediction equals the label.
pub fn accuracy(model: &ModelState, records: &[ImageRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::contract("accuracy of an empty record set"));
    }
    let mut correct = 0;
    for chunk in records.chunks(256) {
        let batch = Tensor::stack(chunk.iter().map(|r| &r.image))?;
        let pred = predict(model, &batch)?;
        correct += pred.iter().zip(chunk).filter(|(p, r)| **p == r.label).count();
    }
    Ok(correct as f64 / records.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::build_model;

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = Tensor::new(vec![2, 8], vec![0.3f32; 16]).unwrap();
        let ce = cross_entropy(&logits, &[0, 7]).unwrap();
        assert!((ce - 8f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn large_confident_logits_stay_finite() {
        let mut v = vec![0.0f32; 4];
        v[2] = 1e4;
        let logits = Tensor::new(vec![1, 4], v).unwrap();
        assert_eq!(cross_entropy(&logits, &[2]).unwrap(), 0.0);
        let wrong = cross_entropy(&logits, &[0]).unwrap();
        assert!(wrong.is_finite() && (wrong - 1e4).abs() < 1e-6);
    }

    #[test]
    fn label_out_of_range_is_contract_error() {
        let logits = Tensor::new(vec![1, 3], vec![0.0f32; 3]).unwrap();
        assert!(matches!(cross_entropy(&logits, &[3]), Err(Error::Contract(_))));
        let m = build_model(3, [1, 8, 8], 0).unwrap();
        let x = Tensor::zeros(&[1, 1, 8, 8]);
        assert!(matches!(grad_wrt_params(&m, &x, &[5]), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let m = build_model(3, [1, 8, 8], 0).unwrap();
        let x = Tensor::<f32>::zeros(&[1, 3, 8, 8]);
        assert!(matches!(forward(&m, &x), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_batch_gives_finite_logits() {
        let m = build_model(8, [3, 32, 32], 0).unwrap();
        let logits = forward(&m, &Tensor::zeros(&[2, 3, 32, 32])).unwrap();
        assert_eq!(logits.shape(), &[2, 8]);
        assert!(logits.is_finite());
    }

    #[test]
    fn argmax_ties_break_low() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0f32; 4]), 0);
    }

    #[test]
    fn named_gradients_cover_all_parameters() {
        let m = build_model(3, [1, 8, 8], 0).unwrap();
        let x = Tensor::filled(&[2, 1, 8, 8], 0.5f32);
        let g = grad_wrt_params(&m, &x, &[0, 1]).unwrap();
        let named = g.named(&m);
        assert_eq!(named.len(), 2 * m.layers.len());
        assert_eq!(named["conv0.weight"].shape(), m.layers[0].weight.shape());
        assert_eq!(named["dense1.bias"].shape(), &[3]);
    }
}
