//! Forward evaluation and reverse-mode gradients over a [`Stack`].

use std::collections::HashMap;

use super::conv::{self, ConvGeom, ConvGrads};
use super::layer::{Layer, LayerKind, Stack, KERNEL};
use super::loss::mse_with_grad;
use super::params::{ParamEntry, ParamSet};
use super::tensor::{lane_sum, Scalar, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Mode {
    Inference,
    Training,
}

/// What a layer keeps from the forward pass for its backward pass.
enum Cache<T> {
    Dense { input: Vec<T> },
    Conv { input: Vec<T> },
    BatchNorm { xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    LeakyRelu { input: Vec<T> },
    Sigmoid { output: Vec<T> },
    Reshape,
    Residual { caches: Vec<Record<T>> },
}

struct Record<T> {
    in_dims: Vec<usize>,
    cache: Cache<T>,
}

struct Ctx<'a, T> {
    params: &'a ParamSet<T>,
    mode: Mode,
    record: bool,
    /// Updated running statistics, in layer order, when requested.
    running: Option<Vec<(String, Tensor<T>)>>,
    /// Sign pattern of every leaky-relu input, when requested.
    pattern: Option<Vec<bool>>,
}

/// Result of a training-mode forward/backward pass.
#[derive(Clone, Debug)]
pub struct BackwardPass<T = f32> {
    pub loss: T,
    /// One entry per trainable parameter, same names/dims as the parameters.
    pub grads: ParamSet<T>,
    /// Batch-norm running statistics after this batch (momentum 0.9).
    pub running: Vec<(String, Tensor<T>)>,
}

fn batched<T: Scalar>(stack: &Stack, input: &Tensor<T>) -> Result<(Tensor<T>, bool)> {
    let declared = stack.input_dims();
    if input.dims() == declared {
        let mut dims = vec![1];
        dims.extend_from_slice(declared);
        return Ok((input.clone().reshape(&dims)?, true));
    }
    if input.dims().len() == declared.len() + 1 && &input.dims()[1..] == declared {
        return Ok((input.clone(), false));
    }
    Err(Error::shape(
        "input",
        format!(
            "stack expects {declared:?} or [batch, ..{declared:?}], got {:?}",
            input.dims()
        ),
    ))
}

fn unbatch<T: Scalar>(t: Tensor<T>, was_unbatched: bool) -> Result<Tensor<T>> {
    if was_unbatched {
        let dims = t.dims()[1..].to_vec();
        t.reshape(&dims)
    } else {
        Ok(t)
    }
}

/// Inference-mode evaluation: batch norm uses stored running statistics.
///
/// `input` is either a single sample with the stack's declared dims or a batch
/// with a leading batch axis; the output follows the same convention.
pub fn forward<T: Scalar>(stack: &Stack, params: &ParamSet<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    let (x, single) = batched(stack, input)?;
    let mut ctx = Ctx {
        params,
        mode: Mode::Inference,
        record: false,
        running: None,
        pattern: None,
    };
    let (y, _) = run_layers(stack.layers(), &mut ctx, x)?;
    unbatch(y, single)
}

/// Training-mode inputs of every top-level layer, for a batched `input`.
pub(crate) fn layer_inputs<T: Scalar>(stack: &Stack, params: &ParamSet<T>, input: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let (mut x, _) = batched(stack, input)?;
    let mut ctx = Ctx {
        params,
        mode: Mode::Training,
        record: false,
        running: None,
        pattern: None,
    };
    let mut inputs = Vec::with_capacity(stack.layers().len());
    for layer in stack.layers() {
        inputs.push(x.clone());
        x = run_layers(std::slice::from_ref(layer), &mut ctx, x)?.0;
    }
    Ok(inputs)
}

/// Training-mode MSE loss of the layers from `start` on, fed with that
/// layer's batched input, plus the leaky-relu sign pattern of those layers.
pub(crate) fn training_loss_from<T: Scalar>(
    stack: &Stack,
    params: &ParamSet<T>,
    start: usize,
    x: Tensor<T>,
    target: &Tensor<T>,
) -> Result<(T, Vec<bool>)> {
    let mut ctx = Ctx {
        params,
        mode: Mode::Training,
        record: false,
        running: None,
        pattern: Some(Vec::new()),
    };
    let (y, _) = run_layers(&stack.layers()[start..], &mut ctx, x)?;
    let (loss, _) = if y.dims()[1..] == *target.dims() {
        mse_with_grad(&unbatch(y, true)?, target)?
    } else {
        mse_with_grad(&y, target)?
    };
    Ok((loss, ctx.pattern.unwrap_or_default()))
}

/// Training-mode loss and gradients of the MSE between the stack output and
/// `target`. Frozen parameters and running statistics get no gradient entry.
pub fn backward<T: Scalar>(
    stack: &Stack,
    params: &ParamSet<T>,
    input: &Tensor<T>,
    target: &Tensor<T>,
) -> Result<(T, ParamSet<T>)> {
    let pass = backward_pass(stack, params, input, target)?;
    Ok((pass.loss, pass.grads))
}

/// [`backward`] that also reports the updated batch-norm running statistics.
pub fn backward_pass<T: Scalar>(
    stack: &Stack,
    params: &ParamSet<T>,
    input: &Tensor<T>,
    target: &Tensor<T>,
) -> Result<BackwardPass<T>> {
    let (x, single) = batched(stack, input)?;
    let mut ctx = Ctx {
        params,
        mode: Mode::Training,
        record: true,
        running: Some(Vec::new()),
        pattern: None,
    };
    let (y, records) = run_layers(stack.layers(), &mut ctx, x)?;
    let out_dims = y.dims().to_vec();
    let y = unbatch(y, single)?;
    let (loss, dy) = mse_with_grad(&y, target)?;

    let mut grad_map: HashMap<String, Tensor<T>> = HashMap::new();
    let dy = dy.reshape(&out_dims)?;
    backward_layers(stack.layers(), &records, params, dy, false, &mut grad_map)?;

    let mut grads = ParamSet::new();
    for (name, entry) in params.iter() {
        if !entry.trainable() {
            continue;
        }
        let tensor = match grad_map.remove(name) {
            Some(g) => g,
            None => Tensor::zeros(entry.tensor.dims()),
        };
        grads.insert(
            name,
            ParamEntry {
                tensor,
                layer: entry.layer.clone(),
                partition: entry.partition,
                kind: entry.kind,
                frozen: false,
            },
        )?;
    }
    Ok(BackwardPass {
        loss,
        grads,
        running: ctx.running.unwrap_or_default(),
    })
}

thread_local! {
    static NAME: std::cell::RefCell<String> = const { std::cell::RefCell::new(String::new()) };
}

fn param<'p, T: Scalar>(
    params: &'p ParamSet<T>,
    layer: &Layer,
    suffix: &str,
    dims: &[usize],
) -> Result<&'p ParamEntry<T>> {
    let entry = NAME.with_borrow_mut(|name| {
        name.clear();
        name.push_str(&layer.name);
        name.push('.');
        name.push_str(suffix);
        params.get(name).ok_or_else(|| Error::MissingParam(name.clone()))
    })?;
    if entry.tensor.dims() != dims {
        return Err(Error::shape(
            &layer.name,
            format!("`{suffix}` has dims {:?}, expected {dims:?}", entry.tensor.dims()),
        ));
    }
    Ok(entry)
}

fn has_trainable<T: Scalar>(layer: &Layer, params: &ParamSet<T>) -> bool {
    layer
        .param_specs()
        .iter()
        .any(|s| params.get(&s.name).is_some_and(|e| e.trainable()))
}

fn run_layers<T: Scalar>(
    layers: &[Layer],
    ctx: &mut Ctx<'_, T>,
    mut x: Tensor<T>,
) -> Result<(Tensor<T>, Vec<Record<T>>)> {
    let mut records = Vec::new();
    for layer in layers {
        let sample_dims = &x.dims()[1..];
        layer.output_dims(sample_dims)?;
        let in_dims = x.dims().to_vec();
        let (y, cache) = run_layer(layer, ctx, x)?;
        if !y.is_finite() {
            return Err(Error::shape(&layer.name, "non-finite output"));
        }
        if ctx.record {
            records.push(Record {
                in_dims,
                cache: cache.expect("recording layer returns a cache"),
            });
        }
        x = y;
    }
    Ok((x, records))
}

fn run_layer<T: Scalar>(
    layer: &Layer,
    ctx: &mut Ctx<'_, T>,
    x: Tensor<T>,
) -> Result<(Tensor<T>, Option<Cache<T>>)> {
    let batch = x.batch();
    let record = ctx.record;
    match &layer.kind {
        LayerKind::Dense {
            in_features,
            out_features,
        } => {
            let (i, o) = (*in_features, *out_features);
            let w = param(ctx.params, layer, "weight", &[o, i])?;
            let b = param(ctx.params, layer, "bias", &[o])?;
            let mut y = vec![T::zero(); batch * o];
            T::gemm(batch, i, o, x.data(), false, w.tensor.data(), true, &mut y, false);
            for row in y.chunks_exact_mut(o) {
                for (v, &bias) in row.iter_mut().zip(b.tensor.data()) {
                    *v = *v + bias;
                }
            }
            let cache = record.then(|| Cache::Dense {
                input: x.into_data(),
            });
            Ok((Tensor::new(vec![batch, o], y)?, cache))
        }
        LayerKind::Conv2d {
            in_channels,
            out_channels,
        } => {
            let (ci, co) = (*in_channels, *out_channels);
            let (h, w) = (x.dims()[2], x.dims()[3]);
            let wt = param(ctx.params, layer, "weight", &[co, ci, KERNEL, KERNEL])?;
            let b = param(ctx.params, layer, "bias", &[co])?;
            let geom = ConvGeom {
                in_channels: ci,
                out_channels: co,
                h,
                w,
            };
            let y = conv::forward(&geom, x.data(), wt.tensor.data(), b.tensor.data());
            let cache = record.then(|| Cache::Conv { input: x.into_data() });
            Ok((Tensor::new(vec![batch, co, h, w], y)?, cache))
        }
        LayerKind::BatchNorm { channels } => {
            let c = *channels;
            let gamma = param(ctx.params, layer, "gamma", &[c])?;
            let beta = param(ctx.params, layer, "beta", &[c])?;
            let rmean = param(ctx.params, layer, "running_mean", &[c])?;
            let rvar = param(ctx.params, layer, "running_var", &[c])?;
            let spatial = x.sample_len() / c;
            let n = batch * spatial;
            let batch_stats = ctx.mode == Mode::Training && !gamma.frozen;

            let (mean, var) = if batch_stats {
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for (i, p) in x.data().chunks_exact(spatial).enumerate() {
                    mean[i % c] += lane_sum(p, p, |v, _| v);
                }
                for m in &mut mean {
                    *m /= n as f64;
                }
                for (i, p) in x.data().chunks_exact(spatial).enumerate() {
                    let mu = mean[i % c];
                    var[i % c] += lane_sum(p, p, |v, _| (v - mu) * (v - mu));
                }
                for v in &mut var {
                    *v /= n as f64;
                }
                if let Some(running) = ctx.running.as_mut() {
                    let m = BN_MOMENTUM;
                    let unbias = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
                    let new_mean = Tensor::from_fn(&[c], |ch| {
                        T::lit(m * rmean.tensor.data()[ch].to_f64().unwrap_or(0.0) + (1.0 - m) * mean[ch])
                    });
                    let new_var = Tensor::from_fn(&[c], |ch| {
                        T::lit(
                            m * rvar.tensor.data()[ch].to_f64().unwrap_or(0.0)
                                + (1.0 - m) * var[ch] * unbias,
                        )
                    });
                    running.push((format!("{}.running_mean", layer.name), new_mean));
                    running.push((format!("{}.running_var", layer.name), new_var));
                }
                (
                    mean.into_iter().map(T::lit).collect::<Vec<T>>(),
                    var.into_iter().map(T::lit).collect::<Vec<T>>(),
                )
            } else {
                (rmean.tensor.data().to_vec(), rvar.tensor.data().to_vec())
            };
            let eps = T::lit(BN_EPS);
            let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            let mut xhat = if record { vec![T::zero(); x.numel()] } else { Vec::new() };
            let mut y = vec![T::zero(); x.numel()];
            for (i, (src, dst)) in x.data().chunks_exact(spatial).zip(y.chunks_exact_mut(spatial)).enumerate() {
                let ch = i % c;
                let (g, bt, mu, is) = (gamma.tensor.data()[ch], beta.tensor.data()[ch], mean[ch], inv_std[ch]);
                if record {
                    let xh = &mut xhat[i * spatial..(i + 1) * spatial];
                    for ((d, h), &v) in dst.iter_mut().zip(xh.iter_mut()).zip(src) {
                        *h = (v - mu) * is;
                        *d = g * *h + bt;
                    }
                } else {
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d = g * ((v - mu) * is) + bt;
                    }
                }
            }
            let cache = record.then_some(Cache::BatchNorm {
                xhat,
                inv_std,
                batch_stats,
            });
            Ok((Tensor::new(x.dims().to_vec(), y)?, cache))
        }
        LayerKind::LeakyRelu { slope } => {
            let slope = T::lit(*slope as f64);
            if let Some(pattern) = ctx.pattern.as_mut() {
                pattern.extend(x.data().iter().map(|&v| v > T::zero()));
            }
            let y: Vec<T> = x
                .data()
                .iter()
                .map(|&v| if v > T::zero() { v } else { v * slope })
                .collect();
            let dims = x.dims().to_vec();
            let cache = record.then(|| Cache::LeakyRelu {
                input: x.into_data(),
            });
            Ok((Tensor::new(dims, y)?, cache))
        }
        LayerKind::Sigmoid => {
            let y: Vec<T> = x
                .data()
                .iter()
                .map(|&v| T::one() / (T::one() + (-v).exp()))
                .collect();
            let cache = record.then(|| Cache::Sigmoid { output: y.clone() });
            Ok((Tensor::new(x.dims().to_vec(), y)?, cache))
        }
        LayerKind::Reshape { dims } => {
            let mut full = vec![batch];
            full.extend_from_slice(dims);
            Ok((x.reshape(&full)?, record.then_some(Cache::Reshape)))
        }
        LayerKind::Residual { body } => {
            let (mut y, caches) = run_layers(body, ctx, x.clone())?;
            for (v, &skip) in y.data_mut().iter_mut().zip(x.data()) {
                *v = *v + skip;
            }
            Ok((y, record.then_some(Cache::Residual { caches })))
        }
    }
}

/// Backpropagates `dy` through `layers`. Returns the input gradient when
/// `need_input_grad` is set.
fn backward_layers<T: Scalar>(
    layers: &[Layer],
    records: &[Record<T>],
    params: &ParamSet<T>,
    mut dy: Tensor<T>,
    need_input_grad: bool,
    grads: &mut HashMap<String, Tensor<T>>,
) -> Result<Option<Tensor<T>>> {
    // needs_dx[i]: some layer before i is trainable, or the caller wants dx.
    let mut needs_dx = Vec::with_capacity(layers.len());
    let mut seen = need_input_grad;
    for layer in layers {
        needs_dx.push(seen);
        seen = seen || has_trainable(layer, params);
    }
    for (i, (layer, rec)) in layers.iter().zip(records).enumerate().rev() {
        let dx = backward_layer(layer, rec, params, dy, needs_dx[i], grads)?;
        match dx {
            Some(dx) => dy = dx,
            None => return Ok(None),
        }
    }
    Ok(Some(dy))
}

fn backward_layer<T: Scalar>(
    layer: &Layer,
    rec: &Record<T>,
    params: &ParamSet<T>,
    dy: Tensor<T>,
    need_dx: bool,
    grads: &mut HashMap<String, Tensor<T>>,
) -> Result<Option<Tensor<T>>> {
    let in_dims = &rec.in_dims;
    let batch = in_dims[0];
    let trainable = |suffix: &str| {
        params
            .get(&format!("{}.{suffix}", layer.name))
            .is_some_and(|e| e.trainable())
    };
    match (&layer.kind, &rec.cache) {
        (
            LayerKind::Dense {
                in_features,
                out_features,
            },
            Cache::Dense { input },
        ) => {
            let (i, o) = (*in_features, *out_features);
            let w = params.tensor(&format!("{}.weight", layer.name))?;
            if trainable("weight") {
                let mut dw = vec![T::zero(); o * i];
                T::gemm(o, batch, i, dy.data(), true, input, false, &mut dw, false);
                grads.insert(format!("{}.weight", layer.name), Tensor::new(vec![o, i], dw)?);
            }
            if trainable("bias") {
                let mut db = vec![T::zero(); o];
                for row in dy.data().chunks_exact(o) {
                    for (acc, &g) in db.iter_mut().zip(row) {
                        *acc = *acc + g;
                    }
                }
                grads.insert(format!("{}.bias", layer.name), Tensor::new(vec![o], db)?);
            }
            if !need_dx {
                return Ok(None);
            }
            let mut dx = vec![T::zero(); batch * i];
            T::gemm(batch, o, i, dy.data(), false, w.data(), false, &mut dx, false);
            Ok(Some(Tensor::new(in_dims.clone(), dx)?))
        }
        (
            LayerKind::Conv2d {
                in_channels,
                out_channels,
            },
            Cache::Conv { input },
        ) => {
            let (ci, co) = (*in_channels, *out_channels);
            let geom = ConvGeom {
                in_channels: ci,
                out_channels: co,
                h: in_dims[2],
                w: in_dims[3],
            };
            let wt = params.tensor(&format!("{}.weight", layer.name))?;
            let ConvGrads {
                weight: dw,
                bias: db,
                input: dx,
            } = conv::backward(
                &geom,
                input,
                wt.data(),
                dy.data(),
                (trainable("weight"), trainable("bias"), need_dx),
            );
            if let Some(dw) = dw {
                grads.insert(
                    format!("{}.weight", layer.name),
                    Tensor::new(vec![co, ci, KERNEL, KERNEL], dw)?,
                );
            }
            if let Some(db) = db {
                grads.insert(format!("{}.bias", layer.name), Tensor::new(vec![co], db)?);
            }
            match dx {
                Some(dx) => Ok(Some(Tensor::new(in_dims.clone(), dx)?)),
                None => Ok(None),
            }
        }
        (
            LayerKind::BatchNorm { channels },
            Cache::BatchNorm {
                xhat,
                inv_std,
                batch_stats,
            },
        ) => {
            let c = *channels;
            let spatial = dy.sample_len() / c;
            let n = batch * spatial;
            let gamma = params.tensor(&format!("{}.gamma", layer.name))?;
            let mut sum_dy = vec![0.0f64; c];
            let mut sum_dy_xhat = vec![0.0f64; c];
            for (i, (g, xh)) in dy.data().chunks_exact(spatial).zip(xhat.chunks_exact(spatial)).enumerate() {
                sum_dy[i % c] += lane_sum(g, g, |v, _| v);
                sum_dy_xhat[i % c] += lane_sum(g, xh, |a, b| a * b);
            }
            if trainable("gamma") {
                let t = Tensor::from_fn(&[c], |ch| T::lit(sum_dy_xhat[ch]));
                grads.insert(format!("{}.gamma", layer.name), t);
            }
            if trainable("beta") {
                let t = Tensor::from_fn(&[c], |ch| T::lit(sum_dy[ch]));
                grads.insert(format!("{}.beta", layer.name), t);
            }
            if !need_dx {
                return Ok(None);
            }
            let mut dx = vec![T::zero(); dy.numel()];
            let nf = T::lit(n as f64);
            let planes = dx
                .chunks_exact_mut(spatial)
                .zip(dy.data().chunks_exact(spatial))
                .zip(xhat.chunks_exact(spatial));
            for (i, ((dst, g), xh)) in planes.enumerate() {
                let ch = i % c;
                let scale = gamma.data()[ch] * inv_std[ch];
                if *batch_stats {
                    let sdy = T::lit(sum_dy[ch]);
                    let sdx = T::lit(sum_dy_xhat[ch]);
                    let k = scale / nf;
                    for ((d, &gv), &h) in dst.iter_mut().zip(g).zip(xh) {
                        *d = k * (nf * gv - sdy - h * sdx);
                    }
                } else {
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d = scale * gv;
                    }
                }
            }
            Ok(Some(Tensor::new(in_dims.clone(), dx)?))
        }
        (LayerKind::LeakyRelu { slope }, Cache::LeakyRelu { input }) => {
            if !need_dx {
                return Ok(None);
            }
            let slope = T::lit(*slope as f64);
            let dx = dy
                .data()
                .iter()
                .zip(input)
                .map(|(&g, &v)| if v > T::zero() { g } else { g * slope })
                .collect();
            Ok(Some(Tensor::new(in_dims.clone(), dx)?))
        }
        (LayerKind::Sigmoid, Cache::Sigmoid { output }) => {
            if !need_dx {
                return Ok(None);
            }
            let dx = dy
                .data()
                .iter()
                .zip(output)
                .map(|(&g, &y)| g * y * (T::one() - y))
                .collect();
            Ok(Some(Tensor::new(in_dims.clone(), dx)?))
        }
        (LayerKind::Reshape { .. }, Cache::Reshape) => {
            if !need_dx {
                return Ok(None);
            }
            Ok(Some(dy.reshape(in_dims)?))
        }
        (LayerKind::Residual { body }, Cache::Residual { caches }) => {
            let inner = backward_layers(body, caches, params, dy.clone(), need_dx, grads)?;
            if !need_dx {
                return Ok(None);
            }
            let mut dx = inner.expect("input gradient requested");
            for (v, &skip) in dx.data_mut().iter_mut().zip(dy.data()) {
                *v = *v + skip;
            }
            Ok(Some(dx))
        }
        _ => Err(Error::shape(&layer.name, "cache does not match layer kind")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::{init_params, Partition};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(dims, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn leaky_relu_slope() {
        let stack = Stack::new(&[2], vec![Layer::leaky_relu("act", 0.3)]).unwrap();
        let x = Tensor::new(vec![2], vec![-1.0f32, 2.0]).unwrap();
        let y = forward(&stack, &ParamSet::new(), &x).unwrap();
        assert!((y.data()[0] + 0.3).abs() < 1e-7);
        assert_eq!(y.data()[1], 2.0);
        assert_eq!(y.dims(), &[2]);
    }

    #[test]
    fn identity_dense() {
        let stack = Stack::new(&[2], vec![Layer::dense("fc", 2, 2)]).unwrap();
        let mut params = init_params(&stack, Partition::Encoder, 0);
        params.get_mut("fc.weight").unwrap().tensor =
            Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::new(vec![2], vec![3.0f32, 4.0]).unwrap();
        assert_eq!(forward(&stack, &params, &x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn delta_kernel_conv_is_identity() {
        let stack = Stack::new(&[1, 8, 8], vec![Layer::conv2d("conv", 1, 1)]).unwrap();
        let mut params = init_params(&stack, Partition::Encoder, 0);
        let mut k = vec![0.0f32; 9];
        k[4] = 1.0;
        params.get_mut("conv.weight").unwrap().tensor = Tensor::new(vec![1, 1, 3, 3], k).unwrap();
        let x = random(&[1, 8, 8], 3);
        assert_eq!(forward(&stack, &params, &x).unwrap(), x);
    }

    #[test]
    fn conv_matches_direct_loop() {
        let (ci, co, h, w) = (3, 2, 5, 4);
        let stack = Stack::new(&[ci, h, w], vec![Layer::conv2d("conv", ci, co)]).unwrap();
        let mut params = init_params(&stack, Partition::Encoder, 5);
        params.get_mut("conv.bias").unwrap().tensor = random(&[co], 9);
        let x = random(&[2, ci, h, w], 4);
        let y = forward(&stack, &params, &x).unwrap();
        let wt = params.tensor("conv.weight").unwrap().data();
        let bias = params.tensor("conv.bias").unwrap().data();
        for s in 0..2 {
            for o in 0..co {
                for yy in 0..h {
                    for xx in 0..w {
                        let mut acc = bias[o] as f64;
                        for c in 0..ci {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let sy = yy as isize + ky as isize - 1;
                                    let sx = xx as isize + kx as isize - 1;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((s * ci + c) * h + sy as usize) * w + sx as usize];
                                    acc += (wt[((o * ci + c) * 3 + ky) * 3 + kx] * xv) as f64;
                                }
                            }
                        }
                        let got = y.data()[((s * co + o) * h + yy) * w + xx] as f64;
                        assert!((got - acc).abs() < 1e-5, "{got} vs {acc}");
                    }
                }
            }
        }
    }

    #[test]
    fn missing_parameter_is_lookup_error() {
        let stack = Stack::new(&[2], vec![Layer::dense("fc", 2, 2)]).unwrap();
        let x = Tensor::new(vec![2], vec![1.0f32, 1.0]).unwrap();
        let err = forward(&stack, &ParamSet::new(), &x).unwrap_err();
        assert!(matches!(err, Error::MissingParam(ref n) if n == "fc.weight"));
    }

    #[test]
    fn input_mismatch_is_shape_error() {
        let stack = Stack::new(&[2], vec![Layer::sigmoid("s")]).unwrap();
        let x = Tensor::new(vec![3], vec![1.0f32, 1.0, 1.0]).unwrap();
        assert!(matches!(forward(&stack, &ParamSet::new(), &x), Err(Error::Shape { .. })));
    }

    #[test]
    fn dense_bias_gradient_closed_form() {
        let stack = Stack::new(&[3], vec![Layer::dense("fc", 3, 3)]).unwrap();
        let params = init_params(&stack, Partition::Encoder, 11);
        let x = random(&[3], 12);
        let t = random(&[3], 13);
        let y = forward(&stack, &params, &x).unwrap();
        let (_, grads) = backward(&stack, &params, &x, &t).unwrap();
        let db = grads.tensor("fc.bias").unwrap();
        for k in 0..3 {
            let expect = 2.0 * (y.data()[k] - t.data()[k]) / 3.0;
            assert!((db.data()[k] - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn residual_scaling_scales_bias_gradient() {
        let stack = Stack::new(&[4], vec![Layer::dense("fc", 4, 4)]).unwrap();
        let params = init_params(&stack, Partition::Encoder, 2);
        let x = random(&[4], 3);
        let y = forward(&stack, &params, &x).unwrap();
        let t1 = random(&[4], 4);
        let c = 2.5f32;
        // target shifted so the residual y - t is scaled by c
        let t2 = Tensor::from_fn(&[4], |i| y.data()[i] - c * (y.data()[i] - t1.data()[i]));
        let g1 = backward(&stack, &params, &x, &t1).unwrap().1;
        let g2 = backward(&stack, &params, &x, &t2).unwrap().1;
        for (a, b) in g1.tensor("fc.bias").unwrap().data().iter().zip(g2.tensor("fc.bias").unwrap().data()) {
            assert!((c * a - b).abs() < 1e-5 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn zero_loss_gives_zero_gradients() {
        let stack = Stack::new(
            &[2, 4, 4],
            vec![
                Layer::conv2d("c", 2, 2),
                Layer::batchnorm("bn", 2),
                Layer::leaky_relu("a", 0.3),
                Layer::sigmoid("s"),
            ],
        )
        .unwrap();
        let params = init_params(&stack, Partition::Encoder, 1);
        let x = random(&[3, 2, 4, 4], 2);
        let (y, _) = {
            let pass = backward_pass(&stack, &params, &x, &Tensor::zeros(&[3, 2, 4, 4])).unwrap();
            (pass.loss, pass.grads)
        };
        assert!(y > 0.0);
        // Training-mode output as target.
        let mut ctx = Ctx {
            params: &params,
            mode: Mode::Training,
            record: false,
            running: None,
            pattern: None,
        };
        let (target, _) = run_layers(stack.layers(), &mut ctx, x.clone()).unwrap();
        let (loss, grads) = backward(&stack, &params, &x, &target).unwrap();
        assert_eq!(loss, 0.0);
        for (_, g) in grads.iter() {
            assert!(g.tensor.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn batchnorm_training_output_is_standardized() {
        let stack = Stack::new(&[3, 4, 4], vec![Layer::batchnorm("bn", 3)]).unwrap();
        let params = init_params(&stack, Partition::Encoder, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_fn(&[8, 3, 4, 4], |_| rng.random_range(-3.0f32..7.0));
        let mut ctx = Ctx {
            params: &params,
            mode: Mode::Training,
            record: false,
            running: Some(Vec::new()),
            pattern: None,
        };
        let (y, _) = run_layers(stack.layers(), &mut ctx, x).unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..8)
                .flat_map(|s| y.sample(s)[ch * 16..(ch + 1) * 16].to_vec())
                .map(|v| v as f64)
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "var {var}");
        }
        assert_eq!(ctx.running.map_or(0, |r| r.len()), 2);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let stack = Stack::new(&[3], vec![Layer::dense("a", 3, 3), Layer::dense("b", 3, 2)]).unwrap();
        let mut params = init_params(&stack, Partition::Encoder, 0);
        params.get_mut("a.weight").unwrap().frozen = true;
        params.get_mut("a.bias").unwrap().frozen = true;
        let (_, grads) = backward(&stack, &params, &random(&[3], 1), &random(&[2], 2)).unwrap();
        assert!(!grads.contains("a.weight") && !grads.contains("a.bias"));
        assert!(grads.contains("b.weight") && grads.contains("b.bias"));
    }

    #[test]
    fn repeated_calls_are_bit_identical() {
        let stack = Stack::new(
            &[2, 4, 4],
            vec![Layer::conv2d("c", 2, 3), Layer::batchnorm("bn", 3), Layer::leaky_relu("a", 0.3)],
        )
        .unwrap();
        let params = init_params(&stack, Partition::Encoder, 4);
        let x = random(&[4, 2, 4, 4], 1);
        let t = random(&[4, 3, 4, 4], 2);
        let a = backward(&stack, &params, &x, &t).unwrap();
        let b = backward(&stack, &params, &x, &t).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert!(a.1.bit_equal(&b.1));
        assert_eq!(forward(&stack, &params, &x).unwrap(), forward(&stack, &params, &x).unwrap());
    }
}
