use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{self, Activation, BatchNormCache, Shape};
use super::{NnError, Tensor};

/// One entry of a layer chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    /// 3x3 kernels, unit stride, no padding.
    Conv3x3 { filters: usize },
    /// 2x2 window, stride 2.
    MaxPool2x2,
    Dense { units: usize },
    Activation { function: Activation },
    BatchNorm,
    Dropout { rate: f64 },
    Flatten,
    LinearOutput { units: usize },
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv3x3 { .. } => "conv3x3",
            LayerSpec::MaxPool2x2 => "maxpool2x2",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Activation { .. } => "activation",
            LayerSpec::BatchNorm => "batchnorm",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Flatten => "flatten",
            LayerSpec::LinearOutput { .. } => "linear_output",
        }
    }

    /// Output shape for `input`, or why the layer cannot take it.
    pub fn output_shape(&self, input: Shape) -> Result<Shape, String> {
        match *self {
            LayerSpec::Conv3x3 { filters } => {
                if filters == 0 {
                    Err("conv needs at least one filter".into())
                } else if input.h < 3 || input.w < 3 {
                    Err(format!("3x3 valid convolution needs at least 3x3 input, got {input}"))
                } else {
                    Ok(Shape::new(filters, input.h - 2, input.w - 2))
                }
            }
            LayerSpec::MaxPool2x2 => {
                if input.h < 2 || input.w < 2 {
                    Err(format!("2x2 pooling needs at least 2x2 input, got {input}"))
                } else {
                    Ok(Shape::new(input.c, input.h / 2, input.w / 2))
                }
            }
            LayerSpec::Dense { units } | LayerSpec::LinearOutput { units } => {
                if units == 0 {
                    Err("dense layer needs at least one unit".into())
                } else if input.h != 1 || input.w != 1 {
                    Err(format!("dense layer needs flat input, got {input}"))
                } else {
                    Ok(Shape::flat(units))
                }
            }
            LayerSpec::Dropout { rate } => {
                if (0.0..1.0).contains(&rate) {
                    Ok(input)
                } else {
                    Err(format!("dropout rate {rate} outside [0, 1)"))
                }
            }
            LayerSpec::Activation { .. } | LayerSpec::BatchNorm => Ok(input),
            LayerSpec::Flatten => Ok(Shape::flat(input.len())),
        }
    }
}

/// A trainable tensor with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    /// Subject to L1/L2 penalties.
    pub regularized: bool,
}

impl Param {
    fn new(value: Vec<f64>, regularized: bool) -> Self {
        let grad = vec![0.0; value.len()];
        Self {
            value,
            grad,
            regularized,
        }
    }
}

#[derive(Debug, Clone)]
enum Cache {
    Input(Vec<f64>),
    Pool(Vec<u32>),
    BatchNorm(BatchNormCache),
    Dropout(Vec<f64>),
    Nothing,
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub spec: LayerSpec,
    pub input: Shape,
    pub output: Shape,
    pub(crate) params: Vec<Param>,
    /// Batch-norm running mean and variance.
    pub(crate) running: Vec<Vec<f64>>,
    cache: Option<(usize, Cache)>,
}

/// L1 and L2 penalty coefficients applied to regularized weights.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Regularization {
    pub l1: f64,
    pub l2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

/// Layer chain with parameters, batch-norm statistics and a dropout stream.
#[derive(Debug, Clone)]
pub struct Model {
    input: Shape,
    layers: Vec<Layer>,
    rng: ChaCha8Rng,
    bn_momentum: f64,
}

pub const DEFAULT_BN_MOMENTUM: f64 = 0.99;

impl Model {
    /// Build the chain with weights uniform in `±sqrt(1 / fan_in)` and zero
    /// biases.
    pub fn new(input: Shape, specs: &[LayerSpec], seed: u64) -> Result<Self, NnError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = input;
        let mut layers = Vec::with_capacity(specs.len());
        for (index, spec) in specs.iter().enumerate() {
            let output = spec.output_shape(shape).map_err(|reason| NnError::Infeasible {
                layer: index,
                kind: spec.name(),
                reason,
            })?;
            let mut uniform = |n: usize, fan_in: usize| -> Vec<f64> {
                let s = (1.0 / fan_in as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-s..=s)).collect()
            };
            let (params, running) = match *spec {
                LayerSpec::Conv3x3 { filters } => {
                    let fan_in = shape.c * 9;
                    (
                        vec![
                            Param::new(uniform(filters * fan_in, fan_in), false),
                            Param::new(vec![0.0; filters], false),
                        ],
                        vec![],
                    )
                }
                LayerSpec::Dense { units } | LayerSpec::LinearOutput { units } => {
                    let fan_in = shape.len();
                    (
                        vec![
                            Param::new(uniform(units * fan_in, fan_in), true),
                            Param::new(vec![0.0; units], false),
                        ],
                        vec![],
                    )
                }
                LayerSpec::BatchNorm => (
                    vec![
                        Param::new(vec![1.0; shape.c], false),
                        Param::new(vec![0.0; shape.c], false),
                    ],
                    vec![vec![0.0; shape.c], vec![1.0; shape.c]],
                ),
                _ => (vec![], vec![]),
            };
            layers.push(Layer {
                spec: *spec,
                input: shape,
                output,
                params,
                running,
                cache: None,
            });
            shape = output;
        }
        Ok(Self {
            input,
            layers,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0xD50F_0A11),
            bn_momentum: DEFAULT_BN_MOMENTUM,
        })
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn output_len(&self) -> usize {
        self.layers.last().map_or(self.input.len(), |l| l.output.len())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn n_params(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| &l.params)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.layers.iter().flat_map(|l| l.params.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut())
    }

    pub fn bn_momentum(&self) -> f64 {
        self.bn_momentum
    }

    pub fn set_bn_momentum(&mut self, momentum: f64) {
        self.bn_momentum = momentum;
    }

    pub fn reseed_dropout(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Parameter values and running statistics, in layer order.
    pub fn state(&self) -> Vec<Vec<f64>> {
        self.layers
            .iter()
            .flat_map(|l| l.params.iter().map(|p| p.value.clone()).chain(l.running.iter().cloned()))
            .collect()
    }

    pub fn set_state(&mut self, state: &[Vec<f64>]) -> Result<(), NnError> {
        let mut it = state.iter();
        for l in &mut self.layers {
            let slots = l
                .params
                .iter_mut()
                .map(|p| &mut p.value)
                .chain(l.running.iter_mut());
            for slot in slots {
                let v = it.next().ok_or(NnError::StateMismatch)?;
                if v.len() != slot.len() {
                    return Err(NnError::StateMismatch);
                }
                slot.copy_from_slice(v);
            }
        }
        if it.next().is_some() {
            return Err(NnError::StateMismatch);
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<usize, NnError> {
        let batch = x.batch();
        if x.shape().len() < 2 || x.sample_len() != self.input.len() || batch == 0 {
            return Err(NnError::ShapeMismatch {
                layer: 0,
                kind: self.layers.first().map_or("input", |l| l.spec.name()),
                expected: self.input.to_string(),
                got: format!("{:?}", x.shape()),
            });
        }
        Ok(batch)
    }

    /// Forward pass. Training mode samples dropout masks, uses batch
    /// statistics and records what [`Model::backward`] needs.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor, NnError> {
        match mode {
            Mode::Inference => self.predict(x),
            Mode::Train => self.forward_train(x),
        }
    }

    /// Inference-mode forward pass: dropout is the identity and batch norm
    /// uses running statistics. A pure function of the model and input.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let batch = self.check_input(x)?;
        let mut cur = x.data().to_vec();
        for layer in &self.layers {
            cur = layer_forward_infer(layer, &cur, batch);
        }
        Ok(Tensor::new(vec![batch, self.output_len()], cur))
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor, NnError> {
        let batch = self.check_input(x)?;
        let momentum = self.bn_momentum;
        let mut cur = x.data().to_vec();
        for layer in &mut self.layers {
            let (out, cache) = layer_forward_train(layer, cur, batch, &mut self.rng, momentum);
            layer.cache = Some((batch, cache));
            cur = out;
        }
        Ok(Tensor::new(vec![batch, self.output_len()], cur))
    }

    /// Back-propagate `grad_out` (gradient of the data loss with respect to
    /// the outputs of the last training-mode forward pass). Parameter
    /// gradients are accumulated, penalty gradients of `reg` included, and
    /// the gradient with respect to the input is returned.
    pub fn backward(&mut self, grad_out: &Tensor, reg: Regularization) -> Result<Tensor, NnError> {
        let (batch, g) = self.backward_impl(grad_out, reg, true)?;
        Ok(Tensor::new(
            vec![batch, self.input.c, self.input.h, self.input.w],
            g,
        ))
    }

    /// [`Model::backward`] without the input gradient, which saves the
    /// most expensive product of the first layer during training.
    pub fn backward_params(&mut self, grad_out: &Tensor, reg: Regularization) -> Result<(), NnError> {
        self.backward_impl(grad_out, reg, false).map(|_| ())
    }

    fn backward_impl(&mut self, grad_out: &Tensor, reg: Regularization, input_grad: bool) -> Result<(usize, Vec<f64>), NnError> {
        let batch = match self.layers.last().and_then(|l| l.cache.as_ref()) {
            Some((b, _)) => *b,
            None => return Err(NnError::NoForwardPass),
        };
        if grad_out.len() != batch * self.output_len() {
            return Err(NnError::ShapeMismatch {
                layer: self.layers.len().saturating_sub(1),
                kind: "loss gradient",
                expected: format!("[{batch}, {}]", self.output_len()),
                got: format!("{:?}", grad_out.shape()),
            });
        }
        let mut g = grad_out.data().to_vec();
        for (k, layer) in self.layers.iter_mut().enumerate().rev() {
            let (_, cache) = layer.cache.take().ok_or(NnError::NoForwardPass)?;
            g = layer_backward(layer, cache, g, batch, input_grad || k > 0);
        }
        if reg.l1 != 0.0 || reg.l2 != 0.0 {
            for p in self.params_mut().filter(|p| p.regularized) {
                for (gr, &w) in p.grad.iter_mut().zip(&p.value) {
                    let sign = if w > 0.0 {
                        1.0
                    } else if w < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    *gr += reg.l1 * sign + 2.0 * reg.l2 * w;
                }
            }
        }
        Ok((batch, g))
    }

    /// `l1 * sum|w| + l2 * sum w^2` over regularized weights.
    pub fn penalty(&self, reg: Regularization) -> f64 {
        self.params()
            .filter(|p| p.regularized)
            .flat_map(|p| &p.value)
            .map(|w| reg.l1 * w.abs() + reg.l2 * w * w)
            .sum()
    }
}

fn layer_forward_infer(layer: &Layer, x: &[f64], batch: usize) -> Vec<f64> {
    let (i, o) = (layer.input, layer.output);
    let mut out = vec![0.0; batch * o.len()];
    match layer.spec {
        LayerSpec::Conv3x3 { filters } => {
            layers::conv_forward(x, batch, i, filters, &layer.params[0].value, &layer.params[1].value, &mut out)
        }
        LayerSpec::MaxPool2x2 => {
            layers::pool_forward(x, batch, i, &mut out);
        }
        LayerSpec::Dense { units } | LayerSpec::LinearOutput { units } => layers::dense_forward(
            x,
            batch,
            i.len(),
            units,
            &layer.params[0].value,
            &layer.params[1].value,
            &mut out,
        ),
        LayerSpec::Activation { function } => {
            for (y, &v) in out.iter_mut().zip(x) {
                *y = function.apply(v);
            }
        }
        LayerSpec::BatchNorm => layers::batchnorm_infer(
            x,
            batch,
            i,
            &layer.params[0].value,
            &layer.params[1].value,
            &layer.running[0],
            &layer.running[1],
            &mut out,
        ),
        LayerSpec::Dropout { .. } | LayerSpec::Flatten => out.copy_from_slice(x),
    }
    out
}

fn layer_forward_train(
    layer: &mut Layer,
    x: Vec<f64>,
    batch: usize,
    rng: &mut ChaCha8Rng,
    momentum: f64,
) -> (Vec<f64>, Cache) {
    let i = layer.input;
    match layer.spec {
        LayerSpec::Conv3x3 { .. } | LayerSpec::Dense { .. } | LayerSpec::LinearOutput { .. } => {
            let out = layer_forward_infer(layer, &x, batch);
            (out, Cache::Input(x))
        }
        LayerSpec::Activation { function } => {
            let out = x.iter().map(|&v| function.apply(v)).collect();
            (out, Cache::Input(x))
        }
        LayerSpec::MaxPool2x2 => {
            let mut out = vec![0.0; batch * layer.output.len()];
            let arg = layers::pool_forward(&x, batch, i, &mut out);
            (out, Cache::Pool(arg))
        }
        LayerSpec::BatchNorm => {
            let mut out = vec![0.0; x.len()];
            let (params, running) = (&layer.params, &mut layer.running);
            let (rm, rv) = running.split_at_mut(1);
            let cache = layers::batchnorm_train(
                &x,
                batch,
                i,
                &params[0].value,
                &params[1].value,
                &mut rm[0],
                &mut rv[0],
                momentum,
                &mut out,
            );
            (out, Cache::BatchNorm(cache))
        }
        LayerSpec::Dropout { rate } => {
            if rate == 0.0 {
                return (x, Cache::Nothing);
            }
            let mask = layers::dropout_mask(x.len(), rate, rng);
            let out = x.iter().zip(&mask).map(|(v, m)| v * m).collect();
            (out, Cache::Dropout(mask))
        }
        LayerSpec::Flatten => (x, Cache::Nothing),
    }
}

/// With `need_input == false` a conv or dense layer skips its input
/// gradient and returns an empty vector.
fn layer_backward(layer: &mut Layer, cache: Cache, g: Vec<f64>, batch: usize, need_input: bool) -> Vec<f64> {
    let i = layer.input;
    match (layer.spec, cache) {
        (LayerSpec::Conv3x3 { filters }, Cache::Input(x)) => {
            let mut gin = if need_input { vec![0.0; x.len()] } else { Vec::new() };
            let (w, b) = layer.params.split_at_mut(1);
            let gin_ref = need_input.then_some(gin.as_mut_slice());
            layers::conv_backward(&x, batch, i, filters, &w[0].value, &g, &mut w[0].grad, &mut b[0].grad, gin_ref);
            gin
        }
        (LayerSpec::Dense { units } | LayerSpec::LinearOutput { units }, Cache::Input(x)) => {
            let mut gin = if need_input { vec![0.0; x.len()] } else { Vec::new() };
            let (w, b) = layer.params.split_at_mut(1);
            let gin_ref = need_input.then_some(gin.as_mut_slice());
            layers::dense_backward(&x, batch, i.len(), units, &w[0].value, &g, &mut w[0].grad, &mut b[0].grad, gin_ref);
            gin
        }
        (LayerSpec::Activation { function }, Cache::Input(x)) => x
            .iter()
            .zip(&g)
            .map(|(&v, &gv)| gv * function.derivative(v))
            .collect(),
        (LayerSpec::MaxPool2x2, Cache::Pool(arg)) => {
            let mut gin = vec![0.0; batch * i.len()];
            layers::pool_backward(&g, batch, i, &arg, &mut gin);
            gin
        }
        (LayerSpec::BatchNorm, Cache::BatchNorm(c)) => {
            let mut gin = vec![0.0; g.len()];
            let (gamma, beta) = layer.params.split_at_mut(1);
            layers::batchnorm_backward(&c, batch, i, &gamma[0].value, &g, &mut gamma[0].grad, &mut beta[0].grad, &mut gin);
            gin
        }
        (LayerSpec::Dropout { .. }, Cache::Dropout(mask)) => {
            g.iter().zip(&mask).map(|(a, m)| a * m).collect()
        }
        (LayerSpec::Dropout { .. } | LayerSpec::Flatten, Cache::Nothing) => g,
        (spec, _) => unreachable!("cache does not belong to layer {}", spec.name()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_ladder_for_five_blocks() {
        let mut specs = Vec::new();
        for _ in 0..5 {
            specs.push(LayerSpec::Conv3x3 { filters: 2 });
            specs.push(LayerSpec::MaxPool2x2);
        }
        let m = Model::new(Shape::new(1, 128, 128), &specs, 0).unwrap();
        let sizes: Vec<usize> = m.layers().iter().map(|l| l.output.h).collect();
        assert_eq!(sizes, vec![126, 63, 61, 30, 28, 14, 12, 6, 4, 2]);
    }

    #[test]
    fn infeasible_chain_names_layer() {
        let specs = [LayerSpec::Flatten, LayerSpec::Conv3x3 { filters: 1 }];
        match Model::new(Shape::new(1, 8, 8), &specs, 0) {
            Err(NnError::Infeasible { layer, kind, .. }) => {
                assert_eq!((layer, kind), (1, "conv3x3"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_input_relu_gives_zero_features() {
        let specs = [
            LayerSpec::Conv3x3 { filters: 4 },
            LayerSpec::Activation { function: Activation::Relu },
            LayerSpec::MaxPool2x2,
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 5 },
            LayerSpec::Activation { function: Activation::Relu },
        ];
        let m = Model::new(Shape::new(1, 10, 10), &specs, 3).unwrap();
        let y = m.predict(&Tensor::zeros(vec![2, 1, 10, 10])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_input_shape_is_reported() {
        let m = Model::new(Shape::new(1, 6, 6), &[LayerSpec::Flatten], 0).unwrap();
        let err = m.predict(&Tensor::zeros(vec![1, 1, 5, 5])).unwrap_err();
        assert!(matches!(err, NnError::ShapeMismatch { layer: 0, .. }));
    }

    #[test]
    fn backward_without_forward_fails() {
        let mut m = Model::new(Shape::flat(3), &[LayerSpec::Dense { units: 2 }], 0).unwrap();
        let err = m.backward(&Tensor::zeros(vec![1, 2]), Regularization::default());
        assert!(matches!(err, Err(NnError::NoForwardPass)));
    }

    #[test]
    fn state_round_trip() {
        let specs = [LayerSpec::Conv3x3 { filters: 2 }, LayerSpec::BatchNorm, LayerSpec::Flatten];
        let a = Model::new(Shape::new(1, 5, 5), &specs, 1).unwrap();
        let mut b = Model::new(Shape::new(1, 5, 5), &specs, 2).unwrap();
        b.set_state(&a.state()).unwrap();
        assert_eq!(a.state(), b.state());
        assert!(matches!(b.set_state(&a.state()[1..]), Err(NnError::StateMismatch)));
    }
}
