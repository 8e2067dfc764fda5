use std::collections::HashMap;

use super::layers::{
    conv2d_backward, conv2d_forward, conv_transpose2d_backward, conv_transpose2d_forward, dense_backward, dense_forward,
    leaky_relu_backward, leaky_relu_forward, ConvGeometry, LayerGrads, LayerParams,
};
use super::Tensor;
use crate::error::{shape, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense { name: String, params: LayerParams },
    Conv2d { name: String, params: LayerParams, geometry: ConvGeometry },
    ConvTranspose2d { name: String, params: LayerParams, geometry: ConvGeometry },
    LeakyRelu { slope: f64 },
    Reshape { shape: Vec<usize> },
}

impl Layer {
    pub fn name(&self) -> &str {
        match self {
            Layer::Dense { name, .. } | Layer::Conv2d { name, .. } | Layer::ConvTranspose2d { name, .. } => name,
            Layer::LeakyRelu { .. } => "leaky_relu",
            Layer::Reshape { .. } => "reshape",
        }
    }

    pub fn params(&self) -> Option<&LayerParams> {
        match self {
            Layer::Dense { params, .. } | Layer::Conv2d { params, .. } | Layer::ConvTranspose2d { params, .. } => Some(params),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<&mut LayerParams> {
        match self {
            Layer::Dense { params, .. } | Layer::Conv2d { params, .. } | Layer::ConvTranspose2d { params, .. } => Some(params),
            _ => None,
        }
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Dense { params, .. } => dense_forward(input, params),
            Layer::Conv2d { params, geometry, .. } => conv2d_forward(input, params, geometry),
            Layer::ConvTranspose2d { params, geometry, .. } => conv_transpose2d_forward(input, params, geometry),
            Layer::LeakyRelu { slope } => Ok(leaky_relu_forward(input, *slope)),
            Layer::Reshape { shape } => input.clone().reshape(shape),
        }
    }

    /// Gradient w.r.t. the layer input; parameter gradients go into `grads`.
    pub fn backward(&self, input: &Tensor, grad_out: &Tensor, grads: Option<&mut LayerGrads>) -> Result<Tensor> {
        match self {
            Layer::Dense { params, .. } => dense_backward(input, params, grad_out, need(grads, self.name())?),
            Layer::Conv2d { params, geometry, .. } => conv2d_backward(input, params, geometry, grad_out, need(grads, self.name())?),
            Layer::ConvTranspose2d { params, geometry, .. } => {
                conv_transpose2d_backward(input, params, geometry, grad_out, need(grads, self.name())?)
            }
            Layer::LeakyRelu { slope } => leaky_relu_backward(input, *slope, grad_out),
            Layer::Reshape { .. } => grad_out.clone().reshape(input.shape()),
        }
    }
}

fn need<'a>(grads: Option<&'a mut LayerGrads>, name: &str) -> Result<&'a mut LayerGrads> {
    grads.ok_or_else(|| Error::State(format!("missing gradient buffer for `{name}`")))
}

/// Inputs recorded for every layer during a forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    inputs: Vec<Tensor>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn clear(&mut self) {
        self.inputs.clear();
    }
}

/// Gradients for every parametric layer of a [`Sequential`], in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSet {
    pub layers: Vec<LayerGrads>,
}

impl GradSet {
    pub fn add_assign(&mut self, other: &GradSet) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(shape("gradient sets of different networks"));
        }
        self.layers.iter_mut().zip(&other.layers).try_for_each(|(a, b)| a.add_assign(b))
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.layers {
            g.weight.scale(factor);
            g.bias.scale(factor);
        }
    }

    /// All gradient values flattened in layer order (weight then bias).
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|g| g.weight.data().iter().chain(g.bias.data()).copied())
            .collect()
    }
}

/// A feed-forward stack of layers with recorded forward passes for
/// reverse-mode differentiation.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    /// Inference forward pass; nothing is recorded.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut x = input.clone();
        for layer in &self.layers {
            x = checked(layer, layer.forward(&x)?)?;
        }
        Ok(x)
    }

    /// Forward pass that records every layer input on `tape`.
    pub fn forward_recorded(&self, input: &Tensor, tape: &mut Tape) -> Result<Tensor> {
        tape.clear();
        let mut x = input.clone();
        for layer in &self.layers {
            let y = checked(layer, layer.forward(&x)?)?;
            tape.inputs.push(std::mem::replace(&mut x, y));
        }
        Ok(x)
    }

    /// Back-propagates `grad_out` through the pass recorded on `tape`,
    /// accumulating parameter gradients into `grads`. Returns the gradient
    /// with respect to the network input.
    pub fn backward(&self, tape: &Tape, grad_out: &Tensor, grads: &mut GradSet) -> Result<Tensor> {
        if tape.inputs.len() != self.layers.len() {
            return Err(Error::State(format!(
                "backward needs a recorded forward pass ({} of {} layer inputs on tape)",
                tape.inputs.len(),
                self.layers.len()
            )));
        }
        if grads.layers.len() != self.param_layer_count() {
            return Err(shape("gradient set does not match network"));
        }
        let mut slot = grads.layers.len();
        let mut g = grad_out.clone();
        for (layer, input) in self.layers.iter().zip(&tape.inputs).rev() {
            let buf = if layer.params().is_some() {
                slot -= 1;
                Some(&mut grads.layers[slot])
            } else {
                None
            };
            g = layer.backward(input, &g, buf)?;
        }
        Ok(g)
    }

    fn param_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| l.params().is_some()).count()
    }

    pub fn params(&self) -> Vec<&LayerParams> {
        self.layers.iter().filter_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut LayerParams> {
        self.layers.iter_mut().filter_map(Layer::params_mut).collect()
    }

    pub fn empty_grads(&self) -> GradSet {
        GradSet {
            layers: self.params().iter().map(|p| p.empty_grads()).collect(),
        }
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(LayerParams::zero_grad);
    }

    pub fn accumulate(&mut self, grads: &GradSet) -> Result<()> {
        let params = self.params_mut();
        if params.len() != grads.layers.len() {
            return Err(shape("gradient set does not match network"));
        }
        params.into_iter().zip(&grads.layers).try_for_each(|(p, g)| p.accumulate(g))
    }

    /// Named parameter tensors: `<layer>.weight`, `<layer>.bias`.
    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for layer in &self.layers {
            if let Some(p) = layer.params() {
                out.push((format!("{prefix}{}.weight", layer.name()), &p.weight));
                out.push((format!("{prefix}{}.bias", layer.name()), &p.bias));
            }
        }
        out
    }

    /// Replaces every parameter from `tensors`, which must hold each name with
    /// the current shape.
    pub fn load_named(&mut self, prefix: &str, tensors: &mut HashMap<String, Tensor>) -> Result<()> {
        for layer in &mut self.layers {
            let name = layer.name().to_string();
            if let Some(p) = layer.params_mut() {
                for (suffix, slot) in [("weight", &mut p.weight), ("bias", &mut p.bias)] {
                    let key = format!("{prefix}{name}.{suffix}");
                    let t = tensors
                        .remove(&key)
                        .ok_or_else(|| Error::Format(format!("model file lacks tensor `{key}`")))?;
                    if t.shape() != slot.shape() {
                        return Err(Error::Format(format!(
                            "tensor `{key}` has shape {:?}, expected {:?}",
                            t.shape(),
                            slot.shape()
                        )));
                    }
                    *slot = t;
                }
                p.zero_grad();
            }
        }
        Ok(())
    }
}

fn checked(layer: &Layer, out: Tensor) -> Result<Tensor> {
    if out.all_finite() {
        Ok(out)
    } else {
        Err(Error::Numeric {
            layer: layer.name().to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_net() -> Sequential {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        Sequential::new(vec![
            Layer::Dense {
                name: "fc1".into(),
                params: LayerParams::glorot(&[4, 3], 3, 4, 4, &mut rng),
            },
            Layer::LeakyRelu { slope: 0.01 },
            Layer::Dense {
                name: "fc2".into(),
                params: LayerParams::glorot(&[1, 4], 4, 1, 1, &mut rng),
            },
        ])
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let net = tiny_net();
        let mut grads = net.empty_grads();
        let err = net.backward(&Tape::new(), &Tensor::from_vec(vec![1.0]), &mut grads).unwrap_err();
        assert!(matches!(err, Error::State(_)), "{err}");
    }

    #[test]
    fn forward_is_deterministic_and_recording_matches() {
        let net = tiny_net();
        let x = Tensor::from_vec(vec![0.3, -0.2, 0.9]);
        let mut tape = Tape::new();
        let a = net.forward(&x).unwrap();
        let b = net.forward_recorded(&x, &mut tape).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, net.forward(&x).unwrap());
        assert!(!tape.is_empty());
    }

    #[test]
    fn non_finite_activation_names_layer() {
        let mut net = tiny_net();
        net.params_mut()[1].bias.data_mut()[0] = f64::NAN;
        match net.forward(&Tensor::from_vec(vec![0.0; 3])) {
            Err(Error::Numeric { layer }) => assert_eq!(layer, "fc2"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
