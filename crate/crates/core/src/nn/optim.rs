use super::{LayerParams, Tensor};
use crate::error::{domain, shape, Result};

/// Bias-corrected Adam moments for an ordered list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(shapes: &[&[usize]]) -> Self {
        Self {
            first_moment: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            second_moment: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Zeroed state for the weight and bias of every layer, in order.
    pub fn for_layers(layers: &[&LayerParams]) -> Self {
        let shapes: Vec<&[usize]> = layers.iter().flat_map(|p| [p.weight.shape(), p.bias.shape()]).collect();
        Self::new(&shapes)
    }
}

/// One Adam update of `params` from `grads` (same order and shapes as the
/// state buffers).
pub fn adam_step(params: &mut [&mut Tensor], grads: &[&Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(shape(format!(
            "adam: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.first_moment) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(shape(format!("adam: shapes {:?} / {:?} / {:?}", p.shape(), g.shape(), m.shape())));
        }
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        for (((x, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *x -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Adam update of layer parameters from their own gradient buffers.
pub fn adam_step_layers(layers: &mut [&mut LayerParams], state: &mut AdamState, lr: f64) -> Result<()> {
    let mut params: Vec<&mut Tensor> = Vec::with_capacity(2 * layers.len());
    let mut grads: Vec<&Tensor> = Vec::with_capacity(2 * layers.len());
    for lp in layers.iter_mut() {
        let LayerParams {
            weight,
            bias,
            grad_weight,
            grad_bias,
        } = &mut **lp;
        params.push(weight);
        grads.push(grad_weight);
        params.push(bias);
        grads.push(grad_bias);
    }
    adam_step(&mut params, &grads, state, lr)
}

/// Cosine annealing from `lr_max` at epoch 0 to `lr_min` at `total_epochs`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_epochs: usize,
}

impl CosineSchedule {
    pub fn new(lr_max: f64, lr_min: f64, total_epochs: usize) -> Self {
        Self {
            lr_max,
            lr_min,
            total_epochs,
        }
    }

    pub fn lr(&self, epoch: usize) -> Result<f64> {
        cosine_lr(self, epoch)
    }
}

pub fn cosine_lr(schedule: &CosineSchedule, epoch: usize) -> Result<f64> {
    if epoch > schedule.total_epochs {
        return Err(domain(format!("cosine_lr: epoch {epoch} beyond {}", schedule.total_epochs)));
    }
    if schedule.total_epochs == 0 {
        return Ok(schedule.lr_max);
    }
    let phase = std::f64::consts::PI * epoch as f64 / schedule.total_epochs as f64;
    Ok(schedule.lr_min + 0.5 * (schedule.lr_max - schedule.lr_min) * (1.0 + phase.cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::from_vec(vec![1.0, -2.0]);
        let g = Tensor::from_vec(vec![0.0, 0.0]);
        let mut st = AdamState::new(&[&[2]]);
        st.first_moment[0] = Tensor::from_vec(vec![0.5, 0.5]);
        adam_step(&mut [&mut p], &[&g], &mut st, 1e-3).unwrap();
        assert_eq!(st.step_count, 1);
        assert_eq!(st.first_moment[0].data(), [0.45, 0.45]);
        // m̂ = 0.45 / 0.1 moves p, so only check with truly fresh moments:
        let mut p2 = Tensor::from_vec(vec![1.0, -2.0]);
        let mut fresh = AdamState::new(&[&[2]]);
        adam_step(&mut [&mut p2], &[&g], &mut fresh, 1e-3).unwrap();
        assert_eq!(p2.data(), [1.0, -2.0]);
    }

    #[test]
    fn first_step_is_signed_learning_rate() {
        let g = Tensor::from_vec(vec![0.3, -4.0, 1e-3]);
        let mut p = Tensor::from_vec(vec![0.0; 3]);
        let mut st = AdamState::new(&[&[3]]);
        let lr = 0.01;
        adam_step(&mut [&mut p], &[&g], &mut st, lr).unwrap();
        for (x, gi) in p.data().iter().zip(g.data()) {
            let expected = -lr * gi / (gi.abs() + 1e-8);
            assert!((x - expected).abs() < 1e-15, "{x} vs {expected}");
        }
    }

    #[test]
    fn constant_gradient_moves_by_lr() {
        let g = Tensor::from_vec(vec![2.5, -0.01]);
        let mut p = Tensor::from_vec(vec![0.0; 2]);
        let mut st = AdamState::new(&[&[2]]);
        for _ in 0..500 {
            let prev = p.clone();
            adam_step(&mut [&mut p], &[&g], &mut st, 1e-3).unwrap();
            for ((a, b), gi) in p.data().iter().zip(prev.data()).zip(g.data()) {
                let step = b - a;
                assert!((step.abs() - 1e-3).abs() < 1e-8, "{step}");
                assert_eq!(step.signum(), gi.signum());
            }
        }
    }

    #[test]
    fn update_does_not_depend_on_gradient_storage() {
        let mut lp = LayerParams::new(Tensor::from_vec(vec![0.1, 0.2]), Tensor::from_vec(vec![0.3]));
        lp.grad_weight = Tensor::from_vec(vec![1.0, -1.0]);
        lp.grad_bias = Tensor::from_vec(vec![0.5]);
        let detached = (lp.grad_weight.clone(), lp.grad_bias.clone());
        let mut a = lp.clone();
        let mut sa = AdamState::for_layers(&[&a]);
        adam_step_layers(&mut [&mut a], &mut sa, 1e-2).unwrap();
        let (mut w, mut b) = (lp.weight.clone(), lp.bias.clone());
        let mut sb = AdamState::for_layers(&[&lp]);
        adam_step(&mut [&mut w, &mut b], &[&detached.0, &detached.1], &mut sb, 1e-2).unwrap();
        assert_eq!(a.weight, w);
        assert_eq!(a.bias, b);
        assert_eq!(sa, sb);
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let s = CosineSchedule::new(1e-3, 1e-6, 300);
        assert_eq!(s.lr(0).unwrap(), 1e-3);
        assert!((s.lr(300).unwrap() - 1e-6).abs() < 1e-18);
        assert!((s.lr(150).unwrap() - (1e-3 + 1e-6) / 2.0).abs() < 1e-15);
        assert!(s.lr(301).is_err());
        let lrs: Vec<f64> = (0..=300).map(|e| s.lr(e).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
