//! Convolutional variational autoencoder over volatility surfaces.
//!
//! Encoder: two stride-2 3x3 convolutions with leaky-ReLU, flattened into
//! separate dense heads for `mu` and `log_var`. Decoder: dense, leaky-ReLU,
//! reshape, two stride-2 transposed convolutions back to the surface grid.
//! Reconstructions average several reparameterized samples.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::market_data::{SurfaceDataset, VolSurface, N_K, N_T};
use crate::nn::{
    adam_step_layers, read_tensors, write_tensors, AdamState, ConvGeometry, CosineSchedule, GradSet, Layer, LayerParams,
    Sequential, Tape, Tensor, LEAKY_SLOPE,
};
use crate::rng;

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeConfig {
    pub height: usize,
    pub width: usize,
    /// Output channels of the two encoder convolutions.
    pub channels: [usize; 2],
    pub latent_dim: usize,
    /// Samples averaged per reconstruction.
    pub n_samples: usize,
    /// Weight of the KL term; zero gives the pure reconstruction loss.
    pub kl_beta: f64,
    /// Encoder inputs are `(σ − shift) / scale`; decoder outputs are mapped back.
    pub input_shift: f64,
    pub input_scale: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            height: N_K,
            width: N_T,
            channels: [16, 32],
            latent_dim: 10,
            n_samples: 10,
            kl_beta: 0.0,
            input_shift: 0.0,
            input_scale: 1.0,
        }
    }
}

/// Activation shapes through the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VaeShapes {
    pub input: (usize, usize),
    pub conv1: (usize, usize),
    pub conv2: (usize, usize),
    pub flat: usize,
}

fn conv_geometry() -> ConvGeometry {
    ConvGeometry::new(3, 2, 1)
}

/// Transposed-conv geometry mapping `from` back to exactly `to`.
fn inverse_geometry(from: (usize, usize), to: (usize, usize)) -> Result<ConvGeometry> {
    let g = conv_geometry();
    let base = g.transpose_output(from.0, from.1)?;
    if to.0 < base.0 || to.1 < base.1 {
        return Err(Error::Shape(format!("cannot invert {from:?} to {to:?}")));
    }
    let geom = g.with_output_padding(to.0 - base.0, to.1 - base.1);
    geom.transpose_output(from.0, from.1)?;
    Ok(geom)
}

impl VaeConfig {
    pub fn validate(&self) -> Result<VaeShapes> {
        if self.latent_dim == 0 || self.n_samples == 0 || self.channels.contains(&0) {
            return Err(Error::Domain(format!("invalid VAE config {self:?}")));
        }
        if !(self.input_scale > 0.0 && self.input_scale.is_finite() && self.input_shift.is_finite() && self.kl_beta >= 0.0) {
            return Err(Error::Domain(format!("invalid VAE scaling in {self:?}")));
        }
        let g = conv_geometry();
        let conv1 = g.conv_output(self.height, self.width)?;
        let conv2 = g.conv_output(conv1.0, conv1.1)?;
        Ok(VaeShapes { input: (self.height, self.width), conv1, conv2, flat: self.channels[1] * conv2.0 * conv2.1 })
    }

    pub fn surface_len(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentStats {
    pub mu: Vec<f64>,
    /// Clamped to `[LOG_VAR_MIN, LOG_VAR_MAX]`.
    pub log_var: Vec<f64>,
}

impl LatentStats {
    pub fn std_dev(&self) -> Vec<f64> {
        self.log_var.iter().map(|lv| (0.5 * lv.clamp(LOG_VAR_MIN, LOG_VAR_MAX)).exp()).collect()
    }
}

/// `z = mu + exp(log_var / 2) ⊙ eps`.
pub fn reparameterize(stats: &LatentStats, eps: &[f64]) -> Vec<f64> {
    stats.mu.iter().zip(stats.std_dev()).zip(eps).map(|((m, s), e)| m + s * e).collect()
}

/// The `n_samples x latent_dim` standard-normal draws used for one surface
/// in one epoch.
pub fn surface_eps(seed: u64, surface_id: usize, epoch: usize, n_samples: usize, latent_dim: usize) -> Vec<Vec<f64>> {
    let mut r = rng::stream(seed, &[0xe9, surface_id as u64, epoch as u64]);
    sample_eps(&mut r, n_samples, latent_dim)
}

fn sample_eps<R: Rng + ?Sized>(r: &mut R, n_samples: usize, latent_dim: usize) -> Vec<Vec<f64>> {
    (0..n_samples)
        .map(|_| (0..latent_dim).map(|_| StandardNormal.sample(&mut *r)).collect())
        .collect()
}

/// Gradients for every VAE parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeGrads {
    pub encoder: GradSet,
    pub mu: GradSet,
    pub log_var: GradSet,
    pub decoder: GradSet,
}

impl VaeGrads {
    pub fn add_assign(&mut self, other: &VaeGrads) -> Result<()> {
        self.encoder.add_assign(&other.encoder)?;
        self.mu.add_assign(&other.mu)?;
        self.log_var.add_assign(&other.log_var)?;
        self.decoder.add_assign(&other.decoder)
    }

    pub fn scale(&mut self, factor: f64) {
        for g in [&mut self.encoder, &mut self.mu, &mut self.log_var, &mut self.decoder] {
            g.scale(factor);
        }
    }

    /// Encoder trunk, mu head, log-var head, decoder.
    pub fn flatten(&self) -> Vec<f64> {
        [&self.encoder, &self.mu, &self.log_var, &self.decoder].iter().flat_map(|g| g.flatten()).collect()
    }
}

/// Recorded encoder pass, needed to back-propagate into the encoder.
#[derive(Debug, Clone, Default)]
pub struct EncoderTape {
    trunk: Tape,
    mu: Tape,
    log_var: Tape,
    raw_log_var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    pub config: VaeConfig,
    pub encoder: Sequential,
    pub mu_head: Sequential,
    pub log_var_head: Sequential,
    pub decoder: Sequential,
}

fn dense<R: Rng + ?Sized>(name: &str, n_in: usize, n_out: usize, r: &mut R) -> Layer {
    Layer::Dense { name: name.into(), params: LayerParams::glorot(&[n_out, n_in], n_in, n_out, n_out, r) }
}

fn leaky() -> Layer {
    Layer::LeakyRelu { slope: LEAKY_SLOPE }
}

impl VaeModel {
    /// Glorot-uniform weights and zero biases drawn from `seed`.
    pub fn new(config: VaeConfig, seed: u64) -> Result<Self> {
        let sh = config.validate()?;
        let [c1, c2] = config.channels;
        let l = config.latent_dim;
        let mut r = rng::stream(seed, &[0x7ae]);
        let conv = |name: &str, cin: usize, cout: usize, r: &mut rand_chacha::ChaCha8Rng| Layer::Conv2d {
            name: name.into(),
            params: LayerParams::glorot(&[cout, cin, 3, 3], cin * 9, cout * 9, cout, r),
            geometry: conv_geometry(),
        };
        let encoder = Sequential::new(vec![
            conv("encoder.conv1", 1, c1, &mut r),
            leaky(),
            conv("encoder.conv2", c1, c2, &mut r),
            leaky(),
            Layer::Reshape { shape: vec![sh.flat] },
        ]);
        let mu_head = Sequential::new(vec![dense("encoder.mu", sh.flat, l, &mut r)]);
        let log_var_head = Sequential::new(vec![dense("encoder.log_var", sh.flat, l, &mut r)]);
        let deconv = |name: &str, cin: usize, cout: usize, geometry: ConvGeometry, r: &mut rand_chacha::ChaCha8Rng| {
            Layer::ConvTranspose2d {
                name: name.into(),
                params: LayerParams::glorot(&[cin, cout, 3, 3], cin * 9, cout * 9, cout, r),
                geometry,
            }
        };
        let decoder = Sequential::new(vec![
            dense("decoder.fc", l, sh.flat, &mut r),
            leaky(),
            Layer::Reshape { shape: vec![c2, sh.conv2.0, sh.conv2.1] },
            deconv("decoder.deconv1", c2, c1, inverse_geometry(sh.conv2, sh.conv1)?, &mut r),
            leaky(),
            deconv("decoder.deconv2", c1, 1, inverse_geometry(sh.conv1, sh.input)?, &mut r),
            Layer::Reshape { shape: vec![config.height, config.width] },
        ]);
        Ok(Self { config, encoder, mu_head, log_var_head, decoder })
    }

    /// Standardized encoder input `[1, H, W]`.
    pub fn input_tensor(&self, vols: &[f64]) -> Result<Tensor> {
        let c = &self.config;
        if vols.len() != c.surface_len() {
            return Err(Error::Shape(format!("VAE expects {} values, got {}", c.surface_len(), vols.len())));
        }
        let data = vols.iter().map(|v| (v - c.input_shift) / c.input_scale).collect();
        Tensor::new(vec![1, c.height, c.width], data)
    }

    fn stats_from_heads(mu: Tensor, raw_log_var: &Tensor) -> LatentStats {
        LatentStats {
            mu: mu.into_data(),
            log_var: raw_log_var.data().iter().map(|lv| lv.clamp(LOG_VAR_MIN, LOG_VAR_MAX)).collect(),
        }
    }

    pub fn encode_values(&self, vols: &[f64]) -> Result<LatentStats> {
        let h = self.encoder.forward(&self.input_tensor(vols)?)?;
        let mu = self.mu_head.forward(&h)?;
        let lv = self.log_var_head.forward(&h)?;
        Ok(Self::stats_from_heads(mu, &lv))
    }

    pub fn encode(&self, surface: &VolSurface) -> Result<LatentStats> {
        self.encode_values(surface.as_slice())
    }

    /// Recorded encoder pass on standardized `input`.
    pub fn encode_recorded(&self, input: &Tensor) -> Result<(LatentStats, EncoderTape)> {
        let mut tape = EncoderTape::default();
        let h = self.encoder.forward_recorded(input, &mut tape.trunk)?;
        let mu = self.mu_head.forward_recorded(&h, &mut tape.mu)?;
        let lv = self.log_var_head.forward_recorded(&h, &mut tape.log_var)?;
        tape.raw_log_var = lv.data().to_vec();
        Ok((Self::stats_from_heads(mu, &lv), tape))
    }

    /// Back-propagates gradients with respect to `mu` and the clamped
    /// `log_var` into the encoder groups of `grads`. A `None` log-var
    /// gradient leaves that head untouched.
    pub fn encoder_backward(&self, tape: &EncoderTape, d_mu: &[f64], d_log_var: Option<&[f64]>, grads: &mut VaeGrads) -> Result<()> {
        let mut g_h = self.mu_head.backward(&tape.mu, &Tensor::from_vec(d_mu.to_vec()), &mut grads.mu)?;
        if let Some(d_lv) = d_log_var {
            let masked: Vec<f64> = d_lv
                .iter()
                .zip(&tape.raw_log_var)
                .map(|(g, raw)| if (LOG_VAR_MIN..=LOG_VAR_MAX).contains(raw) { *g } else { 0.0 })
                .collect();
            let g_lv = self.log_var_head.backward(&tape.log_var, &Tensor::from_vec(masked), &mut grads.log_var)?;
            g_h.add_assign(&g_lv)?;
        }
        self.encoder.backward(&tape.trunk, &g_h, &mut grads.encoder)?;
        Ok(())
    }

    fn destandardize(&self, raw: Tensor) -> Result<Tensor> {
        let c = &self.config;
        let data = raw.data().iter().map(|y| c.input_shift + c.input_scale * y).collect();
        Tensor::new(vec![c.height, c.width], data)
    }

    /// Decoded surface `[H, W]` in vol units.
    pub fn decode(&self, z: &[f64]) -> Result<Tensor> {
        if z.len() != self.config.latent_dim {
            return Err(Error::Shape(format!("latent of length {} for a {}-dim model", z.len(), self.config.latent_dim)));
        }
        self.destandardize(self.decoder.forward(&Tensor::from_vec(z.to_vec()))?)
    }

    /// Mean decoded surface over the given eps draws.
    pub fn reconstruct_with_eps(&self, vols: &[f64], eps: &[Vec<f64>]) -> Result<Tensor> {
        if eps.is_empty() {
            return Err(Error::Domain("reconstruction needs at least one sample".into()));
        }
        let stats = self.encode_values(vols)?;
        let mut acc = Tensor::zeros(&[self.config.height, self.config.width]);
        for e in eps {
            acc.add_assign(&self.decode(&reparameterize(&stats, e))?)?;
        }
        acc.scale(1.0 / eps.len() as f64);
        Ok(acc)
    }

    /// Mean of `n_samples` decoded reparameterized samples, eps drawn from `rng`.
    pub fn reconstruct<R: Rng + ?Sized>(&self, surface: &VolSurface, n_samples: usize, rng: &mut R) -> Result<Tensor> {
        let eps = sample_eps(rng, n_samples, self.config.latent_dim);
        self.reconstruct_with_eps(surface.as_slice(), &eps)
    }

    fn kl(stats: &LatentStats) -> f64 {
        -0.5 * stats.mu.iter().zip(&stats.log_var).map(|(m, lv)| 1.0 + lv - m * m - lv.exp()).sum::<f64>()
    }

    /// `mean_{k,T} (σ − σ̄')² + β KL` for one surface, `σ̄'` averaged over `eps`.
    pub fn surface_loss(&self, vols: &[f64], eps: &[Vec<f64>]) -> Result<f64> {
        let recon = self.reconstruct_with_eps(vols, eps)?;
        let mse = recon.data().iter().zip(vols).map(|(r, v)| (r - v).powi(2)).sum::<f64>() / vols.len() as f64;
        let kl = if self.config.kl_beta > 0.0 { self.config.kl_beta * Self::kl(&self.encode_values(vols)?) } else { 0.0 };
        Ok(mse + kl)
    }

    pub fn empty_grads(&self) -> VaeGrads {
        VaeGrads {
            encoder: self.encoder.empty_grads(),
            mu: self.mu_head.empty_grads(),
            log_var: self.log_var_head.empty_grads(),
            decoder: self.decoder.empty_grads(),
        }
    }

    /// Loss of one surface and its gradient with respect to every parameter.
    pub fn surface_loss_grad(&self, vols: &[f64], eps: &[Vec<f64>]) -> Result<(f64, VaeGrads)> {
        if eps.is_empty() {
            return Err(Error::Domain("reconstruction needs at least one sample".into()));
        }
        let input = self.input_tensor(vols)?;
        let (stats, enc_tape) = self.encode_recorded(&input)?;
        let std = stats.std_dev();
        let mut tapes = Vec::with_capacity(eps.len());
        let mut mean = vec![0.0; vols.len()];
        for e in eps {
            let z: Vec<f64> = stats.mu.iter().zip(&std).zip(e).map(|((m, s), x)| m + s * x).collect();
            let mut tape = Tape::new();
            let out = self.decoder.forward_recorded(&Tensor::from_vec(z), &mut tape)?;
            mean.iter_mut().zip(out.data()).for_each(|(a, y)| *a += y);
            tapes.push(tape);
        }
        let (c, n) = (&self.config, eps.len() as f64);
        let p = vols.len() as f64;
        let mut loss = 0.0;
        // d loss / d raw decoder output, identical for every sample.
        let mut g_out = vec![0.0; vols.len()];
        for ((m, v), g) in mean.iter_mut().zip(vols).zip(&mut g_out) {
            *m = c.input_shift + c.input_scale * (*m / n);
            let diff = *m - v;
            loss += diff * diff / p;
            *g = 2.0 * diff / p * c.input_scale / n;
        }
        let g_out = Tensor::new(vec![c.height, c.width], g_out)?;
        let mut grads = self.empty_grads();
        let l = c.latent_dim;
        let (mut d_mu, mut d_lv) = (vec![0.0; l], vec![0.0; l]);
        for (tape, e) in tapes.iter().zip(eps) {
            let dz = self.decoder.backward(tape, &g_out, &mut grads.decoder)?;
            for i in 0..l {
                d_mu[i] += dz.data()[i];
                d_lv[i] += dz.data()[i] * e[i] * 0.5 * std[i];
            }
        }
        if c.kl_beta > 0.0 {
            loss += c.kl_beta * Self::kl(&stats);
            for i in 0..l {
                d_mu[i] += c.kl_beta * stats.mu[i];
                d_lv[i] += c.kl_beta * 0.5 * (stats.log_var[i].exp() - 1.0);
            }
        }
        self.encoder_backward(&enc_tape, &d_mu, Some(&d_lv), &mut grads)?;
        Ok((loss, grads))
    }

    /// `(1/N) Σ` surface losses, each with eps from `(seed, surface_id, epoch)`.
    pub fn vae_loss(&self, batch: &[(usize, &VolSurface)], seed: u64, epoch: usize) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Domain("vae_loss of an empty batch".into()));
        }
        let losses: Vec<f64> = batch
            .par_iter()
            .map(|(id, s)| {
                let eps = surface_eps(seed, *id, epoch, self.config.n_samples, self.config.latent_dim);
                self.surface_loss(s.as_slice(), &eps)
            })
            .collect::<Result<_>>()?;
        Ok(losses.iter().sum::<f64>() / batch.len() as f64)
    }

    pub fn zero_grad(&mut self) {
        for net in [&mut self.encoder, &mut self.mu_head, &mut self.log_var_head, &mut self.decoder] {
            net.zero_grad();
        }
    }

    pub fn accumulate(&mut self, grads: &VaeGrads) -> Result<()> {
        self.encoder.accumulate(&grads.encoder)?;
        self.mu_head.accumulate(&grads.mu)?;
        self.log_var_head.accumulate(&grads.log_var)?;
        self.decoder.accumulate(&grads.decoder)
    }

    /// Encoder trunk and both heads, then the decoder.
    pub fn params_mut(&mut self) -> Vec<&mut LayerParams> {
        let mut out = self.encoder.params_mut();
        out.extend(self.mu_head.params_mut());
        out.extend(self.log_var_head.params_mut());
        out.extend(self.decoder.params_mut());
        out
    }

    pub fn encoder_params_mut(&mut self) -> Vec<&mut LayerParams> {
        let mut out = self.encoder.params_mut();
        out.extend(self.mu_head.params_mut());
        out.extend(self.log_var_head.params_mut());
        out
    }

    fn encoder_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.encoder.named_tensors("");
        out.extend(self.mu_head.named_tensors(""));
        out.extend(self.log_var_head.named_tensors(""));
        out
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        let mut all = self.encoder_tensors();
        all.extend(self.decoder.named_tensors(""));
        write_tensors(w, &all)
    }

    /// Loads parameters saved by [`VaeModel::save`] for a model of shape `config`.
    pub fn load<R: Read>(r: R, config: VaeConfig) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let mut tensors: HashMap<String, Tensor> = read_tensors(r)?.into_iter().collect();
        model.encoder.load_named("", &mut tensors)?;
        model.mu_head.load_named("", &mut tensors)?;
        model.log_var_head.load_named("", &mut tensors)?;
        model.decoder.load_named("", &mut tensors)?;
        if let Some(extra) = tensors.keys().min() {
            return Err(Error::Format(format!("unexpected tensor `{extra}` in VAE file")));
        }
        Ok(model)
    }

    /// Serialized encoder parameters, for freeze checks.
    pub fn encoder_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_tensors(&mut buf, &self.encoder_tensors()).expect("writing to memory");
        buf
    }

    pub fn decoder_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_tensors(&mut buf, &self.decoder.named_tensors("")).expect("writing to memory");
        buf
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: CosineSchedule,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub lr: f64,
}

/// Per-epoch losses. When present, row 0 is the untrained baseline.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = std::io::BufWriter::new(writer);
        writeln!(w, "epoch,train_loss,test_loss,lr")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{}", r.epoch, r.train_loss, r.test_loss, r.lr)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn initial(&self) -> Option<&LogRow> {
        self.rows.first()
    }

    pub fn last(&self) -> Option<&LogRow> {
        self.rows.last()
    }
}

pub(crate) fn check_train_config(cfg: &TrainConfig) -> Result<()> {
    if cfg.batch_size == 0 {
        return Err(Error::Domain("batch size must be positive".into()));
    }
    if cfg.schedule.total_epochs != cfg.epochs {
        return Err(Error::Domain(format!(
            "schedule spans {} epochs but training runs {}",
            cfg.schedule.total_epochs, cfg.epochs
        )));
    }
    Ok(())
}

/// Epoch `e` visits `ids` in an order drawn from `(seed, tag, e)`.
pub(crate) fn epoch_order(ids: &[usize], seed: u64, tag: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order = ids.to_vec();
    order.shuffle(&mut rng::stream(seed, &[tag, epoch as u64]));
    order
}

pub(crate) fn diverged(err: Error, epoch: usize) -> Error {
    match err {
        Error::Numeric { .. } => Error::Divergence { epoch },
        other => other,
    }
}

fn split_refs<'a>(dataset: &'a SurfaceDataset, ids: &[usize]) -> Vec<(usize, &'a VolSurface)> {
    ids.iter().map(|&i| (i, &dataset.surfaces[i])).collect()
}

/// Mini-batch Adam on the training split under a cosine schedule. Epoch `e`
/// uses `lr(e − 1)`; its train loss is the mean of the per-surface losses
/// seen during the epoch, its test loss a full pass after the epoch.
pub fn train_vae(model: &mut VaeModel, dataset: &SurfaceDataset, cfg: &TrainConfig) -> Result<TrainingLog> {
    check_train_config(cfg)?;
    let mut log = TrainingLog::default();
    if cfg.epochs == 0 {
        return Ok(log);
    }
    if dataset.train_indices.is_empty() || dataset.test_indices.is_empty() {
        return Err(Error::Domain("training needs non-empty train and test splits".into()));
    }
    let train = split_refs(dataset, &dataset.train_indices);
    let test = split_refs(dataset, &dataset.test_indices);
    log.rows.push(LogRow {
        epoch: 0,
        train_loss: model.vae_loss(&train, cfg.seed, 0)?,
        test_loss: model.vae_loss(&test, cfg.seed, 0)?,
        lr: cfg.schedule.lr(0)?,
    });
    let mut adam = AdamState::for_layers(&model.params_mut().iter().map(|p| &**p).collect::<Vec<_>>());
    let (n_samples, latent) = (model.config.n_samples, model.config.latent_dim);
    for epoch in 1..=cfg.epochs {
        let lr = cfg.schedule.lr(epoch - 1)?;
        let order = epoch_order(&dataset.train_indices, cfg.seed, 0x5f, epoch);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let frozen = &*model;
            let results: Vec<(f64, VaeGrads)> = batch
                .par_iter()
                .map(|&id| {
                    let eps = surface_eps(cfg.seed, id, epoch, n_samples, latent);
                    frozen.surface_loss_grad(dataset.surfaces[id].as_slice(), &eps)
                })
                .collect::<Result<_>>()
                .map_err(|e| diverged(e, epoch))?;
            let mut total = model.empty_grads();
            for (loss, g) in &results {
                if !loss.is_finite() {
                    return Err(Error::Divergence { epoch });
                }
                loss_sum += loss;
                total.add_assign(g)?;
            }
            total.scale(1.0 / batch.len() as f64);
            model.zero_grad();
            model.accumulate(&total)?;
            adam_step_layers(&mut model.params_mut(), &mut adam, lr)?;
        }
        let test_loss = model.vae_loss(&test, cfg.seed, epoch).map_err(|e| diverged(e, epoch))?;
        let train_loss = loss_sum / order.len() as f64;
        if !(train_loss.is_finite() && test_loss.is_finite()) {
            return Err(Error::Divergence { epoch });
        }
        log.rows.push(LogRow { epoch, train_loss, test_loss, lr });
    }
    Ok(log)
}

/// Pearson correlation of `mu` across `stats`; unit diagonal, zero where a
/// coordinate is constant.
pub fn latent_correlation(stats: &[LatentStats]) -> Vec<Vec<f64>> {
    let d = stats.first().map_or(0, |s| s.mu.len());
    let n = stats.len() as f64;
    let means: Vec<f64> = (0..d).map(|i| stats.iter().map(|s| s.mu[i]).sum::<f64>() / n).collect();
    let cov = |i: usize, j: usize| stats.iter().map(|s| (s.mu[i] - means[i]) * (s.mu[j] - means[j])).sum::<f64>();
    let var: Vec<f64> = (0..d).map(|i| cov(i, i)).collect();
    let mut out = vec![vec![0.0; d]; d];
    for i in 0..d {
        out[i][i] = 1.0;
        for j in (i + 1)..d {
            let denom = (var[i] * var[j]).sqrt();
            let c = if denom > 0.0 { cov(i, j) / denom } else { 0.0 };
            out[i][j] = c;
            out[j][i] = c;
        }
    }
    out
}

/// `surface_id,mu_0..,logvar_0..` rows.
pub fn write_latents_csv<W: Write>(writer: W, latents: &[(usize, LatentStats)]) -> Result<()> {
    let mut w = std::io::BufWriter::new(writer);
    let d = latents.first().map_or(0, |(_, s)| s.mu.len());
    let mut header = vec!["surface_id".to_string()];
    header.extend((0..d).map(|i| format!("mu_{i}")));
    header.extend((0..d).map(|i| format!("logvar_{i}")));
    writeln!(w, "{}", header.join(","))?;
    for (id, s) in latents {
        let fields: Vec<String> = s.mu.iter().chain(&s.log_var).map(|x| x.to_string()).collect();
        writeln!(w, "{id},{}", fields.join(","))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_data::VolSurface;
    use crate::nn::{finite_difference, relative_error};
    use chrono::NaiveDate;

    fn date() -> NaiveDate {
        NaiveDate::from_ymd_opt(2022, 3, 1).unwrap()
    }

    fn surface() -> VolSurface {
        VolSurface::from_fn(date(), |k, t| 0.2 + 0.2 * k * k - 0.05 * k + 0.03 * t).unwrap()
    }

    #[test]
    fn shape_trace() {
        let sh = VaeConfig::default().validate().unwrap();
        assert_eq!(sh.conv1, (21, 10));
        assert_eq!(sh.conv2, (11, 5));
        assert_eq!(sh.flat, 1760);
        let m = VaeModel::new(VaeConfig::default(), 1).unwrap();
        let stats = m.encode(&surface()).unwrap();
        assert_eq!((stats.mu.len(), stats.log_var.len()), (10, 10));
        assert_eq!(m.decode(&stats.mu).unwrap().shape(), &[41, 20]);
    }

    #[test]
    fn reparameterize_cases() {
        let s = LatentStats { mu: vec![0.5, -1.0], log_var: vec![0.0, 0.0] };
        assert_eq!(reparameterize(&s, &[0.0, 0.0]), s.mu);
        let unit = LatentStats { mu: vec![0.0; 3], log_var: vec![0.0; 3] };
        assert_eq!(reparameterize(&unit, &[1.0; 3]), vec![1.0; 3]);
        let floor = LatentStats { mu: vec![0.3], log_var: vec![f64::NEG_INFINITY] };
        let z = reparameterize(&floor, &[2.0]);
        assert!((z[0] - 0.3).abs() <= 2.0 * (0.5 * LOG_VAR_MIN).exp() + 1e-15);
    }

    #[test]
    fn zero_eps_reconstruction_is_decoded_mean() {
        let m = VaeModel::new(VaeConfig::default(), 5).unwrap();
        let s = surface();
        let r = m.reconstruct_with_eps(s.as_slice(), &[vec![0.0; 10]]).unwrap();
        assert_eq!(r, m.decode(&m.encode(&s).unwrap().mu).unwrap());
    }

    #[test]
    fn zero_decoder_loss_on_flat_surface() {
        let mut m = VaeModel::new(VaeConfig::default(), 2).unwrap();
        for p in m.decoder.params_mut() {
            p.weight.fill(0.0);
            p.bias.fill(0.0);
        }
        let flat = VolSurface::flat(date(), 0.2).unwrap();
        let loss = m.vae_loss(&[(0, &flat), (1, &flat)], 1, 0).unwrap();
        assert!((loss - 0.04).abs() < 1e-15);
    }

    #[test]
    fn loss_is_batch_order_invariant() {
        let m = VaeModel::new(VaeConfig::default(), 3).unwrap();
        let (a, b) = (surface(), VolSurface::flat(date(), 0.3).unwrap());
        let x = m.vae_loss(&[(0, &a), (1, &b)], 4, 2).unwrap();
        let y = m.vae_loss(&[(1, &b), (0, &a)], 4, 2).unwrap();
        assert!((x - y).abs() < 1e-15);
    }

    fn tiny_config(kl_beta: f64) -> VaeConfig {
        VaeConfig {
            height: 4,
            width: 4,
            channels: [2, 3],
            latent_dim: 2,
            n_samples: 3,
            kl_beta,
            input_shift: 0.2,
            input_scale: 0.5,
        }
    }

    #[test]
    fn tiny_model_gradient_matches_finite_differences() {
        for (seed, beta) in [(1u64, 0.0), (2, 0.3)] {
            let model = VaeModel::new(tiny_config(beta), seed).unwrap();
            let vols: Vec<f64> = (0..16).map(|i| 0.15 + 0.01 * i as f64).collect();
            let eps = surface_eps(seed, 0, 0, 3, 2);
            let (_, grads) = model.surface_loss_grad(&vols, &eps).unwrap();
            let analytic = grads.flatten();
            let mut params: Vec<f64> = Vec::new();
            let mut probe = model.clone();
            for p in probe.params_mut() {
                params.extend(p.weight.data());
                params.extend(p.bias.data());
            }
            let set = |m: &mut VaeModel, values: &[f64]| {
                let mut it = values.iter();
                for p in m.params_mut() {
                    p.weight.data_mut().iter_mut().chain(p.bias.data_mut()).for_each(|x| *x = *it.next().unwrap());
                }
            };
            let mut state = (probe, params);
            let numeric = finite_difference(
                &mut state,
                |s| s.1.as_mut_slice(),
                |s| {
                    let mut m = s.0.clone();
                    set(&mut m, &s.1);
                    m.surface_loss(&vols, &eps).unwrap()
                },
                1e-6,
            );
            let err = relative_error(&analytic, &numeric);
            assert!(err < 1e-5, "seed {seed}: {err}");
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let m = VaeModel::new(tiny_config(0.0), 7).unwrap();
        let mut buf = Vec::new();
        m.save(&mut buf).unwrap();
        let back = VaeModel::load(buf.as_slice(), tiny_config(0.0)).unwrap();
        assert_eq!(back, m);
        assert!(VaeModel::load(buf.as_slice(), VaeConfig::default()).is_err());
    }

    #[test]
    fn correlation_is_symmetric_unit_diagonal() {
        let stats: Vec<LatentStats> = (0..20)
            .map(|i| {
                let x = i as f64;
                LatentStats { mu: vec![x, (x * 0.7).sin(), 2.0], log_var: vec![0.0; 3] }
            })
            .collect();
        let c = latent_correlation(&stats);
        for i in 0..3 {
            assert_eq!(c[i][i], 1.0);
            for j in 0..3 {
                assert_eq!(c[i][j], c[j][i]);
            }
        }
        assert_eq!(c[0][2], 0.0);
    }
}
