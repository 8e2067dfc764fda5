//! The latent-space pricer: an MLP from encoder means plus `(k, T)` to a
//! spot-normalized option price.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::market_data::{SurfaceDataset, VolSurface};
use crate::nn::{
    adam_step_layers, read_tensors, write_tensors, AdamState, GradSet, Layer, LayerParams, Sequential, Tape, Tensor,
    LEAKY_SLOPE,
};
use crate::oracle::check_domain;
use crate::rng;
use crate::vae::{check_train_config, diverged, epoch_order, LogRow, TrainConfig, TrainingLog, VaeGrads, VaeModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum InstrumentKind {
    AmericanPut,
    AsianCall,
    AsianPut,
}

impl InstrumentKind {
    pub const ALL: [InstrumentKind; 3] = [Self::AmericanPut, Self::AsianCall, Self::AsianPut];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::AmericanPut => "american_put",
            Self::AsianCall => "asian_call",
            Self::AsianPut => "asian_put",
        }
    }

    pub(crate) fn code(self) -> u64 {
        match self {
            Self::AmericanPut => 1,
            Self::AsianCall => 2,
            Self::AsianPut => 3,
        }
    }

    /// Static upper bound on the normalized price at log-strike `k`.
    pub fn price_upper_bound(self, k: f64) -> f64 {
        match self {
            Self::AmericanPut => k.exp(),
            Self::AsianCall | Self::AsianPut => 1.0 + k.exp(),
        }
    }
}

impl fmt::Display for InstrumentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InstrumentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Domain(format!("unknown instrument kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriceRecord {
    /// Index into the surface dataset.
    pub surface_id: usize,
    pub kind: InstrumentKind,
    pub k: f64,
    pub t: f64,
    pub rate: f64,
    pub price: f64,
}

impl PriceRecord {
    pub fn validate(&self) -> Result<()> {
        check_domain(self.k, self.t)?;
        let hi = self.kind.price_upper_bound(self.k);
        if !(0.0..=hi).contains(&self.price) {
            return Err(Error::Domain(format!("price {} outside [0, {hi}] for {}", self.price, self.kind)));
        }
        Ok(())
    }
}

const RECORD_HEADER: [&str; 6] = ["surface_id", "kind", "k", "T", "rate", "price"];

pub fn write_records_csv<W: Write>(writer: W, records: &[PriceRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(writer);
    writeln!(w, "{}", RECORD_HEADER.join(","))?;
    for r in records {
        writeln!(w, "{},{},{},{},{},{}", r.surface_id, r.kind, r.k, r.t, r.rate, r.price)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_csv<R: Read>(reader: R) -> Result<Vec<PriceRecord>> {
    let parse_err = |line: u64, message: String| Error::Parse { line, message };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if headers.iter().ne(RECORD_HEADER.iter().copied()) {
        return Err(parse_err(1, format!("expected header `{}`", RECORD_HEADER.join(","))));
    }
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| parse_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        let num = |i: usize| -> Result<f64> {
            record[i]
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| parse_err(line, format!("column `{}`: invalid number `{}`", RECORD_HEADER[i], &record[i])))
        };
        let rec = PriceRecord {
            surface_id: record[0]
                .parse()
                .map_err(|_| parse_err(line, format!("invalid surface_id `{}`", &record[0])))?,
            kind: record[1].parse().map_err(|e: Error| parse_err(line, e.to_string()))?,
            k: num(2)?,
            t: num(3)?,
            rate: num(4)?,
            price: num(5)?,
        };
        rec.validate().map_err(|e| parse_err(line, e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

/// Hidden widths of the pricing MLP.
pub const HIDDEN: [usize; 3] = [64, 64, 32];

/// `[mu, k, T]` → price, with leaky-ReLU hidden layers and a linear output.
/// Inputs are standardized by fixed per-feature moments.
#[derive(Debug, Clone, PartialEq)]
pub struct PricerModel {
    pub net: Sequential,
    pub latent_dim: usize,
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
}

/// One training example in latent form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentSample<'a> {
    pub latent: &'a [f64],
    pub k: f64,
    pub t: f64,
    pub price: f64,
}

impl PricerModel {
    pub fn new(latent_dim: usize, seed: u64) -> Result<Self> {
        if latent_dim == 0 {
            return Err(Error::Domain("pricer needs a positive latent dimension".into()));
        }
        let mut r = rng::stream(seed, &[0x31c]);
        let widths = [latent_dim + 2, HIDDEN[0], HIDDEN[1], HIDDEN[2], 1];
        let names = ["mlp.fc1", "mlp.fc2", "mlp.fc3", "mlp.out"];
        let mut layers = Vec::new();
        for (i, name) in names.iter().enumerate() {
            let (n_in, n_out) = (widths[i], widths[i + 1]);
            layers.push(Layer::Dense {
                name: (*name).into(),
                params: LayerParams::glorot(&[n_out, n_in], n_in, n_out, n_out, &mut r),
            });
            if i + 1 < names.len() {
                layers.push(Layer::LeakyRelu { slope: LEAKY_SLOPE });
            }
        }
        Ok(Self {
            net: Sequential::new(layers),
            latent_dim,
            input_mean: vec![0.0; latent_dim + 2],
            input_std: vec![1.0; latent_dim + 2],
        })
    }

    pub fn input_dim(&self) -> usize {
        self.latent_dim + 2
    }

    /// Sets the input moments from the given samples; near-constant features
    /// keep unit scale.
    pub fn fit_standardization(&mut self, samples: &[LatentSample<'_>]) {
        if samples.is_empty() {
            return;
        }
        let n = samples.len() as f64;
        let d = self.input_dim();
        let feature = |s: &LatentSample<'_>, i: usize| if i < self.latent_dim { s.latent[i] } else if i == self.latent_dim { s.k } else { s.t };
        let mean: Vec<f64> = (0..d).map(|i| samples.iter().map(|s| feature(s, i)).sum::<f64>() / n).collect();
        let std: Vec<f64> = (0..d)
            .map(|i| {
                let v = samples.iter().map(|s| (feature(s, i) - mean[i]).powi(2)).sum::<f64>() / n;
                if v.sqrt() > 1e-12 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        self.input_mean = mean;
        self.input_std = std;
    }

    /// Standardized MLP input `[latent, k, T]`.
    pub fn features(&self, latent: &[f64], k: f64, t: f64) -> Result<Tensor> {
        if latent.len() != self.latent_dim {
            return Err(Error::Shape(format!("pricer expects {} latents, got {}", self.latent_dim, latent.len())));
        }
        let raw = latent.iter().copied().chain([k, t]);
        let x = raw.zip(self.input_mean.iter().zip(&self.input_std)).map(|(x, (m, s))| (x - m) / s).collect();
        Ok(Tensor::from_vec(x))
    }

    /// Squared error of one sample, MLP gradients and the gradient with
    /// respect to the latent input.
    fn sample_grad(&self, sample: &LatentSample<'_>) -> Result<(f64, GradSet, Vec<f64>)> {
        let mut tape = Tape::new();
        let out = self.net.forward_recorded(&self.features(sample.latent, sample.k, sample.t)?, &mut tape)?;
        let diff = out.data()[0] - sample.price;
        let mut grads = self.net.empty_grads();
        let g_in = self.net.backward(&tape, &Tensor::from_vec(vec![2.0 * diff]), &mut grads)?;
        let d_latent = g_in.data()[..self.latent_dim].iter().zip(&self.input_std).map(|(g, s)| g / s).collect();
        Ok((diff * diff, grads, d_latent))
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        let mean = Tensor::from_vec(self.input_mean.clone());
        let std = Tensor::from_vec(self.input_std.clone());
        let mut all = self.net.named_tensors("");
        all.push(("mlp.input_mean".into(), &mean));
        all.push(("mlp.input_std".into(), &std));
        write_tensors(w, &all)
    }

    /// Loads a pricer saved by [`PricerModel::save`]; the latent dimension
    /// is read from the first layer.
    pub fn load<R: Read>(r: R) -> Result<Self> {
        let mut tensors: HashMap<String, Tensor> = read_tensors(r)?.into_iter().collect();
        let n_in = match tensors.get("mlp.fc1.weight").map(|t| t.shape().to_vec()).as_deref() {
            Some(&[_, n]) if n > 2 => n,
            _ => return Err(Error::Format("pricer file lacks a valid `mlp.fc1.weight`".into())),
        };
        let mut model = Self::new(n_in - 2, 0)?;
        model.net.load_named("", &mut tensors)?;
        for (key, slot) in [("mlp.input_mean", &mut model.input_mean), ("mlp.input_std", &mut model.input_std)] {
            let t = tensors.remove(key).ok_or_else(|| Error::Format(format!("pricer file lacks `{key}`")))?;
            if t.len() != n_in {
                return Err(Error::Format(format!("`{key}` has {} values, expected {n_in}", t.len())));
            }
            *slot = t.into_data();
        }
        if let Some(extra) = tensors.keys().min() {
            return Err(Error::Format(format!("unexpected tensor `{extra}` in pricer file")));
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.save(&mut buf).expect("writing to memory");
        buf
    }
}

/// Normalized price for latent mean `latent_mu` at `(k, T)`.
pub fn mlp_price(model: &PricerModel, latent_mu: &[f64], k: f64, t: f64) -> Result<f64> {
    if !(k.is_finite() && t.is_finite()) {
        return Err(Error::Numeric { layer: "mlp input".into() });
    }
    Ok(model.net.forward(&model.features(latent_mu, k, t)?)?.data()[0])
}

/// Mean squared pricing error over `batch`.
pub fn mlp_loss(model: &PricerModel, batch: &[LatentSample<'_>]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Domain("mlp_loss of an empty batch".into()));
    }
    let errs: Vec<f64> = batch
        .iter()
        .map(|s| mlp_price(model, s.latent, s.k, s.t).map(|p| (p - s.price).powi(2)))
        .collect::<Result<_>>()?;
    Ok(errs.iter().sum::<f64>() / batch.len() as f64)
}

fn check_records(dataset: &SurfaceDataset, records: &[PriceRecord]) -> Result<()> {
    match records.iter().find(|r| r.surface_id >= dataset.len()) {
        Some(r) => Err(Error::Domain(format!(
            "record references surface {} of a {}-surface dataset",
            r.surface_id,
            dataset.len()
        ))),
        None => Ok(()),
    }
}

/// Encoder means of every surface referenced by `records`.
fn encode_referenced(vae: &VaeModel, dataset: &SurfaceDataset, records: &[&[PriceRecord]]) -> Result<BTreeMap<usize, Vec<f64>>> {
    let ids: Vec<usize> = records
        .iter()
        .flat_map(|rs| rs.iter().map(|r| r.surface_id))
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mus: Vec<Vec<f64>> = ids
        .par_iter()
        .map(|&id| vae.encode(&dataset.surfaces[id]).map(|s| s.mu))
        .collect::<Result<_>>()?;
    Ok(ids.into_iter().zip(mus).collect())
}

fn samples<'a>(records: &[PriceRecord], mus: &'a BTreeMap<usize, Vec<f64>>) -> Vec<LatentSample<'a>> {
    records
        .iter()
        .map(|r| LatentSample { latent: &mus[&r.surface_id], k: r.k, t: r.t, price: r.price })
        .collect()
}

fn full_losses(
    vae: &VaeModel,
    pricer: &PricerModel,
    dataset: &SurfaceDataset,
    train: &[PriceRecord],
    test: &[PriceRecord],
) -> Result<(f64, f64)> {
    let mus = encode_referenced(vae, dataset, &[train, test])?;
    let test_loss = if test.is_empty() { f64::NAN } else { mlp_loss(pricer, &samples(test, &mus))? };
    Ok((mlp_loss(pricer, &samples(train, &mus))?, test_loss))
}

fn push_row(log: &mut TrainingLog, epoch: usize, (train_loss, test_loss): (f64, f64), lr: f64) -> Result<()> {
    if !train_loss.is_finite() {
        return Err(Error::Divergence { epoch });
    }
    log.rows.push(LogRow { epoch, train_loss, test_loss, lr });
    Ok(())
}

/// Stage 2: trains the MLP on frozen encoder means. Input moments are refit
/// from the training records first. Losses are full passes after each epoch.
pub fn train_mlp(
    pricer: &mut PricerModel,
    vae: &VaeModel,
    dataset: &SurfaceDataset,
    train: &[PriceRecord],
    test: &[PriceRecord],
    cfg: &TrainConfig,
) -> Result<TrainingLog> {
    check_train_config(cfg)?;
    let mut log = TrainingLog::default();
    if cfg.epochs == 0 {
        return Ok(log);
    }
    if train.is_empty() {
        return Err(Error::Domain("train_mlp needs training records".into()));
    }
    if pricer.latent_dim != vae.config.latent_dim {
        return Err(Error::Shape(format!(
            "pricer takes {} latents, VAE produces {}",
            pricer.latent_dim, vae.config.latent_dim
        )));
    }
    check_records(dataset, train)?;
    check_records(dataset, test)?;
    let mus = encode_referenced(vae, dataset, &[train, test])?;
    let train_samples = samples(train, &mus);
    let test_samples = samples(test, &mus);
    pricer.fit_standardization(&train_samples);
    let eval = |p: &PricerModel| -> Result<(f64, f64)> {
        let te = if test_samples.is_empty() { f64::NAN } else { mlp_loss(p, &test_samples)? };
        Ok((mlp_loss(p, &train_samples)?, te))
    };
    push_row(&mut log, 0, eval(pricer)?, cfg.schedule.lr(0)?)?;
    let mut adam = AdamState::for_layers(&pricer.net.params());
    let ids: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let lr = cfg.schedule.lr(epoch - 1)?;
        for batch in epoch_order(&ids, cfg.seed, 0x31, epoch).chunks(cfg.batch_size) {
            let frozen = &*pricer;
            let results: Vec<(f64, GradSet, Vec<f64>)> = batch
                .par_iter()
                .map(|&i| frozen.sample_grad(&train_samples[i]))
                .collect::<Result<_>>()
                .map_err(|e| diverged(e, epoch))?;
            let mut total = pricer.net.empty_grads();
            for (_, g, _) in &results {
                total.add_assign(g)?;
            }
            total.scale(1.0 / batch.len() as f64);
            pricer.net.zero_grad();
            pricer.net.accumulate(&total)?;
            adam_step_layers(&mut pricer.net.params_mut(), &mut adam, lr)?;
        }
        push_row(&mut log, epoch, eval(pricer).map_err(|e| diverged(e, epoch))?, lr)?;
    }
    Ok(log)
}

/// Loss and gradients of one batch through encoder and MLP, records grouped
/// by surface so each surface is encoded once. `surface` maps a record's
/// `surface_id` to its vol values.
pub fn fine_tune_batch_grad<'a>(
    vae: &VaeModel,
    pricer: &PricerModel,
    surface: impl Fn(usize) -> &'a [f64] + Sync,
    batch: &[PriceRecord],
) -> Result<(f64, VaeGrads, GradSet)> {
    let mut groups: BTreeMap<usize, Vec<&PriceRecord>> = BTreeMap::new();
    for r in batch {
        groups.entry(r.surface_id).or_default().push(r);
    }
    let groups: Vec<(usize, Vec<&PriceRecord>)> = groups.into_iter().collect();
    let parts: Vec<(f64, VaeGrads, GradSet)> = groups
        .par_iter()
        .map(|(id, recs)| {
            let input = vae.input_tensor(surface(*id))?;
            let (stats, tape) = vae.encode_recorded(&input)?;
            let mut mlp_grads = pricer.net.empty_grads();
            let mut d_mu = vec![0.0; stats.mu.len()];
            let mut loss = 0.0;
            for r in recs {
                let sample = LatentSample { latent: &stats.mu, k: r.k, t: r.t, price: r.price };
                let (l, g, d) = pricer.sample_grad(&sample)?;
                loss += l;
                mlp_grads.add_assign(&g)?;
                d_mu.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
            }
            let mut vae_grads = vae.empty_grads();
            vae.encoder_backward(&tape, &d_mu, None, &mut vae_grads)?;
            Ok((loss, vae_grads, mlp_grads))
        })
        .collect::<Result<_>>()?;
    let mut loss = 0.0;
    let mut vae_grads = vae.empty_grads();
    let mut mlp_grads = pricer.net.empty_grads();
    for (l, v, m) in &parts {
        loss += l;
        vae_grads.add_assign(v)?;
        mlp_grads.add_assign(m)?;
    }
    let scale = 1.0 / batch.len() as f64;
    vae_grads.scale(scale);
    mlp_grads.scale(scale);
    Ok((loss * scale, vae_grads, mlp_grads))
}

/// Stage 3: trains encoder (trunk and mean head) and MLP together under the
/// pricing loss. The decoder and log-variance head are not updated.
pub fn fine_tune(
    vae: &mut VaeModel,
    pricer: &mut PricerModel,
    dataset: &SurfaceDataset,
    train: &[PriceRecord],
    test: &[PriceRecord],
    cfg: &TrainConfig,
) -> Result<TrainingLog> {
    check_train_config(cfg)?;
    let mut log = TrainingLog::default();
    if cfg.epochs == 0 {
        return Ok(log);
    }
    if train.is_empty() {
        return Err(Error::Domain("fine_tune needs training records".into()));
    }
    check_records(dataset, train)?;
    check_records(dataset, test)?;
    push_row(&mut log, 0, full_losses(vae, pricer, dataset, train, test)?, cfg.schedule.lr(0)?)?;
    let shapes: Vec<&LayerParams> = vae.encoder.params().into_iter().chain(vae.mu_head.params()).chain(pricer.net.params()).collect();
    let mut adam = AdamState::for_layers(&shapes);
    let ids: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let lr = cfg.schedule.lr(epoch - 1)?;
        for batch in epoch_order(&ids, cfg.seed, 0xf7, epoch).chunks(cfg.batch_size) {
            let records: Vec<PriceRecord> = batch.iter().map(|&i| train[i]).collect();
            let (_, vae_grads, mlp_grads) =
                fine_tune_batch_grad(vae, pricer, |id| dataset.surfaces[id].as_slice(), &records).map_err(|e| diverged(e, epoch))?;
            vae.zero_grad();
            pricer.net.zero_grad();
            vae.encoder.accumulate(&vae_grads.encoder)?;
            vae.mu_head.accumulate(&vae_grads.mu)?;
            pricer.net.accumulate(&mlp_grads)?;
            let mut params: Vec<&mut LayerParams> = vae.encoder.params_mut();
            params.extend(vae.mu_head.params_mut());
            params.extend(pricer.net.params_mut());
            adam_step_layers(&mut params, &mut adam, lr)?;
        }
        let losses = full_losses(vae, pricer, dataset, train, test).map_err(|e| diverged(e, epoch))?;
        push_row(&mut log, epoch, losses, lr)?;
    }
    Ok(log)
}

/// Currency price `spot · mlp_price(mu, ln(K / spot), T)` from one encoder
/// pass and one MLP pass.
pub fn predict_price(vae: &VaeModel, pricer: &PricerModel, surface: &VolSurface, strike: f64, t: f64, spot: f64) -> Result<f64> {
    Ok(predict_prices(vae, pricer, surface, &[(strike, t)], spot)?[0])
}

/// [`predict_price`] for many `(strike, T)` pairs on one surface.
pub fn predict_prices(
    vae: &VaeModel,
    pricer: &PricerModel,
    surface: &VolSurface,
    queries: &[(f64, f64)],
    spot: f64,
) -> Result<Vec<f64>> {
    if !(spot > 0.0 && spot.is_finite()) {
        return Err(Error::Domain(format!("spot must be positive, got {spot}")));
    }
    let mu = vae.encode(surface)?.mu;
    queries
        .iter()
        .map(|&(strike, t)| {
            if !(strike > 0.0) {
                return Err(Error::Domain(format!("strike must be positive, got {strike}")));
            }
            let k = (strike / spot).ln();
            check_domain(k, t)?;
            Ok(spot * mlp_price(pricer, &mu, k, t)?)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRow {
    pub kind: InstrumentKind,
    pub k: f64,
    pub t: f64,
    pub oracle_price: f64,
    pub predicted_price: f64,
    /// `predicted − oracle`.
    pub err: f64,
}

pub fn evaluate_records(vae: &VaeModel, pricer: &PricerModel, dataset: &SurfaceDataset, records: &[PriceRecord]) -> Result<Vec<EvalRow>> {
    check_records(dataset, records)?;
    let mus = encode_referenced(vae, dataset, &[records])?;
    records
        .iter()
        .map(|r| {
            let predicted_price = mlp_price(pricer, &mus[&r.surface_id], r.k, r.t)?;
            Ok(EvalRow { kind: r.kind, k: r.k, t: r.t, oracle_price: r.price, predicted_price, err: predicted_price - r.price })
        })
        .collect()
}

pub fn write_eval_csv<W: Write>(writer: W, rows: &[EvalRow]) -> Result<()> {
    let mut w = std::io::BufWriter::new(writer);
    writeln!(w, "kind,k,T,oracle_price,predicted_price,err")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{},{}", r.kind, r.k, r.t, r.oracle_price, r.predicted_price, r.err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub n: usize,
    pub mae: f64,
    pub rmse: f64,
    pub r2: f64,
    /// Signed mean of `predicted − oracle`.
    pub mean_error: f64,
    pub max_abs_error: f64,
    pub worst_k: f64,
    pub worst_t: f64,
}

pub fn summarize(rows: &[EvalRow]) -> Result<EvalSummary> {
    if rows.is_empty() {
        return Err(Error::Domain("cannot summarize an empty evaluation".into()));
    }
    let n = rows.len() as f64;
    let mean_price = rows.iter().map(|r| r.oracle_price).sum::<f64>() / n;
    let ss_tot: f64 = rows.iter().map(|r| (r.oracle_price - mean_price).powi(2)).sum();
    let ss_res: f64 = rows.iter().map(|r| r.err * r.err).sum();
    let worst = rows.iter().max_by(|a, b| a.err.abs().total_cmp(&b.err.abs())).expect("non-empty");
    Ok(EvalSummary {
        n: rows.len(),
        mae: rows.iter().map(|r| r.err.abs()).sum::<f64>() / n,
        rmse: (ss_res / n).sqrt(),
        r2: if ss_tot > 0.0 { (1.0 - ss_res / ss_tot).clamp(0.0, 1.0) } else { f64::NAN },
        mean_error: rows.iter().map(|r| r.err).sum::<f64>() / n,
        max_abs_error: worst.err.abs(),
        worst_k: worst.k,
        worst_t: worst.t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{finite_difference, relative_error, CosineSchedule};
    use crate::vae::VaeConfig;

    fn mu() -> Vec<f64> {
        (0..10).map(|i| 0.1 * i as f64 - 0.4).collect()
    }

    #[test]
    fn kind_names_roundtrip() {
        for k in InstrumentKind::ALL {
            assert_eq!(k.as_str().parse::<InstrumentKind>().unwrap(), k);
        }
        assert!("bermudan".parse::<InstrumentKind>().is_err());
    }

    #[test]
    fn deterministic_and_zero_weight_gives_bias() {
        let mut m = PricerModel::new(10, 3).unwrap();
        assert_eq!(m.input_dim(), 12);
        let a = mlp_price(&m, &mu(), 0.1, 0.5).unwrap();
        assert_eq!(a, mlp_price(&m, &mu(), 0.1, 0.5).unwrap());
        for p in m.net.params_mut() {
            p.weight.fill(0.0);
        }
        m.net.params_mut().last_mut().unwrap().bias.fill(0.042);
        assert_eq!(mlp_price(&m, &mu(), -0.2, 0.9).unwrap(), 0.042);
    }

    #[test]
    fn loss_cases() {
        let mut m = PricerModel::new(10, 1).unwrap();
        for p in m.net.params_mut() {
            p.weight.fill(0.0);
            p.bias.fill(0.0);
        }
        let c = 0.3;
        m.net.params_mut().last_mut().unwrap().bias.fill(c);
        let l = mu();
        let batch = [
            LatentSample { latent: &l, k: 0.0, t: 0.5, price: 0.0 },
            LatentSample { latent: &l, k: 0.1, t: 0.2, price: 2.0 * c },
        ];
        assert!((mlp_loss(&m, &batch).unwrap() - c * c).abs() < 1e-15);
        let swapped = [batch[1], batch[0]];
        assert_eq!(mlp_loss(&m, &batch).unwrap(), mlp_loss(&m, &swapped).unwrap());
        let perfect = [LatentSample { latent: &l, k: 0.0, t: 0.5, price: c }];
        assert_eq!(mlp_loss(&m, &perfect).unwrap(), 0.0);
        assert!(mlp_loss(&m, &[]).is_err());
    }

    fn tiny_vae(seed: u64) -> VaeModel {
        let cfg = VaeConfig {
            height: 4,
            width: 4,
            channels: [2, 3],
            latent_dim: 2,
            n_samples: 2,
            kl_beta: 0.0,
            input_shift: 0.2,
            input_scale: 0.5,
        };
        VaeModel::new(cfg, seed).unwrap()
    }

    #[test]
    fn fine_tune_path_gradient_matches_finite_differences() {
        let vae = tiny_vae(4);
        let mut pricer = PricerModel::new(2, 5).unwrap();
        pricer.input_mean = vec![0.1, -0.1, 0.0, 0.5];
        pricer.input_std = vec![0.5, 2.0, 0.2, 0.3];
        let surfaces: Vec<Vec<f64>> = (0..3).map(|s| (0..16).map(|i| 0.15 + 0.01 * (i + 3 * s) as f64).collect()).collect();
        let batch: Vec<PriceRecord> = [(0, 0.1, 0.3), (2, -0.2, 0.8), (0, 0.0, 0.5), (1, 0.25, 0.1)]
            .iter()
            .map(|&(surface_id, k, t)| PriceRecord { surface_id, kind: InstrumentKind::AsianCall, k, t, rate: 0.0, price: 0.05 })
            .collect();
        let lookup = |id: usize| surfaces[id].as_slice();
        let (_, vg, mg) = fine_tune_batch_grad(&vae, &pricer, lookup, &batch).unwrap();
        let mut analytic = vg.encoder.flatten();
        analytic.extend(vg.mu.flatten());
        analytic.extend(mg.flatten());
        assert!(vg.decoder.flatten().iter().all(|&g| g == 0.0));
        assert!(vg.log_var.flatten().iter().all(|&g| g == 0.0));

        let flat = |v: &VaeModel, p: &PricerModel| -> Vec<f64> {
            v.encoder.params().into_iter().chain(v.mu_head.params()).chain(p.net.params())
                .flat_map(|l| l.weight.data().iter().chain(l.bias.data()).copied().collect::<Vec<_>>())
                .collect()
        };
        let mut state = (flat(&vae, &pricer), vae.clone(), pricer.clone());
        let numeric = finite_difference(
            &mut state,
            |s| s.0.as_mut_slice(),
            |s| {
                let (mut v, mut p) = (s.1.clone(), s.2.clone());
                let mut it = s.0.iter();
                let layers = v.encoder.params_mut().into_iter().chain(v.mu_head.params_mut()).chain(p.net.params_mut());
                for l in layers {
                    l.weight.data_mut().iter_mut().chain(l.bias.data_mut()).for_each(|x| *x = *it.next().unwrap());
                }
                fine_tune_batch_grad(&v, &p, lookup, &batch).unwrap().0
            },
            1e-6,
        );
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn save_load_roundtrip() {
        let mut m = PricerModel::new(10, 9).unwrap();
        m.input_mean[3] = 0.7;
        let back = PricerModel::load(m.to_bytes().as_slice()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn records_csv_roundtrip() {
        let recs = vec![
            PriceRecord { surface_id: 3, kind: InstrumentKind::AmericanPut, k: -0.1234567891234, t: 0.5, rate: 0.02, price: 0.0312345 },
            PriceRecord { surface_id: 0, kind: InstrumentKind::AsianPut, k: 0.3, t: 1.0, rate: 0.02, price: 0.0 },
        ];
        let mut buf = Vec::new();
        write_records_csv(&mut buf, &recs).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("surface_id,kind,k,T,rate,price\n"));
        assert_eq!(read_records_csv(buf.as_slice()).unwrap(), recs);
        let bad = "surface_id,kind,k,T,rate,price\n1,american_put,0.5,0.5,0.0,0.1\n";
        assert!(matches!(read_records_csv(bad.as_bytes()), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn record_bounds() {
        let r = PriceRecord { surface_id: 0, kind: InstrumentKind::AmericanPut, k: 0.0, t: 0.5, rate: 0.0, price: 1.2 };
        assert!(r.validate().is_err());
        assert!(PriceRecord { kind: InstrumentKind::AsianCall, ..r }.validate().is_ok());
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let vae = VaeModel::new(VaeConfig::default(), 1).unwrap();
        let mut p = PricerModel::new(10, 1).unwrap();
        let before = p.clone();
        let ds = crate::synthetic::make_dataset(4, 1).unwrap();
        let cfg = TrainConfig { epochs: 0, batch_size: 32, schedule: CosineSchedule::new(1e-3, 1e-5, 0), seed: 1 };
        let log = train_mlp(&mut p, &vae, &ds, &[], &[], &cfg).unwrap();
        assert!(log.rows.is_empty());
        assert_eq!(p, before);
    }

    #[test]
    fn summary_statistics() {
        let row = |o: f64, p: f64| EvalRow { kind: InstrumentKind::AsianCall, k: o, t: 0.5, oracle_price: o, predicted_price: p, err: p - o };
        let s = summarize(&[row(0.1, 0.12), row(0.2, 0.19), row(0.3, 0.3)]).unwrap();
        assert!((s.mae - 0.01).abs() < 1e-12);
        assert!((s.mean_error - 0.01 / 3.0).abs() < 1e-12);
        assert!((s.max_abs_error - 0.02).abs() < 1e-12 && s.worst_k == 0.1);
        assert!((s.r2 - (1.0 - 0.0005 / 0.02)).abs() < 1e-12);
    }
}
