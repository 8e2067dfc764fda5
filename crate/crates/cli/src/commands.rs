//! Pipeline stages. Each reads its inputs from and writes its outputs to the
//! directories named in the run configuration, so stages can run in separate
//! processes.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::Serialize;
use surfnet::market_data::{
    bs_price, build_surface, check_arbitrage, read_chain_csv, split_dataset, write_chain_csv, write_grid_csv, OptionQuote,
    OptionRight, SurfaceDataset, VolSurface, K_MAX, K_MIN,
};
use surfnet::oracle::{generate_price_dataset, surface_vol_at};
use surfnet::pricer::{
    evaluate_records, fine_tune, predict_price, read_records_csv, summarize, train_mlp, write_eval_csv, write_records_csv,
    EvalSummary, InstrumentKind, PriceRecord, PricerModel,
};
use surfnet::surface_analysis::{compute_svd, explained_spectrum, SpectrumRow, SurfaceMatrix};
use surfnet::synthetic::make_surfaces;
use surfnet::vae::{latent_correlation, train_vae, surface_eps, TrainingLog, VaeModel};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

/// Number of singular-vector grids written by [`svd`].
pub const DEFAULT_MODES: usize = 8;
/// Test surfaces dumped as original/reconstructed/difference grids.
pub const RECONSTRUCTION_DUMPS: usize = 3;

/// Every file location the pipeline reads or writes.
#[derive(Debug, Clone)]
pub struct Layout {
    pub data: PathBuf,
    pub models: PathBuf,
    pub output: PathBuf,
}

impl Layout {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            data: cfg.paths.data_dir.clone(),
            models: cfg.paths.model_dir.clone(),
            output: cfg.paths.output_dir.clone(),
        }
    }

    pub fn chains_dir(&self) -> PathBuf {
        self.data.join("chains")
    }
    pub fn surfaces_dir(&self) -> PathBuf {
        self.data.join("surfaces")
    }
    pub fn split_file(&self) -> PathBuf {
        self.data.join("split.csv")
    }
    pub fn arbitrage_report(&self) -> PathBuf {
        self.data.join("arbitrage_report.csv")
    }
    pub fn records_file(&self, kind: InstrumentKind, split: &str) -> PathBuf {
        self.data.join("prices").join(format!("{kind}_{split}.csv"))
    }
    pub fn vae_model(&self) -> PathBuf {
        self.models.join("vae.bin")
    }
    pub fn mlp_model(&self, kind: InstrumentKind) -> PathBuf {
        self.models.join(format!("mlp_{kind}.bin"))
    }
    pub fn fine_tuned_vae(&self, kind: InstrumentKind) -> PathBuf {
        self.models.join(format!("finetune_{kind}_vae.bin"))
    }
    pub fn fine_tuned_mlp(&self, kind: InstrumentKind) -> PathBuf {
        self.models.join(format!("finetune_{kind}_mlp.bin"))
    }
    pub fn log_file(&self, name: &str) -> PathBuf {
        self.output.join("logs").join(format!("{name}.csv"))
    }
    pub fn eval_file(&self, kind: InstrumentKind) -> PathBuf {
        self.output.join("eval").join(format!("{kind}.csv"))
    }
    pub fn summary_file(&self, kind: InstrumentKind) -> PathBuf {
        self.output.join("eval").join(format!("{kind}_summary.json"))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn file_err(path: &Path) -> impl FnOnce(surfnet::Error) -> CliError + '_ {
    move |source| CliError::File { path: path.to_path_buf(), source }
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> surfnet::Result<()>) -> CliResult<()> {
    let mut w = create(path)?;
    f(&mut w).map_err(file_err(path))?;
    w.flush().map_err(io_err(path))
}

fn require(path: &Path, hint: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Missing { path: path.to_path_buf(), hint: hint.into() })
    }
}

fn open(path: &Path, hint: &str) -> CliResult<BufReader<File>> {
    require(path, hint)?;
    File::open(path).map(BufReader::new).map_err(io_err(path))
}

fn date_str(d: NaiveDate) -> String {
    d.format("%Y-%m-%d").to_string()
}

/// `<date>.surface.csv`.
pub fn surface_file_name(d: NaiveDate) -> String {
    format!("{}.surface.csv", date_str(d))
}

/// Where `build_surfaces` takes its surfaces from.
#[derive(Debug, Clone)]
pub enum SurfaceSource {
    Synthetic(usize),
    Chains(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildReport {
    pub n_surfaces: usize,
    /// `(date, reason)` for every excluded quote date.
    pub excluded: Vec<(NaiveDate, String)>,
}

/// Builds (or generates) one surface per date, drops dates that fail the
/// static-arbitrage checks, splits the rest and writes surfaces, split and
/// exclusion report.
pub fn build_surfaces(cfg: &RunConfig, source: &SurfaceSource) -> CliResult<BuildReport> {
    let layout = Layout::new(cfg);
    let mut excluded = Vec::new();
    let candidates: Vec<VolSurface> = match source {
        SurfaceSource::Synthetic(n) => make_surfaces(*n, cfg.seed)?,
        SurfaceSource::Chains(dir) => {
            let mut by_date: BTreeMap<NaiveDate, Vec<OptionQuote>> = BTreeMap::new();
            let mut files: Vec<PathBuf> = fs::read_dir(dir)
                .map_err(io_err(dir))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "csv"))
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(CliError::Missing { path: dir.clone(), hint: "no chain CSV files found".into() });
            }
            for path in &files {
                let chains = read_chain_csv(File::open(path).map_err(io_err(path))?).map_err(file_err(path))?;
                for (date, quotes) in chains {
                    by_date.entry(date).or_default().extend(quotes);
                }
            }
            let mut built = Vec::new();
            for (date, quotes) in &by_date {
                match build_surface(quotes, *date) {
                    Ok(s) => built.push(s),
                    Err(e) => excluded.push((*date, format!("build failed: {e}"))),
                }
            }
            built
        }
    };
    let mut surfaces = Vec::new();
    for s in candidates {
        let report = check_arbitrage(&s);
        if report.is_arbitrage_free() {
            surfaces.push(s);
        } else {
            excluded.push((
                s.quote_date,
                format!("{} butterfly and {} calendar violations", report.butterfly.len(), report.calendar.len()),
            ));
        }
    }
    excluded.sort_by_key(|(d, _)| *d);
    surfaces.sort_by_key(|s| s.quote_date);
    if surfaces.len() < 2 {
        return Err(surfnet::Error::Domain(format!("only {} usable surfaces; need at least 2", surfaces.len())).into());
    }
    let dataset = split_dataset(surfaces, cfg.data.train_fraction, cfg.seed)?;

    let dir = layout.surfaces_dir();
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
    }
    for s in &dataset.surfaces {
        let path = dir.join(surface_file_name(s.quote_date));
        write_with(&path, |w| s.write_csv(w))?;
    }
    let test: std::collections::BTreeSet<usize> = dataset.test_indices.iter().copied().collect();
    let split_path = layout.split_file();
    let mut w = create(&split_path)?;
    let mut text = String::from("surface_id,quote_date,split\n");
    for (i, s) in dataset.surfaces.iter().enumerate() {
        let split = if test.contains(&i) { "test" } else { "train" };
        text.push_str(&format!("{i},{},{split}\n", date_str(s.quote_date)));
    }
    w.write_all(text.as_bytes()).map_err(io_err(&split_path))?;
    w.flush().map_err(io_err(&split_path))?;

    let report_path = layout.arbitrage_report();
    let mut w = create(&report_path)?;
    let mut text = String::from("quote_date,reason\n");
    for (d, reason) in &excluded {
        text.push_str(&format!("{},\"{}\"\n", date_str(*d), reason.replace('"', "'")));
    }
    w.write_all(text.as_bytes()).map_err(io_err(&report_path))?;
    w.flush().map_err(io_err(&report_path))?;
    Ok(BuildReport { n_surfaces: dataset.len(), excluded })
}

/// Writes Black-Scholes option chains priced off `n` synthetic surfaces
/// (spot 100, 13 strikes per grid maturity, out-of-the-money side plus both
/// rights at the money) into `<data_dir>/chains`.
pub fn synth_chains(cfg: &RunConfig, n: usize) -> CliResult<usize> {
    let layout = Layout::new(cfg);
    let surfaces = make_surfaces(n, cfg.seed)?;
    let spot = 100.0;
    let mut quotes = Vec::new();
    for s in &surfaces {
        for &t in &s.t_axis() {
            for i in 0..=12 {
                let k = (K_MIN + (K_MAX - K_MIN) * i as f64 / 12.0).clamp(K_MIN, K_MAX);
                let vol = surface_vol_at(s, k, t)?;
                let strike = spot * k.exp();
                let rights: &[OptionRight] = match i {
                    6 => &[OptionRight::Put, OptionRight::Call],
                    i if i < 6 => &[OptionRight::Put],
                    _ => &[OptionRight::Call],
                };
                for &right in rights {
                    let mid_price = bs_price(spot, strike, cfg.oracle.rate, t, vol, right)?;
                    quotes.push(OptionQuote {
                        quote_date: s.quote_date,
                        spot,
                        strike,
                        expiry: t,
                        right,
                        mid_price,
                        rate: cfg.oracle.rate,
                    });
                }
            }
        }
    }
    let path = layout.chains_dir().join("synthetic_chains.csv");
    write_with(&path, |w| write_chain_csv(w, &quotes))?;
    Ok(quotes.len())
}

/// Reads the surfaces and split written by [`build_surfaces`].
pub fn load_dataset(cfg: &RunConfig) -> CliResult<SurfaceDataset> {
    let layout = Layout::new(cfg);
    let split_path = layout.split_file();
    let text = fs::read_to_string(&split_path).map_err(|_| CliError::Missing {
        path: split_path.clone(),
        hint: "run `build-surfaces` first".into(),
    })?;
    let parse = |line: usize, msg: String| CliError::File {
        path: split_path.clone(),
        source: surfnet::Error::Parse { line: line as u64, message: msg },
    };
    let mut surfaces = Vec::new();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (n, line) in text.lines().enumerate().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 3 {
            return Err(parse(n + 1, format!("expected 3 fields, found {}", cells.len())));
        }
        let id: usize = cells[0].parse().map_err(|_| parse(n + 1, format!("bad surface_id `{}`", cells[0])))?;
        if id != surfaces.len() {
            return Err(parse(n + 1, format!("surface ids must be consecutive, found {id}")));
        }
        let date = NaiveDate::parse_from_str(cells[1], "%Y-%m-%d").map_err(|e| parse(n + 1, e.to_string()))?;
        match cells[2] {
            "train" => train.push(id),
            "test" => test.push(id),
            other => return Err(parse(n + 1, format!("split must be train or test, found `{other}`"))),
        }
        let path = layout.surfaces_dir().join(surface_file_name(date));
        let reader = open(&path, "surface listed in split.csv is missing; rerun `build-surfaces`")?;
        surfaces.push(VolSurface::read_csv(reader, date).map_err(file_err(&path))?);
    }
    if surfaces.is_empty() {
        return Err(CliError::Missing { path: split_path, hint: "split lists no surfaces".into() });
    }
    Ok(SurfaceDataset { surfaces, train_indices: train, test_indices: test })
}

/// Full SVD of the surface matrix: `spectrum.csv` plus the leading
/// `n_modes` right singular vectors as grids.
pub fn svd(cfg: &RunConfig, n_modes: usize) -> CliResult<Vec<SpectrumRow>> {
    let layout = Layout::new(cfg);
    let dataset = load_dataset(cfg)?;
    let matrix = SurfaceMatrix::from_surfaces(&dataset.surfaces)?;
    let rank = matrix.n_surfaces.min(surfnet::surface_analysis::N_COLS);
    let result = compute_svd(&matrix, rank)?;
    let spectrum = explained_spectrum(&result);
    let path = layout.output.join("spectrum.csv");
    let mut text = String::from("rank,singular_value,cumulative_energy\n");
    for r in &spectrum {
        text.push_str(&format!("{},{},{}\n", r.rank, r.singular_value, r.cumulative_energy));
    }
    let mut w = create(&path)?;
    w.write_all(text.as_bytes()).map_err(io_err(&path))?;
    w.flush().map_err(io_err(&path))?;
    for i in 0..n_modes.min(rank) {
        let path = layout.output.join("modes").join(format!("mode_{i}.csv"));
        write_with(&path, |w| write_grid_csv(w, &result.right_vector(i)))?;
    }
    Ok(spectrum)
}

/// Oracle-priced train/test records for each kind.
pub fn gen_prices(cfg: &RunConfig, kinds: &[InstrumentKind]) -> CliResult<()> {
    let layout = Layout::new(cfg);
    let dataset = load_dataset(cfg)?;
    for &kind in kinds {
        let split = cfg.records.get(kind);
        let (train, test) = generate_price_dataset(&dataset, kind, split.train, split.test, cfg.seed, &cfg.oracle_config())?;
        write_with(&layout.records_file(kind, "train"), |w| write_records_csv(w, &train))?;
        write_with(&layout.records_file(kind, "test"), |w| write_records_csv(w, &test))?;
    }
    Ok(())
}

fn load_records(layout: &Layout, kind: InstrumentKind, split: &str) -> CliResult<Vec<PriceRecord>> {
    let path = layout.records_file(kind, split);
    let reader = open(&path, "run `gen-prices` first")?;
    read_records_csv(reader).map_err(file_err(&path))
}

fn load_vae(cfg: &RunConfig, path: &Path, hint: &str) -> CliResult<VaeModel> {
    VaeModel::load(open(path, hint)?, cfg.vae_config()).map_err(file_err(path))
}

fn load_pricer(path: &Path, hint: &str) -> CliResult<PricerModel> {
    PricerModel::load(open(path, hint)?).map_err(file_err(path))
}

/// Stage 1: trains the VAE and writes the model, loss log, latents, latent
/// correlations and reconstruction dumps.
pub fn train_vae_stage(cfg: &RunConfig) -> CliResult<TrainingLog> {
    let layout = Layout::new(cfg);
    let dataset = load_dataset(cfg)?;
    let mut model = VaeModel::new(cfg.vae_config(), cfg.seed)?;
    let log = train_vae(&mut model, &dataset, &cfg.vae_train())?;
    write_with(&layout.vae_model(), |w| model.save(w))?;
    write_with(&layout.log_file("vae"), |w| log.write_csv(w))?;

    let stats: Vec<_> = dataset.surfaces.iter().map(|s| model.encode(s)).collect::<surfnet::Result<_>>()?;
    let latents: Vec<_> = stats.iter().cloned().enumerate().collect();
    write_with(&layout.output.join("latents.csv"), |w| surfnet::vae::write_latents_csv(w, &latents))?;
    let train_stats: Vec<_> = dataset.train_indices.iter().map(|&i| stats[i].clone()).collect();
    let corr = latent_correlation(&train_stats);
    let mut text = String::new();
    for row in &corr {
        text.push_str(&row.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","));
        text.push('\n');
    }
    let path = layout.output.join("latent_correlation.csv");
    let mut w = create(&path)?;
    w.write_all(text.as_bytes()).map_err(io_err(&path))?;
    w.flush().map_err(io_err(&path))?;

    let n = cfg.vae.n_samples;
    for &id in dataset.test_indices.iter().take(RECONSTRUCTION_DUMPS) {
        let s = &dataset.surfaces[id];
        let eps = surface_eps(cfg.seed, id, cfg.vae.epochs + 1, n, cfg.vae.latent_dim);
        let recon = model.reconstruct_with_eps(s.as_slice(), &eps)?;
        let diff: Vec<f64> = recon.data().iter().zip(s.as_slice()).map(|(r, o)| r - o).collect();
        let dir = layout.output.join("reconstructions");
        let stem = date_str(s.quote_date);
        write_with(&dir.join(format!("{stem}_original.csv")), |w| s.write_csv(w))?;
        write_with(&dir.join(format!("{stem}_reconstructed.csv")), |w| write_grid_csv(w, recon.data()))?;
        write_with(&dir.join(format!("{stem}_difference.csv")), |w| write_grid_csv(w, &diff))?;
    }
    Ok(log)
}

/// Stage 2: trains the pricer for `kind` on the frozen stage-1 encoder.
pub fn train_mlp_stage(cfg: &RunConfig, kind: InstrumentKind) -> CliResult<TrainingLog> {
    let layout = Layout::new(cfg);
    let vae = load_vae(cfg, &layout.vae_model(), "run `train vae` first")?;
    let train = load_records(&layout, kind, "train")?;
    let test = load_records(&layout, kind, "test")?;
    let dataset = load_dataset(cfg)?;
    let mut pricer = PricerModel::new(cfg.vae.latent_dim, surfnet::rng::derive_seed(cfg.seed, &[kind_tag(kind)]))?;
    let log = train_mlp(&mut pricer, &vae, &dataset, &train, &test, &cfg.mlp_train())?;
    write_with(&layout.mlp_model(kind), |w| pricer.save(w))?;
    write_with(&layout.log_file(&format!("mlp_{kind}")), |w| log.write_csv(w))?;
    Ok(log)
}

fn kind_tag(kind: InstrumentKind) -> u64 {
    InstrumentKind::ALL.iter().position(|k| *k == kind).expect("known kind") as u64 + 1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReconstructionDrift {
    pub test_loss_before: f64,
    pub test_loss_after: f64,
}

/// Stage 3: fine-tunes a copy of the encoder together with the `kind`
/// pricer. Reports the VAE test reconstruction loss before and after.
pub fn fine_tune_stage(cfg: &RunConfig, kind: InstrumentKind) -> CliResult<(TrainingLog, ReconstructionDrift)> {
    let layout = Layout::new(cfg);
    let mut vae = load_vae(cfg, &layout.vae_model(), "run `train vae` first")?;
    let mut pricer = load_pricer(&layout.mlp_model(kind), &format!("run `train mlp --kind {kind}` first"))?;
    let train = load_records(&layout, kind, "train")?;
    let test = load_records(&layout, kind, "test")?;
    let dataset = load_dataset(cfg)?;
    let test_refs: Vec<(usize, &VolSurface)> = dataset.test_indices.iter().map(|&i| (i, &dataset.surfaces[i])).collect();
    let diag_epoch = cfg.vae.epochs + 1;
    let before = vae.vae_loss(&test_refs, cfg.seed, diag_epoch)?;
    let log = fine_tune(&mut vae, &mut pricer, &dataset, &train, &test, &cfg.fine_tune_train())?;
    let after = vae.vae_loss(&test_refs, cfg.seed, diag_epoch)?;
    write_with(&layout.fine_tuned_vae(kind), |w| vae.save(w))?;
    write_with(&layout.fine_tuned_mlp(kind), |w| pricer.save(w))?;
    write_with(&layout.log_file(&format!("finetune_{kind}")), |w| log.write_csv(w))?;
    let drift = ReconstructionDrift { test_loss_before: before, test_loss_after: after };
    let path = layout.output.join("logs").join(format!("finetune_{kind}_reconstruction.json"));
    let mut w = create(&path)?;
    w.write_all(serde_json::to_string_pretty(&drift).expect("serializable").as_bytes()).map_err(io_err(&path))?;
    w.flush().map_err(io_err(&path))?;
    Ok((log, drift))
}

/// Pricing stage used by evaluation and prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Mlp,
    FineTune,
}

/// The fine-tuned models when present, otherwise stage 2 with the stage-1
/// encoder.
pub fn load_pricing_models(cfg: &RunConfig, kind: InstrumentKind) -> CliResult<(VaeModel, PricerModel, Stage)> {
    let layout = Layout::new(cfg);
    if layout.fine_tuned_mlp(kind).is_file() {
        let vae = load_vae(cfg, &layout.fine_tuned_vae(kind), "fine-tuned encoder missing; rerun `train finetune`")?;
        let pricer = load_pricer(&layout.fine_tuned_mlp(kind), "")?;
        return Ok((vae, pricer, Stage::FineTune));
    }
    let vae = load_vae(cfg, &layout.vae_model(), "run `train vae` first")?;
    let pricer = load_pricer(&layout.mlp_model(kind), &format!("run `train mlp --kind {kind}` first"))?;
    Ok((vae, pricer, Stage::Mlp))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub kind: String,
    pub stage: Stage,
    pub n: usize,
    pub mae: f64,
    pub rmse: f64,
    pub r2: f64,
    pub mean_error: f64,
    pub max_abs_error: f64,
    pub worst_k: f64,
    pub worst_t: f64,
    pub train_mae: f64,
}

impl EvalReport {
    fn new(kind: InstrumentKind, stage: Stage, s: &EvalSummary, train_mae: f64) -> Self {
        Self {
            kind: kind.to_string(),
            stage,
            n: s.n,
            mae: s.mae,
            rmse: s.rmse,
            r2: s.r2,
            mean_error: s.mean_error,
            max_abs_error: s.max_abs_error,
            worst_k: s.worst_k,
            worst_t: s.worst_t,
            train_mae,
        }
    }
}

/// Oracle-versus-predicted comparison on the test records.
pub fn evaluate(cfg: &RunConfig, kind: InstrumentKind) -> CliResult<EvalReport> {
    let layout = Layout::new(cfg);
    let (vae, pricer, stage) = load_pricing_models(cfg, kind)?;
    let dataset = load_dataset(cfg)?;
    let test = load_records(&layout, kind, "test")?;
    let train = load_records(&layout, kind, "train")?;
    let rows = evaluate_records(&vae, &pricer, &dataset, &test)?;
    let summary = summarize(&rows)?;
    let train_mae = summarize(&evaluate_records(&vae, &pricer, &dataset, &train)?)?.mae;
    write_with(&layout.eval_file(kind), |w| write_eval_csv(w, &rows))?;
    let report = EvalReport::new(kind, stage, &summary, train_mae);
    let path = layout.summary_file(kind);
    let mut w = create(&path)?;
    w.write_all(serde_json::to_string_pretty(&report).expect("serializable").as_bytes()).map_err(io_err(&path))?;
    w.flush().map_err(io_err(&path))?;
    Ok(report)
}

/// Currency price of one option from a surface file.
pub fn predict(
    cfg: &RunConfig,
    kind: InstrumentKind,
    surface_path: &Path,
    k: f64,
    t: f64,
    spot: f64,
) -> CliResult<f64> {
    let (vae, pricer, _) = load_pricing_models(cfg, kind)?;
    let date = surface_path
        .file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| NaiveDate::parse_from_str(s.trim_end_matches(".surface"), "%Y-%m-%d").ok())
        .unwrap_or_default();
    let surface = VolSurface::read_csv(open(surface_path, "surface file not found")?, date).map_err(file_err(surface_path))?;
    Ok(predict_price(&vae, &pricer, &surface, spot * k.exp(), t, spot)?)
}
