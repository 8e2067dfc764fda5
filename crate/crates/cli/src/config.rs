//! Run configuration: one TOML file with a section per pipeline stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use surfnet::market_data::{K_MAX, K_MIN, N_K, N_T, T_MAX, T_MIN};
use surfnet::nn::CosineSchedule;
use surfnet::oracle::{McConfig, OracleConfig};
use surfnet::pricer::InstrumentKind;
use surfnet::vae::{TrainConfig, VaeConfig};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub grid: Grid,
    pub data: Data,
    pub vae: VaeSection,
    pub mlp: MlpSection,
    pub oracle: OracleSection,
    pub records: Records,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub model_dir: PathBuf,
    pub output_dir: PathBuf,
}

/// Must match the compiled grid; kept in the file so a run records it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub n_k: usize,
    pub n_t: usize,
    pub k_min: f64,
    pub k_max: f64,
    pub t_min: f64,
    pub t_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Data {
    pub n_synthetic: usize,
    pub train_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeSection {
    pub latent_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub n_samples: usize,
    pub kl_beta: f64,
    pub input_shift: f64,
    pub input_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSection {
    pub epochs: usize,
    pub fine_tune_epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub fine_tune_lr_max: f64,
    pub fine_tune_lr_min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    pub rate: f64,
    pub n_steps: usize,
    pub n_paths: usize,
    pub n_observations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub train: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Records {
    pub american_put: Split,
    pub asian_call: Split,
    pub asian_put: Split,
}

impl Records {
    pub fn get(&self, kind: InstrumentKind) -> Split {
        match kind {
            InstrumentKind::AmericanPut => self.american_put,
            InstrumentKind::AsianCall => self.asian_call,
            InstrumentKind::AsianPut => self.asian_put,
        }
    }
}

impl RunConfig {
    /// Laptop-scale profile: 200 synthetic surfaces, 300 VAE epochs,
    /// 2,000/500 records per instrument, 100 MLP and 25 fine-tune epochs.
    pub fn desk() -> Self {
        Self {
            seed: 42,
            paths: Paths {
                data_dir: "run/data".into(),
                model_dir: "run/models".into(),
                output_dir: "run/output".into(),
            },
            grid: Grid { n_k: N_K, n_t: N_T, k_min: K_MIN, k_max: K_MAX, t_min: T_MIN, t_max: T_MAX },
            data: Data { n_synthetic: 200, train_fraction: 0.8 },
            vae: VaeSection {
                latent_dim: 10,
                epochs: 300,
                batch_size: 32,
                lr_max: 1e-3,
                lr_min: 1e-5,
                n_samples: 10,
                kl_beta: 0.0,
                input_shift: 0.0,
                input_scale: 1.0,
            },
            mlp: MlpSection {
                epochs: 100,
                fine_tune_epochs: 25,
                batch_size: 32,
                lr_max: 1e-3,
                lr_min: 1e-5,
                fine_tune_lr_max: 2e-4,
                fine_tune_lr_min: 1e-6,
            },
            oracle: OracleSection { rate: 0.02, n_steps: 800, n_paths: 20_000, n_observations: 50 },
            records: Records {
                american_put: Split { train: 2000, test: 500 },
                asian_call: Split { train: 2000, test: 500 },
                asian_put: Split { train: 2000, test: 500 },
            },
        }
    }

    /// Full-size profile: 1051 surfaces, 3,000/150/50 epochs, 20,000/4,000
    /// American and 10,000/2,000 Asian records.
    pub fn paper() -> Self {
        let mut c = Self::desk();
        c.paths = Paths {
            data_dir: "paper-run/data".into(),
            model_dir: "paper-run/models".into(),
            output_dir: "paper-run/output".into(),
        };
        c.data.n_synthetic = 1051;
        c.vae.epochs = 3000;
        c.mlp.epochs = 150;
        c.mlp.fine_tune_epochs = 50;
        c.oracle.n_paths = 100_000;
        c.records = Records {
            american_put: Split { train: 20_000, test: 4_000 },
            asian_call: Split { train: 10_000, test: 2_000 },
            asian_put: Split { train: 10_000, test: 2_000 },
        };
        c
    }

    pub fn from_toml(text: &str) -> CliResult<Self> {
        let c: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Reads `path`; relative directories resolve against the file's folder.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut c = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for dir in [&mut c.paths.data_dir, &mut c.paths.model_dir, &mut c.paths.output_dir] {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
        Ok(c)
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        let g = &self.grid;
        if (g.n_k, g.n_t) != (N_K, N_T) || (g.k_min, g.k_max, g.t_min, g.t_max) != (K_MIN, K_MAX, T_MIN, T_MAX) {
            return bad(format!(
                "grid must be {N_K}x{N_T} over k in [{K_MIN}, {K_MAX}], T in [{T_MIN}, {T_MAX}]"
            ));
        }
        if self.vae.latent_dim == 0 {
            return bad("vae.latent_dim must be >= 1".into());
        }
        if self.vae.batch_size == 0 || self.mlp.batch_size == 0 || self.vae.n_samples == 0 {
            return bad("batch sizes and vae.n_samples must be >= 1".into());
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return bad(format!("data.train_fraction {} outside (0, 1)", self.data.train_fraction));
        }
        for (name, hi, lo) in [
            ("vae", self.vae.lr_max, self.vae.lr_min),
            ("mlp", self.mlp.lr_max, self.mlp.lr_min),
            ("mlp.fine_tune", self.mlp.fine_tune_lr_max, self.mlp.fine_tune_lr_min),
        ] {
            if !(hi > 0.0 && lo >= 0.0 && lo <= hi && hi.is_finite()) {
                return bad(format!("{name} learning rates need 0 <= lr_min <= lr_max, got {lo} and {hi}"));
            }
        }
        self.vae_config().validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.mc_config().validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.oracle.n_steps == 0 || !self.oracle.rate.is_finite() {
            return bad("oracle.n_steps must be >= 1 and oracle.rate finite".into());
        }
        Ok(())
    }

    pub fn vae_config(&self) -> VaeConfig {
        VaeConfig {
            latent_dim: self.vae.latent_dim,
            n_samples: self.vae.n_samples,
            kl_beta: self.vae.kl_beta,
            input_shift: self.vae.input_shift,
            input_scale: self.vae.input_scale,
            ..VaeConfig::default()
        }
    }

    pub fn vae_train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.vae.epochs,
            batch_size: self.vae.batch_size,
            schedule: CosineSchedule::new(self.vae.lr_max, self.vae.lr_min, self.vae.epochs),
            seed: self.seed,
        }
    }

    pub fn mlp_train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.mlp.epochs,
            batch_size: self.mlp.batch_size,
            schedule: CosineSchedule::new(self.mlp.lr_max, self.mlp.lr_min, self.mlp.epochs),
            seed: self.seed,
        }
    }

    pub fn fine_tune_train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.mlp.fine_tune_epochs,
            batch_size: self.mlp.batch_size,
            schedule: CosineSchedule::new(self.mlp.fine_tune_lr_max, self.mlp.fine_tune_lr_min, self.mlp.fine_tune_epochs),
            seed: self.seed,
        }
    }

    pub fn mc_config(&self) -> McConfig {
        McConfig {
            n_paths: self.oracle.n_paths,
            n_observations: self.oracle.n_observations,
            seed: self.seed,
            antithetic: true,
        }
    }

    pub fn oracle_config(&self) -> OracleConfig {
        OracleConfig { rate: self.oracle.rate, lattice_steps: self.oracle.n_steps, mc: self.mc_config() }
    }
}
