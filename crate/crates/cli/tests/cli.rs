//! End-to-end runs of the `surfnet` binary on a tiny configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use surfnet::market_data::{read_chain_csv, read_grid_csv, write_chain_csv, OptionRight};
use surfnet::pricer::{mlp_price, InstrumentKind, PricerModel};
use surfnet::vae::VaeModel;
use surfnet_cli::RunConfig;

const TINY: &str = r#"
seed = 7

[paths]
data_dir = "data"
model_dir = "models"
output_dir = "output"

[grid]
n_k = 41
n_t = 20
k_min = -0.3
k_max = 0.3
t_min = 0.05
t_max = 1.0

[data]
n_synthetic = 12
train_fraction = 0.75

[vae]
latent_dim = 10
epochs = 2
batch_size = 4
lr_max = 1e-3
lr_min = 1e-5
n_samples = 2
kl_beta = 0.0
input_shift = 0.0
input_scale = 1.0

[mlp]
epochs = 3
fine_tune_epochs = 2
batch_size = 16
lr_max = 1e-3
lr_min = 1e-5
fine_tune_lr_max = 2e-4
fine_tune_lr_min = 1e-6

[oracle]
rate = 0.02
n_steps = 60
n_paths = 1000
n_observations = 12

[records.american_put]
train = 40
test = 15

[records.asian_call]
train = 40
test = 15

[records.asian_put]
train = 40
test = 15
"#;

struct Run {
    dir: tempfile::TempDir,
}

impl Run {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("run.toml"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn config(&self) -> RunConfig {
        RunConfig::load(&self.path("run.toml")).unwrap()
    }

    fn cmd(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_surfnet"))
            .arg("--config")
            .arg(self.path("run.toml"))
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.cmd(args);
        assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

fn line_count(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn stages_refuse_to_run_out_of_order() {
    let run = Run::new();
    let out = run.cmd(&["svd"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("split.csv"));

    run.ok(&["build-surfaces", "--synthetic", "12"]);
    let out = run.cmd(&["train", "mlp", "--kind", "american-put"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("vae.bin"));
    let out = run.cmd(&["evaluate", "--kind", "asian-call"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn bad_config_is_a_configuration_error() {
    let run = Run::new();
    fs::write(run.path("bad.toml"), TINY.replace("latent_dim = 10", "latent_dim = 0")).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_surfnet"))
        .arg("--config")
        .arg(run.path("bad.toml"))
        .arg("svd")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn full_pipeline_file_contracts() {
    let run = Run::new();
    let cfg = run.config();
    let report = run.ok(&["build-surfaces", "--synthetic", "12"]);
    assert!(report.contains("built 12 surfaces, excluded 0"), "{report}");
    let surfaces = files(&run.path("data/surfaces"));
    assert_eq!(surfaces.len(), 12);
    assert!(surfaces[0].to_string_lossy().ends_with("2018-01-01.surface.csv"));
    assert_eq!(line_count(&run.path("data/arbitrage_report.csv")), 1);
    let before: Vec<Vec<u8>> = surfaces.iter().map(|p| fs::read(p).unwrap()).collect();
    run.ok(&["build-surfaces", "--synthetic", "12"]);
    let after: Vec<Vec<u8>> = files(&run.path("data/surfaces")).iter().map(|p| fs::read(p).unwrap()).collect();
    assert_eq!(before, after);

    run.ok(&["svd"]);
    assert_eq!(files(&run.path("output/modes")).len(), 8);
    let spectrum = fs::read_to_string(run.path("output/spectrum.csv")).unwrap();
    let sv: Vec<f64> = spectrum.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(sv.len(), 12);
    assert!(sv.windows(2).all(|w| w[0] >= w[1]));
    assert_eq!(read_grid_csv(fs::File::open(run.path("output/modes/mode_0.csv")).map(std::io::BufReader::new).unwrap()).unwrap().len(), 820);

    run.ok(&["gen-prices"]);
    for kind in InstrumentKind::ALL {
        assert_eq!(line_count(&run.path(&format!("data/prices/{kind}_train.csv"))), 41);
        assert_eq!(line_count(&run.path(&format!("data/prices/{kind}_test.csv"))), 16);
    }

    run.ok(&["train", "vae"]);
    assert_eq!(line_count(&run.path("output/logs/vae.csv")), 1 + cfg.vae.epochs + 1);
    assert_eq!(line_count(&run.path("output/latents.csv")), 13);
    assert_eq!(files(&run.path("output/reconstructions")).len(), 9);

    run.ok(&["train", "mlp"]);
    let vae_bytes = fs::read(run.path("models/vae.bin")).unwrap();
    run.ok(&["train", "mlp", "--kind", "asian-put"]);
    assert_eq!(fs::read(run.path("models/vae.bin")).unwrap(), vae_bytes, "stage 2 must not touch the encoder");
    assert_eq!(line_count(&run.path("output/logs/mlp_asian_put.csv")), 1 + cfg.mlp.epochs + 1);

    // Without fine-tuned models evaluation falls back to stage 2.
    let stage2 = run.ok(&["evaluate", "--kind", "american-put"]);
    assert!(stage2.contains("american_put: n=15"), "{stage2}");
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.path("output/eval/american_put_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["stage"], "mlp");

    run.ok(&["train", "finetune"]);
    assert_eq!(line_count(&run.path("output/logs/finetune_asian_call.csv")), 1 + cfg.mlp.fine_tune_epochs + 1);
    assert_eq!(fs::read(run.path("models/vae.bin")).unwrap(), vae_bytes);
    run.ok(&["evaluate"]);
    for kind in InstrumentKind::ALL {
        assert_eq!(line_count(&run.path(&format!("output/eval/{kind}.csv"))), 16);
        let summary: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(run.path(&format!("output/eval/{kind}_summary.json"))).unwrap()).unwrap();
        assert_eq!(summary["stage"], "fine_tune");
        let r2 = summary["r2"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&r2));
    }

    // predict / spot is the MLP output at the encoded surface.
    let surface = &files(&run.path("data/surfaces"))[3];
    let out = run.ok(&["predict", "--kind", "asian-call", "--surface", surface.to_str().unwrap(), "--k", "-0.1", "--t", "0.5", "--spot", "250"]);
    let price: f64 = out.trim().parse().unwrap();
    let vae = VaeModel::load(fs::File::open(run.path("models/finetune_asian_call_vae.bin")).unwrap(), cfg.vae_config()).unwrap();
    let pricer = PricerModel::load(fs::File::open(run.path("models/finetune_asian_call_mlp.bin")).unwrap()).unwrap();
    let vols = read_grid_csv(std::io::BufReader::new(fs::File::open(surface).unwrap())).unwrap();
    let mu = vae.encode_values(&vols).unwrap().mu;
    let expected = 250.0 * mlp_price(&pricer, &mu, -0.1, 0.5).unwrap();
    assert!((price - expected).abs() <= 1e-9 * expected.abs().max(1.0), "{price} vs {expected}");

    let out = run.cmd(&["predict", "--kind", "asian-call", "--surface", surface.to_str().unwrap(), "--k", "0.5", "--t", "0.5"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn chain_pipeline_excludes_a_date_with_a_crossed_quote() {
    let run = Run::new();
    run.ok(&["synth", "--n", "4"]);
    let chain_path = run.path("data/chains/synthetic_chains.csv");
    let chains = read_chain_csv(fs::File::open(&chain_path).unwrap()).unwrap();
    let mut quotes: Vec<_> = chains.values().flatten().cloned().collect();
    let bad_date = *chains.keys().nth(2).unwrap();
    // A put quoted above its strike admits no volatility.
    let q = quotes.iter_mut().find(|q| q.quote_date == bad_date && q.right == OptionRight::Put).unwrap();
    q.mid_price = q.strike * 1.5;
    let mut buf = Vec::new();
    write_chain_csv(&mut buf, &quotes).unwrap();
    fs::write(&chain_path, buf).unwrap();

    let report = run.ok(&["build-surfaces"]);
    assert!(report.contains("built 3 surfaces, excluded 1"), "{report}");
    let listed = fs::read_to_string(run.path("data/arbitrage_report.csv")).unwrap();
    assert!(listed.contains(&bad_date.format("%Y-%m-%d").to_string()), "{listed}");
    assert_eq!(files(&run.path("data/surfaces")).len(), 3);

    fs::write(run.path("data/chains/broken.csv"), "quote_date,spot,rate,strike,expiry_years,right,mid_price\n2020-01-01,100,0.01,oops,0.5,C,1.0\n").unwrap();
    let out = run.cmd(&["build-surfaces"]);
    assert_eq!(out.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn record_csvs_round_trip_through_the_cli_layout() {
    let run = Run::new();
    run.ok(&["build-surfaces", "--synthetic", "12"]);
    run.ok(&["gen-prices", "--kind", "asian-put"]);
    let text = fs::read_to_string(run.path("data/prices/asian_put_test.csv")).unwrap();
    assert!(text.starts_with("surface_id,kind,k,T,rate,price\n"));
    let recs = surfnet::pricer::read_records_csv(text.as_bytes()).unwrap();
    let split = fs::read_to_string(run.path("data/split.csv")).unwrap();
    let test_ids: Vec<usize> = split
        .lines()
        .skip(1)
        .filter(|l| l.ends_with(",test"))
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert!(recs.iter().all(|r| test_ids.contains(&r.surface_id) && r.kind == InstrumentKind::AsianPut));
    assert!(!run.path("data/prices/american_put_test.csv").exists());
}
