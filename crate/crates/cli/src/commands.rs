use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::Context;
use sha2::{Digest, Sha256};

use ffs_core::datakit::{self, FeatureRecord};
use ffs_core::evalkit::{self, calibrate_threshold};
use ffs_core::numerics::SeededRng;
use ffs_core::synthesis::{
    estimate_delta, projection_sample, rejection_sample, OutlierBatch, Provenance, SynthesisConfig, SynthesisMode,
};
use ffs_core::trainer::{self, TrainState, Trainer};

use crate::config::{config_err, RunConfig};

pub const RESOLVED: &str = "config.resolved";
pub const CHECKPOINT: &str = "checkpoint.ffsc";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn hash_file(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

pub fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    let cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Reads a feature file; `.bin` selects the binary format, anything else CSV.
pub fn read_records(path: &Path) -> anyhow::Result<Vec<FeatureRecord>> {
    let records = if path.extension().is_some_and(|e| e == "bin") {
        datakit::read_bin(path)
    } else {
        datakit::read_csv(path)
    };
    records.with_context(|| format!("reading records from {}", path.display()))
}

fn load_state(path: &Path) -> anyhow::Result<TrainState> {
    trainer::load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn create_dir(out: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Writes `config.resolved`: the settings, then one `# sha256 <name> = <hex>`
/// comment per input file.
fn echo(out: &Path, settings: &str, inputs: &[(&str, &Path)]) -> anyhow::Result<()> {
    let mut text = settings.to_string();
    for (name, path) in inputs {
        writeln!(text, "# sha256 {name} {} = {}", path.display(), hash_file(path)?).expect("string write");
    }
    write(&out.join(RESOLVED), text)
}

pub fn gen_data(spec: Option<&Path>, out: &Path) -> anyhow::Result<()> {
    let cfg = load_config(spec)?;
    let ds = datakit::generate(&cfg.data)?;
    create_dir(out)?;
    let mut settings = cfg.to_text();
    for (name, records) in [("train", &ds.train), ("val", &ds.val), ("ood", &ds.ood)] {
        let csv = out.join(format!("{name}.csv"));
        let bin = out.join(format!("{name}.bin"));
        datakit::write_csv(records, &csv).with_context(|| format!("writing {}", csv.display()))?;
        datakit::write_bin(records, &bin).with_context(|| format!("writing {}", bin.display()))?;
        writeln!(settings, "# {name}: {} records", records.len()).expect("string write");
    }
    echo(out, &settings, &[])
}

pub fn train(config: Option<&Path>, out: &Path, train_file: Option<&Path>) -> anyhow::Result<()> {
    let cfg = load_config(config)?;
    let records = match train_file {
        Some(p) => read_records(p)?,
        None => datakit::generate(&cfg.data)?.train,
    };
    let mut trainer = Trainer::new(cfg.train, &records, cfg.data.classes)?;
    trainer.run()?;
    let state = trainer.into_state();
    create_dir(out)?;
    trainer::save_checkpoint(&state, out.join(CHECKPOINT))?;
    write(&out.join("history.csv"), trainer::history_csv(&state.history))?;
    let mut settings = cfg.to_text();
    match train_file {
        Some(p) => echo(out, &settings, &[("train", p)]),
        None => {
            let bytes = datakit::to_bin_bytes(&records)?;
            writeln!(settings, "# sha256 train (generated, binary encoding) = {}", sha256_hex(&bytes)).expect("string write");
            echo(out, &settings, &[])
        }
    }
}

fn inlier_energies(state: &TrainState, records: &[FeatureRecord]) -> anyhow::Result<Vec<f64>> {
    let k = state.heads.classes();
    records.iter().filter(|r| r.is_inlier(k)).map(|r| Ok(state.heads.energy_of(&r.feature)?)).collect()
}

pub fn calibrate(checkpoint: &Path, val: &Path, out: &Path) -> anyhow::Result<()> {
    let state = load_state(checkpoint)?;
    let records = read_records(val)?;
    let energies = inlier_energies(&state, &records)?;
    let t = calibrate_threshold(&energies)?;
    create_dir(out)?;
    let json = serde_json::json!({ "threshold": t.xi, "degenerate_threshold": t.degenerate, "n_id": energies.len() });
    write(&out.join("threshold.json"), serde_json::to_string_pretty(&json)?)?;
    echo(out, "command = calibrate\n", &[("checkpoint", checkpoint), ("val", val)])
}

pub fn eval(checkpoint: &Path, val: &Path, ood: &Path, out: &Path) -> anyhow::Result<()> {
    let state = load_state(checkpoint)?;
    let metrics = evalkit::evaluate(&state.heads, &read_records(val)?, &read_records(ood)?)?;
    create_dir(out)?;
    write(&out.join("metrics.json"), metrics.to_json())?;
    echo(out, "command = eval\n", &[("checkpoint", checkpoint), ("val", val), ("ood", ood)])
}

fn samples_csv(batch: &OutlierBatch) -> String {
    let d = batch.features.first().map_or(0, Vec::len);
    let mut out = String::from("log_lik");
    for i in 0..d {
        write!(out, ",f{i}").expect("string write");
    }
    out.push('\n');
    for (x, ll) in batch.features.iter().zip(&batch.log_liks) {
        write!(out, "{ll:?}").expect("string write");
        for v in x {
            write!(out, ",{v:?}").expect("string write");
        }
        out.push('\n');
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn sample(
    checkpoint: &Path,
    mode: &str,
    k: usize,
    s: usize,
    tau: f64,
    max_steps: usize,
    seed: u64,
    val: Option<&Path>,
    out: &Path,
) -> anyhow::Result<()> {
    let mode: SynthesisMode = mode.parse().map_err(config_err)?;
    let cfg = SynthesisConfig { mode, k, s, tau, max_steps, ..SynthesisConfig::default() };
    cfg.validate().map_err(|e| config_err(e.to_string()))?;
    if mode == SynthesisMode::Projection && val.is_none() {
        return Err(config_err("projection sampling needs --val to estimate delta"));
    }
    let state = load_state(checkpoint)?;
    let mut rng = SeededRng::new(seed);
    let batch = match mode {
        SynthesisMode::Rejection => rejection_sample(&state.flow, &cfg, &mut rng)?,
        SynthesisMode::Projection => {
            let val = val.expect("checked above");
            let k = state.heads.classes();
            let inliers: Vec<Vec<f64>> =
                read_records(val)?.into_iter().filter(|r| r.is_inlier(k)).map(|r| r.feature).collect();
            let delta = estimate_delta(&state.flow, &inliers)?;
            projection_sample(&state.flow, &cfg, delta, &mut rng)?
        }
    };
    create_dir(out)?;
    write(&out.join("samples.csv"), samples_csv(&batch))?;
    let settings = format!(
        "command = sample\nmode = {}\nk = {k}\ns = {s}\ntau = {tau:?}\nmax_steps = {max_steps}\nseed = {seed}\n",
        mode.name()
    );
    let mut inputs = vec![("checkpoint", checkpoint)];
    if let Some(v) = val {
        inputs.push(("val", v));
    }
    echo(out, &settings, &inputs)
}

/// Rejection-sampling settings shared by the export commands.
#[derive(clap::Args, Debug, Clone)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    pub k: usize,
    #[arg(long, default_value_t = 1)]
    pub s: usize,
    /// Number of sampling calls whose outliers are pooled.
    #[arg(long, default_value_t = 100)]
    pub batches: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl SynthArgs {
    fn settings(&self) -> String {
        format!("k = {}\ns = {}\nbatches = {}\nseed = {}\n", self.k, self.s, self.batches, self.seed)
    }

    fn pooled(&self, state: &TrainState) -> anyhow::Result<OutlierBatch> {
        let cfg = SynthesisConfig { k: self.k, s: self.s, ..SynthesisConfig::default() };
        cfg.validate().map_err(|e| config_err(e.to_string()))?;
        if self.batches == 0 {
            return Err(config_err("batches must be at least 1"));
        }
        let mut rng = SeededRng::new(self.seed);
        let mut pooled = OutlierBatch {
            features: Vec::new(),
            log_liks: Vec::new(),
            latents: None,
            provenance: Provenance::Rejection { k: self.k, s: self.s },
        };
        for _ in 0..self.batches {
            let b = rejection_sample(&state.flow, &cfg, &mut rng)?;
            pooled.features.extend(b.features);
            pooled.log_liks.extend(b.log_liks);
        }
        Ok(pooled)
    }
}

pub fn export_hist(checkpoint: &Path, val: &Path, bins: usize, synth: &SynthArgs, out: &Path) -> anyhow::Result<()> {
    if bins == 0 {
        return Err(config_err("bins must be at least 1"));
    }
    let state = load_state(checkpoint)?;
    let outliers = synth.pooled(&state)?;
    let records = read_records(val)?;
    let k = state.heads.classes();
    let id: Vec<Vec<f64>> = records.iter().filter(|r| r.is_inlier(k)).map(|r| r.feature.clone()).collect();
    let bg: Vec<Vec<f64>> = records.iter().filter(|r| r.label == k as i32).map(|r| r.feature.clone()).collect();
    create_dir(out)?;
    evalkit::export_histograms(&state.flow, &id, &bg, &outliers, bins, out.join("hist.csv"))?;
    echo(out, &format!("command = export-hist\nbins = {bins}\n{}", synth.settings()), &[("checkpoint", checkpoint), ("val", val)])
}

pub fn export_pca(checkpoint: &Path, val: &Path, synth: &SynthArgs, out: &Path) -> anyhow::Result<()> {
    let state = load_state(checkpoint)?;
    let outliers = synth.pooled(&state)?;
    let k = state.heads.classes();
    let id: Vec<FeatureRecord> = read_records(val)?.into_iter().filter(|r| r.is_inlier(k)).collect();
    create_dir(out)?;
    evalkit::export_pca(&id, &outliers, out.join("pca.csv"))?;
    echo(out, &format!("command = export-pca\n{}", synth.settings()), &[("checkpoint", checkpoint), ("val", val)])
}
