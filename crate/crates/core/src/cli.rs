//! Command-line front end, run configuration and the on-disk recording
//! bundle format.
//!
//! A bundle is a directory holding `manifest.json`, `hypnogram.txt`, raw
//! signals (`.f32` little-endian or single-column `.csv`) and epoch features
//! under `features/<sensor>.csv`. `synth` writes a dataset directory with one
//! bundle per recording plus `split.json` and `world.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::dsp::{self, RawSignal};
use crate::error::{Error, Result};
use crate::evalkit::{bland_altman, evaluate_recording, Mask, MergeScheme, RecordingEval, StatReport};
use crate::experiment::{self, degradation_sweep, emit_plot_data, Suite, SweepConfig};
use crate::hypno::{argmax_stages, Hypnogram};
use crate::infogain::{information_gain, mean_information_gain, to_csv};
use crate::neural::{train, ArchConfig, ReferenceDenoiser, TrainConfig, TrainTarget};
use crate::oracle::WorldModel;
use crate::sampler::{infer, SamplerConfig};
use crate::sched::ScheduleParams;
use crate::scorekit::{Conditioning, FeatureMatrix, Lambda, SensorBank};
use crate::synth::{gen_dataset, Recording, SynthConfig, WaveformSpec};

#[derive(Debug, Parser)]
#[command(name = "fsdm", version, about = "Sleep-stage inference from arbitrary sensor subsets")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Sensors to condition on (default: every feature in the bundle).
    #[arg(long = "sensor")]
    pub sensors: Vec<String>,
    #[arg(long)]
    pub n_samples: Option<usize>,
    /// Likelihood weight, a number or `auto`.
    #[arg(long)]
    pub lambda: Option<Lambda>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset of recording bundles.
    Synth(Common),
    /// Train the global prior and per-sensor reference denoisers.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long = "sensor")]
        sensors: Vec<String>,
    },
    /// Sample hypnograms for one bundle.
    Sample {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        opts: SampleArgs,
    },
    /// Score the test split of a dataset against its reference hypnograms.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        opts: SampleArgs,
    },
    /// Per-epoch information gain of one sensor.
    Infogain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        opts: SampleArgs,
    },
    /// Run the signal pipeline on every raw signal of a bundle.
    Preprocess {
        #[command(flatten)]
        common: Common,
        /// Pad to this many epochs (default: the bundle length).
        #[arg(long)]
        target_epochs: Option<usize>,
    },
    /// Check the sampler and combination rule against exact posteriors.
    OracleCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "all")]
        suite: Suite,
    },
    /// Degrade one sensor and record information gain against accuracy.
    Degrade {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        sensor: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub n_samples: usize,
    pub lambda: Lambda,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            n_samples: 64,
            lambda: Lambda::Auto,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub arch: ArchConfig,
    pub optimizer: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSection {
    pub model: WorldModel,
    #[serde(default = "default_recordings")]
    pub n_recordings: usize,
    #[serde(default)]
    pub waveforms: BTreeMap<String, WaveformSpec>,
}

fn default_recordings() -> usize {
    10
}

/// Relative paths resolve against the directory of the config file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Dataset directory written by `synth`.
    pub data: Option<PathBuf>,
    /// A single recording bundle.
    pub bundle: Option<PathBuf>,
    /// Directory of trained denoisers; exact denoisers of `world` are used
    /// when absent.
    pub models: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub schedule: ScheduleParams,
    pub sampler: SamplerSection,
    pub train: TrainSection,
    pub world: Option<WorldSection>,
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_context(e, path))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.paths.data, &mut cfg.paths.bundle, &mut cfg.paths.models]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.train.arch.validate()?;
        self.train.optimizer.validate()?;
        if self.sampler.n_samples == 0 {
            return Err(Error::param("sampler.n_samples must be at least 1"));
        }
        if let Some(w) = &self.world {
            w.model.validate()?;
            for spec in w.waveforms.values() {
                spec.validate()?;
            }
        }
        Ok(())
    }

    fn world(&self) -> Result<&WorldSection> {
        self.world
            .as_ref()
            .ok_or_else(|| Error::param("config has no `world` section"))
    }

    fn path(&self, p: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
        p.clone()
            .ok_or_else(|| Error::param(format!("config is missing `paths.{key}`")))
    }
}

fn io_context(e: std::io::Error, path: &Path) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_context(e, path))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_context(e, path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    F32le,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalEntry {
    pub name: String,
    pub kind: String,
    pub fs: f64,
    pub file: String,
    pub encoding: Encoding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub recording: String,
    pub epochs: usize,
    pub valid_epochs: usize,
    #[serde(default)]
    pub signals: Vec<SignalEntry>,
    #[serde(default)]
    pub features: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub hypnogram: Option<Hypnogram>,
    pub features: BTreeMap<String, FeatureMatrix>,
}

fn features_csv(name: &str, f: &FeatureMatrix) -> String {
    let header: Vec<String> = if f.dims() == 1 {
        vec![name.to_string()]
    } else {
        (0..f.dims()).map(|d| format!("{name}_{d}")).collect()
    };
    let mut out = header.join(",") + "\n";
    for e in 0..f.epochs() {
        let row: Vec<String> = f.epoch(e).iter().map(f64::to_string).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn parse_features_csv(text: &str, path: &Path) -> Result<FeatureMatrix> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse(format!("{}: empty feature file", path.display())))?;
    let dims = header.split(',').count();
    let mut data = Vec::new();
    let mut epochs = 0;
    for (i, line) in lines.enumerate() {
        let row = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse(format!("{} row {}: {e}", path.display(), i + 1)))?;
        if row.len() != dims {
            return Err(Error::Parse(format!("{} row {}: expected {dims} columns", path.display(), i + 1)));
        }
        data.extend(row);
        epochs += 1;
    }
    FeatureMatrix::new(dims, epochs, data)
}

fn encode_f32(samples: &[f64]) -> Vec<u8> {
    samples.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

fn decode_f32(bytes: &[u8], path: &Path) -> Result<Vec<f64>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Parse(format!("{}: length is not a multiple of 4", path.display())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Writes a bundle directory for `rec`.
pub fn write_bundle(dir: &Path, rec: &Recording) -> Result<Manifest> {
    fs::create_dir_all(dir.join("features")).map_err(|e| io_context(e, dir))?;
    let epochs = rec.hypnogram.epochs();
    write_text(&dir.join("hypnogram.txt"), &rec.hypnogram.to_text())?;
    for (name, f) in &rec.features {
        write_text(&dir.join("features").join(format!("{name}.csv")), &features_csv(name, f))?;
    }
    let mut signals = Vec::new();
    for (name, sig) in &rec.waveforms {
        let file = format!("{name}.f32");
        fs::write(dir.join(&file), encode_f32(&sig.samples)).map_err(|e| io_context(e, dir))?;
        signals.push(SignalEntry {
            name: name.clone(),
            kind: sig.kind.clone(),
            fs: sig.fs,
            file,
            encoding: Encoding::F32le,
        });
    }
    let manifest = Manifest {
        recording: rec.id(),
        epochs,
        valid_epochs: epochs,
        signals,
        features: rec.features.keys().cloned().collect(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn read_bundle(dir: &Path) -> Result<Bundle> {
    let mpath = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_str(&read_text(&mpath)?)
        .map_err(|e| Error::Parse(format!("{}: {e}", mpath.display())))?;
    if manifest.valid_epochs > manifest.epochs {
        return Err(Error::param(format!("{}: valid_epochs exceeds epochs", mpath.display())));
    }
    let hpath = dir.join("hypnogram.txt");
    let hypnogram = if hpath.exists() {
        let h = Hypnogram::parse(&read_text(&hpath)?)?;
        if h.epochs() != manifest.epochs {
            return Err(Error::shape(format!(
                "{} has {} epochs, manifest says {}",
                hpath.display(),
                h.epochs(),
                manifest.epochs
            )));
        }
        Some(h)
    } else {
        None
    };
    let mut features = BTreeMap::new();
    for name in &manifest.features {
        let p = dir.join("features").join(format!("{name}.csv"));
        let f = parse_features_csv(&read_text(&p)?, &p)?;
        if f.epochs() != manifest.epochs {
            return Err(Error::shape(format!(
                "{} has {} epochs, manifest says {}",
                p.display(),
                f.epochs(),
                manifest.epochs
            )));
        }
        features.insert(name.clone(), f);
    }
    for s in &manifest.signals {
        if !dir.join(&s.file).exists() {
            return Err(Error::param(format!("{}: missing signal file {}", mpath.display(), s.file)));
        }
    }
    Ok(Bundle {
        dir: dir.to_path_buf(),
        manifest,
        hypnogram,
        features,
    })
}

pub fn read_signal(bundle: &Bundle, entry: &SignalEntry) -> Result<RawSignal> {
    let path = bundle.dir.join(&entry.file);
    let samples = match entry.encoding {
        Encoding::F32le => decode_f32(&fs::read(&path).map_err(|e| io_context(e, &path))?, &path)?,
        Encoding::Csv => dsp::read_csv_column(&read_text(&path)?)?,
    };
    RawSignal::new(samples, entry.fs, &entry.kind)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

fn read_split(data: &Path) -> Result<Split> {
    let p = data.join("split.json");
    serde_json::from_str(&read_text(&p)?).map_err(|e| Error::Parse(format!("{}: {e}", p.display())))
}

fn bundle_to_recording(index: usize, b: Bundle) -> Result<Recording> {
    let hypnogram = b
        .hypnogram
        .ok_or_else(|| Error::param(format!("{} has no hypnogram", b.dir.display())))?;
    Ok(Recording {
        index,
        hypnogram,
        features: b.features,
        waveforms: BTreeMap::new(),
    })
}

fn ensure_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| io_context(e, out))
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn sampler_config(cfg: &RunConfig, opts: &SampleArgs) -> SamplerConfig {
    SamplerConfig {
        schedule: cfg.schedule,
        n_samples: opts.n_samples.unwrap_or(cfg.sampler.n_samples),
        lambda: opts.lambda.unwrap_or(cfg.sampler.lambda),
        base_seed: cfg.seed,
        record_trajectory: false,
    }
}

/// Trained denoisers when `paths.models` is set, otherwise exact denoisers
/// of the configured world.
fn build_bank(cfg: &RunConfig, sensors: &[String]) -> Result<SensorBank> {
    if let Some(dir) = &cfg.paths.models {
        let prior = ReferenceDenoiser::load(&dir.join("prior.json"))?;
        let mut bank = SensorBank::new(Arc::new(prior));
        for s in sensors {
            bank.add_sensor(s.clone(), Arc::new(ReferenceDenoiser::load(&dir.join(format!("{s}.json")))?))?;
        }
        return Ok(bank);
    }
    let world = Arc::new(cfg.world()?.model.clone());
    experiment::exact_bank(&world)
}

fn observations(bundle: &Bundle, sensors: &[String]) -> Result<Vec<(String, Conditioning)>> {
    sensors
        .iter()
        .map(|s| {
            let f = bundle
                .features
                .get(s)
                .ok_or_else(|| Error::UnknownSensor(format!("{s} (not in {})", bundle.dir.display())))?;
            Ok((s.clone(), Conditioning::Features(f.clone())))
        })
        .collect()
}

fn chosen_sensors(bundle: &Bundle, opts: &SampleArgs) -> Vec<String> {
    if opts.sensors.is_empty() {
        bundle.features.keys().cloned().collect()
    } else {
        opts.sensors.clone()
    }
}

fn cmd_synth(common: &Common) -> Result<String> {
    let cfg = load_config(common)?;
    let w = cfg.world()?;
    let synth = SynthConfig {
        world: w.model.clone(),
        n_recordings: w.n_recordings,
        waveforms: w.waveforms.clone(),
        seed: cfg.seed,
    };
    let ds = gen_dataset(&synth)?;
    ensure_out(&common.out)?;
    let mut split = Split::default();
    for (list, recs) in [(&mut split.train, &ds.train), (&mut split.val, &ds.val), (&mut split.test, &ds.test)] {
        for r in recs {
            write_bundle(&common.out.join(r.id()), r)?;
            list.push(r.id());
        }
    }
    write_json(&common.out.join("split.json"), &split)?;
    write_json(&common.out.join("world.json"), &synth.world)?;
    Ok(format!(
        "wrote {} recordings ({} train, {} val, {} test) to {}",
        w.n_recordings,
        split.train.len(),
        split.val.len(),
        split.test.len(),
        common.out.display()
    ))
}

fn cmd_train(common: &Common, sensors: &[String]) -> Result<String> {
    let cfg = load_config(common)?;
    let data = cfg.path(&cfg.paths.data, "data")?;
    let split = read_split(&data)?;
    let recs = split
        .train
        .iter()
        .enumerate()
        .map(|(i, id)| bundle_to_recording(i, read_bundle(&data.join(id))?))
        .collect::<Result<Vec<_>>>()?;
    let first = recs.first().ok_or_else(|| Error::Empty("training split is empty".into()))?;
    let sensors: Vec<String> = if sensors.is_empty() {
        first.features.keys().cloned().collect()
    } else {
        sensors.to_vec()
    };
    let tcfg = TrainConfig {
        seed: cfg.seed,
        ..cfg.train.optimizer.clone()
    };
    ensure_out(&common.out)?;
    let mut log = String::from("target,step,loss\n");
    let targets = std::iter::once(("prior".to_string(), TrainTarget::Prior))
        .chain(sensors.iter().map(|s| (s.clone(), TrainTarget::Sensor(s.clone()))));
    let mut summary = Vec::new();
    for (name, target) in targets {
        let (net, tl) = train(&recs, &target, &cfg.train.arch, &tcfg)?;
        net.save(&common.out.join(format!("{name}.json")))?;
        for (i, l) in tl.losses.iter().enumerate() {
            log.push_str(&format!("{name},{i},{l}\n"));
        }
        let tail = &tl.losses[tl.losses.len().saturating_sub(100)..];
        let last = if tail.is_empty() { f64::NAN } else { tail.iter().sum::<f64>() / tail.len() as f64 };
        summary.push(format!("{name}: final loss {last:.4}"));
    }
    write_text(&common.out.join("train_log.csv"), &log)?;
    Ok(format!("trained on {} recordings; {}", recs.len(), summary.join("; ")))
}

fn samples_csv(inf: &crate::sampler::Inference) -> String {
    let mut out = String::from("sample,epoch,stage\n");
    for (i, run) in inf.samples.iter().enumerate() {
        for (e, st) in argmax_stages(&run.state).stages().iter().enumerate() {
            out.push_str(&format!("{i},{e},{}\n", st.label()));
        }
    }
    out
}

fn cmd_sample(common: &Common, opts: &SampleArgs) -> Result<String> {
    let cfg = load_config(common)?;
    let bundle = read_bundle(&cfg.path(&cfg.paths.bundle, "bundle")?)?;
    let sensors = chosen_sensors(&bundle, opts);
    let bank = build_bank(&cfg, &sensors)?;
    let obs = observations(&bundle, &sensors)?;
    let m = &bundle.manifest;
    let inf = infer(&bank, &obs, m.epochs, m.valid_epochs, &sampler_config(&cfg, opts))?;
    ensure_out(&common.out)?;
    write_text(&common.out.join("hypnogram.txt"), &inf.hypnogram.to_text())?;
    write_text(&common.out.join("samples.csv"), &samples_csv(&inf))?;
    write_json(&common.out.join("stats.json"), &inf.stats)?;
    let tst = inf.stats.get("tst_min").copied().flatten().unwrap_or(f64::NAN);
    Ok(format!(
        "{}: {} samples from {} sensor(s), median TST {tst} min",
        m.recording,
        inf.samples.len(),
        sensors.len()
    ))
}

#[derive(Debug, Serialize)]
struct EvalSummary {
    recordings: usize,
    mean_accuracy: BTreeMap<String, f64>,
    mean_kappa: BTreeMap<String, f64>,
    bland_altman: BTreeMap<String, crate::evalkit::BlandAltman>,
}

fn cmd_eval(common: &Common, opts: &SampleArgs) -> Result<String> {
    let cfg = load_config(common)?;
    let data = cfg.path(&cfg.paths.data, "data")?;
    let split = read_split(&data)?;
    if split.test.is_empty() {
        return Err(Error::Empty("test split is empty".into()));
    }
    let mut evals: Vec<RecordingEval> = Vec::new();
    for id in &split.test {
        let bundle = read_bundle(&data.join(id))?;
        let sensors = chosen_sensors(&bundle, opts);
        let bank = build_bank(&cfg, &sensors)?;
        let obs = observations(&bundle, &sensors)?;
        let m = &bundle.manifest;
        let reference = bundle
            .hypnogram
            .as_ref()
            .ok_or_else(|| Error::param(format!("{id} has no reference hypnogram")))?;
        let inf = infer(&bank, &obs, m.epochs, m.valid_epochs, &sampler_config(&cfg, opts))?;
        evals.push(evaluate_recording(id, &inf.hypnogram, reference, m.valid_epochs)?);
    }
    let n = evals.len() as f64;
    let mut mean_accuracy = BTreeMap::new();
    let mut mean_kappa = BTreeMap::new();
    for (i, s) in MergeScheme::ALL.iter().enumerate() {
        mean_accuracy.insert(s.to_string(), evals.iter().map(|e| e.accuracy[i]).sum::<f64>() / n);
        mean_kappa.insert(s.to_string(), evals.iter().map(|e| e.kappa[i]).sum::<f64>() / n);
    }
    let mut ba = BTreeMap::new();
    for name in StatReport::NAMES {
        let pairs: Vec<(f64, f64)> = evals
            .iter()
            .filter_map(|e| match (e.predicted.get(name).ok()?, e.reference.get(name).ok()?) {
                (Some(p), Some(r)) => Some((p, r)),
                _ => None,
            })
            .collect();
        if let Ok(b) = bland_altman(&pairs) {
            ba.insert(name.to_string(), b);
        }
    }
    ensure_out(&common.out)?;
    let mut csv = RecordingEval::csv_header() + "\n";
    for e in &evals {
        csv.push_str(&e.csv_row());
        csv.push('\n');
    }
    write_text(&common.out.join("eval.csv"), &csv)?;
    let five = mean_accuracy[&MergeScheme::Five.to_string()];
    let kappa = mean_kappa[&MergeScheme::Five.to_string()];
    write_json(
        &common.out.join("summary.json"),
        &EvalSummary {
            recordings: evals.len(),
            mean_accuracy,
            mean_kappa,
            bland_altman: ba,
        },
    )?;
    Ok(format!("{} recordings: 5-class accuracy {five:.4}, kappa {kappa:.4}", evals.len()))
}

fn cmd_infogain(common: &Common, opts: &SampleArgs) -> Result<String> {
    let cfg = load_config(common)?;
    let [target] = opts.sensors.as_slice() else {
        return Err(Error::param("infogain needs exactly one --sensor"));
    };
    let bundle = read_bundle(&cfg.path(&cfg.paths.bundle, "bundle")?)?;
    let sensors: Vec<String> = bundle.features.keys().cloned().collect();
    let bank = build_bank(&cfg, &sensors)?;
    let obs = observations(&bundle, &sensors)?;
    let gain = information_gain(&bank, &obs, bundle.manifest.epochs, target, &sampler_config(&cfg, opts))?;
    ensure_out(&common.out)?;
    write_text(&common.out.join(format!("infogain_{target}.csv")), &to_csv(&gain))?;
    let mean = mean_information_gain(&gain, Mask::Prefix(bundle.manifest.valid_epochs))?;
    Ok(format!("{target}: mean information gain {mean:.4} over {} trajectories", gain.n_trajectories))
}

#[derive(Debug, Serialize)]
struct PreprocessEntry {
    name: String,
    valid_epochs: usize,
    missing_samples: usize,
    rate_file: Option<String>,
}

fn cmd_preprocess(common: &Common, target_epochs: Option<usize>) -> Result<String> {
    let cfg = load_config(common)?;
    let bundle = read_bundle(&cfg.path(&cfg.paths.bundle, "bundle")?)?;
    let epochs = target_epochs.unwrap_or(bundle.manifest.epochs);
    ensure_out(&common.out)?;
    let mut signals = Vec::new();
    let mut entries = Vec::new();
    for s in &bundle.manifest.signals {
        let p = dsp::preprocess(&read_signal(&bundle, s)?, epochs)?;
        let file = format!("{}.f32", s.name);
        fs::write(common.out.join(&file), encode_f32(&p.signal)).map_err(|e| io_context(e, &common.out))?;
        signals.push(SignalEntry {
            name: s.name.clone(),
            kind: s.kind.clone(),
            fs: dsp::TARGET_FS,
            file,
            encoding: Encoding::F32le,
        });
        let rate_file = match &p.rate {
            Some(rate) => {
                let name = format!("{}_rate", s.name);
                let file = format!("{name}.f32");
                // events per minute, the unit of the ihr and ibr kinds
                let per_minute: Vec<f64> = rate.iter().map(|v| v * 60.0).collect();
                fs::write(common.out.join(&file), encode_f32(&per_minute)).map_err(|e| io_context(e, &common.out))?;
                let kind = if dsp::signal_kind(&s.kind)?.category == dsp::Category::Cardiac { "ihr" } else { "ibr" };
                signals.push(SignalEntry {
                    name,
                    kind: kind.into(),
                    fs: dsp::TARGET_FS,
                    file: file.clone(),
                    encoding: Encoding::F32le,
                });
                Some(file)
            }
            None => None,
        };
        entries.push(PreprocessEntry {
            name: s.name.clone(),
            valid_epochs: p.valid_epochs,
            missing_samples: p.missing.len(),
            rate_file,
        });
    }
    if let Some(h) = &bundle.hypnogram {
        if h.epochs() == epochs {
            write_text(&common.out.join("hypnogram.txt"), &h.to_text())?;
        }
    }
    let manifest = Manifest {
        recording: bundle.manifest.recording.clone(),
        epochs,
        valid_epochs: bundle.manifest.valid_epochs.min(epochs),
        signals,
        features: Vec::new(),
    };
    write_json(&common.out.join("manifest.json"), &manifest)?;
    write_json(&common.out.join("preprocess.json"), &entries)?;
    Ok(format!("preprocessed {} signal(s) to {} epochs at 128 Hz", entries.len(), epochs))
}

fn cmd_oracle_check(common: &Common, suite: Suite) -> Result<String> {
    let cfg = load_config(common)?;
    let report = experiment::run_suite(suite, cfg.seed)?;
    ensure_out(&common.out)?;
    write_json(&common.out.join("report.json"), &report)?;
    let mut lines: Vec<String> = report
        .checks
        .iter()
        .map(|c| {
            let rel = match c.relation {
                experiment::Relation::AtMost => "<=",
                experiment::Relation::AtLeast => ">=",
            };
            let verdict = if c.passed { "ok" } else { "FAIL" };
            format!("{verdict} {}/{}: {:e} {rel} {:e}", c.suite, c.name, c.measured, c.tolerance)
        })
        .collect();
    let failed = report.checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(Error::param(format!("{failed} of {} oracle checks failed", report.checks.len())));
    }
    lines.push(format!("all {} checks passed", report.checks.len()));
    Ok(lines.join("\n"))
}

fn cmd_degrade(common: &Common, sensor: Option<&str>) -> Result<String> {
    let cfg = load_config(common)?;
    let w = cfg.world()?;
    let sensor = match sensor {
        Some(s) => s.to_string(),
        None => w
            .model
            .sensors
            .first()
            .map(|s| s.name.clone())
            .ok_or_else(|| Error::param("world has no sensors"))?,
    };
    let sweep = SweepConfig {
        world: w.model.clone(),
        sensor: sensor.clone(),
        n_recordings: w.n_recordings,
        seed: cfg.seed,
        sampler: sampler_config(
            &cfg,
            &SampleArgs {
                sensors: Vec::new(),
                n_samples: None,
                lambda: None,
            },
        ),
        conditions: SweepConfig::standard_conditions(),
    };
    let points = degradation_sweep(&sweep)?;
    ensure_out(&common.out)?;
    write_json(&common.out.join("sweep.json"), &points)?;
    let rows: Vec<_> = points.iter().flat_map(|p| p.rows.clone()).collect();
    write_text(&common.out.join("plot_data.csv"), &emit_plot_data(&rows)?)?;
    let lines: Vec<String> = points
        .iter()
        .map(|p| {
            format!(
                "{}: gain {:.4}, accuracy {:.4}, kappa {:.4}",
                p.label, p.mean_info_gain, p.accuracy, p.kappa
            )
        })
        .collect();
    Ok(format!("degraded `{sensor}`\n{}", lines.join("\n")))
}

/// Runs one command and returns the human-readable summary.
pub fn run(cli: Cli) -> Result<String> {
    match &cli.command {
        Command::Synth(c) => cmd_synth(c),
        Command::Train { common, sensors } => cmd_train(common, sensors),
        Command::Sample { common, opts } => cmd_sample(common, opts),
        Command::Eval { common, opts } => cmd_eval(common, opts),
        Command::Infogain { common, opts } => cmd_infogain(common, opts),
        Command::Preprocess { common, target_epochs } => cmd_preprocess(common, *target_epochs),
        Command::OracleCheck { common, suite } => cmd_oracle_check(common, *suite),
        Command::Degrade { common, sensor } => cmd_degrade(common, sensor.as_deref()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::random::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn world() -> WorldModel {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        WorldModel {
            epochs: 5,
            prior: markov_prior(&mut r, 2.0),
            sensors: vec![gaussian_sensor(&mut r, "a", 1.0, 0.5)],
        }
    }

    #[test]
    fn config_rejects_unknown_keys_and_resolves_paths() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"sampler": {"n_samples": 4, "lambda": "auto"}, "paths": {"bundle": "b"}}"#).unwrap();
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.sampler.n_samples, 4);
        assert_eq!(cfg.paths.bundle.unwrap(), dir.path().join("b"));
        fs::write(&p, r#"{"samplr": {}}"#).unwrap();
        assert!(RunConfig::load(&p).is_err());
        fs::write(&p, r#"{"sampler": {"n_samples": 4, "extra": 1}}"#).unwrap();
        assert!(RunConfig::load(&p).is_err());
        fs::write(&p, r#"{"schedule": {"sigma_min": 50.0}}"#).unwrap();
        assert!(RunConfig::load(&p).is_err());
    }

    #[test]
    fn bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = SynthConfig {
            world: world(),
            n_recordings: 3,
            waveforms: BTreeMap::new(),
            seed: 1,
        };
        cfg.waveforms.insert(
            "ppg".into(),
            WaveformSpec {
                kind: "ppg".into(),
                rates: [1.0; 5],
                amplitude: 0.01,
                noise_sd: 0.0001,
                fs: 16.0,
                jitter: 0.03,
            },
        );
        let rec = crate::synth::gen_recording(&cfg, 1).unwrap();
        write_bundle(dir.path(), &rec).unwrap();
        let b = read_bundle(dir.path()).unwrap();
        assert_eq!(b.hypnogram.as_ref(), Some(&rec.hypnogram));
        assert_eq!(b.features, rec.features);
        let sig = read_signal(&b, &b.manifest.signals[0]).unwrap();
        assert_eq!(sig.samples.len(), rec.waveforms["ppg"].samples.len());
        assert!(sig
            .samples
            .iter()
            .zip(&rec.waveforms["ppg"].samples)
            .all(|(a, b)| (a - b).abs() <= 1e-7 * b.abs().max(1e-3)));
        fs::write(dir.path().join("hypnogram.txt"), "W\n").unwrap();
        assert!(read_bundle(dir.path()).is_err());
    }

    #[test]
    fn multi_dim_features_csv() {
        let f = FeatureMatrix::new(2, 3, vec![0.5, 1.0, 0.0, -2.25, 3.0, 1e-9]).unwrap();
        let text = features_csv("x", &f);
        assert!(text.starts_with("x_0,x_1\n"));
        assert_eq!(parse_features_csv(&text, Path::new("x.csv")).unwrap(), f);
        assert!(parse_features_csv("a,b\n1\n", Path::new("x.csv")).is_err());
    }

    #[test]
    fn argument_parsing() {
        let cli = Cli::try_parse_from([
            "fsdm", "sample", "--out", "d", "--sensor", "a", "--sensor", "b", "--lambda", "auto", "--n-samples", "8",
        ])
        .unwrap();
        let Command::Sample { opts, .. } = cli.command else { panic!() };
        assert_eq!(opts.sensors, vec!["a", "b"]);
        assert_eq!(opts.lambda, Some(Lambda::Auto));
        assert_eq!(opts.n_samples, Some(8));
        assert!(Cli::try_parse_from(["fsdm", "sample", "--out", "d", "--lambda", "lots"]).is_err());
        let cli = Cli::try_parse_from(["fsdm", "oracle-check", "--out", "d", "--suite", "identities"]).unwrap();
        assert!(matches!(cli.command, Command::OracleCheck { suite: Suite::Identities, .. }));
    }
}
