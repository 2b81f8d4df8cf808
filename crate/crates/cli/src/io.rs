//! Result files and checkpoints.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use hgp::linalg::Tensor;
use hgp::systems::{Dataset, TestProtocol, Trajectory};
use hgp::vi::{ModelState, Prediction, TrainReport};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::metrics::CumulativeRow;

pub const CHECKPOINT_FORMAT: &str = "hgp-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(f), value)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(f))
        .with_context(|| format!("parsing {}", path.display()))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

pub fn write_trace(path: &Path, report: &TrainReport) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["iteration", "elbo", "smoothed"])?;
    for (i, (e, s)) in report.elbo.iter().zip(&report.smoothed).enumerate() {
        w.write_record([i.to_string(), e.to_string(), s.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// One row per (path, time) with the standardised state.
pub fn write_samples(path: &Path, pred: &Prediction) -> Result<()> {
    let mut w = csv_writer(path)?;
    let dim = pred.mean.cols();
    let mut header = vec!["sample".to_string(), "time".to_string()];
    header.extend((0..dim).map(|d| format!("x{d}")));
    w.write_record(&header)?;
    for (k, s) in pred.samples.iter().enumerate() {
        for (i, t) in pred.times.iter().enumerate() {
            let mut row = vec![k.to_string(), t.to_string()];
            row.extend(s.row(i).iter().map(f64::to_string));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_cumulative(path: &Path, rows: &[CumulativeRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn trajectory_header(dim: usize) -> Vec<String> {
    let d = dim / 2;
    std::iter::once("t".to_string())
        .chain((1..=d).map(|i| format!("q{i}")))
        .chain((1..=d).map(|i| format!("p{i}")))
        .collect()
}

pub fn write_trajectory(path: &Path, t: &Trajectory) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(trajectory_header(t.dim()))?;
    for (i, time) in t.times.iter().enumerate() {
        let row = std::iter::once(time).chain(t.states.row(i));
        w.write_record(row.map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let mut r =
        csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let cols = r.headers()?.len();
    ensure!(
        cols >= 3 && cols % 2 == 1,
        "{}: expected t plus 2D state columns",
        path.display()
    );
    let mut times = Vec::new();
    let mut data = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let vals: Vec<f64> = rec
            .iter()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()?;
        times.push(vals[0]);
        data.extend_from_slice(&vals[1..]);
    }
    Ok(Trajectory::new(
        times.clone(),
        Tensor::from_vec(times.len(), cols - 1, data),
    )?)
}

fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(", ")
}

/// One CSV per trajectory (standardised coordinates) plus `manifest.txt`
/// with the generating spec, standardisation and file list.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    let mut files = Vec::new();
    let groups: [(&str, &[Trajectory]); 3] = [
        ("train", &data.train),
        ("train_clean", &data.train_clean),
        ("test", &data.test),
    ];
    for (prefix, trajs) in groups {
        for (k, t) in trajs.iter().enumerate() {
            let name = format!("{prefix}_{k:03}.csv");
            write_trajectory(&dir.join(&name), t)?;
            files.push(name);
        }
    }
    let spec = &data.spec;
    let test = match spec.test {
        TestProtocol::Continuation => "continuation".to_string(),
        TestProtocol::FreshInitial {
            count,
            length_factor,
        } => format!("fresh:{count}:{length_factor}"),
    };
    let manifest = format!(
        "system = {}
seed = {}
train_length = {}
train_rate = {}
test_rate = {}
         noise_fraction = {}
n_train = {}
test = {test}
mean = {}
std = {}
noise_var = {}
files = {}
",
        spec.system,
        spec.seed,
        spec.train_length,
        spec.train_rate,
        spec.test_rate,
        spec.noise_fraction,
        spec.n_train,
        join(&data.standardization.mean),
        join(&data.standardization.std),
        join(&data.noise_var),
        files.join(", "),
    );
    std::fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Word position, decimal (exceeds the JSON number range).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().context("rng word position")?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: RunConfig,
    pub state: ModelState,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn new(config: RunConfig, state: ModelState, rng: &ChaCha8Rng) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config,
            state,
            rng: RngState::capture(rng),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Checkpoint = read_json(path)?;
        if c.format != CHECKPOINT_FORMAT {
            bail!("{} is not a checkpoint", path.display());
        }
        if c.version != CHECKPOINT_VERSION {
            bail!("unsupported checkpoint version {}", c.version);
        }
        Ok(c)
    }
}
