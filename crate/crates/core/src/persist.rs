//! On-disk formats.
//!
//! Every file starts with a version token line. Datasets are text: a JSON
//! header line, then one whitespace-separated record per transition with
//! reals in shortest round-trip form. Checkpoints are a JSON header line
//! followed by little-endian `f64` tensors in header order.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::control::PlanConfig;
use crate::env::{Action, EnvConfig, RopeState};
use crate::error::{Error, Result};
use crate::eval::{metrics_csv, summarize, MetricRow, SuiteConfig, Summary};
use crate::models::{init_bundle, Architecture, ModelBundle, Variant};
use crate::train::{Dataset, EpochLoss, TrainConfig, Transition};

pub const DATASET_VERSION: &str = "cdyn-dataset/1";
pub const CHECKPOINT_VERSION: &str = "cdyn-checkpoint/1";

fn open(path: &Path) -> Result<fs::File> {
    fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

fn create(path: &Path) -> Result<fs::File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(fs::File::create(path)?)
}

fn check_version(found: &str, expected: &str) -> Result<()> {
    if found.trim_end() != expected {
        return Err(Error::Version {
            expected: expected.to_string(),
            found: found.trim_end().to_string(),
        });
    }
    Ok(())
}

// ---- datasets -------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    geom_count: usize,
    trajectories: usize,
    length: usize,
    train_trajectories: usize,
    env: EnvConfig,
}

pub fn write_dataset(w: &mut impl Write, d: &Dataset) -> Result<()> {
    writeln!(w, "{DATASET_VERSION}")?;
    let header = DatasetHeader {
        geom_count: d.env.geom_count,
        trajectories: d.trajectories,
        length: d.length,
        train_trajectories: d.train_trajectories,
        env: d.env,
    };
    writeln!(w, "{}", serde_json::to_string(&header)?)?;
    let mut line = String::new();
    for t in &d.transitions {
        use std::fmt::Write as _;
        line.clear();
        write!(line, "{} {}", t.trajectory, t.step).expect("string write");
        let reals = t
            .state
            .to_flat()
            .into_iter()
            .chain(t.action.to_array())
            .chain(t.next_state.to_flat());
        for v in reals {
            write!(line, " {v}").expect("string write");
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_dataset(r: impl BufRead) -> Result<Dataset> {
    let mut lines = r.lines();
    let version = lines.next().transpose()?.unwrap_or_default();
    check_version(&version, DATASET_VERSION)?;
    let header_line = lines.next().transpose()?.ok_or(Error::Malformed {
        line: 2,
        detail: "missing header".into(),
    })?;
    let header: DatasetHeader =
        serde_json::from_str(&header_line).map_err(|e| Error::Malformed {
            line: 2,
            detail: e.to_string(),
        })?;
    if header.geom_count != header.env.geom_count {
        return Err(Error::Malformed {
            line: 2,
            detail: "geom_count disagrees with env".into(),
        });
    }
    let g = header.geom_count;
    let expected = 2 + 4 * g + 4;
    let mut transitions = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 3;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let bad = |detail: String| Error::Malformed {
            line: line_no,
            detail,
        };
        let fields: Vec<&str> = line.split(' ').collect();
        if fields.len() != expected {
            return Err(bad(format!("{} fields, expected {expected}", fields.len())));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("{s:?}: {e}")));
        let reals = fields[2..]
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        transitions.push(Transition {
            trajectory: int(fields[0])?,
            step: int(fields[1])?,
            state: RopeState::from_flat(&reals[..2 * g]),
            action: Action::from_slice(&reals[2 * g..2 * g + 4]),
            next_state: RopeState::from_flat(&reals[2 * g + 4..]),
        });
    }
    Ok(Dataset {
        env: header.env,
        trajectories: header.trajectories,
        length: header.length,
        train_trajectories: header.train_trajectories,
        transitions,
    })
}

pub fn save_dataset(path: &Path, d: &Dataset) -> Result<()> {
    let mut w = std::io::BufWriter::new(create(path)?);
    write_dataset(&mut w, d)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(BufReader::new(open(path)?))
}

// ---- checkpoints ----------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub variant: Variant,
    pub arch: Architecture,
    /// Training configuration echo; absent for untrained bundles.
    pub train: Option<TrainConfig>,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub bundle: ModelBundle,
    pub train: Option<TrainConfig>,
    pub seed: u64,
}

pub fn write_checkpoint(w: &mut impl Write, ck: &Checkpoint) -> Result<()> {
    let named = ck.bundle.named_params();
    let header = CheckpointHeader {
        variant: ck.bundle.variant,
        arch: ck.bundle.arch,
        train: ck.train,
        seed: ck.seed,
        tensors: named
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    writeln!(w, "{CHECKPOINT_VERSION}")?;
    writeln!(w, "{}", serde_json::to_string(&header)?)?;
    for (_, t) in named {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(mut r: impl BufRead) -> Result<Checkpoint> {
    let mut version = String::new();
    r.read_line(&mut version)?;
    check_version(&version, CHECKPOINT_VERSION)?;
    let mut header_line = String::new();
    r.read_line(&mut header_line)?;
    let header: CheckpointHeader =
        serde_json::from_str(header_line.trim_end()).map_err(|e| Error::Malformed {
            line: 2,
            detail: e.to_string(),
        })?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;

    let mut bundle = init_bundle(header.variant, header.arch, 0);
    let expected: Vec<(String, Vec<usize>)> = bundle
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if expected.len() != header.tensors.len() {
        return Err(Error::shape(
            "checkpoint",
            format!(
                "header lists {} tensors, architecture has {}",
                header.tensors.len(),
                expected.len()
            ),
        ));
    }
    let mut offset = 0;
    let mut values = Vec::with_capacity(expected.len());
    for (entry, (name, shape)) in header.tensors.iter().zip(&expected) {
        if &entry.name != name || &entry.shape != shape {
            return Err(Error::shape(
                "checkpoint",
                format!(
                    "tensor {} {:?} where {name} {shape:?} was expected",
                    entry.name, entry.shape
                ),
            ));
        }
        let n: usize = shape.iter().product();
        let available = (payload.len() - offset) / 8;
        if available < n {
            return Err(Error::PayloadLength {
                tensor: name.clone(),
                expected: n,
                found: available,
            });
        }
        let data: Vec<f64> = payload[offset..offset + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        offset += 8 * n;
        values.push(Tensor::new(shape.clone(), data)?);
    }
    if offset != payload.len() {
        return Err(Error::PayloadLength {
            tensor: "<trailing bytes>".into(),
            expected: 0,
            found: (payload.len() - offset) / 8,
        });
    }
    for (p, v) in bundle.params_mut().into_iter().zip(values) {
        *p = v;
    }
    Ok(Checkpoint {
        bundle,
        train: header.train,
        seed: header.seed,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut w = std::io::BufWriter::new(create(path)?);
    write_checkpoint(&mut w, ck)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(BufReader::new(open(path)?))
}

// ---- configs and reports --------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollectConfig {
    pub trajectories: usize,
    pub length: usize,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            trajectories: 2000,
            length: 20,
        }
    }
}

/// Top-level experiment file (TOML). Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub collect: CollectConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub plan: PlanConfig,
    #[serde(default)]
    pub suite: Option<SuiteConfig>,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: default_out(),
            env: EnvConfig::default(),
            collect: CollectConfig::default(),
            train: TrainConfig::default(),
            plan: PlanConfig::default(),
            suite: None,
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.env.validate()?;
        cfg.train.validate()?;
        cfg.plan.validate()?;
        Ok(cfg)
    }

    /// Loads a config; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut text = String::new();
        open(path)?.read_to_string(&mut text)?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.out_dir);
        if let Some(suite) = &mut cfg.suite {
            for m in &mut suite.methods {
                m.checkpoint.iter_mut().for_each(resolve);
                m.dataset.iter_mut().for_each(resolve);
            }
        }
        Ok(cfg)
    }
}

pub fn loss_curve_csv(curve: &[EpochLoss]) -> String {
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    let mut out = String::from("epoch,l_F,l_I,l_dec,total\n");
    for e in curve {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            e.epoch,
            opt(e.forward),
            opt(e.inverse),
            opt(e.decoder),
            e.total
        ));
    }
    out
}

#[derive(Serialize)]
struct MetricsReport<'a> {
    rows: &'a [MetricRow],
    summary: Vec<Summary>,
    shaped_summary: Vec<Summary>,
}

pub fn metrics_json(rows: &[MetricRow]) -> Result<String> {
    let report = MetricsReport {
        rows,
        summary: summarize(rows),
        shaped_summary: summarize(&crate::eval::pool_shaped(rows)),
    };
    Ok(serde_json::to_string_pretty(&report)?)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

pub fn save_metrics(dir: &Path, rows: &[MetricRow]) -> Result<(PathBuf, PathBuf)> {
    let csv = dir.join("metrics.csv");
    let json = dir.join("metrics.json");
    write_text(&csv, &metrics_csv(rows))?;
    write_text(&json, &metrics_json(rows)?)?;
    Ok((csv, json))
}

/// Binary PGM (P5) of a single-channel image with values in `[0, 1]`.
pub fn write_pgm(path: &Path, values: &[f64], size: usize) -> Result<()> {
    let mut f = create(path)?;
    write!(f, "P5\n{size} {size}\n255\n")?;
    let bytes: Vec<u8> = values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    f.write_all(&bytes)?;
    Ok(())
}
