//! Experiment configuration, parameter sweeps and result tables.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::memory::{UwParams, YbParams};
use crate::photonic::{BsmParams, QfcParams};
use crate::protocol::{self, ChannelParams, NetworkConfig, ProtocolMessage, RunSummary, StopCondition, Topology};

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const CSV_HEADER: &str = "sweep_value,rate_hz,fidelity_bound,attempts,heralds,false_positives,seed";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Default,
    /// Every efficiency at 1 and every noise source off.
    NearIdeal,
}

impl Preset {
    pub fn apply(self, cfg: &mut ExperimentConfig) {
        if self == Preset::NearIdeal {
            cfg.yb.photon_collection_efficiency = 1.0;
            cfg.qfc.efficiency = 1.0;
            cfg.qfc.noise_rate = 0.0;
            cfg.uw.transducer_efficiency = 1.0;
            cfg.uw.transducer_noise = 0.0;
            cfg.bsm.detector_efficiency = 1.0;
            cfg.bsm.dark_count_rate_hz = 0.0;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Dotted path such as `qfc.efficiency` or `link_distance_km`.
    pub parameter: String,
    #[serde(deserialize_with = "numbers")]
    pub values: Vec<f64>,
    #[serde(default = "one")]
    pub reps: u32,
}

fn one() -> u32 {
    1
}

fn default_seed() -> u64 {
    1
}

fn default_distance() -> f64 {
    1.0
}

/// Accepts TOML integers as well as floats.
fn numbers<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Num {
        I(i64),
        F(f64),
    }
    Ok(Vec::<Num>::deserialize(d)?
        .into_iter()
        .map(|n| match n {
            Num::I(i) => i as f64,
            Num::F(f) => f,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub topology: Topology,
    #[serde(default)]
    pub preset: Preset,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_distance")]
    pub link_distance_km: f64,
    #[serde(default)]
    pub stop: StopCondition,
    #[serde(default)]
    pub yb: YbParams,
    #[serde(default)]
    pub uw: UwParams,
    #[serde(default)]
    pub qfc: QfcParams,
    #[serde(default)]
    pub bsm: BsmParams,
    #[serde(default)]
    pub channel: ChannelParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(topology: Topology, preset: Preset) -> Self {
        let mut cfg = Self {
            topology,
            preset,
            seed: default_seed(),
            link_distance_km: default_distance(),
            stop: StopCondition::default(),
            yb: YbParams::default(),
            uw: UwParams::default(),
            qfc: QfcParams::default(),
            bsm: BsmParams::default(),
            channel: ChannelParams::default(),
            sweep: None,
            output: None,
        };
        preset.apply(&mut cfg);
        cfg
    }

    pub fn network(&self) -> NetworkConfig {
        NetworkConfig {
            topology: self.topology,
            link_distance_km: self.link_distance_km,
            yb: self.yb.clone(),
            uw: self.uw.clone(),
            qfc: self.qfc.clone(),
            bsm: self.bsm.clone(),
            channel: self.channel.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network().validate()?;
        self.stop.validate()?;
        if let Some(sweep) = &self.sweep {
            if sweep.reps == 0 {
                return Err(Error::invalid("sweep.reps", "must be at least 1"));
            }
            for &v in &sweep.values {
                self.with_param(&sweep.parameter, v)?;
            }
        }
        Ok(())
    }

    /// Copy with one numeric parameter replaced, validated.
    pub fn with_param(&self, path: &str, value: f64) -> Result<Self> {
        if matches!(path, "topology" | "preset" | "seed" | "output") || path.starts_with("sweep") {
            return Err(Error::UnknownParameter(path.into()));
        }
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Serialize(e.to_string()))?;
        let mut slot = &mut root;
        for part in path.split('.') {
            slot = slot
                .get_mut(part)
                .ok_or_else(|| Error::UnknownParameter(path.into()))?;
        }
        *slot = match slot {
            toml::Value::Integer(_) => {
                if value.fract() != 0.0 || value < 0.0 {
                    return Err(Error::invalid(path, format!("expects a non-negative integer, got {value}")));
                }
                toml::Value::Integer(value as i64)
            }
            toml::Value::Float(_) => toml::Value::Float(value),
            _ => return Err(Error::UnknownParameter(path.into())),
        };
        let cfg: Self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::invalid(path, e.message().to_string()))?;
        cfg.network().validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses a config from TOML text. Preset values are filled in first and the
/// file's own entries override them.
pub fn parse_config(text: &str, path: &Path) -> Result<ExperimentConfig> {
    let diag = |message: String| Error::Config {
        path: path.to_path_buf(),
        message,
    };
    let user: toml::Table = text.parse().map_err(|e: toml::de::Error| diag(e.to_string()))?;
    let topology: Topology = user
        .get("topology")
        .cloned()
        .ok_or_else(|| diag("missing key `topology`".into()))?
        .try_into()
        .map_err(|e: toml::de::Error| diag(format!("key `topology`: {}", e.message())))?;
    let preset: Preset = match user.get("preset").cloned() {
        Some(v) => v
            .try_into()
            .map_err(|e: toml::de::Error| diag(format!("key `preset`: {}", e.message())))?,
        None => Preset::Default,
    };
    let base = ExperimentConfig::new(topology, preset);
    let mut table = toml::Table::try_from(&base).map_err(|e| Error::Serialize(e.to_string()))?;
    merge(&mut table, user);
    let cfg: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| diag(e.message().to_string()))?;
    cfg.validate().map_err(|e| diag(e.to_string()))?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text, path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub sweep_value: Option<f64>,
    pub rep: u32,
    pub rate_hz: f64,
    pub fidelity_bound: Option<f64>,
    pub fidelity_stderr: Option<f64>,
    pub attempts: u64,
    pub heralds: u64,
    pub false_positives: u64,
    pub discarded: u64,
    pub elapsed_s: f64,
    pub seed: u64,
}

impl SweepResult {
    pub fn from_summary(value: Option<f64>, rep: u32, s: &RunSummary) -> Self {
        Self {
            sweep_value: value,
            rep,
            rate_hz: s.rate_hz,
            fidelity_bound: s.fidelity_bound,
            fidelity_stderr: s.fidelity_stderr,
            attempts: s.stats.attempts,
            heralds: s.pairs,
            false_positives: s.stats.false_positives,
            discarded: s.tomography.discarded,
            elapsed_s: s.elapsed_s,
            seed: s.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub parameter: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub provenance: Provenance,
    pub config: ExperimentConfig,
    pub rows: Vec<SweepResult>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl ResultTable {
    pub fn new(config: ExperimentConfig, rows: Vec<SweepResult>) -> Self {
        Self {
            provenance: Provenance {
                config_hash: config.hash(),
                seed: config.seed,
                version: ARTIFACT_VERSION.to_string(),
                parameter: config.sweep.as_ref().map(|s| s.parameter.clone()),
            },
            config,
            rows,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                opt(r.sweep_value),
                r.rate_hz,
                opt(r.fidelity_bound),
                r.attempts,
                r.heralds,
                r.false_positives,
                r.seed
            )
            .expect("string write");
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("table serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Serialize(e.to_string()))
    }

    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Csv => self.to_csv(),
            Format::Json => self.to_json(),
        }
    }

    /// Writes `<stem>.<ext>` into `dir`, creating it if needed. CSV output
    /// gets a `<stem>.provenance.json` companion.
    pub fn emit(&self, dir: &Path, stem: &str, format: Format) -> Result<PathBuf> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| Error::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let path = dir.join(format!("{stem}.{}", format.extension()));
        fs::write(&path, self.render(format)).map_err(io(&path))?;
        if format == Format::Csv {
            let side = dir.join(format!("{stem}.provenance.json"));
            let mut text = serde_json::to_string_pretty(&self.provenance).expect("provenance serializes");
            text.push('\n');
            fs::write(&side, text).map_err(io(&side))?;
        }
        Ok(path)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of one sweep point. Depends on the value itself, not its position,
/// so reordering the sweep reorders rows without changing them.
pub fn point_seed(base: u64, value: f64, rep: u32) -> u64 {
    splitmix(base ^ splitmix(value.to_bits() ^ splitmix(u64::from(rep))))
}

/// A single run of the configuration as written.
pub fn run_single(cfg: &ExperimentConfig, trace: bool) -> Result<(ResultTable, Vec<ProtocolMessage>)> {
    cfg.validate()?;
    let out = protocol::run(&cfg.network(), &cfg.stop, cfg.seed, trace)?;
    let row = SweepResult::from_summary(None, 0, &out.summary);
    Ok((ResultTable::new(cfg.clone(), vec![row]), out.messages))
}

pub struct SweepPoint {
    pub value: f64,
    pub rep: u32,
    pub summary: RunSummary,
    pub messages: Vec<ProtocolMessage>,
}

/// Runs every (value, repetition) pair as an independent instance, in
/// parallel, and returns them in sweep order.
pub fn run_sweep_points(cfg: &ExperimentConfig, trace: bool) -> Result<Vec<SweepPoint>> {
    cfg.validate()?;
    let Some(sweep) = &cfg.sweep else {
        return Err(Error::invalid("sweep", "config has no [sweep] section"));
    };
    let jobs: Vec<(f64, u32)> = sweep
        .values
        .iter()
        .flat_map(|&v| (0..sweep.reps).map(move |r| (v, r)))
        .collect();
    jobs.into_par_iter()
        .map(|(value, rep)| {
            let point = cfg.with_param(&sweep.parameter, value)?;
            let seed = point_seed(cfg.seed, value, rep);
            let out = protocol::run(&point.network(), &point.stop, seed, trace)?;
            Ok(SweepPoint {
                value,
                rep,
                summary: out.summary,
                messages: out.messages,
            })
        })
        .collect()
}

pub fn run_sweep(cfg: &ExperimentConfig) -> Result<ResultTable> {
    let rows = run_sweep_points(cfg, false)?
        .iter()
        .map(|p| SweepResult::from_summary(Some(p.value), p.rep, &p.summary))
        .collect();
    Ok(ResultTable::new(cfg.clone(), rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        parse_config(text, Path::new("test.toml"))
    }

    #[test]
    fn empty_overrides_give_defaults() {
        let cfg = parse("topology = \"yb_uw\"\n").unwrap();
        assert_eq!(cfg.yb.photon_collection_efficiency, 0.5);
        assert_eq!(cfg.yb.attempts_per_reload, 128);
        assert_eq!(cfg.yb.bin_width_ns, 520.0);
        assert_eq!(cfg.bsm.detector_efficiency, 0.85);
        assert_eq!((cfg.uw.transducer_efficiency, cfg.uw.transducer_noise), (0.6, 0.047));
        assert_eq!((cfg.qfc.efficiency, cfg.qfc.noise_rate), (0.99, 0.005));
        assert_eq!(cfg.link_distance_km, 1.0);
        assert_eq!(cfg.uw.coherence_time_ms, 0.5);
        assert_eq!(cfg.stop, StopCondition::default());
    }

    #[test]
    fn preset_then_overrides() {
        let cfg = parse("topology = \"uw_yb_uw\"\npreset = \"near_ideal\"\n[qfc]\nefficiency = 0.9\n").unwrap();
        assert_eq!(cfg.qfc.efficiency, 0.9);
        assert_eq!(cfg.qfc.noise_rate, 0.0);
        assert_eq!(cfg.uw.transducer_efficiency, 1.0);
    }

    #[test]
    fn diagnostics_name_the_key() {
        let err = parse("topology = \"yb_yb\"\n[yb]\nphoton_collection_efficiency = -0.2\n").unwrap_err();
        assert!(err.to_string().contains("photon_collection_efficiency"), "{err}");
        let err = parse("topology = \"yb_yb\"\n[yb]\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let err = parse("topology = \"yb_yb\"\n[yb\n").unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
        let err = parse("topology = \"yb_yb\"\n[sweep]\nparameter = \"yb.nope\"\nvalues = [1]\n").unwrap_err();
        assert!(err.to_string().contains("yb.nope"), "{err}");
    }

    #[test]
    fn sweep_values_parse() {
        let cfg = parse(
            "topology = \"yb_yb\"\n[sweep]\nparameter = \"yb.photon_collection_efficiency\"\nvalues = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1]\n",
        )
        .unwrap();
        assert_eq!(cfg.sweep.unwrap().values.len(), 10);
        let cfg = parse("topology = \"yb_yb\"\n[sweep]\nparameter = \"yb.attempts_per_reload\"\nvalues = [1, 64]\n").unwrap();
        let p = cfg.with_param("yb.attempts_per_reload", 64.0).unwrap();
        assert_eq!(p.yb.attempts_per_reload, 64);
        assert!(cfg.with_param("yb.attempts_per_reload", 1.5).is_err());
        assert!(cfg.with_param("seed", 3.0).is_err());
    }

    #[test]
    fn point_seed_depends_on_value_and_rep() {
        assert_eq!(point_seed(1, 0.5, 0), point_seed(1, 0.5, 0));
        assert_ne!(point_seed(1, 0.5, 0), point_seed(1, 0.5, 1));
        assert_ne!(point_seed(1, 0.5, 0), point_seed(1, 0.7, 0));
        assert_ne!(point_seed(1, 0.5, 0), point_seed(2, 0.5, 0));
    }

    #[test]
    fn empty_sweep_is_header_only() {
        let mut cfg = ExperimentConfig::new(Topology::YbYb, Preset::Default);
        cfg.sweep = Some(SweepSpec {
            parameter: "qfc.efficiency".into(),
            values: vec![],
            reps: 1,
        });
        let table = run_sweep(&cfg).unwrap();
        assert_eq!(table.to_csv(), format!("{CSV_HEADER}\n"));
    }
}
