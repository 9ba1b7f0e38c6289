//! Experiment configuration files.
//!
//! ```toml
//! id = "fig6_motivating"
//!
//! [topology]
//! kind = "clos"            # or: file = "net.topo"
//! racks = 2
//! qpus_per_rack = 2
//! data_qubits = 30
//! buffer_qubits = 10
//! comm_qubits = 2
//! edge_weight = 1
//!
//! [workload]
//! demands = "fig6.demands" # or: benchmark = "qft", qubits = 64
//!
//! [scheduler]
//! strategy = "flexible"
//! lookahead = 10
//! distill_copies = 1
//!
//! [model]
//! t_in_rack_ms = 0.1
//! t_reconfig_ms = 1.0
//! t_cross_rack_ms = 10.0
//!
//! [output]
//! dir = "out/fig6"
//! ```
//!
//! Relative paths resolve against the config file's directory.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Deserialize;

use qdcsim::workload::{generate_benchmark, parse_demand_file, place_qubits, BenchmarkKind};
use qdcsim::{
    build_topology, EprDemand, FidelityModel, LatencyModel, NetworkTopology, QpuSpec, SchedulerConfig,
    StochasticParams, Strategy, TopologyKind, TopologyParams,
};

pub const SEED_ENV: &str = "QDCSIM_SEED";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub id: String,
    pub topology: TopologySection,
    pub workload: WorkloadSection,
    #[serde(default)]
    pub scheduler: SchedulerSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub output: OutputSection,
    /// Directory of the config file; set by [`ExperimentConfig::load`].
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySection {
    pub kind: Option<String>,
    pub file: Option<PathBuf>,
    pub racks: Option<usize>,
    pub qpus_per_rack: Option<usize>,
    #[serde(default = "default_data")]
    pub data_qubits: u32,
    #[serde(default = "default_buffer")]
    pub buffer_qubits: u32,
    #[serde(default = "default_comm")]
    pub comm_qubits: u32,
    #[serde(default = "default_edge_weight")]
    pub edge_weight: u32,
    pub bsms_per_tor: Option<u32>,
}

fn default_data() -> u32 {
    QpuSpec::default().data_qubits
}
fn default_buffer() -> u32 {
    QpuSpec::default().buffer_qubits
}
fn default_comm() -> u32 {
    QpuSpec::default().comm_qubits
}
fn default_edge_weight() -> u32 {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSection {
    pub benchmark: Option<String>,
    pub qubits: Option<usize>,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    pub demands: Option<PathBuf>,
}

fn default_iterations() -> usize {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerSection {
    pub strategy: String,
    pub lookahead: usize,
    pub threshold: Option<u32>,
    pub distill_copies: u32,
    pub split_enabled: bool,
    pub reservation_enabled: bool,
    pub auto_retry: bool,
    pub audit: bool,
}

impl Default for SchedulerSection {
    fn default() -> Self {
        let d = SchedulerConfig::default();
        SchedulerSection {
            strategy: d.strategy.name().to_string(),
            lookahead: d.lookahead,
            threshold: d.threshold,
            distill_copies: d.distill_copies,
            split_enabled: d.split_enabled,
            reservation_enabled: d.reservation_enabled,
            auto_retry: d.auto_retry,
            audit: d.audit,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub t_in_rack_ms: f64,
    pub t_reconfig_ms: f64,
    pub t_cross_rack_ms: f64,
    pub f_in_rack: f64,
    pub f_cross_rack: f64,
    /// `deterministic` or `stochastic`.
    pub mode: String,
    pub seed: u64,
    pub alpha: f64,
    pub eta_in_rack: f64,
    pub eta_cross: f64,
    pub tau0_ms: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let l = LatencyModel::default();
        let f = FidelityModel::default();
        let s = StochasticParams::default();
        ModelSection {
            t_in_rack_ms: l.t_in_rack_ms,
            t_reconfig_ms: l.t_reconfig_ms,
            t_cross_rack_ms: l.t_cross_rack_ms,
            f_in_rack: f.f_in_rack,
            f_cross_rack: f.f_cross_rack,
            mode: "deterministic".to_string(),
            seed: s.seed,
            alpha: s.alpha,
            eta_in_rack: s.eta_in_rack,
            eta_cross: s.eta_cross,
            tau0_ms: s.tau0_ms,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

/// Everything one simulation needs, resolved from a config.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub topology: NetworkTopology,
    pub demands: Vec<EprDemand>,
    pub scheduler: SchedulerConfig,
    pub latency: LatencyModel,
    pub fidelity: FidelityModel,
}

impl ExperimentConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| anyhow!("config: {e}"))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).with_context(|| format!("in {}", path.display()))
    }

    fn check(&self) -> Result<()> {
        let t = &self.topology;
        match (&t.kind, &t.file) {
            (Some(_), Some(_)) => bail!("topology: set either `kind` or `file`, not both"),
            (None, None) => bail!("topology: one of `kind` or `file` is required"),
            (Some(_), None) if t.racks.is_none() || t.qpus_per_rack.is_none() => {
                bail!("topology: generated topologies need `racks` and `qpus_per_rack`")
            }
            _ => {}
        }
        let w = &self.workload;
        match (&w.benchmark, &w.demands) {
            (Some(_), Some(_)) => bail!("workload: set either `benchmark` or `demands`, not both"),
            (None, None) => bail!("workload: one of `benchmark` or `demands` is required"),
            _ => {}
        }
        if !matches!(self.model.mode.as_str(), "deterministic" | "stochastic") {
            bail!(
                "model.mode: expected `deterministic` or `stochastic`, found `{}`",
                self.model.mode
            );
        }
        Ok(())
    }

    pub fn resolve_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        match &self.output.dir {
            Some(d) => self.resolve_path(d),
            None => PathBuf::from("out").join(&self.id),
        }
    }

    /// Seed after the `QDCSIM_SEED` override.
    pub fn effective_seed(&self) -> Result<u64> {
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| anyhow!("{SEED_ENV}: expected an unsigned integer, found `{v}`")),
            Err(_) => Ok(self.model.seed),
        }
    }

    pub fn topology(&self) -> Result<NetworkTopology> {
        let t = &self.topology;
        if let Some(file) = &t.file {
            let path = self.resolve_path(file);
            return NetworkTopology::load(&path).with_context(|| format!("topology.file {}", path.display()));
        }
        let kind: TopologyKind = t
            .kind
            .as_deref()
            .unwrap_or_default()
            .parse()
            .map_err(|e| anyhow!("topology.kind: {e}"))?;
        let params = TopologyParams {
            kind,
            num_racks: t.racks.unwrap_or_default(),
            qpus_per_rack: t.qpus_per_rack.unwrap_or_default(),
            qpu_spec: QpuSpec {
                data_qubits: t.data_qubits,
                buffer_qubits: t.buffer_qubits,
                comm_qubits: t.comm_qubits,
            },
            edge_weight: t.edge_weight,
            bsms_per_tor: t.bsms_per_tor,
        };
        build_topology(params).map_err(|e| anyhow!("topology: {e}"))
    }

    pub fn demands(&self, topo: &NetworkTopology) -> Result<Vec<EprDemand>> {
        let w = &self.workload;
        if let Some(file) = &w.demands {
            let path = self.resolve_path(file);
            return parse_demand_file(&path).with_context(|| format!("workload.demands {}", path.display()));
        }
        let kind: BenchmarkKind = w
            .benchmark
            .as_deref()
            .unwrap_or_default()
            .parse()
            .map_err(|e| anyhow!("workload.benchmark: {e}"))?;
        let capacity: usize = topo.qpus().map(|q| topo.qpu_spec(q).data_qubits as usize).sum();
        let n = w.qubits.unwrap_or(capacity);
        let placement = place_qubits(n, topo).map_err(|e| anyhow!("workload.qubits: {e}"))?;
        generate_benchmark(kind, n, w.iterations, &placement).map_err(|e| anyhow!("workload: {e}"))
    }

    pub fn scheduler(&self) -> Result<SchedulerConfig> {
        let s = &self.scheduler;
        let strategy: Strategy = s.strategy.parse().map_err(|e| anyhow!("scheduler.strategy: {e}"))?;
        Ok(SchedulerConfig {
            lookahead: s.lookahead,
            threshold: s.threshold,
            strategy,
            distill_copies: s.distill_copies,
            split_enabled: s.split_enabled,
            reservation_enabled: s.reservation_enabled,
            auto_retry: s.auto_retry,
            audit: s.audit,
        })
    }

    pub fn latency(&self) -> Result<LatencyModel> {
        let m = &self.model;
        let stochastic = (m.mode == "stochastic").then_some(StochasticParams {
            alpha: m.alpha,
            eta_in_rack: m.eta_in_rack,
            eta_cross: m.eta_cross,
            tau0_ms: m.tau0_ms,
            seed: self.effective_seed()?,
        });
        Ok(LatencyModel {
            t_in_rack_ms: m.t_in_rack_ms,
            t_reconfig_ms: m.t_reconfig_ms,
            t_cross_rack_ms: m.t_cross_rack_ms,
            stochastic,
        })
    }

    pub fn fidelity(&self) -> FidelityModel {
        FidelityModel {
            f_in_rack: self.model.f_in_rack,
            f_cross_rack: self.model.f_cross_rack,
        }
    }

    pub fn inputs(&self) -> Result<Inputs> {
        let topology = self.topology()?;
        let demands = self.demands(&topology)?;
        Ok(Inputs {
            scheduler: self.scheduler()?,
            latency: self.latency()?,
            fidelity: self.fidelity(),
            topology,
            demands,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
id = "t"
[topology]
kind = "clos"
racks = 2
qpus_per_rack = 2
data_qubits = 2
[workload]
benchmark = "qft"
qubits = 8
"#;

    #[test]
    fn defaults_fill_optional_sections() {
        let c = ExperimentConfig::parse(MINIMAL, Path::new(".")).unwrap();
        let i = c.inputs().unwrap();
        assert_eq!(i.scheduler, SchedulerConfig::default());
        assert_eq!(i.latency, LatencyModel::default());
        assert_eq!(i.topology.num_qpus(), 4);
        assert!(!i.demands.is_empty());
    }

    #[test]
    fn unknown_field_is_named() {
        let text = MINIMAL.replace("qubits = 8", "qubits = 8\nqubitz = 3");
        let err = ExperimentConfig::parse(&text, Path::new(".")).unwrap_err().to_string();
        assert!(err.contains("qubitz"), "{err}");
    }

    #[test]
    fn unknown_benchmark_is_named() {
        let text = MINIMAL.replace("qft", "shor");
        let c = ExperimentConfig::parse(&text, Path::new(".")).unwrap();
        let err = c.inputs().unwrap_err().to_string();
        assert!(err.contains("workload.benchmark"), "{err}");
    }

    #[test]
    fn exactly_one_workload_source() {
        let text = MINIMAL.replace("qubits = 8", "qubits = 8\ndemands = \"x.demands\"");
        assert!(ExperimentConfig::parse(&text, Path::new(".")).is_err());
        let text = MINIMAL.replace("benchmark = \"qft\"\nqubits = 8", "");
        assert!(ExperimentConfig::parse(&text, Path::new(".")).is_err());
    }

    #[test]
    fn bad_mode_is_rejected() {
        let text = format!("{MINIMAL}\n[model]\nmode = \"quantum\"\n");
        let err = ExperimentConfig::parse(&text, Path::new(".")).unwrap_err().to_string();
        assert!(err.contains("model.mode"), "{err}");
    }
}
