//! Run configuration: a versioned JSON file, overridden by command-line flags.

use std::path::{Path, PathBuf};

use int4kv::harness::{BenchConfig, MethodRecipe, SyntheticSpec};
use int4kv::rotation::{Pooling, DEFAULT_ALPHA};
use int4kv::sim::{CostModel, SimConfig, WorkloadSpec};
use int4kv::HeadLayout;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;
pub const OUT_DIR_ENV: &str = "INT4KV_OUT_DIR";
const FALLBACK_OUT_DIR: &str = "int4kv-out";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub layout: HeadLayout,
    pub synthetic: SyntheticSpec,
    pub bench: BenchSection,
    pub methods: Vec<MethodRecipe>,
    pub calibration: CalibrationSection,
    pub attn: AttnSection,
    pub serve: ServeSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub context_tokens: usize,
    pub query_tokens: usize,
    pub calibration_tokens: usize,
    /// Seeds `seed .. seed + num_seeds`.
    pub num_seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSection {
    pub layers: usize,
    pub rotation_order: usize,
    pub random_signs: bool,
    pub pooling: Pooling,
    pub alpha: f64,
    pub learned_values: bool,
    /// Codebook sizes fitted for K and V of every layer.
    pub clusters: Vec<usize>,
    pub tokens: usize,
    /// JSON file with `queries`, `keys` and `values` matrices; synthetic
    /// data is used when absent.
    pub samples: Option<PathBuf>,
    pub artifact: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttnSection {
    pub context_tokens: usize,
    pub trials: usize,
    pub rotation_order: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    pub workload: WorkloadSpec,
    pub cost: CostModel,
    pub budget_bytes: Option<u64>,
    pub concurrencies: Vec<usize>,
    pub requests_per_client: usize,
    pub write_traces: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            output_dir: None,
            layout: HeadLayout::new(32, 8, 128, 128, HeadLayout::DEFAULT_PAGE_TOKENS).expect("valid default layout"),
            synthetic: SyntheticSpec::default(),
            bench: BenchSection::default(),
            methods: ["fp", "int4", "bdr-16", "bdr-64", "bdr-128", "km-c16+bdr-128", "hessian+bdr-128"]
                .iter()
                .map(|n| n.parse().expect("built-in method names parse"))
                .collect(),
            calibration: CalibrationSection::default(),
            attn: AttnSection::default(),
            serve: ServeSection::default(),
        }
    }
}

impl Default for BenchSection {
    fn default() -> Self {
        Self { context_tokens: 256, query_tokens: 4, calibration_tokens: 512, num_seeds: 8 }
    }
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self {
            layers: 1,
            rotation_order: 128,
            random_signs: false,
            pooling: Pooling::Global,
            alpha: DEFAULT_ALPHA,
            learned_values: false,
            clusters: vec![16],
            tokens: 512,
            samples: None,
            artifact: "calibration.bin".into(),
        }
    }
}

impl Default for AttnSection {
    fn default() -> Self {
        Self { context_tokens: 1024, trials: 4, rotation_order: 128 }
    }
}

impl Default for ServeSection {
    fn default() -> Self {
        let sim = SimConfig::default();
        Self {
            workload: sim.workload,
            cost: sim.cost,
            budget_bytes: None,
            concurrencies: vec![1, 4, 8, 16, 32, 64, 128],
            requests_per_client: sim.requests_per_client,
            write_traces: true,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    /// Flag > config file > environment > built-in default.
    pub fn resolve_out_dir(&self, flag: Option<PathBuf>) -> PathBuf {
        flag.or_else(|| self.output_dir.clone())
            .or_else(|| std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(FALLBACK_OUT_DIR))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version));
        }
        let s = &self.synthetic;
        let l = &self.layout;
        if (s.dim, s.num_kv_heads, s.num_q_heads) != (l.head_dim(), l.num_kv_heads(), l.num_q_heads()) {
            return bad(format!(
                "synthetic dims ({} dim, {} kv, {} q heads) disagree with layout ({}, {}, {})",
                s.dim,
                s.num_kv_heads,
                s.num_q_heads,
                l.head_dim(),
                l.num_kv_heads(),
                l.num_q_heads()
            ));
        }
        s.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.bench.num_seeds == 0 || self.bench.context_tokens == 0 || self.bench.query_tokens == 0 {
            return bad("bench.num_seeds, context_tokens and query_tokens must be positive".into());
        }
        let c = &self.calibration;
        if c.layers == 0 || c.artifact.is_empty() {
            return bad("calibration.layers must be positive and artifact named".into());
        }
        if c.clusters.contains(&0) {
            return bad("calibration.clusters must be positive".into());
        }
        if self.attn.trials == 0 || self.attn.context_tokens == 0 {
            return bad("attn.trials and attn.context_tokens must be positive".into());
        }
        let sv = &self.serve;
        if sv.concurrencies.is_empty() || sv.concurrencies.contains(&0) || sv.requests_per_client == 0 {
            return bad("serve.concurrencies must be non-empty and positive".into());
        }
        sv.workload.validate().map_err(|e| CliError::Config(e.to_string()))?;
        sv.cost.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn bench_config(&self) -> BenchConfig {
        BenchConfig {
            synthetic: self.synthetic.clone(),
            context_tokens: self.bench.context_tokens,
            query_tokens: self.bench.query_tokens,
            calibration_tokens: self.bench.calibration_tokens,
            seeds: (0..self.bench.num_seeds as u64).map(|i| self.seed + i).collect(),
        }
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            layout: self.layout,
            workload: self.serve.workload.clone(),
            cost: self.serve.cost.clone(),
            budget_bytes: self.serve.budget_bytes,
            concurrencies: self.serve.concurrencies.clone(),
            requests_per_client: self.serve.requests_per_client,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&json).unwrap(), c);
    }

    #[test]
    fn unknown_keys_and_versions_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"schema_version": 1, "sed": 3}"#).is_err());
        let c: RunConfig = serde_json::from_str(r#"{"schema_version": 9}"#).unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn out_dir_precedence() {
        let c = RunConfig { output_dir: Some("from-file".into()), ..RunConfig::default() };
        assert_eq!(c.resolve_out_dir(Some("flag".into())), PathBuf::from("flag"));
        assert_eq!(c.resolve_out_dir(None), PathBuf::from("from-file"));
    }
}
