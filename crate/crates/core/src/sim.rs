//! Discrete-event model of a continuous-batching server whose KV page pool
//! bounds how many requests can run at once.
//!
//! Clients are closed-loop: each of `concurrency` clients submits a request,
//! waits for it to finish, and submits the next until `num_requests` have
//! been issued. Admission is strict FIFO and reserves a request's whole KV
//! footprint (input + output tokens, rounded up to pages) up front.
//!
//! One scheduler iteration: admit what fits, prefill the newly admitted
//! requests (their first token appears at the end of prefill), then run one
//! decode step over every active request.

use std::collections::VecDeque;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cache::{capacity_tokens, Precision};
use crate::error::{Error, Result};
use crate::seeds;
use crate::tensor::HeadLayout;

pub const TRACE_COLUMNS: [&str; 5] = ["request_id", "submit", "first_token", "end", "out_tokens"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    pub concurrency: usize,
    pub input_len_mean: usize,
    pub output_len: usize,
    pub num_requests: usize,
    /// Input lengths are uniform in `mean · [1 - jitter, 1 + jitter]`.
    pub input_jitter: f64,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self { concurrency: 8, input_len_mean: 16_384, output_len: 1_024, num_requests: 16, input_jitter: 0.0, seed: 0 }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Workload(m.into()));
        if self.concurrency == 0 || self.num_requests == 0 || self.input_len_mean == 0 {
            return bad("concurrency, num_requests and input_len_mean must be positive");
        }
        if self.output_len < 2 {
            return bad("output_len must be at least 2 (one prefill token plus decode)");
        }
        if !(0.0..1.0).contains(&self.input_jitter) {
            return bad("input_jitter must lie in [0, 1)");
        }
        Ok(())
    }

    fn input_lens(&self) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(self.seed, "input-lens", 0));
        let mean = self.input_len_mean as f64;
        (0..self.num_requests)
            .map(|_| {
                if self.input_jitter == 0.0 {
                    self.input_len_mean
                } else {
                    let f = rng.gen_range(1.0 - self.input_jitter..=1.0 + self.input_jitter);
                    ((mean * f).round() as usize).max(1)
                }
            })
            .collect()
    }
}

/// Parametric step costs, in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    pub prefill_fixed: f64,
    pub prefill_per_token: f64,
    pub decode_fixed: f64,
    pub decode_per_seq: f64,
    /// Attention cost per cached BF16 token per step.
    pub decode_per_cached_token: f64,
    /// Relative cost of reading one INT4 cached token, sidecars included.
    pub int4_read_factor: f64,
    /// Extra per-step cost when rotation is not fused into the cache write.
    pub unfused_rotation_cost: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            prefill_fixed: 0.01,
            prefill_per_token: 5e-5,
            decode_fixed: 8e-3,
            decode_per_seq: 2e-4,
            decode_per_cached_token: 2e-7,
            int4_read_factor: 0.3,
            unfused_rotation_cost: 1e-3,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.prefill_fixed,
            self.prefill_per_token,
            self.decode_fixed,
            self.decode_per_seq,
            self.decode_per_cached_token,
            self.int4_read_factor,
            self.unfused_rotation_cost,
        ];
        if all.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::Workload("cost coefficients must be finite and non-negative".into()));
        }
        if self.decode_fixed + self.decode_per_seq <= 0.0 || self.prefill_fixed + self.prefill_per_token <= 0.0 {
            return Err(Error::Workload("step costs must be positive".into()));
        }
        Ok(())
    }

    pub fn prefill_cost(&self, tokens: usize) -> f64 {
        self.prefill_fixed + self.prefill_per_token * tokens as f64
    }

    pub fn decode_step_cost(&self, mode: KvMode, batch: usize, cached_tokens: usize) -> f64 {
        let read = match mode.precision() {
            Precision::Bf16 => 1.0,
            Precision::Int4 => self.int4_read_factor,
        };
        let rotation = if mode == KvMode::Int4Unfused { self.unfused_rotation_cost } else { 0.0 };
        self.decode_fixed + self.decode_per_seq * batch as f64 + self.decode_per_cached_token * read * cached_tokens as f64 + rotation
    }
}

/// Storage and rotation variant being served.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KvMode {
    Bf16,
    Int4,
    /// INT4 with block rotation fused into the cache write (no extra cost).
    Int4Bdr,
    /// INT4 with rotation as a separate pass.
    Int4Unfused,
}

impl KvMode {
    pub fn precision(self) -> Precision {
        match self {
            KvMode::Bf16 => Precision::Bf16,
            _ => Precision::Int4,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            KvMode::Bf16 => "bf16",
            KvMode::Int4 => "int4",
            KvMode::Int4Bdr => "int4_bdr",
            KvMode::Int4Unfused => "int4_unfused",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub request_id: usize,
    pub submit: f64,
    pub admit: f64,
    pub first_token: f64,
    pub end: f64,
    pub out_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ServingTrace {
    /// Ordered by request id.
    pub requests: Vec<RequestRecord>,
    pub max_batch: usize,
    pub peak_reserved_tokens: usize,
    pub capacity_tokens: usize,
}

struct Active {
    id: usize,
    cached: usize,
    generated: usize,
    reserved_pages: usize,
}

pub fn simulate(
    workload: &WorkloadSpec,
    mode: KvMode,
    layout: &HeadLayout,
    budget_bytes: u64,
    cost: &CostModel,
) -> Result<ServingTrace> {
    workload.validate()?;
    cost.validate()?;
    let pt = layout.page_tokens();
    let capacity = capacity_tokens(layout, mode.precision(), budget_bytes);
    let pool_pages = capacity / pt;
    let inputs = workload.input_lens();
    let pages_for = |i: usize| (inputs[i] + workload.output_len).div_ceil(pt);
    if let Some(i) = (0..inputs.len()).find(|&i| pages_for(i) > pool_pages) {
        return Err(Error::RequestTooLarge { needed: inputs[i] + workload.output_len, capacity: pool_pages * pt });
    }

    let n = workload.num_requests;
    let mut records: Vec<RequestRecord> = (0..n)
        .map(|id| RequestRecord { request_id: id, submit: 0.0, admit: 0.0, first_token: 0.0, end: 0.0, out_tokens: workload.output_len })
        .collect();
    let mut queue: VecDeque<usize> = VecDeque::new();
    let mut issued = 0;
    let mut now = 0.0;
    while issued < workload.concurrency.min(n) {
        queue.push_back(issued);
        issued += 1;
    }
    let mut active: Vec<Active> = Vec::new();
    let mut free_pages = pool_pages;
    let mut trace = ServingTrace { capacity_tokens: pool_pages * pt, ..ServingTrace::default() };

    while !queue.is_empty() || !active.is_empty() {
        let mut admitted = Vec::new();
        while let Some(&id) = queue.front() {
            let need = pages_for(id);
            if need > free_pages {
                break;
            }
            queue.pop_front();
            free_pages -= need;
            records[id].admit = now;
            admitted.push(Active { id, cached: inputs[id], generated: 0, reserved_pages: need });
        }
        trace.peak_reserved_tokens = trace.peak_reserved_tokens.max((pool_pages - free_pages) * pt);
        debug_assert!(active.len() + admitted.len() > 0, "pool cannot be empty while requests wait");

        if !admitted.is_empty() {
            let tokens: usize = admitted.iter().map(|a| inputs[a.id]).sum();
            now += cost.prefill_cost(tokens);
            for a in &mut admitted {
                a.generated = 1;
                records[a.id].first_token = now;
            }
            active.extend(admitted);
        }

        let cached: usize = active.iter().map(|a| a.cached).sum();
        trace.max_batch = trace.max_batch.max(active.len());
        now += cost.decode_step_cost(mode, active.len(), cached);
        for a in &mut active {
            a.cached += 1;
            a.generated += 1;
        }
        let mut i = 0;
        while i < active.len() {
            if active[i].generated >= workload.output_len {
                let done = active.swap_remove(i);
                records[done.id].end = now;
                free_pages += done.reserved_pages;
                if issued < n {
                    records[issued].submit = now;
                    queue.push_back(issued);
                    issued += 1;
                }
            } else {
                i += 1;
            }
        }
        // keep batch order stable regardless of swap_remove
        active.sort_by_key(|a| a.id);
    }
    trace.requests = records;
    Ok(trace)
}

/// `Σ L_out / (max end − min submit)`.
pub fn tps_sys(trace: &ServingTrace) -> f64 {
    let r = &trace.requests;
    if r.is_empty() {
        return 0.0;
    }
    let tokens: usize = r.iter().map(|x| x.out_tokens).sum();
    let start = r.iter().map(|x| x.submit).fold(f64::INFINITY, f64::min);
    let end = r.iter().map(|x| x.end).fold(f64::NEG_INFINITY, f64::max);
    tokens as f64 / (end - start)
}

/// Mean over requests of `L_out / (e2e − TTFT)`, i.e. `L_out / (end − first_token)`.
pub fn tps_req(trace: &ServingTrace) -> f64 {
    let r = &trace.requests;
    if r.is_empty() {
        return 0.0;
    }
    r.iter().map(|x| x.out_tokens as f64 / (x.end - x.first_token)).sum::<f64>() / r.len() as f64
}

pub fn ttft(trace: &ServingTrace) -> Vec<f64> {
    trace.requests.iter().map(|x| x.first_token - x.submit).collect()
}

pub fn mean_ttft(trace: &ServingTrace) -> f64 {
    let t = ttft(trace);
    if t.is_empty() {
        0.0
    } else {
        t.iter().sum::<f64>() / t.len() as f64
    }
}

pub fn write_trace_csv(trace: &ServingTrace, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_COLUMNS)?;
    for r in &trace.requests {
        w.write_record([
            r.request_id.to_string(),
            r.submit.to_string(),
            r.first_token.to_string(),
            r.end.to_string(),
            r.out_tokens.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Headline metrics of one simulated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: KvMode,
    pub concurrency: usize,
    pub tps_sys: f64,
    pub tps_req: f64,
    pub mean_ttft: f64,
    pub max_batch: usize,
    pub capacity_tokens: usize,
}

impl RunSummary {
    pub fn of(trace: &ServingTrace, mode: KvMode, concurrency: usize) -> Self {
        Self {
            mode,
            concurrency,
            tps_sys: tps_sys(trace),
            tps_req: tps_req(trace),
            mean_ttft: mean_ttft(trace),
            max_batch: trace.max_batch,
            capacity_tokens: trace.capacity_tokens,
        }
    }
}

/// Settings for a concurrency sweep over BF16, INT4 and fused INT4+BDR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub layout: HeadLayout,
    pub workload: WorkloadSpec,
    pub cost: CostModel,
    /// Page-pool budget; defaults to exactly two BF16 requests' footprint.
    pub budget_bytes: Option<u64>,
    pub concurrencies: Vec<usize>,
    /// Requests issued per client in a sweep point.
    pub requests_per_client: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            layout: HeadLayout::new(32, 8, 128, 128, HeadLayout::DEFAULT_PAGE_TOKENS).expect("valid default layout"),
            workload: WorkloadSpec::default(),
            cost: CostModel::default(),
            budget_bytes: None,
            concurrencies: vec![1, 4, 8, 16, 32, 64, 128],
            requests_per_client: 2,
        }
    }
}

impl SimConfig {
    pub fn budget(&self) -> u64 {
        self.budget_bytes.unwrap_or_else(|| {
            let per_request = (self.workload.input_len_mean + self.workload.output_len) as u64;
            2 * per_request * 4 * self.layout.kv_width() as u64
        })
    }
}

/// One row of the concurrency sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub concurrency: usize,
    pub bf16: RunSummary,
    pub int4: RunSummary,
    pub int4_bdr: RunSummary,
    /// INT4 wins system throughput while BF16 wins per-request speed.
    pub paradox: bool,
}

pub const SWEEP_COLUMNS: [&str; 11] = [
    "concurrency",
    "tps_sys_bf16",
    "tps_sys_int4",
    "tps_sys_int4_bdr",
    "tps_req_bf16",
    "tps_req_int4",
    "tps_req_int4_bdr",
    "ttft_bf16",
    "ttft_int4",
    "ttft_int4_bdr",
    "paradox",
];

pub struct SweepPoint {
    pub row: SweepRow,
    pub traces: Vec<(KvMode, ServingTrace)>,
}

pub fn sweep(cfg: &SimConfig) -> Result<Vec<SweepPoint>> {
    if cfg.concurrencies.is_empty() || cfg.requests_per_client == 0 {
        return Err(Error::Workload("sweep needs concurrencies and requests_per_client > 0".into()));
    }
    let budget = cfg.budget();
    cfg.concurrencies
        .iter()
        .map(|&c| {
            let workload = WorkloadSpec { concurrency: c, num_requests: c * cfg.requests_per_client, ..cfg.workload.clone() };
            let mut traces = Vec::new();
            let mut summaries = Vec::new();
            for mode in [KvMode::Bf16, KvMode::Int4, KvMode::Int4Bdr] {
                let t = simulate(&workload, mode, &cfg.layout, budget, &cfg.cost)?;
                summaries.push(RunSummary::of(&t, mode, c));
                traces.push((mode, t));
            }
            let int4_bdr = summaries.pop().expect("three modes");
            let int4 = summaries.pop().expect("three modes");
            let bf16 = summaries.pop().expect("three modes");
            let paradox = int4.tps_sys > bf16.tps_sys && bf16.tps_req > int4.tps_req;
            Ok(SweepPoint { row: SweepRow { concurrency: c, bf16, int4, int4_bdr, paradox }, traces })
        })
        .collect()
}

pub fn write_sweep_csv(rows: &[SweepRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SWEEP_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.concurrency.to_string(),
            r.bf16.tps_sys.to_string(),
            r.int4.tps_sys.to_string(),
            r.int4_bdr.tps_sys.to_string(),
            r.bf16.tps_req.to_string(),
            r.int4.tps_req.to_string(),
            r.int4_bdr.tps_req.to_string(),
            r.bf16.mean_ttft.to_string(),
            r.int4.mean_ttft.to_string(),
            r.int4_bdr.mean_ttft.to_string(),
            r.paradox.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: usize, submit: f64, first: f64, end: f64, out: usize) -> RequestRecord {
        RequestRecord { request_id: id, submit, admit: submit, first_token: first, end, out_tokens: out }
    }

    fn trace(r: Vec<RequestRecord>) -> ServingTrace {
        ServingTrace { requests: r, ..ServingTrace::default() }
    }

    #[test]
    fn metric_hand_checks() {
        let one = trace(vec![rec(0, 0.0, 5.0, 10.0, 100)]);
        assert_eq!(tps_sys(&one), 10.0);
        assert_eq!(tps_req(&one), 20.0);
        assert_eq!(ttft(&one), vec![5.0]);
        let two = trace(vec![rec(0, 0.0, 1.0, 2.0, 10), rec(1, 5.0, 6.0, 10.0, 30)]);
        assert_eq!(tps_sys(&two), 4.0);
        assert_eq!(tps_req(&two), (10.0 + 7.5) / 2.0);
        let same = trace(vec![rec(0, 0.0, 5.0, 10.0, 100); 4]);
        assert_eq!(tps_req(&same), 20.0);
    }

    fn small_layout() -> HeadLayout {
        HeadLayout::new(4, 2, 16, 16, 16).unwrap()
    }

    #[test]
    fn uncontended_ttft_is_prefill() {
        let w = WorkloadSpec { concurrency: 1, input_len_mean: 100, output_len: 10, num_requests: 3, ..WorkloadSpec::default() };
        let cost = CostModel::default();
        for mode in [KvMode::Bf16, KvMode::Int4] {
            let t = simulate(&w, mode, &small_layout(), 1 << 30, &cost).unwrap();
            for x in ttft(&t) {
                assert!((x - cost.prefill_cost(100)).abs() < 1e-12);
            }
            assert_eq!(t.max_batch, 1);
        }
    }

    #[test]
    fn capacity_forces_queueing() {
        let layout = small_layout();
        let w = WorkloadSpec { concurrency: 8, input_len_mean: 480, output_len: 32, num_requests: 8, ..WorkloadSpec::default() };
        let budget = 2 * 512 * 4 * layout.kv_width() as u64;
        let bf = simulate(&w, KvMode::Bf16, &layout, budget, &CostModel::default()).unwrap();
        let q4 = simulate(&w, KvMode::Int4, &layout, budget, &CostModel::default()).unwrap();
        assert_eq!(bf.max_batch, 2);
        assert_eq!(q4.max_batch, 8);
        assert!(bf.peak_reserved_tokens <= bf.capacity_tokens);
        // FIFO: admissions follow request order
        for p in bf.requests.windows(2) {
            assert!(p[0].admit <= p[1].admit);
        }
        let big = WorkloadSpec { input_len_mean: 5000, ..w };
        assert!(matches!(simulate(&big, KvMode::Bf16, &layout, budget, &CostModel::default()), Err(Error::RequestTooLarge { .. })));
    }

    #[test]
    fn workload_validation() {
        assert!(WorkloadSpec { output_len: 1, ..WorkloadSpec::default() }.validate().is_err());
        assert!(WorkloadSpec { concurrency: 0, ..WorkloadSpec::default() }.validate().is_err());
        assert!(serde_json::from_str::<WorkloadSpec>(r#"{"concurrency": 2, "extra": 1}"#).is_err());
    }

    #[test]
    fn cost_is_monotone() {
        let c = CostModel::default();
        assert!(c.decode_step_cost(KvMode::Bf16, 2, 10) < c.decode_step_cost(KvMode::Bf16, 3, 10));
        assert!(c.decode_step_cost(KvMode::Bf16, 2, 10) < c.decode_step_cost(KvMode::Bf16, 2, 11));
        assert_eq!(c.decode_step_cost(KvMode::Int4, 2, 10), c.decode_step_cost(KvMode::Int4Bdr, 2, 10));
        assert!(c.decode_step_cost(KvMode::Int4, 2, 10) < c.decode_step_cost(KvMode::Int4Unfused, 2, 10));
    }
}
