//! Synthetic KV activations with channel outliers, and a method matrix that
//! measures reconstruction, logit and attention-output error against the
//! full-precision decode.
//!
//! All randomness for one run flows from `SyntheticSpec::seed` through
//! [`seeds::derive`](crate::seeds::derive) with the labels `keys`, `values`,
//! `queries`, `mixing`, `calibration` and `kmeans`.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{StandardNormal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{decode_step_flat, decode_step_fp};
use crate::error::{Error, Result};
use crate::int4::{dequantize_into, packed_len, quantize_into};
use crate::rotation::{hessian_rotation, Pooling, RotationSpec, Targets, DEFAULT_ALPHA};
use crate::seeds;
use crate::tensor::{FloatMatrix, HeadLayout};
use crate::vq::{Codebook, CodebookKind, KMeans};

/// Frozen CSV header.
pub const CSV_COLUMNS: [&str; 6] = ["method", "kv_mse", "logit_rmse", "attn_out_rmse", "worst_channel_err", "seed"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Correlation {
    /// `L = I + strength · G / sqrt(dim)` with Gaussian `G` drawn from the seed.
    Random { strength: f64 },
    Matrix(FloatMatrix),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub num_kv_heads: usize,
    pub num_q_heads: usize,
    pub base_sigma: f64,
    /// `(channel, std multiplier)`, applied to K and V of every head.
    pub outlier_channels: Vec<(usize, f64)>,
    /// Row-vector mixing `x ← x · L` applied to K and V after outliers.
    pub correlation: Option<Correlation>,
    /// Student-t degrees of freedom for the base noise (rescaled to unit
    /// variance); Gaussian when absent.
    pub heavy_tail_df: Option<f64>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            dim: 128,
            num_kv_heads: 8,
            num_q_heads: 32,
            base_sigma: 1.0,
            outlier_channels: vec![(3, 50.0), (67, 50.0)],
            correlation: None,
            heavy_tail_df: Some(4.0),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Default profile mixed across the full head dimension.
    pub fn correlated() -> Self {
        Self { correlation: Some(Correlation::Random { strength: 0.5 }), ..Self::default() }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn layout(&self) -> Result<HeadLayout> {
        HeadLayout::new(self.num_q_heads, self.num_kv_heads, self.dim, self.dim, HeadLayout::DEFAULT_PAGE_TOKENS)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config { method: "synthetic".into(), reason: m });
        self.layout()?;
        if !(self.base_sigma > 0.0 && self.base_sigma.is_finite()) {
            return bad(format!("base_sigma must be positive, got {}", self.base_sigma));
        }
        for &(c, m) in &self.outlier_channels {
            if c >= self.dim {
                return bad(format!("outlier channel {c} is outside dim {}", self.dim));
            }
            if !(m >= 1.0 && m.is_finite()) {
                return bad(format!("outlier multiplier {m} on channel {c} is below 1"));
            }
        }
        if let Some(df) = self.heavy_tail_df {
            if !(df > 2.0 && df.is_finite()) {
                return bad(format!("heavy_tail_df must exceed 2 for finite variance, got {df}"));
            }
        }
        match &self.correlation {
            Some(Correlation::Matrix(m)) if m.rows() != self.dim || m.cols() != self.dim => {
                bad(format!("correlation is {}x{}, dim is {}", m.rows(), m.cols(), self.dim))
            }
            Some(Correlation::Random { strength }) if !strength.is_finite() => bad("non-finite mixing strength".into()),
            _ => Ok(()),
        }
    }

    /// Replace a random correlation by its concrete matrix, so splits drawn
    /// with other seeds share the same mixing.
    pub fn resolved(&self) -> Result<Self> {
        let mut out = self.clone();
        if let Some(Correlation::Random { strength }) = self.correlation {
            let d = self.dim;
            let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(self.seed, "mixing", 0));
            let scale = strength / (d as f64).sqrt();
            let mut l = FloatMatrix::identity(d);
            for i in 0..d {
                for (j, x) in l.row_mut(i).iter_mut().enumerate() {
                    let g: f64 = rng.sample(StandardNormal);
                    *x = if i == j { 1.0 } else { 0.0 } + scale * g;
                }
            }
            out.correlation = Some(Correlation::Matrix(l));
        }
        Ok(out)
    }

    fn noise(&self, rng: &mut ChaCha8Rng) -> f64 {
        let z = match self.heavy_tail_df {
            Some(df) => {
                let t: f64 = rng.sample(StudentT::new(df).expect("validated"));
                t * ((df - 2.0) / df).sqrt()
            }
            None => rng.sample(StandardNormal),
        };
        self.base_sigma * z
    }
}

/// One split of synthetic activations, one token per row.
#[derive(Debug, Clone, PartialEq)]
pub struct KvData {
    /// `tokens × num_kv_heads·dim`.
    pub k: FloatMatrix,
    pub v: FloatMatrix,
    /// `tokens × num_q_heads·dim`.
    pub q: FloatMatrix,
}

pub fn generate_kv(spec: &SyntheticSpec, tokens: usize) -> Result<KvData> {
    spec.validate()?;
    let spec = spec.resolved()?;
    let d = spec.dim;
    let mixing = match &spec.correlation {
        Some(Correlation::Matrix(m)) => Some(m),
        _ => None,
    };
    let kv = |label: &str| -> Result<FloatMatrix> {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(spec.seed, label, 0));
        let mut out = FloatMatrix::zeros(tokens, spec.num_kv_heads * d);
        let mut raw = vec![0.0; d];
        for t in 0..tokens {
            for head in out.row_mut(t).chunks_exact_mut(d) {
                raw.iter_mut().for_each(|x| *x = spec.noise(&mut rng));
                for &(c, m) in &spec.outlier_channels {
                    raw[c] *= m;
                }
                match mixing {
                    Some(l) => l.vec_mul(&raw, head),
                    None => head.copy_from_slice(&raw),
                }
            }
        }
        Ok(out)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(spec.seed, "queries", 0));
    let qw = spec.num_q_heads * d;
    let q = FloatMatrix::new(tokens, qw, (0..tokens * qw).map(|_| spec.noise(&mut rng)).collect())?;
    Ok(KvData { k: kv("keys")?, v: kv("values")?, q })
}

/// Key and value codebooks for residual VQ, in rotated space.
#[derive(Debug, Clone, PartialEq)]
pub struct VqBooks {
    pub keys: Codebook,
    pub values: Codebook,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodConfig {
    pub name: String,
    pub rotation: Option<RotationSpec>,
    pub codebooks: Option<VqBooks>,
    /// The rotation carries a learned, query-derived part.
    pub hessian: bool,
    /// `false` keeps rotated K/V in full precision.
    pub quantize: bool,
}

impl MethodConfig {
    pub fn full_precision() -> Self {
        Self { name: "fp".into(), rotation: None, codebooks: None, hessian: false, quantize: false }
    }

    pub fn int4(name: impl Into<String>, rotation: Option<RotationSpec>) -> Self {
        Self { name: name.into(), rotation, codebooks: None, hessian: false, quantize: true }
    }

    fn validate(&self, layout: &HeadLayout) -> Result<()> {
        let bad = |r: String| Err(Error::Config { method: self.name.clone(), reason: r });
        if self.name.is_empty() {
            return bad("method name is empty".into());
        }
        if let Some(spec) = &self.rotation {
            if let Err(e) = spec.check_layout(layout) {
                return bad(e.to_string());
            }
        }
        if let Some(books) = &self.codebooks {
            if !self.quantize {
                return bad("codebooks require quantization".into());
            }
            for b in [&books.keys, &books.values] {
                if b.dim() != layout.head_dim() {
                    return bad(format!("codebook dim {} differs from head_dim {}", b.dim(), layout.head_dim()));
                }
            }
        }
        if self.hessian && self.rotation.as_ref().and_then(|r| r.learned()).is_none() {
            return bad("hessian method has no learned rotation".into());
        }
        Ok(())
    }
}

/// Declarative method description, resolved against a calibration split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MethodRecipe {
    Fp,
    Int4,
    Bdr {
        order: usize,
        #[serde(default)]
        keys_only: bool,
        #[serde(default)]
        random_signs: bool,
    },
    Kmeans {
        clusters: usize,
        #[serde(default)]
        bdr_order: Option<usize>,
        #[serde(default = "default_max_iters")]
        max_iters: usize,
    },
    Hessian {
        order: usize,
        #[serde(default)]
        pooling: Pooling,
        #[serde(default = "default_alpha")]
        alpha: f64,
        #[serde(default)]
        learned_values: bool,
    },
}

fn default_max_iters() -> usize {
    100
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

impl MethodRecipe {
    pub fn name(&self) -> String {
        match self {
            Self::Fp => "fp".into(),
            Self::Int4 => "int4".into(),
            Self::Bdr { order, keys_only, random_signs } => format!(
                "bdr-{order}{}{}",
                if *keys_only { "-k" } else { "" },
                if *random_signs { "-rs" } else { "" }
            ),
            Self::Kmeans { clusters, bdr_order: None, .. } => format!("km-c{clusters}"),
            Self::Kmeans { clusters, bdr_order: Some(o), .. } => format!("km-c{clusters}+bdr-{o}"),
            Self::Hessian { order, .. } => format!("hessian+bdr-{order}"),
        }
    }

    pub fn needs_calibration(&self) -> bool {
        matches!(self, Self::Kmeans { .. } | Self::Hessian { .. })
    }

    pub fn resolve(&self, layout: &HeadLayout, calib: Option<&KvData>, seed: u64) -> Result<MethodConfig> {
        let name = self.name();
        let wrap = |e: Error| match e {
            e @ Error::Config { .. } => e,
            e => Error::Config { method: name.clone(), reason: e.to_string() },
        };
        let hd = layout.head_dim();
        let hadamard = |order: usize, targets| RotationSpec::hadamard(hd, order, targets).map_err(wrap);
        let calib = || calib.ok_or_else(|| wrap(Error::EmptyCalibration));
        Ok(match self {
            Self::Fp => MethodConfig { name, ..MethodConfig::full_precision() },
            Self::Int4 => MethodConfig::int4(name, None),
            Self::Bdr { order, keys_only, random_signs } => {
                let targets = if *keys_only { Targets::KeysOnly } else { Targets::KeysAndValues };
                let mut spec = hadamard(*order, targets)?;
                if *random_signs {
                    spec = spec.with_random_signs(seed, 0);
                }
                MethodConfig::int4(name, Some(spec))
            }
            Self::Kmeans { clusters, bdr_order, max_iters } => {
                let spec = match bdr_order {
                    Some(o) => hadamard(*o, Targets::KeysAndValues)?,
                    None => RotationSpec::identity(hd),
                };
                let data = calib()?;
                let fit = |x: &FloatMatrix, is_key: bool, label: &str| -> Result<Codebook> {
                    let samples = rotated_head_rows(x, layout, &spec, is_key)?;
                    let km = KMeans { clusters: *clusters, max_iters: *max_iters, seed: seeds::derive(seed, label, 0) };
                    let kind = if is_key { CodebookKind::Key } else { CodebookKind::Value };
                    Ok(km.fit(&samples, kind)?.codebook)
                };
                let keys = fit(&data.k, true, "kmeans-keys").map_err(wrap)?;
                let values = fit(&data.v, false, "kmeans-values").map_err(wrap)?;
                MethodConfig {
                    name,
                    rotation: bdr_order.map(|_| spec),
                    codebooks: Some(VqBooks { keys, values }),
                    hessian: false,
                    quantize: true,
                }
            }
            Self::Hessian { order, pooling, alpha, learned_values } => {
                let base = hadamard(*order, Targets::KeysAndValues)?;
                let spec = hessian_rotation(&calib()?.q, layout, &base, *pooling, *alpha)
                    .map_err(wrap)?
                    .with_learned_values(*learned_values);
                MethodConfig { name, rotation: Some(spec), codebooks: None, hessian: true, quantize: true }
            }
        })
    }
}

impl std::str::FromStr for MethodRecipe {
    type Err = Error;

    /// Parse the names produced by [`MethodRecipe::name`].
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config { method: s.to_string(), reason: "unrecognized method name".into() };
        let num = |x: &str| x.parse::<usize>().map_err(|_| bad());
        match s {
            "fp" => return Ok(Self::Fp),
            "int4" => return Ok(Self::Int4),
            _ => {}
        }
        if let Some(order) = s.strip_prefix("hessian+bdr-") {
            return Ok(Self::Hessian { order: num(order)?, pooling: Pooling::Global, alpha: DEFAULT_ALPHA, learned_values: false });
        }
        if let Some(rest) = s.strip_prefix("km-c") {
            let (c, bdr) = match rest.split_once("+bdr-") {
                Some((c, o)) => (c, Some(num(o)?)),
                None => (rest, None),
            };
            return Ok(Self::Kmeans { clusters: num(c)?, bdr_order: bdr, max_iters: default_max_iters() });
        }
        if let Some(rest) = s.strip_prefix("bdr-") {
            let (rest, random_signs) = rest.strip_suffix("-rs").map_or((rest, false), |r| (r, true));
            let (order, keys_only) = rest.strip_suffix("-k").map_or((rest, false), |r| (r, true));
            return Ok(Self::Bdr { order: num(order)?, keys_only, random_signs });
        }
        Err(bad())
    }
}

/// Every head vector of `x` rotated into the method's space, one per row.
pub fn rotated_head_rows(x: &FloatMatrix, layout: &HeadLayout, spec: &RotationSpec, keys: bool) -> Result<FloatMatrix> {
    let hd = layout.head_dim();
    let mut data = x.as_slice().to_vec();
    for row in data.chunks_exact_mut(layout.kv_width()) {
        for (h, head) in row.chunks_exact_mut(hd).enumerate() {
            if keys {
                spec.forward_key(h, head);
            } else {
                spec.forward_value(h, head);
            }
        }
    }
    FloatMatrix::new(x.rows() * layout.num_kv_heads(), hd, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportRow {
    pub method: String,
    pub kv_mse: f64,
    pub logit_rmse: f64,
    pub attn_out_rmse: f64,
    pub worst_channel_err: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorReport {
    pub rows: Vec<ReportRow>,
}

impl ErrorReport {
    pub fn rows_for<'a>(&'a self, method: &'a str) -> impl Iterator<Item = &'a ReportRow> + 'a {
        self.rows.iter().filter(move |r| r.method == method)
    }
}

/// Evaluate every method on the same context and decode queries.
///
/// `queries` holds one decode step per row (`num_q_heads · head_dim` wide).
pub fn run_matrix(
    methods: &[MethodConfig],
    data: &KvData,
    queries: &FloatMatrix,
    layout: &HeadLayout,
    seed: u64,
) -> Result<Vec<ReportRow>> {
    let mut names = HashSet::new();
    for m in methods {
        m.validate(layout)?;
        if !names.insert(m.name.as_str()) {
            return Err(Error::Config { method: m.name.clone(), reason: "duplicate method name".into() });
        }
    }
    let (w, hd, nq) = (layout.kv_width(), layout.head_dim(), layout.num_q_heads());
    if data.k.cols() != w || data.v.cols() != w || data.k.rows() != data.v.rows() {
        return Err(crate::error::shape_err("K/V do not match the layout"));
    }
    if queries.cols() != layout.q_width() {
        return Err(crate::error::shape_err("query rows do not match the layout"));
    }
    let query_heads: Vec<FloatMatrix> = queries
        .iter_rows()
        .map(|r| FloatMatrix::new(nq, hd, r.to_vec()))
        .collect::<Result<_>>()?;
    let reference: Vec<FloatMatrix> = query_heads
        .iter()
        .map(|q| decode_step_fp(q, &data.k, &data.v, layout))
        .collect::<Result<_>>()?;

    methods
        .par_iter()
        .map(|m| evaluate(m, data, &query_heads, &reference, layout, seed))
        .collect()
}

struct Reconstruction {
    rotated: FloatMatrix,
    original: FloatMatrix,
}

fn reconstruct(method: &MethodConfig, x: &FloatMatrix, layout: &HeadLayout, keys: bool) -> Result<Reconstruction> {
    let hd = layout.head_dim();
    let identity = RotationSpec::identity(hd);
    let spec = method.rotation.as_ref().unwrap_or(&identity);
    let book = method.codebooks.as_ref().map(|b| if keys { &b.keys } else { &b.values });
    let mut rotated = x.clone();
    let mut original = x.clone();
    let mut bytes = vec![0u8; packed_len(hd)];
    for t in 0..x.rows() {
        for (h, head) in rotated.row_mut(t).chunks_exact_mut(hd).enumerate() {
            if keys {
                spec.forward_key(h, head);
            } else {
                spec.forward_value(h, head);
            }
            if !method.quantize {
                continue;
            }
            match book {
                Some(b) => {
                    let back = b.decode(&b.encode(head)?)?;
                    head.copy_from_slice(&back);
                }
                None => {
                    let p = quantize_into(head, &mut bytes)?;
                    dequantize_into(&bytes, &p, head);
                }
            }
        }
        original.row_mut(t).copy_from_slice(rotated.row(t));
        for (h, head) in original.row_mut(t).chunks_exact_mut(hd).enumerate() {
            if keys {
                spec.inverse_key(h, head);
            } else {
                spec.inverse_value(h, head);
            }
        }
    }
    Ok(Reconstruction { rotated, original })
}

fn rms(sum_sq: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        (sum_sq / n as f64).sqrt()
    }
}

fn evaluate(
    method: &MethodConfig,
    data: &KvData,
    queries: &[FloatMatrix],
    reference: &[FloatMatrix],
    layout: &HeadLayout,
    seed: u64,
) -> Result<ReportRow> {
    let hd = layout.head_dim();
    let (k, v) = if method.quantize || method.rotation.is_some() {
        (reconstruct(method, &data.k, layout, true)?, reconstruct(method, &data.v, layout, false)?)
    } else {
        let same = |x: &FloatMatrix| Reconstruction { rotated: x.clone(), original: x.clone() };
        (same(&data.k), same(&data.v))
    };
    let exact = !method.quantize;

    let mut channel_sq = vec![0.0; hd];
    let mut total_sq = 0.0;
    for (rec, src) in [(&k.original, &data.k), (&v.original, &data.v)] {
        for (i, (a, b)) in rec.as_slice().iter().zip(src.as_slice()).enumerate() {
            let e = if exact { 0.0 } else { (a - b) * (a - b) };
            channel_sq[i % hd] += e;
            total_sq += e;
        }
    }
    let n = 2 * data.k.rows() * layout.kv_width();
    let per_channel = n / hd.max(1);
    let kv_mse = if n == 0 { 0.0 } else { total_sq / n as f64 };
    let worst_channel_err = channel_sq.iter().map(|&s| rms(s, per_channel)).fold(0.0, f64::max);

    let scale = 1.0 / (hd as f64).sqrt();
    let mut logit_sq = 0.0;
    let mut logit_n = 0;
    let mut out_sq = 0.0;
    let mut out_n = 0;
    let identity = RotationSpec::identity(hd);
    let spec = method.rotation.as_ref().unwrap_or(&identity);
    for (q, fp) in queries.iter().zip(reference) {
        for h in 0..layout.num_q_heads() {
            let kv = layout.kv_head_for(h);
            for t in 0..data.k.rows() {
                let cols = kv * hd..(kv + 1) * hd;
                let exact_logit = crate::tensor::dot(q.row(h), &data.k.row(t)[cols.clone()]) * scale;
                let approx = crate::tensor::dot(q.row(h), &k.original.row(t)[cols]) * scale;
                let e = if exact { 0.0 } else { approx - exact_logit };
                logit_sq += e * e;
                logit_n += 1;
            }
        }
        if exact {
            out_n += fp.as_slice().len();
            continue;
        }
        let out = decode_step_flat(q, &k.rotated, &v.rotated, layout, spec)?.output;
        out_sq += out.as_slice().iter().zip(fp.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        out_n += fp.as_slice().len();
    }
    Ok(ReportRow {
        method: method.name.clone(),
        kv_mse,
        logit_rmse: rms(logit_sq, logit_n),
        attn_out_rmse: rms(out_sq, out_n),
        worst_channel_err,
        seed,
    })
}

/// Sizes and seeds of a multi-seed benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub synthetic: SyntheticSpec,
    pub context_tokens: usize,
    pub query_tokens: usize,
    pub calibration_tokens: usize,
    pub seeds: Vec<u64>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            synthetic: SyntheticSpec::default(),
            context_tokens: 256,
            query_tokens: 4,
            calibration_tokens: 512,
            seeds: (0..8).collect(),
        }
    }
}

/// Run every recipe on every seed; rows come out seed-major, recipe order within.
pub fn run_bench(cfg: &BenchConfig, recipes: &[MethodRecipe]) -> Result<ErrorReport> {
    cfg.synthetic.validate()?;
    if cfg.context_tokens == 0 || cfg.query_tokens == 0 {
        return Err(Error::Config { method: "bench".into(), reason: "context and query token counts must be positive".into() });
    }
    let layout = cfg.synthetic.layout()?;
    let calibrate = recipes.iter().any(MethodRecipe::needs_calibration);
    let per_seed: Vec<Vec<ReportRow>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let spec = cfg.synthetic.clone().with_seed(seed).resolved()?;
            let data = generate_kv(&spec, cfg.context_tokens)?;
            let decode = generate_kv(&spec.clone().with_seed(seeds::derive(seed, "decode", 0)), cfg.query_tokens)?;
            let calib = if calibrate {
                if cfg.calibration_tokens == 0 {
                    return Err(Error::EmptyCalibration);
                }
                Some(generate_kv(&spec.clone().with_seed(seeds::derive(seed, "calibration", 0)), cfg.calibration_tokens)?)
            } else {
                None
            };
            let methods = recipes
                .iter()
                .map(|r| r.resolve(&layout, calib.as_ref(), seed))
                .collect::<Result<Vec<_>>>()?;
            run_matrix(&methods, &data, &decode.q, &layout, seed)
        })
        .collect::<Result<_>>()?;
    Ok(ErrorReport { rows: per_seed.into_iter().flatten().collect() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
}

pub fn write_csv(report: &ErrorReport, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_COLUMNS)?;
    for r in &report.rows {
        w.write_record([
            r.method.clone(),
            r.kv_mse.to_string(),
            r.logit_rmse.to_string(),
            r.attn_out_rmse.to_string(),
            r.worst_channel_err.to_string(),
            r.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(input: impl Read) -> Result<ErrorReport> {
    let mut r = csv::Reader::from_reader(input);
    if r.headers()?.iter().ne(CSV_COLUMNS) {
        return Err(Error::Format(format!("unexpected report header {:?}", r.headers()?)));
    }
    let rows = r.deserialize().collect::<std::result::Result<Vec<ReportRow>, _>>()?;
    Ok(ErrorReport { rows })
}

pub fn emit_report(report: &ErrorReport, path: &Path, format: ReportFormat) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    match format {
        ReportFormat::Csv => write_csv(report, file),
        ReportFormat::Json => {
            let mut file = file;
            serde_json::to_writer_pretty(&mut file, report)?;
            file.write_all(b"\n")?;
            file.flush()?;
            Ok(())
        }
    }
}

pub fn load_report(path: &Path, format: ReportFormat) -> Result<ErrorReport> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    match format {
        ReportFormat::Csv => read_csv(file),
        ReportFormat::Json => Ok(serde_json::from_reader(file)?),
    }
}

/// Median of a non-empty slice (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
