use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use int4kv::attention::{decode_step, decode_step_fp, DecodeRequest};
use int4kv::cache::{bytes_per_token, capacity_tokens};
use int4kv::calibration::{CalibrationArtifact, LayerCalibration};
use int4kv::harness::{self, generate_kv, rotated_head_rows, MethodRecipe, ReportFormat};
use int4kv::rotation::{hessian_rotation, RotationSpec, Targets};
use int4kv::sim;
use int4kv::vq::{CodebookKind, KMeans};
use int4kv::{seeds, Error, FloatMatrix, PagedKvCache, Precision};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;

type CmdResult = Result<(), CliError>;

fn prepare(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> CmdResult {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Calibration samples for one layer, one token per row.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerSamples {
    queries: FloatMatrix,
    keys: FloatMatrix,
    values: FloatMatrix,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleFile {
    layers: Vec<LayerSamples>,
}

#[derive(Serialize)]
struct CodebookDump<'a> {
    kind: CodebookKind,
    clusters: usize,
    centroids: &'a FloatMatrix,
}

#[derive(Serialize)]
struct LayerDump<'a> {
    layer: usize,
    order: usize,
    signs: Option<&'a [f64]>,
    learned: Option<&'a [FloatMatrix]>,
    codebooks: Vec<CodebookDump<'a>>,
}

pub fn calibrate(cfg: &RunConfig, out: &Path) -> CmdResult {
    let c = &cfg.calibration;
    let layout = cfg.layout;
    let hd = layout.head_dim();
    let samples: Vec<LayerSamples> = match &c.samples {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            serde_json::from_str::<SampleFile>(&text)?.layers
        }
        None => (0..c.layers)
            .map(|l| {
                let spec = cfg.synthetic.clone().with_seed(seeds::derive(cfg.seed, "layer", l as u64));
                let d = generate_kv(&spec, c.tokens)?;
                Ok(LayerSamples { queries: d.q, keys: d.k, values: d.v })
            })
            .collect::<Result<_, Error>>()?,
    };
    if samples.is_empty() {
        return Err(Error::EmptyCalibration.into());
    }

    let mut layers = Vec::with_capacity(samples.len());
    for (l, s) in samples.iter().enumerate() {
        if s.queries.rows() == 0 || s.keys.rows() == 0 || s.values.rows() == 0 {
            return Err(Error::EmptyCalibration.into());
        }
        let mut base = RotationSpec::hadamard(hd, c.rotation_order, Targets::KeysAndValues)?;
        if c.random_signs {
            base = base.with_random_signs(cfg.seed, l);
        }
        let rotation = hessian_rotation(&s.queries, &layout, &base, c.pooling, c.alpha)?.with_learned_values(c.learned_values);
        let mut codebooks = Vec::new();
        for &clusters in &c.clusters {
            for (x, is_key, kind) in [(&s.keys, true, CodebookKind::Key), (&s.values, false, CodebookKind::Value)] {
                let rows = rotated_head_rows(x, &layout, &rotation, is_key)?;
                let label = if is_key { "calibrate-keys" } else { "calibrate-values" };
                let km = KMeans::new(clusters, seeds::derive(cfg.seed, label, ((l as u64) << 32) | clusters as u64));
                codebooks.push(km.fit(&rows, kind)?.codebook);
            }
        }
        layers.push(LayerCalibration { layer: l, rotation, pooling: c.pooling, codebooks });
    }
    let artifact = CalibrationArtifact { head_dim: hd, alpha: c.alpha, seed: cfg.seed, layers };

    prepare(out)?;
    let path = out.join(&c.artifact);
    let bytes = artifact.to_bytes()?;
    fs::write(&path, &bytes)?;
    let reread = CalibrationArtifact::read(&path)?;
    if reread.to_bytes()? != bytes {
        return Err(Error::Format("artifact does not re-serialize identically".into()).into());
    }
    let dump: Vec<LayerDump> = reread
        .layers
        .iter()
        .map(|l| LayerDump {
            layer: l.layer,
            order: l.rotation.order(),
            signs: l.rotation.signs(),
            learned: l.rotation.learned(),
            codebooks: l
                .codebooks
                .iter()
                .map(|b| CodebookDump { kind: b.kind(), clusters: b.len(), centroids: b.centroids() })
                .collect(),
        })
        .collect();
    write_json(&path.with_extension("json"), &dump)?;
    println!("wrote {} ({} layers, {} bytes)", path.display(), reread.layers.len(), bytes.len());
    Ok(())
}

pub fn bench_quant(cfg: &RunConfig, out: &Path) -> CmdResult {
    let recipes: &[MethodRecipe] = &cfg.methods;
    let report = harness::run_bench(&cfg.bench_config(), recipes)?;
    prepare(out)?;
    let csv = out.join("report.csv");
    let json = out.join("report.json");
    harness::emit_report(&report, &csv, ReportFormat::Csv)?;
    harness::emit_report(&report, &json, ReportFormat::Json)?;
    for (path, format) in [(&csv, ReportFormat::Csv), (&json, ReportFormat::Json)] {
        if harness::load_report(path, format)? != report {
            return Err(Error::Format(format!("{} does not parse back to the report", path.display())).into());
        }
    }

    println!("{:<20} {:>12} {:>12} {:>12} {:>12}", "method", "kv_mse", "logit_rmse", "attn_rmse", "worst_chan");
    for r in recipes {
        let name = r.name();
        let rows: Vec<_> = report.rows_for(&name).collect();
        let med = |f: fn(&harness::ReportRow) -> f64| harness::median(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
        println!(
            "{:<20} {:>12.5e} {:>12.5e} {:>12.5e} {:>12.5e}",
            name,
            med(|r| r.kv_mse),
            med(|r| r.logit_rmse),
            med(|r| r.attn_out_rmse),
            med(|r| r.worst_channel_err)
        );
    }
    println!("wrote {} and {} ({} rows)", csv.display(), json.display(), report.rows.len());
    Ok(())
}

#[derive(Serialize)]
struct AttnRow {
    mode: &'static str,
    payload_bytes_per_token: usize,
    stored_bytes_per_token: usize,
    payload_ratio_vs_bf16: f64,
    stored_ratio_vs_bf16: f64,
    append_us_per_token: f64,
    decode_ms: f64,
    attn_out_rmse: f64,
}

pub fn bench_attn(cfg: &RunConfig, out: &Path) -> CmdResult {
    let layout = cfg.layout;
    let a = &cfg.attn;
    let hd = layout.head_dim();
    let bf16_payload = 4 * layout.kv_width();
    let modes = [
        ("bf16", Precision::Bf16, RotationSpec::identity(hd)),
        ("int4", Precision::Int4, RotationSpec::identity(hd)),
        ("int4_bdr", Precision::Int4, RotationSpec::hadamard(hd, a.rotation_order, Targets::KeysAndValues)?),
    ];
    let pages = a.context_tokens.div_ceil(layout.page_tokens());
    let mut rows = Vec::new();
    for (label, precision, spec) in modes {
        let mut append_s = 0.0;
        let mut decode_s = 0.0;
        let mut sq = 0.0;
        let mut n = 0usize;
        for trial in 0..a.trials {
            let data = generate_kv(&cfg.synthetic.clone().with_seed(seeds::derive(cfg.seed, "attn", trial as u64)), a.context_tokens)?;
            let mut cache = PagedKvCache::new(layout, precision, pages, spec.clone())?;
            let seq = cache.add_sequence();
            let t0 = Instant::now();
            for t in 0..a.context_tokens {
                cache.append_token(seq, data.k.row(t), data.v.row(t))?;
            }
            append_s += t0.elapsed().as_secs_f64();
            let q = FloatMatrix::new(layout.num_q_heads(), hd, data.q.row(0).to_vec())?;
            let t1 = Instant::now();
            let got = decode_step(&DecodeRequest { q: q.clone(), seq }, &cache)?;
            decode_s += t1.elapsed().as_secs_f64();
            let want = decode_step_fp(&q, &data.k, &data.v, &layout)?;
            sq += got.as_slice().iter().zip(want.as_slice()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
            n += want.as_slice().len();
        }
        let payload = match precision {
            Precision::Bf16 => bf16_payload,
            Precision::Int4 => layout.kv_width(),
        };
        let stored = bytes_per_token(&layout, precision);
        rows.push(AttnRow {
            mode: label,
            payload_bytes_per_token: payload,
            stored_bytes_per_token: stored,
            payload_ratio_vs_bf16: bf16_payload as f64 / payload as f64,
            stored_ratio_vs_bf16: bf16_payload as f64 / stored as f64,
            append_us_per_token: 1e6 * append_s / (a.trials * a.context_tokens) as f64,
            decode_ms: 1e3 * decode_s / a.trials as f64,
            attn_out_rmse: (sq / n as f64).sqrt(),
        });
    }
    let budget = 1u64 << 30;
    println!(
        "capacity per GiB: bf16 {} tokens, int4 {} tokens",
        capacity_tokens(&layout, Precision::Bf16, budget),
        capacity_tokens(&layout, Precision::Int4, budget)
    );
    println!("{:<10} {:>9} {:>9} {:>9} {:>9} {:>12} {:>10} {:>12}", "mode", "payload", "stored", "ratio", "true", "append_us", "decode_ms", "attn_rmse");
    for r in &rows {
        println!(
            "{:<10} {:>9} {:>9} {:>9.2} {:>9.2} {:>12.3} {:>10.3} {:>12.5e}",
            r.mode, r.payload_bytes_per_token, r.stored_bytes_per_token, r.payload_ratio_vs_bf16, r.stored_ratio_vs_bf16, r.append_us_per_token, r.decode_ms, r.attn_out_rmse
        );
    }
    prepare(out)?;
    let path = out.join("bench_attn.json");
    write_json(&path, &rows)?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn serve_sim(cfg: &RunConfig, out: &Path) -> CmdResult {
    let sim_cfg = cfg.sim_config();
    let points = sim::sweep(&sim_cfg)?;
    prepare(out)?;
    let rows: Vec<_> = points.iter().map(|p| p.row.clone()).collect();
    let summary_csv = out.join("summary.csv");
    sim::write_sweep_csv(&rows, fs::File::create(&summary_csv)?)?;
    write_json(&out.join("summary.json"), &rows)?;
    if cfg.serve.write_traces {
        let dir = out.join("traces");
        prepare(&dir)?;
        for p in &points {
            for (mode, trace) in &p.traces {
                let path: PathBuf = dir.join(format!("{}_c{}.csv", mode.label(), p.row.concurrency));
                sim::write_trace_csv(trace, fs::File::create(path)?)?;
            }
        }
    }
    println!("{:>5} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>8}", "conc", "sys_bf16", "sys_int4", "req_bf16", "req_int4", "ttft_bf16", "ttft_int4", "paradox");
    for r in &rows {
        println!(
            "{:>5} {:>10.1} {:>10.1} {:>10.2} {:>10.2} {:>10.1} {:>10.1} {:>8}",
            r.concurrency, r.bf16.tps_sys, r.int4.tps_sys, r.bf16.tps_req, r.int4.tps_req, r.bf16.mean_ttft, r.int4.mean_ttft, r.paradox
        );
    }
    println!("wrote {}", summary_csv.display());
    Ok(())
}

pub fn selftest(cfg: &RunConfig, out: &Path) -> CmdResult {
    let checks = int4kv::selftest::run_all(cfg.seed)?;
    for c in &checks {
        println!("{} {:<24} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    prepare(out)?;
    write_json(&out.join("selftest.json"), &checks)?;
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(CliError::Selftest(failed));
    }
    Ok(())
}
