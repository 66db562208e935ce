//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Runs without the libtest harness so the lines always print.

use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use neuroedge::bridge::{start_session, BridgeConfig};
use neuroedge::emulator::{run_emulator, EmulatorConfig, Pacing, ScriptStep, SessionScript};
use neuroedge::nn::ops::{conv1d, fully_connected, global_avg_pool, maxpool1d, relu, softmax};
use neuroedge::nn::quant::quantize_weights;
use neuroedge::nn::{
    infer, infer_quant, prepare_input, quantize_model, AnyModel, Conv1dLayer, FcLayer, Layer, Model, Tensor,
};
use neuroedge::protocol::{
    crc8_maxim, decode_command, encode_command, encode_frame, AcquisitionConfig, Control, StreamDecoder,
};
use neuroedge::runtime::{
    bench_report, evaluate, run_pipeline, Cue, CueSchedule, LogRow, Mode, ModelSource, PipelineConfig, PredictionLog,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{conv_oracle, crc8_msb_first_oracle, kahan_mean, rand_tensor, random_windows, softmax_f64};

// Pinned tolerances.
const PROTOCOL_CASES: usize = 10_000;
const PROTOCOL_BUDGET: Duration = Duration::from_secs(10);
const WARMUP: u64 = 1000;
const WINDOW_BYTES: usize = 7680;
const ORACLE_CASES: usize = 1000;
const ORACLE_REL_TOL: f64 = 1e-5;
const QUANT_AGREEMENT_MIN: f64 = 0.95;
const QUANT_CALIB_WINDOWS: usize = 100;
const QUANT_EVAL_WINDOWS: usize = 1000;
const PARAM_COUNT: usize = 2855;
const RUN_SECONDS: u64 = 60;
const EXPECTED_WINDOWS: u64 = 1536;
const WINDOW_COUNT_TOL: u64 = 31;
const E2E_P95_MAX_MS: f64 = 39.0;
const WINDOW_RATE: f64 = 25.6;
const WINDOW_RATE_REL_TOL: f64 = 0.02;
const CUE_OFFSET_S: f64 = 1.365;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn rel_close(got: f64, want: f64, tol: f64) -> bool {
    // relative, with a floor so an exact zero is still comparable
    (got - want).abs() <= tol * want.abs().max(1e-6)
}

fn protocol_conformance() -> Check {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x9C);
    ensure(crc8_maxim(b"123456789") == 0xA1, "check string")?;
    for _ in 0..PROTOCOL_CASES {
        let n = rng.random_range(0..128);
        let data: Vec<u8> = (0..n).map(|_| rng.random()).collect();
        ensure(
            crc8_maxim(&data) == crc8_msb_first_oracle(&data),
            format!("crc mismatch on {data:?}"),
        )?;
    }
    for _ in 0..PROTOCOL_CASES {
        let cfg = AcquisitionConfig {
            sample_rate_hz: rng.random_range(1..=u16::MAX),
            channel_count: rng.random_range(1..=384),
            highpass_centihz: rng.random(),
            lowpass_hz: rng.random(),
            detection_mode: rng.random(),
            analog_out: rng.random(),
        };
        let ctl = if rng.random() { Control::Start } else { Control::Stop };
        let frame = encode_command(&cfg, ctl).map_err(|e| e.to_string())?;
        let back = decode_command(frame.as_bytes()).map_err(|e| e.to_string())?;
        ensure(back == (cfg, ctl), format!("round trip changed {cfg:?}"))?;
    }
    for _ in 0..1000 {
        let ch = rng.random_range(1..16);
        let frames: Vec<Vec<i16>> = (0..rng.random_range(0..40))
            .map(|_| (0..ch).map(|_| rng.random()).collect())
            .collect();
        let stream: Vec<u8> = frames.iter().flat_map(|f| encode_frame(f)).collect();
        let mut dec = StreamDecoder::new(ch);
        let mut got = Vec::new();
        let mut pos = 0;
        while pos < stream.len() {
            let n = rng.random_range(1..=64).min(stream.len() - pos);
            got.extend(dec.feed(&stream[pos..pos + n]).into_iter().map(|f| f.samples));
            pos += n;
        }
        ensure(got == frames && dec.residual_len() == 0, "chunked decode differs")?;
    }
    let took = t0.elapsed();
    ensure(took < PROTOCOL_BUDGET, format!("took {took:?}"))?;
    Ok(format!(
        "10k crc + 10k command round trips + 1k chunkings in {:.2} s",
        took.as_secs_f64()
    ))
}

fn window_mechanics() -> Check {
    let script = SessionScript::new(
        (0..7)
            .map(|c| ScriptStep {
                class: c,
                duration_s: 1.0,
            })
            .collect(),
    )
    .map_err(|e| e.to_string())?;
    let mut detail = Vec::new();
    for hop in [1usize, 10, 20] {
        let mut cfg = EmulatorConfig::synthetic("127.0.0.1:0", script.clone(), 1);
        cfg.pacing = Pacing::Unpaced;
        let emu = run_emulator(cfg).map_err(|e| e.to_string())?;
        let bcfg = BridgeConfig {
            endpoint: emu.local_addr().to_string(),
            hop,
            ..BridgeConfig::default()
        };
        let mut s = start_session(&bcfg).map_err(|e| e.to_string())?;
        let mut seqs = Vec::new();
        for _ in 0..10 {
            let w = s
                .next_window(&|| false)
                .map_err(|e| e.to_string())?
                .ok_or("no window")?;
            ensure(
                w.byte_size() == WINDOW_BYTES && w.sample_bytes().len() == WINDOW_BYTES,
                format!("{} bytes", w.byte_size()),
            )?;
            seqs.push(w.first_seq);
        }
        let want: Vec<u64> = (0..10).map(|k| WARMUP + k * hop as u64).collect();
        ensure(seqs == want, format!("hop {hop}: {seqs:?}"))?;
        detail.push(format!("hop {hop} ok"));
    }
    Ok(format!(
        "first seq {WARMUP}, {WINDOW_BYTES} B windows, {}",
        detail.join(", ")
    ))
}

fn inference_correctness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1F);
    let close = |a: f32, b: f64| rel_close(a as f64, b, ORACLE_REL_TOL);
    for _ in 0..ORACLE_CASES {
        let (ci, co, k, s) = (
            rng.random_range(1..5),
            rng.random_range(1..5),
            rng.random_range(1..6),
            rng.random_range(1..4),
        );
        let l = rng.random_range(k..k + 40);
        let x = rand_tensor(&mut rng, ci, l);
        let layer = Conv1dLayer {
            in_channels: ci,
            out_channels: co,
            kernel: k,
            stride: s,
            weights: (0..co * ci * k).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
            bias: (0..co).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        };
        let xs: Vec<Vec<f32>> = (0..ci).map(|c| x.channel(c).to_vec()).collect();
        let ws: Vec<Vec<Vec<f32>>> = (0..co)
            .map(|o| {
                (0..ci)
                    .map(|i| layer.weights[(o * ci + i) * k..(o * ci + i + 1) * k].to_vec())
                    .collect()
            })
            .collect();
        let want = conv_oracle(&xs, &ws, &layer.bias, s);
        let got = conv1d(&x, &layer).map_err(|e| e.to_string())?;
        for (o, row) in want.iter().enumerate() {
            ensure(got.channel(o) == row.as_slice(), "conv1d differs from oracle")?;
        }

        let r = relu(&x);
        ensure(r.data.iter().zip(&x.data).all(|(a, b)| *a == b.max(0.0)), "relu")?;

        let (pk, ps) = (rng.random_range(1..5), rng.random_range(1..4));
        if l >= pk {
            let p = maxpool1d(&x, pk, ps).map_err(|e| e.to_string())?;
            for c in 0..ci {
                for i in 0..p.len {
                    let m = x.channel(c)[i * ps..i * ps + pk]
                        .iter()
                        .fold(f32::MIN, |a, &b| a.max(b));
                    ensure(p.get(c, i) == m, "maxpool")?;
                }
            }
        }

        let g = global_avg_pool(&x).map_err(|e| e.to_string())?;
        for c in 0..ci {
            ensure(close(g.get(c, 0), kahan_mean(x.channel(c))), "gap")?;
        }

        let (fi, fo) = (rng.random_range(1..40), rng.random_range(1..10));
        let fc = FcLayer {
            in_features: fi,
            out_features: fo,
            weights: (0..fi * fo).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
            bias: (0..fo).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        };
        let v = Tensor::from_vec((0..fi).map(|_| rng.random_range(-2.0f32..2.0)).collect());
        let y = fully_connected(&v, &fc).map_err(|e| e.to_string())?;
        for o in 0..fo {
            let mut acc = 0f32;
            for i in 0..fi {
                acc += fc.weights[o * fi + i] * v.data[i];
            }
            ensure(y.data[o] == acc + fc.bias[o], "fc")?;
        }

        let logits: Vec<f32> = (0..7).map(|_| rng.random_range(-30.0f32..30.0)).collect();
        let p = softmax(&logits);
        let sum: f32 = p.iter().sum();
        ensure(
            (sum - 1.0).abs() <= 1e-5 && p.iter().all(|v| (0.0..=1.0).contains(v)),
            "softmax not a probability vector",
        )?;
        for (a, b) in p.iter().zip(softmax_f64(&logits)) {
            ensure((*a as f64 - b).abs() <= ORACLE_REL_TOL, "softmax")?;
        }
    }

    let m = Model::reference_random(7);
    ensure(
        m.param_count() == PARAM_COUNT,
        format!("{} parameters", m.param_count()),
    )?;
    let w = &random_windows(4, 1)[0];
    let mut x = prepare_input(w).map_err(|e| e.to_string())?;
    let mut lens = vec![x.channels * x.len];
    for layer in m.layers() {
        x = match layer {
            Layer::Conv1d(c) => conv1d(&x, c),
            Layer::Relu => Ok(relu(&x)),
            Layer::MaxPool { kernel, stride } => maxpool1d(&x, *kernel, *stride),
            Layer::GlobalAvgPool => global_avg_pool(&x),
            Layer::Fc(f) => fully_connected(&x, f),
            Layer::Softmax => Ok(Tensor::from_vec(softmax(&x.data))),
        }
        .map_err(|e| e.to_string())?;
        if !matches!(layer, Layer::Relu | Layer::Softmax) {
            lens.push(if x.len == 1 { x.channels } else { x.len });
        }
    }
    ensure(
        lens == [3840, 240, 238, 236, 118, 32, 7],
        format!("shape chain {lens:?}"),
    )?;
    let pred = infer(&m, w).map_err(|e| e.to_string())?;
    ensure(pred.probabilities == x.data, "infer differs from layer composition")?;
    Ok(format!(
        "{ORACLE_CASES} instances per op, chain 3840->240->238->236->118->32->7, {PARAM_COUNT} params"
    ))
}

fn quantization() -> Check {
    let m = Model::reference_random(2024);
    let mut worst = 0f64;
    for layer in m.layers() {
        let ws = match layer {
            Layer::Conv1d(c) => &c.weights,
            Layer::Fc(f) => &f.weights,
            _ => continue,
        };
        let (scale, q) = quantize_weights(ws);
        for (w, qi) in ws.iter().zip(&q) {
            let err = (*qi as f64 * scale as f64 - *w as f64).abs();
            ensure(
                err <= scale as f64 / 2.0 + 1e-12,
                format!("weight error {err} > scale/2"),
            )?;
            worst = worst.max(err / scale as f64);
        }
    }
    let q = quantize_model(&m, &random_windows(1, QUANT_CALIB_WINDOWS)).map_err(|e| e.to_string())?;
    let eval = random_windows(2, QUANT_EVAL_WINDOWS);
    let mut agree = 0;
    for w in &eval {
        let a = infer(&m, w).map_err(|e| e.to_string())?.label;
        let b = infer_quant(&q, w).map_err(|e| e.to_string())?.label;
        agree += (a == b) as usize;
    }
    let rate = agree as f64 / eval.len() as f64;
    ensure(
        rate >= QUANT_AGREEMENT_MIN,
        format!("agreement {rate:.3} < {QUANT_AGREEMENT_MIN}"),
    )?;
    Ok(format!("max |deq - w| = {worst:.3} scale, argmax agreement {rate:.3}"))
}

fn realtime_pipeline() -> Check {
    // 2 s warm-up + 60 s run + margin
    let script = SessionScript::new(
        (0..7)
            .map(|c| ScriptStep {
                class: c,
                duration_s: 9.5,
            })
            .collect(),
    )
    .map_err(|e| e.to_string())?;
    let emu = run_emulator(EmulatorConfig::synthetic("127.0.0.1:0", script, 42)).map_err(|e| e.to_string())?;
    let bridge = BridgeConfig {
        endpoint: emu.local_addr().to_string(),
        hop: 20,
        ..BridgeConfig::default()
    };
    let model = AnyModel::Float(Model::reference_random(42));
    let cfg = PipelineConfig::new(
        bridge,
        ModelSource::Loaded(Arc::new(model)),
        Mode::Float,
        Duration::from_secs(RUN_SECONDS),
    );
    let (log, report) = run_pipeline(&cfg).map_err(|e| e.to_string())?;
    let summary = bench_report(&report).map_err(|e| e.to_string())?;
    let n = log.rows.len() as u64;
    let p95 = summary.end_to_end.map(|s| s.p95_ms).unwrap_or(f64::INFINITY);
    let line = format!(
        "{n} windows, {} dropped, e2e p95 {p95:.2} ms, inference mean {:.2} ms, {:.2} windows/s",
        report.dropped,
        summary.inference.map(|s| s.mean_ms).unwrap_or(f64::NAN),
        summary.throughput_per_s
    );
    ensure(
        n.abs_diff(EXPECTED_WINDOWS) <= WINDOW_COUNT_TOL,
        format!("window count: {line}"),
    )?;
    ensure(report.dropped == 0, format!("drops: {line}"))?;
    ensure(p95 < E2E_P95_MAX_MS, format!("latency: {line}"))?;
    ensure(
        (summary.throughput_per_s - WINDOW_RATE).abs() <= WINDOW_RATE * WINDOW_RATE_REL_TOL,
        format!("throughput: {line}"),
    )?;
    ensure(
        report.emitted == n + report.dropped && report.windows == n,
        format!("conservation: {line}"),
    )?;
    log.validate().map_err(|e| e.to_string())?;
    Ok(line)
}

fn evaluation_harness() -> Check {
    let cues: Vec<Cue> = (0..7)
        .map(|i| Cue {
            time_s: 8.0 * i as f64,
            class: i as u8,
        })
        .collect();
    let sched = CueSchedule::new(cues, CUE_OFFSET_S).map_err(|e| e.to_string())?;
    let hop_s = 20.0 / 512.0;
    let rows: Vec<LogRow> = (0..(56.0 / hop_s) as u64)
        .map(|k| {
            let t = (k + 1) as f64 * hop_s;
            let label = sched.truth_at(t).unwrap_or(0) as usize;
            let mut p = vec![0f32; 7];
            p[label] = 1.0;
            LogRow {
                first_seq: k * 20,
                capture_ms: t * 1e3,
                fetch_ms: t * 1e3,
                infer_start_ms: t * 1e3,
                infer_end_ms: t * 1e3,
                label,
                probabilities: p,
            }
        })
        .collect();
    let r = evaluate(&PredictionLog { rows }, &sched).map_err(|e| e.to_string())?;
    ensure(r.accuracy == 1.0, format!("accuracy {}", r.accuracy))?;
    ensure(r.segments_evaluated == 7, format!("{} segments", r.segments_evaluated))?;
    Ok(format!(
        "accuracy {:.3} over {} windows, {} segments",
        r.accuracy, r.windows_evaluated, r.segments_evaluated
    ))
}

fn main() -> ExitCode {
    type Criterion = (&'static str, fn() -> Check);
    let criteria: [Criterion; 6] = [
        ("protocol conformance", protocol_conformance),
        ("window mechanics", window_mechanics),
        ("inference correctness", inference_correctness),
        ("quantization", quantization),
        ("real-time pipeline", realtime_pipeline),
        ("evaluation harness", evaluation_harness),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        match check() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
