//! Browser bindings for the demo page in `www/`.
//!
//! Each export takes plain strings and numbers and returns a JSON string;
//! errors surface as JS exceptions. The same functions are usable natively,
//! which is how they are tested.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use dpmg::merge::{merge, privatize_merged_threshold, MergedSketch};
use dpmg::oracle::{max_error, ExactHistogram};
use dpmg::pure::DEFAULT_UNIVERSE_CAP;
use dpmg::{
    postprocess, privatize_mg, privatize_pure, privatize_standard_mg, NoiseSampler, PrivacyParams,
    PrivateSummary, Sketch,
};

/// Largest universe the demo accepts; the pure mechanism scans all of it.
pub const MAX_DEMO_UNIVERSE: u64 = 100_000;

fn parse_stream(text: &str, d: u64) -> Result<Vec<u64>, String> {
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| {
            let x: u64 = t
                .parse()
                .map_err(|_| format!("'{t}' is not a positive integer"))?;
            if x == 0 || x > d {
                return Err(format!("item {x} outside the universe 1..={d}"));
            }
            Ok(x)
        })
        .collect()
}

fn check_size(k: usize, d: u64) -> Result<(), String> {
    if d > MAX_DEMO_UNIVERSE {
        return Err(format!("the demo is limited to d <= {MAX_DEMO_UNIVERSE}"));
    }
    if k == 0 || k > 1000 {
        return Err("k must be between 1 and 1000".into());
    }
    Ok(())
}

fn release(
    sketch: &Sketch,
    mechanism: &str,
    params: &PrivacyParams,
    noise: &mut NoiseSampler,
) -> dpmg::Result<PrivateSummary> {
    match mechanism {
        "approx" => privatize_mg(&mut sketch.clone(), params, noise),
        "standard" => privatize_standard_mg(&mut sketch.to_standard(), params, noise),
        "pure" => privatize_pure(
            &mut postprocess(sketch),
            params.epsilon(),
            DEFAULT_UNIVERSE_CAP,
            noise,
        ),
        other => Err(dpmg::Error::InvalidConfig(format!(
            "unknown mechanism '{other}'"
        ))),
    }
}

#[derive(Serialize)]
struct Row {
    key: u64,
    truth: u64,
    sketch: u64,
    released: Option<f64>,
}

#[derive(Serialize)]
struct ReleaseView {
    n: u64,
    gamma: u64,
    threshold: Option<f64>,
    max_error: f64,
    rows: Vec<Row>,
}

/// Builds a sketch and releases it once. Rows cover every key that occurs
/// in the stream or the release.
pub fn release_json(
    stream: &str,
    k: usize,
    d: u64,
    epsilon: f64,
    delta: f64,
    mechanism: &str,
    seed: u64,
) -> Result<String, String> {
    check_size(k, d)?;
    let items = parse_stream(stream, d)?;
    let params = PrivacyParams::new(epsilon, delta, PrivacyParams::DEFAULT_BETA)
        .map_err(|e| e.to_string())?;
    let sketch = Sketch::from_stream(k, d, &items).map_err(|e| e.to_string())?;
    let hist = ExactHistogram::from_stream(&items, d).map_err(|e| e.to_string())?;
    let summary = release(
        &sketch,
        mechanism,
        &params,
        &mut NoiseSampler::laplace(seed),
    )
    .map_err(|e| e.to_string())?;

    let mut keys: Vec<u64> = hist
        .counts()
        .map(|(key, _)| key)
        .chain(summary.keys())
        .collect();
    keys.sort_unstable();
    keys.dedup();
    let rows = keys
        .into_iter()
        .map(|key| Row {
            key,
            truth: hist.count(key),
            sketch: sketch.estimate(key).unwrap_or(0),
            released: summary.entries().find(|&(k2, _)| k2 == key).map(|(_, c)| c),
        })
        .collect();
    let view = ReleaseView {
        n: sketch.n(),
        gamma: sketch.gamma(),
        threshold: summary.threshold,
        max_error: max_error(&summary, &hist),
        rows,
    };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct SweepPoint {
    epsilon: f64,
    approx: f64,
    standard: f64,
    pure: f64,
}

/// Mean maximum error of each mechanism over `trials` releases, for a
/// log-spaced range of ε.
pub fn sweep_json(
    stream: &str,
    k: usize,
    d: u64,
    delta: f64,
    trials: u32,
    seed: u64,
) -> Result<String, String> {
    check_size(k, d)?;
    if trials == 0 || trials > 500 {
        return Err("trials must be between 1 and 500".into());
    }
    let items = parse_stream(stream, d)?;
    let sketch = Sketch::from_stream(k, d, &items).map_err(|e| e.to_string())?;
    let hist = ExactHistogram::from_stream(&items, d).map_err(|e| e.to_string())?;
    let mut noise = NoiseSampler::laplace(seed);
    let mut points = Vec::new();
    for step in 0..=12 {
        let epsilon = 0.1 * 10f64.powf(step as f64 / 6.0);
        let params = PrivacyParams::new(epsilon, delta, PrivacyParams::DEFAULT_BETA)
            .map_err(|e| e.to_string())?;
        let mut mean = |mechanism: &str| -> Result<f64, String> {
            let mut total = 0.0;
            for _ in 0..trials {
                let s =
                    release(&sketch, mechanism, &params, &mut noise).map_err(|e| e.to_string())?;
                total += max_error(&s, &hist);
            }
            Ok(total / trials as f64)
        };
        points.push(SweepPoint {
            epsilon,
            approx: mean("approx")?,
            standard: mean("standard")?,
            pure: mean("pure")?,
        });
    }
    serde_json::to_string(&points).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct MergeView {
    a: Vec<(u64, u64)>,
    b: Vec<(u64, u64)>,
    merged: Vec<(u64, u64)>,
    n: u64,
    released: Vec<(u64, f64)>,
    threshold: Option<f64>,
}

/// Sketches two streams, merges them and releases the merged sketch with
/// per-counter noise and a threshold.
pub fn merge_json(
    stream_a: &str,
    stream_b: &str,
    k: usize,
    d: u64,
    epsilon: f64,
    delta: f64,
    seed: u64,
) -> Result<String, String> {
    check_size(k, d)?;
    let params = PrivacyParams::new(epsilon, delta, PrivacyParams::DEFAULT_BETA)
        .map_err(|e| e.to_string())?;
    let build = |text: &str| -> Result<MergedSketch, String> {
        let items = parse_stream(text, d)?;
        Ok(MergedSketch::from(
            &Sketch::from_stream(k, d, &items).map_err(|e| e.to_string())?,
        ))
    };
    let (a, b) = (build(stream_a)?, build(stream_b)?);
    let mut merged = merge(&a, &b).map_err(|e| e.to_string())?;
    let view_entries = merged.entries().collect();
    let summary =
        privatize_merged_threshold(&mut merged, &params, &mut NoiseSampler::laplace(seed))
            .map_err(|e| e.to_string())?;
    let view = MergeView {
        a: a.entries().collect(),
        b: b.entries().collect(),
        merged: view_entries,
        n: merged.n(),
        released: summary.entries().collect(),
        threshold: summary.threshold,
    };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

#[wasm_bindgen(js_name = release)]
pub fn release_js(
    stream: &str,
    k: usize,
    d: u64,
    epsilon: f64,
    delta: f64,
    mechanism: &str,
    seed: u64,
) -> Result<String, JsError> {
    release_json(stream, k, d, epsilon, delta, mechanism, seed).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = sweep)]
pub fn sweep_js(
    stream: &str,
    k: usize,
    d: u64,
    delta: f64,
    trials: u32,
    seed: u64,
) -> Result<String, JsError> {
    sweep_json(stream, k, d, delta, trials, seed).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = mergeSketches)]
pub fn merge_js(
    a: &str,
    b: &str,
    k: usize,
    d: u64,
    epsilon: f64,
    delta: f64,
    seed: u64,
) -> Result<String, JsError> {
    merge_json(a, b, k, d, epsilon, delta, seed).map_err(|e| JsError::new(&e))
}
