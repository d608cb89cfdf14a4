//! Browser bindings: schedule costs, a 2-D coreset scatter and full-vs-coreset
//! training curves. Each export returns a JSON string.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use treecss::coreset::{coreset_in_memory, CoresetConfig};
use treecss::data::{
    generate_blobs, generate_planted_clusters, synthesize_skewed_id_sets, BlobSpec, PlantedSpec, SampleId,
};
use treecss::harness::split_ids;
use treecss::mpsi::{plan_mpsi, MpsiOptions, SchedulePolicy, Topology};
use treecss::tpsi::TpsiProtocol;
use treecss::train::{evaluate_model, train_until_converged, ModelKind, TrainConfig, TrainSet};
use treecss::transport::Federation;

const MAX_SAMPLES: usize = 20_000;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn check_n(n: usize) -> Result<(), String> {
    if n == 0 || n > MAX_SAMPLES {
        return Err(format!("sample count must lie in 1..={MAX_SAMPLES}"));
    }
    Ok(())
}

/// Dry-run byte and round counts for every topology and policy over skewed id
/// sets with the given sizes (comma separated) sharing `common` ids.
pub fn schedule_costs_value(sizes: &str, common: usize, protocol: &str, seed: u64) -> Result<Value, String> {
    let sizes = sizes
        .split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| format!("bad set size `{s}`")))
        .collect::<Result<Vec<_>, _>>()?;
    if sizes.len() < 2 || sizes.len() > 64 || sizes.iter().any(|&s| s > 1_000_000) {
        return Err(String::from("need 2 to 64 sets of at most 1e6 ids"));
    }
    let protocol: TpsiProtocol = protocol.parse()?;
    let sets = synthesize_skewed_id_sets(&sizes, common, seed).map_err(err)?;
    let mut plans = Vec::new();
    for topology in Topology::ALL {
        for policy in SchedulePolicy::ALL {
            let mut opts = MpsiOptions::new(topology, policy, protocol);
            opts.seed = seed;
            let plan = plan_mpsi(&sets, &opts).map_err(err)?;
            plans.push(json!({
                "topology": topology.to_string(),
                "policy": policy.to_string(),
                "rounds": plan.rounds,
                "tpsi_bytes": plan.tpsi_bytes,
                "total_bytes": plan.total_bytes,
                "result_len": plan.result_len,
                "runs": plan.tpsi_runs,
            }));
        }
    }
    Ok(json!({ "sizes": sizes, "common": common, "protocol": protocol.to_string(), "plans": plans }))
}

/// Two clients with one planted feature each; every point carries its label,
/// whether it was kept and its coreset weight.
pub fn coreset_scatter_value(
    n: usize,
    planted: usize,
    clusters: usize,
    spread: f64,
    seed: u64,
) -> Result<Value, String> {
    check_n(n)?;
    let data = generate_planted_clusters(&PlantedSpec {
        n,
        clients: 2,
        dim_per_client: 1,
        clusters: planted,
        classes: 2,
        spread,
        seed,
    })
    .map_err(err)?;
    let ids: Vec<SampleId> = data.labels.ids().collect();
    let (selection, _, report) = coreset_in_memory(&data, &ids, &CoresetConfig::new(clusters, seed)).map_err(err)?;
    let points: Vec<Value> = ids
        .iter()
        .map(|&id| {
            let x = data.clients[0].row(id).map_err(err)?[0];
            let y = data.clients[1].row(id).map_err(err)?[0];
            let label = data.labels.get(id).and_then(|l| l.class()).unwrap_or(0);
            let w = selection.weight(id);
            Ok(json!([x, y, label, w.is_some(), w.unwrap_or(0.0)]))
        })
        .collect::<Result<_, String>>()?;
    Ok(json!({ "report": report, "points": points }))
}

/// Trains on the full training split and on its coreset; returns both loss
/// curves with test accuracy and sample counts.
pub fn train_curves_value(
    n: usize,
    clusters: usize,
    model: &str,
    max_epochs: usize,
    seed: u64,
) -> Result<Value, String> {
    check_n(n)?;
    let kind: ModelKind = model.parse()?;
    if kind == ModelKind::Knn {
        return Err(String::from("knn has no loss curve"));
    }
    let data = generate_blobs(&BlobSpec {
        n,
        d: 6,
        clients: 3,
        classes: 2,
        separation: 3.0,
        seed,
    })
    .map_err(err)?;
    let (pool, test) = split_ids(&data, 0.3, seed);
    let (selection, _, report) = coreset_in_memory(&data, &pool, &CoresetConfig::new(clusters, seed)).map_err(err)?;
    let cfg = TrainConfig {
        lr_grid: vec![0.01],
        batch_fraction: 0.05,
        max_epochs,
        ..TrainConfig::default()
    }
    .with_seed(seed);
    let mut runs = Vec::new();
    for (name, set) in [
        ("full", TrainSet::uniform(pool)),
        (
            "coreset",
            TrainSet::weighted(selection.ids, selection.weights).map_err(err)?,
        ),
    ] {
        let fed = Federation::new(3);
        let out = train_until_converged(&fed, &data, &set, kind, &cfg).map_err(err)?;
        let test_metric = evaluate_model(&out.model, &data, &test, None).map_err(err)?;
        runs.push(json!({
            "name": name,
            "samples": out.report.samples,
            "loss": out.report.loss_curve,
            "test_accuracy": test_metric.value(),
            "bytes": out.report.bytes,
            "sample_epochs": out.report.sample_epochs,
        }));
    }
    Ok(json!({ "coreset": report, "runs": runs }))
}

fn export(v: Result<Value, String>) -> Result<String, JsError> {
    v.map(|v| v.to_string()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn schedule_costs(sizes: &str, common: usize, protocol: &str, seed: u64) -> Result<String, JsError> {
    export(schedule_costs_value(sizes, common, protocol, seed))
}

#[wasm_bindgen]
pub fn coreset_scatter(n: usize, planted: usize, clusters: usize, spread: f64, seed: u64) -> Result<String, JsError> {
    export(coreset_scatter_value(n, planted, clusters, spread, seed))
}

#[wasm_bindgen]
pub fn train_curves(n: usize, clusters: usize, model: &str, max_epochs: usize, seed: u64) -> Result<String, JsError> {
    export(train_curves_value(n, clusters, model, max_epochs, seed))
}
