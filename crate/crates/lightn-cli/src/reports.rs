//! Report serialization. Every JSON document carries a versioned schema
//! tag and no timestamps, so identical runs emit identical bytes.

use lightn::cloud::{sq_dist, PointCloud};
use lightn::error::Error;
use serde_json::json;

use crate::config::RunConfig;

pub const METRICS_SCHEMA: &str = "lightn-metrics v1";
pub const EVAL_SCHEMA: &str = "lightn-eval v1";
pub const ERROR_SCHEMA: &str = "lightn-error v1";

/// Smallest pairwise distance among the sampled points.
fn min_pairwise_distance(cloud: &PointCloud) -> f64 {
    let pts = cloud.points();
    let mut best = f64::INFINITY;
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            best = best.min(sq_dist(pts[i], pts[j]));
        }
    }
    best.sqrt()
}

/// Largest distance from any input point to its nearest sampled point.
fn coverage_radius(input: &PointCloud, sampled: &PointCloud) -> f64 {
    let mut worst = 0.0f64;
    for &p in input.points() {
        let mut best = f64::INFINITY;
        for &q in sampled.points() {
            best = best.min(sq_dist(p, q));
        }
        worst = worst.max(best);
    }
    worst.sqrt()
}

pub fn sample_metrics_json(cfg: &RunConfig, input: &PointCloud, sampled: &PointCloud) -> String {
    let doc = json!({
        "schema": METRICS_SCHEMA,
        "sampler": cfg.sampler,
        "n": input.len(),
        "m": sampled.len(),
        "seed": cfg.seed,
        "chamfer": lightn::losses::chamfer_value(sampled, input),
        "min_pairwise_distance": min_pairwise_distance(sampled),
        "coverage_radius": coverage_radius(input, sampled),
    });
    serde_json::to_string_pretty(&doc).expect("metrics serialize")
}

pub fn eval_json(cfg: &RunConfig, soft: f64, matched: f64) -> String {
    let doc = json!({
        "schema": EVAL_SCHEMA,
        "sampler": cfg.sampler,
        "m": cfg.m,
        "seed": cfg.seed,
        "accuracy_soft": soft,
        "accuracy_matched": matched,
    });
    serde_json::to_string_pretty(&doc).expect("eval report serializes")
}

pub fn error_json(e: &Error) -> String {
    let kind = match e {
        Error::Dimension { .. } => "dimension",
        Error::Domain(_) => "domain",
        Error::Config(_) => "config",
        Error::Contract(_) => "contract",
        Error::Training(_) => "training",
        Error::Parse { .. } => "parse",
        Error::Io { .. } => "io",
    };
    let doc = json!({
        "schema": ERROR_SCHEMA,
        "kind": kind,
        "message": e.to_string(),
    });
    serde_json::to_string(&doc).expect("error serializes")
}
