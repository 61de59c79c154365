//! The perturbation metric, its noise-matched references and paired statistics.

pub mod methods;
pub mod perturb;
pub mod stats;

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use methods::{Method, SaliencyMethod, METHOD_NAMES};
pub use perturb::{
    image_seed, noise_draws, noise_reference, perturb_until_flip, removal_order, Direction, NoisePool,
    NoiseReference, PerturbConfig, PerturbOutcome,
};
pub use stats::{median, quantile, wilcoxon_signed_rank, Quantiles, Wilcoxon};

use crate::attribution::{Explainer, SaliencyMap};
use crate::error::{Error, Result};
use crate::netzoo::{Checkpoint, Dataset};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default)]
    pub perturb: PerturbConfig,
    /// Noise draws `M` per image and direction.
    #[serde(default = "default_draws")]
    pub noise_draws: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_draws() -> usize {
    10
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            perturb: PerturbConfig::default(),
            noise_draws: default_draws(),
            seed: 0,
        }
    }
}

/// Every metric for one (image, method) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub image_id: usize,
    pub method: String,
    pub e_minus: f64,
    pub e_plus: f64,
    pub e_delta: f64,
    pub exi_minus: f64,
    pub exi_plus: f64,
    pub de_minus: f64,
    pub de_plus: f64,
    pub de_delta: f64,
    pub flipped_minus: bool,
    pub flipped_plus: bool,
    pub steps_minus: usize,
    pub steps_plus: usize,
    /// Why this image could not be evaluated; metrics are NaN when set.
    #[serde(skip)]
    pub error: Option<String>,
}

impl EvalRecord {
    fn failed(image_id: usize, method: String, error: String) -> Self {
        Self {
            image_id,
            method,
            e_minus: f64::NAN,
            e_plus: f64::NAN,
            e_delta: f64::NAN,
            exi_minus: f64::NAN,
            exi_plus: f64::NAN,
            de_minus: f64::NAN,
            de_plus: f64::NAN,
            de_delta: f64::NAN,
            flipped_minus: false,
            flipped_plus: false,
            steps_minus: 0,
            steps_plus: 0,
            error: Some(error),
        }
    }

    pub fn metric(&self, m: Metric) -> f64 {
        match m {
            Metric::EMinus => self.e_minus,
            Metric::EPlus => self.e_plus,
            Metric::EDelta => self.e_delta,
            Metric::DeMinus => self.de_minus,
            Metric::DePlus => self.de_plus,
            Metric::DeDelta => self.de_delta,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    EMinus,
    EPlus,
    EDelta,
    DeMinus,
    DePlus,
    DeDelta,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::EMinus,
        Metric::EPlus,
        Metric::EDelta,
        Metric::DeMinus,
        Metric::DePlus,
        Metric::DeDelta,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::EMinus => "e_minus",
            Metric::EPlus => "e_plus",
            Metric::EDelta => "e_delta",
            Metric::DeMinus => "de_minus",
            Metric::DePlus => "de_plus",
            Metric::DeDelta => "de_delta",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown metric {s:?}")))
    }
}

struct Prepared {
    id: usize,
    maps: Vec<Result<SaliencyMap>>,
}

/// Evaluates every method on the images `ids` of `data`. Records come out
/// grouped by method, images in the order given.
pub fn evaluate_methods(
    ck: &Checkpoint,
    data: &Dataset,
    ids: &[usize],
    methods: &[&dyn SaliencyMethod],
    cfg: &EvalConfig,
) -> Result<Vec<EvalRecord>> {
    cfg.perturb.validate()?;
    if let Some(&bad) = ids.iter().find(|&&i| i >= data.len()) {
        return Err(Error::invalid(format!("image id {bad} outside a dataset of {}", data.len())));
    }
    let prepared: Vec<Prepared> = ids
        .par_iter()
        .map(|&id| {
            let image = data.image(id);
            let maps = match Explainer::predicted(ck, &image) {
                Ok(ex) => methods.iter().map(|m| m.saliency(ck, data, id, &ex)).collect(),
                Err(e) => methods.iter().map(|_| Err(Error::invalid(e.to_string()))).collect(),
            };
            Prepared { id, maps }
        })
        .collect();

    let mut records = Vec::with_capacity(ids.len() * methods.len());
    for (k, method) in methods.iter().enumerate() {
        let name = method.name();
        let pool = NoisePool::new(
            prepared
                .iter()
                .filter_map(|p| p.maps[k].as_ref().ok().map(|s| (p.id, s.clone())))
                .collect(),
        );
        if pool.len() <= cfg.noise_draws {
            return Err(Error::InsufficientData(format!(
                "{name}: noise pool of {} maps cannot supply {} draws excluding the image itself",
                pool.len(),
                cfg.noise_draws
            )));
        }
        let batch: Vec<EvalRecord> = prepared
            .par_iter()
            .map(|p| match &p.maps[k] {
                Ok(s) => evaluate_one(ck, data, p.id, s, &pool, &name, cfg)
                    .unwrap_or_else(|e| EvalRecord::failed(p.id, name.clone(), e.to_string())),
                Err(e) => EvalRecord::failed(p.id, name.clone(), e.to_string()),
            })
            .collect();
        records.extend(batch);
    }
    Ok(records)
}

pub fn evaluate_method(
    ck: &Checkpoint,
    data: &Dataset,
    ids: &[usize],
    method: &dyn SaliencyMethod,
    cfg: &EvalConfig,
) -> Result<Vec<EvalRecord>> {
    evaluate_methods(ck, data, ids, &[method], cfg)
}

fn evaluate_one(
    ck: &Checkpoint,
    data: &Dataset,
    id: usize,
    s: &SaliencyMap,
    pool: &NoisePool,
    name: &str,
    cfg: &EvalConfig,
) -> Result<EvalRecord> {
    let x = data.image(id);
    let minus_cfg = cfg.perturb.with_direction(Direction::LeastFirst);
    let plus_cfg = cfg.perturb.with_direction(Direction::MostFirst);
    let minus = perturb_until_flip(ck, &x, s, &minus_cfg)?;
    let plus = perturb_until_flip(ck, &x, s, &plus_cfg)?;
    let xi_minus = noise_reference(ck, &x, id, pool, &minus_cfg, cfg.noise_draws, cfg.seed)?;
    let xi_plus = noise_reference(ck, &x, id, pool, &plus_cfg, cfg.noise_draws, cfg.seed)?;
    let de_minus = minus.e - xi_minus.mean_e;
    let de_plus = plus.e - xi_plus.mean_e;
    Ok(EvalRecord {
        image_id: id,
        method: name.to_string(),
        e_minus: minus.e,
        e_plus: plus.e,
        e_delta: minus.e - plus.e,
        exi_minus: xi_minus.mean_e,
        exi_plus: xi_plus.mean_e,
        de_minus,
        de_plus,
        de_delta: de_minus - de_plus,
        flipped_minus: minus.flipped,
        flipped_plus: plus.flipped,
        steps_minus: minus.steps,
        steps_plus: plus.steps,
        error: None,
    })
}

/// Successful values of `metric` for `method`, keyed by image id.
pub fn metric_by_image(records: &[EvalRecord], method: &str, metric: Metric) -> BTreeMap<usize, f64> {
    records
        .iter()
        .filter(|r| r.method == method && r.error.is_none())
        .map(|r| (r.image_id, r.metric(metric)))
        .collect()
}

/// Paired comparison of two methods on one metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodComparison {
    pub method_a: String,
    pub method_b: String,
    pub metric: Metric,
    /// Paired images.
    pub n: usize,
    /// Signed-rank result; `None` when every difference is zero.
    pub test: Option<Wilcoxon>,
    /// Median of `a - b`.
    pub median_diff: f64,
    pub diff_quantiles: Quantiles,
}

impl MethodComparison {
    pub fn is_degenerate(&self) -> bool {
        self.test.is_none()
    }
}

/// Wilcoxon test on per-image differences `a - b`, paired by image id.
pub fn compare(records: &[EvalRecord], method_a: &str, method_b: &str, metric: Metric) -> Result<MethodComparison> {
    let a = metric_by_image(records, method_a, metric);
    let b = metric_by_image(records, method_b, metric);
    let diffs: Vec<f64> = a.iter().filter_map(|(id, va)| b.get(id).map(|vb| va - vb)).collect();
    if diffs.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no images evaluated by both {method_a} and {method_b}"
        )));
    }
    let test = match wilcoxon_signed_rank(&diffs) {
        Ok(t) => Some(t),
        Err(Error::Degenerate(_)) => None,
        Err(e) => return Err(e),
    };
    let diff_quantiles = Quantiles::of(&diffs)?;
    Ok(MethodComparison {
        method_a: method_a.into(),
        method_b: method_b.into(),
        metric,
        n: diffs.len(),
        test,
        median_diff: diff_quantiles.q50,
        diff_quantiles,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub metric: Metric,
    pub quantiles: Quantiles,
}

/// Quantiles of `metric` per method, methods in first-appearance order.
pub fn summarize(records: &[EvalRecord], metric: Metric) -> Result<Vec<SummaryRow>> {
    let mut order: Vec<&str> = Vec::new();
    for r in records {
        if !order.contains(&r.method.as_str()) {
            order.push(&r.method);
        }
    }
    order
        .into_iter()
        .map(|m| {
            let values: Vec<f64> = metric_by_image(records, m, metric).into_values().collect();
            Ok(SummaryRow {
                method: m.to_string(),
                metric,
                quantiles: Quantiles::of(&values)?,
            })
        })
        .collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::invalid(format!("csv: {e}"))
}

/// Writes records with the columns `image_id, method, e_minus, ... steps_plus`.
pub fn write_records_csv(out: impl Write, records: &[EvalRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::invalid(format!("csv: {e}")))
}

pub fn read_records_csv(input: impl std::io::Read) -> Result<Vec<EvalRecord>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(csv_err))
        .collect()
}

/// Writes `method_a, method_b, metric, n, W, p, median_diff`; degenerate
/// comparisons get an empty `W` and `p = degenerate`.
pub fn write_comparisons_csv(out: impl Write, rows: &[MethodComparison]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method_a", "method_b", "metric", "n", "W", "p", "median_diff"])
        .map_err(csv_err)?;
    for c in rows {
        let (stat, p) = match &c.test {
            Some(t) => (t.w.to_string(), t.p.to_string()),
            None => (String::new(), "degenerate".to_string()),
        };
        w.write_record([
            c.method_a.clone(),
            c.method_b.clone(),
            c.metric.to_string(),
            c.n.to_string(),
            stat,
            p,
            c.median_diff.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::invalid(format!("csv: {e}")))
}

/// Writes `method, metric, n, q10, q25, q50, q75, q90`.
pub fn write_summary_csv(out: impl Write, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "metric", "n", "q10", "q25", "q50", "q75", "q90"])
        .map_err(csv_err)?;
    for r in rows {
        let q = &r.quantiles;
        w.write_record([
            r.method.clone(),
            r.metric.to_string(),
            q.n.to_string(),
            q.q10.to_string(),
            q.q25.to_string(),
            q.q50.to_string(),
            q.q75.to_string(),
            q.q90.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::invalid(format!("csv: {e}")))
}
