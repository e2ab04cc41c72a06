//! Regression metrics, operational bound checks, rank aggregation across
//! models/systems, and CSV/JSON report emission.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metrics need at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("predictions ({predictions}) and targets ({targets}) differ in length")]
    LengthMismatch { predictions: usize, targets: usize },
    #[error("rank table is missing a value for model '{model}', system '{system}', metric '{metric}'")]
    MissingCell {
        model: String,
        system: String,
        metric: String,
    },
    #[error("rank table is empty")]
    EmptyTable,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Magnitude,
    Angle,
    Combined,
}

impl Channel {
    pub fn as_str(self) -> &'static str {
        match self {
            Channel::Magnitude => "magnitude",
            Channel::Angle => "angle",
            Channel::Combined => "combined",
        }
    }
}

/// The five regression metrics for one (model, system, channel) cell.
/// `nrmse` is absent when the target range is zero; `r_squared` is absent
/// when the target variance is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub model: String,
    pub system: String,
    pub channel: Channel,
    pub n_points: usize,
    pub mse: f64,
    pub rmse: f64,
    pub mae: f64,
    pub nrmse: Option<f64>,
    pub r_squared: Option<f64>,
}

pub fn compute_metrics(
    predictions: &[f64],
    targets: &[f64],
    channel: Channel,
    model: &str,
    system: &str,
) -> Result<MetricsRecord, MetricsError> {
    if predictions.len() != targets.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            targets: targets.len(),
        });
    }
    if targets.len() < 2 {
        return Err(MetricsError::TooFewPoints(targets.len()));
    }
    let n = targets.len() as f64;
    let mut sq = 0.0;
    let mut abs = 0.0;
    let mut t_min = f64::INFINITY;
    let mut t_max = f64::NEG_INFINITY;
    let mut t_sum = 0.0;
    for (&p, &t) in predictions.iter().zip(targets) {
        let e = p - t;
        sq += e * e;
        abs += e.abs();
        t_min = t_min.min(t);
        t_max = t_max.max(t);
        t_sum += t;
    }
    let mse = sq / n;
    let rmse = mse.sqrt();
    let mae = abs / n;
    let range = t_max - t_min;
    let nrmse = if range > 0.0 { Some(rmse / range) } else { None };
    let mean = t_sum / n;
    let ss_tot: f64 = targets.iter().map(|&t| (t - mean) * (t - mean)).sum();
    let r_squared = if ss_tot > 0.0 { Some(1.0 - sq / ss_tot) } else { None };
    Ok(MetricsRecord {
        model: model.to_string(),
        system: system.to_string(),
        channel,
        n_points: targets.len(),
        mse,
        rmse,
        mae,
        nrmse,
        r_squared,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub low: f64,
    pub high: f64,
}

/// Default operational band for voltage magnitudes, in p.u.
pub const MAGNITUDE_BOUNDS: Bounds = Bounds { low: 0.94, high: 1.06 };
/// Default operational band for voltage angles, in radians.
pub const ANGLE_BOUNDS: Bounds = Bounds { low: -0.6, high: 0.6 };

/// Fraction of entries strictly outside [low, high].
pub fn out_of_bound_rate(predictions: &[f64], bounds: Bounds) -> f64 {
    assert!(bounds.low < bounds.high, "bounds.low must be < bounds.high");
    if predictions.is_empty() {
        return 0.0;
    }
    let outside = predictions
        .iter()
        .filter(|&&p| p < bounds.low || p > bounds.high)
        .count();
    outside as f64 / predictions.len() as f64
}

/// One populated cell of the cross-model comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankEntry {
    pub model: String,
    pub system: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankTable {
    pub models: Vec<String>,
    /// (system, metric) column labels.
    pub columns: Vec<(String, String)>,
    /// ranks[model_index][column_index]; ties share the mean rank.
    pub ranks: Vec<Vec<f64>>,
    pub totals: Vec<f64>,
    pub averages: Vec<f64>,
}

fn higher_is_better(metric: &str) -> bool {
    metric.eq_ignore_ascii_case("r2") || metric.eq_ignore_ascii_case("r_squared")
}

/// Ranks within one column: 1 is best, ties receive the mean of the rank
/// positions they span.
fn column_ranks(values: &[f64], higher_better: bool) -> Vec<f64> {
    let m = values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        let cmp = values[a].partial_cmp(&values[b]).expect("non-finite metric value");
        if higher_better {
            cmp.reverse()
        } else {
            cmp
        }
    });
    let mut ranks = vec![0.0; m];
    let mut i = 0;
    while i < m {
        let mut j = i;
        while j + 1 < m && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // positions i+1 ..= j+1 share the mean rank
        let mean = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = mean;
        }
        i = j + 1;
    }
    ranks
}

pub fn rank_models(entries: &[RankEntry]) -> Result<RankTable, MetricsError> {
    if entries.is_empty() {
        return Err(MetricsError::EmptyTable);
    }
    let models: Vec<String> = entries
        .iter()
        .map(|e| e.model.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let columns: Vec<(String, String)> = entries
        .iter()
        .map(|e| (e.system.clone(), e.metric.clone()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut ranks = vec![vec![0.0; columns.len()]; models.len()];
    for (c, (system, metric)) in columns.iter().enumerate() {
        let mut values = Vec::with_capacity(models.len());
        for model in &models {
            let cell = entries
                .iter()
                .find(|e| &e.model == model && &e.system == system && &e.metric == metric)
                .ok_or_else(|| MetricsError::MissingCell {
                    model: model.clone(),
                    system: system.clone(),
                    metric: metric.clone(),
                })?;
            values.push(cell.value);
        }
        for (m, r) in column_ranks(&values, higher_is_better(metric)).into_iter().enumerate() {
            ranks[m][c] = r;
        }
    }
    let totals: Vec<f64> = ranks.iter().map(|row| row.iter().sum()).collect();
    let averages: Vec<f64> = totals.iter().map(|t| t / columns.len() as f64).collect();
    Ok(RankTable {
        models,
        columns,
        ranks,
        totals,
        averages,
    })
}

/// One prediction point for the per-bus scatter export.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub bus_id: usize,
    pub sample_id: u64,
    pub channel: Channel,
    pub actual: f64,
    pub predicted: f64,
}

/// Shortest decimal form that round-trips the exact f64 bits.
pub fn fmt_f64(v: f64) -> String {
    let mut s = format!("{v:.17e}");
    // prefer `format!("{v}")` when it round-trips (it always does for Rust's
    // shortest-repr float formatting), keeping files readable
    if let Ok(parsed) = format!("{v}").parse::<f64>() {
        if parsed.to_bits() == v.to_bits() {
            s = format!("{v}");
        }
    }
    s
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => fmt_f64(x),
        None => String::new(),
    }
}

/// Writes metrics.csv, ranks.csv (when ranks are given), scatter.csv (when
/// points are given), and summary.json under `dir`.
pub fn write_report(
    records: &[MetricsRecord],
    ranks: Option<&RankTable>,
    scatter: &[ScatterPoint],
    dir: &Path,
) -> Result<(), MetricsError> {
    std::fs::create_dir_all(dir)?;
    let mut csv = String::from("model,system,channel,n_points,mse,rmse,mae,nrmse,r_squared\n");
    for r in records {
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{}",
            r.model,
            r.system,
            r.channel.as_str(),
            r.n_points,
            fmt_f64(r.mse),
            fmt_f64(r.rmse),
            fmt_f64(r.mae),
            fmt_opt(r.nrmse),
            fmt_opt(r.r_squared),
        )
        .expect("string write");
    }
    std::fs::write(dir.join("metrics.csv"), csv)?;

    if let Some(table) = ranks {
        let mut csv = String::from("model");
        for (system, metric) in &table.columns {
            write!(csv, ",{system}:{metric}").expect("string write");
        }
        csv.push_str(",total,average\n");
        for (m, model) in table.models.iter().enumerate() {
            write!(csv, "{model}").expect("string write");
            for r in &table.ranks[m] {
                write!(csv, ",{}", fmt_f64(*r)).expect("string write");
            }
            writeln!(csv, ",{},{}", fmt_f64(table.totals[m]), fmt_f64(table.averages[m]))
                .expect("string write");
        }
        std::fs::write(dir.join("ranks.csv"), csv)?;
    }

    if !scatter.is_empty() {
        let mut csv = String::from("bus_id,sample_id,channel,actual,predicted,abs_error\n");
        for p in scatter {
            writeln!(
                csv,
                "{},{},{},{},{},{}",
                p.bus_id,
                p.sample_id,
                p.channel.as_str(),
                fmt_f64(p.actual),
                fmt_f64(p.predicted),
                fmt_f64((p.predicted - p.actual).abs()),
            )
            .expect("string write");
        }
        std::fs::write(dir.join("scatter.csv"), csv)?;
    }

    let summary = serde_json::json!({
        "records": records,
        "ranks": ranks,
        "scatter_points": scatter.len(),
    });
    std::fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("json"),
    )?;
    Ok(())
}

/// Parses the metrics.csv emitted by [`write_report`].
pub fn read_metrics_csv(text: &str) -> Result<Vec<MetricsRecord>, MetricsError> {
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 9, "malformed metrics row");
        let parse = |s: &str| s.parse::<f64>().expect("metric value");
        let parse_opt = |s: &str| {
            if s.is_empty() {
                None
            } else {
                Some(parse(s))
            }
        };
        out.push(MetricsRecord {
            model: fields[0].to_string(),
            system: fields[1].to_string(),
            channel: match fields[2] {
                "magnitude" => Channel::Magnitude,
                "angle" => Channel::Angle,
                _ => Channel::Combined,
            },
            n_points: fields[3].parse().expect("n_points"),
            mse: parse(fields[4]),
            rmse: parse(fields[5]),
            mae: parse(fields[6]),
            nrmse: parse_opt(fields[7]),
            r_squared: parse_opt(fields[8]),
        });
    }
    Ok(out)
}
