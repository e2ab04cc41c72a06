//! Dataset container, split assignment, train-split normalization statistics,
//! and the on-disk format (JSON-lines samples plus a JSON manifest).

use super::{GraphSample, ScenarioConfig, ScenarioError, NODE_FEATURES};
use crate::seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Per-feature mean and standard deviation over all nodes of all training
/// samples. One-hot bus-kind columns are exempt from normalization; constant
/// columns are flagged and mapped to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub constant: Vec<bool>,
    /// Columns passed through untouched (the one-hot flags).
    pub exempt: Vec<bool>,
}

impl NormStats {
    /// Computes stats from the given samples (the training split).
    pub fn from_samples<'a>(samples: impl Iterator<Item = &'a GraphSample> + Clone) -> Self {
        let d = NODE_FEATURES;
        let mut count = 0usize;
        let mut mean = vec![0.0; d];
        for s in samples.clone() {
            for row in &s.node_features {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            count += s.node_features.len();
        }
        for m in mean.iter_mut() {
            *m /= count as f64;
        }
        let mut var = vec![0.0; d];
        for s in samples {
            for row in &s.node_features {
                for j in 0..d {
                    let diff = row[j] - mean[j];
                    var[j] += diff * diff;
                }
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / count as f64).sqrt()).collect();
        let constant: Vec<bool> = std.iter().map(|&s| s <= 1e-12).collect();
        let mut exempt = vec![false; d];
        for e in exempt.iter_mut().skip(4) {
            *e = true; // PQ/PV/Slack one-hot flags
        }
        NormStats {
            mean,
            std,
            constant,
            exempt,
        }
    }

    /// z-scores a raw feature row. Exempt columns pass through; constant
    /// columns map to 0.
    pub fn normalize_row(&self, row: &[f64], out: &mut [f64]) {
        for j in 0..row.len() {
            out[j] = if self.exempt[j] {
                row[j]
            } else if self.constant[j] {
                0.0
            } else {
                (row[j] - self.mean[j]) / self.std[j]
            };
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<GraphSample>,
    pub norm_stats: Option<NormStats>,
    /// Tag per sample, aligned with `samples`; empty before splitting.
    pub split_assignment: Vec<Split>,
    pub config: ScenarioConfig,
    pub discard_count: usize,
}

impl Dataset {
    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        self.split_assignment
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == split)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Assigns splits by a seeded uniform permutation followed by contiguous
/// cuts. Cut points are round-half-to-even of the cumulative fractions, so
/// the train split absorbs any rounding remainder.
pub fn split_dataset(
    ds: &mut Dataset,
    fractions: (f64, f64, f64),
    split_seed: u64,
) -> Result<(), ScenarioError> {
    let (ft, fv, fe) = fractions;
    if (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(ScenarioError::Config(format!(
            "split fractions ({ft}, {fv}, {fe}) do not sum to 1"
        )));
    }
    let n = ds.samples.len();
    let train_end = (ft * n as f64).round_ties_even() as usize;
    let val_end = ((ft + fv) * n as f64).round_ties_even() as usize;
    if train_end == 0 || val_end == train_end || val_end == n {
        return Err(ScenarioError::Config(format!(
            "split of {n} samples leaves an empty part"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(split_seed, 0xB1A5));
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    let mut assignment = vec![Split::Train; n];
    for (pos, &sample_idx) in perm.iter().enumerate() {
        assignment[sample_idx] = if pos < train_end {
            Split::Train
        } else if pos < val_end {
            Split::Val
        } else {
            Split::Test
        };
    }
    ds.split_assignment = assignment;
    ds.norm_stats = Some(NormStats::from_samples(
        ds.samples
            .iter()
            .zip(&ds.split_assignment)
            .filter(|(_, &s)| s == Split::Train)
            .map(|(s, _)| s),
    ));
    Ok(())
}

/// Sidecar metadata written next to the JSON-lines sample file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ScenarioConfig,
    pub norm_stats: Option<NormStats>,
    pub split_assignment: Vec<Split>,
    pub split_sizes: (usize, usize, usize),
    pub discard_count: usize,
    /// Accepted voltage-magnitude band for generated samples.
    pub feasibility_band: (f64, f64),
    /// Topology-perturbed scenarios also carry the load perturbation.
    pub composed_perturbations: bool,
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("samples.jsonl"))?);
    for s in &ds.samples {
        serde_json::to_writer(&mut f, s)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    let sizes = (
        ds.indices_of(Split::Train).len(),
        ds.indices_of(Split::Val).len(),
        ds.indices_of(Split::Test).len(),
    );
    let manifest = Manifest {
        config: ds.config.clone(),
        norm_stats: ds.norm_stats.clone(),
        split_assignment: ds.split_assignment.clone(),
        split_sizes: sizes,
        discard_count: ds.discard_count,
        feasibility_band: (0.8, 1.2),
        composed_perturbations: true,
    };
    let mut mf = std::fs::File::create(dir.join("manifest.json"))?;
    mf.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    mf.write_all(b"\n")?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> std::io::Result<Dataset> {
    let manifest: Manifest =
        serde_json::from_reader(std::fs::File::open(dir.join("manifest.json"))?)?;
    let f = std::io::BufReader::new(std::fs::File::open(dir.join("samples.jsonl"))?);
    let mut samples = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        samples.push(serde_json::from_str(&line)?);
    }
    Ok(Dataset {
        samples,
        norm_stats: manifest.norm_stats,
        split_assignment: manifest.split_assignment,
        config: manifest.config,
        discard_count: manifest.discard_count,
    })
}
