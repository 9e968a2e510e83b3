//! Retrieval-quality metrics over Hamming rankings, and the closed/open-set
//! evaluation protocol driver.
//!
//! Relevance is identity-label equality. A query's own database entry is not
//! excluded: in the closed-set protocol the database holds training images,
//! never the queries themselves. Queries returning nothing within the radius
//! contribute precision 0 to P@H<=r.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datapipe::Dataset;
use crate::error::{Error, Result};
use crate::hashindex::{binarize, BinaryCode, RetrievalIndex};
use crate::netcore::{forward_eval, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolMode {
    /// Database contains the training images; query identities were trained on.
    Closed,
    /// Query and database identities were never seen in training.
    Open,
}

impl std::fmt::Display for ProtocolMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ProtocolMode::Closed => write!(f, "closed-set"),
            ProtocolMode::Open => write!(f, "open-set"),
        }
    }
}

/// Metric cutoffs for one evaluation run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub map_cutoff: usize,
    pub hamming_radius: u32,
    pub top_m: Vec<usize>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            map_cutoff: 50,
            hamming_radius: 2,
            top_m: vec![1, 5, 10, 20, 50],
        }
    }
}

impl EvalSettings {
    pub fn validate(&self) -> Result<()> {
        if self.map_cutoff == 0 {
            return Err(Error::InvalidArgument("map_cutoff must be at least 1".into()));
        }
        if self.top_m.is_empty() || self.top_m.iter().any(|&m| m == 0) {
            return Err(Error::InvalidArgument(
                "top_m must be a nonempty list of positive values".into(),
            ));
        }
        Ok(())
    }
}

/// Results of one protocol run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mode: ProtocolMode,
    pub map_at_50: f64,
    pub precision_at_hamming2: f64,
    pub pr_curve: Vec<(f64, f64)>,
    pub precision_at_topm: Vec<(usize, f64)>,
    pub code_bits: usize,
    pub query_count: usize,
    pub db_count: usize,
    /// The cutoff/radius the two headline numbers were computed at
    /// (50 and 2 under the defaults).
    pub map_cutoff: usize,
    pub hamming_radius: u32,
}

/// Average precision of one ranked 0/1 relevance list, cut at `cutoff` and
/// normalized by `min(total_relevant, cutoff)`; 0 when nothing is relevant.
pub fn average_precision(relevance: &[bool], total_relevant: usize, cutoff: usize) -> f64 {
    if total_relevant == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &rel) in relevance.iter().take(cutoff).enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    sum / total_relevant.min(cutoff) as f64
}

fn check_queries(index: &RetrievalIndex, codes: &[BinaryCode], labels: &[u32]) -> Result<()> {
    if codes.is_empty() {
        return Err(Error::EmptyQuerySet);
    }
    if codes.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} query codes but {} labels",
            codes.len(),
            labels.len()
        )));
    }
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    Ok(())
}

/// Mean average precision at `cutoff` over a query set.
pub fn mean_average_precision(
    index: &RetrievalIndex,
    query_codes: &[BinaryCode],
    query_labels: &[u32],
    cutoff: usize,
) -> Result<f64> {
    check_queries(index, query_codes, query_labels)?;
    let db_labels = index.labels();
    let aps: Result<Vec<f64>> = query_codes
        .par_iter()
        .zip(query_labels.par_iter())
        .map(|(code, &label)| {
            let total_relevant = db_labels.iter().filter(|&&l| l == label).count();
            let ranked = index.query_topm(code, cutoff)?;
            let relevance: Vec<bool> =
                ranked.iter().map(|&(i, _)| db_labels[i] == label).collect();
            Ok(average_precision(&relevance, total_relevant, cutoff))
        })
        .collect();
    let aps = aps?;
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Mean precision of returns within Hamming radius `r`; zero-return queries
/// contribute 0.
pub fn precision_at_hamming_radius(
    index: &RetrievalIndex,
    query_codes: &[BinaryCode],
    query_labels: &[u32],
    r: u32,
) -> Result<f64> {
    check_queries(index, query_codes, query_labels)?;
    let db_labels = index.labels();
    let precisions: Result<Vec<f64>> = query_codes
        .par_iter()
        .zip(query_labels.par_iter())
        .map(|(code, &label)| {
            let within = index.query_radius(code, r)?;
            if within.is_empty() {
                return Ok(0.0);
            }
            let same = within.iter().filter(|&&i| db_labels[i] == label).count();
            Ok(same as f64 / within.len() as f64)
        })
        .collect();
    let precisions = precisions?;
    Ok(precisions.iter().sum::<f64>() / precisions.len() as f64)
}

/// Micro-averaged precision/recall at every Hamming threshold d = 0..=K.
/// A (query, db) pair is returned at threshold d when its distance is <= d.
pub fn pr_curve(
    index: &RetrievalIndex,
    query_codes: &[BinaryCode],
    query_labels: &[u32],
) -> Result<Vec<(f64, f64)>> {
    check_queries(index, query_codes, query_labels)?;
    let k = index.code_bits();
    let db_labels = index.labels();

    // per-query histograms of (same, total) counts by distance
    let hists: Result<Vec<(Vec<u64>, Vec<u64>)>> = query_codes
        .par_iter()
        .zip(query_labels.par_iter())
        .map(|(code, &label)| {
            let dists = index.distances(code)?;
            let mut same = vec![0u64; k + 1];
            let mut all = vec![0u64; k + 1];
            for (i, &d) in dists.iter().enumerate() {
                all[d as usize] += 1;
                if db_labels[i] == label {
                    same[d as usize] += 1;
                }
            }
            Ok((same, all))
        })
        .collect();
    let hists = hists?;

    let mut same_by_d = vec![0u64; k + 1];
    let mut all_by_d = vec![0u64; k + 1];
    for (same, all) in &hists {
        for d in 0..=k {
            same_by_d[d] += same[d];
            all_by_d[d] += all[d];
        }
    }
    let total_same: u64 = same_by_d.iter().sum();

    let mut points = Vec::with_capacity(k + 1);
    let mut same_cum = 0u64;
    let mut all_cum = 0u64;
    for d in 0..=k {
        same_cum += same_by_d[d];
        all_cum += all_by_d[d];
        let precision = if all_cum == 0 {
            0.0
        } else {
            same_cum as f64 / all_cum as f64
        };
        let recall = if total_same == 0 {
            1.0
        } else {
            same_cum as f64 / total_same as f64
        };
        points.push((recall, precision));
    }
    Ok(points)
}

/// Mean same-identity fraction within the top-M ranked results, per M.
pub fn precision_at_topm(
    index: &RetrievalIndex,
    query_codes: &[BinaryCode],
    query_labels: &[u32],
    m_list: &[usize],
) -> Result<Vec<(usize, f64)>> {
    check_queries(index, query_codes, query_labels)?;
    let db_labels = index.labels();
    let max_m = m_list.iter().copied().max().unwrap_or(1);

    let per_query: Result<Vec<Vec<f64>>> = query_codes
        .par_iter()
        .zip(query_labels.par_iter())
        .map(|(code, &label)| {
            let ranked = index.query_topm(code, max_m)?;
            Ok(m_list
                .iter()
                .map(|&m| {
                    let take = m.min(ranked.len());
                    let same = ranked[..take]
                        .iter()
                        .filter(|&&(i, _)| db_labels[i] == label)
                        .count();
                    same as f64 / take as f64
                })
                .collect())
        })
        .collect();
    let per_query = per_query?;

    Ok(m_list
        .iter()
        .enumerate()
        .map(|(mi, &m)| {
            let sum: f64 = per_query.iter().map(|v| v[mi]).sum();
            (m, sum / per_query.len() as f64)
        })
        .collect())
}

/// Eval-mode encode of every image in a dataset, in dataset order.
/// Returns packed codes, labels, and source identifiers.
pub fn encode_dataset(
    params: &ModelParams,
    dataset: &Dataset,
    batch_size: usize,
) -> Result<(Vec<BinaryCode>, Vec<u32>, Vec<String>)> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot encode an empty dataset".into()));
    }
    let samples = dataset.samples();
    let mut codes = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    let mut ids = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let images: Vec<_> = chunk.iter().map(|s| s.image.clone()).collect();
        let out = forward_eval(params, &images)?;
        for (i, sample) in chunk.iter().enumerate() {
            let h: Vec<f64> = out.h.row(i).to_vec();
            codes.push(binarize(&h)?);
            labels.push(sample.label.0);
            ids.push(sample.source_id.clone());
        }
    }
    Ok((codes, labels, ids))
}

/// Mean |1 - q^2| of the eval-mode pre-activations over a dataset; the
/// quantization error the sq term drives down.
pub fn mean_quantization_error(
    params: &ModelParams,
    dataset: &Dataset,
    batch_size: usize,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for chunk in dataset.samples().chunks(batch_size.max(1)) {
        let images: Vec<_> = chunk.iter().map(|s| s.image.clone()).collect();
        let out = forward_eval(params, &images)?;
        sum += out.q.iter().map(|&v| (1.0 - v * v).abs()).sum::<f64>();
        count += out.q.len();
    }
    Ok(sum / count as f64)
}

/// Encode database and queries with one model, build the index, and compute
/// all four metrics.
pub fn run_protocol(
    params: &ModelParams,
    db: &Dataset,
    queries: &Dataset,
    mode: ProtocolMode,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    settings.validate()?;
    let (db_codes, db_labels, db_ids) = encode_dataset(params, db, 64)?;
    let index = RetrievalIndex::new(
        &db_codes,
        db_labels,
        params.config.code_bits,
        db.identity_count(),
        Some(db_ids),
    )?;
    let (q_codes, q_labels, _) = encode_dataset(params, queries, 64)?;
    report_from_index(&index, &q_codes, &q_labels, mode, settings)
}

/// Metrics for pre-encoded queries against an existing index.
pub fn report_from_index(
    index: &RetrievalIndex,
    query_codes: &[BinaryCode],
    query_labels: &[u32],
    mode: ProtocolMode,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    settings.validate()?;
    Ok(EvalReport {
        mode,
        map_at_50: mean_average_precision(index, query_codes, query_labels, settings.map_cutoff)?,
        precision_at_hamming2: precision_at_hamming_radius(
            index,
            query_codes,
            query_labels,
            settings.hamming_radius,
        )?,
        pr_curve: pr_curve(index, query_codes, query_labels)?,
        precision_at_topm: precision_at_topm(index, query_codes, query_labels, &settings.top_m)?,
        code_bits: index.code_bits(),
        query_count: query_codes.len(),
        db_count: index.len(),
        map_cutoff: settings.map_cutoff,
        hamming_radius: settings.hamming_radius,
    })
}

impl EvalReport {
    /// Human-readable summary.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("facehash evaluation report\n");
        s.push_str(&format!("protocol: {}\n", self.mode));
        s.push_str(&format!("code_bits: {}\n", self.code_bits));
        s.push_str(&format!("queries: {}\n", self.query_count));
        s.push_str(&format!("database: {}\n", self.db_count));
        s.push_str(&format!("map_at_{}: {:.6}\n", self.map_cutoff, self.map_at_50));
        s.push_str(&format!(
            "precision_at_hamming{}: {:.6}\n",
            self.hamming_radius, self.precision_at_hamming2
        ));
        s.push_str(&format!("pr_curve_points: {}\n", self.pr_curve.len()));
        for (m, p) in &self.precision_at_topm {
            s.push_str(&format!("precision_at_top{m}: {p:.6}\n"));
        }
        s
    }

    /// Write report.txt plus the two point CSVs; returns the paths written.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();

        let report_path = dir.join("report.txt");
        std::fs::write(&report_path, self.to_text()).map_err(|e| Error::io(&report_path, e))?;
        written.push(report_path);

        let pr_path = dir.join("pr_curve.csv");
        let mut pr = String::from("recall,precision\n");
        for (r, p) in &self.pr_curve {
            pr.push_str(&format!("{r},{p}\n"));
        }
        std::fs::write(&pr_path, pr).map_err(|e| Error::io(&pr_path, e))?;
        written.push(pr_path);

        let topm_path = dir.join("precision_at_topm.csv");
        let mut tm = String::from("m,precision\n");
        for (m, p) in &self.precision_at_topm {
            tm.push_str(&format!("{m},{p}\n"));
        }
        std::fs::write(&topm_path, tm).map_err(|e| Error::io(&topm_path, e))?;
        written.push(topm_path);

        Ok(written)
    }
}
