//! Data sources: a ground-truth synthetic CTR generator, Criteo-format TSV
//! ingestion with a pinned hashing trick, negative down-sampling, and
//! chronological day splits.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array2;
use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{sigmoid, CategoricalField, FeatureSchema, Minibatch};

/// Shape of the synthetic benchmark: labels depend only on a fixed, recorded
/// subset of informative fields, so recovery is checkable against ground
/// truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_fields: usize,
    pub n_informative: usize,
    /// Categories per field (shared by all fields).
    pub cardinality: usize,
    pub n_continuous: usize,
    /// Scale of the per-category logit weights.
    pub weight_scale: f64,
    /// Label flip probability in [0, 0.5).
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_fields: 30,
            n_informative: 10,
            cardinality: 100,
            n_continuous: 4,
            weight_scale: 2.0,
            label_noise: 0.05,
            seed: 17,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_informative > self.n_fields {
            return Err(Error::InvalidConfig(format!(
                "n_informative {} exceeds n_fields {}",
                self.n_informative, self.n_fields
            )));
        }
        if self.n_fields == 0 || self.cardinality == 0 {
            return Err(Error::InvalidConfig(
                "synthetic spec needs at least one field and category".into(),
            ));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return Err(Error::InvalidConfig(format!(
                "label_noise must lie in [0, 0.5), got {}",
                self.label_noise
            )));
        }
        if !(self.weight_scale > 0.0) {
            return Err(Error::InvalidConfig("weight_scale must be positive".into()));
        }
        Ok(())
    }
}

/// The generator: weights drawn once from the spec seed and recorded, so the
/// Bayes-optimal predictor stays queryable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticData {
    pub spec: SyntheticSpec,
    /// Sorted informative field indices.
    informative: Vec<usize>,
    /// n_fields x cardinality logit weights; zero rows for noise fields.
    weights: Array2<f64>,
}

impl SyntheticData {
    pub fn new(spec: SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

        let mut fields: Vec<usize> = (0..spec.n_fields).collect();
        // Seeded Fisher-Yates; the informative subset is fixed per spec.
        for i in (1..fields.len()).rev() {
            let j = rng.gen_range(0..=i);
            fields.swap(i, j);
        }
        let mut informative: Vec<usize> = fields[..spec.n_informative].to_vec();
        informative.sort_unstable();

        let normal = Normal::new(0.0, spec.weight_scale)
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let mut weights = Array2::zeros((spec.n_fields, spec.cardinality));
        for &f in &informative {
            for c in 0..spec.cardinality {
                weights[[f, c]] = normal.sample(&mut rng);
            }
        }
        Ok(Self {
            spec,
            informative,
            weights,
        })
    }

    /// Ground-truth informative field indices (sorted).
    pub fn informative(&self) -> &[usize] {
        &self.informative
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    /// Schema matching this generator.
    pub fn schema(&self, embedding_dim: usize, dense_rep_dim: usize, cross: bool) -> FeatureSchema {
        FeatureSchema {
            categorical_fields: (0..self.spec.n_fields)
                .map(|i| CategoricalField {
                    name: format!("f{i:02}"),
                    cardinality: self.spec.cardinality,
                    embedding_dim,
                })
                .collect(),
            continuous_dim: self.spec.n_continuous,
            dense_rep_dim,
            cross_enabled: cross,
        }
    }

    /// True logit of one id row.
    pub fn logit(&self, ids: &[u32]) -> f64 {
        self.informative
            .iter()
            .map(|&f| self.weights[[f, ids[f] as usize]])
            .sum()
    }

    /// Bayes-optimal click probability for one id row (label noise folded in).
    pub fn bayes_prob(&self, ids: &[u32]) -> f64 {
        let p = sigmoid(self.logit(ids));
        p * (1.0 - self.spec.label_noise) + (1.0 - p) * self.spec.label_noise
    }

    /// One deterministic minibatch from the supplied stream rng.
    pub fn sample_batch(&self, rng: &mut ChaCha8Rng, batch_size: usize) -> Minibatch {
        let spec = &self.spec;
        let id_dist = Uniform::new(0, spec.cardinality as u32);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut ids = Array2::zeros((batch_size, spec.n_fields));
        let mut continuous = Array2::zeros((batch_size, spec.n_continuous));
        let mut labels = Vec::with_capacity(batch_size);
        let informative_cont = spec.n_continuous.min(2);
        for row in 0..batch_size {
            for f in 0..spec.n_fields {
                ids[[row, f]] = id_dist.sample(rng);
            }
            let logit: f64 = self
                .informative
                .iter()
                .map(|&f| self.weights[[f, ids[[row, f]] as usize]])
                .sum();
            let mut label = (rng.gen::<f64>() < sigmoid(logit)) as u8 as f64;
            if rng.gen::<f64>() < spec.label_noise {
                label = 1.0 - label;
            }
            labels.push(label);
            for d in 0..spec.n_continuous {
                let base = if d < informative_cont { logit } else { 0.0 };
                continuous[[row, d]] = base + noise.sample(rng);
            }
        }
        Minibatch {
            labels,
            categorical_ids: ids,
            continuous,
        }
    }

    /// Materialize a deterministic stream of batches.
    pub fn batches(&self, stream_seed: u64, batch_size: usize, n_batches: usize) -> Vec<Minibatch> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed ^ stream_seed);
        (0..n_batches)
            .map(|_| self.sample_batch(&mut rng, batch_size))
            .collect()
    }

    /// Endless deterministic batch iterator.
    pub fn batch_iter(
        &self,
        stream_seed: u64,
        batch_size: usize,
    ) -> impl Iterator<Item = Minibatch> + '_ {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed ^ stream_seed);
        std::iter::repeat_with(move || self.sample_batch(&mut rng, batch_size))
    }

    /// Bayes-oracle scores for one batch; the recovery ceiling.
    pub fn bayes_scores(&self, batch: &Minibatch) -> Vec<f64> {
        (0..batch.len())
            .map(|row| {
                let ids: Vec<u32> = batch.categorical_ids.row(row).to_vec();
                self.bayes_prob(&ids)
            })
            .collect()
    }

    /// Persist samples in the shared TSV shape (label, continuous columns,
    /// hex id tokens) plus a sidecar ground-truth file.
    pub fn write_tsv(
        &self,
        path: &Path,
        stream_seed: u64,
        n_samples: usize,
        batch_size: usize,
    ) -> Result<()> {
        let mut out = String::new();
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed ^ stream_seed);
        let mut remaining = n_samples;
        while remaining > 0 {
            let b = remaining.min(batch_size);
            let batch = self.sample_batch(&mut rng, b);
            for row in 0..b {
                out.push_str(&format!("{}", batch.labels[row] as u8));
                for d in 0..self.spec.n_continuous {
                    out.push('\t');
                    out.push_str(&format!("{:.17e}", batch.continuous[[row, d]]));
                }
                for f in 0..self.spec.n_fields {
                    out.push('\t');
                    out.push_str(&format!("{:08x}", batch.categorical_ids[[row, f]]));
                }
                out.push('\n');
            }
            remaining -= b;
        }
        crate::checkpoint::write_atomic(path, out.as_bytes())
    }

    /// Sidecar with the informative indices and weight matrix.
    pub fn write_ground_truth(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::CorruptArtifact {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        crate::checkpoint::write_atomic(path, &json)
    }

    /// Read back a TSV written by [`SyntheticData::write_tsv`].
    pub fn read_tsv(&self, path: &Path) -> Result<Vec<(f64, Vec<f64>, Vec<u32>)>> {
        let file = std::fs::File::open(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut samples = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::Io {
                path: path.display().to_string(),
                source: e,
            })?;
            let cols: Vec<&str> = line.split('\t').collect();
            let expect = 1 + self.spec.n_continuous + self.spec.n_fields;
            if cols.len() != expect {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("expected {expect} columns, got {}", cols.len()),
                });
            }
            let label: f64 = cols[0].parse().map_err(|_| Error::Parse {
                line: i + 1,
                message: format!("bad label `{}`", cols[0]),
            })?;
            let cont = cols[1..1 + self.spec.n_continuous]
                .iter()
                .map(|c| {
                    c.parse::<f64>().map_err(|_| Error::Parse {
                        line: i + 1,
                        message: format!("bad continuous value `{c}`"),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            let ids = cols[1 + self.spec.n_continuous..]
                .iter()
                .map(|c| {
                    u32::from_str_radix(c, 16).map_err(|_| Error::Parse {
                        line: i + 1,
                        message: format!("bad id token `{c}`"),
                    })
                })
                .collect::<Result<Vec<u32>>>()?;
            samples.push((label, cont, ids));
        }
        Ok(samples)
    }
}

/// Group flat samples into minibatches.
pub fn batchify(samples: &[(f64, Vec<f64>, Vec<u32>)], batch_size: usize) -> Vec<Minibatch> {
    samples
        .chunks(batch_size)
        .map(|chunk| {
            let b = chunk.len();
            let n_cont = chunk[0].1.len();
            let n_fields = chunk[0].2.len();
            let mut continuous = Array2::zeros((b, n_cont));
            let mut ids = Array2::zeros((b, n_fields));
            let mut labels = Vec::with_capacity(b);
            for (row, (label, cont, id_row)) in chunk.iter().enumerate() {
                labels.push(*label);
                for d in 0..n_cont {
                    continuous[[row, d]] = cont[d];
                }
                for f in 0..n_fields {
                    ids[[row, f]] = id_row[f];
                }
            }
            Minibatch {
                labels,
                categorical_ids: ids,
                continuous,
            }
        })
        .collect()
}

/// One parsed Criteo click log line: 13 possibly-missing integers and 26
/// possibly-missing 32-bit hex tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct CriteoRecord {
    pub label: u8,
    pub ints: [Option<i64>; 13],
    pub cats: [Option<u32>; 26],
}

pub const CRITEO_INT_FEATURES: usize = 13;
pub const CRITEO_CAT_FEATURES: usize = 26;

/// Parse one tab-separated Criteo line; `line_number` is 1-based and only
/// used for error reporting.
pub fn criteo_parse(line: &str, line_number: usize) -> Result<CriteoRecord> {
    let cols: Vec<&str> = line.split('\t').collect();
    let expect = 1 + CRITEO_INT_FEATURES + CRITEO_CAT_FEATURES;
    if cols.len() != expect {
        return Err(Error::Parse {
            line: line_number,
            message: format!("expected {expect} tab-separated fields, got {}", cols.len()),
        });
    }
    let label = match cols[0] {
        "0" => 0,
        "1" => 1,
        other => {
            return Err(Error::Parse {
                line: line_number,
                message: format!("bad label `{other}`"),
            })
        }
    };
    let mut ints = [None; CRITEO_INT_FEATURES];
    for (i, col) in cols[1..1 + CRITEO_INT_FEATURES].iter().enumerate() {
        if !col.is_empty() {
            ints[i] = Some(col.parse::<i64>().map_err(|_| Error::Parse {
                line: line_number,
                message: format!("bad integer feature `{col}`"),
            })?);
        }
    }
    let mut cats = [None; CRITEO_CAT_FEATURES];
    for (i, col) in cols[1 + CRITEO_INT_FEATURES..].iter().enumerate() {
        if !col.is_empty() {
            cats[i] = Some(u32::from_str_radix(col, 16).map_err(|_| Error::Parse {
                line: line_number,
                message: format!("bad hex token `{col}`"),
            })?);
        }
    }
    Ok(CriteoRecord { label, ints, cats })
}

/// Stable multiply-shift hash of a 32-bit token into `1..cardinality`;
/// id 0 stays reserved for missing values. Version-pinned: the golden file
/// test must never change.
pub fn hash_token(token: u32, cardinality: usize) -> usize {
    assert!(cardinality >= 2, "hashed cardinality must be at least 2");
    let h = (token as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 32;
    1 + (h as usize % (cardinality - 1))
}

/// DLRM-style integer transform: `log(1 + max(0, v))`, missing treated as 0.
pub fn int_feature_value(v: Option<i64>) -> f64 {
    ((1 + v.unwrap_or(0).max(0)) as f64).ln()
}

/// Hashed id of a categorical token; missing maps to the reserved id 0.
pub fn cat_feature_id(token: Option<u32>, cardinality: usize) -> u32 {
    token.map_or(0, |t| hash_token(t, cardinality) as u32)
}

/// Turn one record into (label, continuous, ids) under a shared hashed
/// cardinality per field.
pub fn criteo_to_sample(rec: &CriteoRecord, cardinality: usize) -> (f64, Vec<f64>, Vec<u32>) {
    let cont = rec.ints.iter().map(|&v| int_feature_value(v)).collect();
    let ids = rec
        .cats
        .iter()
        .map(|&t| cat_feature_id(t, cardinality))
        .collect();
    (rec.label as f64, cont, ids)
}

/// Keep every positive; keep each negative independently with probability
/// `keep_rate`. Deterministic for a given seed.
pub fn downsample_negatives<T, I, F>(
    stream: I,
    is_positive: F,
    keep_rate: f64,
    seed: u64,
) -> Result<Vec<T>>
where
    I: IntoIterator<Item = T>,
    F: Fn(&T) -> bool,
{
    if !(keep_rate > 0.0 && keep_rate <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "keep_rate must lie in (0, 1], got {keep_rate}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(stream
        .into_iter()
        .filter(|item| {
            // Draw for every negative so the pass/fail decision stays aligned
            // with the stream position regardless of earlier outcomes.
            if is_positive(item) {
                true
            } else {
                rng.gen::<f64>() < keep_rate
            }
        })
        .collect())
}

/// Partition day-tagged records into pretrain / select / eval streams by
/// inclusive day ranges, preserving input order. Records outside every range
/// are dropped.
pub fn day_split<T>(
    tagged: impl IntoIterator<Item = (u32, T)>,
    pretrain_days: (u32, u32),
    select_days: (u32, u32),
    eval_days: (u32, u32),
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let ranges = [pretrain_days, select_days, eval_days];
    for r in &ranges {
        if r.0 > r.1 {
            return Err(Error::InvalidConfig(format!("bad day range {}-{}", r.0, r.1)));
        }
    }
    for a in 0..3 {
        for b in a + 1..3 {
            if ranges[a].0 <= ranges[b].1 && ranges[b].0 <= ranges[a].1 {
                return Err(Error::OverlappingDays(format!(
                    "{}-{} overlaps {}-{}",
                    ranges[a].0, ranges[a].1, ranges[b].0, ranges[b].1
                )));
            }
        }
    }
    let mut pretrain = Vec::new();
    let mut select = Vec::new();
    let mut eval = Vec::new();
    for (day, item) in tagged {
        if day >= pretrain_days.0 && day <= pretrain_days.1 {
            pretrain.push(item);
        } else if day >= select_days.0 && day <= select_days.1 {
            select.push(item);
        } else if day >= eval_days.0 && day <= eval_days.1 {
            eval.push(item);
        }
    }
    Ok((pretrain, select, eval))
}

/// Write a text file line-per-record, used by the report emitters.
pub fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut buf = Vec::new();
    for l in lines {
        writeln!(buf, "{l}").expect("write to Vec cannot fail");
    }
    crate::checkpoint::write_atomic(path, &buf)
}
