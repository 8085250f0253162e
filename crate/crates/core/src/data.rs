//! Dataset ingestion and generation.
//!
//! LIBSVM-format parsing, sequential partitioning across clients, and seeded
//! synthetic instance generators. Parsed examples keep the sparse index/value
//! form; densification happens when a problem is built from the partition.

use std::io::BufRead;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::StreamFactory;

/// One labeled example in sparse form. Indices are 0-based internally
/// (the file format is 1-based) and strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub features: Vec<(usize, f64)>,
    /// +1.0 or -1.0.
    pub label: f64,
}

/// An exact split of a dataset across `n` clients.
#[derive(Debug, Clone)]
pub struct PartitionedDataset {
    pub clients: Vec<Vec<LabeledExample>>,
    pub d: usize,
}

impl PartitionedDataset {
    pub fn n(&self) -> usize {
        self.clients.len()
    }

    pub fn total_examples(&self) -> usize {
        self.clients.iter().map(Vec::len).sum()
    }

    /// Dense feature matrix and label vector for one client.
    pub fn dense_client(&self, i: usize) -> (Array2<f64>, Array1<f64>) {
        let examples = &self.clients[i];
        let mut features = Array2::zeros((examples.len(), self.d));
        let mut labels = Array1::zeros(examples.len());
        for (row, ex) in examples.iter().enumerate() {
            labels[row] = ex.label;
            for &(idx, val) in &ex.features {
                features[(row, idx)] = val;
            }
        }
        (features, labels)
    }
}

fn parse_label(token: &str, line_no: usize) -> Result<f64> {
    match token {
        "1" | "+1" => Ok(1.0),
        "-1" => Ok(-1.0),
        other => Err(Error::data(
            line_no,
            format!("label `{other}` is not one of 1, +1, -1"),
        )),
    }
}

/// Parses LIBSVM text (`label idx:val idx:val ...`, 1-based indices).
///
/// Returns the examples and the inferred dimension `d` (max index seen,
/// raised to `target_d` when that is larger). Lines may end in LF or CRLF;
/// comments are not part of the format and are rejected.
pub fn parse_libsvm(
    reader: impl BufRead,
    target_d: Option<usize>,
) -> Result<(Vec<LabeledExample>, usize)> {
    let mut examples = Vec::new();
    let mut max_index = 0usize;
    for (line_idx, line) in reader.lines().enumerate() {
        let line_no = line_idx + 1;
        let line = line?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.contains('#') {
            return Err(Error::data(line_no, "comments are not supported"));
        }
        let mut tokens = line.split_ascii_whitespace();
        let label_token = tokens
            .next()
            .ok_or_else(|| Error::data(line_no, "empty line"))?;
        let label = parse_label(label_token, line_no)?;
        let mut features = Vec::new();
        let mut prev_index = 0usize;
        for token in tokens {
            let (idx_str, val_str) = token.split_once(':').ok_or_else(|| {
                Error::data(line_no, format!("feature `{token}` is not idx:val"))
            })?;
            let idx: usize = idx_str
                .parse()
                .map_err(|_| Error::data(line_no, format!("bad index `{idx_str}`")))?;
            if idx == 0 {
                return Err(Error::data(line_no, "indices are 1-based; got 0"));
            }
            if idx <= prev_index {
                return Err(Error::data(
                    line_no,
                    format!("index {idx} does not increase (previous {prev_index})"),
                ));
            }
            let val: f64 = val_str
                .parse()
                .map_err(|_| Error::data(line_no, format!("bad value `{val_str}`")))?;
            if !val.is_finite() {
                return Err(Error::data(line_no, format!("non-finite value `{val_str}`")));
            }
            prev_index = idx;
            max_index = max_index.max(idx);
            features.push((idx - 1, val));
        }
        examples.push(LabeledExample { features, label });
    }
    let d = max_index.max(target_d.unwrap_or(0));
    Ok((examples, d))
}

/// Writes examples back in LIBSVM text form (1-based indices, LF lines).
pub fn serialize_libsvm(examples: &[LabeledExample]) -> String {
    let mut out = String::new();
    for ex in examples {
        if ex.label > 0.0 {
            out.push_str("+1");
        } else {
            out.push_str("-1");
        }
        for &(idx, val) in &ex.features {
            out.push_str(&format!(" {}:{}", idx + 1, val));
        }
        out.push('\n');
    }
    out
}

/// Splits examples into `n` contiguous blocks in file order. The remainder
/// goes to the first clients, so sizes differ by at most one.
pub fn partition_sequential(
    examples: Vec<LabeledExample>,
    n: usize,
    d: usize,
) -> Result<PartitionedDataset> {
    if n == 0 {
        return Err(Error::config("partition needs n >= 1"));
    }
    if n > examples.len() {
        return Err(Error::config(format!(
            "cannot split {} examples across {} clients",
            examples.len(),
            n
        )));
    }
    let base = examples.len() / n;
    let extra = examples.len() % n;
    let mut clients = Vec::with_capacity(n);
    let mut iter = examples.into_iter();
    for i in 0..n {
        let size = base + usize::from(i < extra);
        clients.push(iter.by_ref().take(size).collect());
    }
    Ok(PartitionedDataset { clients, d })
}

/// Seeded-shuffle variant of [`partition_sequential`] for robustness runs.
pub fn partition_shuffled(
    mut examples: Vec<LabeledExample>,
    n: usize,
    d: usize,
    seed: u64,
) -> Result<PartitionedDataset> {
    use rand::seq::SliceRandom;
    let mut rng = StreamFactory::new(seed).stream(0);
    examples.shuffle(&mut rng);
    partition_sequential(examples, n, d)
}

/// Generates a strongly heterogeneous synthetic instance: client `i` draws
/// features from a shifted Gaussian and labels from a client-specific linear
/// separator with logistic noise. `heterogeneity = 0` makes all clients draw
/// i.i.d. from the same distribution.
pub fn synth_instance(
    n: usize,
    d: usize,
    per_client: usize,
    heterogeneity: f64,
    seed: u64,
) -> PartitionedDataset {
    assert!(n >= 1 && d >= 1 && per_client >= 1, "all counts positive");
    let factory = StreamFactory::new(seed);
    let mut setup = factory.stream(0);
    let scale = 1.0 / (d as f64).sqrt();
    let shared_separator: Vec<f64> = (0..d)
        .map(|_| setup.sample::<f64, _>(StandardNormal))
        .collect();

    let mut clients = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = factory.stream(1 + i as u64);
        let shift: Vec<f64> = (0..d)
            .map(|_| heterogeneity * scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let separator: Vec<f64> = shared_separator
            .iter()
            .map(|&w| w + heterogeneity * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut examples = Vec::with_capacity(per_client);
        for _ in 0..per_client {
            let features: Vec<(usize, f64)> = (0..d)
                .map(|j| (j, shift[j] + rng.sample::<f64, _>(StandardNormal)))
                .collect();
            let margin: f64 = features.iter().map(|&(j, v)| v * separator[j]).sum();
            let p_pos = 1.0 / (1.0 + (-margin).exp());
            let label = if rng.random::<f64>() < p_pos { 1.0 } else { -1.0 };
            examples.push(LabeledExample { features, label });
        }
        clients.push(examples);
    }
    PartitionedDataset { clients, d }
}

pub mod fixtures {
    //! Deterministic generators for the bundled benchmark fixtures.
    //!
    //! The fixtures mimic the shape of the LIBSVM `a1a`/`a2a` adult datasets:
    //! binary one-hot features over 14 categorical groups spanning 123
    //! columns, 1605 and 2265 train examples respectively, ~25% positive labels.
    //! They stand in for the real files, which cannot be redistributed here;
    //! drop the genuine files over `data/a1a.libsvm` / `data/a2a.libsvm` to
    //! run against them instead.

    use super::LabeledExample;
    use crate::rng::StreamFactory;
    use rand::Rng;
    use rand_distr::StandardNormal;

    /// Group sizes summing to 123, mirroring the adult encoding's mix of
    /// small binned-continuous groups and larger categorical ones.
    const GROUP_SIZES: [usize; 14] = [5, 9, 16, 7, 14, 6, 5, 10, 2, 4, 12, 9, 15, 9];

    /// Fraction of positive labels (the adult datasets are imbalanced).
    const POSITIVE_RATE: f64 = 0.246;

    /// Strength of the label signal carried by category choices.
    const SIGNAL: f64 = 0.9;

    /// Generates `count` one-hot examples over 123 binary features with a
    /// label-correlated category distribution. Fully determined by `seed`.
    pub fn adult_like(count: usize, seed: u64) -> Vec<LabeledExample> {
        let factory = StreamFactory::new(seed);
        let mut setup = factory.stream(0);
        // Per-group, per-category base log-weights (skewed marginals) and
        // label couplings.
        let mut base: Vec<Vec<f64>> = Vec::new();
        let mut coupling: Vec<Vec<f64>> = Vec::new();
        for &size in &GROUP_SIZES {
            base.push((0..size).map(|c| -0.6 * c as f64).collect());
            coupling.push(
                (0..size)
                    .map(|_| SIGNAL * setup.sample::<f64, _>(StandardNormal))
                    .collect(),
            );
        }

        let mut rng = factory.stream(1);
        let mut examples = Vec::with_capacity(count);
        for _ in 0..count {
            let label = if rng.random::<f64>() < POSITIVE_RATE {
                1.0
            } else {
                -1.0
            };
            let mut features = Vec::with_capacity(GROUP_SIZES.len());
            let mut offset = 0usize;
            for (g, &size) in GROUP_SIZES.iter().enumerate() {
                let weights: Vec<f64> = (0..size)
                    .map(|c| (base[g][c] + label * coupling[g][c]).exp())
                    .collect();
                let total: f64 = weights.iter().sum();
                let mut u = rng.random::<f64>() * total;
                let mut chosen = size - 1;
                for (c, w) in weights.iter().enumerate() {
                    if u < *w {
                        chosen = c;
                        break;
                    }
                    u -= w;
                }
                features.push((offset + chosen, 1.0));
                offset += size;
            }
            examples.push(LabeledExample { features, label });
        }
        examples
    }

    /// Seeds for the two bundled fixture files.
    pub const A1A_LIKE: (usize, u64) = (1605, 0xAD01);
    pub const A2A_LIKE: (usize, u64) = (2265, 0xAD02);
}
