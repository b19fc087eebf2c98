//! Synthetic benchmark generators, CSV ingestion and preprocessing.
//!
//! All generators draw `X` from a standard normal (plus the construction's
//! shifts) and produce binary labels from a per-row quantity `g(x)` through
//! `P(Y=1|x) = 1/(1+g(x))`. Labels come from that probability either by
//! thresholding at 1/2 (the default, which reproduces the reference accuracy
//! ranges) or by Bernoulli sampling.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_rng, tag};

/// A column group produced by one-hot encoding a categorical attribute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatGroup {
    pub name: String,
    pub columns: Vec<usize>,
}

/// Feature matrix with binary labels and (optionally) categorical structure.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDataset {
    pub x: Array2<f64>,
    /// Labels in {0.0, 1.0}.
    pub y: Array1<f64>,
    pub feature_names: Vec<String>,
    pub cat_groups: Vec<CatGroup>,
}

impl TabularDataset {
    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.x.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.nrows() != self.y.len() {
            return Err(Error::shape("rows of X and length of y differ"));
        }
        if self.feature_names.len() != self.x.ncols() {
            return Err(Error::shape("feature name count does not match columns"));
        }
        if self.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("feature matrix contains a non-finite entry"));
        }
        if self.y.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::data("labels must be 0 or 1"));
        }
        let mut seen = vec![false; self.x.ncols()];
        for g in &self.cat_groups {
            for &c in &g.columns {
                if c >= self.x.ncols() {
                    return Err(Error::data(format!("categorical group column {c} out of range")));
                }
                if seen[c] {
                    return Err(Error::data(format!("categorical groups overlap at column {c}")));
                }
                seen[c] = true;
            }
        }
        Ok(())
    }

    /// Recover the categorical value of `group` in `row` from its one-hot
    /// block (the value is the part of the feature name after `=`).
    pub fn decode_categorical(&self, group: &CatGroup, row: usize) -> Option<&str> {
        group
            .columns
            .iter()
            .find(|&&c| self.x[[row, c]] == 1.0)
            .and_then(|&c| self.feature_names[c].split_once('=').map(|(_, v)| v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SyntheticKind {
    SynRank,
    SynRank100,
    L2xXor,
    L2xOrange,
    L2xNonlinearAdditive,
    L2xSwitch,
}

impl SyntheticKind {
    pub fn n_features(self) -> usize {
        match self {
            SyntheticKind::SynRank100 => 100,
            _ => 10,
        }
    }
}

/// How the label probability turns into a label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LabelRule {
    /// `y = 1` iff `P(Y=1|x) > 1/2`.
    #[default]
    Threshold,
    /// `y ~ Bernoulli(P(Y=1|x))`.
    Bernoulli,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    #[serde(default)]
    pub label_rule: LabelRule,
}

impl SyntheticSpec {
    pub fn new(kind: SyntheticKind, n_train: usize, n_test: usize, seed: u64) -> Result<Self> {
        if n_train == 0 || n_test == 0 {
            return Err(Error::invalid("n_train and n_test must be >= 1"));
        }
        Ok(Self { kind, n_train, n_test, seed, label_rule: LabelRule::default() })
    }
}

/// Segment row counts of the rank benchmark: 45% / 35% / remainder.
pub fn synrank_segment_sizes(n: usize) -> (usize, usize, usize) {
    let n1 = (n as f64 * 0.45).round() as usize;
    let n2 = (n as f64 * 0.35).round() as usize;
    (n1, n2, n - n1 - n2)
}

/// Generate train and test splits for `spec` (independent draws from one
/// seeded stream per split).
pub fn generate(spec: &SyntheticSpec) -> Result<(TabularDataset, TabularDataset)> {
    if spec.n_train == 0 || spec.n_test == 0 {
        return Err(Error::invalid("n_train and n_test must be >= 1"));
    }
    let train = generate_split(spec, spec.n_train, tag::DATA_TRAIN);
    let test = generate_split(spec, spec.n_test, tag::DATA_TEST);
    Ok((train, test))
}

fn generate_split(spec: &SyntheticSpec, n: usize, stream: u64) -> TabularDataset {
    let mut rng = derive_rng(spec.seed, stream);
    match spec.kind {
        SyntheticKind::SynRank => rank_benchmark(n, 10, 5, 0, 1, spec.label_rule, &mut rng),
        SyntheticKind::SynRank100 => rank_benchmark(n, 100, 99, 0, 74, spec.label_rule, &mut rng),
        kind => l2x_benchmark(kind, n, spec.label_rule, &mut rng),
    }
}

/// The rank benchmark over `d` features: the first 45% of rows shift
/// `neg_col` to mean -10 and label through it, the next 35% shift `pos_col`
/// to +10, the rest label through `tail_col` unshifted. Rows are shuffled
/// after labeling.
fn rank_benchmark(
    n: usize,
    d: usize,
    neg_col: usize,
    pos_col: usize,
    tail_col: usize,
    rule: LabelRule,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> TabularDataset {
    let mut x = standard_normal(n, d, rng);
    let (n1, n2, _) = synrank_segment_sizes(n);
    let mut log_g = Array1::zeros(n);
    for i in 0..n {
        if i < n1 {
            x[[i, neg_col]] -= 10.0;
            log_g[i] = x[[i, neg_col]];
        } else if i < n1 + n2 {
            x[[i, pos_col]] += 10.0;
            log_g[i] = x[[i, pos_col]];
        } else {
            log_g[i] = x[[i, tail_col]];
        }
    }
    let y = draw_labels(&log_g, rule, rng);
    let (x, y) = shuffle_rows(x, y, rng);
    TabularDataset { x, y, feature_names: feature_names(d), cat_groups: vec![] }
}

fn l2x_benchmark(
    kind: SyntheticKind,
    n: usize,
    rule: LabelRule,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> TabularDataset {
    let d = 10;
    let mut x = standard_normal(n, d, rng);
    let mut log_g = Array1::zeros(n);
    match kind {
        SyntheticKind::L2xSwitch => {
            for i in 0..n {
                // f10 from an equal mixture of N(+3,1) and N(-3,1); the
                // drawn component selects the labelling branch.
                let positive: bool = rng.random::<f64>() < 0.5;
                let eps: f64 = StandardNormal.sample(rng);
                x[[i, 9]] = if positive { 3.0 + eps } else { -3.0 + eps };
                let row = x.row(i);
                log_g[i] = if positive {
                    orange_log_g(&[row[0], row[1], row[2], row[3]])
                } else {
                    additive_log_g(&[row[4], row[5], row[6], row[7]])
                };
            }
        }
        _ => {
            for i in 0..n {
                let row = x.row(i);
                log_g[i] = match kind {
                    SyntheticKind::L2xXor => row[0] * row[1],
                    SyntheticKind::L2xOrange => orange_log_g(&[row[0], row[1], row[2], row[3]]),
                    SyntheticKind::L2xNonlinearAdditive => {
                        additive_log_g(&[row[0], row[1], row[2], row[3]])
                    }
                    _ => unreachable!("rank benchmarks handled separately"),
                };
            }
        }
    }
    let y = draw_labels(&log_g, rule, rng);
    let (x, y) = shuffle_rows(x, y, rng);
    TabularDataset { x, y, feature_names: feature_names(d), cat_groups: vec![] }
}

fn orange_log_g(f: &[f64; 4]) -> f64 {
    f.iter().map(|v| v * v).sum::<f64>() - 4.0
}

fn additive_log_g(f: &[f64; 4]) -> f64 {
    -100.0 * (2.0 * f[0]).sin() + 2.0 * f[1].abs() + f[2] + (-f[3]).exp()
}

/// `P(Y=1|x)` for a generator defined through `g = exp(log_g)`.
pub fn label_probability(log_g: f64) -> f64 {
    1.0 / (1.0 + log_g.exp())
}

fn draw_labels(log_g: &Array1<f64>, rule: LabelRule, rng: &mut rand_chacha::ChaCha8Rng) -> Array1<f64> {
    log_g.mapv(|lg| match rule {
        LabelRule::Threshold => {
            if lg < 0.0 {
                1.0
            } else {
                0.0
            }
        }
        LabelRule::Bernoulli => {
            if rng.random::<f64>() < label_probability(lg) {
                1.0
            } else {
                0.0
            }
        }
    })
}

fn standard_normal(n: usize, d: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| StandardNormal.sample(rng))
}

fn shuffle_rows(x: Array2<f64>, y: Array1<f64>, rng: &mut rand_chacha::ChaCha8Rng) -> (Array2<f64>, Array1<f64>) {
    let n = x.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut xs = Array2::zeros(x.dim());
    let mut ys = Array1::zeros(n);
    for (dst, &src) in order.iter().enumerate() {
        xs.row_mut(dst).assign(&x.row(src));
        ys[dst] = y[src];
    }
    (xs, ys)
}

fn feature_names(d: usize) -> Vec<String> {
    (1..=d).map(|i| format!("f{i}")).collect()
}

// ---------------------------------------------------------------------------
// CSV ingestion
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvIngestOptions {
    pub label_column: String,
    #[serde(default)]
    pub categorical_columns: Vec<String>,
    #[serde(default = "default_true")]
    pub drop_missing: bool,
    /// Label value mapped to 1. Without it, numeric 0/1 labels pass through
    /// and a two-valued text label maps its lexicographically larger value to 1.
    #[serde(default)]
    pub positive_label: Option<String>,
    /// Cell contents treated as missing.
    #[serde(default = "default_missing_tokens")]
    pub missing_tokens: Vec<String>,
}

fn default_true() -> bool {
    true
}

fn default_missing_tokens() -> Vec<String> {
    vec![String::new(), "?".to_string(), "NA".to_string()]
}

impl CsvIngestOptions {
    pub fn new(label_column: impl Into<String>) -> Self {
        Self {
            label_column: label_column.into(),
            categorical_columns: vec![],
            drop_missing: true,
            positive_label: None,
            missing_tokens: default_missing_tokens(),
        }
    }
}

/// Read a headered CSV, one-hot encode the configured categorical columns
/// (recorded in `cat_groups`), binarize the label and optionally drop rows
/// with missing values.
pub fn ingest_csv(path: &Path, opts: &CsvIngestOptions) -> Result<TabularDataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|s| s.to_string()).collect();
    let label_idx = headers
        .iter()
        .position(|h| h == &opts.label_column)
        .ok_or_else(|| Error::data(format!("unknown label column '{}'", opts.label_column)))?;
    for c in &opts.categorical_columns {
        if !headers.iter().any(|h| h == c) {
            return Err(Error::data(format!("unknown categorical column '{c}'")));
        }
        if c == &opts.label_column {
            return Err(Error::data("label column cannot be categorical-encoded"));
        }
    }
    let is_cat: Vec<bool> = headers.iter().map(|h| opts.categorical_columns.contains(h)).collect();
    let is_missing = |cell: &str| opts.missing_tokens.iter().any(|t| t == cell);

    let mut rows: Vec<Vec<String>> = Vec::new();
    for record in reader.records() {
        let record = record?;
        if record.len() != headers.len() {
            if opts.drop_missing {
                continue;
            }
            return Err(Error::data("row with wrong field count"));
        }
        let cells: Vec<String> = record.iter().map(|s| s.to_string()).collect();
        if cells.iter().any(|c| is_missing(c)) {
            if opts.drop_missing {
                continue;
            }
            return Err(Error::data("missing value (enable drop_missing to skip such rows)"));
        }
        rows.push(cells);
    }
    if rows.is_empty() {
        return Err(Error::data("no usable rows after ingestion"));
    }

    // Ordered category vocabularies; sorted so the encoding does not depend
    // on row order.
    let mut vocab: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (ci, &cat) in is_cat.iter().enumerate() {
        if cat {
            let mut values: Vec<String> = rows.iter().map(|r| r[ci].clone()).collect();
            values.sort();
            values.dedup();
            vocab.insert(ci, values);
        }
    }

    let mut feature_names = Vec::new();
    let mut cat_groups = Vec::new();
    let mut col_offsets: Vec<usize> = Vec::with_capacity(headers.len());
    for (ci, header) in headers.iter().enumerate() {
        col_offsets.push(feature_names.len());
        if ci == label_idx {
            continue;
        }
        if let Some(values) = vocab.get(&ci) {
            let start = feature_names.len();
            for v in values {
                feature_names.push(format!("{header}={v}"));
            }
            cat_groups.push(CatGroup { name: header.clone(), columns: (start..feature_names.len()).collect() });
        } else {
            feature_names.push(header.clone());
        }
    }

    let d = feature_names.len();
    let n = rows.len();
    let mut x = Array2::zeros((n, d));
    let mut y = Array1::zeros(n);
    let label_values: Vec<&str> = rows.iter().map(|r| r[label_idx].as_str()).collect();
    let label_of = label_mapper(&label_values, opts.positive_label.as_deref())?;
    for (ri, row) in rows.iter().enumerate() {
        y[ri] = label_of(&row[label_idx]);
        for (ci, cell) in row.iter().enumerate() {
            if ci == label_idx {
                continue;
            }
            if let Some(values) = vocab.get(&ci) {
                let vi = values.binary_search(cell).expect("value came from this vocabulary");
                x[[ri, col_offsets[ci] + vi]] = 1.0;
            } else {
                let parsed: f64 = cell
                    .parse()
                    .map_err(|_| Error::data(format!("column '{}' has non-numeric value '{cell}'", headers[ci])))?;
                x[[ri, col_offsets[ci]]] = parsed;
            }
        }
    }

    let ds = TabularDataset { x, y, feature_names, cat_groups };
    ds.validate()?;
    Ok(ds)
}

#[allow(clippy::type_complexity)]
fn label_mapper<'a>(
    values: &[&str],
    positive: Option<&'a str>,
) -> Result<Box<dyn Fn(&str) -> f64 + 'a>> {
    if let Some(pos) = positive {
        return Ok(Box::new(move |v: &str| if v == pos { 1.0 } else { 0.0 }));
    }
    let numeric: Option<Vec<f64>> = values.iter().map(|v| v.parse::<f64>().ok()).collect();
    if let Some(nums) = numeric {
        if nums.iter().all(|&v| v == 0.0 || v == 1.0) {
            return Ok(Box::new(|v: &str| v.parse::<f64>().unwrap()));
        }
        return Err(Error::data("numeric label is not binary (values outside {0,1})"));
    }
    let mut distinct: Vec<&str> = values.to_vec();
    distinct.sort();
    distinct.dedup();
    if distinct.len() != 2 {
        return Err(Error::data(format!(
            "label column has {} distinct values; expected 2 (or set positive_label)",
            distinct.len()
        )));
    }
    let hi = distinct[1].to_string();
    Ok(Box::new(move |v: &str| if v == hi { 1.0 } else { 0.0 }))
}

// ---------------------------------------------------------------------------
// Standardization
// ---------------------------------------------------------------------------

/// Per-column mean and standard deviation computed on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Compute column statistics on `train` (population standard deviation) and
/// scale `train` and every dataset in `others` with them. Constant columns
/// pass through centered (their std is recorded as 1).
pub fn standardize(train: &mut TabularDataset, others: &mut [&mut TabularDataset]) -> Result<PreprocessStats> {
    let n = train.n_rows();
    if n == 0 {
        return Err(Error::data("cannot standardize an empty dataset"));
    }
    let d = train.n_features();
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for (j, col) in train.x.columns().into_iter().enumerate() {
        let m = col.sum() / n as f64;
        let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
        mean[j] = m;
        std[j] = if var == 0.0 {
            log::warn!("column {j} ('{}') is constant; passing it through centered", train.feature_names[j]);
            1.0
        } else {
            var.sqrt()
        };
    }
    let stats = PreprocessStats { mean, std };
    apply_stats(train, &stats)?;
    for ds in others {
        apply_stats(ds, &stats)?;
    }
    Ok(stats)
}

/// Apply previously computed statistics to a dataset.
pub fn apply_stats(ds: &mut TabularDataset, stats: &PreprocessStats) -> Result<()> {
    if ds.n_features() != stats.mean.len() {
        return Err(Error::shape("statistics were computed for a different feature count"));
    }
    for (j, mut col) in ds.x.columns_mut().into_iter().enumerate() {
        col.mapv_inplace(|v| (v - stats.mean[j]) / stats.std[j]);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Dataset files: CSV plus JSON schema sidecar
// ---------------------------------------------------------------------------

/// Sidecar describing an exported dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub feature_names: Vec<String>,
    pub cat_groups: Vec<CatGroup>,
    pub n_rows: usize,
    pub label_mean: f64,
}

impl DatasetSchema {
    pub fn of(ds: &TabularDataset) -> Self {
        Self {
            feature_names: ds.feature_names.clone(),
            cat_groups: ds.cat_groups.clone(),
            n_rows: ds.n_rows(),
            label_mean: ds.y.sum() / ds.n_rows() as f64,
        }
    }
}

/// Write `name.csv` (features + trailing `label` column) and `name.schema.json`.
pub fn write_dataset(ds: &TabularDataset, dir: &Path, name: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{name}.csv")))?);
    writeln!(file, "{},label", ds.feature_names.join(","))?;
    for (row, &label) in ds.x.rows().into_iter().zip(ds.y.iter()) {
        let mut line = String::new();
        for v in row.iter() {
            line.push_str(&format!("{v},"));
        }
        line.push_str(&format!("{}", label as u8));
        writeln!(file, "{line}")?;
    }
    file.flush()?;
    let schema = DatasetSchema::of(ds);
    let sf = std::fs::File::create(dir.join(format!("{name}.schema.json")))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(sf), &schema)?;
    Ok(())
}

/// Read a dataset written by [`write_dataset`]. The schema sidecar (looked up
/// next to the CSV) restores the categorical groups when present.
pub fn read_dataset(csv_path: &Path) -> Result<TabularDataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(csv_path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|s| s.to_string()).collect();
    if headers.last().map(|s| s.as_str()) != Some("label") {
        return Err(Error::data("expected a trailing 'label' column"));
    }
    let d = headers.len() - 1;
    let mut values: Vec<f64> = Vec::new();
    let mut labels: Vec<f64> = Vec::new();
    for record in reader.records() {
        let record = record?;
        if record.len() != d + 1 {
            return Err(Error::data("row with wrong field count"));
        }
        for cell in record.iter().take(d) {
            values.push(cell.parse().map_err(|_| Error::data(format!("non-numeric cell '{cell}'")))?);
        }
        labels.push(record[d].parse().map_err(|_| Error::data("non-numeric label"))?);
    }
    let n = labels.len();
    let x = Array2::from_shape_vec((n, d), values).expect("shape follows construction");
    let y = Array1::from_vec(labels);

    let schema_path = csv_path.with_extension("").with_extension("schema.json");
    let (feature_names, cat_groups) = if schema_path.exists() {
        let schema: DatasetSchema = serde_json::from_reader(std::fs::File::open(&schema_path)?)?;
        (schema.feature_names, schema.cat_groups)
    } else {
        (headers[..d].to_vec(), vec![])
    };
    let ds = TabularDataset { x, y, feature_names, cat_groups };
    ds.validate()?;
    Ok(ds)
}
