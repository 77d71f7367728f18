//! Dataset ingestion, standardization, deterministic splitting, and
//! synthesis of OOD and adversarial test batches.
//!
//! All randomness in this module goes through [`ChaCha8Rng`], a seedable
//! counter-based generator, so splits and synthetic batches are
//! reproducible across runs and platforms.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierOutput;
use crate::error::RedError;
use crate::Result;

/// A feature matrix with integer class labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledDataset {
    /// N x M feature matrix.
    pub features: DMatrix<f64>,
    /// N class labels, each in `[0, num_classes)`.
    pub labels: Vec<usize>,
    /// Number of classes K.
    pub num_classes: usize,
}

impl LabeledDataset {
    /// Builds a dataset, inferring `num_classes = 1 + max(label)`.
    pub fn new(features: DMatrix<f64>, labels: Vec<usize>) -> Result<Self> {
        if features.nrows() == 0 || features.ncols() == 0 {
            return Err(RedError::Data("empty dataset".into()));
        }
        if features.nrows() != labels.len() {
            return Err(RedError::Dimension(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(bad) = features.iter().position(|v| !v.is_finite()) {
            return Err(RedError::Data(format!(
                "non-finite feature value at flat index {bad}"
            )));
        }
        let num_classes = 1 + *labels.iter().max().expect("nonempty");
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn m(&self) -> usize {
        self.features.ncols()
    }

    /// Row subset in the given index order. Labels keep the parent's K so
    /// partitions of one dataset stay dimensionally compatible.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let rows: Vec<usize> = indices.to_vec();
        let features = DMatrix::from_fn(rows.len(), self.m(), |i, j| self.features[(rows[i], j)]);
        let labels = rows.iter().map(|&i| self.labels[i]).collect();
        Self {
            features,
            labels,
            num_classes: self.num_classes,
        }
    }
}

/// Per-column means and standard deviations used for standardization.
///
/// The standard deviation is the population form (divide by N). Constant
/// columns are flagged and mapped to zero rather than rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub means: Vec<f64>,
    pub std_devs: Vec<f64>,
    pub constant: Vec<bool>,
}

impl StandardizationStats {
    /// Fits means and population standard deviations column by column.
    pub fn fit(features: &DMatrix<f64>) -> Self {
        let n = features.nrows() as f64;
        let m = features.ncols();
        let mut means = Vec::with_capacity(m);
        let mut std_devs = Vec::with_capacity(m);
        let mut constant = Vec::with_capacity(m);
        for j in 0..m {
            let col = features.column(j);
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            let is_const = sd == 0.0;
            means.push(mean);
            std_devs.push(if is_const { 1.0 } else { sd });
            constant.push(is_const);
        }
        Self {
            means,
            std_devs,
            constant,
        }
    }

    /// Applies `(x - mean) / sd`; constant columns map to 0.
    pub fn apply(&self, features: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(features.nrows(), features.ncols(), |i, j| {
            if self.constant[j] {
                0.0
            } else {
                (features[(i, j)] - self.means[j]) / self.std_devs[j]
            }
        })
    }

    /// Inverts [`apply`](Self::apply); constant columns restore their mean.
    pub fn invert(&self, features: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(features.nrows(), features.ncols(), |i, j| {
            if self.constant[j] {
                self.means[j]
            } else {
                features[(i, j)] * self.std_devs[j] + self.means[j]
            }
        })
    }
}

/// Standardizes every feature column to mean 0 and standard deviation 1.
pub fn standardize(ds: &LabeledDataset) -> Result<(LabeledDataset, StandardizationStats)> {
    if ds.n() < 2 {
        return Err(RedError::Data(
            "standardization needs at least 2 rows".into(),
        ));
    }
    let stats = StandardizationStats::fit(&ds.features);
    let features = stats.apply(&ds.features);
    Ok((
        LabeledDataset {
            features,
            labels: ds.labels.clone(),
            num_classes: ds.num_classes,
        },
        stats,
    ))
}

/// Disjoint train/validation/test index partition.
///
/// Sizes follow the 0.8/0.2 outer split with 20% of the training side
/// held out for validation: `|test| = round(0.2 n)` and
/// `|val| = round(0.2 (n - |test|))`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub seed: u64,
}

impl SplitPlan {
    /// Train and validation indices merged and sorted; this is the row set
    /// the error detector trains on.
    pub fn train_val_indices(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .train_indices
            .iter()
            .chain(self.val_indices.iter())
            .copied()
            .collect();
        v.sort_unstable();
        v
    }
}

/// Deterministic random split of `0..n` for a given seed.
pub fn make_split(n: usize, seed: u64) -> Result<SplitPlan> {
    if n < 5 {
        return Err(RedError::Data(format!(
            "cannot split {n} rows: need at least 5"
        )));
    }
    let n_test = (0.2 * n as f64).round() as usize;
    let n_trainval = n - n_test;
    let n_val = (0.2 * n_trainval as f64).round() as usize;
    let n_train = n_trainval - n_val;
    if n_test == 0 || n_val == 0 || n_train == 0 {
        return Err(RedError::Data(format!(
            "split of {n} rows leaves an empty partition ({n_train}/{n_val}/{n_test})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let mut test_indices: Vec<usize> = perm[..n_test].to_vec();
    let mut val_indices: Vec<usize> = perm[n_test..n_test + n_val].to_vec();
    let mut train_indices: Vec<usize> = perm[n_test + n_val..].to_vec();
    test_indices.sort_unstable();
    val_indices.sort_unstable();
    train_indices.sort_unstable();
    Ok(SplitPlan {
        train_indices,
        val_indices,
        test_indices,
        seed,
    })
}

/// What a synthetic batch imitates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    Ood,
    Adversarial,
}

/// A block of synthesized test rows.
///
/// OOD batches carry features only; the base classifier is run on them at
/// evaluation time. Adversarial batches copy correctly classified training
/// rows and carry fabricated classifier outputs claiming full confidence
/// on a wrong class.
#[derive(Debug, Clone)]
pub struct SyntheticBatch {
    pub features: DMatrix<f64>,
    pub fabricated_outputs: Option<ClassifierOutput>,
    pub kind: SyntheticKind,
}

/// I.i.d. standard-normal rows, `count` x `m`.
pub fn synth_ood(count: usize, m: usize, seed: u64) -> SyntheticBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = DMatrix::from_fn(count, m, |_, _| rng.sample(StandardNormal));
    SyntheticBatch {
        features,
        fabricated_outputs: None,
        kind: SyntheticKind::Ood,
    }
}

/// Copies `count` correctly classified training rows and fabricates a
/// one-hot softmax on a uniformly chosen wrong class for each.
pub fn synth_adversarial(
    train: &LabeledDataset,
    outputs: &ClassifierOutput,
    count: usize,
    seed: u64,
) -> Result<SyntheticBatch> {
    if outputs.predicted.len() != train.n() {
        return Err(RedError::Dimension(format!(
            "{} classifier outputs for {} training rows",
            outputs.predicted.len(),
            train.n()
        )));
    }
    let k = train.num_classes;
    if k < 2 {
        return Err(RedError::Data(
            "adversarial synthesis needs at least 2 classes".into(),
        ));
    }
    let correct: Vec<usize> = (0..train.n())
        .filter(|&i| outputs.predicted[i] == train.labels[i])
        .collect();
    if correct.len() < count {
        return Err(RedError::NotEnoughCorrectRows {
            needed: count,
            available: correct.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = correct;
    pool.shuffle(&mut rng);
    let chosen = &pool[..count];

    let features = DMatrix::from_fn(count, train.m(), |i, j| train.features[(chosen[i], j)]);
    let mut softmax = DMatrix::zeros(count, k);
    let mut predicted = Vec::with_capacity(count);
    for (row, &src) in chosen.iter().enumerate() {
        let true_class = train.labels[src];
        // uniform over the K-1 non-true classes
        let mut wrong = rng.gen_range(0..k - 1);
        if wrong >= true_class {
            wrong += 1;
        }
        softmax[(row, wrong)] = 1.0;
        predicted.push(wrong);
    }
    let max_prob = vec![1.0; count];
    let fabricated = ClassifierOutput {
        softmax,
        logits: None,
        predicted,
        max_prob,
    };
    Ok(SyntheticBatch {
        features,
        fabricated_outputs: Some(fabricated),
        kind: SyntheticKind::Adversarial,
    })
}

/// Column layout of a dataset CSV: feature columns followed by one integer
/// label column. Only the label column is named; every other column is a
/// feature, in file order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSchema {
    pub label_column: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            label_column: "label".into(),
        }
    }
}

/// Reads a UTF-8 CSV with a header row into a [`LabeledDataset`].
///
/// Row order is preserved; `num_classes = 1 + max(label)`. Labels must be
/// non-negative integers (a value like `2.5` is rejected with its row and
/// column).
pub fn load_dataset(path: &Path, schema: &CsvSchema) -> Result<LabeledDataset> {
    if !path.exists() {
        return Err(RedError::Data(format!(
            "dataset file not found: {}",
            path.display()
        )));
    }
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == schema.label_column)
        .ok_or_else(|| {
            RedError::Data(format!(
                "label column '{}' not found in {}",
                schema.label_column,
                path.display()
            ))
        })?;
    let feature_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != label_idx)
        .map(|(i, h)| (i, h.to_string()))
        .collect();
    if feature_cols.is_empty() {
        return Err(RedError::Data("no feature columns".into()));
    }

    let mut rows: Vec<f64> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for (row_no, record) in reader.records().enumerate() {
        let record = record?;
        for (idx, name) in &feature_cols {
            let cell = record.get(*idx).unwrap_or("");
            let value: f64 = cell.trim().parse().map_err(|_| RedError::Parse {
                row: row_no,
                column: name.clone(),
                message: format!("'{cell}' is not numeric"),
            })?;
            rows.push(value);
        }
        let cell = record.get(label_idx).unwrap_or("");
        let label: usize = cell.trim().parse().map_err(|_| RedError::Parse {
            row: row_no,
            column: schema.label_column.clone(),
            message: format!("'{cell}' is not a non-negative integer label"),
        })?;
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(RedError::Data(format!("empty dataset: {}", path.display())));
    }
    let features = DMatrix::from_row_slice(labels.len(), feature_cols.len(), &rows);
    LabeledDataset::new(features, labels)
}

/// Writes a synthetic batch in the dataset CSV layout plus a `kind` column.
/// Adversarial rows also carry their fabricated predicted label.
pub fn save_synthetic(path: &Path, batch: &SyntheticBatch) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let m = batch.features.ncols();
    let mut header: Vec<String> = (0..m).map(|j| format!("f{j}")).collect();
    header.push("kind".into());
    header.push("fabricated_pred".into());
    writer.write_record(&header)?;
    let kind = match batch.kind {
        SyntheticKind::Ood => "ood",
        SyntheticKind::Adversarial => "adversarial",
    };
    for i in 0..batch.features.nrows() {
        let mut record: Vec<String> = (0..m).map(|j| batch.features[(i, j)].to_string()).collect();
        record.push(kind.into());
        record.push(match &batch.fabricated_outputs {
            Some(out) => out.predicted[i].to_string(),
            None => String::new(),
        });
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::io::Write;

    fn write_temp_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_small_csv() {
        let f = write_temp_csv("f0,f1,label\n1.0,2.0,0\n3.0,4.0,1\n5.0,6.0,1\n");
        let ds = load_dataset(f.path(), &CsvSchema::default()).unwrap();
        assert_eq!(ds.n(), 3);
        assert_eq!(ds.m(), 2);
        assert_eq!(ds.num_classes, 2);
        assert_eq!(ds.labels, vec![0, 1, 1]);
        assert_eq!(ds.features[(2, 1)], 6.0);
    }

    #[test]
    fn load_abalone_shaped_csv() {
        // abalone's published shape: 4177 rows, 8 features, 3 classes
        let mut content = String::from("f0,f1,f2,f3,f4,f5,f6,f7,label\n");
        for i in 0..4177usize {
            let row: Vec<String> = (0..8).map(|j| format!("{}", (i * 8 + j) as f64)).collect();
            content.push_str(&format!("{},{}\n", row.join(","), i % 3));
        }
        let f = write_temp_csv(&content);
        let ds = load_dataset(f.path(), &CsvSchema::default()).unwrap();
        assert_eq!(ds.n(), 4177);
        assert_eq!(ds.m(), 8);
        assert_eq!(ds.num_classes, 3);
    }

    #[test]
    fn load_rejects_fractional_label() {
        let f = write_temp_csv("f0,label\n1.0,0\n2.0,2.5\n");
        let err = load_dataset(f.path(), &CsvSchema::default()).unwrap_err();
        match err {
            RedError::Parse { row, column, .. } => {
                assert_eq!(row, 1);
                assert_eq!(column, "label");
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn load_rejects_non_numeric_cell() {
        let f = write_temp_csv("f0,label\nabc,0\n");
        let err = load_dataset(f.path(), &CsvSchema::default()).unwrap_err();
        match err {
            RedError::Parse { row, column, .. } => {
                assert_eq!(row, 0);
                assert_eq!(column, "f0");
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn load_missing_file() {
        let err = load_dataset(Path::new("/nonexistent/x.csv"), &CsvSchema::default());
        assert!(err.is_err());
    }

    #[test]
    fn standardize_population_form() {
        let ds = LabeledDataset::new(
            DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]),
            vec![0, 0, 1],
        )
        .unwrap();
        let (std_ds, stats) = standardize(&ds).unwrap();
        // population std of [1,2,3] is sqrt(2/3); (1-2)/sqrt(2/3) = -sqrt(1.5)
        let s = (2.0f64 / 3.0).sqrt();
        assert_relative_eq!(std_ds.features[(0, 0)], -1.0 / s, epsilon = 1e-12);
        assert_relative_eq!(std_ds.features[(1, 0)], 0.0, epsilon = 1e-12);
        assert_relative_eq!(std_ds.features[(2, 0)], 1.0 / s, epsilon = 1e-12);
        let back = stats.invert(&std_ds.features);
        for i in 0..3 {
            assert_relative_eq!(back[(i, 0)], ds.features[(i, 0)], max_relative = 1e-12);
        }
    }

    #[test]
    fn standardize_constant_column() {
        let ds = LabeledDataset::new(
            DMatrix::from_column_slice(3, 1, &[5.0, 5.0, 5.0]),
            vec![0, 0, 1],
        )
        .unwrap();
        let (std_ds, stats) = standardize(&ds).unwrap();
        assert!(stats.constant[0]);
        assert!(std_ds.features.iter().all(|&v| v == 0.0));
        let back = stats.invert(&std_ds.features);
        assert!(back.iter().all(|&v| v == 5.0));
    }

    #[test]
    fn standardize_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let features = DMatrix::from_fn(40, 3, |_, _| rng.gen_range(-4.0..9.0));
        let ds = LabeledDataset::new(features, vec![0; 40]).unwrap();
        let (once, _) = standardize(&ds).unwrap();
        let (twice, _) = standardize(&once).unwrap();
        for (a, b) in once.features.iter().zip(twice.features.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn split_sizes_match_fractions() {
        let plan = make_split(100, 7).unwrap();
        assert_eq!(plan.test_indices.len(), 20);
        assert_eq!(plan.val_indices.len(), 16);
        assert_eq!(plan.train_indices.len(), 64);
    }

    #[test]
    fn split_is_deterministic_and_exhaustive() {
        let a = make_split(53, 11).unwrap();
        let b = make_split(53, 11).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<usize> = a
            .train_indices
            .iter()
            .chain(a.val_indices.iter())
            .chain(a.test_indices.iter())
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..53).collect::<Vec<_>>());
    }

    #[test]
    fn split_seeds_differ() {
        let a = make_split(10, 1).unwrap();
        let b = make_split(10, 2).unwrap();
        assert_eq!(a.test_indices.len(), b.test_indices.len());
        assert_ne!(
            (a.train_indices, a.test_indices),
            (b.train_indices, b.test_indices)
        );
    }

    #[test]
    fn split_too_small() {
        assert!(make_split(4, 0).is_err());
    }

    #[test]
    fn ood_mean_is_near_zero() {
        let batch = synth_ood(10_000, 5, 42);
        assert_eq!(batch.kind, SyntheticKind::Ood);
        for j in 0..5 {
            let mean = batch.features.column(j).sum() / 10_000.0;
            assert!(mean.abs() < 4.0 / (10_000f64).sqrt(), "column {j}: {mean}");
        }
    }

    #[test]
    fn ood_single_row_and_determinism() {
        let a = synth_ood(1, 3, 9);
        assert!(a.features.iter().all(|v| v.is_finite()));
        let b = synth_ood(1, 3, 9);
        assert_eq!(a.features, b.features);
    }

    fn two_class_dataset_with_outputs(n: usize) -> (LabeledDataset, ClassifierOutput) {
        let features = DMatrix::from_fn(n, 2, |i, j| (i * 2 + j) as f64);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let ds = LabeledDataset::new(features, labels.clone()).unwrap();
        let mut softmax = DMatrix::zeros(n, 2);
        for (i, &lab) in labels.iter().enumerate() {
            softmax[(i, lab)] = 0.9;
            softmax[(i, 1 - lab)] = 0.1;
        }
        let outputs = ClassifierOutput::from_softmax(softmax, None).unwrap();
        (ds, outputs)
    }

    #[test]
    fn adversarial_two_class_flips_label() {
        let (ds, outputs) = two_class_dataset_with_outputs(6);
        let batch = synth_adversarial(&ds, &outputs, 4, 0).unwrap();
        let fab = batch.fabricated_outputs.as_ref().unwrap();
        for i in 0..4 {
            assert_eq!(fab.max_prob[i], 1.0);
            let row_sum: f64 = fab.softmax.row(i).sum();
            assert_eq!(row_sum, 1.0);
            assert_eq!(fab.softmax[(i, fab.predicted[i])], 1.0);
        }
        // features are bitwise copies of training rows
        for i in 0..4 {
            let feature_row: Vec<f64> = batch.features.row(i).iter().copied().collect();
            let found = (0..ds.n()).any(|r| {
                (0..ds.m()).all(|j| ds.features[(r, j)].to_bits() == feature_row[j].to_bits())
            });
            assert!(found, "row {i} is not a copy of any training row");
        }
    }

    #[test]
    fn adversarial_three_class_wrong_choice_is_uniform() {
        let n = 10_000;
        let features = DMatrix::from_fn(n, 1, |i, _| i as f64);
        let labels = vec![0usize; n];
        let ds = LabeledDataset {
            features,
            labels,
            num_classes: 3,
        };
        let mut softmax = DMatrix::zeros(n, 3);
        for i in 0..n {
            softmax[(i, 0)] = 1.0;
        }
        let outputs = ClassifierOutput::from_softmax(softmax, None).unwrap();
        let batch = synth_adversarial(&ds, &outputs, n, 123).unwrap();
        let fab = batch.fabricated_outputs.unwrap();
        let count1 = fab.predicted.iter().filter(|&&p| p == 1).count() as f64;
        let frac = count1 / n as f64;
        assert!((frac - 0.5).abs() < 0.02, "wrong-class frequency {frac}");
        assert!(fab.predicted.iter().all(|&p| p != 0));
    }

    #[test]
    fn adversarial_requires_correct_rows() {
        let (ds, _) = two_class_dataset_with_outputs(4);
        // outputs that get everything wrong
        let mut softmax = DMatrix::zeros(4, 2);
        for (i, &lab) in ds.labels.iter().enumerate() {
            softmax[(i, 1 - lab)] = 1.0;
        }
        let wrong = ClassifierOutput::from_softmax(softmax, None).unwrap();
        let err = synth_adversarial(&ds, &wrong, 1, 0).unwrap_err();
        assert!(matches!(err, RedError::NotEnoughCorrectRows { .. }));
    }
}
