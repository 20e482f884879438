//! Real-data double-descent sweep.
//!
//! Ingests a features/response table, repeatedly splits it into train and
//! held-out rows, sweeps the model width `p_bar` (number of feature columns
//! used), estimates with the ridge/pseudoinverse form
//! `x_hat = Abar^T (Abar Abar^T + sigma_hat2 I)^+ y`, and reports the average
//! held-out prediction error per `(p_bar, sigma_hat2)`. A planted-signal
//! generator provides a synthetic stand-in with the same shape as the
//! external datasets this protocol targets.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::stats::Welford;
use crate::stream::{domain, StreamKey};

/// An ingested table: `N x P` features plus an `N`-vector response.
#[derive(Clone, Debug)]
pub struct TabularDataset<T> {
    pub features: DMatrix<T>,
    pub response: DVector<T>,
    pub column_names: Vec<String>,
    pub provenance: Provenance,
}

/// Where the data came from and what ingestion did to it.
#[derive(Clone, Debug)]
pub struct Provenance {
    pub source: String,
    /// SHA-256 of the raw file bytes, hex encoded.
    pub content_hash: String,
    /// Rows dropped for unparseable or non-finite cells.
    pub rejected_rows: usize,
}

impl<T: Scalar> TabularDataset<T> {
    pub fn n_rows(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }
}

/// How feature columns are ordered before taking width prefixes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColumnOrderPolicy {
    /// Dataset order; width prefixes are nested.
    AsIs,
    /// A fresh uniform permutation per experiment repeat.
    ShuffledPerExperiment,
}

/// Plan for the width sweep.
#[derive(Clone, Debug)]
pub struct RealDataSweepPlan<T> {
    pub train_count: usize,
    pub test_count: usize,
    pub width_axis: Vec<usize>,
    pub sigma_hat2_values: Vec<T>,
    /// Number of experiment repeats (fresh split per repeat).
    pub repeats: usize,
    pub column_order: ColumnOrderPolicy,
    /// Center and scale features and response by train statistics.
    pub standardize: bool,
    pub master_seed: u64,
}

impl<T: Scalar> RealDataSweepPlan<T> {
    pub fn validate(&self, data: &TabularDataset<T>) -> Result<()> {
        if self.train_count == 0 || self.test_count == 0 {
            return Err(Error::InvalidSpec("train and test counts must be >= 1".into()));
        }
        if self.train_count + self.test_count > data.n_rows() {
            return Err(Error::InvalidSpec(format!(
                "train + test = {} exceeds the {} available rows",
                self.train_count + self.test_count,
                data.n_rows()
            )));
        }
        if self.width_axis.is_empty() || self.repeats == 0 || self.sigma_hat2_values.is_empty() {
            return Err(Error::InvalidSpec("empty width axis, ridge list or repeat count".into()));
        }
        if self.width_axis.iter().any(|&w| w == 0 || w > data.n_features()) {
            return Err(Error::InvalidSpec(format!(
                "widths must lie in 1..={}",
                data.n_features()
            )));
        }
        Ok(())
    }
}

/// Ingest a comma-delimited, header-row table.
///
/// The response column is selected by name; every other column whose first
/// data row parses as a number becomes a feature column. Rows with
/// unparseable or non-finite cells in any used column are dropped and
/// counted in the provenance.
pub fn ingest_csv<T: Scalar>(path: &Path, response_column: &str) -> Result<TabularDataset<T>> {
    let raw = std::fs::read(path)
        .map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))?;
    let content_hash = hex_digest(&raw);
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(raw.as_slice());
    let headers = reader
        .headers()
        .map_err(|e| Error::Ingest(format!("header row: {e}")))?
        .clone();
    let response_idx = headers
        .iter()
        .position(|h| h == response_column)
        .ok_or_else(|| Error::Ingest(format!("response column '{response_column}' not found")))?;

    let mut records = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Ingest(format!("row {}: {e}", line + 2)))?;
        records.push(rec);
    }
    if records.is_empty() {
        return Err(Error::Ingest("no data rows".into()));
    }

    // Feature columns: non-response columns whose first row is numeric.
    let first = &records[0];
    let feature_idx: Vec<usize> = (0..headers.len())
        .filter(|&i| i != response_idx && first.get(i).map(parses_numeric).unwrap_or(false))
        .collect();
    if feature_idx.is_empty() {
        return Err(Error::Ingest("no numeric feature columns".into()));
    }
    let column_names: Vec<String> = feature_idx
        .iter()
        .map(|&i| headers.get(i).unwrap_or_default().to_string())
        .collect();

    let mut rows: Vec<Vec<T>> = Vec::with_capacity(records.len());
    let mut response = Vec::with_capacity(records.len());
    let mut rejected = 0usize;
    for rec in &records {
        let mut row = Vec::with_capacity(feature_idx.len());
        let mut ok = true;
        for &i in &feature_idx {
            match rec.get(i).and_then(parse_finite::<T>) {
                Some(v) => row.push(v),
                None => {
                    ok = false;
                    break;
                }
            }
        }
        let y = rec.get(response_idx).and_then(parse_finite::<T>);
        match (ok, y) {
            (true, Some(y)) => {
                rows.push(row);
                response.push(y);
            }
            _ => rejected += 1,
        }
    }
    if rows.len() < 2 {
        return Err(Error::Ingest(format!(
            "{} usable rows after dropping {rejected}; need at least 2",
            rows.len()
        )));
    }
    let n = rows.len();
    let p = feature_idx.len();
    let features = DMatrix::from_fn(n, p, |i, j| rows[i][j]);
    Ok(TabularDataset {
        features,
        response: DVector::from_vec(response),
        column_names,
        provenance: Provenance {
            source: path.display().to_string(),
            content_hash,
            rejected_rows: rejected,
        },
    })
}

fn parses_numeric(s: &str) -> bool {
    s.trim().parse::<f64>().is_ok()
}

fn parse_finite<T: Scalar>(s: &str) -> Option<T> {
    let v: f64 = s.trim().parse().ok()?;
    if v.is_finite() {
        Some(T::of(v))
    } else {
        None
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Mean held-out error for one `(width, sigma_hat2)` grid point.
#[derive(Clone, Debug)]
pub struct WidthErrorRow<T> {
    pub width: usize,
    pub sigma_hat2: T,
    pub mean_error: T,
    pub stderr: Option<T>,
}

#[derive(Clone, Debug)]
pub struct RealDataSweepResult<T> {
    pub rows: Vec<WidthErrorRow<T>>,
    pub train_count: usize,
    pub test_count: usize,
    pub repeats: usize,
}

/// Deterministic train/test split for one repeat: a Fisher-Yates shuffle of
/// the row indices, first `train` rows for training, next `test` rows held
/// out.
pub fn split_indices<R: rand::Rng + ?Sized>(
    n_rows: usize,
    train: usize,
    test: usize,
    rng: &mut R,
) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n_rows).collect();
    for i in (1..n_rows).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    let train_idx = idx[..train].to_vec();
    let test_idx = idx[train..train + test].to_vec();
    (train_idx, test_idx)
}

/// Column order for one repeat under the configured policy.
pub fn column_order<R: rand::Rng + ?Sized>(
    policy: ColumnOrderPolicy,
    p: usize,
    rng: &mut R,
) -> Vec<usize> {
    let mut order: Vec<usize> = (0..p).collect();
    if policy == ColumnOrderPolicy::ShuffledPerExperiment {
        for i in (1..p).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
    }
    order
}

/// Run the width sweep.
///
/// Per repeat: split uniformly at random, fix the column order, and for each
/// width take that many leading columns, estimate
/// `x_hat = Abar^T (Abar Abar^T + sigma_hat2 I)^+ y` (evaluated through one
/// SVD of the train block, shared across the ridge list), and score
/// `(1/n_test) || y* - Abar* x_hat ||^2`. Results aggregate across repeats.
pub fn run_realdata_sweep<T: Scalar>(
    data: &TabularDataset<T>,
    plan: &RealDataSweepPlan<T>,
) -> Result<RealDataSweepResult<T>> {
    plan.validate(data)?;
    let root = StreamKey::root(plan.master_seed);
    let n_grid = plan.width_axis.len() * plan.sigma_hat2_values.len();

    let per_repeat = |rep: usize| -> Vec<T> {
        let mut split_rng = root.descend(&[domain::SPLIT, rep as u64]).rng();
        let (train_idx, test_idx) =
            split_indices(data.n_rows(), plan.train_count, plan.test_count, &mut split_rng);
        let mut order_rng = root.descend(&[domain::COLUMN_ORDER, rep as u64]).rng();
        let order = column_order(plan.column_order, data.n_features(), &mut order_rng);

        let max_width = *plan.width_axis.iter().max().expect("non-empty");
        let mut train = gather(&data.features, &train_idx, &order[..max_width]);
        let mut test = gather(&data.features, &test_idx, &order[..max_width]);
        let mut y_train = gather_vec(&data.response, &train_idx);
        let mut y_test = gather_vec(&data.response, &test_idx);
        if plan.standardize {
            standardize_by_train(&mut train, &mut test, &mut y_train, &mut y_test);
        }

        let mut errors = Vec::with_capacity(n_grid);
        for &width in &plan.width_axis {
            let a = train.columns(0, width);
            let a_star = test.columns(0, width);
            // One SVD serves the whole ridge list.
            let svd = nalgebra::SVD::new(a.into_owned(), true, true);
            let u = svd.u.as_ref().expect("u requested");
            let v_t = svd.v_t.as_ref().expect("v_t requested");
            let s = &svd.singular_values;
            let c = u.transpose() * &y_train;
            let cutoff = T::from_count(plan.train_count.max(width)) * T::eps()
                * s.iter().fold(T::zero(), |m, &x| m.max(x));
            for &sigma_hat2 in &plan.sigma_hat2_values {
                let mut d = DVector::<T>::zeros(s.len());
                for i in 0..s.len() {
                    let si = s[i];
                    d[i] = if sigma_hat2 > T::zero() {
                        si / (si * si + sigma_hat2) * c[i]
                    } else if si > cutoff {
                        c[i] / si
                    } else {
                        T::zero()
                    };
                }
                let x_hat = v_t.transpose() * d;
                let resid = &y_test - a_star * &x_hat;
                errors.push(resid.norm_squared() / T::from_count(plan.test_count));
            }
        }
        errors
    };

    let all: Vec<Vec<T>> = (0..plan.repeats).into_par_iter().map(per_repeat).collect();

    let mut rows = Vec::with_capacity(n_grid);
    let mut slot = 0usize;
    for &width in &plan.width_axis {
        for &sigma_hat2 in &plan.sigma_hat2_values {
            let mut w = Welford::<T>::new();
            for rep in &all {
                w.push(rep[slot]);
            }
            rows.push(WidthErrorRow {
                width,
                sigma_hat2,
                mean_error: w.mean(),
                stderr: w.stderr(),
            });
            slot += 1;
        }
    }
    Ok(RealDataSweepResult {
        rows,
        train_count: plan.train_count,
        test_count: plan.test_count,
        repeats: plan.repeats,
    })
}

fn gather<T: Scalar>(m: &DMatrix<T>, rows: &[usize], cols: &[usize]) -> DMatrix<T> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

fn gather_vec<T: Scalar>(v: &DVector<T>, rows: &[usize]) -> DVector<T> {
    DVector::from_fn(rows.len(), |i, _| v[rows[i]])
}

/// Center and scale by train-column statistics (response included). Columns
/// with zero train variance are centered only.
fn standardize_by_train<T: Scalar>(
    train: &mut DMatrix<T>,
    test: &mut DMatrix<T>,
    y_train: &mut DVector<T>,
    y_test: &mut DVector<T>,
) {
    let n = T::from_count(train.nrows());
    for j in 0..train.ncols() {
        let mean = train.column(j).sum() / n;
        let var = train
            .column(j)
            .iter()
            .fold(T::zero(), |a, &x| a + (x - mean) * (x - mean))
            / n;
        let scale = if var > T::zero() { var.sqrt() } else { T::one() };
        for x in train.column_mut(j).iter_mut() {
            *x = (*x - mean) / scale;
        }
        for x in test.column_mut(j).iter_mut() {
            *x = (*x - mean) / scale;
        }
    }
    let mean = y_train.sum() / n;
    let var = y_train
        .iter()
        .fold(T::zero(), |a, &x| a + (x - mean) * (x - mean))
        / n;
    let scale = if var > T::zero() { var.sqrt() } else { T::one() };
    for x in y_train.iter_mut() {
        *x = (*x - mean) / scale;
    }
    for x in y_test.iter_mut() {
        *x = (*x - mean) / scale;
    }
}

/// Shape summary of a width-error curve at one ridge value.
#[derive(Clone, Copy, Debug)]
pub struct DoubleDescentSummary<T> {
    pub peak_width: usize,
    pub peak_error: T,
    pub global_min_width: usize,
    pub min_error: T,
    /// Smallest error among widths strictly below the train count.
    pub underparam_min_error: T,
    /// Whether the global minimum sits in the overparameterized region.
    pub overparam_optimum: bool,
}

/// Locate the error peak and minima of a `(width, error)` curve. The curve
/// must hold at least three widths and span both sides of the train count.
pub fn summarize_double_descent<T: Scalar>(
    curve: &[(usize, T)],
    train_count: usize,
) -> Result<DoubleDescentSummary<T>> {
    if curve.len() < 3 {
        return Err(Error::InvalidInput("need at least three widths".into()));
    }
    let spans_under = curve.iter().any(|&(w, _)| w < train_count);
    let spans_over = curve.iter().any(|&(w, _)| w > train_count);
    if !spans_under || !spans_over {
        return Err(Error::InvalidInput(format!(
            "curve must span both sides of the train count {train_count}"
        )));
    }
    let mut peak = curve[0];
    let mut min = curve[0];
    let mut under_min: Option<T> = None;
    for &(w, e) in curve {
        if e > peak.1 {
            peak = (w, e);
        }
        if e < min.1 {
            min = (w, e);
        }
        if w < train_count {
            under_min = Some(match under_min {
                Some(u) => u.min(e),
                None => e,
            });
        }
    }
    Ok(DoubleDescentSummary {
        peak_width: peak.0,
        peak_error: peak.1,
        global_min_width: min.0,
        min_error: min.1,
        underparam_min_error: under_min.expect("spans the under side"),
        overparam_optimum: min.0 > train_count,
    })
}

/// Write a planted-signal CSV with the same structure as the real-data
/// protocol expects: `rows x cols` standard Gaussian features, response
/// `y = A x + v` with `x ~ N(0, I_cols)` and noise variance `sigma_v2`. The
/// signal spans all columns, so narrow models face large missing power and
/// the best width lies beyond the interpolation threshold.
pub fn write_planted_csv(
    path: &Path,
    rows: usize,
    cols: usize,
    sigma_v2: f64,
    master_seed: u64,
) -> Result<()> {
    let key = StreamKey::root(master_seed);
    let mut rng = key.child(domain::FEATURES).rng();
    let a = DMatrix::<f64>::from_fn(rows, cols, |_, _| f64::std_normal(&mut rng));
    let mut rng = key.child(domain::UNKNOWNS).rng();
    let x = DVector::<f64>::from_fn(cols, |_, _| f64::std_normal(&mut rng));
    let sigma = sigma_v2.sqrt();
    let v = DVector::<f64>::from_fn(rows, |_, _| sigma * f64::std_normal(&mut rng));
    let y = &a * &x + v;

    let mut out = String::new();
    out.push_str("y");
    for j in 0..cols {
        out.push_str(&format!(",g{j:04}"));
    }
    out.push('\n');
    for i in 0..rows {
        out.push_str(&format!("{:.17e}", y[i]));
        for j in 0..cols {
            out.push_str(&format!(",{:.17e}", a[(i, j)]));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))
}
