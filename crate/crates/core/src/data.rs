//! Dataset container, CSV ingestion and seeded random streams.
//!
//! A [`Dataset`] holds an outcome `y`, a binary treatment `a` and an `n × p`
//! covariate matrix `x`. A sensitive feature `f` and a legitimate factor `l`
//! may be designated among the covariate columns; both are copied out of `x`
//! when designated so downstream code does not need to look them up.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Observed sample of `(Y, A, X)` tuples, immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: Vec<f64>,
    a: Vec<u8>,
    x: DMatrix<f64>,
    names: Vec<String>,
    f: Option<Vec<u8>>,
    f_column: Option<usize>,
    l: Option<Vec<i64>>,
    l_column: Option<usize>,
}

impl Dataset {
    /// Builds a dataset, checking lengths, binarity of `a` and finiteness.
    pub fn new(y: Vec<f64>, a: Vec<u8>, x: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::EmptyInput("dataset has no rows".into()));
        }
        if a.len() != n || x.nrows() != n {
            return Err(Error::Schema(format!(
                "column lengths differ: y={}, a={}, x={}",
                n,
                a.len(),
                x.nrows()
            )));
        }
        if names.len() != x.ncols() {
            return Err(Error::Schema(format!(
                "{} covariate names for {} columns",
                names.len(),
                x.ncols()
            )));
        }
        if let Some(i) = a.iter().position(|&v| v > 1) {
            return Err(Error::Parse {
                row: i + 1,
                column: "a".into(),
                message: format!("treatment must be 0 or 1, found {}", a[i]),
            });
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parse {
                row: i + 1,
                column: "y".into(),
                message: "non-finite outcome".into(),
            });
        }
        for (j, col) in x.column_iter().enumerate() {
            if let Some(i) = col.iter().position(|v| !v.is_finite()) {
                return Err(Error::Parse {
                    row: i + 1,
                    column: names[j].clone(),
                    message: "non-finite covariate".into(),
                });
            }
        }
        Ok(Self {
            y,
            a,
            x,
            names,
            f: None,
            f_column: None,
            l: None,
            l_column: None,
        })
    }

    /// Designates covariate `name` as the binary sensitive feature.
    pub fn with_sensitive(mut self, name: &str) -> Result<Self> {
        let j = self.column_index(name)?;
        let mut f = Vec::with_capacity(self.n());
        for (i, &v) in self.x.column(j).iter().enumerate() {
            if v == 0.0 {
                f.push(0);
            } else if v == 1.0 {
                f.push(1);
            } else {
                return Err(Error::Parse {
                    row: i + 1,
                    column: name.into(),
                    message: format!("sensitive feature must be 0 or 1, found {v}"),
                });
            }
        }
        self.f = Some(f);
        self.f_column = Some(j);
        Ok(self)
    }

    /// Designates covariate `name` as the integer-coded legitimate factor.
    pub fn with_legitimate(mut self, name: &str) -> Result<Self> {
        let j = self.column_index(name)?;
        let mut l = Vec::with_capacity(self.n());
        for (i, &v) in self.x.column(j).iter().enumerate() {
            if v.fract() != 0.0 {
                return Err(Error::Parse {
                    row: i + 1,
                    column: name.into(),
                    message: format!("legitimate factor must be integer coded, found {v}"),
                });
            }
            l.push(v as i64);
        }
        self.l = Some(l);
        self.l_column = Some(j);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn a(&self) -> &[u8] {
        &self.a
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn f(&self) -> Option<&[u8]> {
        self.f.as_deref()
    }

    pub fn l(&self) -> Option<&[i64]> {
        self.l.as_deref()
    }

    pub fn sensitive_name(&self) -> Option<&str> {
        self.f_column.map(|j| self.names[j].as_str())
    }

    pub fn legitimate_name(&self) -> Option<&str> {
        self.l_column.map(|j| self.names[j].as_str())
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Schema(format!("no covariate column named `{name}`")))
    }

    /// Row subset in the given order (indices may repeat).
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        let x = DMatrix::from_fn(rows.len(), self.p(), |i, j| self.x[(rows[i], j)]);
        Dataset {
            y: rows.iter().map(|&i| self.y[i]).collect(),
            a: rows.iter().map(|&i| self.a[i]).collect(),
            x,
            names: self.names.clone(),
            f: self.f.as_ref().map(|f| rows.iter().map(|&i| f[i]).collect()),
            f_column: self.f_column,
            l: self.l.as_ref().map(|l| rows.iter().map(|&i| l[i]).collect()),
            l_column: self.l_column,
        }
    }

    /// Writes the dataset as CSV with header `y,a,<covariates...>`.
    ///
    /// Floats use the shortest representation that parses back to the same
    /// bits, so [`load_csv`] reproduces the dataset exactly.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut header = vec!["y".to_string(), "a".to_string()];
        header.extend(self.names.iter().cloned());
        writeln!(w, "{}", header.join(",")).map_err(|e| Error::io(path, e))?;
        for i in 0..self.n() {
            let mut line = format!("{:?},{}", self.y[i], self.a[i]);
            for j in 0..self.p() {
                line.push(',');
                line.push_str(&format!("{:?}", self.x[(i, j)]));
            }
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Maps CSV header names onto roles.
///
/// Every header that is not the outcome or treatment becomes a covariate
/// unless `covariates` lists an explicit subset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub y: String,
    pub a: String,
    pub covariates: Option<Vec<String>>,
    pub sensitive: Option<String>,
    pub legitimate: Option<String>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            y: "y".into(),
            a: "a".into(),
            covariates: None,
            sensitive: None,
            legitimate: None,
        }
    }
}

impl ColumnMap {
    pub fn from_roles(roles: &HashMap<String, String>) -> Result<Self> {
        let get = |role: &str| roles.get(role).cloned();
        let y = get("y").ok_or_else(|| Error::Schema("column map lacks the `y` role".into()))?;
        let a = get("a").ok_or_else(|| Error::Schema("column map lacks the `a` role".into()))?;
        Ok(Self {
            y,
            a,
            covariates: None,
            sensitive: get("f"),
            legitimate: get("l"),
        })
    }
}

/// Reads a UTF-8 comma-separated file with a mandatory header row.
pub fn load_csv(path: &Path, map: &ColumnMap) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::EmptyInput(format!("{} has no header", path.display())));
    }
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    };
    let yi = find(&map.y)?;
    let ai = find(&map.a)?;
    let cov: Vec<usize> = match &map.covariates {
        Some(list) => list.iter().map(|c| find(c)).collect::<Result<_>>()?,
        None => (0..headers.len()).filter(|&j| j != yi && j != ai).collect(),
    };
    if cov.is_empty() {
        return Err(Error::Schema("no covariate columns".into()));
    }

    let mut y = Vec::new();
    let mut a = Vec::new();
    let mut xs: Vec<f64> = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + 1;
        let cell = |j: usize| -> Result<f64> {
            let raw = record.get(j).ok_or_else(|| Error::Parse {
                row,
                column: headers[j].clone(),
                message: "missing cell".into(),
            })?;
            let v: f64 = raw.parse().map_err(|_| Error::Parse {
                row,
                column: headers[j].clone(),
                message: format!("not a number: `{raw}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: headers[j].clone(),
                    message: format!("non-finite value `{raw}`"),
                });
            }
            Ok(v)
        };
        y.push(cell(yi)?);
        let av = cell(ai)?;
        if av != 0.0 && av != 1.0 {
            return Err(Error::Parse {
                row,
                column: headers[ai].clone(),
                message: format!("treatment must be 0 or 1, found {av}"),
            });
        }
        a.push(av as u8);
        for &j in &cov {
            xs.push(cell(j)?);
        }
    }
    if y.is_empty() {
        return Err(Error::EmptyInput(format!("{} has no data rows", path.display())));
    }
    let x = DMatrix::from_row_slice(y.len(), cov.len(), &xs);
    let names = cov.iter().map(|&j| headers[j].clone()).collect();
    let mut data = Dataset::new(y, a, x, names)?;
    if let Some(f) = &map.sensitive {
        data = data.with_sensitive(f)?;
    }
    if let Some(l) = &map.legitimate {
        data = data.with_legitimate(l)?;
    }
    Ok(data)
}

/// Identifies one reproducible random stream.
///
/// The generator is ChaCha20 keyed by `master_seed` with `stream_index` as
/// the stream counter, so distinct streams never overlap and can be drawn
/// in any order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedSpec {
    pub master_seed: u64,
    pub stream_index: u64,
}

impl SeedSpec {
    pub fn new(master_seed: u64, stream_index: u64) -> Self {
        Self {
            master_seed,
            stream_index,
        }
    }

    pub fn rng(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.stream_index);
        rng
    }

    /// Derived stream for a sub-task (e.g. a replication or a fold shuffle).
    pub fn substream(&self, tag: u64) -> SeedSpec {
        SeedSpec {
            master_seed: self.master_seed,
            stream_index: splitmix64(splitmix64(self.stream_index) ^ tag),
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Assigns each row to one of `k` folds.
///
/// Row indices are shuffled with a Fisher-Yates pass driven by `seed`; the
/// row at shuffled position `i` goes to fold `i mod k`, so fold sizes differ
/// by at most one.
pub fn split_folds(n: usize, k: usize, seed: SeedSpec) -> Result<Vec<usize>> {
    if k < 1 || k > n {
        return Err(Error::Argument(format!(
            "fold count must satisfy 1 <= k <= n (k={k}, n={n})"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if k > 1 {
        order.shuffle(&mut seed.rng());
    }
    let mut folds = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        folds[i] = pos % k;
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_three_row_file() {
        let f = write_tmp("y,a,x1\n1.0,1,2.0\n0.5,0,1.0\n2.0,1,3.0\n");
        let d = load_csv(f.path(), &ColumnMap::default()).unwrap();
        assert_eq!(d.n(), 3);
        assert_eq!(d.p(), 1);
        assert_eq!(d.y(), &[1.0, 0.5, 2.0]);
        assert_eq!(d.a(), &[1, 0, 1]);
        assert_eq!(d.x()[(2, 0)], 3.0);
        let again = load_csv(f.path(), &ColumnMap::default()).unwrap();
        assert_eq!(d, again);
    }

    #[test]
    fn non_binary_treatment_names_row() {
        let f = write_tmp("y,a,x1\n1.0,1,2.0\n0.5,2,1.0\n");
        match load_csv(f.path(), &ColumnMap::default()) {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "a");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_column_and_empty_file() {
        let f = write_tmp("y,treat,x1\n1.0,1,2.0\n");
        assert!(matches!(
            load_csv(f.path(), &ColumnMap::default()),
            Err(Error::Schema(_))
        ));
        let f = write_tmp("y,a,x1\n");
        assert!(matches!(
            load_csv(f.path(), &ColumnMap::default()),
            Err(Error::EmptyInput(_))
        ));
        let f = write_tmp("");
        assert!(load_csv(f.path(), &ColumnMap::default()).is_err());
    }

    #[test]
    fn rejects_nan_and_text() {
        let f = write_tmp("y,a,x1\nNaN,1,2.0\n");
        assert!(matches!(
            load_csv(f.path(), &ColumnMap::default()),
            Err(Error::Parse { row: 1, .. })
        ));
        let f = write_tmp("y,a,x1\n1,1,abc\n");
        assert!(matches!(
            load_csv(f.path(), &ColumnMap::default()),
            Err(Error::Parse { row: 1, .. })
        ));
    }

    #[test]
    fn sensitive_column_must_be_binary() {
        let f = write_tmp("y,a,x1,g\n1,1,2,0\n1,0,2,3\n");
        let map = ColumnMap {
            sensitive: Some("g".into()),
            ..ColumnMap::default()
        };
        assert!(matches!(
            load_csv(f.path(), &map),
            Err(Error::Parse { row: 2, .. })
        ));
    }

    #[test]
    fn fold_examples() {
        let s = SeedSpec::new(7, 0);
        let f = split_folds(10, 2, s).unwrap();
        assert_eq!(f.iter().filter(|&&v| v == 0).count(), 5);
        assert_eq!(split_folds(10, 1, s).unwrap(), vec![0; 10]);
        let f = split_folds(7, 3, s).unwrap();
        let mut sizes = [0; 3];
        f.iter().for_each(|&v| sizes[v] += 1);
        assert_eq!(sizes, [3, 2, 2]);
        assert_eq!(f, split_folds(7, 3, s).unwrap());
        assert!(split_folds(3, 4, s).is_err());
        assert!(split_folds(3, 0, s).is_err());
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        use rand::Rng;
        let a: Vec<u64> = (0..4).map(|_| SeedSpec::new(1, 2).rng().random()).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
        let x: u64 = SeedSpec::new(1, 2).rng().random();
        let y: u64 = SeedSpec::new(1, 3).rng().random();
        assert_ne!(x, y);
        assert_ne!(SeedSpec::new(1, 2).substream(0), SeedSpec::new(1, 2).substream(1));
    }

    proptest! {
        #[test]
        fn folds_partition_rows(n in 1usize..200, k in 1usize..10, seed in any::<u64>()) {
            prop_assume!(k <= n);
            let f = split_folds(n, k, SeedSpec::new(seed, 0)).unwrap();
            let mut sizes = vec![0usize; k];
            for &v in &f { prop_assert!(v < k); sizes[v] += 1; }
            prop_assert_eq!(sizes.iter().sum::<usize>(), n);
            let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
            prop_assert!(hi - lo <= 1);
        }

        #[test]
        fn csv_round_trip_is_exact(
            rows in proptest::collection::vec((-1e6f64..1e6, 0u8..2, -1e3f64..1e3, -1.0f64..1.0), 1..30)
        ) {
            let y = rows.iter().map(|r| r.0).collect();
            let a = rows.iter().map(|r| r.1).collect();
            let xs: Vec<f64> = rows.iter().flat_map(|r| [r.2, r.3]).collect();
            let x = DMatrix::from_row_slice(rows.len(), 2, &xs);
            let d = Dataset::new(y, a, x, vec!["x1".into(), "x2".into()]).unwrap();
            let tmp = tempfile::NamedTempFile::new().unwrap();
            d.write_csv(tmp.path()).unwrap();
            let back = load_csv(tmp.path(), &ColumnMap::default()).unwrap();
            prop_assert_eq!(d, back);
        }
    }
}
