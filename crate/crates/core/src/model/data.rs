use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Mlp;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Labelled feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::shape(
                "Dataset::new",
                format!("{} rows, {} labels", features.rows(), labels.len()),
            ));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_count(&self) -> usize {
        self.labels.iter().max().map_or(0, |&c| c + 1)
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let d = self.feature_dim();
        Dataset {
            features: Matrix::from_fn(indices.len(), d, |i, j| self.features[(indices[i], j)]),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Shuffled `(train, test)` split with `round(test_fraction · n)` test rows.
    pub fn split(&self, test_fraction: f64, rng: &mut impl Rng) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        let n_test = ((self.len() as f64) * test_fraction.clamp(0.0, 1.0)).round() as usize;
        let (test, train) = idx.split_at(n_test);
        (self.select(train), self.select(test))
    }

    /// Reads `label,f0,f1,...` with a header row.
    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(file)
    }

    pub fn from_reader(reader: impl std::io::Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header = rdr.headers()?.clone();
        if header.get(0) != Some("label") || header.len() < 2 {
            return Err(Error::contract(
                "Dataset::from_csv",
                "header must be `label,f0,f1,...`",
            ));
        }
        let width = header.len() - 1;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (n, record) in rdr.records().enumerate() {
            let record = record?;
            let row = n + 2;
            let label = record[0].parse::<usize>().map_err(|e| {
                Error::contract("Dataset::from_csv", format!("row {row}: label: {e}"))
            })?;
            labels.push(label);
            for field in record.iter().skip(1) {
                data.push(field.parse::<f64>().map_err(|e| {
                    Error::contract("Dataset::from_csv", format!("row {row}: `{field}`: {e}"))
                })?);
            }
        }
        Self::new(Matrix::from_vec(labels.len(), width, data)?, labels)
    }
}

/// Isotropic Gaussian clusters around random unit-scale centres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianBlobs {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    /// Standard deviation around each centre.
    pub noise: f64,
}

impl GaussianBlobs {
    pub fn generate(&self, rng: &mut impl Rng) -> Dataset {
        let centres = Matrix::from_fn(self.classes, self.dim, |_, _| {
            let z: f64 = StandardNormal.sample(rng);
            2.0 * z
        });
        let n = self.classes * self.per_class;
        let mut features = Matrix::zeros(n, self.dim);
        let mut labels = Vec::with_capacity(n);
        for c in 0..self.classes {
            for k in 0..self.per_class {
                let row = features.row_mut(c * self.per_class + k);
                for (j, x) in row.iter_mut().enumerate() {
                    let z: f64 = StandardNormal.sample(rng);
                    *x = centres[(c, j)] + self.noise * z;
                }
                labels.push(c);
            }
        }
        Dataset { features, labels }
    }
}

/// Fraction of rows whose argmax output equals the label.
pub fn accuracy(model: &Mlp, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let out = model.predict(&data.features)?;
    let correct = (0..data.len())
        .filter(|&i| {
            let row = out.row(i);
            let best = (0..row.len())
                .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                .unwrap_or(0);
            best == data.labels[i]
        })
        .count();
    Ok(correct as f64 / data.len() as f64)
}
