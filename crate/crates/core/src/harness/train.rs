use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{RunConfig, TaskSpec};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{accuracy, Activation, Dataset, KroneckerQuadratic, Loss, Mlp, Targets};
use crate::optim::{CurvatureInput, LayerOptimizer, StepEvent};

/// First line of every metrics CSV.
pub const CSV_VERSION_LINE: &str = "# singd-kit v1";

pub const CSV_COLUMNS: [&str; 8] = [
    "step",
    "train_loss",
    "test_error",
    "grad_norm",
    "factor_norm_K",
    "factor_norm_C",
    "nonfinite_flag",
    "wall_ms",
];

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    pub train_loss: f64,
    /// Classification: test misclassification rate. Quadratic: `ℓ(W) - ℓ(W*)`.
    pub test_error: f64,
    pub grad_norm: f64,
    pub factor_norm_k: f64,
    pub factor_norm_c: f64,
    pub nonfinite: bool,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub records: Vec<TrainRecord>,
    /// A non-finite loss, gradient, weight or optimizer state was seen.
    pub diverged: bool,
    /// KFAC refreshes that hit a singular damped factor.
    pub singular_events: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps_run: usize,
}

/// Everything a training loop needs to evaluate and update one problem.
trait Problem {
    fn layer_shapes(&self) -> Vec<(usize, usize)>;
    fn weights_mut(&mut self) -> Vec<&mut Matrix>;
    /// Loss, gradients and curvature for one step.
    fn step_data(&mut self, rng: &mut ChaCha8Rng) -> Result<StepData>;
    fn test_error(&self) -> Result<f64>;
}

enum Curvature {
    Dense(crate::curvature::KroneckerCurvature),
    Batch(crate::curvature::LayerBatch),
}

struct StepData {
    loss: f64,
    grads: Vec<Matrix>,
    curvature: Vec<Curvature>,
    nonfinite: bool,
}

struct QuadraticProblem {
    task: KroneckerQuadratic,
    weights: Matrix,
    optimum: f64,
}

impl Problem for QuadraticProblem {
    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        vec![self.weights.shape()]
    }

    fn weights_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.weights]
    }

    fn step_data(&mut self, _: &mut ChaCha8Rng) -> Result<StepData> {
        let e = self.task.eval(&self.weights)?;
        Ok(StepData {
            nonfinite: !e.loss.is_finite() || !e.grad.is_finite(),
            loss: e.loss,
            grads: vec![e.grad],
            curvature: vec![Curvature::Dense(e.curvature)],
        })
    }

    fn test_error(&self) -> Result<f64> {
        Ok(self.task.eval(&self.weights)?.loss - self.optimum)
    }
}

struct ClassificationProblem {
    model: Mlp,
    loss: Loss,
    train: Dataset,
    test: Dataset,
    classes: usize,
    batch_size: usize,
    order: Vec<usize>,
    cursor: usize,
}

impl ClassificationProblem {
    fn next_batch(&mut self, rng: &mut ChaCha8Rng) -> Dataset {
        let take = self.batch_size.min(self.train.len());
        let mut idx = Vec::with_capacity(take);
        while idx.len() < take {
            if self.cursor == self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            idx.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        self.train.select(&idx)
    }

    fn one_hot(&self, labels: &[usize]) -> Matrix {
        Matrix::from_fn(labels.len(), self.classes, |i, j| {
            f64::from(u8::from(labels[i] == j))
        })
    }
}

impl Problem for ClassificationProblem {
    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.model.layer_shapes()
    }

    fn weights_mut(&mut self) -> Vec<&mut Matrix> {
        self.model.layers_mut().iter_mut().collect()
    }

    fn step_data(&mut self, rng: &mut ChaCha8Rng) -> Result<StepData> {
        let batch = self.next_batch(rng);
        let values;
        let targets = match self.loss {
            Loss::SoftmaxCrossEntropy => Targets::Labels(&batch.labels),
            Loss::Mse => {
                values = self.one_hot(&batch.labels);
                Targets::Values(&values)
            }
        };
        let fb = self
            .model
            .forward_backward(&batch.features, targets, self.loss)?;
        let (grads, curvature) = fb
            .layers
            .into_iter()
            .map(|l| (l.grad, Curvature::Batch(l.batch)))
            .unzip();
        Ok(StepData {
            loss: fb.loss,
            grads,
            curvature,
            nonfinite: fb.nonfinite,
        })
    }

    fn test_error(&self) -> Result<f64> {
        let data = if self.test.is_empty() {
            &self.train
        } else {
            &self.test
        };
        Ok(1.0 - accuracy(&self.model, data)?)
    }
}

fn build_problem(cfg: &RunConfig, rng: &mut ChaCha8Rng) -> Result<Box<dyn Problem>> {
    let classification =
        |data: Dataset, test_fraction: f64, rng: &mut ChaCha8Rng| -> Result<Box<dyn Problem>> {
            if data.is_empty() {
                return Err(Error::contract("run_training", "dataset is empty"));
            }
            let classes = data.class_count().max(2);
            let (train, test) = data.split(test_fraction, rng);
            if train.is_empty() {
                return Err(Error::contract(
                    "run_training",
                    "no training rows after the split",
                ));
            }
            let mut dims = vec![data.feature_dim()];
            dims.extend(&cfg.model.hidden);
            dims.push(classes);
            let mut acts = vec![cfg.model.activation; dims.len() - 2];
            acts.push(Activation::Identity);
            let model = Mlp::random(&dims, &acts, rng)?;
            let order = (0..train.len()).collect();
            let cursor = train.len();
            Ok(Box::new(ClassificationProblem {
                model,
                loss: cfg.model.loss,
                train,
                test,
                classes,
                batch_size: cfg.batch_size,
                order,
                cursor,
            }))
        };
    match &cfg.task {
        TaskSpec::KroneckerQuadratic { d_in, d_out, cond } => {
            let task = KroneckerQuadratic::conditioned(*d_in, *d_out, *cond, rng);
            let optimum = task.eval(&task.solution()?)?.loss;
            Ok(Box::new(QuadraticProblem {
                weights: Matrix::zeros(*d_out, *d_in),
                task,
                optimum,
            }))
        }
        TaskSpec::GaussianBlobs {
            blobs,
            test_fraction,
        } => {
            let data = blobs.generate(rng);
            classification(data, *test_fraction, rng)
        }
        TaskSpec::Csv {
            path,
            test_fraction,
        } => classification(Dataset::from_csv(path)?, *test_fraction, rng),
    }
}

/// Layer shapes `(d_o, d_i)` of the model a config would train, without
/// training it.
pub fn model_shapes(cfg: &RunConfig) -> Result<Vec<(usize, usize)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(build_problem(cfg, &mut rng)?.layer_shapes())
}

/// Runs the configured training loop. Deterministic in `cfg.seed` unless
/// `cfg.timing` is set, in which case only `wall_ms` varies.
pub fn run_training(cfg: &RunConfig) -> Result<TrainOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut problem = build_problem(cfg, &mut rng)?;
    let mut optimizers = problem
        .layer_shapes()
        .into_iter()
        .map(|(d_out, d_in)| LayerOptimizer::new(&cfg.optimizer, d_out, d_in))
        .collect::<Result<Vec<_>>>()?;

    let start = Instant::now();
    let mut records = Vec::new();
    let mut singular_events = 0;
    let mut diverged = false;
    let mut pending_nonfinite = false;
    let mut initial_loss = f64::NAN;
    let mut last_loss = f64::NAN;
    let mut steps_run = 0;

    for t in 0..cfg.steps {
        let data = problem.step_data(&mut rng)?;
        if t == 0 {
            initial_loss = data.loss;
        }
        last_loss = data.loss;
        pending_nonfinite |= data.nonfinite;
        let grad_norm = data
            .grads
            .iter()
            .map(|g| g.frobenius_norm().powi(2))
            .sum::<f64>()
            .sqrt();

        let lr = cfg.schedule.multiplier(t, cfg.steps);
        for ((opt, w), (g, c)) in optimizers
            .iter_mut()
            .zip(problem.weights_mut())
            .zip(data.grads.iter().zip(&data.curvature))
        {
            let curv = opt.needs_curvature().then_some(match c {
                Curvature::Dense(d) => CurvatureInput::Dense(d),
                Curvature::Batch(b) => CurvatureInput::Batch(b),
            });
            let report = opt.step(curv, g, w, lr)?;
            for e in &report.events {
                match e {
                    StepEvent::Singular { .. } => singular_events += 1,
                    StepEvent::NonFinite => pending_nonfinite = true,
                }
            }
        }
        steps_run = t + 1;
        diverged |= pending_nonfinite;

        if steps_run % cfg.eval_interval == 0 || steps_run == cfg.steps || pending_nonfinite {
            let (k2, c2) = optimizers.iter().fold((0.0, 0.0), |(k, c), o| {
                let (nk, nc) = o.factor_norms();
                (k + nk * nk, c + nc * nc)
            });
            records.push(TrainRecord {
                step: steps_run,
                train_loss: data.loss,
                test_error: problem.test_error()?,
                grad_norm,
                factor_norm_k: k2.sqrt(),
                factor_norm_c: c2.sqrt(),
                nonfinite: pending_nonfinite,
                wall_ms: if cfg.timing {
                    start.elapsed().as_millis() as u64
                } else {
                    0
                },
            });
            if pending_nonfinite {
                break;
            }
        }
    }

    let final_loss = match problem.step_data(&mut rng) {
        Ok(d) if !diverged => d.loss,
        _ => last_loss,
    };
    Ok(TrainOutcome {
        records,
        diverged,
        singular_events,
        initial_loss,
        final_loss,
        steps_run,
    })
}

/// Writes the versioned metrics CSV.
pub fn write_csv(records: &[TrainRecord], out: impl Write) -> Result<()> {
    let mut out = out;
    writeln!(out, "{CSV_VERSION_LINE}").map_err(|e| Error::io("<csv>", e))?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_COLUMNS)?;
    for r in records {
        w.write_record([
            r.step.to_string(),
            r.train_loss.to_string(),
            r.test_error.to_string(),
            r.grad_norm.to_string(),
            r.factor_norm_k.to_string(),
            r.factor_norm_c.to_string(),
            u8::from(r.nonfinite).to_string(),
            r.wall_ms.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn write_csv_file(records: &[TrainRecord], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(records, std::io::BufWriter::new(file))
}
