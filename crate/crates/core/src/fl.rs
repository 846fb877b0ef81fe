//! Local training over a linear model and server-side FedAvg.
//!
//! The local loss is mean squared error of `w·x + b` against `y`; training
//! is full-batch gradient descent, so a run is a pure function of its inputs.

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FlError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("no updates to aggregate")]
    NoUpdates,
    #[error("malformed {0} encoding")]
    Malformed(&'static str),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub x: Vec<T>,
    pub y: T,
}

/// Append-only local dataset; all rows share one dimension.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset<T> {
    rows: Vec<Sample<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new() -> Self {
        Self { rows: Vec::new() }
    }

    pub fn rows(&self) -> &[Sample<T>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.rows.first().map(|r| r.x.len())
    }

    /// Empty: no bytes. Otherwise `u64 LE d` followed by each row as `d`
    /// features then the target, all `f64 LE`.
    pub fn serialize(&self) -> Vec<u8> {
        let Some(d) = self.dim() else {
            return Vec::new();
        };
        let mut out = Vec::with_capacity(8 + self.rows.len() * (d + 1) * 8);
        out.extend_from_slice(&(d as u64).to_le_bytes());
        for row in &self.rows {
            for v in row.x.iter().chain(std::iter::once(&row.y)) {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        out
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self, FlError> {
        if bytes.is_empty() {
            return Ok(Self::new());
        }
        let (d, rest) = bytes
            .split_first_chunk::<8>()
            .ok_or(FlError::Malformed("dataset"))?;
        let d = usize::try_from(u64::from_le_bytes(*d)).map_err(|_| FlError::Malformed("dataset"))?;
        let row_len = d.checked_add(1).and_then(|n| n.checked_mul(8));
        let row_len = row_len.ok_or(FlError::Malformed("dataset"))?;
        if rest.is_empty() || rest.len() % row_len != 0 {
            return Err(FlError::Malformed("dataset"));
        }
        let rows = rest
            .chunks_exact(row_len)
            .map(|chunk| {
                let mut vals = chunk.chunks_exact(8).map(|c| {
                    T::lit(f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                });
                let x: Vec<T> = vals.by_ref().take(d).collect();
                let y = vals.next().expect("row has a target");
                Sample { x, y }
            })
            .collect();
        Ok(Self { rows })
    }
}

pub fn init_dataset() -> Vec<u8> {
    Dataset::<f64>::new().serialize()
}

/// `D.append(reading)`; the first row fixes the dimension.
pub fn sense_store<T: Scalar>(mut state: Dataset<T>, reading: Sample<T>) -> Result<Dataset<T>, FlError> {
    if let Some(d) = state.dim() {
        if reading.x.len() != d {
            return Err(FlError::DimensionMismatch {
                expected: d,
                got: reading.x.len(),
            });
        }
    }
    state.rows.push(reading);
    Ok(state)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<T> {
    pub w: Vec<T>,
    pub b: T,
}

impl<T: Scalar> ModelWeights<T> {
    pub fn zeros(d: usize) -> Self {
        Self {
            w: vec![T::zero(); d],
            b: T::zero(),
        }
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    pub fn is_finite(&self) -> bool {
        self.b.is_finite() && self.w.iter().all(|v| v.is_finite())
    }

    pub fn predict(&self, x: &[T]) -> T {
        self.w
            .iter()
            .zip(x)
            .fold(self.b, |acc, (&w, &xi)| acc + w * xi)
    }

    /// `d`, the `w` entries, then `b`, each as `f64 LE`.
    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity((self.w.len() + 2) * 8);
        out.extend_from_slice(&(self.w.len() as f64).to_le_bytes());
        for v in self.w.iter().chain(std::iter::once(&self.b)) {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        out
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self, FlError> {
        if bytes.len() < 16 || bytes.len() % 8 != 0 {
            return Err(FlError::Malformed("weights"));
        }
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let d = vals[0];
        if d.fract() != 0.0 || d < 0.0 || d as usize != vals.len() - 2 {
            return Err(FlError::Malformed("weights"));
        }
        let w = vals[1..vals.len() - 1].iter().map(|&v| T::lit(v)).collect();
        Ok(Self {
            w,
            b: T::lit(vals[vals.len() - 1]),
        })
    }

    fn check_dim(&self, d: usize) -> Result<(), FlError> {
        if self.w.len() != d {
            return Err(FlError::DimensionMismatch {
                expected: d,
                got: self.w.len(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainingConfig<T> {
    pub epochs: usize,
    pub alpha: T,
}

impl<T: Scalar> TrainingConfig<T> {
    pub fn validate(&self) -> Result<(), FlError> {
        if self.epochs == 0 {
            return Err(FlError::InvalidConfig("epoch count must be at least 1".into()));
        }
        if !(self.alpha >= T::zero()) || !self.alpha.is_finite() {
            return Err(FlError::InvalidConfig(format!("learning rate {} is not usable", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AggregationConfig<T> {
    pub eta: T,
}

pub fn mse<T: Scalar>(weights: &ModelWeights<T>, data: &Dataset<T>) -> Result<T, FlError> {
    let d = data.dim().ok_or(FlError::EmptyDataset)?;
    weights.check_dim(d)?;
    let n = T::from_usize(data.len()).expect("row count fits the scalar");
    let sum = data.rows.iter().fold(T::zero(), |acc, r| {
        let e = weights.predict(&r.x) - r.y;
        acc + e * e
    });
    Ok(sum / n)
}

/// MSE gradient: `(2/n)·Σ r_i·x_i` for `w` and `(2/n)·Σ r_i` for `b`,
/// with residual `r_i = w·x_i + b − y_i`.
pub fn gradient<T: Scalar>(weights: &ModelWeights<T>, data: &Dataset<T>) -> Result<ModelWeights<T>, FlError> {
    let d = data.dim().ok_or(FlError::EmptyDataset)?;
    weights.check_dim(d)?;
    let mut grad = ModelWeights::zeros(d);
    for row in &data.rows {
        let r = weights.predict(&row.x) - row.y;
        for (g, &xi) in grad.w.iter_mut().zip(&row.x) {
            *g = *g + r * xi;
        }
        grad.b = grad.b + r;
    }
    let scale = T::lit(2.0) / T::from_usize(data.len()).expect("row count fits the scalar");
    grad.w.iter_mut().for_each(|g| *g = *g * scale);
    grad.b = grad.b * scale;
    Ok(grad)
}

/// `t` full-batch steps of `W ← W − α·∇(W; D)`.
pub fn train<T: Scalar>(
    data: &Dataset<T>,
    weights: &ModelWeights<T>,
    cfg: &TrainingConfig<T>,
) -> Result<ModelWeights<T>, FlError> {
    cfg.validate()?;
    let mut w = weights.clone();
    for epoch in 1..=cfg.epochs {
        let g = gradient(&w, data)?;
        for (wi, gi) in w.w.iter_mut().zip(&g.w) {
            *wi = *wi - cfg.alpha * *gi;
        }
        w.b = w.b - cfg.alpha * g.b;
        if !w.is_finite() {
            return Err(FlError::Divergence { epoch });
        }
    }
    Ok(w)
}

/// `W ← W + η·Σ(O_i − W)/m` with `m = updates.len()`.
pub fn fedavg_aggregate<T: Scalar>(
    global: &ModelWeights<T>,
    updates: &[ModelWeights<T>],
    cfg: &AggregationConfig<T>,
) -> Result<ModelWeights<T>, FlError> {
    if updates.is_empty() {
        return Err(FlError::NoUpdates);
    }
    let d = global.dim();
    for u in updates {
        u.check_dim(d)?;
    }
    let m = T::from_usize(updates.len()).expect("update count fits the scalar");
    let mut out = global.clone();
    for j in 0..d {
        let delta = updates
            .iter()
            .fold(T::zero(), |acc, u| acc + (u.w[j] - global.w[j]));
        out.w[j] = global.w[j] + cfg.eta * delta / m;
    }
    let delta_b = updates.iter().fold(T::zero(), |acc, u| acc + (u.b - global.b));
    out.b = global.b + cfg.eta * delta_b / m;
    Ok(out)
}
