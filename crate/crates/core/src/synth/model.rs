//! Frame classifier with a finite receptive field: each output frame sees
//! `context` adjacent input frames (zero-padded at the edges) through one
//! tanh hidden layer.

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ctc::{log_softmax, EmissionMatrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub feature_dim: usize,
    pub context: usize,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Gradient (or velocity) with the same shapes as a model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl Params {
    pub fn zeros_like(m: &ToyModel) -> Self {
        Params {
            w1: Array2::zeros(m.w1.dim()),
            b1: Array1::zeros(m.b1.len()),
            w2: Array2::zeros(m.w2.dim()),
            b2: Array1::zeros(m.b2.len()),
        }
    }

    pub fn scaled_add(&mut self, alpha: f64, other: &Params) {
        self.w1.scaled_add(alpha, &other.w1);
        self.b1.scaled_add(alpha, &other.b1);
        self.w2.scaled_add(alpha, &other.w2);
        self.b2.scaled_add(alpha, &other.b2);
    }

    pub fn scale(&mut self, alpha: f64) {
        self.w1 *= alpha;
        self.b1 *= alpha;
        self.w2 *= alpha;
        self.b2 *= alpha;
    }

    pub fn norm(&self) -> f64 {
        let sq = |a: f64, x: &f64| a + x * x;
        (self.w1.iter().fold(0.0, sq)
            + self.b1.iter().fold(0.0, sq)
            + self.w2.iter().fold(0.0, sq)
            + self.b2.iter().fold(0.0, sq))
        .sqrt()
    }
}

/// Activations kept from a forward pass for backpropagation.
pub struct Forward {
    windows: Array2<f64>,
    hidden: Array2<f64>,
    pub logits: Array2<f64>,
}

impl ToyModel {
    /// Gaussian init scaled by fan-in; output biases start at zero.
    pub fn new(feature_dim: usize, context: usize, hidden: usize, outputs: usize, seed: u64) -> Result<Self> {
        if feature_dim == 0 || context == 0 || context.is_multiple_of(2) || hidden == 0 || outputs < 2 {
            return Err(Error::Config(format!(
                "invalid model shape: m={feature_dim} context={context} hidden={hidden} outputs={outputs}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan_in = feature_dim * context;
        let n1 = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("positive std");
        let n2 = Normal::new(0.0, (1.0 / hidden as f64).sqrt()).expect("positive std");
        let w1 = Array2::from_shape_simple_fn((hidden, fan_in), || n1.sample(&mut rng));
        let w2 = Array2::from_shape_simple_fn((outputs, hidden), || n2.sample(&mut rng));
        Ok(ToyModel {
            feature_dim,
            context,
            w1,
            b1: Array1::zeros(hidden),
            w2,
            b2: Array1::zeros(outputs),
        })
    }

    pub fn hidden(&self) -> usize {
        self.b1.len()
    }

    pub fn outputs(&self) -> usize {
        self.b2.len()
    }

    fn windows(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let (frames, m) = x.dim();
        let half = self.context / 2;
        let mut out = Array2::zeros((frames, m * self.context));
        for t in 0..frames {
            for j in 0..self.context {
                let src = t as isize + j as isize - half as isize;
                if src >= 0 && (src as usize) < frames {
                    out.slice_mut(s![t, j * m..(j + 1) * m]).assign(&x.row(src as usize));
                }
            }
        }
        out
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Forward> {
        if x.ncols() != self.feature_dim {
            return Err(Error::Shape(format!(
                "features have width {}, model expects {}",
                x.ncols(),
                self.feature_dim
            )));
        }
        if x.nrows() == 0 {
            return Err(Error::Shape("features have no frames".into()));
        }
        let windows = self.windows(x);
        let mut hidden = windows.dot(&self.w1.t()) + &self.b1;
        hidden.mapv_inplace(f64::tanh);
        let logits = hidden.dot(&self.w2.t()) + &self.b2;
        Ok(Forward {
            windows,
            hidden,
            logits,
        })
    }

    /// Parameter gradient given the loss gradient at the logits.
    pub fn backward(&self, fwd: &Forward, dlogits: &Array2<f64>) -> Params {
        let w2 = dlogits.t().dot(&fwd.hidden);
        let b2 = dlogits.sum_axis(Axis(0));
        let mut dpre = dlogits.dot(&self.w2);
        dpre.zip_mut_with(&fwd.hidden, |d, &h| *d *= 1.0 - h * h);
        let w1 = dpre.t().dot(&fwd.windows);
        let b1 = dpre.sum_axis(Axis(0));
        Params { w1, b1, w2, b2 }
    }

    pub fn apply(&mut self, delta: &Params) {
        self.w1 += &delta.w1;
        self.b1 += &delta.b1;
        self.w2 += &delta.w2;
        self.b2 += &delta.b2;
    }

    /// Frame-synchronous emission probabilities.
    pub fn predict(&self, features: ArrayView2<'_, f64>) -> Result<EmissionMatrix> {
        let fwd = self.forward(features)?;
        let mut probs = log_softmax(fwd.logits.view());
        probs.mapv_inplace(f64::exp);
        EmissionMatrix::new(probs)
    }

    pub fn to_json_string(&self) -> String {
        let doc = ModelFile {
            version: 1,
            feature_dim: self.feature_dim,
            context: self.context,
            hidden: self.hidden(),
            outputs: self.outputs(),
            w1: self.w1.iter().copied().collect(),
            b1: self.b1.to_vec(),
            w2: self.w2.iter().copied().collect(),
            b2: self.b2.to_vec(),
        };
        let mut s = serde_json::to_string(&doc).expect("model serializes");
        s.push('\n');
        s
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let doc: ModelFile = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        if doc.version != 1 {
            return Err(Error::UnsupportedVersion(doc.version));
        }
        let shape_err = |e: ndarray::ShapeError| Error::Format(format!("model weights: {e}"));
        let fan_in = doc.feature_dim * doc.context;
        if doc.b1.len() != doc.hidden || doc.b2.len() != doc.outputs {
            return Err(Error::Format("model bias lengths do not match shape".into()));
        }
        Ok(ToyModel {
            feature_dim: doc.feature_dim,
            context: doc.context,
            w1: Array2::from_shape_vec((doc.hidden, fan_in), doc.w1).map_err(shape_err)?,
            b1: Array1::from(doc.b1),
            w2: Array2::from_shape_vec((doc.outputs, doc.hidden), doc.w2).map_err(shape_err)?,
            b2: Array1::from(doc.b2),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    version: u32,
    feature_dim: usize,
    context: usize,
    hidden: usize,
    outputs: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

pub fn predict(model: &ToyModel, features: ArrayView2<'_, f64>) -> Result<EmissionMatrix> {
    model.predict(features)
}
