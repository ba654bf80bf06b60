//! Benchmark data: IDX image ingestion, a synthetic desk-scale generator,
//! and derivation of the three objectives (class one-hots, 8-bin pixel
//! histograms, sampling targets).

mod cache;
mod idx;
mod synth;

pub use cache::{load_cache, save_cache, CACHE_HEADER};
pub use idx::{load_idx, save_idx};
pub use synth::synthetic_dataset;

use crate::graph::{InputId, OutputId, OutputKind, ProblemData, ProblemSpec};
use crate::nn::Matrix;
use thiserror::Error;

/// Fraction of rows in the training split; the rest evaluate.
pub const TRAIN_FRACTION: f64 = 0.8;

/// Number of histogram bins over the [0, 1] pixel range.
pub const HISTOGRAM_BINS: usize = 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(String),
    #[error("bad magic 0x{got:08x}, expected 0x{expected:08x}")]
    BadMagic { expected: u32, got: u32 },
    #[error("file truncated: needed {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u8, classes: usize },
    #[error("bad dataset cache: {0}")]
    BadCache(String),
}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io(e.to_string())
    }
}

/// A fully derived benchmark dataset: pixels in [0, 1], one-hot labels,
/// normalized 8-bin histograms, and disjoint exhaustive train/eval splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Matrix,
    pub labels: Matrix,
    pub raw_labels: Vec<u8>,
    pub histograms: Matrix,
    pub img_rows: usize,
    pub img_cols: usize,
    pub classes: usize,
    pub train_idx: Vec<usize>,
    pub eval_idx: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.img_rows * self.img_cols
    }

    /// Wire this dataset to a problem's inputs and outputs:
    /// classification outputs get the one-hot labels, regression outputs
    /// the histograms, sampling outputs the images themselves.
    pub fn to_problem(&self, spec: &ProblemSpec) -> ProblemData {
        assert_eq!(spec.inputs.len(), 1, "benchmark datasets have one input");
        let input = spec.inputs[0].id;
        assert_eq!(
            spec.inputs[0].dim,
            self.feature_dim(),
            "problem input width does not match the dataset"
        );
        let mut targets = std::collections::BTreeMap::new();
        for out in &spec.outputs {
            let m = match out.kind {
                OutputKind::Classification => self.labels.clone(),
                OutputKind::Regression => self.histograms.clone(),
                OutputKind::Sampling => self.images.clone(),
            };
            assert_eq!(out.dim, m.cols(), "output {} width mismatch", out.id);
            targets.insert(out.id, m);
        }
        ProblemData {
            inputs: [(input, self.images.clone())].into(),
            targets,
            train_idx: self.train_idx.clone(),
            eval_idx: self.eval_idx.clone(),
        }
    }

    /// The matcher for `to_problem`: a benchmark spec with this dataset's
    /// geometry. Panics on non-square images (use an explicit spec there).
    pub fn benchmark_spec(&self) -> ProblemSpec {
        assert_eq!(self.img_rows, self.img_cols, "benchmark images are square");
        ProblemSpec::benchmark(self.img_rows, self.classes)
    }
}

/// First `TRAIN_FRACTION` of rows train, the rest evaluate.
pub(crate) fn default_split(n: usize) -> (Vec<usize>, Vec<usize>) {
    let cut = ((n as f64) * TRAIN_FRACTION).ceil() as usize;
    let cut = cut.min(n);
    ((0..cut).collect(), (cut..n).collect())
}

/// One-hot labels and normalized 8-bin histograms for scaled images.
/// Bin k covers [k/8, (k+1)/8), with the last bin closed at 1.
pub fn derive_targets(
    images: &Matrix,
    raw_labels: &[u8],
    classes: usize,
) -> Result<(Matrix, Matrix), DataError> {
    assert_eq!(images.rows(), raw_labels.len(), "label count mismatch");
    let mut labels = Matrix::zeros(raw_labels.len(), classes);
    for (r, &l) in raw_labels.iter().enumerate() {
        if (l as usize) >= classes {
            return Err(DataError::LabelOutOfRange { label: l, classes });
        }
        labels.set(r, l as usize, 1.0);
    }
    let mut histograms = Matrix::zeros(images.rows(), HISTOGRAM_BINS);
    let d = images.cols().max(1) as f64;
    for r in 0..images.rows() {
        for &p in images.row(r) {
            let bin = ((p * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
            histograms.set(r, bin, histograms.get(r, bin) + 1.0);
        }
        for b in 0..HISTOGRAM_BINS {
            histograms.set(r, b, histograms.get(r, b) / d);
        }
    }
    Ok((labels, histograms))
}
