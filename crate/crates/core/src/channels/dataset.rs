use fdd_diffcore::{ComplexTensor, Real, Tensor};
use nalgebra::DMatrix;
use num_complex::{Complex32, Complex64};

use super::config::TaskConfig;
use crate::error::{Error, Result};

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.7;

/// `S` channel realisations of one task, stored `[S][K][N_t]` row-major.
///
/// Row `k` of each `K x N_t` sample is `h_k^H`, so `H V` directly gives the
/// effective gains `h_k^H v_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelDataset {
    config: TaskConfig,
    n_samples: usize,
    data: Vec<Complex32>,
    split_index: usize,
}

impl ChannelDataset {
    pub fn new(config: TaskConfig, data: Vec<Complex32>) -> Result<Self> {
        let per = config.n_users * config.n_tx;
        if per == 0 || data.len() % per != 0 {
            return Err(Error::Dimension(format!(
                "{} entries do not form samples of {}x{}",
                data.len(),
                config.n_users,
                config.n_tx
            )));
        }
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::Config("channel samples must be finite".into()));
        }
        let n_samples = data.len() / per;
        Ok(Self {
            split_index: train_count(n_samples, DEFAULT_TRAIN_FRACTION),
            config,
            n_samples,
            data,
        })
    }

    pub fn config(&self) -> &TaskConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.n_samples
    }

    pub fn is_empty(&self) -> bool {
        self.n_samples == 0
    }

    pub fn n_users(&self) -> usize {
        self.config.n_users
    }

    pub fn n_tx(&self) -> usize {
        self.config.n_tx
    }

    pub fn raw(&self) -> &[Complex32] {
        &self.data
    }

    pub fn sample(&self, i: usize) -> &[Complex32] {
        let per = self.n_users() * self.n_tx();
        &self.data[i * per..(i + 1) * per]
    }

    pub fn channel_matrix(&self, i: usize) -> DMatrix<Complex64> {
        let s = self.sample(i);
        DMatrix::from_fn(self.n_users(), self.n_tx(), |r, c| {
            let z = s[r * self.n_tx() + c];
            Complex64::new(f64::from(z.re), f64::from(z.im))
        })
    }

    /// Boundary between the train and test parts under the default 7:3 split.
    pub fn split_index(&self) -> usize {
        self.split_index
    }

    pub fn all(&self) -> DatasetView<'_> {
        DatasetView {
            ds: self,
            start: 0,
            end: self.n_samples,
        }
    }

    pub fn train(&self) -> DatasetView<'_> {
        DatasetView {
            ds: self,
            start: 0,
            end: self.split_index,
        }
    }

    pub fn test(&self) -> DatasetView<'_> {
        DatasetView {
            ds: self,
            start: self.split_index,
            end: self.n_samples,
        }
    }

    /// The same samples with the stored train/test boundary moved to
    /// `floor(S * train_fraction)`.
    pub fn with_train_fraction(mut self, train_fraction: f64) -> Result<Self> {
        let cut = self.split(train_fraction)?.0.len();
        self.split_index = cut;
        Ok(self)
    }

    /// First `floor(S * train_fraction)` samples train, the rest test.
    pub fn split(&self, train_fraction: f64) -> Result<(DatasetView<'_>, DatasetView<'_>)> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::Config(format!("train fraction {train_fraction} outside (0, 1)")));
        }
        let cut = train_count(self.n_samples, train_fraction);
        if cut == 0 || cut == self.n_samples {
            return Err(Error::Empty("split side"));
        }
        Ok((
            DatasetView {
                ds: self,
                start: 0,
                end: cut,
            },
            DatasetView {
                ds: self,
                start: cut,
                end: self.n_samples,
            },
        ))
    }
}

/// `floor(n * f)`, tolerant of the representation error in `f` (so that
/// `0.7 * 300000` gives 210000, not 209999).
fn train_count(n: usize, f: f64) -> usize {
    let x = n as f64 * f;
    (x + x.abs() * 1e-12).floor() as usize
}

/// Borrowed contiguous range of a dataset.
#[derive(Clone, Copy, Debug)]
pub struct DatasetView<'a> {
    ds: &'a ChannelDataset,
    start: usize,
    end: usize,
}

impl<'a> DatasetView<'a> {
    pub fn dataset(&self) -> &'a ChannelDataset {
        self.ds
    }

    pub fn config(&self) -> &'a TaskConfig {
        &self.ds.config
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    /// Index into the underlying dataset of local sample `i`.
    pub fn global_index(&self, i: usize) -> usize {
        self.start + i
    }

    pub fn sample(&self, i: usize) -> &'a [Complex32] {
        self.ds.sample(self.start + i)
    }

    pub fn channel_matrix(&self, i: usize) -> DMatrix<Complex64> {
        self.ds.channel_matrix(self.start + i)
    }

    /// Stacks the selected samples (local indices) into an `(M*K) x N_t`
    /// complex tensor.
    pub fn batch<T: Real>(&self, idx: &[usize]) -> ComplexTensor<T> {
        let (k, n) = (self.ds.n_users(), self.ds.n_tx());
        let mut re = Vec::with_capacity(idx.len() * k * n);
        let mut im = Vec::with_capacity(idx.len() * k * n);
        for &i in idx {
            for z in self.sample(i) {
                re.push(T::of(f64::from(z.re)));
                im.push(T::of(f64::from(z.im)));
            }
        }
        let rows = idx.len() * k;
        ComplexTensor {
            re: Tensor::new(rows, n, re).expect("sizes agree"),
            im: Tensor::new(rows, n, im).expect("sizes agree"),
        }
    }
}
