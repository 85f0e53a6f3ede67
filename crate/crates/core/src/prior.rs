//! The discrete-continuous latent prior and the code-swapping used by the
//! disentangling losses.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Array, Tensor};

/// One-hot cluster codes paired with continuous codes, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBatch {
    /// `B x K`, each row one-hot.
    pub zc: Array,
    /// `B x d_n`.
    pub zn: Array,
}

impl LatentBatch {
    pub fn new(zc: Array, zn: Array) -> Result<Self> {
        if zc.rank() != 2 || zn.rank() != 2 || zc.rows() != zn.rows() {
            return Err(Error::dim(format!(
                "latent codes {:?} and {:?} do not pair up",
                zc.shape(),
                zn.shape()
            )));
        }
        Ok(LatentBatch { zc, zn })
    }

    pub fn batch_size(&self) -> usize {
        self.zc.rows()
    }

    pub fn clusters(&self) -> usize {
        self.zc.cols()
    }

    /// Index of the hot entry in each `zc` row.
    pub fn cluster_ids(&self) -> Vec<usize> {
        (0..self.batch_size())
            .map(|i| {
                self.zc
                    .row(i)
                    .iter()
                    .position(|&v| v == 1.0)
                    .expect("one-hot row")
            })
            .collect()
    }
}

/// One-hot rows for the given cluster ids.
pub fn one_hot(ids: &[usize], k: usize) -> Array {
    let mut zc = Array::zeros(&[ids.len(), k]);
    for (i, &c) in ids.iter().enumerate() {
        zc.data_mut()[i * k + c] = 1.0;
    }
    zc
}

/// Draws `b` codes: `zc` uniform over the `k` one-hot vectors and `zn`
/// i.i.d. `N(0, sigma^2)`.
pub fn sample_prior<R: Rng + ?Sized>(
    b: usize,
    k: usize,
    dn: usize,
    sigma: f64,
    rng: &mut R,
) -> Result<LatentBatch> {
    if b == 0 || k == 0 || dn == 0 {
        return Err(Error::Config(format!(
            "prior sizes must be positive (batch {b}, clusters {k}, continuous dim {dn})"
        )));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("prior std must be positive, got {sigma}")));
    }
    let ids: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
    let zc = one_hot(&ids, k);
    let normal = Normal::new(0.0, sigma).expect("validated std");
    let zn = Array::new(vec![b, dn], (0..b * dn).map(|_| normal.sample(rng)).collect())?;
    Ok(LatentBatch { zc, zn })
}

/// Generator input `[zc | zn]`.
pub fn compose(batch: &LatentBatch) -> Result<Tensor> {
    swap(
        &Tensor::constant(batch.zc.clone()),
        &Tensor::constant(batch.zn.clone()),
    )
}

/// Splits a composed code back into its parts.
pub fn decompose(z: &Array, k: usize) -> Result<LatentBatch> {
    if z.rank() != 2 || z.cols() <= k {
        return Err(Error::dim(format!(
            "code of shape {:?} cannot hold {k} cluster columns and a continuous part",
            z.shape()
        )));
    }
    let t = Tensor::constant(z.clone());
    let zc = t.slice(1, 0, k)?.value().clone();
    let zn = t.slice(1, k, z.cols())?.value().clone();
    LatentBatch::new(zc, zn)
}

/// Pairs prior cluster codes with encoder-produced continuous codes,
/// `z' = (zc, zn_encoded)`. Gradients flow back into `zn_encoded`.
pub fn swap(zc_prior: &Tensor, zn_encoded: &Tensor) -> Result<Tensor> {
    if zc_prior.shape().len() != 2
        || zn_encoded.shape().len() != 2
        || zc_prior.shape()[0] != zn_encoded.shape()[0]
    {
        return Err(Error::dim(format!(
            "cannot pair codes of shape {:?} and {:?}",
            zc_prior.shape(),
            zn_encoded.shape()
        )));
    }
    Tensor::concat(&[zc_prior, zn_encoded], 1)
}
