//! Loss terms of the combined clustering objective, the critic losses with
//! gradient penalty, and the ClusterGAN baseline objective.
//!
//! Conventions:
//! * squared-error terms sum over components and average over the batch;
//! * cross-entropies are batch means of `-ln(p[true] + 1e-12)`;
//! * all losses are minimized.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{discriminator_forward, encoder_forward, generator_forward, BoundNet, Encoded};
use crate::prior::{compose, swap, LatentBatch};
use crate::tensor::{Array, Tensor, LOG_EPS};

/// Regularization weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// MMD between encoded and prior continuous codes.
    pub beta1: f64,
    /// Continuous-code consistency through the swapped code.
    pub beta2: f64,
    /// Cross-entropy of generated samples against their prior cluster.
    pub beta3: f64,
    /// Cross-entropy of swapped-code samples against their prior cluster.
    pub beta4: f64,
    /// Gradient-penalty coefficient of the Wasserstein critic.
    pub lambda_gp: f64,
    /// ClusterGAN mode: continuous-code recovery weight.
    pub lambda_n: f64,
    /// ClusterGAN mode: cluster-code cross-entropy weight.
    pub lambda_c: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta1: 1.0,
            beta2: 1.0,
            beta3: 10.0,
            beta4: 10.0,
            lambda_gp: 10.0,
            lambda_n: 10.0,
            lambda_c: 10.0,
        }
    }
}

impl LossWeights {
    /// Weights used for the CIFAR-style runs, where the cross-entropy terms
    /// are down-weighted.
    pub fn cifar() -> Self {
        LossWeights {
            beta3: 1.0,
            beta4: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("beta3", self.beta3),
            ("beta4", self.beta4),
            ("lambda_gp", self.lambda_gp),
            ("lambda_n", self.lambda_n),
            ("lambda_c", self.lambda_c),
        ];
        let bad: Vec<_> = all
            .iter()
            .filter(|(_, v)| !(v.is_finite() && *v >= 0.0))
            .map(|(n, v)| format!("{n}={v}"))
            .collect();
        if !bad.is_empty() {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative: {}",
                bad.join(", ")
            )));
        }
        Ok(())
    }
}

/// A removable term of the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Ae,
    N,
    Mmd,
    Ce,
    C,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Ablation::Ae, Ablation::N, Ablation::Mmd, Ablation::Ce, Ablation::C];

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Ae => "AE",
            Ablation::N => "n",
            Ablation::Mmd => "MMD",
            Ablation::Ce => "CE",
            Ablation::C => "c",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ae" => Ok(Ablation::Ae),
            "n" => Ok(Ablation::N),
            "mmd" => Ok(Ablation::Mmd),
            "ce" => Ok(Ablation::Ce),
            "c" => Ok(Ablation::C),
            other => Err(Error::Config(format!("unknown ablation term `{other}`"))),
        }
    }
}

/// Effective multiplier of each objective term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveWeights {
    pub adv: f64,
    pub ae: f64,
    pub mmd: f64,
    pub n: f64,
    pub ce: f64,
    pub c: f64,
}

impl ObjectiveWeights {
    pub fn new(w: &LossWeights, ablate: &[Ablation]) -> Self {
        let keep = |a: Ablation, v: f64| if ablate.contains(&a) { 0.0 } else { v };
        ObjectiveWeights {
            adv: 1.0,
            ae: keep(Ablation::Ae, 1.0),
            mmd: keep(Ablation::Mmd, w.beta1),
            n: keep(Ablation::N, w.beta2),
            ce: keep(Ablation::Ce, w.beta3),
            c: keep(Ablation::C, w.beta4),
        }
    }

    pub fn zero() -> Self {
        ObjectiveWeights {
            adv: 0.0,
            ae: 0.0,
            mmd: 0.0,
            n: 0.0,
            ce: 0.0,
            c: 0.0,
        }
    }
}

/// Individual objective terms. Absent terms were not evaluated.
#[derive(Clone, Debug, Default)]
pub struct ObjectiveTerms {
    pub adv: Option<Tensor>,
    pub ae: Option<Tensor>,
    pub mmd: Option<Tensor>,
    pub n: Option<Tensor>,
    pub ce: Option<Tensor>,
    pub c: Option<Tensor>,
}

impl ObjectiveTerms {
    /// `(name, term)` pairs in a fixed order.
    pub fn named(&self) -> [(&'static str, Option<&Tensor>); 6] {
        [
            ("adv", self.adv.as_ref()),
            ("ae", self.ae.as_ref()),
            ("mmd", self.mmd.as_ref()),
            ("n", self.n.as_ref()),
            ("ce", self.ce.as_ref()),
            ("c", self.c.as_ref()),
        ]
    }
}

/// Weighted sum of the evaluated terms; zero-weight terms are left out.
pub fn total_objective(weights: &ObjectiveWeights, terms: &ObjectiveTerms) -> Result<Tensor> {
    let w = [weights.adv, weights.ae, weights.mmd, weights.n, weights.ce, weights.c];
    let mut total: Option<Tensor> = None;
    for ((_, term), wi) in terms.named().into_iter().zip(w) {
        let Some(t) = term else { continue };
        if wi == 0.0 {
            continue;
        }
        let part = if wi == 1.0 { t.clone() } else { t.scale(wi) };
        total = Some(match total {
            Some(acc) => acc.add(&part)?,
            None => part,
        });
    }
    Ok(total.unwrap_or_else(|| Tensor::scalar(0.0)))
}

// ---------------------------------------------------------------------------
// Individual terms
// ---------------------------------------------------------------------------

/// Bandwidth matched to the prior's expected squared distance.
pub fn default_bandwidth(latent_dim: usize, sigma: f64) -> f64 {
    2.0 * latent_dim as f64 * sigma * sigma
}

/// `exp(-||a_i - b_j||^2 / (2 bandwidth))` for all row pairs.
fn rbf_matrix(a: &Tensor, b: &Tensor, bandwidth: f64) -> Result<Tensor> {
    let (n, d) = (a.shape()[0], a.shape()[1]);
    let m = b.shape()[0];
    let diff = a.reshape(&[n, 1, d])?.sub(&b.reshape(&[1, m, d])?)?;
    Ok(diff
        .square()
        .sum(Some(2))?
        .scale(-1.0 / (2.0 * bandwidth))
        .exp())
}

/// Unbiased squared MMD with an RBF kernel: off-diagonal means within each
/// set plus the full cross term. Can be slightly negative.
pub fn mmd_rbf(z_enc: &Tensor, z_prior: &Tensor, bandwidth: f64) -> Result<Tensor> {
    let (sa, sb) = (z_enc.shape(), z_prior.shape());
    if sa.len() != 2 || sa != sb {
        return Err(Error::dim(format!(
            "mmd needs two equally shaped sample matrices, got {sa:?} and {sb:?}"
        )));
    }
    let n = sa[0];
    if n < 2 {
        return Err(Error::Domain(format!("mmd needs at least 2 samples, got {n}")));
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::Domain(format!("kernel bandwidth must be positive, got {bandwidth}")));
    }
    let off_diag = Tensor::constant(Array::eye(n).map(|v| 1.0 - v));
    let pairs = (n * (n - 1)) as f64;
    let within = |z: &Tensor| -> Result<Tensor> {
        Ok(rbf_matrix(z, z, bandwidth)?
            .mul(&off_diag)?
            .sum(None)?
            .scale(1.0 / pairs))
    };
    // both orientations, so swapping the arguments is bitwise symmetric
    let cross = rbf_matrix(z_enc, z_prior, bandwidth)?
        .sum(None)?
        .add(&rbf_matrix(z_prior, z_enc, bandwidth)?.sum(None)?)?
        .scale(1.0 / (n * n) as f64);
    within(z_prior)?.add(&within(z_enc)?)?.sub(&cross)
}

fn batch_sq_error(a: &Tensor, b: &Tensor, what: &str) -> Result<Tensor> {
    if a.shape() != b.shape() || a.shape().len() != 2 {
        return Err(Error::dim(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    let batch = a.shape()[0] as f64;
    Ok(a.sub(b)?.square().sum(None)?.scale(1.0 / batch))
}

/// Batch mean of `||x - x_hat||^2`.
pub fn recon_mse(x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
    batch_sq_error(x, x_hat, "reconstruction")
}

/// Batch mean of `||zn_ref - zn_rec||^2`.
pub fn zn_consistency(zn_ref: &Tensor, zn_rec: &Tensor) -> Result<Tensor> {
    batch_sq_error(zn_ref, zn_rec, "continuous-code consistency")
}

/// Batch mean of `-ln(p[true] + 1e-12)` for one-hot targets `zc`.
pub fn ce_onehot(zc: &Tensor, p: &Tensor) -> Result<Tensor> {
    if zc.shape() != p.shape() || zc.shape().len() != 2 {
        return Err(Error::dim(format!(
            "cross-entropy: targets {:?} vs probabilities {:?}",
            zc.shape(),
            p.shape()
        )));
    }
    let k = zc.shape()[1];
    for (i, (t, q)) in zc.data().chunks(k).zip(p.data().chunks(k)).enumerate() {
        let ones = t.iter().filter(|&&v| v == 1.0).count();
        let zeros = t.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != k - 1 {
            return Err(Error::Domain(format!("target row {i} is not one-hot")));
        }
        let s: f64 = q.iter().sum();
        if (s - 1.0).abs() > 1e-9 || q.iter().any(|&v| v < 0.0) {
            return Err(Error::Domain(format!(
                "probability row {i} sums to {s}, not 1"
            )));
        }
    }
    let batch = zc.shape()[0] as f64;
    Ok(zc
        .mul(&p.log_guarded(LOG_EPS))?
        .sum(None)?
        .scale(-1.0 / batch))
}

// ---------------------------------------------------------------------------
// Adversarial terms
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CriticMode {
    /// Wasserstein critic with gradient penalty.
    #[default]
    WassersteinGp,
    /// Standard GAN with a sigmoid discriminator.
    Vanilla,
}

impl std::str::FromStr for CriticMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wasserstein_gp" => Ok(CriticMode::WassersteinGp),
            "vanilla" => Ok(CriticMode::Vanilla),
            other => Err(Error::Config(format!("unknown critic mode `{other}`"))),
        }
    }
}

/// Gradient penalty at interpolates `eps_i x_r + (1 - eps_i) x_g` with the
/// given per-sample mixing weights.
pub fn gradient_penalty_at(d: &BoundNet, x_r: &Tensor, x_g: &Tensor, eps: &[f64]) -> Result<Tensor> {
    let tape = d
        .tensors
        .iter()
        .find_map(|t| t.tape())
        .ok_or_else(|| Error::Usage("gradient penalty needs a trainable critic".into()))?
        .clone();
    if !tape.higher_order() {
        return Err(Error::Usage(
            "gradient penalty needs a tape built with higher-order support".into(),
        ));
    }
    if x_r.shape() != x_g.shape() || x_r.shape().len() != 2 {
        return Err(Error::dim(format!(
            "gradient penalty: real {:?} vs generated {:?}",
            x_r.shape(),
            x_g.shape()
        )));
    }
    let (b, dim) = (x_r.shape()[0], x_r.shape()[1]);
    if eps.len() != b {
        return Err(Error::dim(format!("{} mixing weights for {b} rows", eps.len())));
    }
    let mut mixed = Vec::with_capacity(b * dim);
    for i in 0..b {
        for j in 0..dim {
            let (r, g) = (x_r.data()[i * dim + j], x_g.data()[i * dim + j]);
            mixed.push(eps[i] * r + (1.0 - eps[i]) * g);
        }
    }
    let x_hat = tape.leaf(Array::new(vec![b, dim], mixed)?);
    let score = discriminator_forward(d, &x_hat)?.sum(None)?;
    let grad = tape.grad(&score, &[&x_hat], true)?[0]
        .clone()
        .unwrap_or_else(|| Tensor::constant(Array::zeros(&[b, dim])));
    grad.l2_norm(Some(1))?.add_scalar(-1.0).square().mean(None)
}

/// Mean over the batch of `(||grad D(x_hat)||_2 - 1)^2` with
/// `eps ~ U[0, 1]` drawn per sample.
pub fn gradient_penalty<R: Rng + ?Sized>(
    d: &BoundNet,
    x_r: &Tensor,
    x_g: &Tensor,
    rng: &mut R,
) -> Result<Tensor> {
    let eps: Vec<f64> = (0..x_r.shape().first().copied().unwrap_or(0))
        .map(|_| rng.random::<f64>())
        .collect();
    gradient_penalty_at(d, x_r, x_g, &eps)
}

/// `ln sigmoid(t)`, guarded.
fn log_sigmoid(t: &Tensor) -> Tensor {
    t.sigmoid().log_guarded(LOG_EPS)
}

/// Critic loss to minimize.
pub fn critic_loss<R: Rng + ?Sized>(
    mode: CriticMode,
    d: &BoundNet,
    x_r: &Tensor,
    x_g: &Tensor,
    lambda_gp: f64,
    rng: &mut R,
) -> Result<Tensor> {
    let real = discriminator_forward(d, x_r)?;
    let fake = discriminator_forward(d, x_g)?;
    match mode {
        CriticMode::WassersteinGp => {
            let gap = fake.mean(None)?.sub(&real.mean(None)?)?;
            if lambda_gp == 0.0 {
                return Ok(gap);
            }
            let gp = gradient_penalty(d, x_r, x_g, rng)?;
            gap.add(&gp.scale(lambda_gp))
        }
        CriticMode::Vanilla => {
            let r = log_sigmoid(&real).mean(None)?;
            let f = log_sigmoid(&fake.neg()).mean(None)?;
            Ok(r.add(&f)?.neg())
        }
    }
}

/// Generator's adversarial loss (non-saturating in vanilla mode).
pub fn generator_adversarial(mode: CriticMode, d: &BoundNet, x_g: &Tensor) -> Result<Tensor> {
    let fake = discriminator_forward(d, x_g)?;
    match mode {
        CriticMode::WassersteinGp => Ok(fake.mean(None)?.neg()),
        CriticMode::Vanilla => Ok(log_sigmoid(&fake).mean(None)?.neg()),
    }
}

// ---------------------------------------------------------------------------
// Full objectives
// ---------------------------------------------------------------------------

/// Every intermediate of one joint step.
pub struct DlsForward {
    pub terms: ObjectiveTerms,
    /// Encoding of generated samples `E(G(z))`.
    pub enc_generated: Encoded,
    /// Encoding of real samples `E(x_r)`.
    pub enc_real: Encoded,
    /// Encoding of swapped-code samples `E(G(zc, zn_r))`.
    pub enc_swapped: Encoded,
    pub x_g: Tensor,
    pub x_swapped: Tensor,
    pub x_recon: Tensor,
}

/// Builds the joint-step dataflow and every loss term:
///
/// ```text
/// x_g = G(z)            (zc_hat, zn_hat) = E(x_g)
/// (zc_r, zn_r) = E(x_r) x_hat = G(zc_r, zn_r)
/// x_g' = G(zc, zn_r)    (zc_hat', zn_hat_r) = E(x_g')
/// ```
///
/// `zc_r` stays the soft softmax output so reconstruction is
/// differentiable. Terms whose weight is zero are still evaluated.
pub fn dls_forward(
    mode: CriticMode,
    g: &BoundNet,
    e: &BoundNet,
    d: &BoundNet,
    x_r: &Tensor,
    prior: &LatentBatch,
    bandwidth: f64,
) -> Result<DlsForward> {
    let z = compose(prior)?;
    let zc = Tensor::constant(prior.zc.clone());
    let zn = Tensor::constant(prior.zn.clone());

    let x_g = generator_forward(g, &z)?;
    let enc_generated = encoder_forward(e, &x_g)?;
    let enc_real = encoder_forward(e, x_r)?;
    let z_swapped = swap(&zc, &enc_real.zn)?;
    let z_real = swap(&enc_real.zc_prob, &enc_real.zn)?;
    let x_swapped = generator_forward(g, &z_swapped)?;
    let x_recon = generator_forward(g, &z_real)?;
    let enc_swapped = encoder_forward(e, &x_swapped)?;

    let terms = ObjectiveTerms {
        adv: Some(generator_adversarial(mode, d, &x_g)?),
        ae: Some(recon_mse(x_r, &x_recon)?),
        mmd: Some(mmd_rbf(&enc_real.zn, &zn, bandwidth)?),
        n: Some(zn_consistency(&enc_real.zn, &enc_swapped.zn)?),
        ce: Some(ce_onehot(&zc, &enc_generated.zc_prob)?),
        c: Some(ce_onehot(&zc, &enc_swapped.zc_prob)?),
    };
    Ok(DlsForward {
        terms,
        enc_generated,
        enc_real,
        enc_swapped,
        x_g,
        x_swapped,
        x_recon,
    })
}

/// Generator and encoder losses of the ClusterGAN baseline.
pub struct ClusterGanLosses {
    pub adv: Tensor,
    pub zn_recovery: Tensor,
    pub ce: Tensor,
    /// `adv + lambda_n * zn_recovery + lambda_c * ce`.
    pub generator: Tensor,
    /// `lambda_n * zn_recovery + lambda_c * ce`.
    pub encoder: Tensor,
}

/// ClusterGAN objective: adversarial term plus latent recovery on generated
/// data only. No reconstruction, MMD or swapped-code terms.
pub fn clustergan_objective(
    weights: &LossWeights,
    mode: CriticMode,
    d: &BoundNet,
    g: &BoundNet,
    e: &BoundNet,
    prior: &LatentBatch,
) -> Result<ClusterGanLosses> {
    let z = compose(prior)?;
    let x_g = generator_forward(g, &z)?;
    let enc = encoder_forward(e, &x_g)?;
    let adv = generator_adversarial(mode, d, &x_g)?;
    let zn_recovery = zn_consistency(&Tensor::constant(prior.zn.clone()), &enc.zn)?;
    let ce = ce_onehot(&Tensor::constant(prior.zc.clone()), &enc.zc_prob)?;

    let mut encoder = Tensor::scalar(0.0);
    if weights.lambda_n != 0.0 {
        encoder = encoder.add(&zn_recovery.scale(weights.lambda_n))?;
    }
    if weights.lambda_c != 0.0 {
        encoder = encoder.add(&ce.scale(weights.lambda_c))?;
    }
    let generator = adv.add(&encoder)?;
    Ok(ClusterGanLosses {
        adv,
        zn_recovery,
        ce,
        generator,
        encoder,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::nets::{MlpSpec, NetworkParams, OutputActivation};
    use crate::prior::{one_hot, sample_prior};
    use crate::tensor::{grad_check_many, Tape};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::constant(Array::new(vec![rows, cols], v.to_vec()).unwrap())
    }

    /// Direct triple-sum oracle for the unbiased estimator.
    fn mmd_oracle(x: &[Vec<f64>], y: &[Vec<f64>], bw: f64) -> f64 {
        let k = |a: &[f64], b: &[f64]| {
            let d2: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
            (-d2 / (2.0 * bw)).exp()
        };
        let n = x.len() as f64;
        let mut xx = 0.0;
        let mut yy = 0.0;
        let mut xy = 0.0;
        for i in 0..x.len() {
            for j in 0..x.len() {
                if i != j {
                    xx += k(&x[i], &x[j]);
                    yy += k(&y[i], &y[j]);
                }
                xy += k(&x[i], &y[j]);
            }
        }
        xx / (n * (n - 1.0)) + yy / (n * (n - 1.0)) - 2.0 * xy / (n * n)
    }

    fn to_rows(a: &Tensor) -> Vec<Vec<f64>> {
        a.data().chunks(a.shape()[1]).map(<[f64]>::to_vec).collect()
    }

    #[test]
    fn mmd_examples() {
        let a = t(2, 1, &[0.7, 0.7]);
        assert!(mmd_rbf(&a, &a, 1.0).unwrap().item().abs() < 1e-15);

        let x = t(2, 1, &[0.0, 2.0]);
        let v = mmd_rbf(&x, &x, 1.0).unwrap().item();
        assert!((v - ((-2f64).exp() - 1.0)).abs() < 1e-12);
        assert!((v - -0.864665).abs() < 1e-6);

        assert!(matches!(mmd_rbf(&t(1, 1, &[0.0]), &t(1, 1, &[0.0]), 1.0), Err(Error::Domain(_))));
        assert!(matches!(mmd_rbf(&x, &t(2, 2, &[0.0; 4]), 1.0), Err(Error::Dimension(_))));
    }

    proptest! {
        #[test]
        fn mmd_matches_oracle_and_is_symmetric(
            n in 2usize..=16, d in 1usize..=4, seed in 0u64..1000, bw in 0.05f64..3.0
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut draw = |r: usize, c: usize| {
                t(r, c, &(0..r * c).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>())
            };
            let x = draw(n, d);
            let y = draw(n, d);
            let v = mmd_rbf(&x, &y, bw).unwrap().item();
            prop_assert!((v - mmd_oracle(&to_rows(&x), &to_rows(&y), bw)).abs() <= 1e-12);
            prop_assert_eq!(v.to_bits(), mmd_rbf(&y, &x, bw).unwrap().item().to_bits());
        }
    }

    #[test]
    fn recon_examples() {
        let x = t(1, 2, &[0.0, 0.0]);
        assert_eq!(recon_mse(&x, &x).unwrap().item(), 0.0);
        assert_eq!(recon_mse(&x, &t(1, 2, &[1.0, 1.0])).unwrap().item(), 2.0);
        // per-sample squared norms 2 and 4 average to 3
        let a = t(2, 2, &[0.0; 4]);
        let b = t(2, 2, &[1.0, 1.0, 2.0f64.sqrt(), 2.0f64.sqrt()]);
        assert!((recon_mse(&a, &b).unwrap().item() - 3.0).abs() < 1e-15);
        assert!(matches!(recon_mse(&a, &x), Err(Error::Dimension(_))));
    }

    #[test]
    fn ce_examples() {
        let zc = Tensor::constant(one_hot(&[1], 3));
        let exact = ce_onehot(&zc, &t(1, 3, &[0.0, 1.0, 0.0])).unwrap().item();
        // bounded by -ln(1 + eps)
        assert!(exact.abs() <= 1.01e-12, "{exact}");

        let zc10 = Tensor::constant(one_hot(&[4, 7], 10));
        let uniform = t(2, 10, &[0.1; 20]);
        assert!((ce_onehot(&zc10, &uniform).unwrap().item() - 10f64.ln()).abs() < 1e-10);

        let capped = ce_onehot(&zc, &t(1, 3, &[1.0, 0.0, 0.0])).unwrap().item();
        assert!((capped - 27.631021).abs() < 1e-5 && capped.is_finite());

        assert!(matches!(ce_onehot(&zc, &t(1, 3, &[0.5, 0.6, 0.0])), Err(Error::Domain(_))));
        assert!(matches!(ce_onehot(&t(1, 3, &[1.0, 1.0, 0.0]), &t(1, 3, &[0.2, 0.3, 0.5])), Err(Error::Domain(_))));
    }

    #[test]
    fn zn_consistency_example_and_gradient() {
        let r = t(1, 2, &[0.1, 0.2]);
        assert_eq!(zn_consistency(&r, &r).unwrap().item(), 0.0);
        let v = zn_consistency(&r, &t(1, 2, &[0.0, 0.0])).unwrap().item();
        assert!((v - 0.05).abs() < 1e-15);

        let tape = Tape::new();
        let rec = tape.leaf(Array::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let g = zn_consistency(&r, &rec).unwrap().backward().unwrap();
        let g = g.get(&rec).unwrap().data().to_vec();
        // central differences
        let f = |a: f64, b: f64| (0.1 - a).powi(2) + (0.2 - b).powi(2);
        let h = 1e-6;
        let fd = [(f(h, 0.0) - f(-h, 0.0)) / (2.0 * h), (f(0.0, h) - f(0.0, -h)) / (2.0 * h)];
        assert!((g[0] - fd[0]).abs() < 1e-9 && (g[0] + 0.2).abs() < 1e-12);
        assert!((g[1] - fd[1]).abs() < 1e-9 && (g[1] + 0.4).abs() < 1e-12);
    }

    /// A 1-layer-free critic D(x) = x . w + b built from a zero hidden
    /// layer would not be linear, so linear critics are made with an
    /// identity-like hidden layer and positive inputs.
    fn linear_critic(tape: &Tape, w: &[f64]) -> BoundNet {
        let d = w.len();
        let spec = MlpSpec::discriminator(d, &[d]);
        let mut p = NetworkParams::zeros(spec).unwrap();
        p.tensors[0] = Array::eye(d);
        p.tensors[2] = Array::new(vec![d, 1], w.to_vec()).unwrap();
        p.bind(tape)
    }

    #[test]
    fn gradient_penalty_examples() {
        // inputs positive so the leaky activation is the identity
        let xr = t(3, 2, &[1.0, 2.0, 0.5, 0.3, 2.0, 1.0]);
        let xg = t(3, 2, &[0.2, 0.4, 1.5, 0.9, 0.1, 0.7]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);

        let tape = Tape::with_higher_order();
        let unit = linear_critic(&tape, &[0.6, 0.8]);
        let gp = gradient_penalty(&unit, &xr, &xg, &mut rng).unwrap().item();
        assert!(gp.abs() < 1e-20, "{gp}");

        let tape = Tape::with_higher_order();
        let double = linear_critic(&tape, &[2.0, 0.0]);
        let gp = gradient_penalty(&double, &xr, &xg, &mut rng).unwrap().item();
        assert!((gp - 1.0).abs() < 1e-12);

        let first = Tape::new();
        let critic = linear_critic(&first, &[1.0, 0.0]);
        assert!(matches!(gradient_penalty(&critic, &xr, &xg, &mut rng), Err(Error::Usage(_))));
    }

    #[test]
    fn critic_and_generator_losses_with_zero_critic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tape = Tape::with_higher_order();
        let d = NetworkParams::zeros(MlpSpec::discriminator(2, &[4])).unwrap().bind(&tape);
        let xr = t(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let xg = t(2, 2, &[0.0, 1.0, -1.0, 0.5]);
        let w = critic_loss(CriticMode::WassersteinGp, &d, &xr, &xg, 0.0, &mut rng).unwrap();
        assert_eq!(w.item(), 0.0);
        let v = critic_loss(CriticMode::Vanilla, &d, &xr, &xg, 10.0, &mut rng).unwrap();
        assert!((v.item() - 2.0 * 2f64.ln()).abs() < 1e-10);
        assert!((v.item() - 1.386294).abs() < 1e-6);
        assert_eq!(generator_adversarial(CriticMode::WassersteinGp, &d, &xg).unwrap().item(), 0.0);
        let gv = generator_adversarial(CriticMode::Vanilla, &d, &xg).unwrap().item();
        assert!((gv - 2f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn constant_critic_gives_no_generator_gradient() {
        let tape = Tape::new();
        let mut dp = NetworkParams::zeros(MlpSpec::discriminator(2, &[3])).unwrap();
        dp.tensors[3] = Array::from_vec(vec![1.5]);
        let d = dp.frozen();
        let gp = NetworkParams::init(MlpSpec::generator(3, &[4], 2, OutputActivation::Linear), 0.5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let g = gp.bind(&tape);
        let z = t(2, 3, &[1.0, 0.0, 0.1, 0.0, 1.0, -0.2]);
        let x_g = generator_forward(&g, &z).unwrap();
        let adv = generator_adversarial(CriticMode::WassersteinGp, &d, &x_g).unwrap();
        assert_eq!(adv.item(), -1.5);
        let grads = adv.backward().unwrap();
        for p in &g.tensors {
            assert!(grads.get_or_zeros(p).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn objective_ledger() {
        let s = Tensor::scalar;
        let terms = ObjectiveTerms {
            adv: Some(s(0.0)),
            ae: Some(s(0.0)),
            mmd: Some(s(0.3)),
            n: Some(s(0.2)),
            ce: Some(s(1.1)),
            c: Some(s(0.9)),
        };
        let mut zero = ObjectiveWeights::zero();
        assert_eq!(total_objective(&zero, &terms).unwrap().item(), 0.0);
        zero.adv = 1.0;
        zero.ae = 1.0;
        assert_eq!(total_objective(&zero, &terms).unwrap().item(), 0.0);

        let w = LossWeights::default();
        assert_eq!((w.beta1, w.beta2, w.beta3, w.beta4, w.lambda_gp), (1.0, 1.0, 10.0, 10.0, 10.0));
        let c = LossWeights::cifar();
        assert_eq!((c.beta3, c.beta4), (1.0, 1.0));

        let full = ObjectiveWeights::new(&w, &[]);
        let total = total_objective(&full, &terms).unwrap().item();
        assert!((total - (0.3 + 0.2 + 11.0 + 9.0)).abs() < 1e-12);

        let no_mmd = ObjectiveWeights::new(&w, &[Ablation::Mmd]);
        assert_eq!(no_mmd.mmd, 0.0);
        assert_eq!((no_mmd.n, no_mmd.ce, no_mmd.c, no_mmd.ae), (full.n, full.ce, full.c, full.ae));
        let expected = s(0.0).add(&s(0.0)).unwrap().add(&s(0.2)).unwrap()
            .add(&s(11.0)).unwrap().add(&s(9.0)).unwrap();
        assert_eq!(total_objective(&no_mmd, &terms).unwrap().item(), expected.item());
    }

    #[test]
    fn weight_validation() {
        let mut w = LossWeights::default();
        assert!(w.validate().is_ok());
        w.beta2 = -1.0;
        assert!(matches!(w.validate(), Err(Error::Config(_))));
        assert!("bogus".parse::<Ablation>().is_err());
        assert_eq!("MMD".parse::<Ablation>().unwrap(), Ablation::Mmd);
    }

    fn toy_nets(seed: u64, std: f64) -> (NetworkParams, NetworkParams, NetworkParams) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let g = NetworkParams::init(MlpSpec::generator(4, &[8, 8], 4, OutputActivation::Linear), std, &mut r).unwrap();
        let e = NetworkParams::init(MlpSpec::encoder(4, &[8, 8], 2, 2), std, &mut r).unwrap();
        let d = NetworkParams::init(MlpSpec::discriminator(4, &[8, 8]), std, &mut r).unwrap();
        (g, e, d)
    }

    #[test]
    fn clustergan_mode_examples() {
        let (g, e, d) = toy_nets(2, 0.3);
        let prior = sample_prior(6, 2, 2, 0.1, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let w = LossWeights { lambda_n: 0.0, lambda_c: 0.0, ..LossWeights::default() };
        let l = clustergan_objective(&w, CriticMode::WassersteinGp, &d.frozen(), &g.frozen(), &e.frozen(), &prior).unwrap();
        assert_eq!(l.generator.item(), l.adv.item());
        assert_eq!(l.encoder.item(), 0.0);

        let both = clustergan_objective(&LossWeights::default(), CriticMode::WassersteinGp, &d.frozen(), &g.frozen(), &e.frozen(), &prior).unwrap();
        let expected = both.adv.item() + 10.0 * both.zn_recovery.item() + 10.0 * both.ce.item();
        assert!((both.generator.item() - expected).abs() < 1e-12);
        // a perfect cycle recovers zn exactly
        assert_eq!(zn_consistency(&Tensor::constant(prior.zn.clone()), &Tensor::constant(prior.zn.clone())).unwrap().item(), 0.0);
    }

    /// Finite-difference check of the full weighted objective with respect
    /// to every generator and encoder parameter.
    #[test]
    fn full_objective_gradient_matches_finite_differences() {
        let (g, e, d) = toy_nets(7, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let prior = sample_prior(8, 2, 2, 0.1, &mut rng).unwrap();
        let x_r = Tensor::constant(Array::new(vec![8, 4], (0..32).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap());
        let weights = ObjectiveWeights::new(&LossWeights::default(), &[]);
        let bw = default_bandwidth(2, 0.1);
        let ng = g.tensors.len();
        let mut all = g.tensors.clone();
        all.extend(e.tensors.iter().cloned());
        let err = grad_check_many(
            |ts| {
                let gb = BoundNet { spec: g.spec.clone(), tensors: ts[..ng].to_vec() };
                let eb = BoundNet { spec: e.spec.clone(), tensors: ts[ng..].to_vec() };
                let f = dls_forward(CriticMode::WassersteinGp, &gb, &eb, &d.frozen(), &x_r, &prior, bw)?;
                total_objective(&weights, &f.terms)
            },
            &all,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-5, "{err}");
    }
}
