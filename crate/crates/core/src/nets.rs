//! The three MLPs: generator, encoder and discriminator.
//!
//! Parameters live in plain [`Array`]s owned by [`NetworkParams`]. A forward
//! pass binds them to a tape (as trainable leaves) or uses them as
//! constants; one binding is reused for every call within a step so that
//! all generator and encoder applications share weights.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Array, Tape, Tensor};

/// Negative-side slope of every hidden activation.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Default weight initialization std.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    /// For data scaled to `[-1, 1]`.
    Tanh,
    /// For standardized data.
    #[default]
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Head {
    Generator {
        data_dim: usize,
        activation: OutputActivation,
    },
    /// Softmax over `clusters` logits plus a linear continuous code.
    Encoder { clusters: usize, latent: usize },
    /// A single unbounded score.
    Discriminator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub head: Head,
}

impl MlpSpec {
    pub fn generator(latent_width: usize, hidden: &[usize], data_dim: usize, activation: OutputActivation) -> Self {
        MlpSpec {
            input_dim: latent_width,
            hidden: hidden.to_vec(),
            head: Head::Generator {
                data_dim,
                activation,
            },
        }
    }

    pub fn encoder(data_dim: usize, hidden: &[usize], clusters: usize, latent: usize) -> Self {
        MlpSpec {
            input_dim: data_dim,
            hidden: hidden.to_vec(),
            head: Head::Encoder { clusters, latent },
        }
    }

    pub fn discriminator(data_dim: usize, hidden: &[usize]) -> Self {
        MlpSpec {
            input_dim: data_dim,
            hidden: hidden.to_vec(),
            head: Head::Discriminator,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let head_ok = match self.head {
            Head::Generator { data_dim, .. } => data_dim > 0,
            Head::Encoder { clusters, latent } => clusters > 0 && latent > 0,
            Head::Discriminator => true,
        };
        if self.input_dim == 0 || self.hidden.contains(&0) || !head_ok {
            return Err(Error::Config(format!("invalid network layout {self:?}")));
        }
        Ok(())
    }

    /// `(name, shape)` of every parameter tensor in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut width = self.input_dim;
        for (i, &h) in self.hidden.iter().enumerate() {
            out.push((format!("hidden{i}.weight"), vec![width, h]));
            out.push((format!("hidden{i}.bias"), vec![h]));
            width = h;
        }
        match self.head {
            Head::Generator { data_dim, .. } => {
                out.push(("out.weight".into(), vec![width, data_dim]));
                out.push(("out.bias".into(), vec![data_dim]));
            }
            Head::Encoder { clusters, latent } => {
                out.push(("cluster.weight".into(), vec![width, clusters]));
                out.push(("cluster.bias".into(), vec![clusters]));
                out.push(("continuous.weight".into(), vec![width, latent]));
                out.push(("continuous.bias".into(), vec![latent]));
            }
            Head::Discriminator => {
                out.push(("out.weight".into(), vec![width, 1]));
                out.push(("out.bias".into(), vec![1]));
            }
        }
        out
    }
}

/// Named weights and biases of one MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub spec: MlpSpec,
    pub names: Vec<String>,
    pub tensors: Vec<Array>,
}

impl NetworkParams {
    /// Weights drawn from `N(0, std^2)`, biases zero.
    pub fn init<R: Rng + ?Sized>(spec: MlpSpec, std: f64, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        if !(std > 0.0 && std.is_finite()) {
            return Err(Error::Config(format!("init std must be positive, got {std}")));
        }
        let normal = Normal::new(0.0, std).expect("validated std");
        let (names, tensors) = spec
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if name.ends_with("weight") {
                    (0..n).map(|_| normal.sample(rng)).collect()
                } else {
                    vec![0.0; n]
                };
                (name, Array::new(shape, data).expect("layout shape"))
            })
            .unzip();
        Ok(NetworkParams {
            spec,
            names,
            tensors,
        })
    }

    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let (names, tensors) = spec
            .layout()
            .into_iter()
            .map(|(name, shape)| (name, Array::zeros(&shape)))
            .unzip();
        Ok(NetworkParams {
            spec,
            names,
            tensors,
        })
    }

    /// Rebuilds parameters from stored tensors, checking them against the
    /// layout of `spec`.
    pub fn from_parts(spec: MlpSpec, tensors: Vec<Array>) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout();
        if layout.len() != tensors.len()
            || layout
                .iter()
                .zip(&tensors)
                .any(|((_, s), t)| s.as_slice() != t.shape())
        {
            return Err(Error::dim("parameter tensors do not match the network layout"));
        }
        Ok(NetworkParams {
            names: layout.into_iter().map(|(n, _)| n).collect(),
            spec,
            tensors,
        })
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Array::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Array::is_finite)
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    /// Parameters as trainable leaves on `tape`.
    pub fn bind(&self, tape: &Tape) -> BoundNet {
        BoundNet {
            spec: self.spec.clone(),
            tensors: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }

    /// Parameters as constants (frozen network).
    pub fn frozen(&self) -> BoundNet {
        BoundNet {
            spec: self.spec.clone(),
            tensors: self.tensors.iter().cloned().map(Tensor::constant).collect(),
        }
    }
}

/// Parameters bound for one forward/backward step.
#[derive(Clone)]
pub struct BoundNet {
    pub spec: MlpSpec,
    pub tensors: Vec<Tensor>,
}

impl BoundNet {
    fn trunk(&self, x: &Tensor) -> Result<Tensor> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.spec.input_dim {
            return Err(Error::dim(format!(
                "network expects rows of width {}, got shape {shape:?}",
                self.spec.input_dim
            )));
        }
        let mut h = x.clone();
        for i in 0..self.spec.hidden.len() {
            h = affine(&h, &self.tensors[2 * i], &self.tensors[2 * i + 1])?.leaky_relu(LEAKY_SLOPE);
        }
        Ok(h)
    }

    fn head_params(&self) -> &[Tensor] {
        &self.tensors[2 * self.spec.hidden.len()..]
    }
}

fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    x.matmul(w)?.add(b)
}

/// `G(z)`: latent codes `B x (K + d_n)` to data rows.
pub fn generator_forward(net: &BoundNet, z: &Tensor) -> Result<Tensor> {
    let Head::Generator { activation, .. } = net.spec.head else {
        return Err(Error::Usage("generator_forward on a non-generator network".into()));
    };
    let h = net.trunk(z)?;
    let p = net.head_params();
    let out = affine(&h, &p[0], &p[1])?;
    Ok(match activation {
        OutputActivation::Tanh => out.tanh(),
        OutputActivation::Linear => out,
    })
}

/// Output of the encoder's two heads.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// Softmax cluster probabilities, `B x K`.
    pub zc_prob: Tensor,
    /// Continuous code, `B x d_n`.
    pub zn: Tensor,
}

/// `E(x)`: data rows to cluster probabilities and continuous codes.
pub fn encoder_forward(net: &BoundNet, x: &Tensor) -> Result<Encoded> {
    if !matches!(net.spec.head, Head::Encoder { .. }) {
        return Err(Error::Usage("encoder_forward on a non-encoder network".into()));
    }
    let h = net.trunk(x)?;
    let p = net.head_params();
    let zc_prob = affine(&h, &p[0], &p[1])?.softmax()?;
    let zn = affine(&h, &p[2], &p[3])?;
    Ok(Encoded { zc_prob, zn })
}

/// `D(x)`: an unbounded critic score per row, `B x 1`.
pub fn discriminator_forward(net: &BoundNet, x: &Tensor) -> Result<Tensor> {
    if net.spec.head != Head::Discriminator {
        return Err(Error::Usage(
            "discriminator_forward on a non-discriminator network".into(),
        ));
    }
    let h = net.trunk(x)?;
    let p = net.head_params();
    affine(&h, &p[0], &p[1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_many;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn input(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut r = rng(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        Tensor::constant(Array::new(vec![rows, cols], (0..rows * cols).map(|_| n.sample(&mut r)).collect()).unwrap())
    }

    #[test]
    fn init_statistics_and_determinism() {
        let spec = MlpSpec::discriminator(16, &[256]);
        let p = NetworkParams::init(spec.clone(), 0.02, &mut rng(3)).unwrap();
        let w = p.get("hidden0.weight").unwrap();
        assert_eq!(w.shape(), &[16, 256]);
        let n = w.len() as f64;
        let mean = w.data().iter().sum::<f64>() / n;
        let sd = (w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((sd - 0.02).abs() <= 0.002, "{sd}");
        assert!(p.get("hidden0.bias").unwrap().data().iter().all(|&b| b == 0.0));
        assert!(p.get("out.bias").unwrap().data().iter().all(|&b| b == 0.0));
        assert_eq!(p, NetworkParams::init(spec, 0.02, &mut rng(3)).unwrap());
    }

    #[test]
    fn init_rejects_bad_std() {
        let spec = MlpSpec::discriminator(2, &[4]);
        assert!(NetworkParams::init(spec, 0.0, &mut rng(0)).is_err());
    }

    #[test]
    fn discriminator_wiring_count() {
        let p = NetworkParams::zeros(MlpSpec::discriminator(16, &[256, 256])).unwrap();
        assert_eq!(p.param_count(), 16 * 256 + 256 + 256 * 256 + 256 + 256 + 1);
        assert_eq!(p.param_count(), 70_401);
        let score = discriminator_forward(&p.frozen(), &input(3, 16, 1)).unwrap();
        assert_eq!(score.shape(), &[3, 1]);
        assert!(score.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn generator_shapes_and_range() {
        let zero = NetworkParams::zeros(MlpSpec::generator(15, &[256, 256], 16, OutputActivation::Tanh)).unwrap();
        let out = generator_forward(&zero.frozen(), &input(4, 15, 2)).unwrap();
        assert_eq!(out.shape(), &[4, 16]);
        assert!(out.data().iter().all(|&v| v == 0.0));

        let p = NetworkParams::init(MlpSpec::generator(15, &[32], 16, OutputActivation::Tanh), 0.3, &mut rng(5)).unwrap();
        let out = generator_forward(&p.frozen(), &input(8, 15, 3)).unwrap();
        assert!(out.data().iter().all(|v| v.abs() < 1.0));

        assert!(matches!(
            generator_forward(&p.frozen(), &input(2, 14, 3)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn encoder_heads() {
        let p = NetworkParams::init(MlpSpec::encoder(720, &[64], 8, 30), 0.02, &mut rng(1)).unwrap();
        let e = encoder_forward(&p.frozen(), &input(3, 720, 4)).unwrap();
        assert_eq!(e.zc_prob.shape(), &[3, 8]);
        assert_eq!(e.zn.shape(), &[3, 30]);
        for row in e.zc_prob.data().chunks(8) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        let zero = NetworkParams::zeros(MlpSpec::encoder(4, &[8], 10, 2)).unwrap();
        let e = encoder_forward(&zero.frozen(), &input(2, 4, 5)).unwrap();
        assert!(e.zc_prob.data().iter().all(|&v| (v - 0.1).abs() < 1e-15));
    }

    #[test]
    fn argmax_invariant_to_logit_shift() {
        let mut p = NetworkParams::init(MlpSpec::encoder(3, &[6], 4, 1), 0.5, &mut rng(9)).unwrap();
        let x = input(10, 3, 6);
        let before = encoder_forward(&p.frozen(), &x).unwrap().zc_prob;
        // a constant added to every logit
        let idx = p.names.iter().position(|n| n == "cluster.bias").unwrap();
        for v in p.tensors[idx].data_mut() {
            *v += 3.7;
        }
        let after = encoder_forward(&p.frozen(), &x).unwrap().zc_prob;
        let argmax = |t: &Tensor| -> Vec<usize> {
            t.data()
                .chunks(4)
                .map(|r| (0..4).fold(0, |b, j| if r[j] > r[b] { j } else { b }))
                .collect()
        };
        assert_eq!(argmax(&before), argmax(&after));
    }

    #[test]
    fn wrong_head_is_usage_error() {
        let d = NetworkParams::zeros(MlpSpec::discriminator(2, &[3])).unwrap();
        assert!(matches!(encoder_forward(&d.frozen(), &input(1, 2, 0)), Err(Error::Usage(_))));
    }

    /// Each head is differentiable end to end with respect to all its
    /// parameters.
    #[test]
    fn heads_pass_grad_check() {
        let x = input(5, 3, 7);
        let z = input(5, 4, 8);
        let nets = [
            NetworkParams::init(MlpSpec::generator(4, &[6, 5], 3, OutputActivation::Tanh), 0.6, &mut rng(10)).unwrap(),
            NetworkParams::init(MlpSpec::encoder(3, &[6, 5], 3, 2), 0.6, &mut rng(11)).unwrap(),
            NetworkParams::init(MlpSpec::discriminator(3, &[6, 5]), 0.6, &mut rng(12)).unwrap(),
        ];
        for p in nets {
            let spec = p.spec.clone();
            let err = grad_check_many(
                |ts| {
                    let net = BoundNet { spec: spec.clone(), tensors: ts.to_vec() };
                    match spec.head {
                        Head::Generator { .. } => generator_forward(&net, &z)?.sum(None),
                        Head::Encoder { .. } => {
                            let e = encoder_forward(&net, &x)?;
                            let w = Tensor::constant(Array::new(vec![3], vec![1.0, -2.0, 0.5])?);
                            e.zc_prob.mul(&w)?.sum(None)?.add(&e.zn.sum(None)?)
                        }
                        Head::Discriminator => discriminator_forward(&net, &x)?.sum(None),
                    }
                },
                &p.tensors,
                1e-6,
            )
            .unwrap();
            assert!(err <= 1e-5, "{:?}: {err}", p.spec.head);
        }
    }
}
