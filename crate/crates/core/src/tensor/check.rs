//! Central-difference gradient checking.

use super::{Array, Tape, Tensor};
use crate::error::Result;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Largest relative error between the tape gradient of `f` at `x` and a
/// central difference with step `h`, over every coordinate of `x`.
pub fn grad_check<F>(f: F, x: &Array, h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    grad_check_many(|xs| f(&xs[0]), std::slice::from_ref(x), h)
}

/// [`grad_check`] over several inputs at once.
pub fn grad_check_many<F>(f: F, xs: &[Array], h: f64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let tape = Tape::new();
    let leaves: Vec<Tensor> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&leaves)?;
    let grads = out.backward()?;

    let eval = |probe: &[Array]| -> Result<f64> {
        let consts: Vec<Tensor> = probe.iter().cloned().map(Tensor::constant).collect();
        Ok(f(&consts)?.item())
    };

    let mut probe: Vec<Array> = xs.to_vec();
    let mut worst = 0.0f64;
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get_or_zeros(leaf);
        for i in 0..xs[k].len() {
            let orig = xs[k].data()[i];
            probe[k].data_mut()[i] = orig + h;
            let plus = eval(&probe)?;
            probe[k].data_mut()[i] = orig - h;
            let minus = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}
