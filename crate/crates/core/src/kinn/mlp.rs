//! Fully connected network carrying a forward tangent along its first input.
//!
//! [`Mlp::forward_tangent`] returns the outputs and their derivative with
//! respect to input 0; [`Mlp::backward`] back-propagates adjoints of both, so
//! losses on `∂N/∂x₀` are differentiated exactly (second derivatives of the
//! activations enter through the tangent path).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Swish,
    Softplus,
    Identity,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    /// Value, first and second derivative.
    #[inline]
    pub fn eval(self, x: f64) -> (f64, f64, f64) {
        match self {
            Activation::Swish => {
                let s = sigmoid(x);
                let ds = s * (1.0 - s);
                (x * s, s + x * ds, ds * (2.0 + x * (1.0 - 2.0 * s)))
            }
            Activation::Softplus => {
                let s = sigmoid(x);
                (x.max(0.0) + (-x.abs()).exp().ln_1p(), s, s * (1.0 - s))
            }
            Activation::Identity => (x, 1.0, 0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    hidden: Activation,
    output: Activation,
}

/// Per-layer intermediates of one forward pass, reused across samples.
#[derive(Debug, Clone)]
pub struct Tape {
    z: Vec<Vec<f64>>,
    zd: Vec<Vec<f64>>,
    a: Vec<Vec<f64>>,
    ad: Vec<Vec<f64>>,
    zbar: Vec<f64>,
    zdbar: Vec<f64>,
    abar: Vec<f64>,
    adbar: Vec<f64>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.a.last().expect("at least one layer")
    }

    /// Derivative of the outputs with respect to input 0.
    pub fn output_tangent(&self) -> &[f64] {
        self.ad.last().expect("at least one layer")
    }
}

impl Mlp {
    pub fn new(sizes: Vec<usize>, hidden: Activation, output: Activation) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidInput(format!("invalid layer sizes {sizes:?}")));
        }
        Ok(Mlp { sizes, hidden, output })
    }

    /// Swish hidden layers and softplus outputs.
    pub fn kinn(sizes: Vec<usize>) -> Result<Self> {
        Mlp::new(sizes, Activation::Swish, Activation::Softplus)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn n_inputs(&self) -> usize {
        self.sizes[0]
    }

    pub fn n_outputs(&self) -> usize {
        *self.sizes.last().expect("validated")
    }

    pub fn n_params(&self) -> usize {
        self.sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.n_layers() {
            self.output
        } else {
            self.hidden
        }
    }

    /// Offset of layer `l`'s weight block; weights are row-major (out × in),
    /// followed by `out` biases.
    fn offset(&self, l: usize) -> usize {
        self.sizes[..=l].windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    pub fn tape(&self) -> Tape {
        let width = *self.sizes.iter().max().expect("nonempty");
        Tape {
            z: self.sizes.iter().map(|&n| vec![0.0; n]).collect(),
            zd: self.sizes.iter().map(|&n| vec![0.0; n]).collect(),
            a: self.sizes.iter().map(|&n| vec![0.0; n]).collect(),
            ad: self.sizes.iter().map(|&n| vec![0.0; n]).collect(),
            zbar: vec![0.0; width],
            zdbar: vec![0.0; width],
            abar: vec![0.0; width],
            adbar: vec![0.0; width],
        }
    }

    fn check(&self, params: &[f64], x: &[f64]) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(Error::Dimension(format!("{} parameters for a network needing {}", params.len(), self.n_params())));
        }
        if x.len() != self.n_inputs() {
            return Err(Error::Dimension(format!("{} features for {} inputs", x.len(), self.n_inputs())));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numerical("non-finite network weight".into()));
        }
        Ok(())
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        let mut tape = self.tape();
        self.forward_tangent(params, x, &mut tape)?;
        Ok(tape.output().to_vec())
    }

    pub fn forward_tangent(&self, params: &[f64], x: &[f64], tape: &mut Tape) -> Result<()> {
        self.check(params, x)?;
        self.forward_unchecked(params, x, tape);
        Ok(())
    }

    pub(crate) fn forward_unchecked(&self, params: &[f64], x: &[f64], tape: &mut Tape) {
        tape.a[0].copy_from_slice(x);
        tape.ad[0].fill(0.0);
        tape.ad[0][0] = 1.0;
        for l in 0..self.n_layers() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &params[self.offset(l)..];
            let b = &w[n_in * n_out..];
            let act = self.activation(l);
            let (prev, next) = tape.a.split_at_mut(l + 1);
            let (prevd, nextd) = tape.ad.split_at_mut(l + 1);
            let (a_in, ad_in) = (&prev[l], &prevd[l]);
            for o in 0..n_out {
                let row = &w[o * n_in..(o + 1) * n_in];
                let mut z = b[o];
                let mut zd = 0.0;
                for i in 0..n_in {
                    z += row[i] * a_in[i];
                    zd += row[i] * ad_in[i];
                }
                let (f, d1, _) = act.eval(z);
                tape.z[l + 1][o] = z;
                tape.zd[l + 1][o] = zd;
                next[0][o] = f;
                nextd[0][o] = d1 * zd;
            }
        }
    }

    /// Accumulate into `grad` the parameter gradient of a loss whose adjoints
    /// with respect to the outputs and output tangents are `ybar`, `ydbar`.
    /// Uses the intermediates left in `tape` by the last forward pass.
    pub fn backward(&self, params: &[f64], tape: &mut Tape, ybar: &[f64], ydbar: &[f64], grad: &mut [f64]) {
        let top = self.n_layers();
        let act = self.activation(top - 1);
        for o in 0..self.sizes[top] {
            let (_, d1, d2) = act.eval(tape.z[top][o]);
            tape.zbar[o] = ybar[o] * d1 + ydbar[o] * d2 * tape.zd[top][o];
            tape.zdbar[o] = ydbar[o] * d1;
        }
        for l in (0..top).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = self.offset(l);
            let w = &params[off..off + n_in * n_out];
            {
                let g = &mut grad[off..off + (n_in + 1) * n_out];
                for o in 0..n_out {
                    let (zb, zdb) = (tape.zbar[o], tape.zdbar[o]);
                    let row = &mut g[o * n_in..(o + 1) * n_in];
                    for i in 0..n_in {
                        row[i] += zb * tape.a[l][i] + zdb * tape.ad[l][i];
                    }
                }
                let gb = &mut g[n_in * n_out..];
                for o in 0..n_out {
                    gb[o] += tape.zbar[o];
                }
            }
            if l == 0 {
                break;
            }
            for i in 0..n_in {
                let mut ab = 0.0;
                let mut adb = 0.0;
                for o in 0..n_out {
                    ab += w[o * n_in + i] * tape.zbar[o];
                    adb += w[o * n_in + i] * tape.zdbar[o];
                }
                tape.abar[i] = ab;
                tape.adbar[i] = adb;
            }
            let act = self.activation(l - 1);
            for i in 0..n_in {
                let (_, d1, d2) = act.eval(tape.z[l][i]);
                tape.zbar[i] = tape.abar[i] * d1 + tape.adbar[i] * d2 * tape.zd[l][i];
                tape.zdbar[i] = tape.adbar[i] * d1;
            }
        }
    }
}
