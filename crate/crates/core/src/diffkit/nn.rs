//! Perceptron building blocks composed from the tape's closed op set.

use rand::Rng;

use super::params::{Graph, ParamId, ParamStore};
use super::tape::{matmul_values, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Affine map `x·W + b` with `W: [in × out]`, `b: [1 × out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform `±1/√fan_in` initialisation for weight and bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut uniform =
            |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
        let w = Tensor::new(vec![in_dim, out_dim], uniform(in_dim * out_dim)).expect("shape");
        let weight = store.register(format!("{name}.weight"), w);
        let bias = bias.then(|| {
            let b = Tensor::new(vec![1, out_dim], uniform(out_dim)).expect("shape");
            store.register(format!("{name}.bias"), b)
        });
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    /// Tape-free forward pass over a `[m × in]` batch.
    pub fn infer(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut y = matmul_values(x, store.get(self.weight))?;
        if let Some(b) = self.bias {
            let b = store.get(b).data();
            for row in y.data_mut().chunks_mut(self.out_dim) {
                row.iter_mut().zip(b).for_each(|(v, bi)| *v += bi);
            }
        }
        Ok(y)
    }
}

/// Stack of [`Linear`] layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        rng: &mut R,
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output dims");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect();
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h)?;
            if i + 1 < self.layers.len() {
                h = g.tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Tape-free forward pass, identical in value to [`Mlp::forward`].
    pub fn infer(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.infer(store, &h)?;
            if i + 1 < self.layers.len() {
                h.data_mut().iter_mut().for_each(|v| {
                    if *v < 0.0 {
                        *v = 0.0
                    }
                });
            }
        }
        Ok(h)
    }
}
