//! Forward-pass context and the small parameterized layers shared by the models.

use crate::error::Result;
use crate::graph::{Graph, Mode, Var};
use crate::param::{init, ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Everything one forward pass needs: the graph under construction, the
/// parameters it reads, the mode, and the dropout stream.
pub struct Forward<'a, T: Scalar> {
    pub graph: Graph<T>,
    pub store: &'a ParamStore<T>,
    pub mode: Mode,
    pub rng: Rng,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(store: &'a ParamStore<T>, mode: Mode, rng: Rng) -> Self {
        Self { graph: Graph::new(), store, mode, rng }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.graph.param(self.store, id)
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        self.graph.dropout(x, p, self.mode, &mut self.rng)
    }
}

/// `y = x W + b`
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Weights `Uniform(+-1/sqrt(fan_in))`, bias zero.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let w = store.add(format!("{prefix}.w"), init::fan_in_uniform(&[fan_in, fan_out], fan_in, rng))?;
        let b = store.add(format!("{prefix}.b"), Tensor::zeros(&[fan_out]))?;
        Ok(Self { w, b, fan_in, fan_out })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (cx.param(self.w), cx.param(self.b));
        cx.graph.affine(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, gain_name: &str, bias_name: &str, dim: usize) -> Result<Self> {
        let gain = store.add(gain_name, Tensor::full(&[dim], T::one()))?;
        let bias = store.add(bias_name, Tensor::zeros(&[dim]))?;
        Ok(Self { gain, bias })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (cx.param(self.gain), cx.param(self.bias));
        cx.graph.layer_norm(x, g, b)
    }
}

/// Single-layer LSTM cell. Gate blocks are ordered input, forget, cell, output
/// along the columns of one `[(d_in + hidden) x 4 hidden]` weight.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub gates: Linear,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_in: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let fan_in = d_in + hidden;
        let w = store.add(
            format!("{prefix}.w"),
            init::fan_in_uniform(&[fan_in, 4 * hidden], hidden, rng),
        )?;
        let mut bias = vec![T::zero(); 4 * hidden];
        bias[hidden..2 * hidden].iter_mut().for_each(|b| *b = T::one());
        let b = store.add(format!("{prefix}.b"), Tensor::new(&[4 * hidden], bias)?)?;
        Ok(Self { gates: Linear { w, b, fan_in, fan_out: 4 * hidden }, hidden })
    }

    /// One step; returns `(h', c')`.
    pub fn step<T: Scalar>(&self, cx: &mut Forward<'_, T>, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let n = self.hidden;
        let xh = cx.graph.concat_cols(&[x, h])?;
        let z = self.gates.forward(cx, xh)?;
        let g = &mut cx.graph;
        let i = g.slice_cols(z, 0, n)?;
        let i = g.sigmoid(i);
        let f = g.slice_cols(z, n, n)?;
        let f = g.sigmoid(f);
        let u = g.slice_cols(z, 2 * n, n)?;
        let u = g.tanh(u);
        let o = g.slice_cols(z, 3 * n, n)?;
        let o = g.sigmoid(o);
        let fc = g.mul(f, c)?;
        let iu = g.mul(i, u)?;
        let c_next = g.add(fc, iu)?;
        let tc = g.tanh(c_next);
        let h_next = g.mul(o, tc)?;
        Ok((h_next, c_next))
    }
}
