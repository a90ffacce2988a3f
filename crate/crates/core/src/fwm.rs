//! Fast weight memory host: an LSTM controller writing role/filler bindings
//! into an order-3 fast-weight tensor and reading them back by unbinding.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::d3::{ComponentTrace, D3Config, D3Layer};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{Forward, LayerNorm, Linear, Lstm};
use crate::param::ParamStore;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Guard used when projecting roles and unbinding operators to unit length.
pub const ROLE_NORM_EPS: f64 = 1e-12;

/// Where the TPR components come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "fwm-baseline")]
    Baseline,
    #[serde(rename = "fwm-d3-wF")]
    D3WithFiller,
    #[serde(rename = "fwm-d3-woF")]
    D3WithoutFiller,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Baseline, Variant::D3WithFiller, Variant::D3WithoutFiller];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "fwm-baseline",
            Variant::D3WithFiller => "fwm-d3-wF",
            Variant::D3WithoutFiller => "fwm-d3-woF",
        }
    }

    pub fn uses_d3(self) -> bool {
        self != Variant::Baseline
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown variant {s:?}")))
    }
}

/// What the output layer sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadInput {
    HiddenAndRead,
    Read,
}

/// How the fast-weight tensor is held during a forward pass. Both forms
/// compute the same function; `Factored` keeps the write history instead of
/// the `d^3` tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MemoryForm {
    Dense,
    Factored,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FwmConfig {
    pub d_input: usize,
    pub d_lstm: usize,
    pub d_fwm: usize,
    pub n_reads: usize,
    pub n_classes: usize,
    pub head: HeadInput,
    pub normalize_roles: bool,
    pub memory: MemoryForm,
}

impl Default for FwmConfig {
    fn default() -> Self {
        Self {
            d_input: 102,
            d_lstm: 256,
            d_fwm: 32,
            n_reads: 1,
            n_classes: 40,
            head: HeadInput::Read,
            normalize_roles: true,
            memory: MemoryForm::Factored,
        }
    }
}

impl FwmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_reads != 1 {
            return Err(Error::config("only N_reads=1 is supported"));
        }
        if self.d_fwm < 2 {
            return Err(Error::config("D_FWM must be at least 2"));
        }
        if self.d_input == 0 || self.d_lstm == 0 || self.n_classes == 0 {
            return Err(Error::config("D_input, D_LSTM and C must be positive"));
        }
        Ok(())
    }

    pub fn n_component_enc(&self) -> usize {
        3
    }

    pub fn n_component_dec(&self) -> usize {
        1 + self.n_reads
    }
}

/// The five TPR components and the write strength for one step, each
/// `[batch x d_fwm]` (`beta` is `[batch x 1]`).
#[derive(Clone, Debug)]
pub struct Components {
    pub role1: Var,
    pub role2: Var,
    pub filler: Var,
    pub unbind1: Var,
    pub unbind2: Var,
    pub beta: Var,
    pub traces: Vec<ComponentTrace>,
}

/// Fast-weight memory inside one forward pass.
#[derive(Clone, Debug)]
pub enum Memory {
    Dense(Var),
    Factored(Vec<[Var; 3]>),
}

impl Memory {
    pub fn contract<T: Scalar>(&self, cx: &mut Forward<'_, T>, a: Var, b: Var) -> Result<Var> {
        match self {
            Memory::Dense(f) => cx.graph.contract3(*f, a, b),
            Memory::Factored(terms) => cx.graph.factored_contract(terms, a, b),
        }
    }

    /// `F += u (x) a (x) b`
    pub fn write<T: Scalar>(&mut self, cx: &mut Forward<'_, T>, u: Var, a: Var, b: Var) -> Result<()> {
        match self {
            Memory::Dense(f) => {
                let delta = cx.graph.outer3(u, a, b)?;
                *f = cx.graph.add(*f, delta)?;
            }
            Memory::Factored(terms) => terms.push([u, a, b]),
        }
        Ok(())
    }

    /// The memory as a `[batch, d, d, d]` tensor.
    pub fn materialize<T: Scalar>(&self, cx: &Forward<'_, T>, batch: usize, d: usize) -> Tensor<T> {
        match self {
            Memory::Dense(f) => cx.graph.value(*f).clone(),
            Memory::Factored(terms) => {
                let mut out = vec![T::zero(); batch * d * d * d];
                for &[u, a, b] in terms {
                    let (ud, ad, bd) = (cx.graph.data(u), cx.graph.data(a), cx.graph.data(b));
                    for n in 0..batch {
                        let block = &mut out[n * d * d * d..(n + 1) * d * d * d];
                        for i in 0..d {
                            for j in 0..d {
                                for k in 0..d {
                                    block[(i * d + j) * d + k] =
                                        block[(i * d + j) * d + k] + ud[n * d + i] * ad[n * d + j] * bd[n * d + k];
                                }
                            }
                        }
                    }
                }
                Tensor::new(&[batch, d, d, d], out).expect("shape matches data")
            }
        }
    }
}

/// Recurrent state for a batch of episodes advancing in lockstep.
#[derive(Clone, Debug)]
pub struct FwmState {
    pub h: Var,
    pub c: Var,
    pub memory: Memory,
    pub timestep: usize,
}

/// Everything produced by one step besides the new state.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub logits: Var,
    pub read: Var,
    pub components: Components,
}

#[derive(Clone, Debug)]
pub struct FwmModel {
    config: FwmConfig,
    variant: Variant,
    lstm: Lstm,
    baseline: Option<Linear>,
    beta: Linear,
    d3: Option<D3Layer>,
    read_norm: LayerNorm,
    out: Linear,
}

impl FwmModel {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        config: FwmConfig,
        variant: Variant,
        d3_config: &D3Config,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_fwm;
        let lstm = Lstm::new(store, "fwm.lstm", config.d_input, config.d_lstm, rng)?;
        let beta = Linear::new(store, "fwm.beta", config.d_lstm, 1, rng)?;
        let (baseline, d3) = match variant {
            Variant::Baseline => (Some(Linear::new(store, "gen.baseline", config.d_lstm, 5 * d, rng)?), None),
            Variant::D3WithoutFiller | Variant::D3WithFiller => {
                if d3_config.d_component != d {
                    return Err(Error::config(format!(
                        "D_component={} must equal D_FWM={d}",
                        d3_config.d_component
                    )));
                }
                let with_filler = variant == Variant::D3WithFiller;
                let groups = if with_filler { vec![0, 1, 2, 0, 1] } else { vec![0, 1, 0, 1] };
                let layer = D3Layer::new(store, d3_config.clone(), config.d_lstm, groups, rng)?;
                let baseline = if with_filler {
                    None
                } else {
                    Some(Linear::new(store, "gen.baseline", config.d_lstm, d, rng)?)
                };
                (baseline, Some(layer))
            }
        };
        let read_norm = LayerNorm::new(store, "fwm.read_ln.g", "fwm.read_ln.b", d)?;
        let head_in = match config.head {
            HeadInput::HiddenAndRead => config.d_lstm + d,
            HeadInput::Read => d,
        };
        let out = Linear::new(store, "fwm.out", head_in, config.n_classes, rng)?;
        Ok(Self { config, variant, lstm, baseline, beta, d3, read_norm, out })
    }

    pub fn config(&self) -> &FwmConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn d3(&self) -> Option<&D3Layer> {
        self.d3.as_ref()
    }

    /// Zero `h`, `c` and memory for `batch` episodes.
    pub fn initial_state<T: Scalar>(&self, cx: &mut Forward<'_, T>, batch: usize) -> FwmState {
        let (h_dim, d) = (self.config.d_lstm, self.config.d_fwm);
        let h = cx.graph.constant(Tensor::zeros(&[batch, h_dim]));
        let c = cx.graph.constant(Tensor::zeros(&[batch, h_dim]));
        let memory = match self.config.memory {
            MemoryForm::Dense => Memory::Dense(cx.graph.constant(Tensor::zeros(&[batch, d, d, d]))),
            MemoryForm::Factored => Memory::Factored(Vec::new()),
        };
        FwmState { h, c, memory, timestep: 0 }
    }

    /// Produces the five components and `beta` from the controller state.
    pub fn generate<T: Scalar>(&self, cx: &mut Forward<'_, T>, h: Var) -> Result<Components> {
        let d = self.config.d_fwm;
        let beta = self.beta.forward(cx, h)?;
        let beta = cx.graph.sigmoid(beta);
        let baseline = match &self.baseline {
            Some(lin) => {
                let z = lin.forward(cx, h)?;
                Some(cx.graph.tanh(z))
            }
            None => None,
        };
        let traces = match &self.d3 {
            Some(layer) => layer.decompose(cx, h)?,
            None => Vec::new(),
        };
        let out = |t: &[ComponentTrace], j: usize| t[j].output;
        let [r1, r2, f, u1, u2] = match self.variant {
            Variant::Baseline => {
                let z = baseline.expect("baseline generator present");
                let mut parts = [z; 5];
                for (i, p) in parts.iter_mut().enumerate() {
                    *p = cx.graph.slice_cols(z, i * d, d)?;
                }
                parts
            }
            Variant::D3WithoutFiller => {
                let f = baseline.expect("filler generator present");
                [out(&traces, 0), out(&traces, 1), f, out(&traces, 2), out(&traces, 3)]
            }
            Variant::D3WithFiller => {
                [out(&traces, 0), out(&traces, 1), out(&traces, 2), out(&traces, 3), out(&traces, 4)]
            }
        };
        let [r1, r2, u1, u2] = if self.config.normalize_roles {
            let eps = T::lit(ROLE_NORM_EPS);
            [r1, r2, u1, u2].map(|v| cx.graph.l2_normalize_rows(v, eps))
        } else {
            [r1, r2, u1, u2]
        };
        Ok(Components { role1: r1, role2: r2, filler: f, unbind1: u1, unbind2: u2, beta, traces })
    }

    /// Writes `filler` under `(role1, role2)` with strength `beta` using the
    /// delta rule, then reads with `(unbind1, unbind2)`. Returns the raw
    /// read before layer normalization.
    pub fn write_then_read<T: Scalar>(
        &self,
        cx: &mut Forward<'_, T>,
        memory: &mut Memory,
        c: &Components,
    ) -> Result<Var> {
        let old = memory.contract(cx, c.role1, c.role2)?;
        let delta = cx.graph.sub(c.filler, old)?;
        let update = cx.graph.scale_rows(delta, c.beta)?;
        memory.write(cx, update, c.role1, c.role2)?;
        memory.contract(cx, c.unbind1, c.unbind2)
    }

    /// One controller step over `input[batch x d_input]`.
    pub fn step<T: Scalar>(
        &self,
        cx: &mut Forward<'_, T>,
        state: FwmState,
        input: Var,
    ) -> Result<(FwmState, StepOutput)> {
        let FwmState { h, c, mut memory, timestep } = state;
        let (h, c) = self.lstm.step(cx, input, h, c)?;
        let components = self.generate(cx, h)?;
        let raw = self.write_then_read(cx, &mut memory, &components)?;
        if !cx.graph.value(raw).is_finite() || !cx.graph.value(h).is_finite() {
            return Err(Error::Divergence { timestep, what: "fast-weight memory".into() });
        }
        if let Memory::Dense(f) = memory {
            if !cx.graph.value(f).is_finite() {
                return Err(Error::Divergence { timestep, what: "fast-weight memory".into() });
            }
        }
        let read = self.read_norm.forward(cx, raw)?;
        let head_in = match self.config.head {
            HeadInput::HiddenAndRead => cx.graph.concat_cols(&[h, read])?,
            HeadInput::Read => read,
        };
        let logits = self.out.forward(cx, head_in)?;
        let state = FwmState { h, c, memory, timestep: timestep + 1 };
        Ok((state, StepOutput { logits, read, components }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.name()));
        }
        assert!("fwm".parse::<Variant>().is_err());
    }
}
