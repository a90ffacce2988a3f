//! The full SAR model: embeddings feeding the fast weight memory host.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fwm::{FwmModel, StepOutput, Variant};
use crate::graph::{Graph, Mode, Var};
use crate::kernels;
use crate::nn::Forward;
use crate::param::ParamStore;
use crate::rng::{self, Domain, Rng};
use crate::sar::{Phase, SarEmbedding, SarEpisode, SarVocab};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct SarModel<T: Scalar> {
    store: ParamStore<T>,
    embedding: SarEmbedding,
    fwm: FwmModel,
}

/// A finished forward pass over a batch of episodes.
pub struct EpisodeRun<'a, T: Scalar> {
    pub cx: Forward<'a, T>,
    /// Cross-entropy averaged over inference steps and batch.
    pub loss: Var,
    /// `predictions[e][q]` for episode `e`, query `q`.
    pub predictions: Vec<Vec<usize>>,
    pub correct: usize,
    pub total: usize,
    /// Per dictionary group, how often each key was selected.
    pub usage: Vec<Vec<u64>>,
    /// Step outputs in time order when recording was requested.
    pub steps: Vec<StepOutput>,
}

impl<T: Scalar> EpisodeRun<'_, T> {
    pub fn loss_value(&self) -> T {
        self.cx.graph.value(self.loss).item()
    }

    /// Backward from the loss. The returned graph no longer borrows the
    /// parameters, so its gradients can be accumulated into them.
    pub fn backward(mut self) -> Result<Graph<T>> {
        self.cx.graph.backward(self.loss)?;
        Ok(self.cx.graph)
    }
}

impl<T: Scalar> SarModel<T> {
    /// Fresh parameters drawn from the run's init stream.
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(config.seed, Domain::Init, 0);
        let mut store = ParamStore::new();
        let vocab = config.vocab();
        let embedding = SarEmbedding::new(&mut store, vocab, config.phase_flags, &mut rng)?;
        let fwm = FwmModel::new(&mut store, config.fwm_config(), config.variant, &config.d3, &mut rng)?;
        Ok(Self { store, embedding, fwm })
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn fwm(&self) -> &FwmModel {
        &self.fwm
    }

    pub fn embedding(&self) -> &SarEmbedding {
        &self.embedding
    }

    pub fn vocab(&self) -> &SarVocab {
        &self.embedding.vocab
    }

    pub fn variant(&self) -> Variant {
        self.fwm.variant()
    }

    /// Runs equal-length episodes in lockstep. `record` keeps every step's
    /// outputs for inspection.
    pub fn run(&self, episodes: &[SarEpisode], mode: Mode, dropout: Rng, record: bool) -> Result<EpisodeRun<'_, T>> {
        let batch = episodes.len();
        let len = episodes.first().map_or(0, SarEpisode::len);
        if batch == 0 || len == 0 {
            return Err(Error::config("need at least one non-empty episode"));
        }
        if episodes.iter().any(|e| e.len() != len || e.inference.len() != len) {
            return Err(Error::dim("episodes in a batch must share their length"));
        }
        let mut cx = Forward::new(&self.store, mode, dropout);
        let mut state = self.fwm.initial_state(&mut cx, batch);
        let groups = self.fwm.d3().map_or(0, |d| d.n_groups());
        let n_code = self.fwm.d3().map_or(0, |d| d.config().n_code);
        let mut usage = vec![vec![0u64; n_code]; groups];
        let mut predictions = vec![Vec::with_capacity(len); batch];
        let mut losses = Vec::with_capacity(len);
        let mut correct = 0;
        let mut steps = Vec::new();

        let mut xs = vec![0; batch];
        let mut ys = vec![0; batch];
        for t in 0..2 * len {
            let (phase, i) = if t < len { (Phase::Discovery, t) } else { (Phase::Inference, t - len) };
            for (b, ep) in episodes.iter().enumerate() {
                match phase {
                    Phase::Discovery => (xs[b], ys[b]) = ep.discovery[i],
                    Phase::Inference => (xs[b], ys[b]) = (ep.inference[i], ep.targets[i]),
                }
            }
            let visible = (phase == Phase::Discovery).then_some(ys.as_slice());
            let input = self.embedding.encode(&mut cx, &xs, visible, phase, i == 0)?;
            let (next, out) = self.fwm.step(&mut cx, state, input)?;
            state = next;
            for trace in &out.components.traces {
                for &k in &trace.indices {
                    usage[trace.group][k] += 1;
                }
            }
            if phase == Phase::Inference {
                losses.push(cx.graph.cross_entropy(out.logits, &ys)?);
                let logits = cx.graph.value(out.logits);
                for (b, row) in predictions.iter_mut().enumerate() {
                    let p = kernels::argmax(logits.row(b));
                    correct += usize::from(p == ys[b]);
                    row.push(p);
                }
            }
            if record {
                steps.push(out);
            }
        }
        let mut loss = losses[0];
        for &l in &losses[1..] {
            loss = cx.graph.add(loss, l)?;
        }
        let loss = cx.graph.scale(loss, T::one() / T::from_usize(len).expect("usize fits"));
        Ok(EpisodeRun { cx, loss, predictions, correct, total: batch * len, usage, steps })
    }
}
