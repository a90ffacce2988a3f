//! Systematic associative recall: episodes of (x, y) pairs to memorize and
//! recall, trained on two symbol-set combinations and evaluated on a third.
//!
//! Symbol ids: `X1 = 0..V`, `X2 = V..2V` and likewise `Y1`, `Y2` in the
//! y-space. Labels are y-ids, so the classifier has `2V` classes.

use std::collections::BTreeSet;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::Forward;
use crate::param::{init, ParamId, ParamStore};
use crate::rng::{self, Domain, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const EMBED_DIM: usize = 50;
/// `x-embedding | y-embedding | discovery flag | inference flag`
pub const INPUT_DIM: usize = 2 * EMBED_DIM + 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhaseFlags {
    /// Flag is 1 on the first step of its phase only.
    Impulse,
    /// Flag is 1 throughout its phase.
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Discovery,
    Inference,
}

/// Symbol-set sizes and episode length.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SarVocab {
    /// `|X1| = |X2| = |Y1| = |Y2|`
    pub v: usize,
    /// Items per episode.
    pub length: usize,
}

impl SarVocab {
    pub fn new(v: usize, length: usize) -> Result<Self> {
        let vocab = Self { v, length };
        vocab.validate()?;
        Ok(vocab)
    }

    pub fn validate(&self) -> Result<()> {
        if self.v == 0 || self.length == 0 {
            return Err(Error::config("V and L must be positive"));
        }
        // Evaluation episodes draw every x from X1.
        if self.length > self.v {
            return Err(Error::config(format!(
                "episode length L={} exceeds |X1|={}",
                self.length, self.v
            )));
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        2 * self.v
    }

    pub fn x1(&self) -> std::ops::Range<usize> {
        0..self.v
    }

    pub fn x2(&self) -> std::ops::Range<usize> {
        self.v..2 * self.v
    }

    pub fn y1(&self) -> std::ops::Range<usize> {
        0..self.v
    }

    pub fn y2(&self) -> std::ops::Range<usize> {
        self.v..2 * self.v
    }

    /// Whether `(x, y)` is one of the two training combinations.
    pub fn is_train_pair(&self, x: usize, y: usize) -> bool {
        (self.x1().contains(&x) && self.y1().contains(&y)) || (self.x2().contains(&x) && self.y2().contains(&y))
    }

    pub fn is_eval_pair(&self, x: usize, y: usize) -> bool {
        self.x1().contains(&x) && self.y2().contains(&y)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SarEpisode {
    pub discovery: Vec<(usize, usize)>,
    /// Queried x-ids, a permutation of the discovery x-ids.
    pub inference: Vec<usize>,
    pub targets: Vec<usize>,
}

impl SarEpisode {
    /// Builds an episode that queries every discovery item in `order`.
    fn from_items(discovery: Vec<(usize, usize)>, rng: &mut Rng) -> Self {
        let mut order: Vec<usize> = (0..discovery.len()).collect();
        order.shuffle(rng);
        let inference = order.iter().map(|&i| discovery[i].0).collect();
        let targets = order.iter().map(|&i| discovery[i].1).collect();
        Self { discovery, inference, targets }
    }

    pub fn len(&self) -> usize {
        self.discovery.len()
    }

    pub fn is_empty(&self) -> bool {
        self.discovery.is_empty()
    }

    /// Steps in discovery then inference order: `(x, y if visible, phase, phase start)`.
    pub fn steps(&self) -> impl Iterator<Item = (usize, Option<usize>, Phase, bool)> + '_ {
        let d = self.discovery.iter().enumerate().map(|(t, &(x, y))| (x, Some(y), Phase::Discovery, t == 0));
        let i = self.inference.iter().enumerate().map(|(t, &x)| (x, None, Phase::Inference, t == 0));
        d.chain(i)
    }

    /// Compact JSON with `discovery`, `inference` and `targets` arrays.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("episode serializes")
    }
}

/// Training episode `index` under `seed`. Each item independently picks
/// `(X1, Y1)` or `(X2, Y2)`; x is drawn without replacement within the
/// episode and y with replacement.
pub fn gen_train_episode(vocab: &SarVocab, seed: u64, index: u64) -> Result<SarEpisode> {
    vocab.validate()?;
    let mut rng = rng::stream(seed, Domain::TrainEpisode, index);
    let mut pools: [Vec<usize>; 2] = [vocab.x1().collect(), vocab.x2().collect()];
    let y_sets = [vocab.y1(), vocab.y2()];
    let mut discovery = Vec::with_capacity(vocab.length);
    for _ in 0..vocab.length {
        let mut s = usize::from(rng.random_bool(0.5));
        if pools[s].is_empty() {
            s = 1 - s;
        }
        let pool = &mut pools[s];
        let x = pool.swap_remove(rng.random_range(0..pool.len()));
        let y = rng.random_range(y_sets[s].clone());
        discovery.push((x, y));
    }
    Ok(SarEpisode::from_items(discovery, &mut rng))
}

/// Covers every pair in `X1 x Y2`. Pairs are enumerated along the diagonals
/// `(x_i, y_(i+e) mod V)` and packed into episodes of `L` distinct x-ids;
/// a short last episode is padded with already-tested pairs on unused x-ids.
pub fn gen_eval_pass(vocab: &SarVocab, seed: u64) -> Result<Vec<SarEpisode>> {
    vocab.validate()?;
    let v = vocab.v;
    let mut pairs = Vec::with_capacity(v * v);
    for e in 0..v {
        for i in 0..v {
            pairs.push((i, v + (i + e) % v));
        }
    }
    let mut episodes = Vec::new();
    for (n, chunk) in pairs.chunks(vocab.length).enumerate() {
        let mut rng = rng::stream(seed, Domain::EvalEpisode, n as u64);
        let mut items = chunk.to_vec();
        let mut used: BTreeSet<usize> = items.iter().map(|p| p.0).collect();
        let mut donor = pairs.iter();
        while items.len() < vocab.length {
            let &(x, y) = donor.next().expect("L <= V leaves an unused x");
            if used.insert(x) {
                items.push((x, y));
            }
        }
        items.shuffle(&mut rng);
        episodes.push(SarEpisode::from_items(items, &mut rng));
    }
    Ok(episodes)
}

/// Writes one JSON episode per line.
pub fn dump_episodes<W: Write>(episodes: &[SarEpisode], mut out: W) -> Result<()> {
    for ep in episodes {
        writeln!(out, "{}", ep.to_json())?;
    }
    Ok(())
}

/// Learnable x and y embedding tables, `[2V x 50]` each.
#[derive(Clone, Debug)]
pub struct SarEmbedding {
    pub vocab: SarVocab,
    pub flags: PhaseFlags,
    pub x_table: ParamId,
    pub y_table: ParamId,
}

impl SarEmbedding {
    /// Tables initialized `Normal(0, 1)`.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, vocab: SarVocab, flags: PhaseFlags, rng: &mut Rng) -> Result<Self> {
        let n = vocab.n_classes();
        let x_table = store.add("sar.embed.x", init::normal(&[n, EMBED_DIM], 1.0, rng))?;
        let y_table = store.add("sar.embed.y", init::normal(&[n, EMBED_DIM], 1.0, rng))?;
        Ok(Self { vocab, flags, x_table, y_table })
    }

    fn flag_values<T: Scalar>(&self, phase: Phase, start: bool) -> [T; 2] {
        let on = start || self.flags == PhaseFlags::Constant;
        let bit = |b: bool| if b { T::one() } else { T::zero() };
        match phase {
            Phase::Discovery => [bit(on), T::zero()],
            Phase::Inference => [T::zero(), bit(on)],
        }
    }

    /// Input rows for one lockstep timestep over a batch. `ys` is `None`
    /// during inference, where the y slot is zero.
    pub fn encode<T: Scalar>(
        &self,
        cx: &mut Forward<'_, T>,
        xs: &[usize],
        ys: Option<&[usize]>,
        phase: Phase,
        start: bool,
    ) -> Result<Var> {
        let batch = xs.len();
        let xt = cx.param(self.x_table);
        let xe = cx.graph.gather_rows(xt, xs)?;
        let ye = match ys {
            Some(ys) => {
                let yt = cx.param(self.y_table);
                cx.graph.gather_rows(yt, ys)?
            }
            None => cx.graph.constant(Tensor::zeros(&[batch, EMBED_DIM])),
        };
        let flags = self.flag_values::<T>(phase, start);
        let flags = cx.graph.constant(Tensor::new(&[batch, 2], flags.repeat(batch))?);
        cx.graph.concat_cols(&[xe, ye, flags])
    }

    /// Single-item input vector read straight from the tables.
    pub fn encode_step<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: usize,
        y: Option<usize>,
        phase: Phase,
        start: bool,
    ) -> Result<Tensor<T>> {
        let n = self.vocab.n_classes();
        for id in std::iter::once(x).chain(y) {
            if id >= n {
                return Err(Error::Index(format!("symbol {id} outside 0..{n}")));
            }
        }
        let mut out = Vec::with_capacity(INPUT_DIM);
        out.extend_from_slice(store.tensor(self.x_table).row(x));
        match y {
            Some(y) => out.extend_from_slice(store.tensor(self.y_table).row(y)),
            None => out.extend(std::iter::repeat_n(T::zero(), EMBED_DIM)),
        }
        out.extend(self.flag_values::<T>(phase, start));
        Tensor::new(&[INPUT_DIM], out)
    }
}
