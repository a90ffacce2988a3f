//! Discrete dictionary-based decomposition: maps an input vector to one
//! structured representation per TPR component by sparse lookup into
//! learnable codebooks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::kernels;
use crate::nn::{Forward, LayerNorm, Linear};
use crate::param::{init, ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Guard on key norms before scoring.
pub const KEY_NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct D3Config {
    pub d_code: usize,
    pub n_code: usize,
    pub top_k: usize,
    pub d_query: usize,
    pub p_dropout: f64,
    pub d_component: usize,
    pub use_codebook: bool,
    pub use_residual: bool,
    pub apply_to_filler: bool,
    /// One residual/final projection pair for the whole layer, or one per
    /// dictionary group.
    pub shared_projections: bool,
}

impl Default for D3Config {
    fn default() -> Self {
        Self {
            d_code: 32,
            n_code: 64,
            top_k: 8,
            d_query: 16,
            p_dropout: 0.1,
            d_component: 32,
            use_codebook: true,
            use_residual: true,
            apply_to_filler: false,
            shared_projections: true,
        }
    }
}

impl D3Config {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("D_code", self.d_code),
            ("N_code", self.n_code),
            ("top_k", self.top_k),
            ("D_query", self.d_query),
            ("D_component", self.d_component),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.top_k > self.n_code {
            return Err(Error::config(format!(
                "top_k={} exceeds N_code={}",
                self.top_k, self.n_code
            )));
        }
        if !(0.0..1.0).contains(&self.p_dropout) {
            return Err(Error::config(format!("p_dropout={} outside [0, 1)", self.p_dropout)));
        }
        if !self.use_codebook && !self.use_residual {
            return Err(Error::config("use_codebook and use_residual cannot both be false"));
        }
        if self.d_query < 2 {
            return Err(Error::config("D_query must be at least 2 for layer normalization"));
        }
        Ok(())
    }
}

/// `N_code` learnable key/value pairs for one component group.
#[derive(Clone, Debug)]
pub struct CodebookDictionary {
    pub keys: ParamId,
    pub values: ParamId,
}

impl CodebookDictionary {
    /// Number of key rows whose norm falls under [`KEY_NORM_EPS`].
    pub fn degenerate_keys<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        let keys = store.tensor(self.keys);
        let eps = T::lit(KEY_NORM_EPS);
        (0..keys.rows()).filter(|&r| kernels::norm(keys.row(r)) < eps).count()
    }
}

#[derive(Clone, Debug)]
struct QueryNet {
    affine: Linear,
    norm: LayerNorm,
}

/// Result of top-k selection for a batch of queries.
#[derive(Clone, Debug)]
pub struct SparseAccess {
    /// `rows * k` key indices, best first within each row.
    pub indices: Vec<usize>,
    /// `[rows x k]` scores of the selected keys.
    pub scores: Var,
    pub k: usize,
}

/// Intermediate values of one component path, kept for probes and usage counts.
#[derive(Clone, Debug)]
pub struct ComponentTrace {
    pub component: usize,
    pub group: usize,
    pub query: Var,
    pub code: Option<Var>,
    pub indices: Vec<usize>,
    pub output: Var,
}

#[derive(Clone, Debug)]
pub struct D3Layer {
    config: D3Config,
    d_input: usize,
    queries: Vec<QueryNet>,
    dictionaries: Vec<CodebookDictionary>,
    residual: Vec<Linear>,
    finals: Vec<Linear>,
    component_to_group: Vec<usize>,
}

impl D3Layer {
    /// Registers all parameters in `store`. Component `j` reads dictionary
    /// `component_to_group[j]`; groups must be numbered `0..n_groups`.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        config: D3Config,
        d_input: usize,
        component_to_group: Vec<usize>,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        let n_groups = component_to_group.iter().max().map_or(0, |g| g + 1);
        if n_groups == 0 || (0..n_groups).any(|g| !component_to_group.contains(&g)) {
            return Err(Error::config(format!(
                "component groups {component_to_group:?} must cover 0..n without gaps"
            )));
        }
        let c = &config;
        let mut queries = Vec::with_capacity(component_to_group.len());
        for j in 0..component_to_group.len() {
            let prefix = format!("d3.comp{j}.query");
            queries.push(QueryNet {
                affine: Linear::new(store, &prefix, d_input, c.d_query, rng)?,
                norm: LayerNorm::new(store, &format!("{prefix}.ln_g"), &format!("{prefix}.ln_b"), c.d_query)?,
            });
        }
        let mut dictionaries = Vec::with_capacity(n_groups);
        for g in 0..n_groups {
            let keys = init::normal(&[c.n_code, c.d_query], 1.0 / (c.d_query as f64).sqrt(), rng);
            let values = init::normal(&[c.n_code, c.d_code], 1.0 / (c.d_code as f64).sqrt(), rng);
            dictionaries.push(CodebookDictionary {
                keys: store.add(format!("d3.group{g}.keys"), keys)?,
                values: store.add(format!("d3.group{g}.values"), values)?,
            });
        }
        let (mut residual, mut finals) = (Vec::new(), Vec::new());
        if c.shared_projections {
            residual.push(Linear::new(store, "d3.residual", c.d_query, c.d_code, rng)?);
            finals.push(Linear::new(store, "d3.final", c.d_code, c.d_component, rng)?);
        } else {
            for g in 0..n_groups {
                residual.push(Linear::new(store, &format!("d3.group{g}.residual"), c.d_query, c.d_code, rng)?);
                finals.push(Linear::new(store, &format!("d3.group{g}.final"), c.d_code, c.d_component, rng)?);
            }
        }
        Ok(Self { config, d_input, queries, dictionaries, residual, finals, component_to_group })
    }

    pub fn config(&self) -> &D3Config {
        &self.config
    }

    pub fn d_input(&self) -> usize {
        self.d_input
    }

    pub fn n_components(&self) -> usize {
        self.queries.len()
    }

    pub fn n_groups(&self) -> usize {
        self.dictionaries.len()
    }

    pub fn group_of(&self, j: usize) -> usize {
        self.component_to_group[j]
    }

    pub fn dictionary(&self, g: usize) -> &CodebookDictionary {
        &self.dictionaries[g]
    }

    pub fn dictionaries(&self) -> &[CodebookDictionary] {
        &self.dictionaries
    }

    fn projections(&self, g: usize) -> (&Linear, &Linear) {
        let p = if self.config.shared_projections { 0 } else { g };
        (&self.residual[p], &self.finals[p])
    }

    fn check_component(&self, j: usize) -> Result<()> {
        if j >= self.queries.len() {
            return Err(Error::Index(format!("component {j} of {}", self.queries.len())));
        }
        Ok(())
    }

    /// `dropout(layer_norm(input W_j + b_j))`, one row per batch entry.
    pub fn make_query<T: Scalar>(&self, cx: &mut Forward<'_, T>, j: usize, input: Var) -> Result<Var> {
        self.check_component(j)?;
        let net = &self.queries[j];
        let z = net.affine.forward(cx, input)?;
        let z = net.norm.forward(cx, z)?;
        cx.dropout(z, self.config.p_dropout)
    }

    /// Scores every L2-normalized key against each query row and keeps the
    /// `k` best. Unselected keys get no gradient.
    pub fn sparse_key_access<T: Scalar>(
        &self,
        cx: &mut Forward<'_, T>,
        query: Var,
        dict: &CodebookDictionary,
        k: usize,
    ) -> Result<SparseAccess> {
        let keys = cx.param(dict.keys);
        let unit = cx.graph.l2_normalize_rows(keys, T::lit(KEY_NORM_EPS));
        let all = cx.graph.matmul_bt(query, unit)?;
        let n = cx.graph.value(all).cols();
        let rows = cx.graph.value(all).rows();
        let mut indices = Vec::with_capacity(rows * k);
        for r in 0..rows {
            let row = &cx.graph.data(all)[r * n..(r + 1) * n];
            indices.extend(kernels::top_k_indices(row, k)?);
        }
        let scores = cx.graph.gather_cols(all, &indices, k)?;
        Ok(SparseAccess { indices, scores, k })
    }

    /// Softmax over the selected scores, then the weighted sum of their values.
    pub fn aggregate_code<T: Scalar>(
        &self,
        cx: &mut Forward<'_, T>,
        access: &SparseAccess,
        dict: &CodebookDictionary,
    ) -> Result<Var> {
        let w = cx.graph.softmax(access.scores);
        let values = cx.param(dict.values);
        cx.graph.aggregate(w, &access.indices, values)
    }

    pub fn make_component<T: Scalar>(&self, cx: &mut Forward<'_, T>, j: usize, input: Var) -> Result<ComponentTrace> {
        let query = self.make_query(cx, j, input)?;
        let group = self.component_to_group[j];
        let (residual, last) = self.projections(group);
        let (code, indices) = if self.config.use_codebook {
            let dict = &self.dictionaries[group];
            let access = self.sparse_key_access(cx, query, dict, self.config.top_k)?;
            let code = self.aggregate_code(cx, &access, dict)?;
            (Some(code), access.indices)
        } else {
            (None, Vec::new())
        };
        let component = match (code, self.config.use_residual) {
            (Some(code), true) => {
                let r = residual.forward(cx, query)?;
                cx.graph.add(code, r)?
            }
            (Some(code), false) => code,
            (None, true) => residual.forward(cx, query)?,
            (None, false) => unreachable!("rejected by D3Config::validate"),
        };
        let output = last.forward(cx, component)?;
        Ok(ComponentTrace { component: j, group, query, code, indices, output })
    }

    /// Every component path, in component order.
    pub fn decompose<T: Scalar>(&self, cx: &mut Forward<'_, T>, input: Var) -> Result<Vec<ComponentTrace>> {
        (0..self.n_components()).map(|j| self.make_component(cx, j, input)).collect()
    }
}
