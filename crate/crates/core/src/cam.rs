//! Routed aggregation of per-layer backbone features.
//!
//! A modality-shared router scores every backbone layer from pooled features.
//! The first and last layers are always kept; the remaining slots go to the
//! highest-scoring intermediate layers. Selected layers are projected by
//! their own expert matrix and summed with per-channel weights.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Ctx, Init, ParamId};
use crate::tensor::{Tensor, Var};

/// How the expert set is chosen.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertPolicy {
    /// `{1, L}` plus the top `k - 2` router scores among layers `2..L-1`.
    Routed,
    /// Every second layer `{2, 4, ..., L}`.
    FixedInterval,
    /// An explicit 1-based layer list.
    Manual(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CamConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub experts: usize,
    pub policy: ExpertPolicy,
}

impl CamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!("layer aggregation needs depth >= 2, got {}", self.depth)));
        }
        match &self.policy {
            ExpertPolicy::Routed => {
                if self.experts < 2 || self.experts > self.depth {
                    return Err(Error::Config(format!(
                        "experts must lie in 2..={}, got {}",
                        self.depth, self.experts
                    )));
                }
            }
            ExpertPolicy::FixedInterval => {}
            ExpertPolicy::Manual(layers) => check_layer_set(layers, self.depth)?,
        }
        Ok(())
    }
}

fn check_layer_set(layers: &[usize], depth: usize) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::invalid("aggregate", "expert set is empty"));
    }
    if layers.iter().any(|&l| l == 0 || l > depth) {
        return Err(Error::invalid("aggregate", format!("layers {layers:?} outside 1..={depth}")));
    }
    if layers.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("aggregate", format!("layers {layers:?} not strictly ascending")));
    }
    Ok(())
}

/// Pool-concat MLP producing one logit per layer.
#[derive(Clone, Debug)]
pub struct Router {
    pub hidden: Linear,
    pub out: Linear,
    pub depth: usize,
}

impl Router {
    pub fn new(init: &mut Init<'_>, dim: usize, depth: usize) -> Result<Self> {
        let mut s = init.scope("router");
        Ok(Router {
            hidden: Linear::new(&mut s, "hidden", depth * dim, dim, true)?,
            out: Linear::new(&mut s, "out", dim, depth, true)?,
            depth,
        })
    }
}

/// Router logits `[1, L]`: mean-pool every layer over tokens, concatenate,
/// then `out(gelu(hidden(.)))`.
pub fn route<'a>(ctx: &Ctx<'a>, features: &[Var<'a>], router: &Router) -> Result<Var<'a>> {
    if features.len() != router.depth {
        return Err(Error::invalid(
            "route",
            format!("expected {} layer features, got {}", router.depth, features.len()),
        ));
    }
    let pooled = features.iter().map(|f| f.mean_rows()).collect::<Result<Vec<_>>>()?;
    let joined = Var::concat_cols(&pooled)?;
    let h = router.hidden.forward(ctx, joined)?.gelu();
    router.out.forward(ctx, h)
}

/// `{1, L}` plus the `k - 2` best-scoring layers among `2..L-1`, ties going
/// to the lower layer. Returned 1-based and ascending.
pub fn select_experts(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    let l = scores.len();
    if l < 2 || k < 2 || k > l {
        return Err(Error::invalid(
            "select_experts",
            format!("k = {k} outside 2..={l} for {l} layers"),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("select_experts", "scores contain NaN"));
    }
    // 0-based candidates 1..l-1, i.e. layers 2..L-1
    let mut middle: Vec<usize> = (1..l - 1).collect();
    middle.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut chosen: Vec<usize> = vec![1, l];
    chosen.extend(middle.iter().take(k - 2).map(|i| i + 1));
    chosen.sort_unstable();
    Ok(chosen)
}

/// Expert set for `policy` given router `scores`.
pub fn choose_experts(policy: &ExpertPolicy, scores: &[f64], k: usize) -> Result<Vec<usize>> {
    let depth = scores.len();
    match policy {
        ExpertPolicy::Routed => select_experts(scores, k),
        ExpertPolicy::FixedInterval => {
            let set: Vec<usize> = (2..=depth).step_by(2).collect();
            check_layer_set(&set, depth)?;
            Ok(set)
        }
        ExpertPolicy::Manual(set) => {
            check_layer_set(set, depth)?;
            Ok(set.clone())
        }
    }
}

/// Per-layer expert projections and aggregation weights.
#[derive(Clone, Debug)]
pub struct Experts {
    /// `W^l: [C, C]`, one per layer.
    pub projections: Vec<ParamId>,
    /// `w^l: [C]`, one per layer.
    pub weights: Vec<ParamId>,
}

impl Experts {
    pub fn new(init: &mut Init<'_>, dim: usize, depth: usize, k: usize) -> Result<Self> {
        let mut s = init.scope("experts");
        let mut projections = Vec::with_capacity(depth);
        let mut weights = Vec::with_capacity(depth);
        for l in 1..=depth {
            let noise = Tensor::randn(&[dim, dim], 0.01, s.dtype(), &mut s.rng());
            let w = Tensor::eye(dim, s.dtype()).add(&noise)?;
            projections.push(s.tensor(&format!("proj{l}"), w)?);
            weights.push(s.constant(&format!("weight{l}"), &[dim], 1.0 / k as f64)?);
        }
        Ok(Experts { projections, weights })
    }
}

/// `sum_{l in E} w^l * (F^l W^l)` with `w^l` broadcast over tokens.
pub fn aggregate<'a>(ctx: &Ctx<'a>, features: &[Var<'a>], experts: &[usize], params: &Experts) -> Result<Var<'a>> {
    if experts.is_empty() {
        return Err(Error::invalid("aggregate", "expert set is empty"));
    }
    if features.len() != params.projections.len() {
        return Err(Error::invalid(
            "aggregate",
            format!("expected {} layer features, got {}", params.projections.len(), features.len()),
        ));
    }
    check_layer_set(experts, features.len())?;
    let mut acc: Option<Var<'a>> = None;
    for &l in experts {
        let term = features[l - 1]
            .matmul(ctx.param(params.projections[l - 1]))?
            .mul_row(ctx.param(params.weights[l - 1]))?;
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(term)?,
        });
    }
    Ok(acc.expect("non-empty expert set"))
}

#[derive(Clone, Debug)]
pub struct Cam {
    pub cfg: CamConfig,
    pub router: Router,
    pub experts: Experts,
}

/// Aggregated features of one modality with the routing decision behind it.
pub struct CamOutput<'a> {
    pub features: Var<'a>,
    pub selected: Vec<usize>,
    pub scores: Rc<Tensor>,
}

impl Cam {
    pub fn new(init: &mut Init<'_>, cfg: &CamConfig) -> Result<Self> {
        cfg.validate()?;
        let mut s = init.scope("cam");
        Ok(Cam {
            cfg: cfg.clone(),
            router: Router::new(&mut s, cfg.embed_dim, cfg.depth)?,
            experts: Experts::new(&mut s, cfg.embed_dim, cfg.depth, cfg.experts)?,
        })
    }

    pub fn forward<'a>(&self, ctx: &Ctx<'a>, features: &[Var<'a>]) -> Result<CamOutput<'a>> {
        let scores = route(ctx, features, &self.router)?.value();
        let selected = choose_experts(&self.cfg.policy, scores.data(), self.cfg.experts)?;
        let features = aggregate(ctx, features, &selected, &self.experts)?;
        Ok(CamOutput {
            features,
            selected,
            scores,
        })
    }
}
