//! Cross-modal interaction through a bidirectional selective state-space
//! model running over the concatenated RGB and TIR token sequences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::params::{Ctx, Init, ParamId};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MfiConfig {
    pub embed_dim: usize,
    /// Channel reduction `r`; the latent width is `embed_dim / r`.
    pub ratio: usize,
    pub state_dim: usize,
    /// Stacked Mamba layers per interaction module.
    pub layers: usize,
    pub conv_width: usize,
}

impl MfiConfig {
    pub fn latent_dim(&self) -> usize {
        self.embed_dim / self.ratio
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratio == 0 || self.embed_dim % self.ratio != 0 || self.embed_dim / self.ratio == 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of the reduction ratio {}",
                self.embed_dim, self.ratio
            )));
        }
        if self.state_dim == 0 || self.layers == 0 || self.conv_width == 0 {
            return Err(Error::Config("state_dim, layers and conv_width must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Input-dependent parameters of one scan direction.
#[derive(Clone, Debug)]
pub struct SsmParams {
    /// `A = -exp(a_log)`, `[D, S]`.
    pub a_log: ParamId,
    /// Per-channel skip `[D]`.
    pub skip: ParamId,
    /// `delta = softplus(x W + b)`.
    pub delta: Linear,
    pub b: Linear,
    pub c: Linear,
}

/// Inverse of softplus for `y > 0`.
fn inv_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl SsmParams {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, state: usize) -> Result<Self> {
        let mut s = init.scope(name);
        let a_log: Vec<f64> = (0..dim).flat_map(|_| (1..=state).map(|k| (k as f64).ln())).collect();
        let a_log = s.tensor("a_log", Tensor::new(&[dim, state], a_log, s.dtype())?)?;
        let skip = s.constant("skip", &[dim], 1.0)?;
        // step sizes start log-uniform in [0.01, 0.1]
        let bias: Vec<f64> = (0..dim)
            .map(|_| {
                let u = s.next_f64();
                inv_softplus((0.01f64.ln() + u * (0.1f64.ln() - 0.01f64.ln())).exp())
            })
            .collect();
        let delta = {
            let mut ds = s.scope("delta");
            let weight = ds.normal("weight", &[dim, dim], 0.1 / (dim as f64).sqrt())?;
            let bias = ds.tensor("bias", Tensor::new(&[dim], bias, ds.dtype())?)?;
            Linear {
                weight,
                bias: Some(bias),
                d_in: dim,
                d_out: dim,
            }
        };
        Ok(SsmParams {
            a_log,
            skip,
            delta,
            b: Linear::new(&mut s, "b", dim, state, false)?,
            c: Linear::new(&mut s, "c", dim, state, false)?,
        })
    }
}

/// Selective scan of `x: [L, D]` in one direction. The backward direction
/// reverses the sequence, scans, and reverses the result.
pub fn selective_scan<'a>(ctx: &Ctx<'a>, x: Var<'a>, ssm: &SsmParams, direction: Direction) -> Result<Var<'a>> {
    let x = match direction {
        Direction::Forward => x,
        Direction::Backward => x.reverse_rows()?,
    };
    let delta = ssm.delta.forward(ctx, x)?.softplus();
    let b = ssm.b.forward(ctx, x)?;
    let c = ssm.c.forward(ctx, x)?;
    let a = ctx.param(ssm.a_log).exp().neg();
    let y = x.selective_scan(delta, a, b, c, ctx.param(ssm.skip))?;
    match direction {
        Direction::Forward => Ok(y),
        Direction::Backward => y.reverse_rows(),
    }
}

/// One bidirectional Mamba layer with its pre-norm.
#[derive(Clone, Debug)]
pub struct MambaLayer {
    pub norm: LayerNorm,
    pub in_main: Linear,
    pub in_gate: Linear,
    /// Causal depthwise kernel `[D, width]`, shared by both directions.
    pub conv_kernel: ParamId,
    pub conv_bias: ParamId,
    pub forward_ssm: SsmParams,
    pub backward_ssm: SsmParams,
    pub out_proj: Linear,
}

impl MambaLayer {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, state: usize, conv_width: usize) -> Result<Self> {
        let mut s = init.scope(name);
        Ok(MambaLayer {
            norm: LayerNorm::new(&mut s, "norm", dim)?,
            in_main: Linear::new(&mut s, "in_main", dim, dim, false)?,
            in_gate: Linear::new(&mut s, "in_gate", dim, dim, false)?,
            conv_kernel: s.normal("conv_kernel", &[dim, conv_width], 1.0 / (conv_width as f64).sqrt())?,
            conv_bias: s.zeros("conv_bias", &[dim])?,
            forward_ssm: SsmParams::new(&mut s, "ssm_fwd", dim, state)?,
            backward_ssm: SsmParams::new(&mut s, "ssm_bwd", dim, state)?,
            out_proj: Linear::new(&mut s, "out_proj", dim, dim, false)?,
        })
    }

    /// Residual update `x + mamba_block(norm(x))`.
    pub fn forward<'a>(&self, ctx: &Ctx<'a>, x: Var<'a>) -> Result<Var<'a>> {
        let h = self.norm.forward(ctx, x)?;
        x.add(mamba_block(ctx, h, self)?)
    }
}

/// Gated bidirectional block: the main branch runs causal conv, SiLU and the
/// selective scan in each direction; the two directions are summed and gated
/// by `silu(x W_g)` before the output projection.
pub fn mamba_block<'a>(ctx: &Ctx<'a>, x: Var<'a>, layer: &MambaLayer) -> Result<Var<'a>> {
    let main = layer.in_main.forward(ctx, x)?;
    let gate = layer.in_gate.forward(ctx, x)?.silu();
    let kernel = ctx.param(layer.conv_kernel);
    let bias = ctx.param(layer.conv_bias);

    let u_fwd = main.conv1d_depthwise(kernel, Some(bias))?.silu();
    let y_fwd = selective_scan(ctx, u_fwd, &layer.forward_ssm, Direction::Forward)?;

    // causal in reversed time, returned to original order for the scan
    let u_bwd = main
        .reverse_rows()?
        .conv1d_depthwise(kernel, Some(bias))?
        .silu()
        .reverse_rows()?;
    let y_bwd = selective_scan(ctx, u_bwd, &layer.backward_ssm, Direction::Backward)?;

    layer.out_proj.forward(ctx, y_fwd.add(y_bwd)?.mul(gate)?)
}

/// Interaction module inserted after one backbone layer.
#[derive(Clone, Debug)]
pub struct Mfi {
    pub cfg: MfiConfig,
    pub down_rgb: Linear,
    pub down_tir: Linear,
    /// Zero-initialized so the module starts as the identity.
    pub up_rgb: Linear,
    pub up_tir: Linear,
    pub layers: Vec<MambaLayer>,
}

impl Mfi {
    pub fn new(init: &mut Init<'_>, cfg: &MfiConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.embed_dim;
        let d = cfg.latent_dim();
        Ok(Mfi {
            cfg: cfg.clone(),
            down_rgb: Linear::new(init, "down_rgb", c, d, false)?,
            down_tir: Linear::new(init, "down_tir", c, d, false)?,
            up_rgb: Linear::zeros(init, "up_rgb", d, c, false)?,
            up_tir: Linear::zeros(init, "up_tir", d, c, false)?,
            layers: (0..cfg.layers)
                .map(|i| MambaLayer::new(init, &format!("mamba{i}"), d, cfg.state_dim, cfg.conv_width))
                .collect::<Result<Vec<_>>>()?,
        })
    }

    pub fn forward<'a>(&self, ctx: &Ctx<'a>, f_rgb: Var<'a>, f_tir: Var<'a>) -> Result<(Var<'a>, Var<'a>)> {
        mfi_forward(ctx, self, f_rgb, f_tir)
    }
}

/// Down-projects both modalities, concatenates them along the sequence (RGB
/// first), runs the stacked Mamba layers, splits, up-projects and adds the
/// result back to each stream.
pub fn mfi_forward<'a>(ctx: &Ctx<'a>, mfi: &Mfi, f_rgb: Var<'a>, f_tir: Var<'a>) -> Result<(Var<'a>, Var<'a>)> {
    if f_rgb.shape() != f_tir.shape() {
        return Err(Error::shape("mfi_forward", &f_rgb.shape(), &f_tir.shape()));
    }
    let (n, _) = f_rgb.dims2()?;
    let lr = mfi.down_rgb.forward(ctx, f_rgb)?;
    let lt = mfi.down_tir.forward(ctx, f_tir)?;
    let mut seq = Var::concat_rows(&[lr, lt])?;
    for layer in &mfi.layers {
        seq = layer.forward(ctx, seq)?;
    }
    let out_r = f_rgb.add(mfi.up_rgb.forward(ctx, seq.slice_rows(0, n)?)?)?;
    let out_t = f_tir.add(mfi.up_tir.forward(ctx, seq.slice_rows(n, n)?)?)?;
    Ok((out_r, out_t))
}

/// Multiply-accumulate counts of one interaction module.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MfiFlops {
    /// `4 N C (C/r)`: down and up projections of both modalities.
    pub projections: u64,
    /// Everything inside the stacked Mamba layers.
    pub mamba: u64,
}

impl MfiFlops {
    pub fn total(&self) -> u64 {
        self.projections + self.mamba
    }
}

/// Analytic cost of one interaction module for `tokens` tokens per modality.
///
/// Each Mamba layer sees `T = 2N` tokens of width `D = C/r` with state size
/// `S` and conv width `K`, and costs
/// `T (5 D^2 + 2 D K + 10 D S + 3 D)`:
/// two input projections `2 D^2`, the causal conv in both directions `2 D K`,
/// per direction the step/B/C projections `D^2 + 2 D S` and the scan
/// `3 D S + D` (state decay, input injection, readout and skip), the gate
/// product `D`, and the output projection `D^2`.
pub fn mfi_flops(cfg: &MfiConfig, tokens: usize) -> MfiFlops {
    let n = tokens as u64;
    let c = cfg.embed_dim as u64;
    let d = (cfg.embed_dim / cfg.ratio.max(1)) as u64;
    let s = cfg.state_dim as u64;
    let k = cfg.conv_width as u64;
    let t = 2 * n;
    let per_layer = t * (5 * d * d + 2 * d * k + 10 * d * s + 3 * d);
    MfiFlops {
        projections: 4 * n * c * d,
        mamba: cfg.layers as u64 * per_layer,
    }
}

/// Dense bidirectional cross-attention between two `N`-token streams of
/// width `C`: per direction `4 N C^2` for the projections and `2 N^2 C` for
/// scores and mixing.
pub fn dense_cross_attention_flops(tokens: usize, dim: usize) -> u64 {
    let n = tokens as u64;
    let c = dim as u64;
    2 * (4 * n * c * c + 2 * n * n * c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Mode, ParamStore};
    use crate::tensor::{DType, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> MfiConfig {
        MfiConfig {
            embed_dim: 16,
            ratio: 4,
            state_dim: 4,
            layers: 2,
            conv_width: 4,
        }
    }

    fn build(seed: u64, dtype: DType) -> (ParamStore, Mfi) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mfi = Mfi::new(&mut Init::new(&mut store, &mut rng, dtype).scope("mfi"), &cfg()).unwrap();
        (store, mfi)
    }

    #[test]
    fn state_matrix_is_negative_and_step_sizes_small() {
        let (store, mfi) = build(1, DType::F64);
        let ssm = &mfi.layers[0].forward_ssm;
        let a_log = store.get(ssm.a_log);
        assert!(a_log.data().iter().all(|v| -v.exp() < 0.0));
        for &b in store.get(ssm.delta.bias.unwrap()).data() {
            let dt = b.exp().ln_1p();
            assert!((0.0099..=0.1001).contains(&dt), "{dt}");
        }
    }

    #[test]
    fn zero_up_projection_is_identity() {
        let (store, mfi) = build(2, DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let r = Tensor::randn(&[10, 16], 1.0, DType::F32, &mut rng);
        let t = Tensor::randn(&[10, 16], 1.0, DType::F32, &mut rng);
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store, Mode::Eval);
        let (or, ot) = mfi.forward(&ctx, ctx.constant(r.clone()), ctx.constant(t.clone())).unwrap();
        assert!(or.value().bit_eq(&r));
        assert!(ot.value().bit_eq(&t));
    }

    #[test]
    fn changing_tir_changes_rgb_once_up_projection_is_nonzero() {
        let (mut store, mfi) = build(3, DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = Tensor::randn(&[4, 16], 0.5, DType::F64, &mut rng);
        *store.get_mut(mfi.up_rgb.weight) = w;
        let r = Tensor::randn(&[6, 16], 1.0, DType::F64, &mut rng);
        let t1 = Tensor::randn(&[6, 16], 1.0, DType::F64, &mut rng);
        let t2 = t1.map(|v| v + 0.5);
        let run = |t: &Tensor| {
            let tape = Tape::inference();
            let ctx = Ctx::new(&tape, &store, Mode::Eval);
            let (or, _) = mfi.forward(&ctx, ctx.constant(r.clone()), ctx.constant(t.clone())).unwrap();
            or.value().as_ref().clone()
        };
        assert!(!run(&t1).bit_eq(&run(&t2)));
    }

    #[test]
    fn forward_scan_is_causal_and_backward_anti_causal() {
        let (store, mfi) = build(4, DType::F64);
        let ssm = &mfi.layers[0].forward_ssm;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::randn(&[9, 4], 1.0, DType::F64, &mut rng);
        let mut x2 = x.clone();
        for v in &mut x2.data_mut()[5 * 4..6 * 4] {
            *v += 1.0;
        }
        for (dir, unchanged) in [(Direction::Forward, 0..5), (Direction::Backward, 6..9)] {
            let run = |x: &Tensor| {
                let tape = Tape::inference();
                let ctx = Ctx::new(&tape, &store, Mode::Eval);
                selective_scan(&ctx, ctx.constant(x.clone()), ssm, dir).unwrap().value().as_ref().clone()
            };
            let (a, b) = (run(&x), run(&x2));
            for t in 0..9 {
                let same = a.data()[t * 4..(t + 1) * 4] == b.data()[t * 4..(t + 1) * 4];
                assert_eq!(same, unchanged.contains(&t), "{dir:?} token {t}");
            }
        }
    }

    #[test]
    fn rejects_mismatched_modalities() {
        let (store, mfi) = build(5, DType::F32);
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store, Mode::Eval);
        let r = ctx.constant(Tensor::zeros(&[4, 16], DType::F32));
        let t = ctx.constant(Tensor::zeros(&[5, 16], DType::F32));
        assert!(mfi.forward(&ctx, r, t).is_err());
    }

    #[test]
    fn flops_are_linear_in_tokens() {
        let c = MfiConfig {
            embed_dim: 768,
            ratio: 8,
            state_dim: 16,
            layers: 2,
            conv_width: 4,
        };
        let f1 = mfi_flops(&c, 385).total();
        let f2 = mfi_flops(&c, 770).total();
        assert_eq!(f2, 2 * f1);
        assert!(f1 < dense_cross_attention_flops(385, 768));
    }

    #[test]
    fn doubling_reduction_halves_projection_cost() {
        let mut c = MfiConfig {
            embed_dim: 768,
            ratio: 4,
            state_dim: 16,
            layers: 2,
            conv_width: 4,
        };
        let p4 = mfi_flops(&c, 385).projections;
        c.ratio = 8;
        assert_eq!(p4, 2 * mfi_flops(&c, 385).projections);
    }

    #[test]
    fn invalid_ratio_rejected() {
        let mut c = cfg();
        c.ratio = 5;
        assert!(c.validate().is_err());
    }
}
