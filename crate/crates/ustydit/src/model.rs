//! Parameter construction and the full forward pass: tokenize conditions,
//! run the style modulator, the block stack, and the output head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::imaging::{EdgeMap, ImageBuffer};
use crate::msm::{msm_forward, MsmVars};
use crate::numerics::{GradMap, ParamStore, Precision, Tape, Tensor, Var};
use crate::stydit::{output_head, stydit_block, BlockVars, HeadVars};
use crate::tokenizer::{self, ModelConfig, TokenKind, TokenSequence};
use crate::{Error, Result};

const INIT_STD: f64 = 0.02;

/// The trainable model: a config plus its parameter store.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
}

/// Condition inputs for one forward pass, already rasterized.
#[derive(Debug, Clone)]
pub struct Conditions {
    /// style image resized to base resolution
    pub style_global: ImageBuffer,
    /// n style patches at base resolution
    pub style_locals: Vec<ImageBuffer>,
    /// edge map at base resolution
    pub canny: EdgeMap,
    pub prompt: String,
    pub lambda: f64,
}

impl Model {
    /// Deterministic initialization: Gaussian(0, 0.02) projections and
    /// tables, zero biases, unit norm gains. Insertion order fixes the
    /// flat index.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).map_err(|e| Error::Config(e.to_string()))?;
        let mut store = ParamStore::new();
        let (d, n) = (cfg.d, cfg.n_patches);
        let l = cfg.image_tokens();
        let pd = cfg.patch_dim();

        let mut gauss = |store: &mut ParamStore, name: &str, shape: Vec<usize>| {
            let len: usize = shape.iter().product();
            let data: Vec<f64> = (0..len).map(|_| normal.sample(&mut rng)).collect();
            store.insert(name, Tensor::new(shape, data).unwrap());
        };
        let zeros = |store: &mut ParamStore, name: &str, shape: Vec<usize>| {
            store.insert(name, Tensor::zeros(shape));
        };
        let ones = |store: &mut ParamStore, name: &str, shape: Vec<usize>| {
            store.insert(name, Tensor::full(shape, 1.0));
        };

        gauss(&mut store, "embed.patch.w", vec![pd, d]);
        zeros(&mut store, "embed.patch.b", vec![d]);
        gauss(&mut store, "embed.pos.grid", vec![l, d]);
        gauss(&mut store, "embed.pos.text", vec![cfg.text_max_tokens, d]);
        for kind in ["image", "text", "canny", "style_global", "style_local", "noise"] {
            gauss(&mut store, &format!("embed.kind.{kind}"), vec![d]);
        }
        gauss(&mut store, "embed.text.table", vec![cfg.text_vocab, d]);

        gauss(&mut store, "msm.weight.w1", vec![n * d, 2 * n * d]);
        zeros(&mut store, "msm.weight.b1", vec![2 * n * d]);
        gauss(&mut store, "msm.weight.w2", vec![2 * n * d, n]);
        zeros(&mut store, "msm.weight.b2", vec![n]);
        for w in ["wq", "wk", "wv"] {
            gauss(&mut store, &format!("msm.attn.{w}"), vec![d, d]);
        }
        gauss(&mut store, "msm.ffn.w1", vec![d, 4 * d]);
        zeros(&mut store, "msm.ffn.b1", vec![4 * d]);
        gauss(&mut store, "msm.ffn.w2", vec![4 * d, d]);
        zeros(&mut store, "msm.ffn.b2", vec![d]);
        for nrm in ["norm1", "norm2"] {
            ones(&mut store, &format!("msm.{nrm}.g"), vec![d]);
            zeros(&mut store, &format!("msm.{nrm}.b"), vec![d]);
        }

        gauss(&mut store, "time.w1", vec![d, d]);
        zeros(&mut store, "time.b1", vec![d]);
        gauss(&mut store, "time.w2", vec![d, d]);
        zeros(&mut store, "time.b2", vec![d]);

        for b in 0..cfg.blocks {
            for w in ["wq", "wk", "wv", "wo"] {
                gauss(&mut store, &format!("block{b}.attn.{w}"), vec![d, d]);
            }
            gauss(&mut store, &format!("block{b}.ffn.w1"), vec![d, 4 * d]);
            zeros(&mut store, &format!("block{b}.ffn.b1"), vec![4 * d]);
            gauss(&mut store, &format!("block{b}.ffn.w2"), vec![4 * d, d]);
            zeros(&mut store, &format!("block{b}.ffn.b2"), vec![d]);
            for nrm in ["norm1", "norm2"] {
                ones(&mut store, &format!("block{b}.{nrm}.g"), vec![d]);
                zeros(&mut store, &format!("block{b}.{nrm}.b"), vec![d]);
            }
        }

        ones(&mut store, "head.norm.g", vec![d]);
        zeros(&mut store, "head.norm.b", vec![d]);
        gauss(&mut store, "head.w", vec![d, pd]);
        zeros(&mut store, "head.b", vec![pd]);

        // scalar time gate for the x0-parameterized velocity: the head
        // predicts the clean image and v = g(t)·(x_t − x̂0); tokens alone
        // cannot carry the full noise rank when patch_dim > d, so the
        // pixel-space residual path is what makes the velocity exact
        gauss(&mut store, "time.gate_w", vec![d, 1]);
        zeros(&mut store, "time.gate_b", vec![1]);

        Ok(Model { cfg, store })
    }
}

/// Loads store parameters onto a tape on demand and remembers their vars
/// so gradients can be collected by name afterwards.
pub struct TapeParams<'a> {
    store: &'a ParamStore,
    pub loaded: Vec<(String, Var)>,
}

impl<'a> TapeParams<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        TapeParams {
            store,
            loaded: Vec::new(),
        }
    }

    pub fn var(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        if let Some((_, v)) = self.loaded.iter().find(|(n, _)| n == name) {
            return Ok(*v);
        }
        let t = self
            .store
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        let (rows, cols) = match t.shape.len() {
            1 => (1, t.shape[0]),
            2 => (t.shape[0], t.shape[1]),
            r => return Err(Error::Dimension(format!("rank-{r} parameter {name}"))),
        };
        let v = tape.leaf(rows, cols, t.data.clone());
        self.loaded.push((name.to_string(), v));
        Ok(v)
    }

    pub fn collect_grads(&self, grads: &[Vec<f64>]) -> GradMap {
        self.loaded
            .iter()
            .map(|(n, v)| (n.clone(), grads[v.0].clone()))
            .collect()
    }
}

fn msm_vars(tp: &mut TapeParams, tape: &mut Tape) -> Result<MsmVars> {
    Ok(MsmVars {
        mlp_w1: tp.var(tape, "msm.weight.w1")?,
        mlp_b1: tp.var(tape, "msm.weight.b1")?,
        mlp_w2: tp.var(tape, "msm.weight.w2")?,
        mlp_b2: tp.var(tape, "msm.weight.b2")?,
        wq: tp.var(tape, "msm.attn.wq")?,
        wk: tp.var(tape, "msm.attn.wk")?,
        wv: tp.var(tape, "msm.attn.wv")?,
        ffn_w1: tp.var(tape, "msm.ffn.w1")?,
        ffn_b1: tp.var(tape, "msm.ffn.b1")?,
        ffn_w2: tp.var(tape, "msm.ffn.w2")?,
        ffn_b2: tp.var(tape, "msm.ffn.b2")?,
        norm1_g: tp.var(tape, "msm.norm1.g")?,
        norm1_b: tp.var(tape, "msm.norm1.b")?,
        norm2_g: tp.var(tape, "msm.norm2.g")?,
        norm2_b: tp.var(tape, "msm.norm2.b")?,
    })
}

fn block_vars(tp: &mut TapeParams, tape: &mut Tape, b: usize) -> Result<BlockVars> {
    Ok(BlockVars {
        wq: tp.var(tape, &format!("block{b}.attn.wq"))?,
        wk: tp.var(tape, &format!("block{b}.attn.wk"))?,
        wv: tp.var(tape, &format!("block{b}.attn.wv"))?,
        wo: tp.var(tape, &format!("block{b}.attn.wo"))?,
        ffn_w1: tp.var(tape, &format!("block{b}.ffn.w1"))?,
        ffn_b1: tp.var(tape, &format!("block{b}.ffn.b1"))?,
        ffn_w2: tp.var(tape, &format!("block{b}.ffn.w2"))?,
        ffn_b2: tp.var(tape, &format!("block{b}.ffn.b2"))?,
        norm1_g: tp.var(tape, &format!("block{b}.norm1.g"))?,
        norm1_b: tp.var(tape, &format!("block{b}.norm1.b"))?,
        norm2_g: tp.var(tape, &format!("block{b}.norm2.g"))?,
        norm2_b: tp.var(tape, &format!("block{b}.norm2.b"))?,
    })
}

fn head_vars(tp: &mut TapeParams, tape: &mut Tape) -> Result<HeadVars> {
    Ok(HeadVars {
        norm_g: tp.var(tape, "head.norm.g")?,
        norm_b: tp.var(tape, "head.norm.b")?,
        w: tp.var(tape, "head.w")?,
        b: tp.var(tape, "head.b")?,
    })
}

/// Sinusoidal embedding of the flow time t, width d.
pub fn sinusoidal_time(t: f64, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    let half = d / 2;
    for i in 0..half {
        let freq = (10000.0_f64).powf(-(i as f64) / half as f64);
        out[2 * i] = (t * 1000.0 * freq).sin();
        out[2 * i + 1] = (t * 1000.0 * freq).cos();
    }
    out
}

/// Embed an image-grid raster (image, patch, edge map as RGB) into tokens.
fn embed_grid(
    tape: &mut Tape,
    tp: &mut TapeParams,
    cfg: &ModelConfig,
    raw_patches: Vec<f64>,
    grid: (usize, usize),
    kind: TokenKind,
) -> Result<TokenSequence> {
    let l = grid.0 * grid.1;
    let raw = tape.leaf(l, cfg.patch_dim(), raw_patches);
    let w = tp.var(tape, "embed.patch.w")?;
    let b = tp.var(tape, "embed.patch.b")?;
    let pos = tp.var(tape, "embed.pos.grid")?;
    let kv = tp.var(tape, &format!("embed.kind.{}", kind.name()))?;
    tokenizer::embed(tape, raw, kind, Some(grid), w, b, pos, kv)
}

/// Full forward: velocity prediction (L×patch_dim) for noisy pixels `x_t`
/// under the given conditions at flow time `t`.
///
/// `canny_enabled: false` removes the edge pathway entirely; with λ = 0
/// the output must be bit-identical.
#[allow(clippy::too_many_arguments)]
pub fn forward_velocity(
    tape: &mut Tape,
    tp: &mut TapeParams,
    cfg: &ModelConfig,
    x_t: &[f64],
    cond: &Conditions,
    t: f64,
    canny_enabled: bool,
) -> Result<Var> {
    let base = cfg.base_resolution;
    let grid = (cfg.grid_edge(), cfg.grid_edge());

    // time embedding
    let sin = sinusoidal_time(t, cfg.d);
    let sin = tape.leaf(1, cfg.d, sin);
    let tw1 = tp.var(tape, "time.w1")?;
    let tb1 = tp.var(tape, "time.b1")?;
    let tw2 = tp.var(tape, "time.w2")?;
    let tb2 = tp.var(tape, "time.b2")?;
    let h = tape.linear(sin, tw1, tb1)?;
    let h = tape.gelu(h);
    let temb = tape.linear(h, tw2, tb2)?;

    // noisy image tokens; the raw patches are kept as a leaf for the
    // pixel-space residual at the output
    let raw_noise = tokenizer::patchify_raw(x_t, base, base, 3, cfg.patch_px)?;
    let noise_patches = tape.leaf(cfg.image_tokens(), cfg.patch_dim(), raw_noise.clone());
    let img_tokens = embed_grid(tape, tp, cfg, raw_noise, grid, TokenKind::Noise)?;

    // text tokens
    let table = tp.var(tape, "embed.text.table")?;
    let tpos = tp.var(tape, "embed.pos.text")?;
    let tkind = tp.var(tape, "embed.kind.text")?;
    let text_tokens = tokenizer::embed_text(
        tape,
        &cond.prompt,
        cfg.text_vocab,
        cfg.text_max_tokens,
        table,
        tpos,
        tkind,
    )?;

    // style tokens through the modulator
    let (raw_gs, _) = tokenizer::patchify(&cond.style_global.to_rgb(), cfg.patch_px)?;
    let global = embed_grid(tape, tp, cfg, raw_gs, grid, TokenKind::StyleGlobal)?;
    let mut locals = Vec::with_capacity(cond.style_locals.len());
    for patch in &cond.style_locals {
        let (raw, _) = tokenizer::patchify(&patch.to_rgb(), cfg.patch_px)?;
        locals.push(embed_grid(tape, tp, cfg, raw, grid, TokenKind::StyleLocal)?);
    }
    let mv = msm_vars(tp, tape)?;
    let style = msm_forward(tape, global, &locals, &mv, cfg.heads)?;

    // canny tokens
    let canny_var = if canny_enabled {
        let edge_img = cond.canny.to_image()?.to_rgb();
        let (raw_c, _) = tokenizer::patchify(&edge_img, cfg.patch_px)?;
        Some(embed_grid(tape, tp, cfg, raw_c, grid, TokenKind::Canny)?.var)
    } else {
        None
    };

    // block stack: λ is constant across the stack and the canny tokens are
    // re-fused into the image segment before every block
    let mut img = img_tokens.var;
    let mut text = text_tokens.var;
    let mut sty = style.var;
    for b in 0..cfg.blocks {
        let bv = block_vars(tp, tape, b)?;
        let (lambda, canny) = match canny_var {
            Some(c) => (cond.lambda, c),
            // absent pathway: λ=0 against a zero placeholder keeps
            // fuse_canny a no-op returning the image tokens unchanged
            None => (0.0, img),
        };
        let (ni, nt, ns) =
            stydit_block(tape, img, text, sty, canny, lambda, &bv, temb, cfg.heads)?;
        img = ni;
        text = nt;
        sty = ns;
    }

    // the head reads out a clean-image estimate; the velocity is the
    // time-gated pixel residual v = g(t)·(x_t − x̂0)
    let hv = head_vars(tp, tape)?;
    let x0_hat = output_head(tape, img, &hv, false)?;
    let gw = tp.var(tape, "time.gate_w")?;
    let gb = tp.var(tape, "time.gate_b")?;
    let gate = tape.linear(temb, gw, gb)?; // 1×1
    let l = cfg.image_tokens();
    let ones_col = tape.leaf(l, 1, vec![1.0; l]);
    let gate_col = tape.matmul(ones_col, gate)?;
    let ones_row = tape.leaf(1, cfg.patch_dim(), vec![1.0; cfg.patch_dim()]);
    let gate_full = tape.matmul(gate_col, ones_row)?;
    let residual = tape.sub(noise_patches, x0_hat)?;
    tape.mul(gate_full, residual)
}

/// Loss forward: mean squared error between predicted and target velocity.
#[allow(clippy::too_many_arguments)]
pub fn forward_loss(
    tape: &mut Tape,
    tp: &mut TapeParams,
    cfg: &ModelConfig,
    x_t: &[f64],
    target_velocity: &[f64],
    cond: &Conditions,
    t: f64,
) -> Result<Var> {
    let pred = forward_velocity(tape, tp, cfg, x_t, cond, t, true)?;
    let raw_target = tokenizer::patchify_raw(
        target_velocity,
        cfg.base_resolution,
        cfg.base_resolution,
        3,
        cfg.patch_px,
    )?;
    let l = cfg.image_tokens();
    let target = tape.leaf(l, cfg.patch_dim(), raw_target);
    tape.mean_sq_diff(pred, target)
}

/// Evaluate the training loss on a fixed random instance; the closure shape
/// expected by [`crate::numerics::grad_check`].
pub fn grad_check_eval(
    cfg: &ModelConfig,
    store: &ParamStore,
    fixture: &GradCheckFixture,
    want_grads: bool,
) -> Result<(f64, Option<GradMap>)> {
    let mut tape = Tape::new(Precision::F64);
    let mut tp = TapeParams::new(store);
    let loss = forward_loss(
        &mut tape,
        &mut tp,
        cfg,
        &fixture.x_t,
        &fixture.target,
        &fixture.cond,
        fixture.t,
    )?;
    let loss_val = tape.scalar(loss);
    if !loss_val.is_finite() {
        return Err(Error::NonFinite("gradient-check loss".into()));
    }
    if !want_grads {
        return Ok((loss_val, None));
    }
    let grads = tape.backward(loss)?;
    Ok((loss_val, Some(tp.collect_grads(&grads))))
}

/// A deterministic random training instance for gradient checking.
#[derive(Debug, Clone)]
pub struct GradCheckFixture {
    pub x_t: Vec<f64>,
    pub target: Vec<f64>,
    pub cond: Conditions,
    pub t: f64,
}

impl GradCheckFixture {
    pub fn generate(cfg: &ModelConfig, seed: u64) -> Result<GradCheckFixture> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = cfg.base_resolution;
        let px = base * base * 3;
        let x_t: Vec<f64> = (0..px).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let target: Vec<f64> = (0..px).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let img = |rng: &mut ChaCha8Rng| {
            let values: Vec<f64> = (0..px).map(|_| rng.gen_range(0.0..1.0)).collect();
            ImageBuffer::new(base, base, 3, values)
        };
        let style_global = img(&mut rng)?;
        let style_locals: Vec<ImageBuffer> = (0..cfg.n_patches)
            .map(|_| img(&mut rng))
            .collect::<Result<_>>()?;
        let edge_values: Vec<u8> = (0..base * base).map(|_| rng.gen_range(0..=1u8)).collect();
        let canny = EdgeMap {
            width: base,
            height: base,
            values: edge_values,
        };
        Ok(GradCheckFixture {
            x_t,
            target,
            cond: Conditions {
                style_global,
                style_locals,
                canny,
                prompt: "ochre impasto brushwork".into(),
                lambda: 0.7,
            },
            t: 0.35,
        })
    }
}
