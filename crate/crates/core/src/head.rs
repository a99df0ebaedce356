//! Text-conditioned affordance map generation.
//!
//! The text class token is aligned to the image feature space with one
//! linear layer, prepended to the image tokens, and the sequence runs
//! through a pre-norm transformer encoder. The image-token outputs are
//! projected to one channel by two 3x3 convolutions and min-max normalized.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoders::FeatureGrid;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

/// Range below which a raw map counts as constant.
pub const DEGENERATE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub dim: usize,
    pub text_dim: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub conv_hidden: usize,
    pub positional: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            dim: 768,
            text_dim: 768,
            grid_height: 24,
            grid_width: 24,
            layers: 4,
            heads: 4,
            ffn_hidden: 1536,
            conv_hidden: 384,
            positional: true,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.text_dim == 0 || self.layers == 0 || self.heads == 0 {
            return Err(Error::Config("head dimensions must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.grid_height == 0 || self.grid_width == 0 || self.conv_hidden == 0 || self.ffn_hidden == 0 {
            return Err(Error::Config("head grid and hidden sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.grid_height * self.grid_width
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffordanceMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    /// Set when the raw map was constant and normalization produced zeros.
    pub degenerate: bool,
}

impl AffordanceMap {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.width + j]
    }
}

/// Min-max normalization of a raw map. Constant maps become all zeros with
/// the degeneracy flag set.
pub fn minmax_norm(raw: &[f64], height: usize, width: usize) -> Result<AffordanceMap> {
    if raw.len() != height * width || raw.is_empty() {
        return Err(Error::shape(format!("{} values for a {height}x{width} map", raw.len())));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            stage: "min-max input".into(),
        });
    }
    let (lo, hi) = raw
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    let degenerate = range < DEGENERATE_EPS;
    let values = if degenerate {
        vec![0.0; raw.len()]
    } else {
        raw.iter().map(|v| (v - lo) / range).collect()
    };
    Ok(AffordanceMap {
        height,
        width,
        values,
        degenerate,
    })
}

#[derive(Debug, Clone)]
struct LayerIds {
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
struct PositionalIds {
    image: ParamId,
    text: ParamId,
}

/// Parameter handles for the grounding head; values live in a
/// [`ParamStore`] so the optimizer and checkpoints see one flat namespace.
#[derive(Debug, Clone)]
pub struct AffordanceHead {
    pub config: HeadConfig,
    text_w: ParamId,
    text_b: ParamId,
    positional: Option<PositionalIds>,
    layers: Vec<LayerIds>,
    out_gain: ParamId,
    out_bias: ParamId,
    conv1_w: ParamId,
    conv1_b: ParamId,
    conv2_w: ParamId,
    conv2_b: ParamId,
}

/// Result of a head forward pass recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    /// `(h*w) x 1` normalized map.
    pub map: Var,
    /// `(h*w) x 1` pre-normalization map.
    pub raw: Var,
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Weight,
    Zero,
    One,
    Positional,
}

fn param_names(cfg: &HeadConfig) -> Vec<(String, (usize, usize), Init)> {
    use Init::*;
    let d = cfg.dim;
    let mut names = vec![
        ("head.text_align.weight".to_string(), (cfg.text_dim, d), Weight),
        ("head.text_align.bias".to_string(), (1, d), Zero),
    ];
    if cfg.positional {
        names.push(("head.pos.image".into(), (cfg.tokens(), d), Positional));
        names.push(("head.pos.text".into(), (1, d), Positional));
    }
    for l in 0..cfg.layers {
        let p = |s: &str| format!("head.fusion.{l}.{s}");
        names.extend([
            (p("ln1.gain"), (1, d), One),
            (p("ln1.bias"), (1, d), Zero),
            (p("attn.wq"), (d, d), Weight),
            (p("attn.bq"), (1, d), Zero),
            (p("attn.wk"), (d, d), Weight),
            (p("attn.bk"), (1, d), Zero),
            (p("attn.wv"), (d, d), Weight),
            (p("attn.bv"), (1, d), Zero),
            (p("attn.wo"), (d, d), Weight),
            (p("attn.bo"), (1, d), Zero),
            (p("ln2.gain"), (1, d), One),
            (p("ln2.bias"), (1, d), Zero),
            (p("ffn.w1"), (d, cfg.ffn_hidden), Weight),
            (p("ffn.b1"), (1, cfg.ffn_hidden), Zero),
            (p("ffn.w2"), (cfg.ffn_hidden, d), Weight),
            (p("ffn.b2"), (1, d), Zero),
        ]);
    }
    names.extend([
        ("head.fusion.out.gain".to_string(), (1, d), One),
        ("head.fusion.out.bias".to_string(), (1, d), Zero),
        ("head.proj.conv1.weight".to_string(), (9 * d, cfg.conv_hidden), Weight),
        ("head.proj.conv1.bias".to_string(), (1, cfg.conv_hidden), Zero),
        ("head.proj.conv2.weight".to_string(), (9 * cfg.conv_hidden, 1), Weight),
        ("head.proj.conv2.bias".to_string(), (1, 1), Zero),
    ]);
    names
}

impl AffordanceHead {
    /// Registers freshly initialized head parameters in `store`.
    pub fn init<R: Rng + ?Sized>(config: HeadConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        for (name, (rows, cols), init) in param_names(&config) {
            let value = match init {
                Init::Zero => Matrix::zeros(rows, cols),
                Init::One => Matrix::filled(rows, cols, 1.0),
                Init::Positional => Matrix::randn(rows, cols, 0.1, rng),
                Init::Weight => Matrix::randn(rows, cols, (2.0 / (rows + cols) as f64).sqrt(), rng),
            };
            store.add(name, value);
        }
        Self::bind(config, store)
    }

    /// Looks up existing parameters by name, checking shapes.
    pub fn bind(config: HeadConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let shapes: std::collections::HashMap<String, (usize, usize)> = param_names(&config)
            .into_iter()
            .map(|(name, shape, _)| (name, shape))
            .collect();
        let get = |name: &str| store.require(name, shapes[name]);
        let positional = if config.positional {
            Some(PositionalIds {
                image: get("head.pos.image")?,
                text: get("head.pos.text")?,
            })
        } else {
            None
        };
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = |s: &str| format!("head.fusion.{l}.{s}");
            layers.push(LayerIds {
                ln1_gain: get(&p("ln1.gain"))?,
                ln1_bias: get(&p("ln1.bias"))?,
                wq: get(&p("attn.wq"))?,
                bq: get(&p("attn.bq"))?,
                wk: get(&p("attn.wk"))?,
                bk: get(&p("attn.bk"))?,
                wv: get(&p("attn.wv"))?,
                bv: get(&p("attn.bv"))?,
                wo: get(&p("attn.wo"))?,
                bo: get(&p("attn.bo"))?,
                ln2_gain: get(&p("ln2.gain"))?,
                ln2_bias: get(&p("ln2.bias"))?,
                w1: get(&p("ffn.w1"))?,
                b1: get(&p("ffn.b1"))?,
                w2: get(&p("ffn.w2"))?,
                b2: get(&p("ffn.b2"))?,
            });
        }
        Ok(AffordanceHead {
            text_w: get("head.text_align.weight")?,
            text_b: get("head.text_align.bias")?,
            positional,
            layers,
            out_gain: get("head.fusion.out.gain")?,
            out_bias: get("head.fusion.out.bias")?,
            conv1_w: get("head.proj.conv1.weight")?,
            conv1_b: get("head.proj.conv1.bias")?,
            conv2_w: get("head.proj.conv2.weight")?,
            conv2_b: get("head.proj.conv2.bias")?,
            config,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.text_w, self.text_b];
        if let Some(p) = &self.positional {
            ids.extend([p.image, p.text]);
        }
        for l in &self.layers {
            ids.extend([
                l.ln1_gain, l.ln1_bias, l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo, l.ln2_gain,
                l.ln2_bias, l.w1, l.b1, l.w2, l.b2,
            ]);
        }
        ids.extend([
            self.out_gain,
            self.out_bias,
            self.conv1_w,
            self.conv1_b,
            self.conv2_w,
            self.conv2_b,
        ]);
        ids
    }

    fn check_grid(&self, grid: &FeatureGrid) -> Result<()> {
        let c = &self.config;
        if grid.dim() != c.dim {
            return Err(Error::shape(format!("grid dim {} != head dim {}", grid.dim(), c.dim)));
        }
        if (grid.height, grid.width) != (c.grid_height, c.grid_width) {
            return Err(Error::shape(format!(
                "grid {}x{} != head grid {}x{}",
                grid.height, grid.width, c.grid_height, c.grid_width
            )));
        }
        Ok(())
    }

    /// Single linear layer from text space to image feature space; `token`
    /// is `1 x text_dim`.
    pub fn align_text_tape(&self, tape: &mut Tape, store: &ParamStore, token: Var) -> Result<Var> {
        if tape.value(token).shape() != (1, self.config.text_dim) {
            return Err(Error::shape(format!(
                "text token shape {:?}, expected (1, {})",
                tape.value(token).shape(),
                self.config.text_dim
            )));
        }
        let w = tape.param(store, self.text_w);
        let b = tape.param(store, self.text_b);
        Ok(tape.linear(token, w, b))
    }

    /// Runs `[text ; image tokens]` through the transformer and returns the
    /// image-token part, `(h*w) x d`.
    pub fn fuse_tape(&self, tape: &mut Tape, store: &ParamStore, grid: Var, text: Var) -> Result<Var> {
        let cfg = &self.config;
        let (n_img, d) = tape.value(grid).shape();
        if d != cfg.dim || tape.value(text).shape() != (1, d) {
            return Err(Error::shape(format!(
                "fusion inputs {:?} / {:?} for model dim {}",
                tape.value(grid).shape(),
                tape.value(text).shape(),
                cfg.dim
            )));
        }
        let (grid, text) = match &self.positional {
            Some(pos) => {
                if n_img != cfg.tokens() {
                    return Err(Error::shape(format!(
                        "{n_img} image tokens but positional table holds {}",
                        cfg.tokens()
                    )));
                }
                let pi = tape.param(store, pos.image);
                let pt = tape.param(store, pos.text);
                (tape.add(grid, pi), tape.add(text, pt))
            }
            None => (grid, text),
        };
        let mut x = tape.concat_rows(&[text, grid]);
        for (l, layer) in self.layers.iter().enumerate() {
            x = self.encoder_layer(tape, store, layer, x);
            if !tape.value(x).is_finite() {
                return Err(Error::Numeric {
                    stage: format!("fusion layer {l}"),
                });
            }
        }
        let g = tape.param(store, self.out_gain);
        let b = tape.param(store, self.out_bias);
        let x = tape.layer_norm(x, g, b);
        Ok(tape.slice_rows(x, 1, n_img))
    }

    fn encoder_layer(&self, tape: &mut Tape, store: &ParamStore, ids: &LayerIds, x: Var) -> Var {
        let d = self.config.dim;
        let heads = self.config.heads;
        let dh = d / heads;

        let g1 = tape.param(store, ids.ln1_gain);
        let b1 = tape.param(store, ids.ln1_bias);
        let h = tape.layer_norm(x, g1, b1);
        let (wq, bq) = (tape.param(store, ids.wq), tape.param(store, ids.bq));
        let (wk, bk) = (tape.param(store, ids.wk), tape.param(store, ids.bk));
        let (wv, bv) = (tape.param(store, ids.wv), tape.param(store, ids.bv));
        let q = tape.linear(h, wq, bq);
        let k = tape.linear(h, wk, bk);
        let v = tape.linear(h, wv, bv);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for head in 0..heads {
            let qh = tape.slice_cols(q, head * dh, dh);
            let kh = tape.slice_cols(k, head * dh, dh);
            let vh = tape.slice_cols(v, head * dh, dh);
            let scores = tape.matmul_nt(qh, kh);
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores);
            outs.push(tape.matmul(attn, vh));
        }
        let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
        let (wo, bo) = (tape.param(store, ids.wo), tape.param(store, ids.bo));
        let attn_out = tape.linear(cat, wo, bo);
        let x = tape.add(x, attn_out);

        let g2 = tape.param(store, ids.ln2_gain);
        let b2 = tape.param(store, ids.ln2_bias);
        let h = tape.layer_norm(x, g2, b2);
        let (w1, fb1) = (tape.param(store, ids.w1), tape.param(store, ids.b1));
        let (w2, fb2) = (tape.param(store, ids.w2), tape.param(store, ids.b2));
        let f = tape.linear(h, w1, fb1);
        let f = tape.gelu(f);
        let f = tape.linear(f, w2, fb2);
        tape.add(x, f)
    }

    /// Two 3x3 convolutions (ReLU between) down to a single channel.
    pub fn project_map_tape(&self, tape: &mut Tape, store: &ParamStore, fused: Var) -> Result<Var> {
        let cfg = &self.config;
        if tape.value(fused).shape() != (cfg.tokens(), cfg.dim) {
            return Err(Error::shape(format!(
                "fused features {:?}, expected ({}, {})",
                tape.value(fused).shape(),
                cfg.tokens(),
                cfg.dim
            )));
        }
        let (h, w) = (cfg.grid_height, cfg.grid_width);
        let cols = tape.im2col3x3(fused, h, w);
        let (w1, b1) = (tape.param(store, self.conv1_w), tape.param(store, self.conv1_b));
        let hidden = tape.linear(cols, w1, b1);
        let hidden = tape.relu(hidden);
        let cols = tape.im2col3x3(hidden, h, w);
        let (w2, b2) = (tape.param(store, self.conv2_w), tape.param(store, self.conv2_b));
        Ok(tape.linear(cols, w2, b2))
    }

    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        grid: &FeatureGrid,
        class_token: &[f64],
    ) -> Result<HeadOutput> {
        self.check_grid(grid)?;
        let g = tape.input(grid.values.clone());
        let t = tape.input(Matrix::row_vector(class_token.to_vec()));
        let text = self.align_text_tape(tape, store, t)?;
        let fused = self.fuse_tape(tape, store, g, text)?;
        let raw = self.project_map_tape(tape, store, fused)?;
        if !tape.value(raw).is_finite() {
            return Err(Error::Numeric {
                stage: "map projection".into(),
            });
        }
        let map = tape.min_max(raw, DEGENERATE_EPS);
        Ok(HeadOutput {
            map,
            raw,
            degenerate: tape.is_degenerate(map),
        })
    }

    pub fn align_text(&self, store: &ParamStore, class_token: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let t = tape.input(Matrix::row_vector(class_token.to_vec()));
        let out = self.align_text_tape(&mut tape, store, t)?;
        Ok(tape.value(out).data.clone())
    }

    pub fn fuse(&self, store: &ParamStore, grid: &FeatureGrid, text: &[f64]) -> Result<FeatureGrid> {
        let mut tape = Tape::new();
        let g = tape.input(grid.values.clone());
        let t = tape.input(Matrix::row_vector(text.to_vec()));
        let out = self.fuse_tape(&mut tape, store, g, t)?;
        FeatureGrid::new(grid.height, grid.width, tape.value(out).clone())
    }

    pub fn project_map(&self, store: &ParamStore, fused: &FeatureGrid) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let f = tape.input(fused.values.clone());
        let out = self.project_map_tape(&mut tape, store, f)?;
        Ok(tape.value(out).data.clone())
    }

    /// `minmax_norm(project_map(fuse(grid, align_text(token))))`.
    pub fn forward(&self, store: &ParamStore, grid: &FeatureGrid, class_token: &[f64]) -> Result<AffordanceMap> {
        let mut tape = Tape::new();
        let out = self.forward_tape(&mut tape, store, grid, class_token)?;
        Ok(AffordanceMap {
            height: grid.height,
            width: grid.width,
            values: tape.value(out.map).data.clone(),
            degenerate: out.degenerate,
        })
    }

    /// Forward over several inputs; output `k` corresponds to input `k`.
    pub fn forward_batch(
        &self,
        store: &ParamStore,
        inputs: &[(FeatureGrid, Vec<f64>)],
    ) -> Result<Vec<AffordanceMap>> {
        crate::par::try_map(inputs, |(g, t)| self.forward(store, g, t))
    }
}
