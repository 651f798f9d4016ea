//! Cross-attention fusion head predicting a global scene scale and per-frame
//! body translations from scene-geometry and body tokens.
//!
//! Queries are `[scale token | adapted body tokens]`; keys and values are the
//! adapted geometry tokens. Each decoder layer is pre-norm cross-attention
//! followed by a ReLU feed-forward block, both residual, with rotary
//! positions on queries and keys (the scale token sits at position 0, frame
//! `i` at `i + 1`).

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{rotary_apply, softplus, Mat, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::tensor_io::{read_tensor, write_tensor, TensorContainer};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignNetConfig {
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub geo_dim: usize,
    pub hmr_dim: usize,
    pub ffn_dim: usize,
    /// Rotary positions on queries and keys; off gives a position-free model.
    pub rotary: bool,
}

impl Default for AlignNetConfig {
    fn default() -> Self {
        Self::desk(16, 16)
    }
}

impl AlignNetConfig {
    /// Small configuration used for tests and synthetic training.
    pub fn desk(geo_dim: usize, hmr_dim: usize) -> Self {
        Self { hidden_dim: 64, layers: 2, heads: 4, geo_dim, hmr_dim, ffn_dim: 128, rotary: true }
    }

    pub fn full(geo_dim: usize, hmr_dim: usize) -> Self {
        Self { hidden_dim: 512, layers: 2, heads: 8, geo_dim, hmr_dim, ffn_dim: 2048, rotary: true }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return Err(Error::InvalidInput(format!(
                "hidden_dim {} must be a positive multiple of heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if self.rotary && self.head_dim() % 2 != 0 {
            return Err(Error::InvalidInput("rotary embeddings need an even head dimension".into()));
        }
        if self.layers == 0 || self.geo_dim == 0 || self.hmr_dim == 0 || self.ffn_dim == 0 {
            return Err(Error::InvalidInput("layers and feature dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Input tokens for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    /// One row per geometry token, `geo_dim` wide.
    pub geo: Mat,
    /// Frame index of each geometry row.
    pub geo_frame: Vec<usize>,
    /// One row per frame, `hmr_dim` wide.
    pub hmr: Mat,
}

impl TokenSequence {
    pub fn frames(&self) -> usize {
        self.hmr.rows
    }

    pub fn validate(&self, cfg: &AlignNetConfig) -> Result<()> {
        let n = self.frames();
        if n == 0 {
            return Err(Error::InvalidInput("token sequence has no frames".into()));
        }
        if self.hmr.cols != cfg.hmr_dim || self.geo.cols != cfg.geo_dim {
            return Err(Error::ShapeMismatch(format!(
                "token widths geo {} / hmr {}, config expects {} / {}",
                self.geo.cols, self.hmr.cols, cfg.geo_dim, cfg.hmr_dim
            )));
        }
        if self.geo.rows == 0 || self.geo_frame.len() != self.geo.rows || self.geo_frame.iter().any(|&f| f >= n) {
            return Err(Error::ShapeMismatch("geometry tokens need one valid frame index per row".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignOutput {
    pub scale: f64,
    /// Translations in the unit-scale reconstruction frame.
    pub raw_translations: Vec<Vec3>,
    /// `scale · raw_translations`: camera-frame meters.
    pub translations: Vec<Vec3>,
}

/// Differentiable outputs: `scale` is 1×1, `raw_translations` N×3.
#[derive(Debug, Clone, Copy)]
pub struct AlignVars {
    pub scale: Var,
    pub raw_translations: Var,
}

#[derive(Debug, Clone)]
struct LayerIds {
    ln_q: (ParamId, ParamId),
    ln_kv: (ParamId, ParamId),
    wq: (ParamId, ParamId),
    wk: (ParamId, ParamId),
    wv: (ParamId, ParamId),
    wo: (ParamId, ParamId),
    ln_ff: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
struct Layout {
    geo_adapter: (ParamId, ParamId),
    hmr_adapter: (ParamId, ParamId),
    scale_token: ParamId,
    layers: Vec<LayerIds>,
    ln_out: (ParamId, ParamId),
    scale_head: (ParamId, ParamId),
    trans_head: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
pub struct AlignNet {
    pub cfg: AlignNetConfig,
    pub params: ParamStore,
    layout: Layout,
}

struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init {
    fn gauss(&mut self, r: usize, c: usize) -> Mat {
        Mat { rows: r, cols: c, data: (0..r * c).map(|_| self.normal.sample(&mut self.rng)).collect() }
    }
}

fn build_layout(cfg: &AlignNetConfig, store: &mut ParamStore, init: Option<&mut Init>) -> Layout {
    let d = cfg.hidden_dim;
    let mut init = init;
    let mut w = |store: &mut ParamStore, name: String, r: usize, c: usize| -> ParamId {
        let m = match init.as_deref_mut() {
            Some(i) => i.gauss(r, c),
            None => Mat::zeros(r, c),
        };
        store.add(name, m)
    };
    let z = |store: &mut ParamStore, name: String, r: usize, c: usize| store.add(name, Mat::zeros(r, c));
    let one = |store: &mut ParamStore, name: String, c: usize| store.add(name, Mat::filled(1, c, 1.0));
    let scale_token = w(store, "scale_token".into(), 1, d);
    let mut lin = |store: &mut ParamStore, name: &str, r: usize, c: usize| {
        (w(store, format!("{name}.weight"), r, c), z(store, format!("{name}.bias"), 1, c))
    };
    let geo_adapter = lin(store, "geo_adapter", cfg.geo_dim, d);
    let hmr_adapter = lin(store, "hmr_adapter", cfg.hmr_dim, d);
    let mut layers = Vec::new();
    for l in 0..cfg.layers {
        let p = format!("layers.{l}");
        let ln_q = (one(store, format!("{p}.ln_q.gain"), d), z(store, format!("{p}.ln_q.bias"), 1, d));
        let ln_kv = (one(store, format!("{p}.ln_kv.gain"), d), z(store, format!("{p}.ln_kv.bias"), 1, d));
        let wq = lin(store, &format!("{p}.attn.q"), d, d);
        let wk = lin(store, &format!("{p}.attn.k"), d, d);
        let wv = lin(store, &format!("{p}.attn.v"), d, d);
        let wo = lin(store, &format!("{p}.attn.out"), d, d);
        let ln_ff = (one(store, format!("{p}.ln_ff.gain"), d), z(store, format!("{p}.ln_ff.bias"), 1, d));
        let ff1 = lin(store, &format!("{p}.ffn.0"), d, cfg.ffn_dim);
        let ff2 = lin(store, &format!("{p}.ffn.1"), cfg.ffn_dim, d);
        layers.push(LayerIds { ln_q, ln_kv, wq, wk, wv, wo, ln_ff, ff1, ff2 });
    }
    let ln_out = (one(store, "ln_out.gain".into(), d), z(store, "ln_out.bias".into(), 1, d));
    let scale_head = lin(store, "scale_head", d, 1);
    let trans_head = lin(store, "translation_head", d, 3);
    Layout { geo_adapter, hmr_adapter, scale_token, layers, ln_out, scale_head, trans_head }
}

/// Applies the translation activation row-wise: `z = softplus(raw_z)`,
/// output `(raw_x·z, raw_y·z, z)`.
pub fn translation_head(raw: &Vec3) -> Vec3 {
    let z = softplus(raw[2]);
    [raw[0] * z, raw[1] * z, z]
}

pub fn rotary_embed(tokens: &Mat, positions: &[f64]) -> Result<Mat> {
    if tokens.cols % 2 != 0 {
        return Err(Error::InvalidInput(format!("rotary embedding needs an even width, got {}", tokens.cols)));
    }
    if positions.len() != tokens.rows {
        return Err(Error::ShapeMismatch("one position per token required".into()));
    }
    Ok(rotary_apply(tokens, positions, tokens.cols, 1.0))
}

impl AlignNet {
    pub fn new(cfg: AlignNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let std = 1.0 / (cfg.hidden_dim as f64).sqrt();
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed), normal: Normal::new(0.0, std).expect("valid std") };
        let mut params = ParamStore::new();
        let layout = build_layout(&cfg, &mut params, Some(&mut init));
        Ok(Self { cfg, params, layout })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Records a forward pass using the parameter values in `store`, which
    /// must have this network's layout.
    pub fn forward_tape(&self, t: &mut Tape, store: &ParamStore, tokens: &TokenSequence) -> Result<AlignVars> {
        tokens.validate(&self.cfg)?;
        let cfg = &self.cfg;
        let lay = &self.layout;
        let n = tokens.frames();
        let dh = cfg.head_dim();
        let p = |t: &mut Tape, id: ParamId| t.param(store, id);
        let linear = |t: &mut Tape, x: Var, (w, b): (ParamId, ParamId)| {
            let w = t.param(store, w);
            let b = t.param(store, b);
            let y = t.matmul(x, w);
            t.add_row(y, b)
        };
        let norm = |t: &mut Tape, x: Var, (g, b): (ParamId, ParamId)| {
            let y = t.layernorm_rows(x, LN_EPS);
            let g = t.param(store, g);
            let b = t.param(store, b);
            let y = t.mul_row(y, g);
            t.add_row(y, b)
        };

        let geo = t.constant(tokens.geo.clone());
        let hmr = t.constant(tokens.hmr.clone());
        let kv = linear(t, geo, lay.geo_adapter);
        let h = linear(t, hmr, lay.hmr_adapter);
        let st = p(t, lay.scale_token);
        let mut q = t.concat_rows(&[st, h]);
        let qpos: Vec<f64> = (0..=n).map(|i| i as f64).collect();
        let kpos: Vec<f64> = tokens.geo_frame.iter().map(|&f| (f + 1) as f64).collect();
        let inv_sqrt = 1.0 / (dh as f64).sqrt();

        for l in &lay.layers {
            let qn = norm(t, q, l.ln_q);
            let kn = norm(t, kv, l.ln_kv);
            let mut qq = linear(t, qn, l.wq);
            let mut kk = linear(t, kn, l.wk);
            let vv = linear(t, kn, l.wv);
            if cfg.rotary {
                qq = t.rotary(qq, &qpos, dh);
                kk = t.rotary(kk, &kpos, dh);
            }
            let mut heads = Vec::with_capacity(cfg.heads);
            for hd in 0..cfg.heads {
                let (c0, c1) = (hd * dh, (hd + 1) * dh);
                let qh = t.slice_cols(qq, c0, c1);
                let kh = t.slice_cols(kk, c0, c1);
                let vh = t.slice_cols(vv, c0, c1);
                let kt = t.transpose(kh);
                let logits = t.matmul(qh, kt);
                let logits = t.scale(logits, inv_sqrt);
                let a = t.softmax_rows(logits);
                heads.push(t.matmul(a, vh));
            }
            let cat = t.concat_cols(&heads);
            let o = linear(t, cat, l.wo);
            q = t.add(q, o);
            let f = norm(t, q, l.ln_ff);
            let f = linear(t, f, l.ff1);
            let f = t.relu(f);
            let f = linear(t, f, l.ff2);
            q = t.add(q, f);
        }
        let out = norm(t, q, lay.ln_out);
        let s_tok = t.slice_rows(out, 0, 1);
        let f_tok = t.slice_rows(out, 1, n + 1);
        let logit = linear(t, s_tok, lay.scale_head);
        let scale = t.softplus(logit);
        let raw = linear(t, f_tok, lay.trans_head);
        let xy = t.slice_cols(raw, 0, 2);
        let zr = t.slice_cols(raw, 2, 3);
        let z = t.softplus(zr);
        let zz = t.concat_cols(&[z, z]);
        let xy = t.mul(xy, zz);
        let raw_translations = t.concat_cols(&[xy, z]);
        Ok(AlignVars { scale, raw_translations })
    }

    pub fn forward(&self, tokens: &TokenSequence) -> Result<AlignOutput> {
        let mut t = Tape::new();
        let v = self.forward_tape(&mut t, &self.params, tokens)?;
        let scale = t.scalar_value(v.scale);
        let raw = t.value(v.raw_translations).to_rows3();
        let out = AlignOutput {
            scale,
            translations: raw.iter().map(|r| [r[0] * scale, r[1] * scale, r[2] * scale]).collect(),
            raw_translations: raw,
        };
        if !(out.scale > 0.0) || out.raw_translations.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("alignnet output".into()));
        }
        Ok(out)
    }

    /// Writes `manifest.json` plus one float32 container per parameter.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::new();
        for p in &self.params.params {
            let file = format!("{}.tc", p.name);
            let c = TensorContainer::from_f64(p.name.clone(), vec![p.value.rows, p.value.cols], &p.value.data)?;
            write_tensor(&c, dir.join(&file))?;
            entries.push(WeightEntry { name: p.name.clone(), file, shape: [p.value.rows, p.value.cols] });
        }
        let m = WeightsManifest { config: self.cfg, params: entries };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&m)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: WeightsManifest = serde_json::from_str(&text)?;
        m.config.validate()?;
        let mut params = ParamStore::new();
        let layout = build_layout(&m.config, &mut params, None);
        for p in &mut params.params {
            let e = m
                .params
                .iter()
                .find(|e| e.name == p.name)
                .ok_or_else(|| Error::MissingField(p.name.clone()))?;
            let c = read_tensor(dir.join(&e.file))?;
            if c.shape != [p.value.rows, p.value.cols] {
                return Err(Error::ShapeMismatch(format!("weight `{}` has shape {:?}", p.name, c.shape)));
            }
            p.value.data = c.to_f64();
        }
        Ok(Self { cfg: m.config, params, layout })
    }

    /// Rounds every weight through float32, matching what [`AlignNet::save`] stores.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params.params {
            p.value.data.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightEntry {
    name: String,
    file: String,
    shape: [usize; 2],
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightsManifest {
    config: AlignNetConfig,
    params: Vec<WeightEntry>,
}
