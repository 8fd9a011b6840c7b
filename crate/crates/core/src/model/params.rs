use std::collections::HashMap;
use std::sync::Arc;

use crate::linalg::Scalar;
use crate::rng::RngHandle;

use super::{ModelConfig, ModelError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Init {
    Normal,
    /// Residual-branch output projection, std scaled by `1/sqrt(2·n_layers)`.
    ResidualNormal,
    Zeros,
    Ones,
}

/// One named dense array inside the flat parameter buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
    /// Whether decoupled weight decay applies (matrices only).
    pub decay: bool,
    pub(crate) init: Init,
}

/// Offsets of the arrays of one transformer block.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BlockOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub qkv_w: usize,
    pub qkv_b: usize,
    pub proj_w: usize,
    pub proj_b: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub fc_w: usize,
    pub fc_b: usize,
    pub mproj_w: usize,
    pub mproj_b: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct Offsets {
    pub embed_w: usize,
    pub embed_b: usize,
    pub pos: usize,
    pub blocks: Vec<BlockOffsets>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub readout_w: usize,
    pub readout_b: usize,
}

/// Names, shapes and offsets of every trainable array, in storage order.
#[derive(Clone, Debug)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
    total: usize,
    pub(crate) offsets: Offsets,
}

impl PartialEq for ParamLayout {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let (e, f, w) = (cfg.d_embed, cfg.mlp_width(), cfg.token_width());
        let mut entries = Vec::new();
        let mut total = 0;
        let mut push = |name: String, shape: Vec<usize>, decay: bool, init: Init| -> usize {
            let len = shape.iter().product();
            entries.push(ParamEntry { name, shape, offset: total, len, decay, init });
            total += len;
            total - len
        };
        let embed_w = push("embed.weight".into(), vec![w, e], true, Init::Normal);
        let embed_b = push("embed.bias".into(), vec![e], false, Init::Zeros);
        let pos = push("pos_embed".into(), vec![cfg.max_tokens(), e], false, Init::Normal);
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("blocks.{l}.{s}");
            blocks.push(BlockOffsets {
                ln1_g: push(p("ln1.gain"), vec![e], false, Init::Ones),
                ln1_b: push(p("ln1.bias"), vec![e], false, Init::Zeros),
                qkv_w: push(p("attn.qkv.weight"), vec![e, 3 * e], true, Init::Normal),
                qkv_b: push(p("attn.qkv.bias"), vec![3 * e], false, Init::Zeros),
                proj_w: push(p("attn.proj.weight"), vec![e, e], true, Init::ResidualNormal),
                proj_b: push(p("attn.proj.bias"), vec![e], false, Init::Zeros),
                ln2_g: push(p("ln2.gain"), vec![e], false, Init::Ones),
                ln2_b: push(p("ln2.bias"), vec![e], false, Init::Zeros),
                fc_w: push(p("mlp.fc.weight"), vec![e, f], true, Init::Normal),
                fc_b: push(p("mlp.fc.bias"), vec![f], false, Init::Zeros),
                mproj_w: push(p("mlp.proj.weight"), vec![f, e], true, Init::ResidualNormal),
                mproj_b: push(p("mlp.proj.bias"), vec![e], false, Init::Zeros),
            });
        }
        let lnf_g = push("ln_f.gain".into(), vec![e], false, Init::Ones);
        let lnf_b = push("ln_f.bias".into(), vec![e], false, Init::Zeros);
        let readout_w = push("readout.weight".into(), vec![e, 1], true, Init::Normal);
        let readout_b = push("readout.bias".into(), vec![1], false, Init::Zeros);
        let by_name = entries.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        let offsets = Offsets { embed_w, embed_b, pos, blocks, lnf_g, lnf_b, readout_w, readout_b };
        Ok(Self { entries, by_name, total, offsets })
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.by_name.get(name).map(|&i| &self.entries[i])
    }

    pub fn total(&self) -> usize {
        self.total
    }
}

/// Total number of trainable scalars for a config.
pub fn param_count(cfg: &ModelConfig) -> Result<usize, ModelError> {
    Ok(ParamLayout::new(cfg)?.total())
}

/// All trainable arrays in one flat buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    cfg: ModelConfig,
    layout: Arc<ParamLayout>,
    data: Vec<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(cfg: &ModelConfig) -> Result<Self, ModelError> {
        let layout = Arc::new(ParamLayout::new(cfg)?);
        let data = vec![T::zero(); layout.total()];
        Ok(Self { cfg: cfg.clone(), layout, data })
    }

    pub fn from_flat(cfg: &ModelConfig, data: Vec<T>) -> Result<Self, ModelError> {
        let layout = Arc::new(ParamLayout::new(cfg)?);
        if data.len() != layout.total() {
            return Err(ModelError::Shape(format!("{} values for {} parameters", data.len(), layout.total())));
        }
        Ok(Self { cfg: cfg.clone(), layout, data })
    }

    /// A zeroed buffer with the same layout.
    pub fn zeros_like(&self) -> Self {
        Self { cfg: self.cfg.clone(), layout: self.layout.clone(), data: vec![T::zero(); self.data.len()] }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn flat(&self) -> &[T] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn array(&self, name: &str) -> Option<&[T]> {
        self.layout.get(name).map(|p| &self.data[p.offset..p.offset + p.len])
    }

    pub fn array_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let p = self.layout.get(name)?.clone();
        Some(&mut self.data[p.offset..p.offset + p.len])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same values, other precision.
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let mut cfg = self.cfg.clone();
        cfg.precision = if U::DTYPE == "f32" { super::Precision::Fp32 } else { super::Precision::Fp64 };
        ModelParams { cfg, layout: self.layout.clone(), data: self.data.iter().map(|v| U::of(v.f64())).collect() }
    }

    pub(crate) fn at(&self, offset: usize, len: usize) -> &[T] {
        &self.data[offset..offset + len]
    }

    pub(crate) fn at_mut(&mut self, offset: usize, len: usize) -> &mut [T] {
        &mut self.data[offset..offset + len]
    }
}

/// GPT-2 style initialisation: `N(0, 0.02)` weights and positional embeddings,
/// residual output projections scaled by `1/sqrt(2·n_layers)`, zero biases,
/// unit LayerNorm gains. Values are drawn in `f64` and rounded, so the fp32
/// and fp64 models from one seed agree up to rounding.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, rng: &mut RngHandle) -> Result<ModelParams<T>, ModelError> {
    let mut p = ModelParams::<T>::zeros(cfg)?;
    let resid = 0.02 / (2.0 * cfg.n_layers as f64).sqrt();
    let entries = p.layout.entries().to_vec();
    for e in entries {
        let dst = &mut p.data[e.offset..e.offset + e.len];
        match e.init {
            Init::Zeros => {}
            Init::Ones => dst.iter_mut().for_each(|v| *v = T::one()),
            Init::Normal | Init::ResidualNormal => {
                let sd = if e.init == Init::Normal { 0.02 } else { resid };
                for v in dst.iter_mut() {
                    *v = T::of(sd * rng.normal());
                }
            }
        }
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Precision;

    /// Parameter count summed independently from the architecture.
    fn closed_form(l: usize, e: usize, d: usize, k: usize) -> usize {
        let embed = (d + 1) * e + e;
        let pos = 2 * k * e;
        let attn = e * 3 * e + 3 * e + e * e + e;
        let mlp = e * 4 * e + 4 * e + 4 * e * e + e;
        let norms = 4 * e;
        let head = 2 * e + e + 1;
        embed + pos + l * (attn + mlp + norms) + head
    }

    #[test]
    fn base_param_count() {
        let cfg = ModelConfig::base(8, 16);
        assert_eq!(param_count(&cfg).unwrap(), closed_form(8, 128, 8, 16));
        // 8·(12·128² + 13·128) + 9·128 + 128 + 32·128 + 3·128 + 1
        assert_eq!(param_count(&cfg).unwrap(), 1_591_937);
        let desk = ModelConfig::desk(8, 16);
        assert_eq!(param_count(&desk).unwrap(), closed_form(4, 64, 8, 16));
    }

    #[test]
    fn layout_is_contiguous_and_named() {
        let cfg = ModelConfig::desk(3, 5);
        let layout = ParamLayout::new(&cfg).unwrap();
        let mut next = 0;
        for e in layout.entries() {
            assert_eq!(e.offset, next);
            next += e.len;
        }
        assert_eq!(next, layout.total());
        assert_eq!(layout.get("blocks.3.mlp.fc.weight").unwrap().shape, vec![64, 256]);
        assert!(!layout.get("pos_embed").unwrap().decay);
        assert!(!layout.get("blocks.0.ln1.gain").unwrap().decay);
        assert!(layout.get("readout.weight").unwrap().decay);
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::desk(8, 16);
        let a: ModelParams<f32> = init_params(&cfg, &mut RngHandle::new(0, "init")).unwrap();
        let b: ModelParams<f32> = init_params(&cfg, &mut RngHandle::new(0, "init")).unwrap();
        assert_eq!(a.flat(), b.flat());
        let c: ModelParams<f32> = init_params(&cfg, &mut RngHandle::new(1, "init")).unwrap();
        assert_ne!(a.flat(), c.flat());
        assert!(a.array("blocks.0.ln1.gain").unwrap().iter().all(|v| *v == 1.0));
        assert!(a.array("embed.bias").unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rejects_bad_heads() {
        let cfg = ModelConfig { n_heads: 3, ..ModelConfig::base(8, 16) };
        assert!(init_params::<f64>(&cfg, &mut RngHandle::new(0, "init")).is_err());
        let _ = Precision::Fp32;
    }
}
