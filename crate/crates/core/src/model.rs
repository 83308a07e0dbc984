//! The assembled reward model: frozen backbone plus per-perspective modules
//! (projector, adapters, reward head), with the end-to-end backward pass and
//! checkpoint IO.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array1, Array2};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::lora::LoraSet;
use crate::backbone::{
    extract_patches, Backbone, BackboneCache, HiddenStates, LayerWeights, ModelConfig, Pooling,
    Projector, VisualTokens,
};
use crate::data::{PerspectiveTag, SyntheticImage, TextPrompt};
use crate::reward_head::{HeadCache, HeadKind, RewardHead, RewardMode, RewardOutput};
use crate::{Error, Result};

/// Trainable parameters of one perspective. Gradients reuse this type so the
/// parameter and gradient layouts can never drift apart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerspectiveParams {
    pub projector: Projector,
    pub lora: LoraSet,
    pub head: RewardHead,
}

pub type PerspectiveGrads = PerspectiveParams;

/// Named range into the flattened parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamGroup {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

impl PerspectiveParams {
    /// Visits every trainable tensor in canonical order.
    fn for_each_tensor(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("projector.w", self.projector.w.as_slice().unwrap());
        f("projector.b", self.projector.b.as_slice().unwrap());
        for (l, layer) in self.lora.layers.iter().enumerate() {
            f(&format!("lora.{l}.q.a"), layer.q.a.as_slice().unwrap());
            f(&format!("lora.{l}.q.b"), layer.q.b.as_slice().unwrap());
            f(&format!("lora.{l}.v.a"), layer.v.a.as_slice().unwrap());
            f(&format!("lora.{l}.v.b"), layer.v.b.as_slice().unwrap());
            f(&format!("lora.{l}.up.a"), layer.up.a.as_slice().unwrap());
            f(&format!("lora.{l}.up.b"), layer.up.b.as_slice().unwrap());
        }
        match &self.head {
            RewardHead::SkipCa(h) => {
                f("head.w_q", h.w_q.as_slice().unwrap());
                f("head.w_k", h.w_k.as_slice().unwrap());
                f("head.w_v", h.w_v.as_slice().unwrap());
                f("head.g_w", h.g_w.as_slice().unwrap());
                if let Some(b) = &h.g_b {
                    f("head.g_b", b.as_slice().unwrap());
                }
            }
            RewardHead::Linear(h) => {
                f("head.w", h.w.as_slice().unwrap());
                f("head.b", h.b.as_slice().unwrap());
            }
            RewardHead::Mlp(h) => {
                f("head.w1", h.w1.as_slice().unwrap());
                f("head.b1", h.b1.as_slice().unwrap());
                f("head.w2", h.w2.as_slice().unwrap());
                f("head.b2", h.b2.as_slice().unwrap());
            }
        }
    }

    fn for_each_tensor_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self.projector.w.as_slice_mut().unwrap());
        f(self.projector.b.as_slice_mut().unwrap());
        for layer in self.lora.layers.iter_mut() {
            f(layer.q.a.as_slice_mut().unwrap());
            f(layer.q.b.as_slice_mut().unwrap());
            f(layer.v.a.as_slice_mut().unwrap());
            f(layer.v.b.as_slice_mut().unwrap());
            f(layer.up.a.as_slice_mut().unwrap());
            f(layer.up.b.as_slice_mut().unwrap());
        }
        match &mut self.head {
            RewardHead::SkipCa(h) => {
                f(h.w_q.as_slice_mut().unwrap());
                f(h.w_k.as_slice_mut().unwrap());
                f(h.w_v.as_slice_mut().unwrap());
                f(h.g_w.as_slice_mut().unwrap());
                if let Some(b) = &mut h.g_b {
                    f(b.as_slice_mut().unwrap());
                }
            }
            RewardHead::Linear(h) => {
                f(h.w.as_slice_mut().unwrap());
                f(h.b.as_slice_mut().unwrap());
            }
            RewardHead::Mlp(h) => {
                f(h.w1.as_slice_mut().unwrap());
                f(h.b1.as_slice_mut().unwrap());
                f(h.w2.as_slice_mut().unwrap());
                f(h.b2.as_slice_mut().unwrap());
            }
        }
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(&mut |_, t| n += t.len());
        n
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        self.for_each_tensor(&mut |_, t| out.extend_from_slice(t));
        out
    }

    pub fn unflatten_from(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::Shape(format!(
                "flat vector has {} values, expected {}",
                flat.len(),
                self.n_params()
            )));
        }
        let mut offset = 0;
        self.for_each_tensor_mut(&mut |t| {
            let len = t.len();
            t.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        });
        Ok(())
    }

    pub fn param_groups(&self) -> Vec<ParamGroup> {
        let mut groups = Vec::new();
        let mut offset = 0;
        self.for_each_tensor(&mut |name, t| {
            groups.push(ParamGroup {
                name: name.to_string(),
                offset,
                len: t.len(),
            });
            offset += t.len();
        });
        groups
    }

    /// A same-shaped gradient accumulator, all zeros.
    pub fn zeros_like(&self) -> PerspectiveGrads {
        let mut g = self.clone();
        g.for_each_tensor_mut(&mut |t| t.fill(0.0));
        g
    }

    /// self += scale * other, tensor by tensor.
    pub fn add_scaled(&mut self, other: &PerspectiveParams, scale: f64) {
        let flat = other.flatten();
        let mut offset = 0;
        self.for_each_tensor_mut(&mut |t| {
            let len = t.len();
            for (dst, src) in t.iter_mut().zip(&flat[offset..offset + len]) {
                *dst += scale * src;
            }
            offset += len;
        });
    }
}

/// One registered perspective: its parameters plus merge bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerspectiveModule {
    pub params: PerspectiveParams,
    /// Set once the adapter deltas have been folded into `merged_layers`.
    pub merged: bool,
    pub merged_layers: Option<Vec<LayerWeights>>,
}

/// Everything one forward pass caches for the backward pass.
pub struct RewardCache {
    pub backbone: BackboneCache,
    pub patches: Array2<f64>,
    /// Projector output (always the raw projector tokens).
    pub e_v: VisualTokens,
    pub e_h: Array1<f64>,
    pub head: HeadCache,
    pub output: RewardOutput,
    visual_source_layer: usize,
}

impl RewardCache {
    pub fn hidden_states(&self) -> HiddenStates {
        self.backbone.hidden_states()
    }
}

/// Toy multimodal transformer plus a registry of per-perspective adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub perspectives: BTreeMap<PerspectiveTag, PerspectiveModule>,
}

impl ModelState {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::init(&config, seed)?;
        Ok(Self {
            config,
            backbone,
            perspectives: BTreeMap::new(),
        })
    }

    /// Registers a perspective with a freshly initialized module. Each
    /// perspective is an independent fine-tune with its own projector, head,
    /// and adapter stack.
    pub fn add_perspective(
        &mut self,
        tag: PerspectiveTag,
        kind: HeadKind,
        mode: RewardMode,
        seed: u64,
    ) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // decorrelate the projector/adapter/head streams
        let mut sub = || ChaCha8Rng::seed_from_u64(rng.next_u64());
        let projector = Projector::init(self.config.patch_dim(), self.config.d_model, &mut sub());
        let lora = LoraSet::init(
            self.config.n_layers,
            self.config.d_model,
            self.config.d_mlp(),
            self.config.lora_rank,
            self.config.lora_alpha,
            &mut sub(),
        );
        let head = RewardHead::init(
            kind,
            self.config.d_model,
            self.config.n_heads,
            mode,
            &mut sub(),
        )?;
        self.perspectives.insert(
            tag,
            PerspectiveModule {
                params: PerspectiveParams {
                    projector,
                    lora,
                    head,
                },
                merged: false,
                merged_layers: None,
            },
        );
        Ok(())
    }

    pub fn module(&self, tag: PerspectiveTag) -> Result<&PerspectiveModule> {
        self.perspectives
            .get(&tag)
            .ok_or_else(|| Error::UnknownPerspective(tag.to_string()))
    }

    pub fn module_mut(&mut self, tag: PerspectiveTag) -> Result<&mut PerspectiveModule> {
        self.perspectives
            .get_mut(&tag)
            .ok_or_else(|| Error::UnknownPerspective(tag.to_string()))
    }

    /// Runs the backbone and returns per-layer hidden states plus the
    /// projected visual tokens. `adapter: None` runs the pure frozen base
    /// model; `projector_of` names the perspective whose projector embeds
    /// the image.
    pub fn forward_states(
        &self,
        prompt: &TextPrompt,
        image: &SyntheticImage,
        adapter: Option<PerspectiveTag>,
        projector_of: PerspectiveTag,
        pad_to: Option<usize>,
    ) -> Result<(HiddenStates, VisualTokens)> {
        prompt.validate()?;
        let module = self.module(projector_of)?;
        let patches = extract_patches(image, self.config.patch_size)?;
        let e_v = module.params.projector.encode(&patches)?;
        let (lora, layers) = match adapter {
            Some(tag) => {
                let m = self.module(tag)?;
                if m.merged {
                    (None, m.merged_layers.as_deref())
                } else {
                    (Some(&m.params.lora), None)
                }
            }
            None => (None, None),
        };
        let cache = self.forward_body(
            &prompt.tokens,
            self.config.include_visual_in_body.then_some(&e_v),
            lora,
            layers,
            pad_to,
        )?;
        Ok((cache.hidden_states(), e_v))
    }

    fn forward_body(
        &self,
        tokens: &[u32],
        visual: Option<&VisualTokens>,
        lora: Option<&LoraSet>,
        override_layers: Option<&[LayerWeights]>,
        pad_to: Option<usize>,
    ) -> Result<BackboneCache> {
        match override_layers {
            Some(layers) => {
                let merged = Backbone {
                    tok_emb: self.backbone.tok_emb.clone(),
                    pos_emb: self.backbone.pos_emb.clone(),
                    layers: layers.to_vec(),
                };
                merged.forward_seq(&self.config, tokens, visual, None, pad_to)
            }
            None => self
                .backbone
                .forward_seq(&self.config, tokens, visual, lora, pad_to),
        }
    }

    /// Full reward pipeline with cached intermediates.
    pub fn forward_cached(
        &self,
        prompt: &TextPrompt,
        image: &SyntheticImage,
        tag: PerspectiveTag,
    ) -> Result<RewardCache> {
        prompt.validate()?;
        let module = self.module(tag)?;
        let patches = extract_patches(image, self.config.patch_size)?;
        let e_v = module.params.projector.encode(&patches)?;

        let (lora, layers) = if module.merged {
            (None, module.merged_layers.as_deref())
        } else {
            (Some(&module.params.lora), None)
        };
        let backbone = self.forward_body(
            &prompt.tokens,
            self.config.include_visual_in_body.then_some(&e_v),
            lora,
            layers,
            None,
        )?;

        let e_h = pooled_hidden(&backbone, self.config.hidden_layer, self.config.pooling)?;
        let src_layer = self.config.skipca_visual_layer;
        let src = if src_layer == 0 {
            e_v.clone()
        } else {
            backbone.x[src_layer]
                .slice(s![..backbone.layout.n_visual, ..])
                .to_owned()
        };
        let (output, head) = module.params.head.forward(&e_h, &src)?;
        Ok(RewardCache {
            backbone,
            patches,
            e_v,
            e_h,
            head,
            output,
            visual_source_layer: src_layer,
        })
    }

    /// Scores one (prompt, image) pair under a perspective.
    pub fn reward(
        &self,
        prompt: &TextPrompt,
        image: &SyntheticImage,
        tag: PerspectiveTag,
    ) -> Result<RewardOutput> {
        Ok(self.forward_cached(prompt, image, tag)?.output)
    }

    /// Backpropagates d loss / d reward-values through head, body, and
    /// projector, returning gradients for every trainable tensor.
    pub fn backward(
        &self,
        tag: PerspectiveTag,
        cache: &RewardCache,
        d_values: &Array1<f64>,
    ) -> Result<PerspectiveGrads> {
        let module = self.module(tag)?;
        if module.merged {
            return Err(Error::Config(
                "cannot train a merged perspective; keep the dynamic adapter for training".into(),
            ));
        }
        let config = &self.config;
        let layout = cache.backbone.layout;
        let n_layers = config.n_layers;

        let (d_e_h, d_src, head_grads) = module.params.head.backward(&cache.head, d_values);

        // hidden-state gradient injections per layer
        let mut d_hidden: Vec<Option<Array2<f64>>> = vec![None; n_layers + 1];
        {
            let inj = d_hidden[config.hidden_layer]
                .get_or_insert_with(|| Array2::zeros((layout.seq_len, config.d_model)));
            match config.pooling {
                Pooling::Eos => {
                    let mut row = inj.row_mut(layout.eos_pos);
                    row += &d_e_h;
                }
                Pooling::Mean => {
                    let scale = 1.0 / layout.content_len() as f64;
                    for p in 0..layout.content_len() {
                        let mut row = inj.row_mut(p);
                        row.scaled_add(scale, &d_e_h);
                    }
                }
            }
        }

        // visual-source gradient: either directly into the projector output
        // or injected at the hidden layer the head read from
        let mut d_e_v_direct: Option<Array2<f64>> = None;
        if let Some(d_src) = d_src {
            if cache.visual_source_layer == 0 {
                d_e_v_direct = Some(d_src);
            } else {
                let inj = d_hidden[cache.visual_source_layer]
                    .get_or_insert_with(|| Array2::zeros((layout.seq_len, config.d_model)));
                let mut rows = inj.slice_mut(s![..layout.n_visual, ..]);
                rows += &d_src;
            }
        }

        let adapter = Some(&module.params.lora);
        let (d_x0, lora_grads) =
            self.backbone
                .backward_seq(config, &cache.backbone, d_hidden, adapter);

        // total projector-output gradient: skip path plus body input rows
        let mut d_e_v = d_e_v_direct
            .unwrap_or_else(|| Array2::zeros((cache.e_v.nrows(), config.d_model)));
        if config.include_visual_in_body {
            d_e_v += &d_x0.slice(s![..layout.n_visual, ..]);
        }

        let projector = Projector {
            w: cache.patches.t().dot(&d_e_v),
            b: d_e_v.sum_axis(ndarray::Axis(0)),
        };

        Ok(PerspectiveGrads {
            projector,
            lora: lora_grads.expect("adapter grads requested for unmerged module"),
            head: head_grads,
        })
    }

    /// Folds the adapter deltas into a materialized copy of the base layers.
    /// Forwards afterwards use the merged weights; merging twice is an error.
    pub fn merge_perspective(&mut self, tag: PerspectiveTag) -> Result<()> {
        let base_layers = self.backbone.layers.clone();
        let module = self.module_mut(tag)?;
        if module.merged {
            return Err(Error::AlreadyMerged(tag.to_string()));
        }
        if module.params.lora.layers.len() != base_layers.len() {
            return Err(Error::Shape("adapter/backbone layer count mismatch".into()));
        }
        let mut merged = base_layers;
        for (layer, adapter) in merged.iter_mut().zip(&module.params.lora.layers) {
            layer.w_q = adapter.q.apply_to(&layer.w_q)?;
            layer.w_v = adapter.v.apply_to(&layer.w_v)?;
            layer.w_up = adapter.up.apply_to(&layer.w_up)?;
        }
        module.merged_layers = Some(merged);
        module.merged = true;
        Ok(())
    }

    /// Total parameter count: frozen base plus every registered module.
    pub fn total_params(&self) -> usize {
        self.backbone.n_params()
            + self
                .perspectives
                .values()
                .map(|m| m.params.n_params())
                .sum::<usize>()
    }
}

const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    schema_version: u32,
    config: ModelConfig,
    config_hash: String,
    backbone: Backbone,
    perspectives: BTreeMap<PerspectiveTag, PerspectiveModule>,
}

impl ModelState {
    /// Writes a versioned checkpoint carrying the config, its hash, the base
    /// weights, and every perspective module.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = CheckpointFile {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            config: self.config.clone(),
            config_hash: self.config.hash(),
            backbone: self.backbone.clone(),
            perspectives: self.perspectives.clone(),
        };
        let json = serde_json::to_string(&file)
            .map_err(|e| Error::Checkpoint(format!("serialize failed: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    /// Loads a checkpoint, rejecting version or config-hash mismatches.
    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)?;
        let file: CheckpointFile = serde_json::from_str(&json)
            .map_err(|e| Error::Checkpoint(format!("parse failed: {e}")))?;
        if file.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported schema version {}",
                file.schema_version
            )));
        }
        if file.config.hash() != file.config_hash {
            return Err(Error::Checkpoint(
                "config hash mismatch: checkpoint config was altered".into(),
            ));
        }
        file.config.validate()?;
        Ok(Self {
            config: file.config,
            backbone: file.backbone,
            perspectives: file.perspectives,
        })
    }
}

/// Pools the configured hidden layer of a cached forward pass.
pub(crate) fn pooled_hidden(
    cache: &BackboneCache,
    layer: usize,
    pooling: Pooling,
) -> Result<Array1<f64>> {
    let Some(h) = cache.x.get(layer) else {
        return Err(Error::Config(format!("hidden layer {layer} out of range")));
    };
    match pooling {
        Pooling::Eos => Ok(h.row(cache.layout.eos_pos).to_owned()),
        Pooling::Mean => {
            let content = h.slice(s![..cache.layout.content_len(), ..]);
            Ok(content.mean_axis(ndarray::Axis(0)).expect("non-empty"))
        }
    }
}
