//! Hierarchical encoder assembly, task heads, losses, and checkpointing.
//!
//! The encoder alternates token reduction, local attention, and global
//! attention per stage, caching each stage's tokens. Classification
//! max-pools the final tokens into an MLP head; segmentation walks the
//! cache in reverse, interpolating coarse features onto finer anchor sets
//! with inverse-distance weights until the original resolution is restored.
//!
//! Inputs are canonicalized (sorted lexicographically by coordinates) on
//! entry, which makes classification bit-exactly permutation invariant and
//! segmentation invariant up to the row reindexing that is undone before
//! returning.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{gau_node, lau_node, AttentionConfig, BoundMha};
use crate::autodiff::Node;
use crate::error::{Error, Result};
use crate::float::Float;
use crate::spatial::{idw_weights, knn_coords, PointCloud};
use crate::tensor::Tensor;
use crate::tokenizer::{tokenize_node, xavier, ScaleConfig, TokenSet};

pub const LOG_CLAMP: f64 = 1e-12;

const CHECKPOINT_MAGIC: &[u8; 4] = b"PCCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Classification,
    Segmentation,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Classification => "classification",
            Task::Segmentation => "segmentation",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" | "cls" => Ok(Task::Classification),
            "segmentation" | "seg" => Ok(Task::Segmentation),
            other => Err(Error::invalid(format!(
                "unknown task `{other}` (expected classification|segmentation)"
            ))),
        }
    }
}

/// One encoder stage: token budget, attention settings, tokenizer scales.
#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig<T> {
    pub tokens: usize,
    pub lau_repeats: usize,
    pub scale: ScaleConfig<T>,
    pub attn: AttentionConfig,
}

/// Full hyperparameter record for a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig<T> {
    pub stages: Vec<StageConfig<T>>,
    pub task: Task,
    pub num_classes: usize,
    /// Width of per-point input features the model expects (0 for bare
    /// coordinates).
    pub in_feat_dim: usize,
    pub head_hidden: usize,
    pub decoder_dim: usize,
    /// Neighbors used by decoder interpolation.
    pub interp_k: usize,
    pub use_lau: bool,
    pub use_gau: bool,
    pub seed: u64,
}

impl<T: Float> ModelConfig<T> {
    /// Desk-scale default: 3 stages of (128, 32, 8) tokens, d_model 64,
    /// 4 heads, feed-forward 128, scales (4, 8, 16, 32) at radii
    /// (0.2, 0.4, 0.8) of the normalized cloud.
    pub fn default_for(task: Task, num_classes: usize) -> Self {
        let stage = |tokens: usize, radius: f64, k_neighbors: usize| StageConfig {
            tokens,
            lau_repeats: 1,
            scale: ScaleConfig {
                ks: vec![4, 8, 16, 32],
                radius: T::of(radius),
                centroid_count: tokens,
                out_dim_per_scale: 16,
            },
            attn: AttentionConfig {
                heads: 4,
                d_model: 64,
                d_ff: 128,
                k_neighbors,
                pre_norm: false,
            },
        };
        ModelConfig {
            stages: vec![
                stage(128, 0.2, 16),
                stage(32, 0.4, 16),
                stage(8, 0.8, 8),
            ],
            task,
            num_classes,
            in_feat_dim: 0,
            head_hidden: 128,
            decoder_dim: 64,
            interp_k: 3,
            use_lau: true,
            use_gau: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::invalid("model needs at least one stage"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes must be >= 2"));
        }
        if self.interp_k == 0 || self.head_hidden == 0 || self.decoder_dim == 0 {
            return Err(Error::invalid("head/decoder dims and interp_k must be >= 1"));
        }
        let d_model = self.stages[0].attn.d_model;
        let mut prev_tokens = usize::MAX;
        for (s, st) in self.stages.iter().enumerate() {
            st.scale.validate()?;
            st.attn.validate()?;
            if st.tokens >= prev_tokens {
                return Err(Error::invalid(format!(
                    "token counts must strictly decrease across stages, stage {s} has {} after {prev_tokens}",
                    st.tokens
                )));
            }
            prev_tokens = st.tokens;
            if st.scale.centroid_count != st.tokens {
                return Err(Error::invalid(format!(
                    "stage {s}: scale centroid_count {} != tokens {}",
                    st.scale.centroid_count, st.tokens
                )));
            }
            if st.scale.token_width() != st.attn.d_model {
                return Err(Error::invalid(format!(
                    "stage {s}: tokenizer width {} (scales × out_dim) must equal d_model {}",
                    st.scale.token_width(),
                    st.attn.d_model
                )));
            }
            if st.attn.d_model != d_model {
                return Err(Error::invalid(
                    "all stages must share one d_model (the raw-point lift is shared)",
                ));
            }
            if self.use_lau && st.lau_repeats > 0 && st.attn.k_neighbors > st.tokens {
                return Err(Error::invalid(format!(
                    "stage {s}: k_neighbors {} exceeds token count {}",
                    st.attn.k_neighbors, st.tokens
                )));
            }
        }
        Ok(())
    }

    pub fn d_model(&self) -> usize {
        self.stages[0].attn.d_model
    }

    /// δ input width for a stage: offsets ⊕ features.
    fn delta_in(&self, stage: usize) -> usize {
        if stage == 0 {
            3 + self.in_feat_dim
        } else {
            3 + self.d_model()
        }
    }

    fn stage_seed(&self, stage: usize) -> u64 {
        self.seed
            .wrapping_add((stage as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }
}

/// Named parameter tensors, ordered by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T>(BTreeMap<String, Tensor<T>>);

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore(BTreeMap::new())
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.0.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.0
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))
    }

    /// Replace an existing tensor, keeping its shape.
    pub fn set(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        let cur = self.get(name)?;
        if cur.shape() != t.shape() {
            return Err(Error::ShapeMismatch {
                op: "param set",
                lhs: cur.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        self.0.insert(name.to_string(), t);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.0.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.0.values().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore(
            self.0
                .iter()
                .map(|(k, v)| (k.clone(), v.cast::<U>()))
                .collect(),
        )
    }
}

/// Parameters bound into one computation graph, retrievable by name.
pub struct BoundParams<T: Float> {
    map: BTreeMap<String, Node<T>>,
}

impl<T: Float> BoundParams<T> {
    fn bind(store: &ParamStore<T>, trainable: bool) -> Self {
        let map = store
            .iter()
            .map(|(k, v)| {
                let node = if trainable {
                    Node::leaf(v.clone())
                } else {
                    Node::constant(v.clone())
                };
                (k.clone(), node)
            })
            .collect();
        BoundParams { map }
    }

    fn node(&self, name: &str) -> Result<Node<T>> {
        self.map
            .get(name)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("unbound parameter `{name}`")))
    }

    fn mha(&self, prefix: &str, heads: usize) -> Result<BoundMha<T>> {
        let mut w_q = Vec::with_capacity(heads);
        let mut w_k = Vec::with_capacity(heads);
        let mut w_v = Vec::with_capacity(heads);
        for h in 0..heads {
            w_q.push(self.node(&format!("{prefix}.wq{h}"))?);
            w_k.push(self.node(&format!("{prefix}.wk{h}"))?);
            w_v.push(self.node(&format!("{prefix}.wv{h}"))?);
        }
        Ok(BoundMha {
            w_q,
            w_k,
            w_v,
            w_o: self.node(&format!("{prefix}.wo"))?,
            ff_w1: self.node(&format!("{prefix}.ff.w1"))?,
            ff_b1: self.node(&format!("{prefix}.ff.b1"))?,
            ff_w2: self.node(&format!("{prefix}.ff.w2"))?,
            ff_b2: self.node(&format!("{prefix}.ff.b2"))?,
        })
    }

    /// Gradients of every trainable bound parameter that received flow.
    pub fn grads(&self) -> BTreeMap<String, Tensor<T>> {
        self.map
            .iter()
            .filter_map(|(k, n)| n.grad().map(|g| (k.clone(), g)))
            .collect()
    }
}

/// Per-stage token snapshots kept for the decoder.
#[derive(Debug, Clone)]
pub struct StageCache<T> {
    pub stages: Vec<TokenSet<T>>,
}

fn init_mha_params<T: Float>(
    store: &mut ParamStore<T>,
    prefix: &str,
    attn: &AttentionConfig,
    rng: &mut ChaCha8Rng,
) {
    let (d, dh, dff) = (attn.d_model, attn.d_head(), attn.d_ff);
    for h in 0..attn.heads {
        store.insert(format!("{prefix}.wq{h}"), xavier(d, dh, rng));
        store.insert(format!("{prefix}.wk{h}"), xavier(d, dh, rng));
        store.insert(format!("{prefix}.wv{h}"), xavier(d, dh, rng));
    }
    store.insert(format!("{prefix}.wo"), xavier(d, d, rng));
    store.insert(format!("{prefix}.ff.w1"), xavier(d, dff, rng));
    store.insert(format!("{prefix}.ff.b1"), Tensor::zeros(&[dff]));
    store.insert(format!("{prefix}.ff.w2"), xavier(dff, d, rng));
    store.insert(format!("{prefix}.ff.b2"), Tensor::zeros(&[d]));
}

/// Seeded parameter initialization for a validated config.
pub fn init_params<T: Float>(cfg: &ModelConfig<T>) -> ParamStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let d = cfg.d_model();
    store.insert("embed.w", xavier(3 + cfg.in_feat_dim, d, &mut rng));
    store.insert("embed.b", Tensor::zeros(&[d]));
    for (s, st) in cfg.stages.iter().enumerate() {
        store.insert(
            format!("stage{s}.delta.w"),
            xavier(cfg.delta_in(s), st.scale.out_dim_per_scale, &mut rng),
        );
        store.insert(
            format!("stage{s}.delta.b"),
            Tensor::zeros(&[st.scale.out_dim_per_scale]),
        );
        if cfg.use_lau {
            for r in 0..st.lau_repeats {
                init_mha_params(&mut store, &format!("stage{s}.lau{r}"), &st.attn, &mut rng);
            }
        }
        if cfg.use_gau {
            init_mha_params(&mut store, &format!("stage{s}.gau"), &st.attn, &mut rng);
        }
    }
    match cfg.task {
        Task::Classification => {
            store.insert("head.w1", xavier(d, cfg.head_hidden, &mut rng));
            store.insert("head.b1", Tensor::zeros(&[cfg.head_hidden]));
            store.insert("head.w2", xavier(cfg.head_hidden, cfg.num_classes, &mut rng));
            store.insert("head.b2", Tensor::zeros(&[cfg.num_classes]));
        }
        Task::Segmentation => {
            let n = cfg.stages.len();
            let mut carried = d;
            for s in (0..n.saturating_sub(1)).rev() {
                store.insert(
                    format!("dec.stage{s}.w"),
                    xavier(carried + d, cfg.decoder_dim, &mut rng),
                );
                store.insert(format!("dec.stage{s}.b"), Tensor::zeros(&[cfg.decoder_dim]));
                carried = cfg.decoder_dim;
            }
            store.insert("dec.out.w1", xavier(carried + d, cfg.head_hidden, &mut rng));
            store.insert("dec.out.b1", Tensor::zeros(&[cfg.head_hidden]));
            store.insert("dec.out.w2", xavier(cfg.head_hidden, cfg.num_classes, &mut rng));
            store.insert("dec.out.b2", Tensor::zeros(&[cfg.num_classes]));
        }
    }
    store
}

struct EncoderGraph<T: Float> {
    embed: Node<T>,
    stage_feats: Vec<Node<T>>,
    stage_anchors: Vec<Vec<[T; 3]>>,
}

/// A model: config plus parameters.
#[derive(Debug, Clone)]
pub struct Model<T: Float> {
    pub cfg: ModelConfig<T>,
    pub params: ParamStore<T>,
}

impl<T: Float> Model<T> {
    pub fn new(cfg: ModelConfig<T>) -> Result<Self> {
        cfg.validate()?;
        let params = init_params(&cfg);
        Ok(Model { cfg, params })
    }

    pub fn with_params(cfg: ModelConfig<T>, params: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let expected = init_params(&cfg);
        for (name, t) in expected.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint parameter",
                    lhs: got.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        if params.len() != expected.len() {
            return Err(Error::invalid(format!(
                "parameter count mismatch: {} stored, {} expected",
                params.len(),
                expected.len()
            )));
        }
        Ok(Model { cfg, params })
    }

    fn canonicalize(&self, cloud: &PointCloud<T>) -> Result<(PointCloud<T>, Vec<usize>)> {
        if cloud.feat_dim() != self.cfg.in_feat_dim {
            return Err(Error::invalid(format!(
                "cloud has {} feature columns, model expects {}",
                cloud.feat_dim(),
                self.cfg.in_feat_dim
            )));
        }
        let order = cloud.canonical_order();
        Ok((cloud.permuted(&order)?, order))
    }

    fn build_encoder(
        &self,
        canon: &PointCloud<T>,
        bound: &BoundParams<T>,
    ) -> Result<EncoderGraph<T>> {
        let cfg = &self.cfg;
        let n = canon.len();
        let d_in = 3 + cfg.in_feat_dim;
        let mut rows = Vec::with_capacity(n * d_in);
        for (i, p) in canon.coords().iter().enumerate() {
            rows.extend_from_slice(p);
            if let Some(f) = canon.feats() {
                rows.extend_from_slice(f.row(i));
            }
        }
        let input = Node::constant(Tensor::new(vec![n, d_in], rows)?);
        let embed = input
            .matmul(&bound.node("embed.w")?)?
            .add_bias(&bound.node("embed.b")?)?;

        let cloud_feats = canon.feats().map(|f| Node::constant(f.clone()));
        let mut stage_feats: Vec<Node<T>> = Vec::with_capacity(cfg.stages.len());
        let mut stage_anchors: Vec<Vec<[T; 3]>> = Vec::with_capacity(cfg.stages.len());

        for (s, st) in cfg.stages.iter().enumerate() {
            let dw = bound.node(&format!("stage{s}.delta.w"))?;
            let db = bound.node(&format!("stage{s}.delta.b"))?;
            let (coords, feats): (&[[T; 3]], Option<&Node<T>>) = if s == 0 {
                (canon.coords(), cloud_feats.as_ref())
            } else {
                (
                    &stage_anchors[s - 1],
                    Some(stage_feats.last().expect("previous stage")),
                )
            };
            let mut scale = st.scale.clone();
            scale.centroid_count = st.tokens;
            let (tok, anchors, _) =
                tokenize_node(coords, feats, &scale, &dw, &db, cfg.stage_seed(s))?;
            let mut t = tok;
            if cfg.use_lau {
                for r in 0..st.lau_repeats {
                    let mha = bound.mha(&format!("stage{s}.lau{r}"), st.attn.heads)?;
                    t = lau_node(&t, &anchors, &mha, &st.attn)?;
                }
            }
            if cfg.use_gau {
                let mha = bound.mha(&format!("stage{s}.gau"), st.attn.heads)?;
                t = gau_node(&t, &embed, &mha, st.attn.pre_norm)?;
            }
            stage_feats.push(t);
            stage_anchors.push(anchors);
        }
        Ok(EncoderGraph {
            embed,
            stage_feats,
            stage_anchors,
        })
    }

    /// Run the encoder, returning the final tokens and per-stage snapshots.
    pub fn encode(&self, cloud: &PointCloud<T>) -> Result<(TokenSet<T>, StageCache<T>)> {
        let (canon, _) = self.canonicalize(cloud)?;
        let bound = BoundParams::bind(&self.params, false);
        let enc = self.build_encoder(&canon, &bound)?;
        let mut stages = Vec::with_capacity(enc.stage_feats.len());
        for (f, a) in enc.stage_feats.iter().zip(&enc.stage_anchors) {
            stages.push(TokenSet::new(f.value().clone(), a.clone())?);
        }
        let last = stages.last().expect("at least one stage").clone();
        Ok((last, StageCache { stages }))
    }

    fn build_cls_probs(
        &self,
        canon: &PointCloud<T>,
        bound: &BoundParams<T>,
    ) -> Result<Node<T>> {
        if self.cfg.task != Task::Classification {
            return Err(Error::invalid("classify requires a classification model"));
        }
        let enc = self.build_encoder(canon, bound)?;
        let final_tokens = enc.stage_feats.last().expect("stage");
        let d = self.cfg.d_model();
        let pooled = final_tokens.reduce_max(0)?.reshape(&[1, d])?;
        let h = pooled
            .matmul(&bound.node("head.w1")?)?
            .add_bias(&bound.node("head.b1")?)?
            .relu();
        let logits = h
            .matmul(&bound.node("head.w2")?)?
            .add_bias(&bound.node("head.b2")?)?;
        logits.softmax(1)
    }

    /// Class probability vector for one cloud.
    pub fn classify(&self, cloud: &PointCloud<T>) -> Result<Vec<T>> {
        let (canon, _) = self.canonicalize(cloud)?;
        let bound = BoundParams::bind(&self.params, false);
        let probs = self.build_cls_probs(&canon, &bound)?;
        Ok(probs.value().data().to_vec())
    }

    fn build_seg_probs(
        &self,
        canon: &PointCloud<T>,
        bound: &BoundParams<T>,
    ) -> Result<Node<T>> {
        if self.cfg.task != Task::Segmentation {
            return Err(Error::invalid("segment requires a segmentation model"));
        }
        let enc = self.build_encoder(canon, bound)?;
        let n_stages = self.cfg.stages.len();
        let mut carried = enc.stage_feats[n_stages - 1].clone();
        let mut carried_anchors: &[[T; 3]] = &enc.stage_anchors[n_stages - 1];
        for s in (0..n_stages - 1).rev() {
            let fine = &enc.stage_anchors[s];
            let rows = interp_rows(fine, carried_anchors, self.cfg.interp_k)?;
            let interp = carried.weighted_gather(rows)?;
            let cat = Node::concat(&[interp, enc.stage_feats[s].clone()], 1)?;
            carried = cat
                .matmul(&bound.node(&format!("dec.stage{s}.w"))?)?
                .add_bias(&bound.node(&format!("dec.stage{s}.b"))?)?
                .relu();
            carried_anchors = fine;
        }
        let rows = interp_rows(canon.coords(), carried_anchors, self.cfg.interp_k)?;
        let interp = carried.weighted_gather(rows)?;
        let cat = Node::concat(&[interp, enc.embed.clone()], 1)?;
        let h = cat
            .matmul(&bound.node("dec.out.w1")?)?
            .add_bias(&bound.node("dec.out.b1")?)?
            .relu();
        let logits = h
            .matmul(&bound.node("dec.out.w2")?)?
            .add_bias(&bound.node("dec.out.b2")?)?;
        logits.softmax(1)
    }

    /// Per-point class probabilities, rows in the input's original order.
    pub fn segment(&self, cloud: &PointCloud<T>) -> Result<Tensor<T>> {
        let (canon, order) = self.canonicalize(cloud)?;
        let bound = BoundParams::bind(&self.params, false);
        let probs = self.build_seg_probs(&canon, &bound)?;
        let v = probs.value();
        let c = v.shape()[1];
        let mut out = Tensor::zeros(v.shape());
        for (canon_row, &orig_row) in order.iter().enumerate() {
            out.data_mut()[orig_row * c..(orig_row + 1) * c]
                .copy_from_slice(v.row(canon_row));
        }
        Ok(out)
    }

    /// Training graph for one classification sample: loss node, predicted
    /// probabilities, and the bound parameters for gradient collection.
    pub fn cls_loss_graph(
        &self,
        cloud: &PointCloud<T>,
        label: u32,
    ) -> Result<(Node<T>, Vec<T>, BoundParams<T>)> {
        if label as usize >= self.cfg.num_classes {
            return Err(Error::invalid(format!(
                "label {label} out of range for {} classes",
                self.cfg.num_classes
            )));
        }
        let (canon, _) = self.canonicalize(cloud)?;
        let bound = BoundParams::bind(&self.params, true);
        let probs = self.build_cls_probs(&canon, &bound)?;
        let mut onehot = Tensor::zeros(&[1, self.cfg.num_classes]);
        onehot.data_mut()[label as usize] = T::one();
        let loss = probs
            .clamp_min(T::of(LOG_CLAMP))
            .log()
            .mul(&Node::constant(onehot))?
            .reduce_sum(None)?
            .neg();
        Ok((loss, probs.value().data().to_vec(), bound))
    }

    /// Training graph for one segmentation sample; labels come from the
    /// cloud. Returns per-point probabilities in original row order.
    pub fn seg_loss_graph(
        &self,
        cloud: &PointCloud<T>,
    ) -> Result<(Node<T>, Tensor<T>, BoundParams<T>)> {
        let labels = cloud
            .labels()
            .ok_or_else(|| Error::invalid("segmentation training needs per-point labels"))?
            .to_vec();
        let (canon, order) = self.canonicalize(cloud)?;
        let bound = BoundParams::bind(&self.params, true);
        let probs = self.build_seg_probs(&canon, &bound)?;
        let c = self.cfg.num_classes;
        let n = canon.len();
        let mut onehot = Tensor::zeros(&[n, c]);
        for (canon_row, &orig_row) in order.iter().enumerate() {
            let l = labels[orig_row] as usize;
            if l >= c {
                return Err(Error::invalid(format!(
                    "point label {l} out of range for {c} classes"
                )));
            }
            onehot.data_mut()[canon_row * c + l] = T::one();
        }
        let loss = probs
            .clamp_min(T::of(LOG_CLAMP))
            .log()
            .mul(&Node::constant(onehot))?
            .reduce_sum(Some(1))?
            .neg()
            .reduce_mean(None)?;
        let v = probs.value();
        let mut orig = Tensor::zeros(v.shape());
        for (canon_row, &orig_row) in order.iter().enumerate() {
            orig.data_mut()[orig_row * c..(orig_row + 1) * c].copy_from_slice(v.row(canon_row));
        }
        Ok((loss, orig, bound))
    }

    // ── checkpoint format ────────────────────────────────────────────

    /// Write config + parameters. Magic "PCCK", version, config as
    /// key=value text, then named tensors as f32 little-endian.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let cfg_text = crate::config::model_to_kv(&self.cfg);
        buf.extend_from_slice(&(cfg_text.len() as u64).to_le_bytes());
        buf.extend_from_slice(cfg_text.as_bytes());
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(&buf)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Model<T>> {
        let pstr = path.display().to_string();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::io(pstr.clone(), e))?
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(pstr.clone(), e))?;
        let mut r = ByteReader::new(&bytes, &pstr);
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BinaryParse {
                path: pstr.clone(),
                offset: 0,
                msg: format!("bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"),
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::BinaryParse {
                path: pstr.clone(),
                offset: 4,
                msg: format!("unsupported checkpoint version {version}"),
            });
        }
        let cfg_len = r.u64()? as usize;
        let cfg_bytes = r.take(cfg_len)?;
        let cfg_text = std::str::from_utf8(cfg_bytes).map_err(|e| Error::BinaryParse {
            path: pstr.clone(),
            offset: 16,
            msg: format!("config block not utf8: {e}"),
        })?;
        let cfg: ModelConfig<T> = crate::config::model_from_kv(cfg_text, &pstr)?;
        let n_params = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..n_params {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| Error::BinaryParse {
                    path: pstr.clone(),
                    offset: r.pos,
                    msg: format!("parameter name not utf8: {e}"),
                })?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(T::of(f64::from(r.f32()?)));
            }
            store.insert(name, Tensor::new(shape, data)?);
        }
        Model::with_params(cfg, store)
    }
}

/// Bounded byte cursor with positioned errors.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pub(crate) pos: usize,
    path: &'a str,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &'a str) -> Self {
        ByteReader {
            bytes,
            pos: 0,
            path,
        }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::BinaryParse {
                path: self.path.to_string(),
                offset: self.pos,
                msg: format!(
                    "truncated: expected {} bytes, found {}",
                    self.pos + n,
                    self.bytes.len()
                ),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Interpolation plan: for each fine position, its k nearest coarse anchors
/// with inverse-distance-squared weights (one-hot on coincidence).
fn interp_rows<T: Float>(
    fine: &[[T; 3]],
    coarse: &[[T; 3]],
    k: usize,
) -> Result<Vec<Vec<(usize, T)>>> {
    let k_eff = k.min(coarse.len());
    let nn = knn_coords(fine, coarse, k_eff)?;
    let mut rows = Vec::with_capacity(fine.len());
    for (ids, dists) in nn.neighbors.iter().zip(&nn.distances) {
        let w = idw_weights(dists, k_eff)?;
        rows.push(ids.iter().copied().zip(w).collect());
    }
    Ok(rows)
}

// ── losses (value level) ─────────────────────────────────────────────

/// Cross-entropy `−Σ_c g_c · log(p_c)` with the log argument clamped at
/// 1e-12. `target` must be one-hot.
pub fn loss_cls<T: Float>(pred: &[T], target: &[T]) -> Result<T> {
    if pred.len() != target.len() {
        return Err(Error::invalid(format!(
            "loss_cls: {} predictions vs {} targets",
            pred.len(),
            target.len()
        )));
    }
    let clamp = T::of(LOG_CLAMP);
    let mut acc = T::zero();
    for (&p, &g) in pred.iter().zip(target) {
        if g != T::zero() {
            acc += g * p.max(clamp).ln();
        }
    }
    Ok(-acc)
}

/// Mean over rows of per-row cross-entropy.
pub fn loss_seg<T: Float>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if pred.shape() != target.shape() || pred.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op: "loss_seg",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let n = pred.shape()[0];
    let mut acc = T::zero();
    for i in 0..n {
        acc += loss_cls(pred.row(i), target.row(i))?;
    }
    Ok(acc / T::of_usize(n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{tokenize, DeltaParams};
    use rand::{Rng, SeedableRng};

    fn tiny_cfg(task: Task) -> ModelConfig<f64> {
        let stage = |tokens: usize, radius: f64| StageConfig {
            tokens,
            lau_repeats: 1,
            scale: ScaleConfig {
                ks: vec![2, 4],
                radius,
                centroid_count: tokens,
                out_dim_per_scale: 4,
            },
            attn: AttentionConfig {
                heads: 2,
                d_model: 8,
                d_ff: 16,
                k_neighbors: 4,
                pre_norm: false,
            },
        };
        ModelConfig {
            stages: vec![stage(16, 0.5), stage(4, 1.0)],
            task,
            num_classes: 3,
            in_feat_dim: 0,
            head_hidden: 8,
            decoder_dim: 8,
            interp_k: 3,
            use_lau: true,
            use_gau: true,
            seed: 11,
        }
    }

    fn rand_cloud(n: usize, seed: u64) -> PointCloud<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect();
        PointCloud::from_coords(pts).unwrap()
    }

    #[test]
    fn config_validation_rules() {
        let mut cfg = tiny_cfg(Task::Classification);
        assert!(cfg.validate().is_ok());
        cfg.stages[1].tokens = 16;
        assert!(cfg.validate().is_err()); // not strictly decreasing
        let mut cfg = tiny_cfg(Task::Classification);
        cfg.num_classes = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg(Task::Classification);
        cfg.stages[0].scale.out_dim_per_scale = 3; // 2 scales × 3 != d_model 8
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn encode_shape_contract_and_determinism() {
        let model = Model::new(tiny_cfg(Task::Classification)).unwrap();
        let cloud = rand_cloud(64, 5);
        let (last, cache) = model.encode(&cloud).unwrap();
        assert_eq!(cache.stages.len(), 2);
        assert_eq!(cache.stages[0].len(), 16);
        assert_eq!(cache.stages[1].len(), 4);
        assert_eq!(last.width(), 8);
        let (last2, _) = model.encode(&cloud).unwrap();
        assert_eq!(last.feats, last2.feats);
    }

    #[test]
    fn single_stage_zeroed_attention_equals_tokenizer_output() {
        let mut cfg = tiny_cfg(Task::Classification);
        cfg.stages.truncate(1);
        cfg.stages[0].tokens = 12;
        cfg.stages[0].scale.centroid_count = 12;
        let mut model = Model::new(cfg).unwrap();
        for name in [
            "stage0.lau0.wo",
            "stage0.lau0.ff.w2",
            "stage0.lau0.ff.b2",
            "stage0.gau.wo",
            "stage0.gau.ff.w2",
            "stage0.gau.ff.b2",
        ] {
            let shape = model.params.get(name).unwrap().shape().to_vec();
            model.params.set(name, Tensor::zeros(&shape)).unwrap();
        }
        let cloud = rand_cloud(12, 9);
        let (last, _) = model.encode(&cloud).unwrap();

        let delta = DeltaParams {
            weight: model.params.get("stage0.delta.w").unwrap().clone(),
            bias: model.params.get("stage0.delta.b").unwrap().clone(),
        };
        let mut scale = model.cfg.stages[0].scale.clone();
        scale.centroid_count = 12;
        let direct = tokenize(&cloud, &scale, &delta, model.cfg.stage_seed(0)).unwrap();
        assert_eq!(last.feats, direct.feats);
    }

    #[test]
    fn classify_probabilities_sum_to_one_and_permutation_invariant() {
        let model = Model::new(tiny_cfg(Task::Classification)).unwrap();
        let cloud = rand_cloud(48, 13);
        let probs = model.classify(&cloud).unwrap();
        let sum: f64 = probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut perm: Vec<usize> = (0..48).collect();
        for i in (1..48).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let shuffled = cloud.permuted(&perm).unwrap();
        let probs2 = model.classify(&shuffled).unwrap();
        assert_eq!(probs, probs2); // bit-exact
    }

    #[test]
    fn segment_rows_sum_to_one_and_reindex_with_input() {
        let model = Model::new(tiny_cfg(Task::Segmentation)).unwrap();
        let cloud = rand_cloud(40, 17);
        let probs = model.segment(&cloud).unwrap();
        assert_eq!(probs.shape(), &[40, 3]);
        for i in 0..40 {
            let s: f64 = probs.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let perm: Vec<usize> = (0..40).rev().collect();
        let shuffled = cloud.permuted(&perm).unwrap();
        let probs2 = model.segment(&shuffled).unwrap();
        for (new_row, &old_row) in perm.iter().enumerate() {
            assert_eq!(probs2.row(new_row), probs.row(old_row));
        }
    }

    #[test]
    fn coincident_fine_point_gets_exactly_coarse_features() {
        // one-hot interpolation at distance zero
        let coarse = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let rows = interp_rows(&[[1.0, 0.0, 0.0]], &coarse, 3).unwrap();
        assert_eq!(rows[0].iter().find(|(_, w)| *w == 1.0).unwrap().0, 1);
        assert!(rows[0].iter().all(|&(i, w)| w == if i == 1 { 1.0 } else { 0.0 }));
    }

    #[test]
    fn loss_cls_analytic_cases() {
        // perfect one-hot prediction → 0
        let l = loss_cls::<f64>(&[0.0, 1.0, 0.0], &[0.0, 1.0, 0.0]).unwrap();
        assert!(l.abs() < 1e-12);
        // uniform prediction over C classes → ln C
        let c = 5;
        let pred = vec![1.0 / c as f64; c];
        let mut g = vec![0.0; c];
        g[2] = 1.0;
        let l = loss_cls(&pred, &g).unwrap();
        assert!((l - (c as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_seg_is_mean_of_rows_and_duplication_invariant() {
        let pred = Tensor::<f64>::from_rows(&[vec![0.7, 0.3], vec![0.2, 0.8]]).unwrap();
        let g = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let l = loss_seg(&pred, &g).unwrap();
        let l0 = loss_cls(pred.row(0), g.row(0)).unwrap();
        let l1 = loss_cls(pred.row(1), g.row(1)).unwrap();
        assert!((l - (l0 + l1) / 2.0).abs() < 1e-15);

        // duplicating every row leaves the mean unchanged
        let pred2 =
            Tensor::from_rows(&[vec![0.7, 0.3], vec![0.2, 0.8], vec![0.7, 0.3], vec![0.2, 0.8]])
                .unwrap();
        let g2 =
            Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]])
                .unwrap();
        let l2 = loss_seg(&pred2, &g2).unwrap();
        assert!((l - l2).abs() < 1e-15);
    }

    #[test]
    fn softmax_cross_entropy_gradient_is_p_minus_g() {
        let logits = Node::leaf(
            Tensor::new(vec![1, 4], vec![0.3, -0.7, 1.2, 0.1]).unwrap(),
        );
        let probs = logits.softmax(1).unwrap();
        let mut onehot = Tensor::zeros(&[1, 4]);
        onehot.data_mut()[2] = 1.0;
        let loss = probs
            .clamp_min(LOG_CLAMP)
            .log()
            .mul(&Node::constant(onehot.clone()))
            .unwrap()
            .reduce_sum(None)
            .unwrap()
            .neg();
        loss.backward().unwrap();
        let grad = logits.grad().unwrap();
        for j in 0..4 {
            let expect = probs.value().data()[j] - onehot.data()[j];
            assert!((grad.data()[j] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn checkpoint_roundtrip_reproduces_forward() {
        let model = Model::new(tiny_cfg(Task::Classification)).unwrap();
        let dir = std::env::temp_dir().join("pcat_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.pcck");
        model.save(&path).unwrap();
        let loaded = Model::<f64>::load(&path).unwrap();
        let cloud = rand_cloud(32, 3);
        // params stored at f32: compare against the f32-rounded model
        let rounded = Model::with_params(
            model.cfg.clone(),
            model.params.cast::<f32>().cast::<f64>(),
        )
        .unwrap();
        assert_eq!(
            rounded.classify(&cloud).unwrap(),
            loaded.classify(&cloud).unwrap()
        );
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn truncated_checkpoint_reports_byte_position() {
        let model = Model::new(tiny_cfg(Task::Classification)).unwrap();
        let dir = std::env::temp_dir().join("pcat_ckpt_test2");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.pcck");
        model.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = Model::<f64>::load(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("byte") && msg.contains("truncated"), "{msg}");
        std::fs::remove_file(&path).ok();
    }
}
