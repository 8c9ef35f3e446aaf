//! Multi-head attention and the two residual units built on it:
//!
//! - `lau_forward` — self-attention restricted to each token's K nearest
//!   tokens by anchor distance (the query token is its own nearest
//!   neighbor and is always included).
//! - `gau_forward` — cross-attention with tokens as queries and the lifted
//!   raw points as keys/values, costing O(M·P) rather than O(P²).
//!
//! Both units follow `out = S + FF(S)`, `S = X + MHA(…)`, with no
//! normalization by default and an optional pre-norm toggle.

use rand::Rng;

use crate::autodiff::Node;
use crate::error::{Error, Result};
use crate::float::Float;
use crate::spatial::{knn_accel_coords, knn_coords};
use crate::tensor::Tensor;
use crate::tokenizer::{xavier, TokenSet};

/// Token count above which LAU's neighbor search switches from the brute
/// force scan to the grid-accelerated path (identical results).
const LAU_ACCEL_THRESHOLD: usize = 1024;

const PRE_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// K for the local unit's neighborhood.
    pub k_neighbors: usize,
    /// Standardize unit inputs before attention / feed-forward.
    pub pre_norm: bool,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 || self.d_ff == 0 || self.k_neighbors == 0 {
            return Err(Error::invalid(
                "attention config fields must all be positive",
            ));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "d_model = {} not divisible by heads = {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Two-layer feed-forward: `d_model -> d_ff -> d_model` with relu.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward<T> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

/// Per-head projections plus output projection and feed-forward.
#[derive(Debug, Clone, PartialEq)]
pub struct MhaParams<T> {
    pub w_q: Vec<Tensor<T>>,
    pub w_k: Vec<Tensor<T>>,
    pub w_v: Vec<Tensor<T>>,
    pub w_o: Tensor<T>,
    pub ff: FeedForward<T>,
}

impl<T: Float> MhaParams<T> {
    pub fn init(cfg: &AttentionConfig, rng: &mut impl Rng) -> Self {
        let (d, dh, dff) = (cfg.d_model, cfg.d_head(), cfg.d_ff);
        let per_head = |rng: &mut _| (0..cfg.heads).map(|_| xavier(d, dh, rng)).collect();
        MhaParams {
            w_q: per_head(rng),
            w_k: per_head(rng),
            w_v: per_head(rng),
            w_o: xavier(d, d, rng),
            ff: FeedForward {
                w1: xavier(d, dff, rng),
                b1: Tensor::zeros(&[dff]),
                w2: xavier(dff, d, rng),
                b2: Tensor::zeros(&[d]),
            },
        }
    }

    pub fn heads(&self) -> usize {
        self.w_q.len()
    }

    pub fn d_model(&self) -> usize {
        self.w_q[0].shape()[0]
    }

    /// Zero the output projection and the second feed-forward layer, which
    /// turns both residual units into exact identities.
    pub fn zero_output_paths(&mut self) {
        self.w_o = Tensor::zeros(self.w_o.shape());
        self.ff.w2 = Tensor::zeros(self.ff.w2.shape());
        self.ff.b2 = Tensor::zeros(self.ff.b2.shape());
    }
}

/// Parameter tensors bound into a graph as nodes.
pub struct BoundMha<T: Float> {
    pub w_q: Vec<Node<T>>,
    pub w_k: Vec<Node<T>>,
    pub w_v: Vec<Node<T>>,
    pub w_o: Node<T>,
    pub ff_w1: Node<T>,
    pub ff_b1: Node<T>,
    pub ff_w2: Node<T>,
    pub ff_b2: Node<T>,
}

impl<T: Float> BoundMha<T> {
    pub fn bind(p: &MhaParams<T>, trainable: bool) -> Self {
        let lift = |t: &Tensor<T>| {
            if trainable {
                Node::leaf(t.clone())
            } else {
                Node::constant(t.clone())
            }
        };
        BoundMha {
            w_q: p.w_q.iter().map(&lift).collect(),
            w_k: p.w_k.iter().map(&lift).collect(),
            w_v: p.w_v.iter().map(&lift).collect(),
            w_o: lift(&p.w_o),
            ff_w1: lift(&p.ff.w1),
            ff_b1: lift(&p.ff.b1),
            ff_w2: lift(&p.ff.w2),
            ff_b2: lift(&p.ff.b2),
        }
    }

    fn d_head(&self) -> usize {
        self.w_q[0].shape()[1]
    }
}

fn feed_forward<T: Float>(x: &Node<T>, p: &BoundMha<T>) -> Result<Node<T>> {
    x.matmul(&p.ff_w1)?
        .add_bias(&p.ff_b1)?
        .relu()
        .matmul(&p.ff_w2)?
        .add_bias(&p.ff_b2)
}

fn maybe_norm<T: Float>(x: &Node<T>, pre_norm: bool) -> Result<Node<T>> {
    if pre_norm {
        x.row_norm(T::of(PRE_NORM_EPS))
    } else {
        Ok(x.clone())
    }
}

/// Full multi-head attention graph: queries `[Q×d]` against keys/values
/// `[S×d]`; per head `softmax(q kᵀ / √d_head) v`, heads concatenated, then
/// the output projection. No residual and no feed-forward here.
pub fn mha_node<T: Float>(query: &Node<T>, source: &Node<T>, p: &BoundMha<T>) -> Result<Node<T>> {
    let d = p.w_q[0].shape()[0];
    if query.shape().len() != 2 || query.shape()[1] != d {
        return Err(Error::ShapeMismatch {
            op: "mha query",
            lhs: query.shape().to_vec(),
            rhs: vec![d, d],
        });
    }
    if source.shape().len() != 2 || source.shape()[1] != d {
        return Err(Error::ShapeMismatch {
            op: "mha source",
            lhs: source.shape().to_vec(),
            rhs: vec![d, d],
        });
    }
    let scale = T::one() / T::of_usize(p.d_head()).sqrt();
    let mut heads = Vec::with_capacity(p.w_q.len());
    for h in 0..p.w_q.len() {
        let qh = query.matmul(&p.w_q[h])?;
        let kh = source.matmul(&p.w_k[h])?;
        let vh = source.matmul(&p.w_v[h])?;
        let scores = qh.matmul(&kh.transpose()?)?.scale(scale);
        let weights = scores.softmax(1)?;
        heads.push(weights.matmul(&vh)?);
    }
    Node::concat(&heads, 1)?.matmul(&p.w_o)
}

/// Value-level multi-head attention.
pub fn mha<T: Float>(
    query: &Tensor<T>,
    source: &Tensor<T>,
    params: &MhaParams<T>,
) -> Result<Tensor<T>> {
    let bound = BoundMha::bind(params, false);
    let q = Node::constant(query.clone());
    let s = Node::constant(source.clone());
    Ok(mha_node(&q, &s, &bound)?.value().clone())
}

/// Local attention over token features `[M×d]`, restricted per token to its
/// `k` nearest tokens by anchor distance. The neighborhood softmax matches
/// full attention masked outside the neighborhood.
pub fn lau_node<T: Float>(
    feats: &Node<T>,
    anchors: &[[T; 3]],
    p: &BoundMha<T>,
    cfg: &AttentionConfig,
) -> Result<Node<T>> {
    cfg.validate()?;
    let m = anchors.len();
    let k = cfg.k_neighbors;
    if k > m {
        return Err(Error::invalid(format!(
            "lau: k_neighbors = {k} exceeds token count M = {m}"
        )));
    }
    let nbr = if m >= LAU_ACCEL_THRESHOLD {
        knn_accel_coords(anchors, anchors, k)?
    } else {
        knn_coords(anchors, anchors, k)?
    };
    let mut flat: Vec<Option<usize>> = Vec::with_capacity(m * k);
    for list in &nbr.neighbors {
        flat.extend(list.iter().map(|&i| Some(i)));
    }
    let expand: Vec<Option<usize>> = (0..m)
        .flat_map(|i| std::iter::repeat_n(Some(i), k))
        .collect();
    let groups: Vec<Vec<usize>> = (0..m).map(|i| (i * k..(i + 1) * k).collect()).collect();

    let x = maybe_norm(feats, cfg.pre_norm)?;
    let scale = T::one() / T::of_usize(cfg.d_head()).sqrt();
    let mut heads = Vec::with_capacity(p.w_q.len());
    for h in 0..p.w_q.len() {
        let qh = x.matmul(&p.w_q[h])?;
        let kh = x.matmul(&p.w_k[h])?;
        let vh = x.matmul(&p.w_v[h])?;
        let kg = kh.gather_rows(flat.clone())?;
        let vg = vh.gather_rows(flat.clone())?;
        let qe = qh.gather_rows(expand.clone())?;
        // per-(token, neighbor) dot products, then a softmax across each
        // token's K neighbors
        let scores = qe.mul(&kg)?.reduce_sum(Some(1))?.reshape(&[m, k])?.scale(scale);
        let weights = scores.softmax(1)?.reshape(&[m * k])?;
        let mixed = vg.scale_rows(&weights)?;
        heads.push(mixed.group_sum(groups.clone())?);
    }
    let attn = Node::concat(&heads, 1)?.matmul(&p.w_o)?;
    let s = feats.add(&attn)?;
    let ff_in = maybe_norm(&s, cfg.pre_norm)?;
    s.add(&feed_forward(&ff_in, p)?)
}

/// Value-level local attention unit; output has the same M and width.
pub fn lau_forward<T: Float>(
    tokens: &TokenSet<T>,
    params: &MhaParams<T>,
    cfg: &AttentionConfig,
) -> Result<TokenSet<T>> {
    let bound = BoundMha::bind(params, false);
    let feats = Node::constant(tokens.feats.clone());
    let out = lau_node(&feats, &tokens.anchors, &bound, cfg)?;
    TokenSet::new(out.value().clone(), tokens.anchors.clone())
}

/// Global attention unit graph: cross-attention from tokens to the lifted
/// raw points, with the same residual + feed-forward structure.
pub fn gau_node<T: Float>(
    tokens: &Node<T>,
    cloud_embed: &Node<T>,
    p: &BoundMha<T>,
    pre_norm: bool,
) -> Result<Node<T>> {
    let q = maybe_norm(tokens, pre_norm)?;
    let attn = mha_node(&q, cloud_embed, p)?;
    let c = tokens.add(&attn)?;
    let ff_in = maybe_norm(&c, pre_norm)?;
    c.add(&feed_forward(&ff_in, p)?)
}

/// Value-level global attention unit.
pub fn gau_forward<T: Float>(
    tokens: &TokenSet<T>,
    cloud_embed: &Tensor<T>,
    params: &MhaParams<T>,
    pre_norm: bool,
) -> Result<TokenSet<T>> {
    let bound = BoundMha::bind(params, false);
    let t = Node::constant(tokens.feats.clone());
    let e = Node::constant(cloud_embed.clone());
    let out = gau_node(&t, &e, &bound, pre_norm)?;
    TokenSet::new(out.value().clone(), tokens.anchors.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(heads: usize, d: usize, dff: usize, k: usize) -> AttentionConfig {
        AttentionConfig {
            heads,
            d_model: d,
            d_ff: dff,
            k_neighbors: k,
            pre_norm: false,
        }
    }

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn mha_uniform_over_identical_keys() {
        let c = cfg(2, 4, 8, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = MhaParams::<f64>::init(&c, &mut rng);
        let q = rand_t(&[3, 4], &mut rng);
        let key_row: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut src_rows = Vec::new();
        for _ in 0..5 {
            src_rows.push(key_row.clone());
        }
        let src = Tensor::from_rows(&src_rows).unwrap();
        let out = mha(&q, &src, &params).unwrap();
        // With every key identical, attention averages identical values:
        // the output equals the value projection of that key through w_o,
        // independent of the query row.
        let single = mha(&q, &Tensor::from_rows(&[key_row]).unwrap(), &params).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert!((out.row(i)[j] - single.row(i)[j]).abs() < 1e-12);
            }
        }
        // and all query rows see the same source mix, so rows differ only
        // through their (irrelevant) query projection
        for i in 1..3 {
            for j in 0..4 {
                assert!((out.row(i)[j] - out.row(0)[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mha_single_source_weight_is_one() {
        let c = cfg(1, 4, 4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = MhaParams::<f64>::init(&c, &mut rng);
        let q = rand_t(&[2, 4], &mut rng);
        let src = rand_t(&[1, 4], &mut rng);
        let out = mha(&q, &src, &params).unwrap();
        // S = 1: softmax weight is exactly 1 and the output is v·w_o for
        // every query row.
        let vh = src.row(0);
        let mut v_proj = vec![0.0; 4];
        for j in 0..4 {
            for i in 0..4 {
                v_proj[j] += vh[i] * params.w_v[0].row(i)[j];
            }
        }
        let mut expect = vec![0.0; 4];
        for j in 0..4 {
            for i in 0..4 {
                expect[j] += v_proj[i] * params.w_o.row(i)[j];
            }
        }
        for r in 0..2 {
            for j in 0..4 {
                assert!((out.row(r)[j] - expect[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lau_residual_identity_with_zeroed_outputs() {
        let c = cfg(2, 6, 12, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = MhaParams::<f64>::init(&c, &mut rng);
        params.zero_output_paths();
        let feats = rand_t(&[5, 6], &mut rng);
        let anchors: Vec<[f64; 3]> = (0..5)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect();
        let tokens = TokenSet::new(feats.clone(), anchors).unwrap();
        let out = lau_forward(&tokens, &params, &c).unwrap();
        assert_eq!(out.feats, feats);
    }

    #[test]
    fn gau_residual_identity_with_zeroed_outputs() {
        let c = cfg(2, 6, 12, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = MhaParams::<f64>::init(&c, &mut rng);
        params.zero_output_paths();
        let feats = rand_t(&[4, 6], &mut rng);
        let anchors = vec![[0.0; 3]; 4];
        let tokens = TokenSet::new(feats.clone(), anchors).unwrap();
        let embed = rand_t(&[32, 6], &mut rng);
        let out = gau_forward(&tokens, &embed, &params, false).unwrap();
        assert_eq!(out.feats, feats);
    }

    #[test]
    fn lau_rejects_k_larger_than_token_count() {
        let c = cfg(2, 6, 12, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let params = MhaParams::<f64>::init(&c, &mut rng);
        let tokens = TokenSet::new(rand_t(&[5, 6], &mut rng), vec![[0.0; 3]; 5]).unwrap();
        let err = lau_forward(&tokens, &params, &c).unwrap_err();
        assert!(err.to_string().contains("exceeds token count"));
    }

    #[test]
    fn lau_with_k_equal_m_matches_full_attention() {
        let c = cfg(2, 6, 12, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = MhaParams::<f64>::init(&c, &mut rng);
        let feats = rand_t(&[5, 6], &mut rng);
        let anchors: Vec<[f64; 3]> = (0..5)
            .map(|i| [i as f64, 0.0, 0.0])
            .collect();
        let tokens = TokenSet::new(feats.clone(), anchors).unwrap();
        let local = lau_forward(&tokens, &params, &c).unwrap();

        // reference: S = X + MHA(X, X), out = S + FF(S)
        let attn = mha(&feats, &feats, &params).unwrap();
        let bound = BoundMha::bind(&params, false);
        let s = Node::constant(feats).add(&Node::constant(attn)).unwrap();
        let expect = s.add(&feed_forward(&s, &bound).unwrap()).unwrap();
        for (a, b) in local.feats.data().iter().zip(expect.value().data()) {
            assert!((a - b).abs() < 1e-11, "{a} vs {b}");
        }
    }

    #[test]
    fn gau_single_token_uniform_over_identical_points() {
        let c = cfg(1, 4, 8, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = MhaParams::<f64>::init(&c, &mut rng);
        let token = rand_t(&[1, 4], &mut rng);
        let row: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let embed = Tensor::from_rows(&vec![row.clone(); 16]).unwrap();
        let tokens = TokenSet::new(token.clone(), vec![[0.0; 3]]).unwrap();
        let out = gau_forward(&tokens, &embed, &params, false).unwrap();
        let single = Tensor::from_rows(&[row]).unwrap();
        let out1 = gau_forward(&tokens, &single, &params, false).unwrap();
        for (a, b) in out.feats.data().iter().zip(out1.feats.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gau_matches_naive_per_token_loop() {
        let c = cfg(2, 6, 12, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = MhaParams::<f64>::init(&c, &mut rng);
        let toks = rand_t(&[4, 6], &mut rng);
        let embed = rand_t(&[32, 6], &mut rng);
        let tokens = TokenSet::new(toks.clone(), vec![[0.0; 3]; 4]).unwrap();
        let fast = gau_forward(&tokens, &embed, &params, false).unwrap();

        // naive: each token row attends over all P keys independently
        for t in 0..4 {
            let one = Tensor::from_rows(&[toks.row(t).to_vec()]).unwrap();
            let tset = TokenSet::new(one, vec![[0.0; 3]]).unwrap();
            let row = gau_forward(&tset, &embed, &params, false).unwrap();
            for j in 0..6 {
                assert!((row.feats.row(0)[j] - fast.feats.row(t)[j]).abs() < 1e-11);
            }
        }
    }
}
