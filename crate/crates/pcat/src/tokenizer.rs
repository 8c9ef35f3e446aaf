//! Multi-scale tokenization.
//!
//! One sorted ball query per centroid; scale `i` pools the first `K_i`
//! sorted neighbors through a linear layer shared across scales, and the
//! per-scale pooled features concatenate into one token:
//!
//! ```text
//! token = pool(δ(rows @ K_1)) ⊕ pool(δ(rows @ K_2)) ⊕ … ⊕ pool(δ(rows @ K_N))
//! row_j = (p_j − c) ⊕ f_j
//! ```
//!
//! The pool is a column-wise max, so padding a deficient ball by repeating
//! its nearest point is a no-op, and permuting the input cloud leaves token
//! values unchanged.

use rand::Rng;

use crate::autodiff::Node;
use crate::error::{Error, Result};
use crate::float::Float;
use crate::spatial::{ball_query_coords, fps_coords, PointCloud};
use crate::tensor::Tensor;

/// Neighbor counts per scale plus the shared geometry settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleConfig<T> {
    /// Strictly increasing neighbor counts `K_1 < K_2 < … < K_N`.
    pub ks: Vec<usize>,
    /// Ball radius around each centroid.
    pub radius: T,
    /// Number of centroids M sampled by fps.
    pub centroid_count: usize,
    /// Output width of the shared linear layer δ per scale.
    pub out_dim_per_scale: usize,
}

impl<T: Float> ScaleConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.ks[0] == 0 {
            return Err(Error::invalid("scale config needs ks with all entries >= 1"));
        }
        if self.ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!(
                "ks must be strictly increasing, got {:?}",
                self.ks
            )));
        }
        if self.radius <= T::zero() || self.radius.is_nan() {
            return Err(Error::invalid("scale radius must be > 0"));
        }
        if self.centroid_count == 0 {
            return Err(Error::invalid("centroid count must be >= 1"));
        }
        if self.out_dim_per_scale == 0 {
            return Err(Error::invalid("out_dim_per_scale must be >= 1"));
        }
        Ok(())
    }

    /// Largest scale; also the ball-query point cap.
    pub fn k_max(&self) -> usize {
        *self.ks.last().expect("validated non-empty")
    }

    /// Token width produced by tokenization: scales × per-scale width.
    pub fn token_width(&self) -> usize {
        self.ks.len() * self.out_dim_per_scale
    }
}

/// M tokens: feature rows plus the centroid coordinate each is anchored at.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet<T> {
    pub feats: Tensor<T>,
    pub anchors: Vec<[T; 3]>,
}

impl<T: Float> TokenSet<T> {
    pub fn new(feats: Tensor<T>, anchors: Vec<[T; 3]>) -> Result<Self> {
        if feats.rank() != 2 || feats.shape()[0] != anchors.len() {
            return Err(Error::invalid(format!(
                "token features {:?} do not match {} anchors",
                feats.shape(),
                anchors.len()
            )));
        }
        if !feats.is_finite() {
            return Err(Error::NonFinite("token features".into()));
        }
        Ok(TokenSet { feats, anchors })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn width(&self) -> usize {
        self.feats.shape()[1]
    }
}

/// The shared linear layer δ: maps `(offset ⊕ features)` rows to
/// `out_dim_per_scale` columns. Identical parameters serve every scale.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Float> DeltaParams<T> {
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        DeltaParams {
            weight: xavier(in_dim, out_dim, rng),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Xavier-uniform rank-2 init, deterministic under the caller's RNG.
pub fn xavier<T: Float, R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| T::of(rng.gen_range(-a..a)))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("xavier shape")
}

/// Geometry record of one tokenization pass, kept for inspection dumps.
#[derive(Debug, Clone)]
pub struct TokenizeDetail<T> {
    pub centroid_ids: Vec<usize>,
    pub ball_neighbors: Vec<Vec<usize>>,
    pub ball_distances: Vec<Vec<T>>,
    pub ks: Vec<usize>,
}

impl<T> TokenizeDetail<T> {
    /// Neighbor ids entering scale `i` for centroid `c` (the first `K_i`
    /// sorted ball members, before padding).
    pub fn scale_neighbors(&self, scale: usize, centroid: usize) -> &[usize] {
        let k = self.ks[scale];
        let list = &self.ball_neighbors[centroid];
        &list[..k.min(list.len())]
    }
}

/// Token feature node, centroid anchors, and the geometry record.
pub type TokenizeOutput<T> = (Node<T>, Vec<[T; 3]>, TokenizeDetail<T>);

/// Graph-level tokenization over an already-ordered coordinate slice.
/// Differentiable w.r.t. `feats` (when present) and the δ parameters.
pub fn tokenize_node<T: Float>(
    coords: &[[T; 3]],
    feats: Option<&Node<T>>,
    cfg: &ScaleConfig<T>,
    delta_w: &Node<T>,
    delta_b: &Node<T>,
    seed: u64,
) -> Result<TokenizeOutput<T>> {
    cfg.validate()?;
    if let Some(f) = feats {
        if f.shape()[0] != coords.len() {
            return Err(Error::invalid(format!(
                "tokenize: {} feature rows for {} points",
                f.shape()[0],
                coords.len()
            )));
        }
    }
    let feat_dim = feats.map_or(0, |f| f.shape()[1]);
    if delta_w.shape() != [3 + feat_dim, cfg.out_dim_per_scale] {
        return Err(Error::ShapeMismatch {
            op: "tokenize delta",
            lhs: delta_w.shape().to_vec(),
            rhs: vec![3 + feat_dim, cfg.out_dim_per_scale],
        });
    }

    let k_max = cfg.k_max();
    let m = cfg.centroid_count;
    let centroid_ids = fps_coords(coords, m, seed)?;
    let anchors: Vec<[T; 3]> = centroid_ids.iter().map(|&i| coords[i]).collect();
    let ball = ball_query_coords(coords, &anchors, cfg.radius, k_max)?;

    // Padded gather plan: deficient balls repeat their nearest point; an
    // empty ball degenerates to one zero row (offset 0, features 0), whose
    // image under δ is the bias.
    let mut gather: Vec<Option<usize>> = Vec::with_capacity(m * k_max);
    let mut offsets: Vec<T> = Vec::with_capacity(m * k_max * 3);
    for (c, list) in ball.neighbors.iter().enumerate() {
        let anchor = anchors[c];
        for j in 0..k_max {
            if list.is_empty() {
                gather.push(None);
                offsets.extend_from_slice(&[T::zero(); 3]);
            } else {
                let id = list[if j < list.len() { j } else { 0 }];
                gather.push(Some(id));
                let p = coords[id];
                offsets.extend_from_slice(&[
                    p[0] - anchor[0],
                    p[1] - anchor[1],
                    p[2] - anchor[2],
                ]);
            }
        }
    }
    let geo = Node::constant(Tensor::new(vec![m * k_max, 3], offsets)?);
    let rows = match feats {
        Some(f) => {
            let gathered = f.gather_rows(gather)?;
            Node::concat(&[geo, gathered], 1)?
        }
        None => geo,
    };
    let lifted = rows.matmul(delta_w)?.add_bias(delta_b)?;

    let mut pooled = Vec::with_capacity(cfg.ks.len());
    for &k in &cfg.ks {
        let groups: Vec<Vec<usize>> = (0..m)
            .map(|c| (c * k_max..c * k_max + k).collect())
            .collect();
        pooled.push(lifted.group_max(groups)?);
    }
    let token = Node::concat(&pooled, 1)?;
    let detail = TokenizeDetail {
        centroid_ids,
        ball_neighbors: ball.neighbors,
        ball_distances: ball.distances,
        ks: cfg.ks.clone(),
    };
    Ok((token, anchors, detail))
}

/// Abstract a point cloud into tokens. The input is put into canonical
/// (lexicographic) order first, so the result does not depend on the
/// point permutation.
pub fn tokenize<T: Float>(
    cloud: &PointCloud<T>,
    cfg: &ScaleConfig<T>,
    delta: &DeltaParams<T>,
    seed: u64,
) -> Result<TokenSet<T>> {
    Ok(tokenize_with_detail(cloud, cfg, delta, seed)?.0)
}

/// [`tokenize`] plus the geometry record and the canonical order used.
pub fn tokenize_with_detail<T: Float>(
    cloud: &PointCloud<T>,
    cfg: &ScaleConfig<T>,
    delta: &DeltaParams<T>,
    seed: u64,
) -> Result<(TokenSet<T>, TokenizeDetail<T>, Vec<usize>)> {
    let order = cloud.canonical_order();
    let canon = cloud.permuted(&order)?;
    let feats_node = canon.feats().map(|f| Node::constant(f.clone()));
    let dw = Node::constant(delta.weight.clone());
    let db = Node::constant(delta.bias.clone());
    let (token, anchors, detail) =
        tokenize_node(canon.coords(), feats_node.as_ref(), cfg, &dw, &db, seed)?;
    Ok((
        TokenSet::new(token.value().clone(), anchors)?,
        detail,
        order,
    ))
}

/// Re-tokenize an existing token set into `m_next` coarser tokens, treating
/// anchors as coordinates and token features as per-point features.
pub fn reduce_tokens<T: Float>(
    tokens: &TokenSet<T>,
    m_next: usize,
    cfg: &ScaleConfig<T>,
    delta: &DeltaParams<T>,
    seed: u64,
) -> Result<TokenSet<T>> {
    if m_next >= tokens.len() {
        return Err(Error::invalid(format!(
            "reduce_tokens: m_next = {m_next} must be < current M = {}",
            tokens.len()
        )));
    }
    let mut cfg = cfg.clone();
    cfg.centroid_count = m_next;
    let feats = Node::constant(tokens.feats.clone());
    let dw = Node::constant(delta.weight.clone());
    let db = Node::constant(delta.bias.clone());
    let (token, anchors, _) =
        tokenize_node(&tokens.anchors, Some(&feats), &cfg, &dw, &db, seed)?;
    TokenSet::new(token.value().clone(), anchors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn cfg1(ks: Vec<usize>, radius: f64, m: usize, out: usize) -> ScaleConfig<f64> {
        ScaleConfig {
            ks,
            radius,
            centroid_count: m,
            out_dim_per_scale: out,
        }
    }

    #[test]
    fn validates_scale_config() {
        assert!(cfg1(vec![1, 2, 4], 0.5, 4, 2).validate().is_ok());
        assert!(cfg1(vec![2, 2], 0.5, 4, 2).validate().is_err());
        assert!(cfg1(vec![], 0.5, 4, 2).validate().is_err());
        assert!(cfg1(vec![1], 0.0, 4, 2).validate().is_err());
    }

    #[test]
    fn single_point_token_is_bias_image() {
        // K_1 = 1, centroid == its only neighbor, no features:
        // the token is δ(0) = bias.
        let cloud = PointCloud::from_coords(vec![[0.25, -0.5, 1.0]]).unwrap();
        let cfg = cfg1(vec![1], 1.0, 1, 3);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut delta = DeltaParams::<f64>::init(3, 3, &mut rng);
        delta.bias = Tensor::new(vec![3], vec![0.1, -0.2, 0.7]).unwrap();
        let tokens = tokenize(&cloud, &cfg, &delta, 0).unwrap();
        assert_eq!(tokens.feats.data(), &[0.1, -0.2, 0.7]);
        assert_eq!(tokens.anchors[0], [0.25, -0.5, 1.0]);
    }

    #[test]
    fn two_scale_slicing_width_and_nesting() {
        // Ball of 3 sorted neighbors, scales (1, 3): scale 1 pools only the
        // nearest point, scale 2 pools all three; width doubles.
        let cloud = PointCloud::from_coords(vec![
            [0.0, 0.0, 0.0],
            [0.1, 0.0, 0.0],
            [0.2, 0.0, 0.0],
        ])
        .unwrap();
        let cfg = cfg1(vec![1, 3], 1.0, 1, 2);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let delta = DeltaParams::<f64>::init(3, 2, &mut rng);
        let tokens = tokenize(&cloud, &cfg, &delta, 0).unwrap();
        assert_eq!(tokens.feats.shape(), &[1, 4]);
        // scale nesting under max-pool: pooled over K_1 <= pooled over K_2
        let row = tokens.feats.data();
        assert!(row[0] <= row[2] && row[1] <= row[3]);
    }

    #[test]
    fn permutation_leaves_tokens_bit_identical() {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<[f64; 3]> = (0..40)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect();
        let cloud = PointCloud::from_coords(pts).unwrap();
        let cfg = cfg1(vec![2, 4], 0.8, 8, 3);
        let delta = DeltaParams::<f64>::init(3, 3, &mut rng);
        let base = tokenize(&cloud, &cfg, &delta, 3).unwrap();

        let mut perm: Vec<usize> = (0..40).collect();
        for i in (1..40).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let shuffled = cloud.permuted(&perm).unwrap();
        let other = tokenize(&shuffled, &cfg, &delta, 3).unwrap();
        assert_eq!(base.feats, other.feats);
        assert_eq!(base.anchors, other.anchors);
    }

    #[test]
    fn reduce_tokens_requires_smaller_m() {
        let cloud = PointCloud::from_coords(vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 1.0, 0.0],
        ])
        .unwrap();
        let cfg = cfg1(vec![1, 2], 2.0, 4, 2);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let delta = DeltaParams::<f64>::init(3, 2, &mut rng);
        let tokens = tokenize(&cloud, &cfg, &delta, 0).unwrap();
        let delta2 = DeltaParams::<f64>::init(3 + tokens.width(), 2, &mut rng);
        assert!(reduce_tokens(&tokens, 4, &cfg, &delta2, 1).is_err());
        let reduced = reduce_tokens(&tokens, 2, &cfg, &delta2, 1).unwrap();
        assert_eq!(reduced.len(), 2);
        assert_eq!(reduced.width(), 4);
    }
}
