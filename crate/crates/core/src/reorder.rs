//! Channel statistics, k-means channel clustering, and permutation fusion.
//!
//! A [`CachePlan`] is a gather permutation (`stored[c] = original[perm[c]]`)
//! plus group boundaries over the permuted channels. Permutations never cross
//! KV-head boundaries. Fusing a plan into the projection weights leaves the
//! full-precision attention output unchanged: keys and the matching query
//! channels are gathered with the key permutation, values with the value
//! permutation, and the rows of the output projection follow the values.

use crate::error::{invalid, shape, Result};
use crate::kmeans::kmeans;
use crate::model::{AttentionWeights, Model, ModelConfig};
use crate::quant::CacheKind;

/// Per-channel running min/max over calibration tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub min: Vec<f32>,
    pub max: Vec<f32>,
    pub tokens: usize,
}

impl ChannelStats {
    pub fn new(channels: usize) -> Self {
        Self {
            min: vec![f32::INFINITY; channels],
            max: vec![f32::NEG_INFINITY; channels],
            tokens: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.min.len()
    }

    /// Fold flat rows of width `channels()` into the statistics.
    pub fn observe(&mut self, rows: &[f32]) -> Result<()> {
        let c = self.channels();
        if c == 0 || !rows.len().is_multiple_of(c) {
            return Err(shape(format!("{} values are not rows of width {c}", rows.len())));
        }
        for row in rows.chunks_exact(c) {
            for ((lo, hi), &v) in self.min.iter_mut().zip(self.max.iter_mut()).zip(row) {
                *lo = lo.min(v);
                *hi = hi.max(v);
            }
            self.tokens += 1;
        }
        Ok(())
    }

    fn slice(&self, range: std::ops::Range<usize>) -> ChannelStats {
        ChannelStats {
            min: self.min[range.clone()].to_vec(),
            max: self.max[range].to_vec(),
            tokens: self.tokens,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KvStats {
    pub key: ChannelStats,
    pub value: ChannelStats,
}

/// Collect key and value statistics from `(K rows, V rows)` samples.
pub fn collect_stats(samples: &[(&[f32], &[f32])], key_channels: usize, value_channels: usize) -> Result<KvStats> {
    let mut stats = KvStats {
        key: ChannelStats::new(key_channels),
        value: ChannelStats::new(value_channels),
    };
    for (k, v) in samples {
        if k.len() / key_channels.max(1) != v.len() / value_channels.max(1) {
            return Err(shape("key and value samples hold different token counts"));
        }
        stats.key.observe(k)?;
        stats.value.observe(v)?;
    }
    if stats.key.tokens == 0 {
        return Err(invalid("channel statistics need at least one token"));
    }
    Ok(stats)
}

/// Permutation and group boundaries for one cache of one layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CachePlan {
    pub permutation: Vec<usize>,
    /// Monotone offsets `0 = b_0 < b_1 < ... < b_G = C` into permuted channels.
    pub boundaries: Vec<usize>,
}

impl CachePlan {
    /// Contiguous groups of about `group_size` channels inside each head.
    pub fn identity(channels: usize, head_dim: usize, group_size: usize) -> Result<Self> {
        if head_dim == 0 || !channels.is_multiple_of(head_dim) {
            return Err(shape(format!("{channels} channels are not whole heads of {head_dim}")));
        }
        let per_head = groups_per_head(head_dim, group_size);
        let mut boundaries = vec![0];
        for h in 0..channels / head_dim {
            for g in 1..=per_head {
                boundaries.push(h * head_dim + g * head_dim / per_head);
            }
        }
        Ok(Self {
            permutation: (0..channels).collect(),
            boundaries,
        })
    }

    pub fn channels(&self) -> usize {
        self.permutation.len()
    }

    pub fn n_groups(&self) -> usize {
        self.boundaries.len().saturating_sub(1)
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.boundaries.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.permutation.len()];
        for (i, &p) in self.permutation.iter().enumerate() {
            inv[p] = i;
        }
        inv
    }

    pub fn is_identity(&self) -> bool {
        self.permutation.iter().enumerate().all(|(i, &p)| i == p)
    }

    /// Check bijectivity, head containment and that boundaries partition `[0, C)`.
    pub fn validate(&self, head_dim: usize) -> Result<()> {
        let c = self.permutation.len();
        let mut seen = vec![false; c];
        for (i, &p) in self.permutation.iter().enumerate() {
            if p >= c || seen[p] {
                return Err(invalid("channel permutation is not a bijection"));
            }
            seen[p] = true;
            if head_dim > 0 && p / head_dim != i / head_dim {
                return Err(invalid(format!("permutation moves channel {p} across a head boundary")));
            }
        }
        let b = &self.boundaries;
        let ok = b.len() >= 2 && b[0] == 0 && b[b.len() - 1] == c && b.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(invalid(format!("group boundaries {b:?} do not partition {c} channels")));
        }
        if head_dim > 0 && b.windows(2).any(|w| (w[0] / head_dim) != ((w[1] - 1) / head_dim)) {
            return Err(invalid("a group spans two heads"));
        }
        Ok(())
    }

    /// Sum over groups of the group's value range on the given statistics.
    pub fn group_spread(&self, stats: &ChannelStats) -> f64 {
        self.boundaries
            .windows(2)
            .map(|w| {
                let chans = &self.permutation[w[0]..w[1]];
                let lo = chans.iter().map(|&c| stats.min[c]).fold(f32::INFINITY, f32::min);
                let hi = chans.iter().map(|&c| stats.max[c]).fold(f32::NEG_INFINITY, f32::max);
                f64::from(hi - lo)
            })
            .sum()
    }
}

fn groups_per_head(head_dim: usize, group_size: usize) -> usize {
    ((head_dim as f64 / group_size.max(1) as f64).round() as usize).clamp(1, head_dim)
}

/// Cluster channels on their `(min, max)` feature into at most `n_groups` groups.
///
/// Channels are sorted by cluster (clusters ordered by their lowest channel
/// index, channels stable by index within a cluster). Clusters that end up
/// empty are dropped, so the plan can hold fewer groups than requested.
pub fn cluster_channels(stats: &ChannelStats, n_groups: usize, seed: u64) -> Result<CachePlan> {
    let c = stats.channels();
    if n_groups == 0 || n_groups > c {
        return Err(invalid(format!("cannot form {n_groups} groups from {c} channels")));
    }
    let features: Vec<[f64; 2]> = stats
        .min
        .iter()
        .zip(&stats.max)
        .map(|(&lo, &hi)| [f64::from(lo), f64::from(hi)])
        .collect();
    let assign = kmeans(&features, n_groups, seed);

    // Relabel clusters in order of first appearance.
    let mut label = vec![usize::MAX; n_groups];
    let mut next = 0;
    for &a in &assign {
        if label[a] == usize::MAX {
            label[a] = next;
            next += 1;
        }
    }
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by_key(|&ch| (label[assign[ch]], ch));

    let mut boundaries = vec![0];
    for i in 1..c {
        if label[assign[order[i]]] != label[assign[order[i - 1]]] {
            boundaries.push(i);
        }
    }
    boundaries.push(c);
    Ok(CachePlan {
        permutation: order,
        boundaries,
    })
}

/// Cluster each KV head independently and stitch the head plans together.
pub fn plan_cache(stats: &ChannelStats, head_dim: usize, group_size: usize, seed: u64) -> Result<CachePlan> {
    let c = stats.channels();
    if head_dim == 0 || !c.is_multiple_of(head_dim) {
        return Err(shape(format!("{c} channels are not whole heads of {head_dim}")));
    }
    let per_head = groups_per_head(head_dim, group_size);
    let mut permutation = Vec::with_capacity(c);
    let mut boundaries = vec![0];
    for h in 0..c / head_dim {
        let base = h * head_dim;
        let head_seed = seed ^ (h as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let head = cluster_channels(&stats.slice(base..base + head_dim), per_head, head_seed)?;
        permutation.extend(head.permutation.iter().map(|p| p + base));
        boundaries.extend(head.boundaries[1..].iter().map(|b| b + base));
    }
    Ok(CachePlan {
        permutation,
        boundaries,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerPlan {
    pub key: CachePlan,
    pub value: CachePlan,
}

impl LayerPlan {
    pub fn get(&self, kind: CacheKind) -> &CachePlan {
        match kind {
            CacheKind::Key => &self.key,
            CacheKind::Value => &self.value,
        }
    }
}

/// Per-layer key and value plans.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReorderPlan {
    pub layers: Vec<LayerPlan>,
}

impl ReorderPlan {
    pub fn identity(config: &ModelConfig, key_group: usize, value_group: usize) -> Result<Self> {
        let kvh = config.kv_hidden();
        let layers = (0..config.n_layers)
            .map(|_| {
                Ok(LayerPlan {
                    key: CachePlan::identity(kvh, config.head_dim, key_group)?,
                    value: CachePlan::identity(kvh, config.head_dim, value_group)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// Build a plan from per-layer statistics with one k-means run per head.
    pub fn from_stats(
        stats: &[KvStats],
        head_dim: usize,
        key_group: usize,
        value_group: usize,
        seed: u64,
    ) -> Result<Self> {
        let layers = stats
            .iter()
            .enumerate()
            .map(|(l, s)| {
                let layer_seed = seed.wrapping_add(l as u64 * 1_000_003);
                Ok(LayerPlan {
                    key: plan_cache(&s.key, head_dim, key_group, layer_seed)?,
                    value: plan_cache(&s.value, head_dim, value_group, layer_seed ^ 0x5555)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.layers.len() != config.n_layers {
            return Err(shape(format!(
                "plan has {} layers, model has {}",
                self.layers.len(),
                config.n_layers
            )));
        }
        for l in &self.layers {
            for p in [&l.key, &l.value] {
                if p.channels() != config.kv_hidden() {
                    return Err(shape("plan channel count does not match the model"));
                }
                p.validate(config.head_dim)?;
            }
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.layers.iter().all(|l| l.key.is_identity() && l.value.is_identity())
    }
}

/// Expand a KV-channel permutation to the query/output channels of every query
/// head that reads that KV head.
fn query_side_permutation(kv_perm: &[usize], config: &ModelConfig) -> Vec<usize> {
    let hd = config.head_dim;
    let ratio = config.group_ratio();
    let mut out = Vec::with_capacity(config.hidden);
    for h in 0..config.n_heads {
        let kv = h / ratio;
        for i in 0..hd {
            let src = kv_perm[kv * hd + i] - kv * hd;
            out.push(h * hd + src);
        }
    }
    out
}

/// Fuse one layer's plan into its attention projections.
pub fn fuse_into_weights(
    plan: &LayerPlan,
    weights: &AttentionWeights,
    config: &ModelConfig,
) -> Result<AttentionWeights> {
    let kvh = config.kv_hidden();
    if weights.wk.cols() != kvh || weights.wv.cols() != kvh || weights.wq.cols() != config.hidden {
        return Err(shape("projection weights do not match the model config"));
    }
    if plan.key.channels() != kvh || plan.value.channels() != kvh {
        return Err(shape(format!(
            "plan covers {}/{} channels, attention has {kvh}",
            plan.key.channels(),
            plan.value.channels()
        )));
    }
    plan.key.validate(config.head_dim)?;
    plan.value.validate(config.head_dim)?;

    let kp = &plan.key.permutation;
    let vp = &plan.value.permutation;
    let q_perm = query_side_permutation(kp, config);
    let o_perm = query_side_permutation(vp, config);
    let gather = |v: &[f32], p: &[usize]| p.iter().map(|&i| v[i]).collect::<Vec<f32>>();

    Ok(AttentionWeights {
        wq: weights.wq.gather_columns(&q_perm)?,
        wk: weights.wk.gather_columns(kp)?,
        wv: weights.wv.gather_columns(vp)?,
        wo: weights.wo.gather_rows(&o_perm)?,
        bq: gather(&weights.bq, &q_perm),
        bk: gather(&weights.bk, kp),
        bv: gather(&weights.bv, vp),
        key_channel_map: kp.iter().map(|&i| weights.key_channel_map[i]).collect(),
    })
}

impl Model {
    /// Copy of the model with every layer's plan fused into its projections.
    pub fn fused(&self, plan: &ReorderPlan) -> Result<Model> {
        plan.validate(&self.config)?;
        let mut out = self.clone();
        for (layer, lp) in out.layers.iter_mut().zip(&plan.layers) {
            layer.attn = fuse_into_weights(lp, &layer.attn, &self.config)?;
        }
        Ok(out)
    }
}
