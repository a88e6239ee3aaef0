//! Desk-scale transformer decoder wired to the sliding-window cache.

use crate::attention::{attend, HeadLayout, Rope};
use crate::error::{invalid, shape, Result};
use crate::kv_cache::{AttentionSinkRule, CacheLayout, FilterRule, SequenceCache, SlidingKvCache};
use crate::model::{AttentionWeights, Model, ModelConfig};
use crate::tensor::{add_bias, matmul_rows, rms_norm};

/// Attention inputs of one layer for one forward call: post-RoPE queries,
/// post-RoPE keys and values of the new tokens, in stored channel order.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    pub layer: usize,
    pub first_pos: usize,
    pub q: Vec<f32>,
    pub k: Vec<f32>,
    pub v: Vec<f32>,
}

/// Per-layer cache layouts plus the filter rules applied when tokens leave the window.
pub struct CachePolicy {
    pub layers: Vec<CacheLayout>,
    pub filters: Vec<Box<dyn FilterRule>>,
}

impl CachePolicy {
    /// Every row kept in full precision.
    pub fn lossless(n_layers: usize) -> Self {
        Self {
            layers: vec![CacheLayout::lossless(); n_layers],
            filters: Vec::new(),
        }
    }

    pub fn with_sinks(mut self, n_sink: usize) -> Self {
        if n_sink > 0 {
            self.filters.push(Box::new(AttentionSinkRule { n_sink }));
        }
        self
    }
}

impl std::fmt::Debug for CachePolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CachePolicy")
            .field("layers", &self.layers)
            .field("filters", &self.filters.iter().map(|r| r.name()).collect::<Vec<_>>())
            .finish()
    }
}

struct LayerRopes {
    q: Rope,
    k: Rope,
}

/// Immutable model plus cache policy; sessions hold the mutable state.
pub struct Engine<'m> {
    model: &'m Model,
    policy: CachePolicy,
    ropes: Vec<Option<LayerRopes>>,
}

/// Decoding state of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    pub cache: SequenceCache,
}

impl Session {
    pub fn len(&self) -> usize {
        self.cache.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cache.is_empty()
    }
}

fn query_channel_map(key_map: &[usize], config: &ModelConfig) -> Vec<usize> {
    let hd = config.head_dim;
    let ratio = config.group_ratio();
    let mut out = Vec::with_capacity(config.hidden);
    for h in 0..config.n_heads {
        let kv = h / ratio;
        out.extend((0..hd).map(|i| h * hd + key_map[kv * hd + i] - kv * hd));
    }
    out
}

fn layer_ropes(attn: &AttentionWeights, config: &ModelConfig) -> Result<LayerRopes> {
    Ok(LayerRopes {
        q: Rope::new(
            &query_channel_map(&attn.key_channel_map, config),
            config.head_dim,
            config.rope_base,
        )?,
        k: Rope::new(&attn.key_channel_map, config.head_dim, config.rope_base)?,
    })
}

impl<'m> Engine<'m> {
    pub fn new(model: &'m Model, policy: CachePolicy) -> Result<Self> {
        let config = &model.config;
        if policy.layers.len() != config.n_layers {
            return Err(shape(format!(
                "cache policy has {} layers, model has {}",
                policy.layers.len(),
                config.n_layers
            )));
        }
        let ropes = model
            .layers
            .iter()
            .map(|l| config.rope.then(|| layer_ropes(&l.attn, config)).transpose())
            .collect::<Result<_>>()?;
        Ok(Self { model, policy, ropes })
    }

    /// Full-precision reference engine.
    pub fn reference(model: &'m Model) -> Result<Self> {
        Self::new(model, CachePolicy::lossless(model.config.n_layers))
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn policy(&self) -> &CachePolicy {
        &self.policy
    }

    pub fn new_session(&self) -> Result<Session> {
        let kvh = self.model.config.kv_hidden();
        let layers = self
            .policy
            .layers
            .iter()
            .map(|l| SlidingKvCache::new(l.clone(), kvh, kvh))
            .collect::<Result<_>>()?;
        Ok(Session {
            cache: SequenceCache::new(layers),
        })
    }

    /// Run `tokens` through the model, appending them to the session cache.
    /// Returns logits, one row of `vocab` values per token.
    pub fn forward(&self, session: &mut Session, tokens: &[u32]) -> Result<Vec<f32>> {
        self.forward_traced(session, tokens, &mut |_| {})
    }

    pub fn forward_traced(
        &self,
        session: &mut Session,
        tokens: &[u32],
        observer: &mut dyn FnMut(LayerTrace),
    ) -> Result<Vec<f32>> {
        let config = &self.model.config;
        let d = config.hidden;
        let kvh = config.kv_hidden();
        if session.cache.layers.len() != config.n_layers {
            return Err(shape("session does not belong to this engine"));
        }
        let first_pos = session.len();
        let mut x = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            if t as usize >= config.vocab {
                return Err(invalid(format!("token {t} outside vocabulary of {}", config.vocab)));
            }
            x.extend_from_slice(self.model.embed.row(t as usize));
        }
        let layout = HeadLayout {
            n_heads: config.n_heads,
            n_kv_heads: config.n_kv_heads,
            head_dim: config.head_dim,
        };

        for (i, (layer, cache)) in self.model.layers.iter().zip(&mut session.cache.layers).enumerate() {
            let a = &layer.attn;
            let h = rms_norm(&x, d, config.norm_eps);
            let mut q = matmul_rows(&h, d, &a.wq)?;
            let mut k = matmul_rows(&h, d, &a.wk)?;
            let mut v = matmul_rows(&h, d, &a.wv)?;
            add_bias(&mut q, &a.bq);
            add_bias(&mut k, &a.bk);
            add_bias(&mut v, &a.bv);
            if let Some(r) = &self.ropes[i] {
                r.q.apply(&mut q, first_pos);
                r.k.apply(&mut k, first_pos);
            }
            cache.append(&k, &v)?;
            let heads = attend(&q, cache.keys(), cache.values(), &layout, first_pos)?;
            let o = matmul_rows(&heads, d, &a.wo)?;
            cache.advance(&self.policy.filters)?;
            debug_assert_eq!(k.len(), tokens.len() * kvh);
            observer(LayerTrace {
                layer: i,
                first_pos,
                q,
                k,
                v,
            });
            for (xv, ov) in x.iter_mut().zip(&o) {
                *xv += ov;
            }

            let h = rms_norm(&x, d, config.norm_eps);
            let mut up = matmul_rows(&h, d, &layer.w_up)?;
            up.iter_mut().for_each(|u| *u = u.max(0.0));
            let down = matmul_rows(&up, config.ffn_hidden, &layer.w_down)?;
            for (xv, dv) in x.iter_mut().zip(&down) {
                *xv += dv;
            }
        }
        let h = rms_norm(&x, d, config.norm_eps);
        matmul_rows(&h, d, &self.model.lm_head)
    }

    /// Greedy decoding: one prefill pass over the prompt, then `n_new`
    /// single-token steps. Returns the prompt followed by the new tokens.
    pub fn generate(&self, prompt: &[u32], n_new: usize) -> Result<Vec<u32>> {
        Ok(self.generate_session(prompt, n_new)?.0)
    }

    pub fn generate_session(&self, prompt: &[u32], n_new: usize) -> Result<(Vec<u32>, Session)> {
        if prompt.is_empty() {
            return Err(invalid("prompt is empty"));
        }
        let vocab = self.model.config.vocab;
        let mut session = self.new_session()?;
        let mut out = prompt.to_vec();
        if n_new == 0 {
            return Ok((out, session));
        }
        let logits = self.forward(&mut session, prompt)?;
        let mut next = argmax(&logits[logits.len() - vocab..]);
        for step in 0..n_new {
            out.push(next);
            if step + 1 < n_new {
                let logits = self.forward(&mut session, &[next])?;
                next = argmax(&logits);
            }
        }
        Ok((out, session))
    }

    /// `exp(mean NLL)` of each next token under teacher forcing. The first
    /// `prefill` tokens go through one pass, the rest one token at a time.
    pub fn perplexity(&self, tokens: &[u32], prefill: usize) -> Result<f64> {
        Ok(self.perplexity_session(tokens, prefill)?.0)
    }

    pub fn perplexity_session(&self, tokens: &[u32], prefill: usize) -> Result<(f64, Session)> {
        if tokens.len() < 2 {
            return Err(invalid("perplexity needs at least two tokens"));
        }
        let vocab = self.model.config.vocab;
        let prefill = prefill.clamp(1, tokens.len() - 1);
        let mut session = self.new_session()?;
        let mut logits = self.forward(&mut session, &tokens[..prefill])?;
        for &t in &tokens[prefill..tokens.len() - 1] {
            logits.extend(self.forward(&mut session, &[t])?);
        }
        let nll: f64 = logits
            .chunks_exact(vocab)
            .zip(&tokens[1..])
            .map(|(row, &target)| {
                let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
                let lse = row.iter().map(|&l| (l as f64 - max).exp()).sum::<f64>().ln() + max;
                lse - row[target as usize] as f64
            })
            .sum();
        Ok(((nll / (tokens.len() - 1) as f64).exp(), session))
    }
}

/// Index of the largest logit; ties resolve to the lowest index.
pub fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Attention inputs of every layer for `tokens`, from one full-precision pass.
pub fn capture_layer_traces(model: &Model, tokens: &[u32]) -> Result<Vec<LayerTrace>> {
    let engine = Engine::reference(model)?;
    let mut session = engine.new_session()?;
    let mut traces = Vec::with_capacity(model.config.n_layers);
    engine.forward_traced(&mut session, tokens, &mut |t| traces.push(t))?;
    Ok(traces)
}
