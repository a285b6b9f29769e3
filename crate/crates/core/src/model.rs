//! MoE layer and toy language model: forward pass with routing trace,
//! deterministic synthetic generation with controllable activation outliers
//! and router skew.
//!
//! The LM is a pre-norm residual stack of MoE blocks with tied embeddings
//! and no attention. Each block normalizes the residual stream once; the
//! router and the selected experts consume the same normalized input, which
//! is what lets a single fused smoothing vector serve both.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, row_matmul, Matrix};

/// How gate probabilities are derived from router logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateMode {
    /// Softmax over all experts, then top-k, then renormalize over the
    /// selection (Mixtral-style). The default.
    SoftmaxTopK,
    /// Top-k on raw logits, then softmax over just the selected logits
    /// (DeepSeek/OLMoE-style).
    TopKSoftmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoEConfig {
    /// Model width (channels).
    pub d: usize,
    /// Expert count.
    pub n: usize,
    /// Experts per token.
    pub k: usize,
    /// Expert hidden width.
    pub h: usize,
    /// MoE block count.
    pub layers: usize,
    /// Token vocabulary size.
    pub vocab: usize,
    pub gate_mode: GateMode,
    /// RMSNorm epsilon.
    pub eps: f64,
}

impl MoEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 || self.k > self.n {
            return Err(Error::invalid(
                "MoEConfig",
                format!("k={} must satisfy 1 <= k <= n={}", self.k, self.n),
            ));
        }
        if self.d == 0 || self.h == 0 || self.vocab == 0 || self.layers == 0 {
            return Err(Error::invalid(
                "MoEConfig",
                "d, h, vocab and layers must all be >= 1",
            ));
        }
        Ok(())
    }
}

/// Two-matrix SiLU MLP expert. Smoothing only ever touches `w1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    /// d x h.
    pub w1: Matrix,
    /// h x d.
    pub w2: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoELayer {
    /// Per-channel RMSNorm gain, length d.
    pub norm_gain: Vec<f64>,
    /// d x n router weights.
    pub router: Matrix,
    pub experts: Vec<Expert>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoEModel {
    pub config: MoEConfig,
    /// vocab x d token embedding, also used (transposed) as the tied output
    /// projection.
    pub embedding: Matrix,
    pub layers: Vec<MoELayer>,
}

/// Routing decision for one token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRouting {
    /// Full pre-softmax logits, length n.
    pub logits: Vec<f64>,
    /// Selected expert indices (top-k order).
    pub selected: Vec<usize>,
    /// Gate probabilities aligned with `selected`; sums to 1.
    pub gates: Vec<f64>,
}

/// Per-token routing decisions for one layer, plus a structural operation
/// count used to verify that transforms stay zero-cost.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RoutingTrace {
    pub tokens: Vec<TokenRouting>,
    /// Number of primitive kernel invocations (norms and row/matrix
    /// products) in the forward pass that produced this trace.
    pub op_count: usize,
}

#[inline]
fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Gate computation shared by every forward path.
pub fn route_token(logits: &[f64], k: usize, mode: GateMode) -> Result<TokenRouting> {
    let sel = tensor::topk(logits, k)?;
    let gates = match mode {
        GateMode::SoftmaxTopK => {
            let probs = tensor::softmax(logits);
            let mut g: Vec<f64> = sel.indices.iter().map(|&i| probs[i]).collect();
            let sum: f64 = g.iter().sum();
            for v in g.iter_mut() {
                *v /= sum;
            }
            g
        }
        GateMode::TopKSoftmax => tensor::softmax(&sel.values),
    };
    Ok(TokenRouting {
        logits: logits.to_vec(),
        selected: sel.indices,
        gates,
    })
}

/// One MoE block: `y_t = sum_{i in T} p_i(x_t) E_i(norm(x_t))`, where the
/// router consumes the same normalized input as the experts. Returns the
/// block output (without the residual add) and the routing trace.
pub fn moe_forward(layer: &MoELayer, x: &Matrix, cfg: &MoEConfig) -> Result<(Matrix, RoutingTrace)> {
    if x.cols() != layer.norm_gain.len() {
        return Err(Error::shape(
            "moe_forward",
            format!("input width {} vs layer width {}", x.cols(), layer.norm_gain.len()),
        ));
    }
    if layer.router.rows() != x.cols() || layer.router.cols() != cfg.n {
        return Err(Error::shape(
            "moe_forward",
            format!(
                "router {}x{} incompatible with d={} n={}",
                layer.router.rows(),
                layer.router.cols(),
                x.cols(),
                cfg.n
            ),
        ));
    }
    let x_norm = tensor::rmsnorm(x, &layer.norm_gain, cfg.eps)?;
    let logits = tensor::matmul(&x_norm, &layer.router)?;
    let mut op_count = 2; // norm + router product
    let mut tokens = Vec::with_capacity(x.rows());
    let mut y = Matrix::zeros(x.rows(), x.cols());
    for t in 0..x.rows() {
        let routing = route_token(logits.row(t), cfg.k, cfg.gate_mode)?;
        let xrow = x_norm.row(t);
        let yrow = y.row_mut(t);
        for (&idx, &gate) in routing.selected.iter().zip(routing.gates.iter()) {
            let expert = &layer.experts[idx];
            let mut hidden = row_matmul(xrow, &expert.w1);
            for v in hidden.iter_mut() {
                *v = silu(*v);
            }
            let out = row_matmul(&hidden, &expert.w2);
            op_count += 2;
            for (o, v) in yrow.iter_mut().zip(out.iter()) {
                *o += gate * v;
            }
        }
        tokens.push(routing);
    }
    Ok((y, RoutingTrace { tokens, op_count }))
}

/// Streaming LM forward. `hook` observes every layer's normalized input and
/// routing trace without the caller having to retain them; the final
/// next-token log-probabilities are computed only when requested.
pub fn lm_forward_hooked<F>(
    model: &MoEModel,
    ids: &[u32],
    mut hook: F,
    want_logprobs: bool,
) -> Result<Option<Matrix>>
where
    F: FnMut(usize, &Matrix, &RoutingTrace),
{
    let cfg = &model.config;
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= cfg.vocab) {
        return Err(Error::invalid(
            "lm_forward",
            format!("token id {bad} out of range for vocab {}", cfg.vocab),
        ));
    }
    let mut x = Matrix::zeros(ids.len(), cfg.d);
    for (t, &id) in ids.iter().enumerate() {
        x.row_mut(t).copy_from_slice(model.embedding.row(id as usize));
    }
    for (li, layer) in model.layers.iter().enumerate() {
        let x_norm = tensor::rmsnorm(&x, &layer.norm_gain, cfg.eps)?;
        let (y, trace) = moe_forward(layer, &x, cfg)?;
        hook(li, &x_norm, &trace);
        for (xv, yv) in x.data_mut().iter_mut().zip(y.data().iter()) {
            *xv += yv;
        }
    }
    if !want_logprobs {
        return Ok(None);
    }
    let logits = tensor::matmul(&x, &model.embedding.transpose())?;
    Ok(Some(tensor::log_softmax_rows(&logits)))
}

/// Per-position next-token log-probabilities.
pub fn lm_forward(model: &MoEModel, ids: &[u32]) -> Result<Matrix> {
    Ok(lm_forward_hooked(model, ids, |_, _, _| {}, true)?.expect("logprobs requested"))
}

/// Forward pass retaining every layer's routing trace.
pub fn lm_forward_traced(model: &MoEModel, ids: &[u32]) -> Result<(Matrix, Vec<RoutingTrace>)> {
    let mut traces: Vec<RoutingTrace> = vec![RoutingTrace::default(); model.layers.len()];
    let logprobs = lm_forward_hooked(
        model,
        ids,
        |li, _, trace| {
            traces[li] = trace.clone();
        },
        true,
    )?
    .expect("logprobs requested");
    Ok((logprobs, traces))
}

/// Activation outlier injection: the named embedding channels are scaled so
/// the MoE input exhibits a few channels of abnormally large magnitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierSpec {
    pub channels: Vec<usize>,
    pub scale: f64,
}

impl OutlierSpec {
    pub fn none() -> Self {
        Self {
            channels: Vec::new(),
            scale: 1.0,
        }
    }
}

/// Router skew: expert i's logit receives a bias proportional to
/// `(i+1)^-exponent`, producing power-law-like routing counts. Exponent 0
/// biases every expert identically, which leaves routing uniform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkewSpec {
    pub exponent: f64,
}

impl SkewSpec {
    pub fn none() -> Self {
        Self { exponent: 0.0 }
    }
}

/// Strength of the router skew bias relative to the unit-variance logit
/// noise. Calibrated on the synthetic harness so that exponent 1.5 leaves
/// rare experts reachable by oversampling rather than starved outright.
const SKEW_BIAS_AMPLITUDE: f64 = 1.5;

/// Offset and spread of the always-positive bias channel (channel 0). The
/// positive sign is what turns router column biases into stable per-expert
/// logit offsets.
const BIAS_CHANNEL_OFFSET: f32 = 1.2;
const BIAS_CHANNEL_SPREAD: f32 = 0.5;

fn sample_f32_normal(rng: &mut ChaCha8Rng) -> f32 {
    let v: f64 = StandardNormal.sample(rng);
    v as f32
}

/// Deterministic synthetic model. All parameters are sampled as f32 and
/// widened to f64, so the f32 file payload round-trips bit-exactly.
pub fn generate_synthetic(
    config: &MoEConfig,
    seed: u64,
    outliers: &OutlierSpec,
    skew: &SkewSpec,
) -> Result<MoEModel> {
    config.validate()?;
    if let Some(&ch) = outliers.channels.iter().find(|&&ch| ch >= config.d) {
        return Err(Error::invalid(
            "generate_synthetic",
            format!("outlier channel {ch} out of range for d={}", config.d),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d;

    let mut emb = vec![0f32; config.vocab * d];
    for v in emb.iter_mut() {
        *v = sample_f32_normal(&mut rng);
    }
    // Channel 0 stays strictly positive so router biases act with a stable
    // sign; see SkewSpec.
    for row in 0..config.vocab {
        let v = &mut emb[row * d];
        *v = BIAS_CHANNEL_OFFSET + BIAS_CHANNEL_SPREAD * v.abs();
    }
    for &ch in &outliers.channels {
        for row in 0..config.vocab {
            emb[row * d + ch] *= outliers.scale as f32;
        }
    }
    let embedding = Matrix::new(config.vocab, d, emb.iter().map(|&v| f64::from(v)).collect())?;

    let inv_sqrt_d = 1.0 / (d as f32).sqrt();
    let inv_sqrt_h = 1.0 / (config.h as f32).sqrt();
    let mut layers = Vec::with_capacity(config.layers);
    for _ in 0..config.layers {
        let mut router = vec![0f32; d * config.n];
        for v in router.iter_mut() {
            *v = sample_f32_normal(&mut rng) * inv_sqrt_d;
        }
        // Row 0 holds only the deterministic skew bias: the bias channel of
        // the input is strictly positive, so this is a stable per-expert
        // logit offset, and with exponent 0 it is identical across experts.
        for expert in 0..config.n {
            let bias = SKEW_BIAS_AMPLITUDE * f64::powf((expert + 1) as f64, -skew.exponent);
            router[expert] = bias as f32;
        }
        let router = Matrix::new(d, config.n, router.iter().map(|&v| f64::from(v)).collect())?;

        let mut experts = Vec::with_capacity(config.n);
        for _ in 0..config.n {
            let mut w1 = vec![0f32; d * config.h];
            for v in w1.iter_mut() {
                *v = sample_f32_normal(&mut rng) * inv_sqrt_d;
            }
            let mut w2 = vec![0f32; config.h * d];
            for v in w2.iter_mut() {
                *v = sample_f32_normal(&mut rng) * inv_sqrt_h;
            }
            experts.push(Expert {
                w1: Matrix::new(d, config.h, w1.iter().map(|&v| f64::from(v)).collect())?,
                w2: Matrix::new(config.h, d, w2.iter().map(|&v| f64::from(v)).collect())?,
            });
        }
        layers.push(MoELayer {
            norm_gain: vec![1.0; d],
            router,
            experts,
        });
    }
    Ok(MoEModel {
        config: *config,
        embedding,
        layers,
    })
}

/// Deterministic synthetic token stream (uniform ids), the stand-in for a
/// text corpus.
pub fn synthetic_token_stream(vocab: usize, seed: u64, sequences: usize, seq_len: usize) -> Vec<Vec<u32>> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..sequences)
        .map(|_| (0..seq_len).map(|_| rng.gen_range(0..vocab as u32)).collect())
        .collect()
}
