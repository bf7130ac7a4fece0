//! Transformer building blocks.
//!
//! Blocks are pre-norm: each sublayer reads `LN(x)` and its output is added
//! back onto `x`. Masks are realized as an additive `-1e9` bias on the
//! attention scores before the softmax. Sequences are unbatched
//! (`[len, hidden]`); heads are carried as a leading batch axis inside
//! attention.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{contract, Error, Result};
use crate::tensor::{Element, ParamBinding, ParamStore, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Additive score bias for forbidden positions.
pub const MASK_BIAS: f64 = -1e9;

/// Feed-forward inner width as a multiple of the hidden size.
pub const FFN_MULTIPLIER: usize = 4;

/// Boolean attention mask, `true` where attending is allowed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let allowed = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        Self { rows, cols, allowed }
    }

    /// Every query may attend to every key.
    pub fn full(rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |_, _| true)
    }

    /// Every query may attend to exactly the valid keys.
    pub fn keys(rows: usize, key_valid: &[bool]) -> Self {
        Self::from_fn(rows, key_valid.len(), |_, j| key_valid[j])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    pub fn count_allowed(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    /// First query row with no allowed key, if any.
    pub fn first_empty_row(&self) -> Option<usize> {
        (0..self.rows).find(|&i| (0..self.cols).all(|j| !self.allowed(i, j)))
    }

    /// `[rows, cols]` constant holding 0 where allowed and `MASK_BIAS` elsewhere.
    pub fn bias<'t, T: Element>(&self, tape: &'t crate::tensor::Tape<T>) -> Result<Tensor<'t, T>> {
        let data = self
            .allowed
            .iter()
            .map(|&a| if a { T::ZERO } else { T::from_f64(MASK_BIAS) })
            .collect();
        tape.constant(&[self.rows, self.cols], data)
    }
}

/// Lower-triangular mask including the diagonal: `mask[i][j] = j <= i`.
pub fn causal_mask(t: usize) -> Result<Mask> {
    if t == 0 {
        return contract("causal mask of length zero");
    }
    Ok(Mask::from_fn(t, t, |i, j| j <= i))
}

/// Intermediate values of one attention call, kept for inspection.
#[derive(Debug, Clone, Copy)]
pub struct AttentionTrace<'t, T: Element> {
    /// `QK^T / sqrt(d_k)` before masking.
    pub scores: Tensor<'t, T>,
    /// Post-softmax attention weights.
    pub weights: Tensor<'t, T>,
    pub output: Tensor<'t, T>,
}

/// `softmax(QK^T / sqrt(d_k) + bias) V` over the last two axes.
pub fn scaled_dot_product_attention<'t, T: Element>(
    q: &Tensor<'t, T>,
    k: &Tensor<'t, T>,
    v: &Tensor<'t, T>,
    mask: Option<&Mask>,
) -> Result<AttentionTrace<'t, T>> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    let rank = qs.len();
    if rank < 2 || ks.len() != rank || vs.len() != rank {
        return Err(Error::Dimension {
            op: "attention",
            lhs: qs,
            rhs: ks,
        });
    }
    let (lq, dk) = (qs[rank - 2], qs[rank - 1]);
    let lk = ks[rank - 2];
    if ks[rank - 1] != dk || vs[rank - 2] != lk {
        return Err(Error::Dimension {
            op: "attention",
            lhs: ks,
            rhs: vs,
        });
    }
    let scores = q
        .matmul(&k.transpose(rank - 2, rank - 1)?)?
        .scale(1.0 / (dk as f64).sqrt());
    let logits = match mask {
        Some(m) => {
            if m.rows() != lq || m.cols() != lk {
                return Err(Error::Dimension {
                    op: "attention mask",
                    lhs: vec![m.rows(), m.cols()],
                    rhs: vec![lq, lk],
                });
            }
            if let Some(row) = m.first_empty_row() {
                return contract(format!("attention query row {row} has every key masked"));
            }
            scores.add(&m.bias(q.tape())?)?
        }
        None => scores,
    };
    let weights = logits.softmax(rank - 1)?;
    let output = weights.matmul(v)?;
    Ok(AttentionTrace {
        scores,
        weights,
        output,
    })
}

/// Normal(0, std) initializer for weight matrices.
pub struct Initializer<R> {
    rng: R,
    normal: Normal<f64>,
}

impl<R: Rng> Initializer<R> {
    pub fn new(rng: R, std: f64) -> Result<Self> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(format!("init std {std}: {e}")))?;
        Ok(Self { rng, normal })
    }

    pub fn sample<T: Element>(&mut self, n: usize) -> Vec<T> {
        (0..n).map(|_| T::from_f64(self.normal.sample(&mut self.rng))).collect()
    }

    /// Adds a normally initialized tensor that receives weight decay.
    pub fn weight<T: Element>(&mut self, store: &mut ParamStore<T>, name: &str, shape: &[usize]) -> Result<()> {
        let data = self.sample(shape.iter().product());
        store.insert(name, shape, data, true)
    }

    /// Adds a normally initialized table exempt from weight decay.
    pub fn table<T: Element>(&mut self, store: &mut ParamStore<T>, name: &str, shape: &[usize]) -> Result<()> {
        let data = self.sample(shape.iter().product());
        store.insert(name, shape, data, false)
    }
}

/// Registers `{prefix}.gain` (ones) and `{prefix}.bias` (zeros).
pub fn register_layer_norm<T: Element>(store: &mut ParamStore<T>, prefix: &str, hidden: usize) -> Result<()> {
    store.insert(format!("{prefix}.gain"), &[hidden], vec![T::ONE; hidden], false)?;
    store.insert(format!("{prefix}.bias"), &[hidden], vec![T::ZERO; hidden], false)
}

pub fn register_attention<T: Element, R: Rng>(
    store: &mut ParamStore<T>,
    init: &mut Initializer<R>,
    prefix: &str,
    hidden: usize,
) -> Result<()> {
    for w in ["wq", "wk", "wv", "wo"] {
        init.weight(store, &format!("{prefix}.{w}"), &[hidden, hidden])?;
    }
    Ok(())
}

/// Registers a pre-norm block; decoder blocks carry cross-attention and a third norm.
pub fn register_block<T: Element, R: Rng>(
    store: &mut ParamStore<T>,
    init: &mut Initializer<R>,
    prefix: &str,
    hidden: usize,
    decoder: bool,
) -> Result<()> {
    register_attention(store, init, &format!("{prefix}.self_attn"), hidden)?;
    register_layer_norm(store, &format!("{prefix}.ln1"), hidden)?;
    register_layer_norm(store, &format!("{prefix}.ln2"), hidden)?;
    if decoder {
        register_attention(store, init, &format!("{prefix}.cross_attn"), hidden)?;
        register_layer_norm(store, &format!("{prefix}.ln3"), hidden)?;
    }
    let inner = FFN_MULTIPLIER * hidden;
    init.weight(store, &format!("{prefix}.ffn.w1"), &[hidden, inner])?;
    store.insert(format!("{prefix}.ffn.b1"), &[inner], vec![T::ZERO; inner], false)?;
    init.weight(store, &format!("{prefix}.ffn.w2"), &[inner, hidden])?;
    store.insert(format!("{prefix}.ffn.b2"), &[hidden], vec![T::ZERO; hidden], false)
}

/// Projection weights of one multi-head attention sublayer.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams<'t, T: Element> {
    pub wq: Tensor<'t, T>,
    pub wk: Tensor<'t, T>,
    pub wv: Tensor<'t, T>,
    pub wo: Tensor<'t, T>,
    pub heads: usize,
}

impl<'t, T: Element> AttentionParams<'t, T> {
    pub fn bind(p: &ParamBinding<'t, '_, T>, prefix: &str, heads: usize) -> Result<Self> {
        let wq = p.get(&format!("{prefix}.wq"))?;
        let hidden = wq.shape()[0];
        if heads == 0 || hidden % heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {hidden} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            wq,
            wk: p.get(&format!("{prefix}.wk"))?,
            wv: p.get(&format!("{prefix}.wv"))?,
            wo: p.get(&format!("{prefix}.wo"))?,
            heads,
        })
    }

    pub fn hidden(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.hidden() / self.heads
    }
}

/// Layer-norm gain and bias.
#[derive(Debug, Clone, Copy)]
pub struct NormParams<'t, T: Element> {
    pub gain: Tensor<'t, T>,
    pub bias: Tensor<'t, T>,
}

impl<'t, T: Element> NormParams<'t, T> {
    pub fn bind(p: &ParamBinding<'t, '_, T>, prefix: &str) -> Result<Self> {
        Ok(Self {
            gain: p.get(&format!("{prefix}.gain"))?,
            bias: p.get(&format!("{prefix}.bias"))?,
        })
    }

    pub fn apply(&self, x: &Tensor<'t, T>) -> Result<Tensor<'t, T>> {
        layer_norm(x, &self.gain, &self.bias, LAYER_NORM_EPS)
    }
}

/// Parameters of one encoder or decoder block.
#[derive(Debug, Clone)]
pub struct BlockParams<'t, T: Element> {
    pub self_attn: AttentionParams<'t, T>,
    pub cross_attn: Option<AttentionParams<'t, T>>,
    /// One norm per sublayer: self-attention, (cross-attention,) feed-forward.
    pub norms: Vec<NormParams<'t, T>>,
    pub w1: Tensor<'t, T>,
    pub b1: Tensor<'t, T>,
    pub w2: Tensor<'t, T>,
    pub b2: Tensor<'t, T>,
}

impl<'t, T: Element> BlockParams<'t, T> {
    pub fn bind(p: &ParamBinding<'t, '_, T>, prefix: &str, heads: usize, decoder: bool) -> Result<Self> {
        let self_attn = AttentionParams::bind(p, &format!("{prefix}.self_attn"), heads)?;
        let mut norms = vec![
            NormParams::bind(p, &format!("{prefix}.ln1"))?,
            NormParams::bind(p, &format!("{prefix}.ln2"))?,
        ];
        let cross_attn = if decoder {
            norms.push(NormParams::bind(p, &format!("{prefix}.ln3"))?);
            Some(AttentionParams::bind(p, &format!("{prefix}.cross_attn"), heads)?)
        } else {
            None
        };
        Ok(Self {
            self_attn,
            cross_attn,
            norms,
            w1: p.get(&format!("{prefix}.ffn.w1"))?,
            b1: p.get(&format!("{prefix}.ffn.b1"))?,
            w2: p.get(&format!("{prefix}.ffn.w2"))?,
            b2: p.get(&format!("{prefix}.ffn.b2"))?,
        })
    }

    pub fn feed_forward(&self, x: &Tensor<'t, T>) -> Result<Tensor<'t, T>> {
        x.matmul(&self.w1)?
            .add(&self.b1)?
            .gelu()
            .matmul(&self.w2)?
            .add(&self.b2)
    }
}

pub fn layer_norm<'t, T: Element>(
    x: &Tensor<'t, T>,
    gain: &Tensor<'t, T>,
    bias: &Tensor<'t, T>,
    eps: f64,
) -> Result<Tensor<'t, T>> {
    x.layer_norm(gain, bias, eps)
}

/// Output of a multi-head attention call with the per-head trace.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadOutput<'t, T: Element> {
    pub output: Tensor<'t, T>,
    /// Attention over `[heads, lq, lk]`.
    pub trace: AttentionTrace<'t, T>,
}

pub(crate) fn split_heads<'t, T: Element>(x: &Tensor<'t, T>, heads: usize) -> Result<Tensor<'t, T>> {
    let s = x.shape();
    x.reshape(&[s[0], heads, s[1] / heads])?.transpose(0, 1)
}

/// Projects queries from `x_q` and keys/values from `x_kv`, attends per head,
/// then concatenates heads and applies the output projection.
pub fn multi_head_attention<'t, T: Element>(
    x_q: &Tensor<'t, T>,
    x_kv: &Tensor<'t, T>,
    mask: Option<&Mask>,
    params: &AttentionParams<'t, T>,
) -> Result<MultiHeadOutput<'t, T>> {
    let (qs, ks) = (x_q.shape(), x_kv.shape());
    let hidden = params.hidden();
    if qs.len() != 2 || ks.len() != 2 || qs[1] != hidden || ks[1] != hidden {
        return Err(Error::Dimension {
            op: "multi_head_attention",
            lhs: qs,
            rhs: ks,
        });
    }
    let heads = params.heads;
    let q = split_heads(&x_q.matmul(&params.wq)?, heads)?;
    let k = split_heads(&x_kv.matmul(&params.wk)?, heads)?;
    let v = split_heads(&x_kv.matmul(&params.wv)?, heads)?;
    let trace = scaled_dot_product_attention(&q, &k, &v, mask)?;
    let merged = trace.output.transpose(0, 1)?.reshape(&[qs[0], hidden])?;
    Ok(MultiHeadOutput {
        output: merged.matmul(&params.wo)?,
        trace,
    })
}

/// `x + MHA(LN(x))`, then `+ FFN(LN(.))`, with traces of the attention call.
pub fn encoder_block_traced<'t, T: Element>(
    x: &Tensor<'t, T>,
    mask: Option<&Mask>,
    params: &BlockParams<'t, T>,
) -> Result<(Tensor<'t, T>, Vec<AttentionTrace<'t, T>>)> {
    let normed = params.norms[0].apply(x)?;
    let attn = multi_head_attention(&normed, &normed, mask, &params.self_attn)?;
    let x = x.add(&attn.output)?;
    let ff = params.feed_forward(&params.norms[1].apply(&x)?)?;
    Ok((x.add(&ff)?, vec![attn.trace]))
}

pub fn encoder_block<'t, T: Element>(
    x: &Tensor<'t, T>,
    mask: Option<&Mask>,
    params: &BlockParams<'t, T>,
) -> Result<Tensor<'t, T>> {
    encoder_block_traced(x, mask, params).map(|(y, _)| y)
}

/// Causal self-attention, cross-attention over `memory`, then feed-forward;
/// all pre-norm residual. `memory_valid` marks non-padding memory rows.
pub fn decoder_block_traced<'t, T: Element>(
    y: &Tensor<'t, T>,
    memory: &Tensor<'t, T>,
    memory_valid: Option<&[bool]>,
    params: &BlockParams<'t, T>,
) -> Result<(Tensor<'t, T>, Vec<AttentionTrace<'t, T>>)> {
    let shape = y.shape();
    if shape.len() != 2 || shape[0] == 0 {
        return contract(format!(
            "decoder input must be a non-empty [t, hidden] tensor, got {shape:?}"
        ));
    }
    let t = shape[0];
    let Some(cross) = params.cross_attn.as_ref() else {
        return Err(Error::Config("decoder block bound without cross-attention".into()));
    };
    let causal = causal_mask(t)?;
    let normed = params.norms[0].apply(y)?;
    let self_attn = multi_head_attention(&normed, &normed, Some(&causal), &params.self_attn)?;
    let y = y.add(&self_attn.output)?;

    let memory_mask = memory_valid.map(|valid| Mask::keys(t, valid));
    let normed = params.norms[1].apply(&y)?;
    let cross_attn = multi_head_attention(&normed, memory, memory_mask.as_ref(), cross)?;
    let y = y.add(&cross_attn.output)?;

    let ff = params.feed_forward(&params.norms[2].apply(&y)?)?;
    Ok((y.add(&ff)?, vec![self_attn.trace, cross_attn.trace]))
}

pub fn decoder_block<'t, T: Element>(
    y: &Tensor<'t, T>,
    memory: &Tensor<'t, T>,
    memory_valid: Option<&[bool]>,
    params: &BlockParams<'t, T>,
) -> Result<Tensor<'t, T>> {
    decoder_block_traced(y, memory, memory_valid, params).map(|(out, _)| out)
}
