use crate::error::{Result, TigrError};
use crate::numerics::{Graph, ParamId, ParamStore, Real, Rng, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub attn_norm: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ffn_norm: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Pre-norm transformer encoder for one branch.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub d: usize,
    pub heads: usize,
    pub layers: Vec<EncoderLayer>,
    pub final_norm: ParamId,
}

impl EncoderParams {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d: usize,
        n_layers: usize,
        heads: usize,
        ffn_ratio: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(TigrError::config("model.h_enc", format!("width {d} is not divisible by {heads} heads")));
        }
        let hidden = ffn_ratio * d;
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let p = format!("{prefix}.layer{l}");
            layers.push(EncoderLayer {
                attn_norm: store.add(format!("{p}.attn_norm"), Tensor::ones(&[d]))?,
                wq: store.add_xavier(format!("{p}.wq"), d, d, rng)?,
                wk: store.add_xavier(format!("{p}.wk"), d, d, rng)?,
                wv: store.add_xavier(format!("{p}.wv"), d, d, rng)?,
                wo: store.add_xavier(format!("{p}.wo"), d, d, rng)?,
                ffn_norm: store.add(format!("{p}.ffn_norm"), Tensor::ones(&[d]))?,
                w1: store.add_xavier(format!("{p}.w1"), d, hidden, rng)?,
                b1: store.add(format!("{p}.b1"), Tensor::zeros(&[hidden]))?,
                w2: store.add_xavier(format!("{p}.w2"), hidden, d, rng)?,
                b2: store.add(format!("{p}.b2"), Tensor::zeros(&[d]))?,
            });
        }
        let final_norm = store.add(format!("{prefix}.final_norm"), Tensor::ones(&[d]))?;
        Ok(EncoderParams {
            d,
            heads,
            layers,
            final_norm,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self
            .layers
            .iter()
            .flat_map(|l| [l.attn_norm, l.wq, l.wk, l.wv, l.wo, l.ffn_norm, l.w1, l.b1, l.w2, l.b2])
            .collect();
        ids.push(self.final_norm);
        ids
    }
}

/// `B × N` averaging matrix for sequences of `lengths` stacked row-wise.
pub fn pool_means<T: Real>(g: &mut Graph<T>, x: Var, lengths: &[usize]) -> Result<Var> {
    let n: usize = lengths.iter().sum();
    if n != g.value(x).rows() {
        return Err(TigrError::Dimension {
            op: "pool_means",
            lhs: g.value(x).shape().to_vec(),
            rhs: vec![n],
        });
    }
    let mut w = Tensor::<T>::zeros(&[lengths.len(), n]);
    let mut off = 0;
    for (b, &len) in lengths.iter().enumerate() {
        if len == 0 {
            return Err(TigrError::Contract(format!("sequence {b} is empty after masking")));
        }
        let inv = T::from_f64(1.0 / len as f64);
        w.row_mut(b)[off..off + len].iter_mut().for_each(|v| *v = inv);
        off += len;
    }
    let w = g.constant(w);
    g.matmul(w, x)
}

/// Encodes a batch of token sequences stacked row-wise (`N × d`) and
/// returns one mean-pooled vector per sequence (`B × d`).
///
/// Each sequence attends only to itself. Positions restart at 0 for every
/// sequence. Dropout, when given, is applied to each sublayer output.
pub fn encode_batch<T: Real>(
    g: &mut Graph<T>,
    p: &EncoderParams,
    x: Var,
    lengths: &[usize],
    rope: bool,
    mut dropout: Option<(f64, &mut Rng)>,
) -> Result<Var> {
    let n: usize = lengths.iter().sum();
    let shape = g.value(x).shape().to_vec();
    if shape != [n, p.d] {
        return Err(TigrError::Dimension {
            op: "encoder input",
            lhs: shape,
            rhs: vec![n, p.d],
        });
    }
    let dh = p.head_dim();
    if rope && dh % 2 != 0 {
        return Err(TigrError::config("model.h_enc", format!("head width {dh} must be even for RoPE")));
    }
    let positions: Vec<usize> = lengths.iter().flat_map(|&l| 0..l).collect();
    let mut blocks = Vec::with_capacity(lengths.len());
    let mut off = 0;
    for &l in lengths {
        blocks.push((off, off + l));
        off += l;
    }
    let scale = 1.0 / (dh as f64).sqrt();

    let mut x = x;
    for layer in &p.layers {
        let gain = g.param(layer.attn_norm);
        let h = g.rmsnorm(x, gain)?;
        let q = g.linear(h, layer.wq, None)?;
        let k = g.linear(h, layer.wk, None)?;
        let v = g.linear(h, layer.wv, None)?;
        let mut outs = Vec::with_capacity(p.heads);
        for head in 0..p.heads {
            let (s, e) = (head * dh, (head + 1) * dh);
            let mut qh = g.slice_cols(q, s, e)?;
            let mut kh = g.slice_cols(k, s, e)?;
            let vh = g.slice_cols(v, s, e)?;
            if rope {
                qh = g.rope(qh, &positions)?;
                kh = g.rope(kh, &positions)?;
            }
            outs.push(g.block_attention(qh, kh, vh, &blocks, scale)?);
        }
        let att = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        let mut att = g.linear(att, layer.wo, None)?;
        if let Some((pd, rng)) = dropout.as_mut() {
            att = g.dropout(att, *pd, rng)?;
        }
        x = g.add(x, att)?;

        let gain = g.param(layer.ffn_norm);
        let h = g.rmsnorm(x, gain)?;
        let h = g.linear(h, layer.w1, Some(layer.b1))?;
        let h = g.silu(h);
        let mut f = g.linear(h, layer.w2, Some(layer.b2))?;
        if let Some((pd, rng)) = dropout.as_mut() {
            f = g.dropout(f, *pd, rng)?;
        }
        x = g.add(x, f)?;
    }
    let gain = g.param(p.final_norm);
    let x = g.rmsnorm(x, gain)?;
    pool_means(g, x, lengths)
}

/// Single padded sequence: `tokens` is `L × d`, `pad_mask[i]` marks padding.
/// Returns the `1 × d` pooled vector.
pub fn encoder_forward<T: Real>(
    g: &mut Graph<T>,
    p: &EncoderParams,
    tokens: Var,
    pad_mask: &[bool],
    rope: bool,
    dropout: Option<(f64, &mut Rng)>,
) -> Result<Var> {
    if pad_mask.len() != g.value(tokens).rows() {
        return Err(TigrError::Dimension {
            op: "encoder_forward",
            lhs: g.value(tokens).shape().to_vec(),
            rhs: vec![pad_mask.len()],
        });
    }
    let keep: Vec<usize> = (0..pad_mask.len()).filter(|&i| !pad_mask[i]).collect();
    if keep.is_empty() {
        return Err(TigrError::Contract("all positions padded".into()));
    }
    let x = g.gather(tokens, &keep)?;
    encode_batch(g, p, x, &[keep.len()], rope, dropout)
}
