//! Scaled dot-product attention, multi-head projection, the residual
//! post-processing block `G`, the feed-forward block `F` and masks.

use glied_tensor::{ParamId, ParamStore, Tensor, Var};
use rand::Rng;

use crate::error::{CoreError, Result};
use crate::graph::Graph;

/// Score written into masked positions before the softmax.
pub const MASK_FILL: f64 = -1e30;

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Uniform Glorot initialization for a `rows×cols` matrix.
pub fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Result<Tensor> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Ok(Tensor::matrix(rows, cols, data)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    Causal,
    Padding,
    None,
}

/// Boolean attendability matrix; `true` means the key may be attended.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    kind: MaskKind,
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
}

impl AttentionMask {
    /// Row `i` attends columns `0..=i`.
    pub fn causal(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(CoreError::DegenerateMask("causal mask of size 0".into()));
        }
        let keep = (0..n).flat_map(|i| (0..n).map(move |j| j <= i)).collect();
        Ok(Self {
            kind: MaskKind::Causal,
            rows: n,
            cols: n,
            keep,
        })
    }

    /// One row per entry of `lengths`; row `i` attends columns `0..lengths[i]`.
    pub fn padding(lengths: &[usize], k: usize) -> Result<Self> {
        if lengths.is_empty() || k == 0 {
            return Err(CoreError::DegenerateMask("empty padding mask".into()));
        }
        if let Some(&l) = lengths.iter().find(|&&l| l == 0 || l > k) {
            return Err(CoreError::DegenerateMask(format!(
                "source length {l} outside 1..={k}"
            )));
        }
        let keep = lengths
            .iter()
            .flat_map(|&l| (0..k).map(move |j| j < l))
            .collect();
        Ok(Self {
            kind: MaskKind::Padding,
            rows: lengths.len(),
            cols: k,
            keep,
        })
    }

    pub fn none(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(CoreError::DegenerateMask("empty mask".into()));
        }
        Ok(Self {
            kind: MaskKind::None,
            rows,
            cols,
            keep: vec![true; rows * cols],
        })
    }

    /// Builds a mask from explicit rows, rejecting fully masked rows.
    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if cols == 0 || rows.iter().any(|r| r.len() != cols) {
            return Err(CoreError::DegenerateMask("ragged or empty mask".into()));
        }
        if let Some(i) = rows.iter().position(|r| !r.iter().any(|&b| b)) {
            return Err(CoreError::DegenerateMask(format!("row {i} attends nothing")));
        }
        Ok(Self {
            kind: MaskKind::Padding,
            rows: rows.len(),
            cols,
            keep: rows.concat(),
        })
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn attendable(&self, i: usize, j: usize) -> bool {
        self.keep[i * self.cols + j]
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }
}

/// Size argument for [`make_mask`].
#[derive(Clone, Debug)]
pub enum MaskSize {
    Square(usize),
    Lengths { lengths: Vec<usize>, k: usize },
    Full { rows: usize, cols: usize },
}

pub fn make_mask(kind: MaskKind, size: MaskSize) -> Result<AttentionMask> {
    match (kind, size) {
        (MaskKind::Causal, MaskSize::Square(n)) => AttentionMask::causal(n),
        (MaskKind::Padding, MaskSize::Lengths { lengths, k }) => {
            AttentionMask::padding(&lengths, k)
        }
        (MaskKind::None, MaskSize::Full { rows, cols }) => AttentionMask::none(rows, cols),
        (kind, size) => Err(CoreError::Contract(format!(
            "{kind:?} mask cannot be built from {size:?}"
        ))),
    }
}

/// Fused per-head projections: column block `i·d_k..(i+1)·d_k` of each
/// `d_h×d_h` matrix is head `i`'s `W_i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MultiHeadParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub d_h: usize,
}

const PROJECTIONS: [&str; 4] = ["wq", "wk", "wv", "wo"];

impl MultiHeadParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_h: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        check_heads(d_h, heads)?;
        for p in PROJECTIONS {
            store.insert(format!("{prefix}.{p}"), glorot(d_h, d_h, rng)?)?;
        }
        Self::lookup(store, prefix, heads)
    }

    /// Registers every projection of `prefix` as an alias of `target`.
    pub fn alias(store: &mut ParamStore, prefix: &str, target: &str, heads: usize) -> Result<Self> {
        for p in PROJECTIONS {
            store.alias(format!("{prefix}.{p}"), &format!("{target}.{p}"))?;
        }
        Self::lookup(store, prefix, heads)
    }

    pub fn lookup(store: &ParamStore, prefix: &str, heads: usize) -> Result<Self> {
        let id = |p: &str| store.require(&format!("{prefix}.{p}"));
        let wq = id("wq")?;
        let d_h = store.get(wq).dims2()?.0;
        check_heads(d_h, heads)?;
        Ok(Self {
            wq,
            wk: id("wk")?,
            wv: id("wv")?,
            wo: id("wo")?,
            heads,
            d_h,
        })
    }

    pub fn d_k(&self) -> usize {
        self.d_h / self.heads
    }
}

fn check_heads(d_h: usize, heads: usize) -> Result<()> {
    if heads == 0 || d_h % heads != 0 {
        return Err(CoreError::Config(format!(
            "{heads} heads do not divide hidden size {d_h}"
        )));
    }
    Ok(())
}

pub struct AttentionOutput {
    pub output: Var,
    /// One `queries×keys` distribution matrix per head.
    pub weights: Vec<Var>,
}

/// Scaled dot-product attention over already projected `q`, `k`, `v`.
pub fn attend_head(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&AttentionMask>,
) -> Result<(Var, Var)> {
    let d_k = g.value(q).dims2()?.1;
    let kt = g.tape.transpose(k)?;
    let scores = g.tape.matmul(q, kt)?;
    let mut scores = g.tape.scale(scores, 1.0 / (d_k as f64).sqrt())?;
    if let Some(m) = mask {
        let dims = g.value(scores).dims2()?;
        if m.dims() != dims {
            return Err(CoreError::Contract(format!(
                "mask {:?} for scores {dims:?}",
                m.dims()
            )));
        }
        if let Some(i) = (0..m.rows).find(|&i| !(0..m.cols).any(|j| m.attendable(i, j))) {
            return Err(CoreError::DegenerateMask(format!("query row {i} attends nothing")));
        }
        scores = g.tape.masked_fill(scores, m.keep(), MASK_FILL)?;
    }
    let weights = g.tape.softmax(scores, 1)?;
    let out = g.tape.matmul(weights, v)?;
    Ok((out, weights))
}

/// `[A_1; …; A_n]·W_k` with every head reading its own column block.
pub fn multi_head(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    p: &MultiHeadParams,
    mask: Option<&AttentionMask>,
) -> Result<AttentionOutput> {
    let (wq, wk, wv, wo) = (g.param(p.wq), g.param(p.wk), g.param(p.wv), g.param(p.wo));
    let qp = g.tape.matmul(q, wq)?;
    let kp = g.tape.matmul(k, wk)?;
    let vp = g.tape.matmul(v, wv)?;
    let d_k = p.d_k();
    let mut outs = Vec::with_capacity(p.heads);
    let mut weights = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (qh, kh, vh) = if p.heads == 1 {
            (qp, kp, vp)
        } else {
            (
                g.tape.narrow(qp, 1, h * d_k, d_k)?,
                g.tape.narrow(kp, 1, h * d_k, d_k)?,
                g.tape.narrow(vp, 1, h * d_k, d_k)?,
            )
        };
        let (o, w) = attend_head(g, qh, kh, vh, mask)?;
        outs.push(o);
        weights.push(w);
    }
    let cat = if p.heads == 1 {
        outs[0]
    } else {
        g.tape.concat(&outs, 1)?
    };
    let output = g.tape.matmul(cat, wo)?;
    Ok(AttentionOutput { output, weights })
}

/// Layer-norm gain and bias of one `G` block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GBlockParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl GBlockParams {
    pub fn register(store: &mut ParamStore, prefix: &str, d_h: usize) -> Result<Self> {
        store.insert(format!("{prefix}.gain"), Tensor::ones(&[d_h])?)?;
        store.insert(format!("{prefix}.bias"), Tensor::zeros(&[d_h])?)?;
        Self::lookup(store, prefix)
    }

    pub fn lookup(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            gain: store.require(&format!("{prefix}.gain"))?,
            bias: store.require(&format!("{prefix}.bias"))?,
        })
    }
}

/// `G(value, residual) = layer_norm(residual + dropout(value))`.
pub fn g_block(g: &mut Graph, value: Var, residual: Var, p: &GBlockParams) -> Result<Var> {
    let dropped = g.dropout(value)?;
    let sum = g.tape.add(residual, dropped)?;
    let (gain, bias) = (g.param(p.gain), g.param(p.bias));
    Ok(g.tape.layer_norm(sum, gain, bias, LAYER_NORM_EPS)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeedForwardParams {
    pub w1: ParamId,
    pub w2: ParamId,
}

impl FeedForwardParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_h: usize,
        d_f: usize,
        rng: &mut R,
    ) -> Result<Self> {
        store.insert(format!("{prefix}.w1"), glorot(d_h, d_f, rng)?)?;
        store.insert(format!("{prefix}.w2"), glorot(d_f, d_h, rng)?)?;
        Self::lookup(store, prefix)
    }

    pub fn lookup(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            w1: store.require(&format!("{prefix}.w1"))?,
            w2: store.require(&format!("{prefix}.w2"))?,
        })
    }
}

/// `F(x) = relu(x·W1)·W2`, row by row.
pub fn feed_forward(g: &mut Graph, x: Var, p: &FeedForwardParams) -> Result<Var> {
    let (w1, w2) = (g.param(p.w1), g.param(p.w2));
    let h = g.tape.matmul(x, w1)?;
    let h = g.tape.relu(h)?;
    Ok(g.tape.matmul(h, w2)?)
}

/// `F` followed by two `G` blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PostProcessParams {
    pub ff: FeedForwardParams,
    pub g1: GBlockParams,
    pub g2: GBlockParams,
}

impl PostProcessParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_h: usize,
        d_f: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            ff: FeedForwardParams::register(store, &format!("{prefix}.ff"), d_h, d_f, rng)?,
            g1: GBlockParams::register(store, &format!("{prefix}.g1"), d_h)?,
            g2: GBlockParams::register(store, &format!("{prefix}.g2"), d_h)?,
        })
    }

    pub fn lookup(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            ff: FeedForwardParams::lookup(store, &format!("{prefix}.ff"))?,
            g1: GBlockParams::lookup(store, &format!("{prefix}.g1"))?,
            g2: GBlockParams::lookup(store, &format!("{prefix}.g2"))?,
        })
    }
}

/// `G(G(F(c), c), residual)`.
pub fn post_process(g: &mut Graph, c: Var, residual: Var, p: &PostProcessParams) -> Result<Var> {
    let f = feed_forward(g, c, &p.ff)?;
    let inner = g_block(g, f, c, &p.g1)?;
    g_block(g, inner, residual, &p.g2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_rows_attend_prefix() {
        let m = make_mask(MaskKind::Causal, MaskSize::Square(3)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.attendable(i, j), j <= i);
            }
        }
    }

    #[test]
    fn padding_mask_and_degenerate_sizes() {
        let m = make_mask(
            MaskKind::Padding,
            MaskSize::Lengths {
                lengths: vec![2],
                k: 4,
            },
        )
        .unwrap();
        assert_eq!(m.keep(), &[true, true, false, false]);
        assert!(matches!(
            AttentionMask::padding(&[0], 4),
            Err(CoreError::DegenerateMask(_))
        ));
        assert!(AttentionMask::causal(0).is_err());
        assert!(AttentionMask::from_rows(&[vec![false, false]]).is_err());
        assert!(make_mask(MaskKind::Causal, MaskSize::Full { rows: 1, cols: 1 }).is_err());
    }

    #[test]
    fn heads_must_divide_hidden_size() {
        let mut store = ParamStore::new();
        let mut rng = rand::rng();
        assert!(MultiHeadParams::register(&mut store, "h", 6, 4, &mut rng).is_err());
        let p = MultiHeadParams::register(&mut store, "h", 8, 4, &mut rng).unwrap();
        assert_eq!(p.d_k(), 2);
    }
}
