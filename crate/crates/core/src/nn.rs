//! Layer primitives with explicit reverse-mode passes: linear maps with
//! optional low-rank adapters, layer norm, GELU, grouped multi-head attention
//! and the pre-norm transformer block built from them.
//!
//! Activations are row-major `tokens × features` matrices; weights are
//! `out × in` so a linear layer computes `Y = X·Wᵀ + b`.

use ndarray::{Array1, Array2, Axis};

pub(crate) const LN_EPS: f64 = 1e-5;

/// An adapter as seen by one linear layer. `slot` indexes the caller's
/// adapter list so gradients land in the right place.
#[derive(Clone, Copy)]
pub(crate) struct LoraRef<'a> {
    pub a: &'a Array2<f64>,
    pub b: &'a Array2<f64>,
    pub scale: f64,
    pub slot: usize,
}

/// Per-slot adapter gradient accumulators `(dB, dA)`; `None` means frozen.
pub(crate) type LoraGrads = Vec<Option<(Array2<f64>, Array2<f64>)>>;

pub(crate) struct LinearCache {
    x: Array2<f64>,
    /// `X·Aᵀ` for every adapter, in the order of the `LoraRef` slice.
    u: Vec<Array2<f64>>,
}

pub(crate) fn linear_fwd(x: Array2<f64>, w: &Array2<f64>, bias: Option<&Array1<f64>>, loras: &[LoraRef]) -> (Array2<f64>, LinearCache) {
    let mut y = x.dot(&w.t());
    if let Some(b) = bias {
        y += b;
    }
    let mut u = Vec::with_capacity(loras.len());
    for l in loras {
        let ui = x.dot(&l.a.t());
        y.scaled_add(l.scale, &ui.dot(&l.b.t()));
        u.push(ui);
    }
    (y, LinearCache { x, u })
}

pub(crate) fn linear_bwd(
    dy: &Array2<f64>,
    w: &Array2<f64>,
    cache: &LinearCache,
    loras: &[LoraRef],
    dw: Option<&mut Array2<f64>>,
    db: Option<&mut Array1<f64>>,
    lora_grads: &mut LoraGrads,
) -> Array2<f64> {
    let mut dx = dy.dot(w);
    if let Some(dw) = dw {
        *dw += &dy.t().dot(&cache.x);
    }
    if let Some(db) = db {
        *db += &dy.sum_axis(Axis(0));
    }
    for (l, u) in loras.iter().zip(&cache.u) {
        let du = dy.dot(l.b) * l.scale;
        dx += &du.dot(l.a);
        if let Some((gb, ga)) = &mut lora_grads[l.slot] {
            gb.scaled_add(l.scale, &dy.t().dot(u));
            *ga += &du.t().dot(&cache.x);
        }
    }
    dx
}

pub(crate) struct LnCache {
    xhat: Array2<f64>,
    inv_std: Vec<f64>,
}

pub(crate) fn layer_norm_fwd(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Vec::with_capacity(x.nrows());
    for mut row in xhat.rows_mut() {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let is = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * is);
        inv_std.push(is);
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, inv_std })
}

pub(crate) fn layer_norm_bwd(
    dy: &Array2<f64>,
    g: &Array1<f64>,
    cache: &LnCache,
    dg: Option<&mut Array1<f64>>,
    db: Option<&mut Array1<f64>>,
) -> Array2<f64> {
    if let Some(dg) = dg {
        *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
    }
    if let Some(db) = db {
        *db += &dy.sum_axis(Axis(0));
    }
    let d = dy.ncols() as f64;
    let dxhat = dy * g;
    let mut dx = Array2::zeros(dy.dim());
    for (r, mut out) in dx.rows_mut().into_iter().enumerate() {
        let dh = dxhat.row(r);
        let xh = cache.xhat.row(r);
        let sum_dh = dh.sum();
        let sum_dh_xh: f64 = dh.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
        let is = cache.inv_std[r];
        for ((o, &a), &h) in out.iter_mut().zip(dh.iter()).zip(xh.iter()) {
            *o = is / d * (d * a - sum_dh - h * sum_dh_xh);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)
const GELU_K: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Row sets attended over jointly: per frame (spatial) or per token position
/// across frames (temporal).
pub(crate) fn spatial_groups(frames: usize, tokens: usize) -> Vec<Vec<usize>> {
    (0..frames)
        .map(|f| (0..tokens).map(|p| f * tokens + p).collect())
        .collect()
}

pub(crate) fn temporal_groups(frames: usize, tokens: usize) -> Vec<Vec<usize>> {
    (0..tokens)
        .map(|p| (0..frames).map(|f| f * tokens + p).collect())
        .collect()
}

/// Multi-head softmax attention within each group. Returns the concatenated
/// head outputs and the attention probabilities (group-major, then head).
pub(crate) fn attention_fwd(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>, groups: &[Vec<usize>], heads: usize) -> (Array2<f64>, Vec<f64>) {
    let d = q.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qs, ks, vs) = (q.as_slice().unwrap(), k.as_slice().unwrap(), v.as_slice().unwrap());
    let mut ctx = Array2::<f64>::zeros(q.dim());
    let cs = ctx.as_slice_mut().unwrap();
    let mut probs = Vec::with_capacity(groups.iter().map(|g| g.len() * g.len()).sum::<usize>() * heads);
    for rows in groups {
        let m = rows.len();
        for h in 0..heads {
            let c0 = h * dh;
            let start = probs.len();
            for &ri in rows {
                let qi = &qs[ri * d + c0..ri * d + c0 + dh];
                let mut row: Vec<f64> = rows
                    .iter()
                    .map(|&rj| {
                        let kj = &ks[rj * d + c0..rj * d + c0 + dh];
                        qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale
                    })
                    .collect();
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for s in row.iter_mut() {
                    *s = (*s - mx).exp();
                    z += *s;
                }
                row.iter_mut().for_each(|s| *s /= z);
                probs.extend(row);
            }
            let p = &probs[start..start + m * m];
            for (i, &ri) in rows.iter().enumerate() {
                let out = &mut cs[ri * d + c0..ri * d + c0 + dh];
                for (j, &rj) in rows.iter().enumerate() {
                    let pij = p[i * m + j];
                    let vj = &vs[rj * d + c0..rj * d + c0 + dh];
                    for (o, vv) in out.iter_mut().zip(vj) {
                        *o += pij * vv;
                    }
                }
            }
        }
    }
    (ctx, probs)
}

pub(crate) fn attention_bwd(
    dctx: &Array2<f64>,
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    groups: &[Vec<usize>],
    heads: usize,
    probs: &[f64],
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let d = q.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qs, ks, vs) = (q.as_slice().unwrap(), k.as_slice().unwrap(), v.as_slice().unwrap());
    let dcs = dctx.as_slice().unwrap();
    let mut dq = Array2::<f64>::zeros(q.dim());
    let mut dk = Array2::<f64>::zeros(q.dim());
    let mut dv = Array2::<f64>::zeros(q.dim());
    {
        let (dqs, dks, dvs) = (
            dq.as_slice_mut().unwrap(),
            dk.as_slice_mut().unwrap(),
            dv.as_slice_mut().unwrap(),
        );
        let mut offset = 0;
        let mut ds = Vec::new();
        for rows in groups {
            let m = rows.len();
            for h in 0..heads {
                let c0 = h * dh;
                let p = &probs[offset..offset + m * m];
                offset += m * m;
                ds.clear();
                ds.resize(m * m, 0.0);
                for (i, &ri) in rows.iter().enumerate() {
                    let doi = &dcs[ri * d + c0..ri * d + c0 + dh];
                    // dP_ij = dO_i · V_j ; dV_j += P_ij dO_i
                    let mut dot_sum = 0.0;
                    for (j, &rj) in rows.iter().enumerate() {
                        let vj = &vs[rj * d + c0..rj * d + c0 + dh];
                        let dp: f64 = doi.iter().zip(vj).map(|(a, b)| a * b).sum();
                        ds[i * m + j] = dp;
                        dot_sum += dp * p[i * m + j];
                        let pij = p[i * m + j];
                        let dvj = &mut dvs[rj * d + c0..rj * d + c0 + dh];
                        for (o, g) in dvj.iter_mut().zip(doi) {
                            *o += pij * g;
                        }
                    }
                    for j in 0..m {
                        ds[i * m + j] = p[i * m + j] * (ds[i * m + j] - dot_sum) * scale;
                    }
                }
                for (i, &ri) in rows.iter().enumerate() {
                    for (j, &rj) in rows.iter().enumerate() {
                        let s = ds[i * m + j];
                        if s == 0.0 {
                            continue;
                        }
                        for c in c0..c0 + dh {
                            dqs[ri * d + c] += s * ks[rj * d + c];
                            dks[rj * d + c] += s * qs[ri * d + c];
                        }
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Parameters of a pre-norm attention + feed-forward block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub o: Array2<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub ff1: Array2<f64>,
    pub ff1_b: Array1<f64>,
    pub ff2: Array2<f64>,
    pub ff2_b: Array1<f64>,
}

impl BlockWeights {
    pub(crate) fn zeros(d: usize, hidden: usize) -> Self {
        Self {
            ln1_g: Array1::zeros(d),
            ln1_b: Array1::zeros(d),
            q: Array2::zeros((d, d)),
            k: Array2::zeros((d, d)),
            v: Array2::zeros((d, d)),
            o: Array2::zeros((d, d)),
            ln2_g: Array1::zeros(d),
            ln2_b: Array1::zeros(d),
            ff1: Array2::zeros((hidden, d)),
            ff1_b: Array1::zeros(hidden),
            ff2: Array2::zeros((d, hidden)),
            ff2_b: Array1::zeros(d),
        }
    }

    /// Named tensors in a fixed order.
    pub(crate) fn tensors(&self) -> [(&'static str, &[f64], (usize, usize)); 12] {
        fn m(a: &Array2<f64>) -> (&[f64], (usize, usize)) {
            (a.as_slice().unwrap(), a.dim())
        }
        fn v(a: &Array1<f64>) -> (&[f64], (usize, usize)) {
            (a.as_slice().unwrap(), (1, a.len()))
        }
        let e = |n, (s, d)| (n, s, d);
        [
            e("ln1.g", v(&self.ln1_g)),
            e("ln1.b", v(&self.ln1_b)),
            e("q", m(&self.q)),
            e("k", m(&self.k)),
            e("v", m(&self.v)),
            e("o", m(&self.o)),
            e("ln2.g", v(&self.ln2_g)),
            e("ln2.b", v(&self.ln2_b)),
            e("ff1.w", m(&self.ff1)),
            e("ff1.b", v(&self.ff1_b)),
            e("ff2.w", m(&self.ff2)),
            e("ff2.b", v(&self.ff2_b)),
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut [f64]; 12] {
        [
            self.ln1_g.as_slice_mut().unwrap(),
            self.ln1_b.as_slice_mut().unwrap(),
            self.q.as_slice_mut().unwrap(),
            self.k.as_slice_mut().unwrap(),
            self.v.as_slice_mut().unwrap(),
            self.o.as_slice_mut().unwrap(),
            self.ln2_g.as_slice_mut().unwrap(),
            self.ln2_b.as_slice_mut().unwrap(),
            self.ff1.as_slice_mut().unwrap(),
            self.ff1_b.as_slice_mut().unwrap(),
            self.ff2.as_slice_mut().unwrap(),
            self.ff2_b.as_slice_mut().unwrap(),
        ]
    }
}

/// Adapters attached to the four attention projections of one block.
#[derive(Default)]
pub(crate) struct BlockLoras<'a> {
    pub q: Vec<LoraRef<'a>>,
    pub k: Vec<LoraRef<'a>>,
    pub v: Vec<LoraRef<'a>>,
    pub o: Vec<LoraRef<'a>>,
}

impl<'a> BlockLoras<'a> {
    pub fn slot_mut(&mut self, proj: &str) -> Option<&mut Vec<LoraRef<'a>>> {
        match proj {
            "q" => Some(&mut self.q),
            "k" => Some(&mut self.k),
            "v" => Some(&mut self.v),
            "o" => Some(&mut self.o),
            _ => None,
        }
    }
}

pub(crate) struct BlockCache {
    ln1: LnCache,
    qc: LinearCache,
    kc: LinearCache,
    vc: LinearCache,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<f64>,
    oc: LinearCache,
    ln2: LnCache,
    ff1c: LinearCache,
    pre_act: Array2<f64>,
    ff2c: LinearCache,
}

pub(crate) fn block_fwd(x: &Array2<f64>, w: &BlockWeights, groups: &[Vec<usize>], heads: usize, loras: &BlockLoras) -> (Array2<f64>, BlockCache) {
    let (h1, ln1) = layer_norm_fwd(x, &w.ln1_g, &w.ln1_b);
    let (q, qc) = linear_fwd(h1.clone(), &w.q, None, &loras.q);
    let (k, kc) = linear_fwd(h1.clone(), &w.k, None, &loras.k);
    let (v, vc) = linear_fwd(h1, &w.v, None, &loras.v);
    let (ctx, probs) = attention_fwd(&q, &k, &v, groups, heads);
    let (attn, oc) = linear_fwd(ctx, &w.o, None, &loras.o);
    let x1 = x + &attn;
    let (h2, ln2) = layer_norm_fwd(&x1, &w.ln2_g, &w.ln2_b);
    let (pre_act, ff1c) = linear_fwd(h2, &w.ff1, Some(&w.ff1_b), &[]);
    let act = pre_act.mapv(gelu);
    let (ff, ff2c) = linear_fwd(act, &w.ff2, Some(&w.ff2_b), &[]);
    let out = x1 + ff;
    (
        out,
        BlockCache {
            ln1,
            qc,
            kc,
            vc,
            q,
            k,
            v,
            probs,
            oc,
            ln2,
            ff1c,
            pre_act,
            ff2c,
        },
    )
}

struct BlockGradRefs<'a> {
    ln1_g: Option<&'a mut Array1<f64>>,
    ln1_b: Option<&'a mut Array1<f64>>,
    q: Option<&'a mut Array2<f64>>,
    k: Option<&'a mut Array2<f64>>,
    v: Option<&'a mut Array2<f64>>,
    o: Option<&'a mut Array2<f64>>,
    ln2_g: Option<&'a mut Array1<f64>>,
    ln2_b: Option<&'a mut Array1<f64>>,
    ff1: Option<&'a mut Array2<f64>>,
    ff1_b: Option<&'a mut Array1<f64>>,
    ff2: Option<&'a mut Array2<f64>>,
    ff2_b: Option<&'a mut Array1<f64>>,
}

impl<'a> BlockGradRefs<'a> {
    fn split(g: Option<&'a mut BlockWeights>) -> Self {
        match g {
            Some(g) => Self {
                ln1_g: Some(&mut g.ln1_g),
                ln1_b: Some(&mut g.ln1_b),
                q: Some(&mut g.q),
                k: Some(&mut g.k),
                v: Some(&mut g.v),
                o: Some(&mut g.o),
                ln2_g: Some(&mut g.ln2_g),
                ln2_b: Some(&mut g.ln2_b),
                ff1: Some(&mut g.ff1),
                ff1_b: Some(&mut g.ff1_b),
                ff2: Some(&mut g.ff2),
                ff2_b: Some(&mut g.ff2_b),
            },
            None => Self {
                ln1_g: None,
                ln1_b: None,
                q: None,
                k: None,
                v: None,
                o: None,
                ln2_g: None,
                ln2_b: None,
                ff1: None,
                ff1_b: None,
                ff2: None,
                ff2_b: None,
            },
        }
    }
}

pub(crate) fn block_bwd(
    dout: &Array2<f64>,
    w: &BlockWeights,
    c: &BlockCache,
    groups: &[Vec<usize>],
    heads: usize,
    loras: &BlockLoras,
    mut grads: Option<&mut BlockWeights>,
    lora_grads: &mut LoraGrads,
) -> Array2<f64> {
    let mut gs = BlockGradRefs::split(grads.as_deref_mut());
    macro_rules! g {
        ($field:ident) => {
            gs.$field.take()
        };
    }
    // Feed-forward branch.
    let dact = linear_bwd(dout, &w.ff2, &c.ff2c, &[], g!(ff2), g!(ff2_b), lora_grads);
    let dpre = &dact * &c.pre_act.mapv(gelu_grad);
    let dh2 = linear_bwd(&dpre, &w.ff1, &c.ff1c, &[], g!(ff1), g!(ff1_b), lora_grads);
    let mut dx1 = dout.clone();
    dx1 += &layer_norm_bwd(&dh2, &w.ln2_g, &c.ln2, g!(ln2_g), g!(ln2_b));
    // Attention branch.
    let dctx = linear_bwd(&dx1, &w.o, &c.oc, &loras.o, g!(o), None, lora_grads);
    let (dq, dk, dv) = attention_bwd(&dctx, &c.q, &c.k, &c.v, groups, heads, &c.probs);
    let mut dh1 = linear_bwd(&dq, &w.q, &c.qc, &loras.q, g!(q), None, lora_grads);
    dh1 += &linear_bwd(&dk, &w.k, &c.kc, &loras.k, g!(k), None, lora_grads);
    dh1 += &linear_bwd(&dv, &w.v, &c.vc, &loras.v, g!(v), None, lora_grads);
    let mut dx = dx1;
    dx += &layer_norm_bwd(&dh1, &w.ln1_g, &c.ln1, g!(ln1_g), g!(ln1_b));
    dx
}
