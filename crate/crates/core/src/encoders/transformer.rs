//! Pre-LN transformer blocks shared by the vision and text towers, and the
//! residual-free customized attention used for dense features.

use ndarray::{s, Array2};

use crate::autograd::{softmax_rows, Graph, Var};
use crate::params::{Bound, ParamSet};
use crate::rng::Rng;

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) fn init_layer_norm(p: &mut ParamSet, prefix: &str, width: usize) {
    p.ones(&format!("{prefix}.g"), (1, width));
    p.zeros(&format!("{prefix}.b"), (1, width));
}

pub(crate) fn init_block(p: &mut ParamSet, prefix: &str, width: usize, depth: usize, rng: &mut Rng) {
    let attn_std = (width as f64).powf(-0.5);
    let proj_std = attn_std * ((2 * depth) as f64).powf(-0.5);
    let fc_std = ((2 * width) as f64).powf(-0.5);
    init_layer_norm(p, &format!("{prefix}.ln1"), width);
    p.normal(&format!("{prefix}.attn.qkv.w"), (width, 3 * width), attn_std, rng);
    p.zeros(&format!("{prefix}.attn.qkv.b"), (1, 3 * width));
    p.normal(&format!("{prefix}.attn.out.w"), (width, width), proj_std, rng);
    p.zeros(&format!("{prefix}.attn.out.b"), (1, width));
    init_layer_norm(p, &format!("{prefix}.ln2"), width);
    p.normal(&format!("{prefix}.mlp.fc.w"), (width, 4 * width), fc_std, rng);
    p.zeros(&format!("{prefix}.mlp.fc.b"), (1, 4 * width));
    p.normal(&format!("{prefix}.mlp.proj.w"), (4 * width, width), proj_std, rng);
    p.zeros(&format!("{prefix}.mlp.proj.b"), (1, width));
}

pub(crate) fn layer_norm(g: &mut Graph, b: &Bound, prefix: &str, x: Var) -> Var {
    let gain = b.get(&format!("{prefix}.g"));
    let bias = b.get(&format!("{prefix}.b"));
    g.layer_norm(x, gain, bias, LN_EPS)
}

pub(crate) fn linear(g: &mut Graph, b: &Bound, prefix: &str, x: Var) -> Var {
    let w = b.get(&format!("{prefix}.w"));
    let bias = b.get(&format!("{prefix}.b"));
    let y = g.matmul(x, w);
    g.add_row(y, bias)
}

fn attention(g: &mut Graph, b: &Bound, prefix: &str, x: Var, heads: usize, causal: bool) -> Var {
    let width = g.value(x).ncols();
    let dh = width / heads;
    let qkv = linear(g, b, &format!("{prefix}.qkv"), x);
    let scale = 1.0 / (dh as f64).sqrt();
    let outs: Vec<Var> = (0..heads)
        .map(|h| {
            let q = g.slice_cols(qkv, h * dh, dh);
            let k = g.slice_cols(qkv, width + h * dh, dh);
            let v = g.slice_cols(qkv, 2 * width + h * dh, dh);
            let scores = g.matmul_t(q, k);
            let scores = g.scale(scores, scale);
            let a = g.softmax(scores, causal);
            g.matmul(a, v)
        })
        .collect();
    let cat = g.concat_cols(&outs);
    linear(g, b, &format!("{prefix}.out"), cat)
}

/// `x + attn(ln1(x))`, then `+ mlp(ln2(·))`.
pub(crate) fn block_forward(g: &mut Graph, b: &Bound, prefix: &str, x: Var, heads: usize, causal: bool) -> Var {
    let h = layer_norm(g, b, &format!("{prefix}.ln1"), x);
    let a = attention(g, b, &format!("{prefix}.attn"), h, heads, causal);
    let x = g.add(x, a);
    let h = layer_norm(g, b, &format!("{prefix}.ln2"), x);
    let h = linear(g, b, &format!("{prefix}.mlp.fc"), h);
    let h = g.quick_gelu(h);
    let h = linear(g, b, &format!("{prefix}.mlp.proj"), h);
    g.add(x, h)
}

/// Intermediate matrices of one customized-attention evaluation.
#[derive(Clone, Debug)]
pub struct CustAttnTrace {
    /// Per head: `[A_qq, A_kk, A_vv]`, each a row-stochastic T x T matrix.
    pub per_source: Vec<[Array2<f64>; 3]>,
    /// Per head: `A = A_qq + A_kk + A_vv`.
    pub combined: Vec<Array2<f64>>,
    /// Per head value vectors, T x d_h.
    pub values: Vec<Array2<f64>>,
    /// `Proj(A v)` with heads concatenated, T x width. No residual, no MLP.
    pub output: Array2<f64>,
}

fn ln_plain(x: &Array2<f64>, gain: &Array2<f64>, bias: &Array2<f64>) -> Array2<f64> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let gv = g.constant(gain.clone());
    let bv = g.constant(bias.clone());
    let y = g.layer_norm(xv, gv, bv, LN_EPS);
    g.value(y).clone()
}

/// Customized attention of the block at `prefix` applied to its input `x`
/// (T x width, CLS first). Each source t ∈ {q, k, v} yields
/// `A_tt = softmax(t tᵀ / √d_h)`; the head output is `(A_qq + A_kk + A_vv) v`
/// and the block's output projection is applied to the concatenated heads.
pub fn custom_attention(params: &ParamSet, prefix: &str, x: &Array2<f64>, heads: usize) -> CustAttnTrace {
    let width = x.ncols();
    let dh = width / heads;
    let h = ln_plain(
        x,
        params.get(&format!("{prefix}.ln1.g")),
        params.get(&format!("{prefix}.ln1.b")),
    );
    let qkv = h.dot(params.get(&format!("{prefix}.attn.qkv.w"))) + params.get(&format!("{prefix}.attn.qkv.b"));
    let scale = 1.0 / (dh as f64).sqrt();
    let mut per_source = Vec::with_capacity(heads);
    let mut combined = Vec::with_capacity(heads);
    let mut values = Vec::with_capacity(heads);
    let mut cat = Array2::zeros((x.nrows(), width));
    for hd in 0..heads {
        let take = |off: usize| qkv.slice(s![.., off + hd * dh..off + (hd + 1) * dh]).to_owned();
        let (q, k, v) = (take(0), take(width), take(2 * width));
        let gram = |t: &Array2<f64>| softmax_rows((t.dot(&t.t()) * scale).view());
        let maps = [gram(&q), gram(&k), gram(&v)];
        let a = &maps[0] + &maps[1] + &maps[2];
        cat.slice_mut(s![.., hd * dh..(hd + 1) * dh]).assign(&a.dot(&v));
        per_source.push(maps);
        combined.push(a);
        values.push(v);
    }
    let output = cat.dot(params.get(&format!("{prefix}.attn.out.w"))) + params.get(&format!("{prefix}.attn.out.b"));
    CustAttnTrace {
        per_source,
        combined,
        values,
        output,
    }
}
