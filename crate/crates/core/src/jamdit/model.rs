//! Token-level forward pass with an explicit cache, and its hand-written
//! reverse-mode derivative.

use ndarray::{s, Array1, Array2, ArrayView1, Axis, Zip};

use super::{BlockParams, ModelParams};
use crate::real::Real;

const LN_EPS: f64 = 1e-5;
const POS_BASE: f64 = 100.0;
const TIME_SCALE: f64 = 1000.0;

struct LnCache<F> {
    xhat: Array2<F>,
    rstd: Array1<F>,
}

fn layer_norm<F: Real>(x: &Array2<F>, g: &Array1<F>, b: &Array1<F>) -> (Array2<F>, LnCache<F>) {
    let (n, c) = x.dim();
    let inv_c = F::of(1.0 / c as f64);
    let eps = F::of(LN_EPS);
    let mut xhat = Array2::zeros((n, c));
    let mut rstd = Array1::zeros(n);
    Zip::from(xhat.rows_mut())
        .and(x.rows())
        .and(&mut rstd)
        .for_each(|mut xh, row, r| {
            let mean = row.sum() * inv_c;
            let var = row.fold(F::zero(), |acc, &v| acc + (v - mean) * (v - mean)) * inv_c;
            let rs = F::one() / (var + eps).sqrt();
            *r = rs;
            Zip::from(&mut xh).and(&row).for_each(|o, &v| *o = (v - mean) * rs);
        });
    let y = &xhat * g + b;
    (y, LnCache { xhat, rstd })
}

/// Returns `(dx, dg, db)`.
fn layer_norm_backward<F: Real>(
    dy: &Array2<F>,
    g: &Array1<F>,
    cache: &LnCache<F>,
) -> (Array2<F>, Array1<F>, Array1<F>) {
    let dg = (dy * &cache.xhat).sum_axis(Axis(0));
    let db = dy.sum_axis(Axis(0));
    let dxhat = dy * g;
    let c = dy.ncols();
    let inv_c = F::of(1.0 / c as f64);
    let mut dx = Array2::zeros(dy.dim());
    Zip::from(dx.rows_mut())
        .and(dxhat.rows())
        .and(cache.xhat.rows())
        .and(&cache.rstd)
        .for_each(|mut out, dxh, xh, &rs| {
            let mean_d = dxh.sum() * inv_c;
            let mean_dx = Zip::from(&dxh).and(&xh).fold(F::zero(), |a, &p, &q| a + p * q) * inv_c;
            Zip::from(&mut out)
                .and(&dxh)
                .and(&xh)
                .for_each(|o, &d, &x| *o = rs * (d - mean_d - x * mean_dx));
        });
    (dx, dg, db)
}

fn gelu<F: Real>(a: F) -> F {
    let k = F::of((2.0 / std::f64::consts::PI).sqrt());
    let c = F::of(0.044715);
    let half = F::of(0.5);
    half * a * (F::one() + (k * (a + c * a * a * a)).tanh_fast())
}

fn gelu_grad<F: Real>(a: F) -> F {
    let k = F::of((2.0 / std::f64::consts::PI).sqrt());
    let c = F::of(0.044715);
    let half = F::of(0.5);
    let th = (k * (a + c * a * a * a)).tanh_fast();
    half * (F::one() + th) + half * a * (F::one() - th * th) * k * (F::one() + F::of(3.0) * c * a * a)
}

fn silu<F: Real>(a: F) -> F {
    a / (F::one() + (-a).exp())
}

fn silu_grad<F: Real>(a: F) -> F {
    let s = F::one() / (F::one() + (-a).exp());
    s * (F::one() + a * (F::one() - s))
}

fn vec_mat<F: Real>(v: &Array1<F>, m: &Array2<F>) -> Array1<F> {
    v.view().insert_axis(Axis(0)).dot(m).remove_axis(Axis(0))
}

fn outer<F: Real>(a: ArrayView1<'_, F>, b: ArrayView1<'_, F>) -> Array2<F> {
    a.insert_axis(Axis(1)).dot(&b.insert_axis(Axis(0)))
}

/// Fixed sinusoidal embedding of the `(t, h, w)` patch-grid coordinates; each
/// axis gets `embed_dim / 6` frequency pairs and leftover dims stay zero.
fn position_embedding<F: Real>(grid: (usize, usize, usize), dim: usize) -> Array2<F> {
    let (gt, gh, gw) = grid;
    let n_freq = dim / 6;
    let mut out = Array2::zeros((gt * gh * gw, dim));
    for it in 0..gt {
        for ih in 0..gh {
            for iw in 0..gw {
                let row = (it * gh + ih) * gw + iw;
                for (axis, coord) in [it, ih, iw].into_iter().enumerate() {
                    for j in 0..n_freq {
                        let omega = POS_BASE.powf(-(j as f64) / n_freq.max(1) as f64);
                        let arg = coord as f64 * omega;
                        let base = axis * 2 * n_freq + 2 * j;
                        out[[row, base]] = F::of(arg.sin());
                        out[[row, base + 1]] = F::of(arg.cos());
                    }
                }
            }
        }
    }
    out
}

fn time_embedding<F: Real>(t: F, dim: usize) -> Array1<F> {
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = TIME_SCALE * t.f64() * freq;
        out[i] = F::of(arg.cos());
        out[half + i] = F::of(arg.sin());
    }
    out
}

struct BlockCache<F> {
    ln1: LnCache<F>,
    xn1: Array2<F>,
    qkv: Array2<F>,
    probs: Vec<Array2<F>>,
    attn: Array2<F>,
    cross_v: Array1<F>,
    ln2: LnCache<F>,
    xn2: Array2<F>,
    fc1: Array2<F>,
    act: Array2<F>,
}

/// Everything the backward pass needs from one forward evaluation.
pub struct ForwardCache<F> {
    tokens: Array2<F>,
    class: usize,
    t_emb: Array1<F>,
    time_pre: Array1<F>,
    time_act: Array1<F>,
    cond: Array1<F>,
    blocks: Vec<BlockCache<F>>,
    ln_f: LnCache<F>,
    xn_f: Array2<F>,
}

fn block_forward<F: Real>(
    b: &BlockParams<F>,
    h: Array2<F>,
    cond: &Array1<F>,
    n_heads: usize,
) -> (Array2<F>, BlockCache<F>) {
    let (n, c) = h.dim();
    let dh = c / n_heads;
    let scale = F::of(1.0 / (dh as f64).sqrt());

    let (xn1, ln1) = layer_norm(&h, &b.ln1_g, &b.ln1_b);
    let qkv = xn1.dot(&b.qkv_w);
    let mut attn = Array2::zeros((n, c));
    let mut probs = Vec::with_capacity(n_heads);
    for head in 0..n_heads {
        let q = qkv.slice(s![.., head * dh..(head + 1) * dh]);
        let k = qkv.slice(s![.., c + head * dh..c + (head + 1) * dh]);
        let v = qkv.slice(s![.., 2 * c + head * dh..2 * c + (head + 1) * dh]);
        let mut p = (&q * scale).dot(&k.t());
        for mut row in p.rows_mut() {
            let r = row.as_slice_mut().expect("fresh product rows are contiguous");
            let max = r.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
            r.iter_mut().for_each(|x| *x = (*x - max).exp_fast());
            let inv = F::one() / r.iter().copied().sum::<F>();
            r.iter_mut().for_each(|x| *x *= inv);
        }
        attn.slice_mut(s![.., head * dh..(head + 1) * dh]).assign(&p.dot(&v));
        probs.push(p);
    }
    let mut h = h + &(attn.dot(&b.attn_out_w) + &b.attn_out_b);

    // A single condition key makes the softmax identically 1, so
    // cross-attention reduces to the projected value broadcast to every query.
    let cross_v = vec_mat(cond, &b.cross_v_w) + &b.cross_v_b;
    let cross = vec_mat(&cross_v, &b.cross_out_w) + &b.cross_out_b;
    h += &cross;

    let (xn2, ln2) = layer_norm(&h, &b.ln2_g, &b.ln2_b);
    let fc1 = xn2.dot(&b.fc1_w) + &b.fc1_b;
    let act = fc1.mapv(gelu);
    h += &(act.dot(&b.fc2_w) + &b.fc2_b);

    let cache = BlockCache {
        ln1,
        xn1,
        qkv,
        probs,
        attn,
        cross_v,
        ln2,
        xn2,
        fc1,
        act,
    };
    (h, cache)
}

/// Runs the network on prepared input tokens (`n_tokens x width`) and returns
/// output tokens plus the cache for [`backward`]. `class` is an embedding row
/// (the null id included); callers validate it.
pub fn forward_tokens<F: Real>(
    params: &ModelParams<F>,
    tokens: Array2<F>,
    class: usize,
    t: F,
    grid: (usize, usize, usize),
) -> (Array2<F>, ForwardCache<F>) {
    let cfg = &params.config;
    let hp = &params.head;
    let c = cfg.embed_dim;

    let t_emb = time_embedding(t, c);
    let time_pre = vec_mat(&t_emb, &hp.time_fc1_w) + &hp.time_fc1_b;
    let time_act = time_pre.mapv(silu);
    let cond = vec_mat(&time_act, &hp.time_fc2_w) + &hp.time_fc2_b + hp.class_embed.row(class);

    let mut h = tokens.dot(&hp.w_in) + &hp.b_in + &position_embedding::<F>(grid, c);
    let mut blocks = Vec::with_capacity(params.blocks.len());
    for b in &params.blocks {
        let (next, cache) = block_forward(b, h, &cond, cfg.n_heads);
        h = next;
        blocks.push(cache);
    }
    let (xn_f, ln_f) = layer_norm(&h, &hp.ln_f_g, &hp.ln_f_b);
    let out = xn_f.dot(&hp.w_out) + &hp.b_out;
    let cache = ForwardCache {
        tokens,
        class,
        t_emb,
        time_pre,
        time_act,
        cond,
        blocks,
        ln_f,
        xn_f,
    };
    (out, cache)
}

/// Accumulates into `grads` the gradient of output tokens' cotangent `d_out`.
fn block_backward<F: Real>(
    b: &BlockParams<F>,
    g: &mut BlockParams<F>,
    cache: &BlockCache<F>,
    cond: &Array1<F>,
    d_cond: &mut Array1<F>,
    dh: Array2<F>,
    n_heads: usize,
) -> Array2<F> {
    let (n, c) = dh.dim();
    let hd = c / n_heads;
    let scale = F::of(1.0 / (hd as f64).sqrt());

    // Feed-forward.
    g.fc2_w += &cache.act.t().dot(&dh);
    g.fc2_b += &dh.sum_axis(Axis(0));
    let mut d_fc1 = dh.dot(&b.fc2_w.t());
    Zip::from(&mut d_fc1)
        .and(&cache.fc1)
        .for_each(|d, &a| *d *= gelu_grad(a));
    g.fc1_w += &cache.xn2.t().dot(&d_fc1);
    g.fc1_b += &d_fc1.sum_axis(Axis(0));
    let d_xn2 = d_fc1.dot(&b.fc1_w.t());
    let (dx, dg2, db2) = layer_norm_backward(&d_xn2, &b.ln2_g, &cache.ln2);
    g.ln2_g += &dg2;
    g.ln2_b += &db2;
    let dh = dh + &dx;

    // Cross-attention against the condition token.
    let d_cross = dh.sum_axis(Axis(0));
    g.cross_out_w += &outer(cache.cross_v.view(), d_cross.view());
    g.cross_out_b += &d_cross;
    let d_cross_v = b.cross_out_w.dot(&d_cross);
    g.cross_v_w += &outer(cond.view(), d_cross_v.view());
    g.cross_v_b += &d_cross_v;
    *d_cond += &b.cross_v_w.dot(&d_cross_v);

    // Self-attention.
    g.attn_out_w += &cache.attn.t().dot(&dh);
    g.attn_out_b += &dh.sum_axis(Axis(0));
    let d_attn = dh.dot(&b.attn_out_w.t());
    let mut d_qkv = Array2::zeros((n, 3 * c));
    for head in 0..n_heads {
        let cols = |off: usize| s![.., off + head * hd..off + (head + 1) * hd];
        let q = cache.qkv.slice(cols(0));
        let k = cache.qkv.slice(cols(c));
        let v = cache.qkv.slice(cols(2 * c));
        let p = &cache.probs[head];
        let d_o = d_attn.slice(cols(0));
        d_qkv.slice_mut(cols(2 * c)).assign(&p.t().dot(&d_o));
        let mut d_s = d_o.dot(&v.t());
        Zip::from(d_s.rows_mut()).and(p.rows()).for_each(|mut ds, pr| {
            let dot = Zip::from(&ds).and(&pr).fold(F::zero(), |a, &x, &y| a + x * y);
            Zip::from(&mut ds)
                .and(&pr)
                .for_each(|d, &pp| *d = pp * (*d - dot) * scale);
        });
        d_qkv.slice_mut(cols(0)).assign(&d_s.dot(&k));
        d_qkv.slice_mut(cols(c)).assign(&d_s.t().dot(&q));
    }
    g.qkv_w += &cache.xn1.t().dot(&d_qkv);
    let d_xn1 = d_qkv.dot(&b.qkv_w.t());
    let (dx, dg1, db1) = layer_norm_backward(&d_xn1, &b.ln1_g, &cache.ln1);
    g.ln1_g += &dg1;
    g.ln1_b += &db1;
    dh + &dx
}

/// Adds to `grads` the parameter gradient of `<d_out, out>` for the forward
/// evaluation recorded in `cache`.
pub fn backward<F: Real>(
    params: &ModelParams<F>,
    cache: &ForwardCache<F>,
    d_out: &Array2<F>,
    grads: &mut ModelParams<F>,
) {
    let hp = &params.head;
    let gh = &mut grads.head;
    gh.w_out += &cache.xn_f.t().dot(d_out);
    gh.b_out += &d_out.sum_axis(Axis(0));
    let d_xn = d_out.dot(&hp.w_out.t());
    let (mut dh, dg, db) = layer_norm_backward(&d_xn, &hp.ln_f_g, &cache.ln_f);
    gh.ln_f_g += &dg;
    gh.ln_f_b += &db;

    let mut d_cond = Array1::zeros(params.config.embed_dim);
    for ((b, g), bc) in params
        .blocks
        .iter()
        .zip(grads.blocks.iter_mut())
        .zip(&cache.blocks)
        .rev()
    {
        dh = block_backward(b, g, bc, &cache.cond, &mut d_cond, dh, params.config.n_heads);
    }

    let gh = &mut grads.head;
    gh.w_in += &cache.tokens.t().dot(&dh);
    gh.b_in += &dh.sum_axis(Axis(0));

    let mut row = gh.class_embed.row_mut(cache.class);
    row += &d_cond;
    gh.time_fc2_w += &outer(cache.time_act.view(), d_cond.view());
    gh.time_fc2_b += &d_cond;
    let mut d_pre = hp.time_fc2_w.dot(&d_cond);
    Zip::from(&mut d_pre)
        .and(&cache.time_pre)
        .for_each(|d, &a| *d *= silu_grad(a));
    gh.time_fc1_w += &outer(cache.t_emb.view(), d_pre.view());
    gh.time_fc1_b += &d_pre;
}
