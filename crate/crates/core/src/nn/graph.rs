//! Reverse-mode tape. Every operation records its output value and enough
//! context to push a gradient back to its inputs; `backward` walks the tape
//! in reverse creation order.

use crate::align::{
    delta_from_raw, delta_from_raw_grad, normalized_gaussian, normalized_gaussian_grad, positional_encoding,
    positional_encoding_grad, sigma_from_raw, sigma_from_raw_grad, sigmoid, softmax, softplus, upsample_centers,
    LOG_EPS,
};
use crate::prosody::{emd2_grad, emd2_unchecked};

use super::mat::{gemm, Mat};
use super::params::{Gradients, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Relu,
    Softplus,
    Exp,
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Unary(Var, Unary),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Gather(Var, Vec<Option<usize>>),
    Reshape(Var),
    Stack(Vec<Var>),
    SumAll(Var),
    Gru {
        xw: Var,
        h: Var,
        u: Var,
        bh: Var,
        cache: Mat,
    },
    Lstm {
        xw: Var,
        state: Var,
        u: Var,
        cache: Mat,
    },
    Im2Col1d {
        src: Var,
        steps: usize,
        k: usize,
        pad: usize,
    },
    Im2Col2d {
        src: Var,
        geom: Conv2dGeom,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        rstd: Vec<f64>,
    },
    SoftmaxRows(Var),
    AttnState {
        raw: Var,
        prev: Var,
    },
    GaussRows {
        state: Var,
        lens: Vec<usize>,
    },
    PosEnc(Var),
    BatchedVecMat {
        alpha: Var,
        table: Var,
    },
    WordMix {
        alpha: Var,
        table: Var,
        entries: Vec<MixEntry>,
    },
    Upsample {
        ranges: Var,
        durations: Vec<Vec<usize>>,
        steps: usize,
    },
    MaskedL1 {
        pred: Var,
        target: Mat,
        mask: Mat,
        norm: f64,
    },
    MaskedSq {
        pred: Var,
        target: Mat,
        mask: Mat,
        norm: f64,
    },
    KlRows {
        q: Var,
        p: Mat,
        weights: Vec<f64>,
        norm: f64,
    },
    SoftCe {
        logits: Var,
        target: Mat,
        weights: Vec<f64>,
        norm: f64,
        probs: Mat,
    },
    Emd2 {
        logits: Var,
        target: Mat,
        weights: Vec<f64>,
        norm: f64,
        probs: Mat,
    },
}

/// One contribution to [`Graph::word_mix`]: batch row `batch` receives
/// `sum(alpha[batch, start..end]) * table[row]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MixEntry {
    pub batch: usize,
    pub row: usize,
    pub start: usize,
    pub end: usize,
}

/// Geometry of a 2-D convolution over `(time, freq, channel)` feature maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub batch: usize,
    pub t_in: usize,
    pub f_in: usize,
    pub c_in: usize,
    pub kt: usize,
    pub kf: usize,
    pub st: usize,
    pub sf: usize,
    pub pt: usize,
    pub pf: usize,
}

impl Conv2dGeom {
    pub fn t_out(&self) -> usize {
        (self.t_in + 2 * self.pt - self.kt) / self.st + 1
    }

    pub fn f_out(&self) -> usize {
        (self.f_in + 2 * self.pf - self.kf) / self.sf + 1
    }

    pub fn patch(&self) -> usize {
        self.kt * self.kf * self.c_in
    }
}

struct Node {
    value: Mat,
    op: Op,
    tracked: bool,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    params: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            params: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Mat, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// The node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.params[id.0] {
            return v;
        }
        let tracked = !self.store.is_frozen(id);
        let v = self.push(self.store.get(id).clone(), Op::Leaf, tracked);
        self.params[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf that is not a parameter, for gradient probes.
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Same value, no gradient flows back through the result.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let t = self.tracked(&[a, b]);
        self.push(value, Op::MatMul(a, b), t)
    }

    /// `a * b^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut value = Mat::zeros(av.rows, bv.rows);
        gemm(av, false, bv, true, &mut value, 0.0);
        let t = self.tracked(&[a, b]);
        self.push(value, Op::MatMulBt(a, b), t)
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let bv = self.value(bias);
        assert_eq!((1, self.value(a).cols), bv.shape(), "add_bias shape");
        let mut value = self.value(a).clone();
        for r in 0..value.rows {
            value.row_mut(r).iter_mut().zip(&bv.data).for_each(|(x, b)| *x += b);
        }
        let t = self.tracked(&[a, bias]);
        self.push(value, Op::AddBias(a, bias), t)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Mat {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape");
        Mat {
            rows: av.rows,
            cols: av.cols,
            data: av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |x, y| x + y);
        let t = self.tracked(&[a, b]);
        self.push(value, Op::Add(a, b), t)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |x, y| x - y);
        let t = self.tracked(&[a, b]);
        self.push(value, Op::Sub(a, b), t)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |x, y| x * y);
        let t = self.tracked(&[a, b]);
        self.push(value, Op::Mul(a, b), t)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let t = self.tracked(&[a]);
        self.push(value, Op::Scale(a, s), t)
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Var {
        let value = self.value(a).map(|x| match f {
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Relu => x.max(0.0),
            Unary::Softplus => softplus(x),
            Unary::Exp => x.exp(),
        });
        let t = self.tracked(&[a]);
        self.push(value, Op::Unary(a, f), t)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut value = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows, rows, "concat_cols rows");
            for r in 0..rows {
                value.row_mut(r)[off..off + pv.cols].copy_from_slice(pv.row(r));
            }
            off += pv.cols;
        }
        let t = self.tracked(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), t)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice_cols(start, len);
        let t = self.tracked(&[a]);
        self.push(value, Op::SliceCols(a, start), t)
    }

    /// Row `r` of the result is `src[idx[r]]`, or zeros for `None`.
    pub fn gather(&mut self, src: Var, idx: Vec<Option<usize>>) -> Var {
        let sv = self.value(src);
        let mut value = Mat::zeros(idx.len(), sv.cols);
        for (r, i) in idx.iter().enumerate() {
            if let Some(i) = *i {
                value.row_mut(r).copy_from_slice(sv.row(i));
            }
        }
        let t = self.tracked(&[src]);
        self.push(value, Op::Gather(src, idx), t)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.len(), rows * cols, "reshape size");
        let value = Mat::from_vec(rows, cols, av.data.clone());
        let t = self.tracked(&[a]);
        self.push(value, Op::Reshape(a), t)
    }

    /// Interleaves per-step `[batch x n]` blocks into a `(batch * steps) x n`
    /// sequence with row `b * steps + t`.
    pub fn stack_steps(&mut self, steps: &[Var]) -> Var {
        let (batch, cols) = self.shape(steps[0]);
        let n = steps.len();
        let mut value = Mat::zeros(batch * n, cols);
        for (t, &s) in steps.iter().enumerate() {
            let sv = self.value(s);
            for b in 0..batch {
                value.row_mut(b * n + t).copy_from_slice(sv.row(b));
            }
        }
        let t = self.tracked(steps);
        self.push(value, Op::Stack(steps.to_vec()), t)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Mat::scalar(self.value(a).data.iter().sum());
        let t = self.tracked(&[a]);
        self.push(value, Op::SumAll(a), t)
    }

    /// GRU cell. `xw` holds the input projection plus input bias for the
    /// gates `[r | z | n]`; `u` is the `H x 3H` recurrent matrix and `bh` its
    /// `1 x 3H` bias (the candidate's recurrent term is gated by `r`).
    pub fn gru_cell(&mut self, xw: Var, h: Var, u: Var, bh: Var) -> Var {
        let hv = self.value(h);
        let (batch, hd) = hv.shape();
        let mut hu = Mat::zeros(batch, 3 * hd);
        gemm(hv, false, self.value(u), false, &mut hu, 0.0);
        let bhv = self.value(bh);
        let xv = self.value(xw);
        let mut out = Mat::zeros(batch, hd);
        let mut cache = Mat::zeros(batch, 4 * hd);
        for b in 0..batch {
            let (x, hur, hrow) = (xv.row(b), hu.row(b), hv.row(b));
            for j in 0..hd {
                let r = sigmoid(x[j] + hur[j] + bhv.data[j]);
                let z = sigmoid(x[hd + j] + hur[hd + j] + bhv.data[hd + j]);
                let hn = hur[2 * hd + j] + bhv.data[2 * hd + j];
                let n = (x[2 * hd + j] + r * hn).tanh();
                out.data[b * hd + j] = (1.0 - z) * n + z * hrow[j];
                let c = cache.row_mut(b);
                c[j] = r;
                c[hd + j] = z;
                c[2 * hd + j] = n;
                c[3 * hd + j] = hn;
            }
        }
        let t = self.tracked(&[xw, h, u, bh]);
        self.push(out, Op::Gru { xw, h, u, bh, cache }, t)
    }

    /// LSTM cell over a packed `[h | c]` state; `xw` holds the input
    /// projection plus bias for the gates `[i | f | g | o]`. Returns the new
    /// packed state.
    pub fn lstm_cell(&mut self, xw: Var, state: Var, u: Var) -> Var {
        let sv = self.value(state);
        let batch = sv.rows;
        let hd = sv.cols / 2;
        let h = sv.slice_cols(0, hd);
        let mut a = self.value(xw).clone();
        gemm(&h, false, self.value(u), false, &mut a, 1.0);
        let mut out = Mat::zeros(batch, 2 * hd);
        let mut cache = Mat::zeros(batch, 5 * hd);
        for b in 0..batch {
            let ar = a.row(b);
            let c_prev = &sv.row(b)[hd..];
            for j in 0..hd {
                let i = sigmoid(ar[j]);
                let f = sigmoid(ar[hd + j]);
                let g = ar[2 * hd + j].tanh();
                let o = sigmoid(ar[3 * hd + j]);
                let c = f * c_prev[j] + i * g;
                let tc = c.tanh();
                out.data[b * 2 * hd + j] = o * tc;
                out.data[b * 2 * hd + hd + j] = c;
                let cr = cache.row_mut(b);
                cr[j] = i;
                cr[hd + j] = f;
                cr[2 * hd + j] = g;
                cr[3 * hd + j] = o;
                cr[4 * hd + j] = tc;
            }
        }
        let t = self.tracked(&[xw, state, u]);
        self.push(out, Op::Lstm { xw, state, u, cache }, t)
    }

    /// Unfolds a `(batch * steps) x c` sequence into `(batch * steps) x (k * c)`
    /// patches centred with `pad` zeros on each side (no leakage across
    /// utterances).
    pub fn im2col_1d(&mut self, src: Var, steps: usize, k: usize, pad: usize) -> Var {
        let sv = self.value(src);
        let c = sv.cols;
        let batch = sv.rows / steps;
        let mut value = Mat::zeros(sv.rows, k * c);
        for b in 0..batch {
            for t in 0..steps {
                let row = value.row_mut(b * steps + t);
                for q in 0..k {
                    let s = t as isize + q as isize - pad as isize;
                    if s >= 0 && (s as usize) < steps {
                        row[q * c..(q + 1) * c].copy_from_slice(sv.row(b * steps + s as usize));
                    }
                }
            }
        }
        let t = self.tracked(&[src]);
        self.push(value, Op::Im2Col1d { src, steps, k, pad }, t)
    }

    /// Unfolds `(batch * t_in) x (f_in * c_in)` maps into
    /// `(batch * t_out * f_out) x (kt * kf * c_in)` patches.
    pub fn im2col_2d(&mut self, src: Var, geom: Conv2dGeom) -> Var {
        let sv = self.value(src);
        assert_eq!(sv.shape(), (geom.batch * geom.t_in, geom.f_in * geom.c_in), "im2col_2d input");
        let (to, fo) = (geom.t_out(), geom.f_out());
        let mut value = Mat::zeros(geom.batch * to * fo, geom.patch());
        for_each_patch(&geom, |out_row, col, src_row, src_col| {
            value.data[out_row * geom.patch() + col] = sv.data[src_row * sv.cols + src_col];
        });
        let t = self.tracked(&[src]);
        self.push(value, Op::Im2Col2d { src, geom }, t)
    }

    /// Per-row layer normalization with `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, n) = xv.shape();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut xhat = Mat::zeros(rows, n);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Mat::zeros(rows, n);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(s);
            for j in 0..n {
                let h = (row[j] - mean) * s;
                xhat.data[r * n + j] = h;
                out.data[r * n + j] = h * gv.data[j] + bv.data[j];
            }
        }
        let t = self.tracked(&[x, gamma, beta]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            t,
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut value = Mat::zeros(av.rows, av.cols);
        for r in 0..av.rows {
            value.row_mut(r).copy_from_slice(&softmax(av.row(r)));
        }
        let t = self.tracked(&[a]);
        self.push(value, Op::SoftmaxRows(a), t)
    }

    /// Attention state update. `raw` is `[batch x 2]` holding the raw sigma
    /// and increment parameters; `prev` and the result are `[batch x 3]`
    /// states `(mu, sigma, delta)`.
    pub fn attention_state(&mut self, raw: Var, prev: Var) -> Var {
        let (rv, pv) = (self.value(raw), self.value(prev));
        let batch = rv.rows;
        let mut value = Mat::zeros(batch, 3);
        for b in 0..batch {
            let delta = delta_from_raw(rv.at(b, 1));
            value.data[b * 3] = pv.at(b, 0) + delta;
            value.data[b * 3 + 1] = sigma_from_raw(rv.at(b, 0));
            value.data[b * 3 + 2] = delta;
        }
        let t = self.tracked(&[raw, prev]);
        self.push(value, Op::AttnState { raw, prev }, t)
    }

    /// Normalized gaussian rows over the first `lens[b]` of `n` positions.
    pub fn gaussian_rows(&mut self, state: Var, lens: Vec<usize>, n: usize) -> Var {
        let sv = self.value(state);
        let mut value = Mat::zeros(sv.rows, n);
        for (b, &len) in lens.iter().enumerate() {
            let w = normalized_gaussian(sv.at(b, 0), sv.at(b, 1), len);
            value.row_mut(b)[..len].copy_from_slice(&w);
        }
        let t = self.tracked(&[state]);
        self.push(value, Op::GaussRows { state, lens }, t)
    }

    /// Positional code of column 0 of `state`.
    pub fn positional(&mut self, state: Var, dim: usize) -> Var {
        let sv = self.value(state);
        let mut value = Mat::zeros(sv.rows, dim);
        for b in 0..sv.rows {
            value.row_mut(b).copy_from_slice(&positional_encoding(sv.at(b, 0), dim).0);
        }
        let t = self.tracked(&[state]);
        self.push(value, Op::PosEnc(state), t)
    }

    /// Per-utterance weighted sum: row `b` is `sum_k alpha[b, k] * table[b * J + k]`.
    pub fn batched_vec_mat(&mut self, alpha: Var, table: Var) -> Var {
        let (av, tv) = (self.value(alpha), self.value(table));
        let (batch, j) = av.shape();
        assert_eq!(tv.rows, batch * j, "batched_vec_mat table rows");
        let d = tv.cols;
        let mut value = Mat::zeros(batch, d);
        for b in 0..batch {
            let out = &mut value.data[b * d..(b + 1) * d];
            for k in 0..j {
                let a = av.data[b * j + k];
                if a != 0.0 {
                    out.iter_mut().zip(tv.row(b * j + k)).for_each(|(o, x)| *o += a * x);
                }
            }
        }
        let t = self.tracked(&[alpha, table]);
        self.push(value, Op::BatchedVecMat { alpha, table }, t)
    }

    /// Mixes table rows by the attention mass over encoder spans; see [`MixEntry`].
    pub fn word_mix(&mut self, alpha: Var, table: Var, entries: Vec<MixEntry>) -> Var {
        let (av, tv) = (self.value(alpha), self.value(table));
        let d = tv.cols;
        let mut value = Mat::zeros(av.rows, d);
        for e in &entries {
            let mass: f64 = av.row(e.batch)[e.start..e.end].iter().sum();
            value
                .row_mut(e.batch)
                .iter_mut()
                .zip(tv.row(e.row))
                .for_each(|(o, x)| *o += mass * x);
        }
        let t = self.tracked(&[alpha, table]);
        self.push(value, Op::WordMix { alpha, table, entries }, t)
    }

    /// Gaussian upsampling of every utterance to `steps` frames. `ranges` is
    /// `[batch x J]` (relative ranges, padded columns ignored); the result is
    /// `(batch * steps) x J` with padded columns zero.
    pub fn upsample(&mut self, ranges: Var, durations: Vec<Vec<usize>>, steps: usize) -> Var {
        let rv = self.value(ranges);
        let j = rv.cols;
        let mut value = Mat::zeros(durations.len() * steps, j);
        for (b, d) in durations.iter().enumerate() {
            let centers = upsample_centers(d);
            let r = &rv.row(b)[..d.len()];
            let mut logits = vec![0.0; d.len()];
            for i in 0..steps {
                upsample_row_logits(&centers, r, d, i, &mut logits);
                value.row_mut(b * steps + i)[..d.len()].copy_from_slice(&softmax(&logits));
            }
        }
        let t = self.tracked(&[ranges]);
        self.push(
            value,
            Op::Upsample {
                ranges,
                durations,
                steps,
            },
            t,
        )
    }

    /// `sum(mask * |pred - target|) / sum(mask)`.
    pub fn masked_l1(&mut self, pred: Var, target: Mat, mask: Mat) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "masked_l1 target");
        assert_eq!(pv.shape(), mask.shape(), "masked_l1 mask");
        let norm = mask.data.iter().sum::<f64>().max(1.0);
        let s: f64 = pv
            .data
            .iter()
            .zip(&target.data)
            .zip(&mask.data)
            .map(|((p, t), m)| m * (p - t).abs())
            .sum();
        let t = self.tracked(&[pred]);
        self.push(
            Mat::scalar(s / norm),
            Op::MaskedL1 {
                pred,
                target,
                mask,
                norm,
            },
            t,
        )
    }

    /// `sum(mask * (pred - target)^2) / sum(mask)`.
    pub fn masked_sq(&mut self, pred: Var, target: Mat, mask: Mat) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "masked_sq target");
        assert_eq!(pv.shape(), mask.shape(), "masked_sq mask");
        let norm = mask.data.iter().sum::<f64>().max(1.0);
        let s: f64 = pv
            .data
            .iter()
            .zip(&target.data)
            .zip(&mask.data)
            .map(|((p, t), m)| m * (p - t).powi(2))
            .sum();
        let t = self.tracked(&[pred]);
        self.push(
            Mat::scalar(s / norm),
            Op::MaskedSq {
                pred,
                target,
                mask,
                norm,
            },
            t,
        )
    }

    /// Weighted mean over rows of `KL(p_r || q_r)` with constant `p`.
    pub fn kl_rows(&mut self, q: Var, p: Mat, weights: Vec<f64>) -> Var {
        let qv = self.value(q);
        assert_eq!(qv.shape(), p.shape(), "kl_rows shape");
        let norm = weights.iter().sum::<f64>().max(1e-12);
        let mut s = 0.0;
        for (r, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let kl: f64 = p
                .row(r)
                .iter()
                .zip(qv.row(r))
                .filter(|(&pj, _)| pj > 0.0)
                .map(|(&pj, &qj)| pj * ((pj + LOG_EPS).ln() - (qj + LOG_EPS).ln()))
                .sum();
            s += w * kl;
        }
        let t = self.tracked(&[q]);
        self.push(Mat::scalar(s / norm), Op::KlRows { q, p, weights, norm }, t)
    }

    /// Weighted mean over rows of `-sum(target * log softmax(logits))`.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: Mat, weights: Vec<f64>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.shape(), target.shape(), "soft_cross_entropy shape");
        let norm = weights.iter().sum::<f64>().max(1e-12);
        let mut probs = Mat::zeros(lv.rows, lv.cols);
        let mut s = 0.0;
        for (r, &w) in weights.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for (c, &x) in row.iter().enumerate() {
                probs.data[r * lv.cols + c] = (x - lse).exp();
                if w != 0.0 {
                    s -= w * target.at(r, c) * (x - lse);
                }
            }
        }
        let t = self.tracked(&[logits]);
        self.push(
            Mat::scalar(s / norm),
            Op::SoftCe {
                logits,
                target,
                weights,
                norm,
                probs,
            },
            t,
        )
    }

    /// Weighted mean over rows of the squared earth mover's distance between
    /// `softmax(logits)` and `target`.
    pub fn emd2_softmax(&mut self, logits: Var, target: Mat, weights: Vec<f64>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.shape(), target.shape(), "emd2_softmax shape");
        let norm = weights.iter().sum::<f64>().max(1e-12);
        let mut probs = Mat::zeros(lv.rows, lv.cols);
        let mut s = 0.0;
        for (r, &w) in weights.iter().enumerate() {
            let p = softmax(lv.row(r));
            if w != 0.0 {
                s += w * emd2_unchecked(&p, target.row(r));
            }
            probs.row_mut(r).copy_from_slice(&p);
        }
        let t = self.tracked(&[logits]);
        self.push(
            Mat::scalar(s / norm),
            Op::Emd2 {
                logits,
                target,
                weights,
                norm,
                probs,
            },
            t,
        )
    }

    /// Gradients of the scalar `root` with respect to every tracked parameter.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads = self.run_backward(root);
        let by_param = self
            .params
            .iter()
            .map(|v| v.and_then(|v| grads[v.0].take()))
            .collect();
        Gradients { by_param }
    }

    /// Gradients of `root` with respect to arbitrary tracked nodes (zeros for
    /// nodes the root does not depend on).
    pub fn grad_wrt(&self, root: Var, vars: &[Var]) -> Vec<Mat> {
        let grads = self.run_backward(root);
        vars.iter()
            .map(|v| {
                grads[v.0].clone().unwrap_or_else(|| {
                    let (r, c) = self.shape(*v);
                    Mat::zeros(r, c)
                })
            })
            .collect()
    }

    fn run_backward(&self, root: Var) -> Vec<Option<Mat>> {
        assert_eq!(self.shape(root), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Mat>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if !self.nodes[root.0].tracked {
            return grads;
        }
        grads[root.0] = Some(Mat::scalar(1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
        }
        grads
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Mat>], v: Var) -> Option<&'g mut Mat> {
        if !self.nodes[v.0].tracked {
            return None;
        }
        let (r, c) = self.shape(v);
        Some(grads[v.0].get_or_insert_with(|| Mat::zeros(r, c)))
    }

    fn backprop(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    gemm(g, false, self.value(*b), true, ga, 1.0);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm(self.value(*a), true, g, false, gb, 1.0);
                }
            }
            Op::MatMulBt(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    gemm(g, false, self.value(*b), false, ga, 1.0);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm(g, true, self.value(*a), false, gb, 1.0);
                }
            }
            Op::AddBias(a, bias) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    gb.add_assign(&g.sum_rows());
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.add_assign(g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.data.iter_mut().zip(&g.data).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let bv = &self.nodes[b.0].value;
                    for ((x, y), z) in ga.data.iter_mut().zip(&g.data).zip(&bv.data) {
                        *x += y * z;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    let av = &self.nodes[a.0].value;
                    for ((x, y), z) in gb.data.iter_mut().zip(&g.data).zip(&av.data) {
                        *x += y * z;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.data.iter_mut().zip(&g.data).for_each(|(x, y)| *x += s * y);
                }
            }
            Op::Unary(a, f) => {
                let f = *f;
                let input = &self.nodes[a.0].value;
                if let Some(ga) = self.slot(grads, *a) {
                    for (k, x) in ga.data.iter_mut().enumerate() {
                        let y = out.data[k];
                        let d = match f {
                            Unary::Sigmoid => y * (1.0 - y),
                            Unary::Tanh => 1.0 - y * y,
                            Unary::Relu => {
                                if y > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Softplus => sigmoid(input.data[k]),
                            Unary::Exp => y,
                        };
                        *x += g.data[k] * d;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let cols = self.nodes[p.0].value.cols;
                    if let Some(gp) = self.slot(grads, *p) {
                        for r in 0..g.rows {
                            gp.row_mut(r)
                                .iter_mut()
                                .zip(&g.row(r)[off..off + cols])
                                .for_each(|(x, y)| *x += y);
                        }
                    }
                    off += cols;
                }
            }
            Op::SliceCols(a, start) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for r in 0..g.rows {
                        ga.row_mut(r)[*start..*start + g.cols]
                            .iter_mut()
                            .zip(g.row(r))
                            .for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Gather(src, idx) => {
                if let Some(gs) = self.slot(grads, *src) {
                    for (r, i) in idx.iter().enumerate() {
                        if let Some(i) = *i {
                            gs.row_mut(i).iter_mut().zip(g.row(r)).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.data.iter_mut().zip(&g.data).for_each(|(x, y)| *x += y);
                }
            }
            Op::Stack(steps) => {
                let n = steps.len();
                for (t, s) in steps.iter().enumerate() {
                    if let Some(gs) = self.slot(grads, *s) {
                        for b in 0..gs.rows {
                            gs.row_mut(b)
                                .iter_mut()
                                .zip(g.row(b * n + t))
                                .for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                let s = g.scalar_value();
                if let Some(ga) = self.slot(grads, *a) {
                    ga.data.iter_mut().for_each(|x| *x += s);
                }
            }
            Op::Gru { xw, h, u, bh, cache } => self.backprop_gru(g, *xw, *h, *u, *bh, cache, grads),
            Op::Lstm { xw, state, u, cache } => self.backprop_lstm(g, *xw, *state, *u, cache, grads),
            Op::Im2Col1d { src, steps, k, pad } => {
                if let Some(gs) = self.slot(grads, *src) {
                    let c = gs.cols;
                    let batch = gs.rows / steps;
                    for b in 0..batch {
                        for t in 0..*steps {
                            let grow = g.row(b * steps + t);
                            for q in 0..*k {
                                let s = t as isize + q as isize - *pad as isize;
                                if s >= 0 && (s as usize) < *steps {
                                    gs.row_mut(b * steps + s as usize)
                                        .iter_mut()
                                        .zip(&grow[q * c..(q + 1) * c])
                                        .for_each(|(x, y)| *x += y);
                                }
                            }
                        }
                    }
                }
            }
            Op::Im2Col2d { src, geom } => {
                if let Some(gs) = self.slot(grads, *src) {
                    let cols = gs.cols;
                    for_each_patch(geom, |out_row, col, src_row, src_col| {
                        gs.data[src_row * cols + src_col] += g.data[out_row * geom.patch() + col];
                    });
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = g.cols;
                let gv = &self.nodes[gamma.0].value;
                if let Some(gx) = self.slot(grads, *x) {
                    let mut dxhat = vec![0.0; n];
                    for r in 0..g.rows {
                        let grow = g.row(r);
                        let xh = xhat.row(r);
                        for j in 0..n {
                            dxhat[j] = grow[j] * gv.data[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / n as f64;
                        let m2 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        let dst = gx.row_mut(r);
                        for j in 0..n {
                            dst[j] += rstd[r] * (dxhat[j] - m1 - xh[j] * m2);
                        }
                    }
                }
                if let Some(gg) = self.slot(grads, *gamma) {
                    for r in 0..g.rows {
                        for j in 0..n {
                            gg.data[j] += g.at(r, j) * xhat.at(r, j);
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    gb.add_assign(&g.sum_rows());
                }
            }
            Op::SoftmaxRows(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for r in 0..g.rows {
                        let (y, gr) = (out.row(r), g.row(r));
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        ga.row_mut(r)
                            .iter_mut()
                            .enumerate()
                            .for_each(|(k, x)| *x += y[k] * (gr[k] - dot));
                    }
                }
            }
            Op::AttnState { raw, prev } => {
                let rv = &self.nodes[raw.0].value;
                if let Some(gp) = self.slot(grads, *prev) {
                    for b in 0..g.rows {
                        gp.data[b * 3] += g.at(b, 0);
                    }
                }
                if let Some(gr) = self.slot(grads, *raw) {
                    for b in 0..g.rows {
                        gr.data[b * 2] += g.at(b, 1) * sigma_from_raw_grad(rv.at(b, 0));
                        gr.data[b * 2 + 1] += (g.at(b, 0) + g.at(b, 2)) * delta_from_raw_grad(rv.at(b, 1));
                    }
                }
            }
            Op::GaussRows { state, lens } => {
                let sv = &self.nodes[state.0].value;
                if let Some(gs) = self.slot(grads, *state) {
                    for (b, &len) in lens.iter().enumerate() {
                        let (dmu, dsigma) =
                            normalized_gaussian_grad(sv.at(b, 0), sv.at(b, 1), &out.row(b)[..len], &g.row(b)[..len]);
                        gs.data[b * 3] += dmu;
                        gs.data[b * 3 + 1] += dsigma;
                    }
                }
            }
            Op::PosEnc(state) => {
                let sv = &self.nodes[state.0].value;
                if let Some(gs) = self.slot(grads, *state) {
                    for b in 0..g.rows {
                        let d = positional_encoding_grad(sv.at(b, 0), g.cols);
                        gs.data[b * 3] += d.iter().zip(g.row(b)).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            Op::BatchedVecMat { alpha, table } => {
                let (av, tv) = (&self.nodes[alpha.0].value, &self.nodes[table.0].value);
                let (batch, j) = av.shape();
                if let Some(ga) = self.slot(grads, *alpha) {
                    for b in 0..batch {
                        let gr = g.row(b);
                        for k in 0..j {
                            ga.data[b * j + k] += gr.iter().zip(tv.row(b * j + k)).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if let Some(gt) = self.slot(grads, *table) {
                    for b in 0..batch {
                        let gr = g.row(b);
                        for k in 0..j {
                            let a = av.data[b * j + k];
                            if a != 0.0 {
                                gt.row_mut(b * j + k).iter_mut().zip(gr).for_each(|(x, y)| *x += a * y);
                            }
                        }
                    }
                }
            }
            Op::WordMix { alpha, table, entries } => {
                let (av, tv) = (&self.nodes[alpha.0].value, &self.nodes[table.0].value);
                if let Some(ga) = self.slot(grads, *alpha) {
                    for e in entries {
                        let dm: f64 = g.row(e.batch).iter().zip(tv.row(e.row)).map(|(x, y)| x * y).sum();
                        ga.row_mut(e.batch)[e.start..e.end].iter_mut().for_each(|x| *x += dm);
                    }
                }
                if let Some(gt) = self.slot(grads, *table) {
                    for e in entries {
                        let mass: f64 = av.row(e.batch)[e.start..e.end].iter().sum();
                        gt.row_mut(e.row)
                            .iter_mut()
                            .zip(g.row(e.batch))
                            .for_each(|(x, y)| *x += mass * y);
                    }
                }
            }
            Op::Upsample {
                ranges,
                durations,
                steps,
            } => {
                let rv = &self.nodes[ranges.0].value;
                if let Some(gr) = self.slot(grads, *ranges) {
                    for (b, d) in durations.iter().enumerate() {
                        let centers = upsample_centers(d);
                        let n = d.len();
                        for i in 0..*steps {
                            let row = &out.row(b * steps + i)[..n];
                            let grow = &g.row(b * steps + i)[..n];
                            let dot: f64 = row.iter().zip(grow).map(|(a, b)| a * b).sum();
                            let t = i as f64 + 0.5;
                            for k in 0..n {
                                let gl = row[k] * (grow[k] - dot);
                                let dist = t - centers[k];
                                let dur = d[k] as f64;
                                let r = rv.at(b, k);
                                gr.data[b * rv.cols + k] += gl * dist * dist / (r.powi(3) * dur * dur);
                            }
                        }
                    }
                }
            }
            Op::MaskedL1 {
                pred,
                target,
                mask,
                norm,
            } => {
                let s = g.scalar_value() / norm;
                let pv = &self.nodes[pred.0].value;
                if let Some(gp) = self.slot(grads, *pred) {
                    for k in 0..gp.data.len() {
                        let d = pv.data[k] - target.data[k];
                        let sign = if d > 0.0 {
                            1.0
                        } else if d < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        gp.data[k] += s * mask.data[k] * sign;
                    }
                }
            }
            Op::MaskedSq {
                pred,
                target,
                mask,
                norm,
            } => {
                let s = g.scalar_value() / norm;
                let pv = &self.nodes[pred.0].value;
                if let Some(gp) = self.slot(grads, *pred) {
                    for k in 0..gp.data.len() {
                        gp.data[k] += 2.0 * s * mask.data[k] * (pv.data[k] - target.data[k]);
                    }
                }
            }
            Op::KlRows { q, p, weights, norm } => {
                let s = g.scalar_value() / norm;
                let qv = &self.nodes[q.0].value;
                if let Some(gq) = self.slot(grads, *q) {
                    for (r, &w) in weights.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        for c in 0..qv.cols {
                            let pj = p.at(r, c);
                            if pj > 0.0 {
                                gq.data[r * qv.cols + c] -= s * w * pj / (qv.at(r, c) + LOG_EPS);
                            }
                        }
                    }
                }
            }
            Op::SoftCe {
                logits,
                target,
                weights,
                norm,
                probs,
            } => {
                let s = g.scalar_value() / norm;
                if let Some(gl) = self.slot(grads, *logits) {
                    for (r, &w) in weights.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let mass: f64 = target.row(r).iter().sum();
                        for c in 0..gl.cols {
                            gl.data[r * gl.cols + c] += s * w * (probs.at(r, c) * mass - target.at(r, c));
                        }
                    }
                }
            }
            Op::Emd2 {
                logits,
                target,
                weights,
                norm,
                probs,
            } => {
                let s = g.scalar_value() / norm;
                if let Some(gl) = self.slot(grads, *logits) {
                    for (r, &w) in weights.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let p = probs.row(r);
                        let gp = emd2_grad(p, target.row(r));
                        let dot: f64 = p.iter().zip(&gp).map(|(a, b)| a * b).sum();
                        for c in 0..gl.cols {
                            gl.data[r * gl.cols + c] += s * w * p[c] * (gp[c] - dot);
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_gru(&self, g: &Mat, xw: Var, h: Var, u: Var, bh: Var, cache: &Mat, grads: &mut [Option<Mat>]) {
        let hv = &self.nodes[h.0].value;
        let (batch, hd) = hv.shape();
        let mut dxw = Mat::zeros(batch, 3 * hd);
        let mut dhu = Mat::zeros(batch, 3 * hd);
        let mut dh = Mat::zeros(batch, hd);
        for b in 0..batch {
            let c = cache.row(b);
            for j in 0..hd {
                let (r, z, n, hn) = (c[j], c[hd + j], c[2 * hd + j], c[3 * hd + j]);
                let go = g.at(b, j);
                let dz = go * (hv.at(b, j) - n);
                let dn = go * (1.0 - z);
                dh.data[b * hd + j] = go * z;
                let dan = dn * (1.0 - n * n);
                let dar = dan * hn * r * (1.0 - r);
                let daz = dz * z * (1.0 - z);
                let xr = dxw.row_mut(b);
                xr[j] = dar;
                xr[hd + j] = daz;
                xr[2 * hd + j] = dan;
                let ur = dhu.row_mut(b);
                ur[j] = dar;
                ur[hd + j] = daz;
                ur[2 * hd + j] = dan * r;
            }
        }
        if let Some(gx) = self.slot(grads, xw) {
            gx.add_assign(&dxw);
        }
        if self.nodes[h.0].tracked {
            gemm(&dhu, false, &self.nodes[u.0].value, true, &mut dh, 1.0);
            self.slot(grads, h).expect("tracked").add_assign(&dh);
        }
        if let Some(gu) = self.slot(grads, u) {
            gemm(hv, true, &dhu, false, gu, 1.0);
        }
        if let Some(gb) = self.slot(grads, bh) {
            gb.add_assign(&dhu.sum_rows());
        }
    }

    fn backprop_lstm(&self, g: &Mat, xw: Var, state: Var, u: Var, cache: &Mat, grads: &mut [Option<Mat>]) {
        let sv = &self.nodes[state.0].value;
        let batch = sv.rows;
        let hd = sv.cols / 2;
        let mut da = Mat::zeros(batch, 4 * hd);
        let mut dc = Mat::zeros(batch, hd);
        for b in 0..batch {
            let cr = cache.row(b);
            for j in 0..hd {
                let (i, f, gg, o, tc) = (cr[j], cr[hd + j], cr[2 * hd + j], cr[3 * hd + j], cr[4 * hd + j]);
                let gh = g.at(b, j);
                let gc = g.at(b, hd + j) + gh * o * (1.0 - tc * tc);
                let d = da.row_mut(b);
                d[j] = gc * gg * i * (1.0 - i);
                d[hd + j] = gc * sv.at(b, hd + j) * f * (1.0 - f);
                d[2 * hd + j] = gc * i * (1.0 - gg * gg);
                d[3 * hd + j] = gh * tc * o * (1.0 - o);
                dc.data[b * hd + j] = gc * f;
            }
        }
        if let Some(gx) = self.slot(grads, xw) {
            gx.add_assign(&da);
        }
        if self.nodes[state.0].tracked {
            let mut dh = Mat::zeros(batch, hd);
            gemm(&da, false, &self.nodes[u.0].value, true, &mut dh, 0.0);
            let gs = self.slot(grads, state).expect("tracked");
            for b in 0..batch {
                let row = gs.row_mut(b);
                for j in 0..hd {
                    row[j] += dh.at(b, j);
                    row[hd + j] += dc.at(b, j);
                }
            }
        }
        if let Some(gu) = self.slot(grads, u) {
            let h = sv.slice_cols(0, hd);
            gemm(&h, true, &da, false, gu, 1.0);
        }
    }
}

fn upsample_row_logits(centers: &[f64], ranges: &[f64], durations: &[usize], frame: usize, out: &mut [f64]) {
    let t = frame as f64 + 0.5;
    for k in 0..centers.len() {
        let w = ranges[k] * durations[k] as f64;
        let d = t - centers[k];
        out[k] = -(d * d) / (2.0 * w * w);
    }
}

/// Calls `f(out_row, col, src_row, src_col)` for every in-bounds patch entry.
fn for_each_patch(geom: &Conv2dGeom, mut f: impl FnMut(usize, usize, usize, usize)) {
    let (to, fo) = (geom.t_out(), geom.f_out());
    for b in 0..geom.batch {
        for ot in 0..to {
            for of in 0..fo {
                let out_row = (b * to + ot) * fo + of;
                for qt in 0..geom.kt {
                    let st = (ot * geom.st + qt) as isize - geom.pt as isize;
                    if st < 0 || st as usize >= geom.t_in {
                        continue;
                    }
                    let src_row = b * geom.t_in + st as usize;
                    for qf in 0..geom.kf {
                        let sf = (of * geom.sf + qf) as isize - geom.pf as isize;
                        if sf < 0 || sf as usize >= geom.f_in {
                            continue;
                        }
                        for c in 0..geom.c_in {
                            let col = (qt * geom.kf + qf) * geom.c_in + c;
                            f(out_row, col, src_row, sf as usize * geom.c_in + c);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64) -> Mat {
        Mat::uniform(r, c, s, rng)
    }

    /// Compares analytic and central-difference gradients of
    /// `sum(f(inputs) * weights)` for every input entry.
    fn check(inputs: Vec<Mat>, f: impl Fn(&mut Graph, &[Var]) -> Var, tol: f64) {
        let store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let eval = |ins: &[Mat], weights: Option<&Mat>| -> (f64, Vec<Mat>, Mat) {
            let mut g = Graph::new(&store);
            let vars: Vec<Var> = ins.iter().map(|m| g.input(m.clone())).collect();
            let y = f(&mut g, &vars);
            let (r, c) = g.shape(y);
            let w = weights.cloned().unwrap_or_else(|| Mat::filled(r, c, 1.0));
            let wv = g.constant(w.clone());
            let p = g.mul(y, wv);
            let s = g.sum_all(p);
            let grads = g.grad_wrt(s, &vars);
            (g.value(s).scalar_value(), grads, w)
        };
        let (_, _, shape) = eval(&inputs, None);
        let weights = Mat::uniform(shape.rows, shape.cols, 1.0, &mut rng);
        let (_, analytic, _) = eval(&inputs, Some(&weights));
        let h = 1e-5;
        for (n, m) in inputs.iter().enumerate() {
            for k in 0..m.len() {
                let mut plus = inputs.clone();
                plus[n].data[k] += h;
                let mut minus = inputs.clone();
                minus[n].data[k] -= h;
                let fd = (eval(&plus, Some(&weights)).0 - eval(&minus, Some(&weights)).0) / (2.0 * h);
                let a = analytic[n].data[k];
                let err = (a - fd).abs() / (1.0 + fd.abs());
                assert!(err < tol, "input {n} entry {k}: analytic {a} vs fd {fd}");
            }
        }
    }

    #[test]
    fn basic_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_mat(&mut rng, 3, 4, 1.0);
        let b = rand_mat(&mut rng, 4, 2, 1.0);
        let c = rand_mat(&mut rng, 3, 4, 1.0);
        let bias = rand_mat(&mut rng, 1, 4, 1.0);
        check(vec![a.clone(), b.clone()], |g, v| g.matmul(v[0], v[1]), 1e-6);
        check(vec![a.clone(), c.clone()], |g, v| g.matmul_bt(v[0], v[1]), 1e-6);
        check(vec![a.clone(), bias], |g, v| g.add_bias(v[0], v[1]), 1e-6);
        check(vec![a.clone(), c.clone()], |g, v| {
            let s = g.sub(v[0], v[1]);
            let m = g.mul(s, v[1]);
            let x = g.add(m, v[0]);
            g.scale(x, 0.7)
        }, 1e-6);
        for u in [Unary::Sigmoid, Unary::Tanh, Unary::Softplus, Unary::Exp, Unary::Relu] {
            check(vec![a.clone()], move |g, v| g.unary(v[0], u), 1e-5);
        }
        check(vec![a.clone(), c.clone()], |g, v| {
            let x = g.concat_cols(&[v[0], v[1]]);
            let y = g.slice_cols(x, 2, 5);
            let z = g.gather(y, vec![Some(2), None, Some(0), Some(2)]);
            let r = g.reshape(z, 2, 10);
            g.softmax_rows(r)
        }, 1e-6);
        check(vec![a.clone(), c], |g, v| g.stack_steps(&[v[0], v[1]]), 1e-6);
        let gamma = rand_mat(&mut rng, 1, 4, 1.0);
        let beta = rand_mat(&mut rng, 1, 4, 1.0);
        check(vec![a, gamma, beta], |g, v| g.layer_norm(v[0], v[1], v[2]), 1e-5);
    }

    #[test]
    fn recurrent_cells_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xw = rand_mat(&mut rng, 2, 9, 1.0);
        let h = rand_mat(&mut rng, 2, 3, 1.0);
        let u = rand_mat(&mut rng, 3, 9, 1.0);
        let bh = rand_mat(&mut rng, 1, 9, 1.0);
        check(vec![xw, h, u, bh], |g, v| {
            let h1 = g.gru_cell(v[0], v[1], v[2], v[3]);
            g.gru_cell(v[0], h1, v[2], v[3])
        }, 1e-5);
        let xw = rand_mat(&mut rng, 2, 12, 1.0);
        let s = rand_mat(&mut rng, 2, 6, 1.0);
        let u = rand_mat(&mut rng, 3, 12, 1.0);
        check(vec![xw, s, u], |g, v| {
            let s1 = g.lstm_cell(v[0], v[1], v[2]);
            g.lstm_cell(v[0], s1, v[2])
        }, 1e-5);
    }

    #[test]
    fn convolutions_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_mat(&mut rng, 2 * 5, 3, 1.0);
        check(vec![x], |g, v| g.im2col_1d(v[0], 5, 3, 1), 1e-6);
        let geom = Conv2dGeom {
            batch: 2,
            t_in: 5,
            f_in: 4,
            c_in: 2,
            kt: 3,
            kf: 3,
            st: 2,
            sf: 2,
            pt: 1,
            pf: 1,
        };
        let x = rand_mat(&mut rng, 10, 8, 1.0);
        check(vec![x], move |g, v| g.im2col_2d(v[0], geom), 1e-6);
    }

    #[test]
    fn im2col_2d_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let geom = Conv2dGeom {
            batch: 1,
            t_in: 6,
            f_in: 5,
            c_in: 1,
            kt: 3,
            kf: 3,
            st: 2,
            sf: 2,
            pt: 1,
            pf: 1,
        };
        let x = rand_mat(&mut rng, 6, 5, 1.0);
        let k = rand_mat(&mut rng, 9, 1, 1.0);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let xv = g.constant(x.clone());
        let kv = g.constant(k.clone());
        let cols = g.im2col_2d(xv, geom);
        let y = g.matmul(cols, kv);
        let (to, fo) = (geom.t_out(), geom.f_out());
        assert_eq!((to, fo), (3, 3));
        for ot in 0..to {
            for of in 0..fo {
                let mut direct = 0.0;
                for qt in 0..3 {
                    for qf in 0..3 {
                        let (t, f) = ((ot * 2 + qt) as isize - 1, (of * 2 + qf) as isize - 1);
                        if (0..6).contains(&t) && (0..5).contains(&f) {
                            direct += k.data[qt * 3 + qf] * x.at(t as usize, f as usize);
                        }
                    }
                }
                assert!((g.value(y).data[ot * fo + of] - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let raw = rand_mat(&mut rng, 2, 2, 1.5);
        let mut prev = Mat::zeros(2, 3);
        prev.data[0] = 1.3;
        prev.data[3] = 0.2;
        check(vec![raw.clone(), prev.clone()], |g, v| {
            let s = g.attention_state(v[0], v[1]);
            g.gaussian_rows(s, vec![6, 4], 6)
        }, 1e-5);
        check(vec![raw, prev], |g, v| {
            let s = g.attention_state(v[0], v[1]);
            g.positional(s, 8)
        }, 1e-4);
        let alpha = rand_mat(&mut rng, 2, 3, 1.0);
        let table = rand_mat(&mut rng, 6, 4, 1.0);
        check(vec![alpha.clone(), table], |g, v| g.batched_vec_mat(v[0], v[1]), 1e-6);
        let words = rand_mat(&mut rng, 3, 4, 1.0);
        let entries = vec![
            MixEntry { batch: 0, row: 0, start: 0, end: 2 },
            MixEntry { batch: 0, row: 1, start: 2, end: 3 },
            MixEntry { batch: 1, row: 2, start: 1, end: 3 },
        ];
        check(vec![alpha, words], move |g, v| g.word_mix(v[0], v[1], entries.clone()), 1e-6);
        let ranges = Mat::from_vec(2, 3, vec![0.2, 0.3, 0.25, 0.15, 0.28, 0.0]);
        check(vec![ranges], |g, v| g.upsample(v[0], vec![vec![3, 2, 4], vec![5, 2]], 9), 1e-5);
    }

    #[test]
    fn upsample_op_matches_reference() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let r = g.constant(Mat::from_vec(1, 3, vec![0.2, 0.3, 0.25]));
        let y = g.upsample(r, vec![vec![3, 2, 4]], 9);
        let reference = crate::align::upsample_frames(&[3, 2, 4], &[0.2, 0.3, 0.25], 9).unwrap();
        assert_eq!(g.value(y).data, reference.weights());
    }

    #[test]
    fn losses_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pred = rand_mat(&mut rng, 3, 4, 1.0);
        let target = rand_mat(&mut rng, 3, 4, 1.0);
        let mut mask = Mat::filled(3, 4, 1.0);
        mask.row_mut(2).iter_mut().for_each(|x| *x = 0.0);
        let (t1, m1) = (target.clone(), mask.clone());
        check(vec![pred.clone()], move |g, v| g.masked_l1(v[0], t1.clone(), m1.clone()), 1e-6);
        check(vec![pred.clone()], move |g, v| g.masked_sq(v[0], target.clone(), mask.clone()), 1e-6);
        let p = Mat::from_vec(2, 3, vec![0.2, 0.5, 0.3, 0.0, 0.9, 0.1]);
        let q = Mat::from_vec(2, 3, vec![0.3, 0.3, 0.4, 0.1, 0.6, 0.3]);
        check(vec![q], move |g, v| g.kl_rows(v[0], p.clone(), vec![1.0, 0.5]), 1e-6);
        let logits = rand_mat(&mut rng, 3, 5, 2.0);
        let mut soft = Mat::zeros(3, 5);
        for r in 0..3 {
            let w: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..1.0)).collect();
            let s: f64 = w.iter().sum();
            soft.row_mut(r).iter_mut().zip(&w).for_each(|(x, y)| *x = y / s);
        }
        let s2 = soft.clone();
        check(vec![logits.clone()], move |g, v| g.soft_cross_entropy(v[0], soft.clone(), vec![1.0, 0.0, 2.0]), 1e-6);
        check(vec![logits], move |g, v| g.emd2_softmax(v[0], s2.clone(), vec![1.0, 1.0, 0.5]), 1e-6);
    }

    #[test]
    fn detached_and_frozen_nodes_get_no_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", Mat::filled(1, 2, 0.5));
        let b = store.add("frozen/b", Mat::filled(1, 2, 0.5));
        store.freeze_prefix("frozen/");
        let mut g = Graph::new(&store);
        let av = g.param(a);
        let bv = g.param(b);
        let d = g.detach(av);
        let x = g.mul(d, bv);
        let y = g.add(x, av);
        let s = g.sum_all(y);
        let grads = g.backward(s);
        assert_eq!(grads.get(a).unwrap().data, vec![1.0, 1.0]);
        assert!(grads.get(b).is_none());
    }
}
