use rand::Rng;

use super::graph::{Conv2dGeom, Graph, Var};
use super::mat::Mat;
use super::params::{ParamId, ParamStore};

/// Affine map `x W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool, rng: &mut R) -> Self {
        let w = store.add(format!("{name}/w"), Mat::glorot(in_dim, out_dim, rng));
        let b = bias.then(|| store.add(format!("{name}/b"), Mat::zeros(1, out_dim)));
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_bias(y, b)
            }
            None => y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, count: usize, dim: usize, scale: f64, rng: &mut R) -> Self {
        let table = store.add(format!("{name}/table"), Mat::uniform(count, dim, scale, rng));
        Self { table, dim }
    }

    /// One row per id; `None` yields a zero row.
    pub fn forward(&self, g: &mut Graph, ids: &[Option<usize>]) -> Var {
        let t = g.param(self.table);
        g.gather(t, ids.to_vec())
    }
}

/// Row indices selecting step `t` of every utterance in a `(batch * steps)` sequence.
pub fn step_rows(batch: usize, steps: usize, t: usize) -> Vec<Option<usize>> {
    (0..batch).map(|b| Some(b * steps + t)).collect()
}

/// Gather indices that reverse each utterance's first `lens[b]` steps;
/// padded steps map to zero rows. Applying it twice restores valid steps.
pub fn reverse_rows(lens: &[usize], steps: usize) -> Vec<Option<usize>> {
    let mut idx = Vec::with_capacity(lens.len() * steps);
    for (b, &len) in lens.iter().enumerate() {
        for t in 0..steps {
            idx.push((t < len).then(|| b * steps + len - 1 - t));
        }
    }
    idx
}

/// Row index of each utterance's last valid step.
pub fn last_rows(lens: &[usize], steps: usize) -> Vec<Option<usize>> {
    lens.iter()
        .enumerate()
        .map(|(b, &len)| Some(b * steps + len.max(1) - 1))
        .collect()
}

#[derive(Debug, Clone)]
pub struct Gru {
    pub input: Linear,
    pub u: ParamId,
    pub bh: ParamId,
    pub hidden: usize,
}

impl Gru {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let input = Linear::new(store, &format!("{name}/in"), in_dim, 3 * hidden, true, rng);
        let u = store.add(format!("{name}/u"), Mat::glorot(hidden, 3 * hidden, rng));
        let bh = store.add(format!("{name}/bh"), Mat::zeros(1, 3 * hidden));
        Self { input, u, bh, hidden }
    }

    /// One step given the already-projected input `xw` (`[batch x 3H]`).
    pub fn step(&self, g: &mut Graph, xw: Var, h: Var) -> Var {
        let u = g.param(self.u);
        let bh = g.param(self.bh);
        g.gru_cell(xw, h, u, bh)
    }

    /// Runs over a `(batch * steps) x in` sequence from a zero state; returns
    /// the per-step states as a `(batch * steps) x H` sequence.
    pub fn run(&self, g: &mut Graph, x: Var, batch: usize, steps: usize) -> Var {
        let xw = self.input.forward(g, x);
        let mut h = g.constant(Mat::zeros(batch, self.hidden));
        let mut outs = Vec::with_capacity(steps);
        for t in 0..steps {
            let xt = g.gather(xw, step_rows(batch, steps, t));
            h = self.step(g, xt, h);
            outs.push(h);
        }
        g.stack_steps(&outs)
    }
}

/// Two GRUs reading the valid part of each utterance in opposite directions.
#[derive(Debug, Clone)]
pub struct BiGru {
    pub fwd: Gru,
    pub bwd: Gru,
}

impl BiGru {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            fwd: Gru::new(store, &format!("{name}/fwd"), in_dim, hidden, rng),
            bwd: Gru::new(store, &format!("{name}/bwd"), in_dim, hidden, rng),
        }
    }

    pub fn out_dim(&self) -> usize {
        2 * self.fwd.hidden
    }

    /// `(batch * steps) x 2H`; rows past `lens[b]` hold forward-only garbage
    /// and must be masked by the caller.
    pub fn run(&self, g: &mut Graph, x: Var, lens: &[usize], steps: usize) -> Var {
        let batch = lens.len();
        let f = self.fwd.run(g, x, batch, steps);
        let rev = reverse_rows(lens, steps);
        let xr = g.gather(x, rev.clone());
        let br = self.bwd.run(g, xr, batch, steps);
        let b = g.gather(br, rev);
        g.concat_cols(&[f, b])
    }
}

#[derive(Debug, Clone)]
pub struct Lstm {
    pub input: Linear,
    pub u: ParamId,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let input = Linear::new(store, &format!("{name}/in"), in_dim, 4 * hidden, true, rng);
        // forget-gate bias starts at one
        if let Some(b) = input.b {
            store.get_mut(b).data[hidden..2 * hidden].iter_mut().for_each(|x| *x = 1.0);
        }
        let u = store.add(format!("{name}/u"), Mat::glorot(hidden, 4 * hidden, rng));
        Self { input, u, hidden }
    }

    /// Per-step hidden outputs `(batch * steps) x H` from a zero state.
    pub fn run(&self, g: &mut Graph, x: Var, batch: usize, steps: usize) -> Var {
        let xw = self.input.forward(g, x);
        let u = g.param(self.u);
        let mut s = g.constant(Mat::zeros(batch, 2 * self.hidden));
        let mut outs = Vec::with_capacity(steps);
        for t in 0..steps {
            let xt = g.gather(xw, step_rows(batch, steps, t));
            s = g.lstm_cell(xt, s, u);
            outs.push(g.slice_cols(s, 0, self.hidden));
        }
        g.stack_steps(&outs)
    }
}

#[derive(Debug, Clone)]
pub struct BiLstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
}

impl BiLstm {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            fwd: Lstm::new(store, &format!("{name}/fwd"), in_dim, hidden, rng),
            bwd: Lstm::new(store, &format!("{name}/bwd"), in_dim, hidden, rng),
        }
    }

    pub fn out_dim(&self) -> usize {
        2 * self.fwd.hidden
    }

    pub fn run(&self, g: &mut Graph, x: Var, lens: &[usize], steps: usize) -> Var {
        let batch = lens.len();
        let f = self.fwd.run(g, x, batch, steps);
        let rev = reverse_rows(lens, steps);
        let xr = g.gather(x, rev.clone());
        let br = self.bwd.run(g, xr, batch, steps);
        let b = g.gather(br, rev);
        g.concat_cols(&[f, b])
    }
}

/// Same-length 1-D convolution over time (odd kernel).
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub proj: Linear,
    pub kernel: usize,
}

impl Conv1d {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, kernel: usize, rng: &mut R) -> Self {
        Self {
            proj: Linear::new(store, name, kernel * in_ch, out_ch, true, rng),
            kernel,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, steps: usize) -> Var {
        let cols = g.im2col_1d(x, steps, self.kernel, self.kernel / 2);
        self.proj.forward(g, cols)
    }
}

/// 2-D convolution over `(time, freq, channel)` maps stored as
/// `(batch * time) x (freq * channel)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub proj: Linear,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
}

impl Conv2d {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        rng: &mut R,
    ) -> Self {
        Self {
            proj: Linear::new(store, name, kernel.0 * kernel.1 * in_ch, out_ch, true, rng),
            in_ch,
            out_ch,
            kernel,
            stride,
        }
    }

    pub fn geom(&self, batch: usize, t_in: usize, f_in: usize) -> Conv2dGeom {
        Conv2dGeom {
            batch,
            t_in,
            f_in,
            c_in: self.in_ch,
            kt: self.kernel.0,
            kf: self.kernel.1,
            st: self.stride.0,
            sf: self.stride.1,
            pt: self.kernel.0 / 2,
            pf: self.kernel.1 / 2,
        }
    }

    /// Returns the output map and its `(time, freq)` extent.
    pub fn forward(&self, g: &mut Graph, x: Var, batch: usize, t_in: usize, f_in: usize) -> (Var, usize, usize) {
        let geom = self.geom(batch, t_in, f_in);
        let (to, fo) = (geom.t_out(), geom.f_out());
        let cols = g.im2col_2d(x, geom);
        let y = self.proj.forward(g, cols);
        (g.reshape(y, batch * to, fo * self.out_ch), to, fo)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}/gamma"), Mat::filled(1, dim, 1.0)),
            beta: store.add(format!("{name}/beta"), Mat::zeros(1, dim)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let (ga, be) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, ga, be)
    }
}

/// `(batch * steps) x 1` validity mask broadcast to `cols` columns.
pub fn sequence_mask(lens: &[usize], steps: usize, cols: usize) -> Mat {
    let mut m = Mat::zeros(lens.len() * steps, cols);
    for (b, &len) in lens.iter().enumerate() {
        for t in 0..len.min(steps) {
            m.row_mut(b * steps + t).iter_mut().for_each(|x| *x = 1.0);
        }
    }
    m
}
