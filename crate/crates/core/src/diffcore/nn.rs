use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DiffError, Gradients, Tape, Tensor, Var};

/// Name, shape and position of one tensor inside a [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Flat registry of every learnable tensor, addressed by [`ParamId`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    specs: Vec<ParamSpec>,
    data: Vec<f64>,
}

/// Parameters of a store recorded as leaves on one tape.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuilds a store from checkpointed specs and values.
    pub fn from_parts(specs: Vec<ParamSpec>, data: Vec<f64>) -> Result<Self, DiffError> {
        let mut expect = 0;
        for s in &specs {
            if s.offset != expect {
                return Err(DiffError::Shape(format!("param {} offset {} != {expect}", s.name, s.offset)));
            }
            expect += s.len();
        }
        if expect != data.len() {
            return Err(DiffError::Shape(format!("param data {} != {expect}", data.len())));
        }
        Ok(Self { specs, data })
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.specs.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    pub fn values(&self, id: ParamId) -> &[f64] {
        let s = &self.specs[id.0];
        &self.data[s.offset..s.offset + s.len()]
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        let s = &self.specs[id.0];
        let (a, b) = (s.offset, s.offset + s.len());
        &mut self.data[a..b]
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> ParamId {
        let spec = ParamSpec { name: name.into(), shape, offset: self.data.len() };
        assert_eq!(spec.len(), values.len(), "param {} size", spec.name);
        self.data.extend(values);
        self.specs.push(spec);
        ParamId(self.specs.len() - 1)
    }

    /// Uniform in `[-bound, bound]`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        bound: f64,
        rng: &mut R,
    ) -> ParamId {
        let n = shape.iter().product();
        let values = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.add(name, shape, values)
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<Bound, DiffError> {
        let vars = self
            .specs
            .iter()
            .map(|s| {
                let t = Tensor::new(s.shape.clone(), self.data[s.offset..s.offset + s.len()].to_vec())?;
                tape.param(t)
            })
            .collect::<Result<_, _>>()?;
        Ok(Bound { vars })
    }

    /// Flattens the per-parameter gradients into the store's layout.
    pub fn gather_grads(&self, bound: &Bound, grads: &Gradients) -> Vec<f64> {
        let mut out = vec![0.0; self.data.len()];
        for (s, &v) in self.specs.iter().zip(&bound.vars) {
            if let Some(g) = grads.wrt(v) {
                out[s.offset..s.offset + s.len()].copy_from_slice(g);
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
    Softplus,
    Sigmoid,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Result<Var, DiffError> {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Identity => Ok(x),
            Activation::Softplus => tape.softplus(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

/// Affine map `x W + b` followed by an activation. `W` is `[in, out]`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
    pub input: usize,
    pub output: usize,
}

impl Dense {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = store.add_uniform(format!("{name}.weight"), vec![input, output], bound, rng);
        let bias = store.add_uniform(format!("{name}.bias"), vec![output], bound, rng);
        Self { weight, bias, activation, input, output }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var, DiffError> {
        if tape.value(x).cols() != self.input {
            return Err(DiffError::Shape(format!(
                "dense expects {} inputs, got {:?}",
                self.input,
                tape.value(x).shape()
            )));
        }
        let h = tape.matmul(x, bound.var(self.weight))?;
        let h = tape.add_row(h, bound.var(self.bias))?;
        self.activation.apply(tape, h)
    }
}

/// Feed-forward stack of [`Dense`] layers.
#[derive(Clone, Debug)]
pub struct DenseStack {
    pub layers: Vec<Dense>,
}

impl DenseStack {
    /// `hidden` layers of width `width` with `hidden_act`, then an output layer with `out_act`.
    #[allow(clippy::too_many_arguments)]
    pub fn mlp<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        width: usize,
        hidden: usize,
        output: usize,
        hidden_act: Activation,
        out_act: Activation,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden + 1);
        let mut prev = input;
        for i in 0..hidden {
            layers.push(Dense::new(store, &format!("{name}.{i}"), prev, width, hidden_act, rng));
            prev = width;
        }
        layers.push(Dense::new(store, &format!("{name}.{hidden}"), prev, output, out_act, rng));
        Self { layers }
    }

    pub fn input(&self) -> usize {
        self.layers[0].input
    }

    pub fn output(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output)
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var, DiffError> {
        self.layers.iter().try_fold(x, |h, layer| layer.forward(tape, bound, h))
    }
}

/// Broadcasts a per-row 0/1 mask to `[rows, width]`.
fn row_mask(tape: &mut Tape, mask: &[f64], width: usize) -> Result<Var, DiffError> {
    let data = mask.iter().flat_map(|&m| std::iter::repeat_n(m, width)).collect();
    tape.constant(Tensor::matrix(mask.len(), width, data))
}

/// Gated recurrent unit with reset gate applied to the hidden projection.
#[derive(Clone, Debug)]
pub struct GruCell {
    wx: ParamId,
    wh: ParamId,
    bx: ParamId,
    bh: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            wx: store.add_uniform(format!("{name}.wx"), vec![input, 3 * hidden], bound, rng),
            wh: store.add_uniform(format!("{name}.wh"), vec![hidden, 3 * hidden], bound, rng),
            bx: store.add_uniform(format!("{name}.bx"), vec![3 * hidden], bound, rng),
            bh: store.add_uniform(format!("{name}.bh"), vec![3 * hidden], bound, rng),
            input,
            hidden,
        }
    }

    pub fn step(&self, tape: &mut Tape, bound: &Bound, x: Var, h: Var) -> Result<Var, DiffError> {
        let hs = self.hidden;
        let gx = tape.matmul(x, bound.var(self.wx))?;
        let gx = tape.add_row(gx, bound.var(self.bx))?;
        let gh = tape.matmul(h, bound.var(self.wh))?;
        let gh = tape.add_row(gh, bound.var(self.bh))?;
        let (xr, hr) = (tape.slice_cols(gx, 0, hs)?, tape.slice_cols(gh, 0, hs)?);
        let r = tape.add(xr, hr)?;
        let r = tape.sigmoid(r)?;
        let (xz, hz) = (tape.slice_cols(gx, hs, 2 * hs)?, tape.slice_cols(gh, hs, 2 * hs)?);
        let z = tape.add(xz, hz)?;
        let z = tape.sigmoid(z)?;
        let (xn, hn) = (tape.slice_cols(gx, 2 * hs, 3 * hs)?, tape.slice_cols(gh, 2 * hs, 3 * hs)?);
        let rn = tape.mul(r, hn)?;
        let n = tape.add(xn, rn)?;
        let n = tape.tanh(n)?;
        let d = tape.sub(h, n)?;
        let zd = tape.mul(z, d)?;
        tape.add(n, zd)
    }

    /// Step that keeps `h` bit-for-bit wherever the row mask is 0.
    pub fn masked_step(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        h: Var,
        mask: &[f64],
    ) -> Result<Var, DiffError> {
        if mask.iter().all(|&m| m == 0.0) {
            return Ok(h);
        }
        let hn = self.step(tape, bound, x, h)?;
        if mask.iter().all(|&m| m == 1.0) {
            return Ok(hn);
        }
        let m = row_mask(tape, mask, self.hidden)?;
        let d = tape.sub(hn, h)?;
        let md = tape.mul(m, d)?;
        tape.add(h, md)
    }
}

/// Stacked GRU layers; the top layer's state is the stack's output.
#[derive(Clone, Debug)]
pub struct GruStack {
    pub cells: Vec<GruCell>,
}

impl GruStack {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        layers: usize,
        rng: &mut R,
    ) -> Self {
        let cells = (0..layers.max(1))
            .map(|l| GruCell::new(store, &format!("{name}.{l}"), if l == 0 { input } else { hidden }, hidden, rng))
            .collect();
        Self { cells }
    }

    pub fn hidden(&self) -> usize {
        self.cells[0].hidden
    }

    pub fn zero_state(&self, tape: &mut Tape, rows: usize) -> Result<Vec<Var>, DiffError> {
        self.cells
            .iter()
            .map(|c| tape.constant(Tensor::zeros(vec![rows, c.hidden])))
            .collect()
    }

    pub fn masked_step(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        state: &mut [Var],
        mask: &[f64],
    ) -> Result<Var, DiffError> {
        let mut inp = x;
        for (cell, h) in self.cells.iter().zip(state.iter_mut()) {
            *h = cell.masked_step(tape, bound, inp, *h, mask)?;
            inp = *h;
        }
        Ok(inp)
    }

    /// Runs the stack over `inputs` in order; returns the top hidden state after each step.
    ///
    /// Rows whose mask entry is 0 at a step keep their previous state and
    /// never see that step's input.
    pub fn scan(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        inputs: &[Var],
        masks: &[Vec<f64>],
    ) -> Result<Vec<Var>, DiffError> {
        let first = inputs.first().ok_or(DiffError::EmptySequence)?;
        let rows = tape.value(*first).rows();
        let mut state = self.zero_state(tape, rows)?;
        inputs
            .iter()
            .zip(masks)
            .map(|(&x, m)| self.masked_step(tape, bound, x, &mut state, m))
            .collect()
    }
}

/// Long short-term memory cell; gate order input, forget, cell, output.
#[derive(Clone, Debug)]
pub struct LstmCell {
    wx: ParamId,
    wh: ParamId,
    b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            wx: store.add_uniform(format!("{name}.wx"), vec![input, 4 * hidden], bound, rng),
            wh: store.add_uniform(format!("{name}.wh"), vec![hidden, 4 * hidden], bound, rng),
            b: store.add_uniform(format!("{name}.b"), vec![4 * hidden], bound, rng),
            input,
            hidden,
        }
    }

    /// One update; returns `(h, c)`.
    pub fn step(&self, tape: &mut Tape, bound: &Bound, x: Var, h: Var, c: Var) -> Result<(Var, Var), DiffError> {
        let hs = self.hidden;
        let gx = tape.matmul(x, bound.var(self.wx))?;
        let gh = tape.matmul(h, bound.var(self.wh))?;
        let g = tape.add(gx, gh)?;
        let g = tape.add_row(g, bound.var(self.b))?;
        let i = tape.slice_cols(g, 0, hs)?;
        let i = tape.sigmoid(i)?;
        let f = tape.slice_cols(g, hs, 2 * hs)?;
        let f = tape.sigmoid(f)?;
        let gg = tape.slice_cols(g, 2 * hs, 3 * hs)?;
        let gg = tape.tanh(gg)?;
        let o = tape.slice_cols(g, 3 * hs, 4 * hs)?;
        let o = tape.sigmoid(o)?;
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, gg)?;
        let c2 = tape.add(fc, ig)?;
        let tc = tape.tanh(c2)?;
        let h2 = tape.mul(o, tc)?;
        Ok((h2, c2))
    }
}
