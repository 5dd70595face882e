use serde::{Deserialize, Serialize};

use crate::cohortgen::PatientRecord;
use crate::encoder::build_input;
use crate::error::Result;
use crate::numkit::{sigmoid_scalar, ParamId, ParamStore, Rng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Gru,
    Lstm,
}

impl CellKind {
    fn gates(self) -> usize {
        match self {
            CellKind::Gru => 3,
            CellKind::Lstm => 4,
        }
    }
}

/// GRU weights with gates packed as `[reset | update | candidate]`.
#[derive(Clone, Copy, Debug)]
pub struct GruCell {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b_x: ParamId,
    pub b_h: ParamId,
}

/// LSTM weights with gates packed as `[input | forget | cell | output]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmCell {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
enum Cell {
    Gru(GruCell),
    Lstm(LstmCell),
}

enum BoundCell {
    Gru { w_x: Var, w_h: Var, b_x: Var, b_h: Var },
    Lstm { w_x: Var, w_h: Var, b: Var },
}

fn normal(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| std * rng.normal()).collect()).expect("positive extents")
}

impl Cell {
    fn register(kind: CellKind, prefix: &str, d_in: usize, h: usize, store: &mut ParamStore, rng: &mut Rng) -> Self {
        let g = kind.gates() * h;
        let std = 1.0 / (h as f64).sqrt();
        let w_x = store.add(&format!("{prefix}.w_x"), normal(&[d_in, g], std, rng));
        let w_h = store.add(&format!("{prefix}.w_h"), normal(&[h, g], std, rng));
        match kind {
            CellKind::Gru => Cell::Gru(GruCell {
                w_x,
                w_h,
                b_x: store.add(&format!("{prefix}.b_x"), Tensor::zeros(&[g])),
                b_h: store.add(&format!("{prefix}.b_h"), Tensor::zeros(&[g])),
            }),
            CellKind::Lstm => Cell::Lstm(LstmCell {
                w_x,
                w_h,
                b: store.add(&format!("{prefix}.b"), Tensor::zeros(&[g])),
            }),
        }
    }

    fn bind(&self, tape: &mut Tape, store: &ParamStore) -> BoundCell {
        let mut p = |id| tape.param(store, id);
        match *self {
            Cell::Gru(c) => BoundCell::Gru {
                w_x: p(c.w_x),
                w_h: p(c.w_h),
                b_x: p(c.b_x),
                b_h: p(c.b_h),
            },
            Cell::Lstm(c) => BoundCell::Lstm {
                w_x: p(c.w_x),
                w_h: p(c.w_h),
                b: p(c.b),
            },
        }
    }
}

impl BoundCell {
    /// Input projections for every position at once, `[L, gates * h]`.
    fn project(&self, tape: &mut Tape, xs: Var) -> Result<Var> {
        let (w, b) = match *self {
            BoundCell::Gru { w_x, b_x, .. } => (w_x, b_x),
            BoundCell::Lstm { w_x, b, .. } => (w_x, b),
        };
        let g = tape.matmul(xs, w)?;
        tape.add_row(g, b)
    }

    /// One step from a precomputed input projection `gx` (`[1, gates * h]`).
    fn step(&self, tape: &mut Tape, gx: Var, h: Var, c: Option<Var>, hd: usize) -> Result<(Var, Option<Var>)> {
        match *self {
            BoundCell::Gru { w_h, b_h, .. } => {
                let gh = tape.matmul(h, w_h)?;
                let gh = tape.add_row(gh, b_h)?;
                let part = |tape: &mut Tape, v: Var, k: usize| tape.slice_cols(v, k * hd, hd);
                let (xr, hr) = (part(tape, gx, 0)?, part(tape, gh, 0)?);
                let r = tape.add(xr, hr)?;
                let r = tape.sigmoid(r);
                let (xz, hz) = (part(tape, gx, 1)?, part(tape, gh, 1)?);
                let z = tape.add(xz, hz)?;
                let z = tape.sigmoid(z);
                let (xn, hn) = (part(tape, gx, 2)?, part(tape, gh, 2)?);
                let rn = tape.mul(r, hn)?;
                let n = tape.add(xn, rn)?;
                let n = tape.tanh(n);
                // h' = (1 - z) * n + z * h = n + z * (h - n)
                let diff = tape.sub(h, n)?;
                let zd = tape.mul(z, diff)?;
                Ok((tape.add(n, zd)?, None))
            }
            BoundCell::Lstm { w_h, .. } => {
                let gh = tape.matmul(h, w_h)?;
                let g = tape.add(gx, gh)?;
                let i = tape.slice_cols(g, 0, hd)?;
                let i = tape.sigmoid(i);
                let f = tape.slice_cols(g, hd, hd)?;
                let f = tape.sigmoid(f);
                let cand = tape.slice_cols(g, 2 * hd, hd)?;
                let cand = tape.tanh(cand);
                let o = tape.slice_cols(g, 3 * hd, hd)?;
                let o = tape.sigmoid(o);
                let c = c.expect("lstm carries a cell state");
                let fc = tape.mul(f, c)?;
                let ig = tape.mul(i, cand)?;
                let c2 = tape.add(fc, ig)?;
                let tc = tape.tanh(c2);
                Ok((tape.mul(o, tc)?, Some(c2)))
            }
        }
    }

    fn run(&self, tape: &mut Tape, xs: Var, order: &[usize], hd: usize) -> Result<Var> {
        let gx = self.project(tape, xs)?;
        let mut h = tape.constant(Tensor::zeros(&[1, hd]));
        let mut c = matches!(self, BoundCell::Lstm { .. }).then(|| tape.constant(Tensor::zeros(&[1, hd])));
        for &t in order {
            let gxt = tape.gather(gx, &[t])?;
            let (h2, c2) = self.step(tape, gxt, h, c, hd)?;
            h = h2;
            c = c2;
        }
        Ok(h)
    }
}

fn single_step(cell: Cell, store: &ParamStore, x: &Tensor, h: &Tensor, c: Option<&Tensor>) -> Result<(Tensor, Option<Tensor>)> {
    let mut tape = Tape::new();
    let bound = cell.bind(&mut tape, store);
    let hd = h.len();
    let xs = tape.constant(x.clone().reshape(vec![1, x.len()])?);
    let gx = bound.project(&mut tape, xs)?;
    let hv = tape.constant(h.clone().reshape(vec![1, hd])?);
    let cv = c.map(|c| tape.constant(c.clone()));
    let (h2, c2) = bound.step(&mut tape, gx, hv, cv, hd)?;
    Ok((tape.value(h2).clone(), c2.map(|c| tape.value(c).clone())))
}

/// One GRU update `h' = (1 - z) * n + z * h`.
pub fn gru_cell(x: &Tensor, h: &Tensor, cell: &GruCell, store: &ParamStore) -> Result<Tensor> {
    Ok(single_step(Cell::Gru(*cell), store, x, h, None)?.0)
}

/// One LSTM update, returning `(h', c')`.
pub fn lstm_cell(x: &Tensor, h: &Tensor, c: &Tensor, cell: &LstmCell, store: &ParamStore) -> Result<(Tensor, Tensor)> {
    let c = c.clone().reshape(vec![1, c.len()])?;
    let (h2, c2) = single_step(Cell::Lstm(*cell), store, x, h, Some(&c))?;
    Ok((h2, c2.expect("lstm returns a cell state")))
}

/// Embedding, one or two recurrent cells, and a logistic classifier on the
/// final hidden state(s).
#[derive(Clone, Debug)]
pub struct RnnModel {
    pub kind: CellKind,
    pub bidirectional: bool,
    pub hidden: usize,
    pub max_len: usize,
    pub store: ParamStore,
    embedding: ParamId,
    forward: Cell,
    backward: Option<Cell>,
    w: ParamId,
    b: ParamId,
}

/// Recorded parameters of an `RnnModel`.
pub struct BoundRnn {
    embedding: Var,
    forward: BoundCell,
    backward: Option<BoundCell>,
    w: Var,
    b: Var,
}

impl RnnModel {
    pub fn new(kind: CellKind, bidirectional: bool, vocab_size: usize, hidden: usize, max_len: usize, rng: &mut Rng) -> Self {
        let mut store = ParamStore::new();
        let embedding = store.add("rnn.embedding", normal(&[vocab_size, hidden], 1.0 / (hidden as f64).sqrt(), rng));
        let forward = Cell::register(kind, "rnn.forward", hidden, hidden, &mut store, rng);
        let backward = bidirectional.then(|| Cell::register(kind, "rnn.backward", hidden, hidden, &mut store, rng));
        let width = if bidirectional { 2 * hidden } else { hidden };
        let w = store.add("rnn.classifier.w", normal(&[width], 1.0 / (width as f64).sqrt(), rng));
        let b = store.add("rnn.classifier.b", Tensor::scalar(0.0));
        RnnModel {
            kind,
            bidirectional,
            hidden,
            max_len,
            store,
            embedding,
            forward,
            backward,
            w,
            b,
        }
    }

    /// Same layout with different values, e.g. perturbed copies.
    pub fn with_store(&self, store: ParamStore) -> Self {
        RnnModel { store, ..self.clone() }
    }

    pub fn forward_cell(&self) -> (Option<GruCell>, Option<LstmCell>) {
        match self.forward {
            Cell::Gru(c) => (Some(c), None),
            Cell::Lstm(c) => (None, Some(c)),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundRnn {
        BoundRnn {
            embedding: tape.param(&self.store, self.embedding),
            forward: self.forward.bind(tape, &self.store),
            backward: self.backward.map(|c| c.bind(tape, &self.store)),
            w: tape.param(&self.store, self.w),
            b: tape.param(&self.store, self.b),
        }
    }

    /// Final forward state and, when bidirectional, final backward state.
    pub fn states(&self, tape: &mut Tape, bound: &BoundRnn, tokens: &[usize]) -> Result<(Var, Option<Var>)> {
        let xs = tape.gather(bound.embedding, tokens)?;
        let order: Vec<usize> = (0..tokens.len()).collect();
        let fwd = bound.forward.run(tape, xs, &order, self.hidden)?;
        let bwd = match &bound.backward {
            Some(cell) => {
                let rev: Vec<usize> = order.iter().rev().copied().collect();
                Some(cell.run(tape, xs, &rev, self.hidden)?)
            }
            None => None,
        };
        Ok((fwd, bwd))
    }

    pub fn tokens(&self, patient: &PatientRecord) -> Result<Vec<usize>> {
        Ok(build_input(patient, self.max_len, false)?.token_ids)
    }

    pub fn logit(&self, tape: &mut Tape, bound: &BoundRnn, patient: &PatientRecord) -> Result<Var> {
        let tokens = self.tokens(patient)?;
        let (f, b) = self.states(tape, bound, &tokens)?;
        let feat = match b {
            Some(b) => tape.concat_cols(&[f, b])?,
            None => f,
        };
        let z = tape.matmul_bt(feat, bound.w)?;
        tape.add(z, bound.b)
    }

    pub fn classify(&self, patient: &PatientRecord) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let z = self.logit(&mut tape, &bound, patient)?;
        Ok(sigmoid_scalar(tape.scalar(z)))
    }
}

/// Probability from a trained recurrent classifier.
pub fn rnn_classify(patient: &PatientRecord, model: &RnnModel) -> Result<f64> {
    model.classify(patient)
}
