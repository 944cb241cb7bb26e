//! Network building blocks: multi-layer perceptrons and a gated recurrent
//! cell with a bidirectional sequence runner.
//!
//! Parameter structs own plain tensors; binding them to a [`Tape`] produces
//! lightweight `Bound*` views whose forward methods record onto that tape.
//! Binding order matches the order reported by `params()`/`param_names()`,
//! which the trainer and checkpoints rely on.

use rand::Rng;
use thiserror::Error;

use crate::diffcore::{DiffError, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("input dim {got} does not match expected {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("sequence must contain at least one step")]
    EmptySequence,
}

/// Hidden-layer nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
}

/// Final-layer nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputActivation {
    Identity,
    Sigmoid,
}

/// One affine layer: weight `[in, out]`, bias `[1, out]`.
#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// A fully-connected network with a fixed hidden activation and output head.
#[derive(Clone, Debug)]
pub struct MlpParams {
    pub layers: Vec<DenseLayer>,
    pub hidden: Activation,
    pub output: OutputActivation,
}

fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let s = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-s..s)).collect();
    Tensor::new(vec![rows, cols], data).expect("glorot shape")
}

impl MlpParams {
    /// Builds layers chaining `dims[0] -> dims[1] -> ... -> dims.last()`,
    /// weights uniform in `[-s, s]` with `s = sqrt(6 / (fan_in + fan_out))`,
    /// biases zero.
    pub fn new(
        dims: &[usize],
        hidden: Activation,
        output: OutputActivation,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let layers = dims
            .windows(2)
            .map(|w| DenseLayer {
                weight: glorot(w[0], w[1], rng),
                bias: Tensor::zeros(&[1, w[1]]),
            })
            .collect();
        MlpParams {
            layers,
            hidden,
            output,
        }
    }

    /// All-zero parameters with the given layer dims.
    pub fn zeros(dims: &[usize], hidden: Activation, output: OutputActivation) -> Self {
        assert!(dims.len() >= 2);
        let layers = dims
            .windows(2)
            .map(|w| DenseLayer {
                weight: Tensor::zeros(&[w[0], w[1]]),
                bias: Tensor::zeros(&[1, w[1]]),
            })
            .collect();
        MlpParams {
            layers,
            hidden,
            output,
        }
    }

    /// Single identity-activated layer initialized to the identity matrix.
    pub fn identity(dim: usize) -> Self {
        MlpParams {
            layers: vec![DenseLayer {
                weight: Tensor::identity(dim),
                bias: Tensor::zeros(&[1, dim]),
            }],
            hidden: Activation::Tanh,
            output: OutputActivation::Identity,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| {
                [
                    format!("{prefix}.layer{i}.weight"),
                    format!("{prefix}.layer{i}.bias"),
                ]
            })
            .collect()
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundMlp<'t> {
        BoundMlp {
            tape,
            layers: self
                .layers
                .iter()
                .map(|l| (tape.trainable(l.weight.clone()), tape.trainable(l.bias.clone())))
                .collect(),
            hidden: self.hidden,
            output: self.output,
        }
    }
}

/// Closed form for `MlpParams::param_count` given the dim chain.
pub fn mlp_param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// An MLP bound to a tape.
pub struct BoundMlp<'t> {
    tape: &'t Tape,
    layers: Vec<(Var<'t>, Var<'t>)>,
    hidden: Activation,
    output: OutputActivation,
}

impl<'t> BoundMlp<'t> {
    /// Tape vars in `params()` order.
    pub fn vars(&self) -> Vec<Var<'t>> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Affine + activation composition over `x: [batch, in]`.
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>, NetError> {
        let expected = self.layers[0].0.shape()[0];
        let got = *x.shape().last().unwrap();
        if got != expected {
            return Err(NetError::DimMismatch { expected, got });
        }
        let batch = x.shape()[0];
        let ones = self.tape.ones_column(batch);
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let pre = h.matmul(w)?.add(ones.matmul(b)?)?;
            h = if i < last {
                match self.hidden {
                    Activation::Tanh => pre.tanh()?,
                    Activation::Sigmoid => pre.sigmoid()?,
                }
            } else {
                match self.output {
                    OutputActivation::Identity => pre,
                    OutputActivation::Sigmoid => pre.sigmoid()?,
                }
            };
        }
        Ok(h)
    }
}

/// Convenience wrapper over bind + forward for one-shot evaluation.
pub fn mlp_forward<'t>(
    tape: &'t Tape,
    params: &MlpParams,
    x: Var<'t>,
) -> Result<Var<'t>, NetError> {
    params.bind(tape).forward(x)
}

/// Gate parameters of an LSTM-style recurrent cell.
///
/// Each gate has an input-path weight `[in, hidden]`, a hidden-path weight
/// `[hidden, hidden]`, and a bias `[1, hidden]`. The forget-gate bias starts
/// at 1.0 so early training does not flush cell state.
#[derive(Clone, Debug)]
pub struct RecurrentCellParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_x_input: Tensor,
    pub w_h_input: Tensor,
    pub b_input: Tensor,
    pub w_x_forget: Tensor,
    pub w_h_forget: Tensor,
    pub b_forget: Tensor,
    pub w_x_output: Tensor,
    pub w_h_output: Tensor,
    pub b_output: Tensor,
    pub w_x_cand: Tensor,
    pub w_h_cand: Tensor,
    pub b_cand: Tensor,
}

impl RecurrentCellParams {
    pub fn new(input_dim: usize, hidden_dim: usize, rng: &mut impl Rng) -> Self {
        let mut gx = || glorot(input_dim, hidden_dim, rng);
        let w_x_input = gx();
        let w_x_forget = gx();
        let w_x_output = gx();
        let w_x_cand = gx();
        let mut gh = || glorot(hidden_dim, hidden_dim, rng);
        let w_h_input = gh();
        let w_h_forget = gh();
        let w_h_output = gh();
        let w_h_cand = gh();
        RecurrentCellParams {
            input_dim,
            hidden_dim,
            w_x_input,
            w_h_input,
            b_input: Tensor::zeros(&[1, hidden_dim]),
            w_x_forget,
            w_h_forget,
            b_forget: Tensor::full(&[1, hidden_dim], 1.0),
            w_x_output,
            w_h_output,
            b_output: Tensor::zeros(&[1, hidden_dim]),
            w_x_cand,
            w_h_cand,
            b_cand: Tensor::zeros(&[1, hidden_dim]),
        }
    }

    /// All-zero parameters (used by degenerate-case tests).
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let zx = || Tensor::zeros(&[input_dim, hidden_dim]);
        let zh = || Tensor::zeros(&[hidden_dim, hidden_dim]);
        let zb = || Tensor::zeros(&[1, hidden_dim]);
        RecurrentCellParams {
            input_dim,
            hidden_dim,
            w_x_input: zx(),
            w_h_input: zh(),
            b_input: zb(),
            w_x_forget: zx(),
            w_h_forget: zh(),
            b_forget: zb(),
            w_x_output: zx(),
            w_h_output: zh(),
            b_output: zb(),
            w_x_cand: zx(),
            w_h_cand: zh(),
            b_cand: zb(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.w_x_input,
            &self.w_h_input,
            &self.b_input,
            &self.w_x_forget,
            &self.w_h_forget,
            &self.b_forget,
            &self.w_x_output,
            &self.w_h_output,
            &self.b_output,
            &self.w_x_cand,
            &self.w_h_cand,
            &self.b_cand,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w_x_input,
            &mut self.w_h_input,
            &mut self.b_input,
            &mut self.w_x_forget,
            &mut self.w_h_forget,
            &mut self.b_forget,
            &mut self.w_x_output,
            &mut self.w_h_output,
            &mut self.b_output,
            &mut self.w_x_cand,
            &mut self.w_h_cand,
            &mut self.b_cand,
        ]
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        ["input", "forget", "output", "cand"]
            .iter()
            .flat_map(|gate| {
                [
                    format!("{prefix}.{gate}.w_x"),
                    format!("{prefix}.{gate}.w_h"),
                    format!("{prefix}.{gate}.bias"),
                ]
            })
            .collect()
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundCell<'t> {
        let t = |x: &Tensor| tape.trainable(x.clone());
        BoundCell {
            tape,
            hidden_dim: self.hidden_dim,
            gates: [
                (t(&self.w_x_input), t(&self.w_h_input), t(&self.b_input)),
                (t(&self.w_x_forget), t(&self.w_h_forget), t(&self.b_forget)),
                (t(&self.w_x_output), t(&self.w_h_output), t(&self.b_output)),
                (t(&self.w_x_cand), t(&self.w_h_cand), t(&self.b_cand)),
            ],
        }
    }
}

/// Closed form for a cell's parameter count.
pub fn recurrent_param_count(input_dim: usize, hidden_dim: usize) -> usize {
    4 * (input_dim * hidden_dim + hidden_dim * hidden_dim + hidden_dim)
}

/// A recurrent cell bound to a tape. Gate order: input, forget, output,
/// candidate — matching `RecurrentCellParams::params()`.
pub struct BoundCell<'t> {
    tape: &'t Tape,
    hidden_dim: usize,
    gates: [(Var<'t>, Var<'t>, Var<'t>); 4],
}

impl<'t> BoundCell<'t> {
    pub fn vars(&self) -> Vec<Var<'t>> {
        self.gates
            .iter()
            .flat_map(|&(wx, wh, b)| [wx, wh, b])
            .collect()
    }

    pub fn zero_state(&self, batch: usize) -> (Var<'t>, Var<'t>) {
        (
            self.tape.constant(Tensor::zeros(&[batch, self.hidden_dim])),
            self.tape.constant(Tensor::zeros(&[batch, self.hidden_dim])),
        )
    }

    fn gate(
        &self,
        idx: usize,
        x: Var<'t>,
        h: Var<'t>,
        ones: Var<'t>,
    ) -> Result<Var<'t>, DiffError> {
        let (wx, wh, b) = self.gates[idx];
        x.matmul(wx)?.add(h.matmul(wh)?)?.add(ones.matmul(b)?)
    }

    /// One step: consumes `x: [batch, in]` and `(h, c)`, returns `(h', c')`.
    pub fn step(
        &self,
        x: Var<'t>,
        state: (Var<'t>, Var<'t>),
    ) -> Result<(Var<'t>, Var<'t>), NetError> {
        let (h, c) = state;
        let ones = self.tape.ones_column(x.shape()[0]);
        let gate_in = self.gate(0, x, h, ones)?.sigmoid()?;
        let gate_forget = self.gate(1, x, h, ones)?.sigmoid()?;
        let gate_out = self.gate(2, x, h, ones)?.sigmoid()?;
        let cand = self.gate(3, x, h, ones)?.tanh()?;
        let c_next = gate_forget.mul(c)?.add(gate_in.mul(cand)?)?;
        let h_next = gate_out.mul(c_next.tanh()?)?;
        Ok((h_next, c_next))
    }
}

/// Runs forward and backward cells over `seq` and concatenates their hidden
/// states per position: output `t` is
/// `concat(fwd hidden after steps 1..=t, bwd hidden after steps T..=t)`.
/// Initial hidden and cell states are zero.
pub fn birnn_encode<'t>(
    fwd: &BoundCell<'t>,
    bwd: &BoundCell<'t>,
    seq: &[Var<'t>],
) -> Result<Vec<Var<'t>>, NetError> {
    if seq.is_empty() {
        return Err(NetError::EmptySequence);
    }
    let batch = seq[0].shape()[0];

    let mut state = fwd.zero_state(batch);
    let mut fwd_hidden = Vec::with_capacity(seq.len());
    for &x in seq {
        state = fwd.step(x, state)?;
        fwd_hidden.push(state.0);
    }

    let mut state = bwd.zero_state(batch);
    let mut bwd_hidden = vec![None; seq.len()];
    for (t, &x) in seq.iter().enumerate().rev() {
        state = bwd.step(x, state)?;
        bwd_hidden[t] = Some(state.0);
    }

    fwd_hidden
        .into_iter()
        .zip(bwd_hidden)
        .map(|(f, b)| f.concat(b.unwrap()).map_err(NetError::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn tanh_mlp(dims: &[usize], rng: &mut ChaCha20Rng) -> MlpParams {
        MlpParams::new(dims, Activation::Tanh, OutputActivation::Identity, rng)
    }

    #[test]
    fn zero_mlp_outputs_zeros() {
        let p = MlpParams::zeros(&[3, 4, 2], Activation::Tanh, OutputActivation::Identity);
        let tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 3, vec![1.0; 6]).unwrap());
        let y = mlp_forward(&tape, &p, x).unwrap();
        assert_eq!(y.value().data(), &[0.0; 4]);
    }

    #[test]
    fn identity_layer_returns_input() {
        let p = MlpParams::identity(3);
        let tape = Tape::new();
        let input = Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 3.0, 0.0, -0.25]).unwrap();
        let x = tape.constant(input.clone());
        let y = mlp_forward(&tape, &p, x).unwrap();
        assert_eq!(y.value(), input);
    }

    #[test]
    fn forward_matches_scalar_loop_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let p = tanh_mlp(&[3, 5, 2], &mut rng);
        let input = vec![0.3, -0.8, 1.2];

        // Straight-line re-computation with plain loops.
        let mut h = input.clone();
        for (i, layer) in p.layers.iter().enumerate() {
            let (rows, cols) = (layer.weight.shape()[0], layer.weight.shape()[1]);
            let mut next = vec![0.0; cols];
            for j in 0..cols {
                let mut acc = layer.bias.data()[j];
                for r in 0..rows {
                    acc += h[r] * layer.weight.data()[r * cols + j];
                }
                next[j] = if i + 1 < p.layers.len() { acc.tanh() } else { acc };
            }
            h = next;
        }

        let tape = Tape::new();
        let x = tape.constant(Tensor::row(input));
        let y = mlp_forward(&tape, &p, x).unwrap();
        for (got, want) in y.value().data().iter().zip(&h) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn mlp_rejects_wrong_input_dim() {
        let p = MlpParams::zeros(&[3, 2], Activation::Tanh, OutputActivation::Identity);
        let tape = Tape::new();
        let x = tape.constant(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(
            mlp_forward(&tape, &p, x),
            Err(NetError::DimMismatch { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn param_count_matches_closed_form() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let dims = [7, 32, 32, 4];
        let p = tanh_mlp(&dims, &mut rng);
        assert_eq!(p.param_count(), mlp_param_count(&dims));
        let cell = RecurrentCellParams::new(9, 13, &mut rng);
        assert_eq!(cell.param_count(), recurrent_param_count(9, 13));
    }

    #[test]
    fn zero_cell_zero_input_stays_zero() {
        let p = RecurrentCellParams::zeros(2, 3);
        let tape = Tape::new();
        let bound = p.bind(&tape);
        let x = tape.constant(Tensor::zeros(&[1, 2]));
        let (h, c) = bound.step(x, bound.zero_state(1)).unwrap();
        assert_eq!(h.value().data(), &[0.0; 3]);
        assert_eq!(c.value().data(), &[0.0; 3]);
    }

    #[test]
    fn single_step_birnn_is_concat_of_both_cells() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let fwd = RecurrentCellParams::new(2, 3, &mut rng);
        let bwd = RecurrentCellParams::new(2, 3, &mut rng);
        let input = Tensor::row(vec![0.4, -0.9]);

        let tape = Tape::new();
        let (bf, bb) = (fwd.bind(&tape), bwd.bind(&tape));
        let x = tape.constant(input.clone());
        let out = birnn_encode(&bf, &bb, &[x]).unwrap();
        assert_eq!(out.len(), 1);

        let tape2 = Tape::new();
        let (bf2, bb2) = (fwd.bind(&tape2), bwd.bind(&tape2));
        let x2 = tape2.constant(input);
        let (hf, _) = bf2.step(x2, bf2.zero_state(1)).unwrap();
        let (hb, _) = bb2.step(x2, bb2.zero_state(1)).unwrap();
        let expected: Vec<f64> = hf
            .value()
            .data()
            .iter()
            .chain(hb.value().data())
            .copied()
            .collect();
        assert_eq!(out[0].value().data(), &expected[..]);
    }

    /// Plain-f64 LSTM step used as an independent oracle.
    fn manual_step(
        p: &RecurrentCellParams,
        x: &[f64],
        h: &[f64],
        c: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let hd = p.hidden_dim;
        let gate = |wx: &Tensor, wh: &Tensor, b: &Tensor, j: usize| {
            let mut acc = b.data()[j];
            for (r, &xv) in x.iter().enumerate() {
                acc += xv * wx.data()[r * hd + j];
            }
            for (r, &hv) in h.iter().enumerate() {
                acc += hv * wh.data()[r * hd + j];
            }
            acc
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut h_next = vec![0.0; hd];
        let mut c_next = vec![0.0; hd];
        for j in 0..hd {
            let i = sig(gate(&p.w_x_input, &p.w_h_input, &p.b_input, j));
            let f = sig(gate(&p.w_x_forget, &p.w_h_forget, &p.b_forget, j));
            let o = sig(gate(&p.w_x_output, &p.w_h_output, &p.b_output, j));
            let g = gate(&p.w_x_cand, &p.w_h_cand, &p.b_cand, j).tanh();
            c_next[j] = f * c[j] + i * g;
            h_next[j] = o * c_next[j].tanh();
        }
        (h_next, c_next)
    }

    #[test]
    fn birnn_matches_manual_unroll() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let fwd = RecurrentCellParams::new(2, 4, &mut rng);
        let bwd = RecurrentCellParams::new(2, 4, &mut rng);
        let steps = [
            vec![0.5, -0.3],
            vec![1.1, 0.7],
            vec![-0.9, 0.2],
        ];

        let tape = Tape::new();
        let (bf, bb) = (fwd.bind(&tape), bwd.bind(&tape));
        let seq: Vec<_> = steps
            .iter()
            .map(|s| tape.constant(Tensor::row(s.clone())))
            .collect();
        let out = birnn_encode(&bf, &bb, &seq).unwrap();

        let mut fh = vec![0.0; 4];
        let mut fc = vec![0.0; 4];
        let mut fwd_expect = Vec::new();
        for s in &steps {
            let (h, c) = manual_step(&fwd, s, &fh, &fc);
            fh = h.clone();
            fc = c;
            fwd_expect.push(h);
        }
        let mut bh = vec![0.0; 4];
        let mut bc = vec![0.0; 4];
        let mut bwd_expect = vec![Vec::new(); 3];
        for t in (0..3).rev() {
            let (h, c) = manual_step(&bwd, &steps[t], &bh, &bc);
            bh = h.clone();
            bc = c;
            bwd_expect[t] = h;
        }

        for t in 0..3 {
            let got = out[t].value();
            for j in 0..4 {
                assert!((got.data()[j] - fwd_expect[t][j]).abs() < 1e-12);
                assert!((got.data()[4 + j] - bwd_expect[t][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn birnn_halves_depend_only_on_their_direction() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let fwd = RecurrentCellParams::new(1, 3, &mut rng);
        let bwd = RecurrentCellParams::new(1, 3, &mut rng);
        let base = [0.1, 0.9, -0.4, 0.7];
        // Swap the inputs after position 1: the forward half at t=1 must not
        // change. Swap the inputs before position 2: the backward half at t=2
        // must not change.
        let swapped_late = [0.1, 0.9, 0.7, -0.4];
        let swapped_early = [0.9, 0.1, -0.4, 0.7];

        let encode = |inputs: &[f64]| {
            let tape = Tape::new();
            let (bf, bb) = (fwd.bind(&tape), bwd.bind(&tape));
            let seq: Vec<_> = inputs
                .iter()
                .map(|&v| tape.constant(Tensor::row(vec![v])))
                .collect();
            birnn_encode(&bf, &bb, &seq)
                .unwrap()
                .iter()
                .map(|v| v.value().data().to_vec())
                .collect::<Vec<_>>()
        };

        let a = encode(&base);
        let b = encode(&swapped_late);
        let c = encode(&swapped_early);
        assert_eq!(a[1][..3], b[1][..3], "forward half at t=1");
        assert_eq!(a[2][3..], c[2][3..], "backward half at t=2");
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let p = RecurrentCellParams::zeros(1, 2);
        let tape = Tape::new();
        let (bf, bb) = (p.bind(&tape), p.bind(&tape));
        assert!(matches!(
            birnn_encode(&bf, &bb, &[]),
            Err(NetError::EmptySequence)
        ));
    }
}
