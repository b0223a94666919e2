//! The coordinatewise recurrent cell stack and its checkpoint format.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{Matrix, SeededRng, Tape, Var, Vector};

/// Clamp parameter of the log-magnitude/sign gradient encoding.
pub const PREPROCESS_P: f64 = 10.0;
pub const DEFAULT_HIDDEN: usize = 128;
pub const DEFAULT_LAYERS: usize = 2;
pub const DEFAULT_OUTPUT_SCALE: f64 = 0.1;
const INPUT_WIDTH: usize = 2;
const GATES: usize = 4;
const CHECKPOINT_MAGIC: &str = "fisar-recurrent-optimizer v1";

/// Two-channel encoding of one gradient coordinate:
/// `(ln|g| / p, sign g)` when `|g| ≥ e^{-p}`, else `(-1, e^p g)`.
pub fn preprocess(g: f64) -> [f64; 2] {
    if g.abs() >= (-PREPROCESS_P).exp() {
        [g.abs().ln() / PREPROCESS_P, g.signum()]
    } else {
        [-1.0, PREPROCESS_P.exp() * g]
    }
}

/// Architecture of a [`RecurrentOptimizer`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CellShape {
    pub hidden: usize,
    pub layers: usize,
    /// Multiplies the cell output before projection.
    pub output_scale: f64,
}

impl Default for CellShape {
    fn default() -> Self {
        CellShape { hidden: DEFAULT_HIDDEN, layers: DEFAULT_LAYERS, output_scale: DEFAULT_OUTPUT_SCALE }
    }
}

impl CellShape {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::InvalidArgument("hidden: must be at least 1".into()));
        }
        if self.layers == 0 {
            return Err(Error::InvalidArgument("layers: must be at least 1".into()));
        }
        if !(self.output_scale > 0.0 && self.output_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("output_scale: must be positive, got {}", self.output_scale)));
        }
        Ok(())
    }

    fn input_width(&self, layer: usize) -> usize {
        if layer == 0 {
            INPUT_WIDTH
        } else {
            self.hidden
        }
    }

    /// Shapes of every parameter block in flattening order: per layer and
    /// gate (input, forget, candidate, output) the input weights, recurrent
    /// weights and bias; then the output head weights and bias.
    fn block_shapes(&self) -> Vec<(usize, usize)> {
        let h = self.hidden;
        let mut shapes = Vec::with_capacity(self.layers * GATES * 3 + 2);
        for l in 0..self.layers {
            for _ in 0..GATES {
                shapes.push((self.input_width(l), h));
                shapes.push((h, h));
                shapes.push((1, h));
            }
        }
        shapes.push((h, 1));
        shapes.push((1, 1));
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.block_shapes().iter().map(|(r, c)| r * c).sum()
    }
}

/// LSTM stack with a linear head, applied to every coordinate with shared
/// parameters φ.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentOptimizer {
    shape: CellShape,
    blocks: Vec<Matrix>,
}

/// Per-coordinate hidden and cell vectors, one `n × hidden` pair per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordOptimizerState {
    pub hidden: Vec<Matrix>,
    pub cell: Vec<Matrix>,
}

impl CoordOptimizerState {
    pub fn zeros(n: usize, shape: &CellShape) -> Self {
        CoordOptimizerState {
            hidden: vec![Matrix::zeros(n, shape.hidden); shape.layers],
            cell: vec![Matrix::zeros(n, shape.hidden); shape.layers],
        }
    }

    /// Number of coordinates.
    pub fn coords(&self) -> usize {
        self.hidden.first().map_or(0, Matrix::rows)
    }

    pub fn is_finite(&self) -> bool {
        self.hidden.iter().chain(&self.cell).all(Matrix::is_finite)
    }

    /// Rows `range` of every matrix.
    pub fn slice_rows(&self, range: std::ops::Range<usize>) -> Self {
        let idx: Vec<usize> = range.collect();
        CoordOptimizerState {
            hidden: self.hidden.iter().map(|m| m.select_rows(&idx)).collect(),
            cell: self.cell.iter().map(|m| m.select_rows(&idx)).collect(),
        }
    }

    /// Stacks states row-wise in order.
    pub fn stack(parts: &[CoordOptimizerState]) -> Self {
        let layers = parts.first().map_or(0, |p| p.hidden.len());
        let cat = |pick: &dyn Fn(&CoordOptimizerState) -> &Matrix| {
            let cols = pick(&parts[0]).cols();
            let data: Vec<f64> = parts.iter().flat_map(|p| pick(p).as_slice().to_vec()).collect();
            Matrix::from_vec(data.len() / cols, cols, data).expect("consistent widths")
        };
        CoordOptimizerState {
            hidden: (0..layers).map(|l| cat(&|p| &p.hidden[l])).collect(),
            cell: (0..layers).map(|l| cat(&|p| &p.cell[l])).collect(),
        }
    }
}

/// φ registered on a tape, with bias rows already broadcast to the batch.
pub(crate) struct PhiVars {
    leaves: Vec<Var>,
    /// Per layer and gate: (input weights, recurrent weights, broadcast bias).
    gates: Vec<[(Var, Var, Var); GATES]>,
    head_w: Var,
    head_b: Var,
}

impl PhiVars {
    pub(crate) fn leaves(&self) -> &[Var] {
        &self.leaves
    }
}

impl RecurrentOptimizer {
    /// Uniform `±1/√hidden` initialization.
    pub fn new(shape: CellShape, rng: &mut SeededRng) -> Result<Self> {
        shape.validate()?;
        let bound = 1.0 / (shape.hidden as f64).sqrt();
        let blocks = shape
            .block_shapes()
            .into_iter()
            .map(|(r, c)| {
                let data = (0..r * c).map(|_| rng.uniform_range(-bound, bound)).collect();
                Matrix::from_vec(r, c, data).expect("block shape")
            })
            .collect();
        Ok(RecurrentOptimizer { shape, blocks })
    }

    pub fn zeros(shape: CellShape) -> Result<Self> {
        shape.validate()?;
        let blocks = shape.block_shapes().into_iter().map(|(r, c)| Matrix::zeros(r, c)).collect();
        Ok(RecurrentOptimizer { shape, blocks })
    }

    pub fn shape(&self) -> &CellShape {
        &self.shape
    }

    pub fn param_count(&self) -> usize {
        self.shape.param_count()
    }

    pub fn params(&self) -> Vector {
        self.blocks.iter().flat_map(|b| b.as_slice().iter().copied()).collect()
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::DimensionMismatch(format!("optimizer has {} parameters, got {}", self.param_count(), flat.len())));
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("optimizer parameters".into()));
        }
        let mut at = 0;
        for b in &mut self.blocks {
            let len = b.rows() * b.cols();
            b.as_mut_slice().copy_from_slice(&flat[at..at + len]);
            at += len;
        }
        Ok(())
    }

    pub fn with_params(&self, flat: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        out.set_params(flat)?;
        Ok(out)
    }

    /// Registers φ on `tape` as leaves (`trainable`) or constants, with
    /// biases broadcast to `rows` coordinates.
    pub(crate) fn register(&self, tape: &mut Tape, rows: usize, trainable: bool) -> PhiVars {
        let leaves: Vec<Var> =
            self.blocks.iter().map(|b| if trainable { tape.leaf(b.clone()) } else { tape.constant(b.clone()) }).collect();
        let ones = tape.constant(Matrix::filled(rows, 1, 1.0));
        let mut gates = Vec::with_capacity(self.shape.layers);
        for l in 0..self.shape.layers {
            let base = l * GATES * 3;
            let gate = |g: usize, tape: &mut Tape| {
                let i = base + 3 * g;
                (leaves[i], leaves[i + 1], tape.matmul(ones, leaves[i + 2]))
            };
            gates.push([gate(0, tape), gate(1, tape), gate(2, tape), gate(3, tape)]);
        }
        let n = leaves.len();
        let head_b = tape.matmul(ones, leaves[n - 1]);
        PhiVars { head_w: leaves[n - 2], head_b, gates, leaves }
    }

    /// One recurrent step for every row of `input` (`rows × 2`). Returns
    /// the scaled output column and the next `(hidden, cell)` per layer.
    pub(crate) fn cell_forward(
        &self,
        tape: &mut Tape,
        phi: &PhiVars,
        input: Var,
        state: &[(Var, Var)],
    ) -> (Var, Vec<(Var, Var)>) {
        let mut x = input;
        let mut next = Vec::with_capacity(self.shape.layers);
        for (l, &(h, c)) in state.iter().enumerate() {
            let pre = |g: usize, tape: &mut Tape| {
                let (wx, wh, b) = phi.gates[l][g];
                let a = tape.matmul(x, wx);
                let r = tape.matmul(h, wh);
                let s = tape.add(a, r);
                tape.add(s, b)
            };
            let p_i = pre(0, tape);
            let p_f = pre(1, tape);
            let p_g = pre(2, tape);
            let p_o = pre(3, tape);
            let i = tape.sigmoid(p_i);
            let f = tape.sigmoid(p_f);
            let g = tape.tanh(p_g);
            let o = tape.sigmoid(p_o);
            let keep = tape.mul(f, c);
            let write = tape.mul(i, g);
            let c_next = tape.add(keep, write);
            let squashed = tape.tanh(c_next);
            let h_next = tape.mul(o, squashed);
            next.push((h_next, c_next));
            x = h_next;
        }
        let lin = tape.matmul(x, phi.head_w);
        let out = tape.add(lin, phi.head_b);
        (tape.scale(out, self.shape.output_scale), next)
    }

    /// Writes the versioned text checkpoint. Floats use the shortest
    /// representation that parses back to the same bits.
    pub fn to_checkpoint(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{CHECKPOINT_MAGIC}");
        let _ = writeln!(s, "hidden {}", self.shape.hidden);
        let _ = writeln!(s, "layers {}", self.shape.layers);
        let _ = writeln!(s, "output_scale {:?}", self.shape.output_scale);
        let _ = writeln!(s, "params {}", self.param_count());
        for v in self.params().iter() {
            let _ = writeln!(s, "{v:?}");
        }
        s
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        let mut lines = text.lines();
        if lines.next() != Some(CHECKPOINT_MAGIC) {
            return Err(bad("missing or unsupported header"));
        }
        let mut field = |name: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| bad(&format!("missing {name}")))?;
            let (key, value) = line.split_once(' ').ok_or_else(|| bad(&format!("malformed {name} line")))?;
            if key != name {
                return Err(bad(&format!("expected {name}, found {key}")));
            }
            Ok(value.to_string())
        };
        let parse_usize = |v: String, name: &str| v.parse::<usize>().map_err(|_| bad(&format!("invalid {name}")));
        let hidden = parse_usize(field("hidden")?, "hidden")?;
        let layers = parse_usize(field("layers")?, "layers")?;
        let output_scale: f64 = field("output_scale")?.parse().map_err(|_| bad("invalid output_scale"))?;
        let count = parse_usize(field("params")?, "params")?;
        let shape = CellShape { hidden, layers, output_scale };
        let mut opt = RecurrentOptimizer::zeros(shape)?;
        if count != opt.param_count() {
            return Err(bad("parameter count does not match architecture"));
        }
        let values: Vec<f64> = lines
            .filter(|l| !l.is_empty())
            .map(|l| l.parse::<f64>().map_err(|_| bad(&format!("invalid parameter {l:?}"))))
            .collect::<Result<_>>()?;
        if values.len() != count {
            return Err(bad(&format!("expected {count} parameters, found {}", values.len())));
        }
        opt.set_params(&values)?;
        Ok(opt)
    }
}

/// Encodes a gradient as the `n × 2` cell input.
pub(crate) fn encode_gradient(grad: &[f64]) -> Matrix {
    let data: Vec<f64> = grad.iter().flat_map(|&g| preprocess(g)).collect();
    Matrix::from_vec(grad.len(), INPUT_WIDTH, data).expect("two channels")
}

/// One application of the cell stack to every coordinate of `grad`.
/// Returns the scaled raw direction and the advanced state.
pub fn optimizer_step(
    opt: &RecurrentOptimizer,
    grad: &[f64],
    state: &CoordOptimizerState,
) -> Result<(Vector, CoordOptimizerState)> {
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteInput("gradient".into()));
    }
    let n = grad.len();
    if state.hidden.len() != opt.shape.layers
        || state.hidden.iter().chain(&state.cell).any(|m| m.shape() != (n, opt.shape.hidden))
    {
        return Err(Error::DimensionMismatch(format!("state is not {} layers of {n}x{}", opt.shape.layers, opt.shape.hidden)));
    }
    let mut tape = Tape::new();
    let phi = opt.register(&mut tape, n, false);
    let input = tape.constant(encode_gradient(grad));
    let vars: Vec<(Var, Var)> =
        state.hidden.iter().zip(&state.cell).map(|(h, c)| (tape.constant(h.clone()), tape.constant(c.clone()))).collect();
    let (out, next) = opt.cell_forward(&mut tape, &phi, input, &vars);
    let raw: Vector = tape.value(out).as_slice().iter().copied().collect();
    let state = CoordOptimizerState {
        hidden: next.iter().map(|(h, _)| tape.value(*h).clone()).collect(),
        cell: next.iter().map(|(_, c)| tape.value(*c).clone()).collect(),
    };
    Ok((raw, state))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CellShape {
        CellShape { hidden: 4, layers: 2, output_scale: 0.1 }
    }

    #[test]
    fn preprocessing_channels() {
        assert_eq!(preprocess(1.0), [0.0, 1.0]);
        let [m, s] = preprocess(-std::f64::consts::E);
        assert!((m - 0.1).abs() < 1e-15 && s == -1.0);
        assert_eq!(preprocess(0.0), [-1.0, 0.0]);
        let tiny = 1e-6;
        assert_eq!(preprocess(tiny), [-1.0, PREPROCESS_P.exp() * tiny]);
    }

    #[test]
    fn zero_parameters_give_zero_output_and_state() {
        let opt = RecurrentOptimizer::zeros(small()).unwrap();
        let state = CoordOptimizerState::zeros(3, opt.shape());
        let (raw, next) = optimizer_step(&opt, &[1.0, -2.0, 1e-9], &state).unwrap();
        assert_eq!(raw.as_slice(), &[0.0; 3]);
        assert!(next.hidden.iter().all(|h| h.max_abs() == 0.0));
    }

    #[test]
    fn parameter_count_is_independent_of_coordinates() {
        let shape = CellShape::default();
        // 2 layers x 4 gates x (in*h + h*h + h) + head
        let h = 128;
        let expected = 4 * (2 * h + h * h + h) + 4 * (h * h + h * h + h) + h + 1;
        assert_eq!(shape.param_count(), expected);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = SeededRng::new(3);
        let opt = RecurrentOptimizer::new(small(), &mut rng).unwrap();
        let back = RecurrentOptimizer::from_checkpoint(&opt.to_checkpoint()).unwrap();
        assert_eq!(back.shape(), opt.shape());
        for (a, b) in opt.params().iter().zip(back.params().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn malformed_checkpoints_rejected() {
        let mut rng = SeededRng::new(3);
        let text = RecurrentOptimizer::new(small(), &mut rng).unwrap().to_checkpoint();
        assert!(RecurrentOptimizer::from_checkpoint("nonsense").is_err());
        let truncated: String = text.lines().take(20).map(|l| format!("{l}\n")).collect();
        assert!(matches!(RecurrentOptimizer::from_checkpoint(&truncated), Err(Error::Checkpoint(_))));
        let wrong = text.replacen("hidden 4", "hidden 5", 1);
        assert!(RecurrentOptimizer::from_checkpoint(&wrong).is_err());
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let opt = RecurrentOptimizer::zeros(small()).unwrap();
        let state = CoordOptimizerState::zeros(1, opt.shape());
        assert!(matches!(optimizer_step(&opt, &[f64::NAN], &state), Err(Error::NonFiniteInput(_))));
        let wrong = CoordOptimizerState::zeros(2, opt.shape());
        assert!(matches!(optimizer_step(&opt, &[1.0], &wrong), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn stacking_and_slicing_are_inverse() {
        let mut rng = SeededRng::new(9);
        let opt = RecurrentOptimizer::new(small(), &mut rng).unwrap();
        let (_, a) = optimizer_step(&opt, &[0.3, -0.1], &CoordOptimizerState::zeros(2, opt.shape())).unwrap();
        let (_, b) = optimizer_step(&opt, &[2.0], &CoordOptimizerState::zeros(1, opt.shape())).unwrap();
        let s = CoordOptimizerState::stack(&[a.clone(), b.clone()]);
        assert_eq!(s.coords(), 3);
        assert_eq!(s.slice_rows(0..2), a);
        assert_eq!(s.slice_rows(2..3), b);
    }
}
