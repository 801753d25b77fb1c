//! Signal temporal logic over sampled multi-dimensional traces.
//!
//! Formulas are kept in negation normal form: negation only appears as a sign
//! flip inside a [`LinearPredicate`]. Temporal windows are integer step counts
//! on the trace grid.
//!
//! Three evaluations share one recursion:
//! * exact quantitative robustness (min / max),
//! * smoothed robustness where min and max become log-sum-exp soft-min /
//!   soft-max with sharpness `kappa`,
//! * the gradient of the smoothed robustness with respect to every trace
//!   sample entry, by reverse accumulation through the formula tree.
//!
//! Every node is evaluated only on the range of steps its ancestors need, so
//! evaluating a formula anchored at step `k` touches each (node, step) pair once.
//!
//! # Text form
//!
//! ```text
//! formula := (pred [c0 c1 ... cn] b)      ; c·s − b ≥ 0
//!          | (and formula formula ...)
//!          | (or formula formula ...)
//!          | (G a b formula)               ; globally over steps k+a ..= k+b
//!          | (F a b formula)               ; eventually over steps k+a ..= k+b
//! ```

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fmath;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StlError {
    #[error("node {node} ({op}) needs samples up to step {needed} but the trace ends at step {last}")]
    WindowOutOfRange { node: usize, op: &'static str, needed: usize, last: usize },
    #[error("smoothing sharpness must be positive and finite, got {0}")]
    InvalidKappa(f64),
    #[error("predicate at node {node} has {got} coefficients but the trace dimension is {expected}")]
    DimensionMismatch { node: usize, got: usize, expected: usize },
    #[error("node {node}: {op} needs at least one operand")]
    EmptyOperands { node: usize, op: &'static str },
    #[error("node {node}: window [{a}, {b}] is inverted")]
    InvalidWindow { node: usize, a: usize, b: usize },
    #[error("predicate at node {node} has an all-zero coefficient vector")]
    ZeroPredicate { node: usize },
    #[error("trace must contain at least one sample")]
    EmptyTrace,
    #[error("trace samples must all have dimension {expected}, sample {step} has {got}")]
    RaggedTrace { step: usize, expected: usize, got: usize },
    #[error("sampling period must be positive, got {0}")]
    InvalidPeriod(f64),
    #[error("parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },
}

/// Affine atom μ(s) = coefficients · s − offset, satisfied when μ > 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPredicate {
    pub coefficients: Vec<f64>,
    pub offset: f64,
}

impl LinearPredicate {
    pub fn new(coefficients: Vec<f64>, offset: f64) -> Self {
        LinearPredicate { coefficients, offset }
    }

    /// Builds a predicate over a `dim`-wide signal from sparse `(index, coefficient)` pairs.
    pub fn sparse(dim: usize, terms: &[(usize, f64)], offset: f64) -> Self {
        let mut coefficients = vec![0.0; dim];
        for &(i, c) in terms {
            coefficients[i] += c;
        }
        LinearPredicate { coefficients, offset }
    }

    pub fn eval(&self, sample: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (c, s) in self.coefficients.iter().zip(sample) {
            if *c != 0.0 {
                acc += c * s;
            }
        }
        acc - self.offset
    }

    pub fn dim(&self) -> usize {
        self.coefficients.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StlFormula {
    Predicate(LinearPredicate),
    And(Vec<StlFormula>),
    Or(Vec<StlFormula>),
    Globally { a: usize, b: usize, child: Box<StlFormula> },
    Eventually { a: usize, b: usize, child: Box<StlFormula> },
}

impl StlFormula {
    pub fn predicate(p: LinearPredicate) -> Self {
        StlFormula::Predicate(p)
    }

    pub fn and(children: Vec<StlFormula>) -> Self {
        StlFormula::And(children)
    }

    pub fn or(children: Vec<StlFormula>) -> Self {
        StlFormula::Or(children)
    }

    pub fn globally(a: usize, b: usize, child: StlFormula) -> Self {
        StlFormula::Globally { a, b, child: Box::new(child) }
    }

    pub fn eventually(a: usize, b: usize, child: StlFormula) -> Self {
        StlFormula::Eventually { a, b, child: Box::new(child) }
    }

    fn op_name(&self) -> &'static str {
        match self {
            StlFormula::Predicate(_) => "pred",
            StlFormula::And(_) => "and",
            StlFormula::Or(_) => "or",
            StlFormula::Globally { .. } => "G",
            StlFormula::Eventually { .. } => "F",
        }
    }

    pub fn children(&self) -> Vec<&StlFormula> {
        match self {
            StlFormula::Predicate(_) => vec![],
            StlFormula::And(c) | StlFormula::Or(c) => c.iter().collect(),
            StlFormula::Globally { child, .. } | StlFormula::Eventually { child, .. } => vec![child],
        }
    }

    /// Number of steps past the anchor step the formula reads.
    pub fn horizon(&self) -> usize {
        match self {
            StlFormula::Predicate(_) => 0,
            StlFormula::And(c) | StlFormula::Or(c) => c.iter().map(|f| f.horizon()).max().unwrap_or(0),
            StlFormula::Globally { b, child, .. } | StlFormula::Eventually { b, child, .. } => b + child.horizon(),
        }
    }

    /// Operator-node nesting depth (predicates count zero).
    pub fn operator_depth(&self) -> usize {
        match self {
            StlFormula::Predicate(_) => 0,
            _ => 1 + self.children().iter().map(|c| c.operator_depth()).max().unwrap_or(0),
        }
    }

    /// Largest operand count of any operator node; temporal nodes count their window width.
    pub fn max_operands(&self) -> usize {
        let own = match self {
            StlFormula::Predicate(_) => 1,
            StlFormula::And(c) | StlFormula::Or(c) => c.len(),
            StlFormula::Globally { a, b, .. } | StlFormula::Eventually { a, b, .. } => b.saturating_sub(*a) + 1,
        };
        self.children().iter().map(|c| c.max_operands()).fold(own, usize::max)
    }

    pub fn node_count(&self) -> usize {
        1 + self.children().iter().map(|c| c.node_count()).sum::<usize>()
    }

    /// Adds `delta` to every predicate threshold, making each atom harder by `delta`.
    pub fn tightened(&self, delta: f64) -> StlFormula {
        match self {
            StlFormula::Predicate(p) => StlFormula::Predicate(LinearPredicate::new(p.coefficients.clone(), p.offset + delta)),
            StlFormula::And(c) => StlFormula::And(c.iter().map(|f| f.tightened(delta)).collect()),
            StlFormula::Or(c) => StlFormula::Or(c.iter().map(|f| f.tightened(delta)).collect()),
            StlFormula::Globally { a, b, child } => StlFormula::globally(*a, *b, child.tightened(delta)),
            StlFormula::Eventually { a, b, child } => StlFormula::eventually(*a, *b, child.tightened(delta)),
        }
    }

    pub fn to_sexpr(&self) -> String {
        let mut s = String::new();
        self.write_sexpr(&mut s);
        s
    }

    fn write_sexpr(&self, out: &mut String) {
        match self {
            StlFormula::Predicate(p) => {
                out.push_str("(pred [");
                for (i, c) in p.coefficients.iter().enumerate() {
                    if i > 0 {
                        out.push(' ');
                    }
                    let _ = write!(out, "{c:?}");
                }
                let _ = write!(out, "] {:?})", p.offset);
            }
            StlFormula::And(c) | StlFormula::Or(c) => {
                out.push('(');
                out.push_str(self.op_name());
                for f in c {
                    out.push(' ');
                    f.write_sexpr(out);
                }
                out.push(')');
            }
            StlFormula::Globally { a, b, child } | StlFormula::Eventually { a, b, child } => {
                let _ = write!(out, "({} {a} {b} ", self.op_name());
                child.write_sexpr(out);
                out.push(')');
            }
        }
    }

    pub fn parse(text: &str) -> Result<StlFormula, StlError> {
        let mut p = Parser { src: text.as_bytes(), pos: 0 };
        let f = p.formula()?;
        p.skip_ws();
        if p.pos != p.src.len() {
            return Err(p.error("trailing input"));
        }
        Ok(f)
    }
}

impl fmt::Display for StlFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_sexpr())
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, msg: &str) -> StlError {
        StlError::Parse { pos: self.pos, msg: msg.to_string() }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn expect(&mut self, c: u8) -> Result<(), StlError> {
        self.skip_ws();
        if self.src.get(self.pos) == Some(&c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(&format!("expected '{}'", c as char)))
        }
    }

    fn atom(&mut self) -> Result<&str, StlError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() {
            let c = self.src[self.pos];
            if c.is_ascii_whitespace() || c == b'(' || c == b')' || c == b'[' || c == b']' {
                break;
            }
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.error("expected a token"));
        }
        std::str::from_utf8(&self.src[start..self.pos]).map_err(|_| self.error("invalid utf-8"))
    }

    fn number(&mut self) -> Result<f64, StlError> {
        let start = self.pos;
        let tok = self.atom()?;
        tok.parse::<f64>().map_err(|_| StlError::Parse { pos: start, msg: format!("invalid number '{tok}'") })
    }

    fn step(&mut self) -> Result<usize, StlError> {
        let start = self.pos;
        let tok = self.atom()?;
        tok.parse::<usize>().map_err(|_| StlError::Parse { pos: start, msg: format!("invalid step count '{tok}'") })
    }

    fn formula(&mut self) -> Result<StlFormula, StlError> {
        self.expect(b'(')?;
        let op = self.atom()?.to_string();
        let f = match op.as_str() {
            "pred" => {
                self.expect(b'[')?;
                let mut coefficients = Vec::new();
                loop {
                    self.skip_ws();
                    if self.src.get(self.pos) == Some(&b']') {
                        self.pos += 1;
                        break;
                    }
                    coefficients.push(self.number()?);
                }
                let offset = self.number()?;
                StlFormula::Predicate(LinearPredicate::new(coefficients, offset))
            }
            "and" | "or" => {
                let mut children = Vec::new();
                loop {
                    self.skip_ws();
                    if self.src.get(self.pos) == Some(&b')') {
                        break;
                    }
                    children.push(self.formula()?);
                }
                if op == "and" {
                    StlFormula::And(children)
                } else {
                    StlFormula::Or(children)
                }
            }
            "G" | "F" => {
                let a = self.step()?;
                let b = self.step()?;
                let child = self.formula()?;
                if op == "G" {
                    StlFormula::globally(a, b, child)
                } else {
                    StlFormula::eventually(a, b, child)
                }
            }
            other => return Err(self.error(&format!("unknown operator '{other}'"))),
        };
        self.expect(b')')?;
        Ok(f)
    }
}

/// Uniformly sampled stacked signal on the grid t = (0, Ts, 2·Ts, …).
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    ts: f64,
    dim: usize,
    data: Vec<f64>,
}

impl Trace {
    pub fn new(ts: f64, samples: &[Vec<f64>]) -> Result<Trace, StlError> {
        let dim = samples.first().ok_or(StlError::EmptyTrace)?.len();
        let mut data = Vec::with_capacity(dim * samples.len());
        for (step, s) in samples.iter().enumerate() {
            if s.len() != dim {
                return Err(StlError::RaggedTrace { step, expected: dim, got: s.len() });
            }
            data.extend_from_slice(s);
        }
        Trace::from_flat(ts, dim, data)
    }

    /// Row-major samples: `data[k * dim + i]` is signal entry `i` at step `k`.
    pub fn from_flat(ts: f64, dim: usize, data: Vec<f64>) -> Result<Trace, StlError> {
        if !(ts > 0.0) {
            return Err(StlError::InvalidPeriod(ts));
        }
        if dim == 0 || data.is_empty() {
            return Err(StlError::EmptyTrace);
        }
        if !data.len().is_multiple_of(dim) {
            return Err(StlError::RaggedTrace { step: data.len() / dim, expected: dim, got: data.len() % dim });
        }
        Ok(Trace { ts, dim, data })
    }

    /// Scalar signal convenience constructor.
    pub fn scalar(ts: f64, values: &[f64]) -> Result<Trace, StlError> {
        Trace::from_flat(ts, 1, values.to_vec())
    }

    pub fn ts(&self) -> f64 {
        self.ts
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn sample(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Semantics {
    Exact,
    Smooth { kappa: f64 },
}

#[derive(Debug, Clone, Copy)]
enum FlatOp {
    Pred(usize),
    And,
    Or,
    Globally(usize, usize),
    Eventually(usize, usize),
}

impl FlatOp {
    fn name(self) -> &'static str {
        match self {
            FlatOp::Pred(_) => "pred",
            FlatOp::And => "and",
            FlatOp::Or => "or",
            FlatOp::Globally(..) => "G",
            FlatOp::Eventually(..) => "F",
        }
    }

    fn is_min(self) -> bool {
        matches!(self, FlatOp::And | FlatOp::Globally(..))
    }
}

#[derive(Debug, Clone)]
struct FlatNode {
    op: FlatOp,
    children: Vec<usize>,
}

/// Result of a smoothed evaluation with its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothEvaluation {
    pub value: f64,
    /// Same row-major layout as [`Trace::data`].
    pub gradient: Vec<f64>,
}

/// A formula flattened into pre-order for repeated evaluation. Node ids in
/// errors are pre-order indices (root = 0).
#[derive(Debug, Clone)]
pub struct CompiledFormula {
    nodes: Vec<FlatNode>,
    predicates: Vec<LinearPredicate>,
}

struct Forward {
    lo: Vec<usize>,
    signals: Vec<Vec<f64>>,
}

impl CompiledFormula {
    pub fn new(formula: &StlFormula) -> Result<Self, StlError> {
        let mut c = CompiledFormula { nodes: Vec::new(), predicates: Vec::new() };
        c.push(formula)?;
        Ok(c)
    }

    fn push(&mut self, f: &StlFormula) -> Result<usize, StlError> {
        let id = self.nodes.len();
        let op = match f {
            StlFormula::Predicate(p) => {
                if p.coefficients.iter().all(|c| *c == 0.0) {
                    return Err(StlError::ZeroPredicate { node: id });
                }
                self.predicates.push(p.clone());
                FlatOp::Pred(self.predicates.len() - 1)
            }
            StlFormula::And(c) | StlFormula::Or(c) => {
                if c.is_empty() {
                    return Err(StlError::EmptyOperands { node: id, op: f.op_name() });
                }
                if matches!(f, StlFormula::And(_)) {
                    FlatOp::And
                } else {
                    FlatOp::Or
                }
            }
            StlFormula::Globally { a, b, .. } | StlFormula::Eventually { a, b, .. } => {
                if a > b {
                    return Err(StlError::InvalidWindow { node: id, a: *a, b: *b });
                }
                if matches!(f, StlFormula::Globally { .. }) {
                    FlatOp::Globally(*a, *b)
                } else {
                    FlatOp::Eventually(*a, *b)
                }
            }
        };
        self.nodes.push(FlatNode { op, children: Vec::new() });
        let mut children = Vec::new();
        for child in f.children() {
            children.push(self.push(child)?);
        }
        self.nodes[id].children = children;
        Ok(id)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn ranges(&self, trace: &Trace, k: usize) -> Result<(Vec<usize>, Vec<usize>), StlError> {
        let n = self.nodes.len();
        let last = trace.len() - 1;
        let mut lo = vec![0usize; n];
        let mut hi = vec![0usize; n];
        lo[0] = k;
        hi[0] = k;
        if k > last {
            return Err(StlError::WindowOutOfRange { node: 0, op: self.nodes[0].op.name(), needed: k, last });
        }
        for i in 0..n {
            let node = &self.nodes[i];
            if let FlatOp::Pred(pi) = node.op {
                let got = self.predicates[pi].dim();
                if got != trace.dim() {
                    return Err(StlError::DimensionMismatch { node: i, got, expected: trace.dim() });
                }
            }
            let (clo, chi) = match node.op {
                FlatOp::Globally(a, b) | FlatOp::Eventually(a, b) => (lo[i] + a, hi[i] + b),
                _ => (lo[i], hi[i]),
            };
            if chi > last {
                return Err(StlError::WindowOutOfRange { node: i, op: node.op.name(), needed: chi, last });
            }
            for &c in &node.children {
                lo[c] = clo;
                hi[c] = chi;
            }
        }
        Ok((lo, hi))
    }

    fn forward(&self, trace: &Trace, k: usize, sem: Semantics) -> Result<Forward, StlError> {
        if let Semantics::Smooth { kappa } = sem {
            if !(kappa > 0.0 && kappa.is_finite()) {
                return Err(StlError::InvalidKappa(kappa));
            }
        }
        let (lo, hi) = self.ranges(trace, k)?;
        let n = self.nodes.len();
        let mut signals: Vec<Vec<f64>> = vec![Vec::new(); n];
        let mut scratch = Vec::new();
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            let len = hi[i] - lo[i] + 1;
            let mut out = Vec::with_capacity(len);
            match node.op {
                FlatOp::Pred(pi) => {
                    let p = &self.predicates[pi];
                    for t in lo[i]..=hi[i] {
                        out.push(p.eval(trace.sample(t)));
                    }
                }
                FlatOp::And | FlatOp::Or => {
                    for j in 0..len {
                        scratch.clear();
                        scratch.extend(node.children.iter().map(|&c| signals[c][j]));
                        out.push(aggregate(&scratch, node.op.is_min(), sem));
                    }
                }
                FlatOp::Globally(a, b) | FlatOp::Eventually(a, b) => {
                    let child = &signals[node.children[0]];
                    // child range starts at lo[i] + a
                    let width = b - a + 1;
                    if width > SLIDING_MIN_WIDTH && len > 1 {
                        out = sliding_aggregate(&child[..len + width - 1], width, node.op.is_min(), sem);
                    } else {
                        for j in 0..len {
                            out.push(aggregate(&child[j..j + width], node.op.is_min(), sem));
                        }
                    }
                }
            }
            signals[i] = out;
        }
        Ok(Forward { lo, signals })
    }

    pub fn evaluate(&self, trace: &Trace, k: usize, sem: Semantics) -> Result<f64, StlError> {
        Ok(self.forward(trace, k, sem)?.signals[0][0])
    }

    /// Value and gradient with respect to every trace entry. With
    /// [`Semantics::Exact`] the gradient is the subgradient that routes through
    /// the first minimising / maximising operand.
    pub fn evaluate_with_gradient(&self, trace: &Trace, k: usize, sem: Semantics) -> Result<SmoothEvaluation, StlError> {
        let fwd = self.forward(trace, k, sem)?;
        let n = self.nodes.len();
        let mut adj: Vec<Vec<f64>> = fwd.signals.iter().map(|s| vec![0.0; s.len()]).collect();
        adj[0][0] = 1.0;
        let mut gradient = vec![0.0; trace.data.len()];
        let dim = trace.dim();
        let mut scratch = Vec::new();
        let mut weights = Vec::new();
        for i in 0..n {
            let node = &self.nodes[i];
            let own = std::mem::take(&mut adj[i]);
            match node.op {
                FlatOp::Pred(pi) => {
                    let p = &self.predicates[pi];
                    for (j, &g) in own.iter().enumerate() {
                        if g == 0.0 {
                            continue;
                        }
                        let row = &mut gradient[(fwd.lo[i] + j) * dim..(fwd.lo[i] + j + 1) * dim];
                        for (r, c) in row.iter_mut().zip(&p.coefficients) {
                            *r += g * c;
                        }
                    }
                }
                FlatOp::And | FlatOp::Or => {
                    for (j, &g) in own.iter().enumerate() {
                        if g == 0.0 {
                            continue;
                        }
                        scratch.clear();
                        scratch.extend(node.children.iter().map(|&c| fwd.signals[c][j]));
                        aggregate_weights(&scratch, node.op.is_min(), sem, &mut weights);
                        for (ci, &c) in node.children.iter().enumerate() {
                            adj[c][j] += g * weights[ci];
                        }
                    }
                }
                FlatOp::Globally(a, b) | FlatOp::Eventually(a, b) => {
                    let c = node.children[0];
                    let width = b - a + 1;
                    if let Semantics::Smooth { kappa } = sem {
                        if width > SLIDING_MIN_WIDTH && own.len() > 1 {
                            let sign = if node.op.is_min() { -1.0 } else { 1.0 };
                            sliding_backward(&fwd.signals[c], &fwd.signals[i], &own, width, sign * kappa, &mut adj[c]);
                            continue;
                        }
                    }
                    for (j, &g) in own.iter().enumerate() {
                        if g == 0.0 {
                            continue;
                        }
                        aggregate_weights(&fwd.signals[c][j..j + width], node.op.is_min(), sem, &mut weights);
                        for (w, wt) in weights.iter().enumerate() {
                            adj[c][j + w] += g * wt;
                        }
                    }
                }
            }
        }
        Ok(SmoothEvaluation { value: fwd.signals[0][0], gradient })
    }
}

/// Windows at most this wide are aggregated directly.
const SLIDING_MIN_WIDTH: usize = 8;

/// `ln(e^a + e^b)`, with `-inf` as the identity.
fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + fmath::ln_1p(fmath::exp(lo - hi))
}

/// Folds every window of `width` consecutive values with an associative
/// operation in linear time: windows are split at multiples of `width` into
/// a block suffix and the next block's prefix.
fn sliding_fold(values: &[f64], width: usize, op: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let n = values.len();
    let mut prefix = values.to_vec();
    let mut suffix = values.to_vec();
    for i in 1..n {
        if i % width != 0 {
            prefix[i] = op(prefix[i - 1], values[i]);
        }
    }
    for i in (0..n.saturating_sub(1)).rev() {
        if (i + 1) % width != 0 {
            suffix[i] = op(values[i], suffix[i + 1]);
        }
    }
    (0..=n - width)
        .map(|j| if j % width == 0 { suffix[j] } else { op(suffix[j], prefix[j + width - 1]) })
        .collect()
}

/// Aggregates of all windows of `width` in `child`.
fn sliding_aggregate(child: &[f64], width: usize, is_min: bool, sem: Semantics) -> Vec<f64> {
    match sem {
        Semantics::Exact if is_min => sliding_fold(child, width, f64::min),
        Semantics::Exact => sliding_fold(child, width, f64::max),
        Semantics::Smooth { kappa } => {
            let k = if is_min { -kappa } else { kappa };
            let scaled: Vec<f64> = child.iter().map(|v| k * v).collect();
            sliding_fold(&scaled, width, lse2).into_iter().map(|l| l / k).collect()
        }
    }
}

/// Adjoint of [`sliding_aggregate`] under smooth semantics. Output `j`
/// passes `g_j exp(k (x_t - out_j))` to child sample `t`; adjoints are
/// non-negative, so the sum over windows covering `t` is itself a sliding
/// log-sum-exp.
fn sliding_backward(child: &[f64], out: &[f64], own: &[f64], width: usize, k: f64, adj: &mut [f64]) {
    let len = own.len();
    let n = len + width - 1;
    // log-terms over window starts, padded so every child sample sees `width` entries
    let mut terms = vec![f64::NEG_INFINITY; n + width - 1];
    for j in 0..len {
        if own[j] > 0.0 {
            terms[width - 1 + j] = fmath::ln(own[j]) - k * out[j];
        }
    }
    let covering = sliding_fold(&terms, width, lse2);
    for t in 0..n {
        if covering[t] > f64::NEG_INFINITY {
            adj[t] += fmath::exp(k * child[t] + covering[t]);
        }
    }
}

/// Stable log-sum-exp soft-max (or soft-min) of `values`.
fn aggregate(values: &[f64], is_min: bool, sem: Semantics) -> f64 {
    match sem {
        Semantics::Exact => {
            if is_min {
                values.iter().copied().fold(f64::INFINITY, f64::min)
            } else {
                values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            }
        }
        Semantics::Smooth { kappa } => {
            let sign = if is_min { -1.0 } else { 1.0 };
            let m = values.iter().map(|v| sign * v).fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = values.iter().map(|v| fmath::exp(kappa * (sign * v - m))).sum();
            sign * (m + fmath::ln(s) / kappa)
        }
    }
}

fn aggregate_weights(values: &[f64], is_min: bool, sem: Semantics, weights: &mut Vec<f64>) {
    weights.clear();
    match sem {
        Semantics::Exact => {
            let mut best = 0;
            for (i, v) in values.iter().enumerate() {
                let better = if is_min { *v < values[best] } else { *v > values[best] };
                if better {
                    best = i;
                }
            }
            weights.extend((0..values.len()).map(|i| if i == best { 1.0 } else { 0.0 }));
        }
        Semantics::Smooth { kappa } => {
            let sign = if is_min { -1.0 } else { 1.0 };
            let m = values.iter().map(|v| sign * v).fold(f64::NEG_INFINITY, f64::max);
            weights.extend(values.iter().map(|v| fmath::exp(kappa * (sign * v - m))));
            let s: f64 = weights.iter().sum();
            for w in weights.iter_mut() {
                *w /= s;
            }
        }
    }
}

/// Exact quantitative robustness of `formula` at step `k`.
pub fn robustness(formula: &StlFormula, trace: &Trace, k: usize) -> Result<f64, StlError> {
    CompiledFormula::new(formula)?.evaluate(trace, k, Semantics::Exact)
}

/// Log-sum-exp smoothed robustness with sharpness `kappa`.
pub fn smooth_robustness(formula: &StlFormula, trace: &Trace, k: usize, kappa: f64) -> Result<f64, StlError> {
    CompiledFormula::new(formula)?.evaluate(trace, k, Semantics::Smooth { kappa })
}

/// Smoothed robustness and its exact gradient with respect to the trace samples.
pub fn smooth_robustness_gradient(formula: &StlFormula, trace: &Trace, k: usize, kappa: f64) -> Result<SmoothEvaluation, StlError> {
    CompiledFormula::new(formula)?.evaluate_with_gradient(trace, k, Semantics::Smooth { kappa })
}
