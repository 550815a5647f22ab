use super::{Real, Result, TensorError};

pub(crate) type NodeId = usize;

#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Constant,
    MatMul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Affine { x: NodeId, scale: T, shift: T },
    Sin(NodeId),
    Cos(NodeId),
    Sigmoid(NodeId),
    Ln(NodeId),
    Clamp { x: NodeId, lo: T, hi: T },
    SumTo { x: NodeId },
    BroadcastTo { x: NodeId },
    SquaredError(NodeId, NodeId),
}

impl<T> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Affine { .. } => "affine",
            Op::Sin(_) => "sin",
            Op::Cos(_) => "cos",
            Op::Sigmoid(_) => "sigmoid",
            Op::Ln(_) => "ln",
            Op::Clamp { .. } => "clamp",
            Op::SumTo { .. } => "sum_to",
            Op::BroadcastTo { .. } => "broadcast_to",
            Op::SquaredError(..) => "squared_error",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Leaf | Op::Constant => vec![],
            Op::MatMul { a, b, .. } => vec![a, b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![a, b],
            Op::SquaredError(a, b) => vec![a, b],
            Op::Affine { x, .. }
            | Op::Clamp { x, .. }
            | Op::SumTo { x }
            | Op::BroadcastTo { x }
            | Op::Sin(x)
            | Op::Cos(x)
            | Op::Sigmoid(x)
            | Op::Ln(x) => vec![x],
        }
    }
}

/// Result shape of a broadcast binary op: the shorter shape must be a suffix
/// of the longer one.
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if long[long.len() - short.len()..] == *short {
        Ok(long.to_vec())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

pub(crate) fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

fn binary<T: Real>(a: &[T], b: &[T], n: usize, f: impl Fn(T, T) -> T) -> Vec<T> {
    if a.len() == n && b.len() == n {
        a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    } else {
        let (na, nb) = (a.len(), b.len());
        (0..n).map(|i| f(a[i % na], b[i % nb])).collect()
    }
}

/// Evaluates one operation. `inputs` holds (values, shape) of each input in
/// the order of [`Op::inputs`]; `out_shape` is the precomputed result shape.
pub(crate) fn eval<T: Real>(op: &Op<T>, inputs: &[(&[T], &[usize])], out_shape: &[usize]) -> Vec<T> {
    let n: usize = out_shape.iter().product();
    match *op {
        Op::Leaf | Op::Constant => unreachable!("leaves are not evaluated"),
        Op::MatMul { ta, tb, .. } => {
            let (a, sa) = inputs[0];
            let (b, _) = inputs[1];
            let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
            let nn = out_shape[1];
            let mut c = vec![T::zero(); m * nn];
            T::gemm(m, k, nn, a, ta, b, tb, &mut c);
            c
        }
        Op::Add(..) => binary(inputs[0].0, inputs[1].0, n, |x, y| x + y),
        Op::Sub(..) => binary(inputs[0].0, inputs[1].0, n, |x, y| x - y),
        Op::Mul(..) => binary(inputs[0].0, inputs[1].0, n, |x, y| x * y),
        Op::Div(..) => binary(inputs[0].0, inputs[1].0, n, |x, y| x / y),
        Op::Affine { scale, shift, .. } => inputs[0].0.iter().map(|&v| v * scale + shift).collect(),
        Op::Sin(_) => inputs[0].0.iter().map(|v| v.sin()).collect(),
        Op::Cos(_) => inputs[0].0.iter().map(|v| v.cos()).collect(),
        Op::Sigmoid(_) => inputs[0].0.iter().map(|&v| sigmoid(v)).collect(),
        Op::Ln(_) => inputs[0].0.iter().map(|v| v.ln()).collect(),
        Op::Clamp { lo, hi, .. } => inputs[0].0.iter().map(|&v| v.max(lo).min(hi)).collect(),
        Op::SumTo { .. } => {
            let x = inputs[0].0;
            let mut out = vec![T::zero(); n];
            for chunk in x.chunks(n.max(1)) {
                for (o, &v) in out.iter_mut().zip(chunk) {
                    *o = *o + v;
                }
            }
            out
        }
        Op::BroadcastTo { .. } => {
            let x = inputs[0].0;
            let m = x.len();
            (0..n).map(|i| x[i % m]).collect()
        }
        Op::SquaredError(..) => {
            let s = inputs[0]
                .0
                .iter()
                .zip(inputs[1].0)
                .fold(T::zero(), |acc, (&p, &t)| acc + (p - t) * (p - t));
            vec![s]
        }
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
