use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor, Var};

/// Negative slope of [`UnaryOp::LeakyRelu`].
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryOp {
    Exp,
    Log,
    Sqrt,
    Neg,
    Square,
    Sigmoid,
    Swish,
    LeakyRelu,
    AddScalar(f64),
    MulScalar(f64),
    PowScalar(f64),
}

fn sigmoid<T: Float>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl BinaryOp {
    fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
            BinaryOp::Pow => "pow",
        }
    }

    fn apply<T: Float>(self, a: T, b: T) -> T {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
            BinaryOp::Pow => a.powf(b),
        }
    }

    /// Partial derivatives (d/da, d/db) at (a, b) with output y.
    fn partials<T: Float>(self, a: T, b: T, y: T) -> (T, T) {
        match self {
            BinaryOp::Add => (T::one(), T::one()),
            BinaryOp::Sub => (T::one(), -T::one()),
            BinaryOp::Mul => (b, a),
            BinaryOp::Div => (T::one() / b, -y / b),
            BinaryOp::Pow => {
                let db = if a > T::zero() { y * a.ln() } else { T::zero() };
                (b * a.powf(b - T::one()), db)
            }
        }
    }
}

impl UnaryOp {
    fn apply<T: Float>(self, x: T) -> T {
        match self {
            UnaryOp::Exp => x.exp(),
            UnaryOp::Log => x.ln(),
            UnaryOp::Sqrt => x.sqrt(),
            UnaryOp::Neg => -x,
            UnaryOp::Square => x * x,
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Swish => x * sigmoid(x),
            UnaryOp::LeakyRelu => {
                if x >= T::zero() {
                    x
                } else {
                    x * T::of(LEAKY_SLOPE)
                }
            }
            UnaryOp::AddScalar(c) => x + T::of(c),
            UnaryOp::MulScalar(c) => x * T::of(c),
            UnaryOp::PowScalar(p) => x.powf(T::of(p)),
        }
    }

    fn derivative<T: Float>(self, x: T, y: T) -> T {
        match self {
            UnaryOp::Exp => y,
            UnaryOp::Log => T::one() / x,
            UnaryOp::Sqrt => T::of(0.5) / y,
            UnaryOp::Neg => -T::one(),
            UnaryOp::Square => T::of(2.0) * x,
            UnaryOp::Sigmoid => y * (T::one() - y),
            UnaryOp::Swish => {
                let s = sigmoid(x);
                s + x * s * (T::one() - s)
            }
            UnaryOp::LeakyRelu => {
                if x >= T::zero() {
                    T::one()
                } else {
                    T::of(LEAKY_SLOPE)
                }
            }
            UnaryOp::AddScalar(_) => T::one(),
            UnaryOp::MulScalar(c) => T::of(c),
            UnaryOp::PowScalar(p) => T::of(p) * x.powf(T::of(p - 1.0)),
        }
    }
}

#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    ScalarLhs,
    ScalarRhs,
}

impl<'g, T: Float> Var<'g, T> {
    pub fn binary(self, op: BinaryOp, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        let a = self.value();
        let b = rhs.value();
        let mode = if a.shape() == b.shape() {
            Broadcast::Same
        } else if a.numel() == 1 {
            Broadcast::ScalarLhs
        } else if b.numel() == 1 {
            Broadcast::ScalarRhs
        } else {
            return Err(Error::shape(op.name(), a.shape(), b.shape()));
        };
        let (shape, n) = match mode {
            Broadcast::ScalarLhs => (b.shape().to_vec(), b.numel()),
            _ => (a.shape().to_vec(), a.numel()),
        };
        let pick = move |t: &Tensor<T>, i: usize| if t.numel() == 1 { t.data()[0] } else { t.data()[i] };
        let data = (0..n).map(|i| op.apply(pick(&a, i), pick(&b, i))).collect();
        let out = Tensor::from_parts(shape, data);

        Ok(self.graph().record(
            out,
            &[self, rhs],
            Box::new(move |ctx| {
                let (a, b, y, g) = (ctx.input(0), ctx.input(1), ctx.output, ctx.grad);
                let mut ga = vec![T::zero(); a.numel()];
                let mut gb = vec![T::zero(); b.numel()];
                for i in 0..y.numel() {
                    let (ai, bi) = match mode {
                        Broadcast::Same => (i, i),
                        Broadcast::ScalarLhs => (0, i),
                        Broadcast::ScalarRhs => (i, 0),
                    };
                    let (da, db) = op.partials(a.data()[ai], b.data()[bi], y.data()[i]);
                    if ctx.needs[0] {
                        ga[ai] += g.data()[i] * da;
                    }
                    if ctx.needs[1] {
                        gb[bi] += g.data()[i] * db;
                    }
                }
                vec![
                    Some(Tensor::from_parts(a.shape().to_vec(), ga)),
                    Some(Tensor::from_parts(b.shape().to_vec(), gb)),
                ]
            }),
        ))
    }

    pub fn unary(self, op: UnaryOp) -> Var<'g, T> {
        if matches!(op, UnaryOp::LeakyRelu) {
            return self.leaky_relu();
        }
        let out = self.value().map(|v| op.apply(v));
        self.graph().record(
            out,
            &[self],
            Box::new(move |ctx| {
                let (x, y, g) = (ctx.input(0), ctx.output, ctx.grad);
                let data = x
                    .data()
                    .iter()
                    .zip(y.data())
                    .zip(g.data())
                    .map(|((&xi, &yi), &gi)| gi * op.derivative(xi, yi))
                    .collect();
                vec![Some(Tensor::from_parts(x.shape().to_vec(), data))]
            }),
        )
    }

    pub fn add(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(BinaryOp::Add, rhs)
    }

    pub fn sub(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(BinaryOp::Sub, rhs)
    }

    pub fn mul(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(BinaryOp::Mul, rhs)
    }

    pub fn div(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(BinaryOp::Div, rhs)
    }

    pub fn pow(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(BinaryOp::Pow, rhs)
    }

    pub fn exp(self) -> Var<'g, T> {
        self.unary(UnaryOp::Exp)
    }

    pub fn log(self) -> Var<'g, T> {
        self.unary(UnaryOp::Log)
    }

    pub fn sqrt(self) -> Var<'g, T> {
        self.unary(UnaryOp::Sqrt)
    }

    pub fn neg(self) -> Var<'g, T> {
        self.unary(UnaryOp::Neg)
    }

    pub fn square(self) -> Var<'g, T> {
        self.unary(UnaryOp::Square)
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        self.unary(UnaryOp::Sigmoid)
    }

    pub fn swish(self) -> Var<'g, T> {
        self.unary(UnaryOp::Swish)
    }

    pub fn leaky_relu(self) -> Var<'g, T> {
        let x = self.value();
        let positive: Vec<bool> = match self
            .graph()
            .piece_codes(|| x.data().iter().map(|v| u64::from(*v > T::zero())).collect())
        {
            Some(codes) => codes.iter().map(|&c| c == 1).collect(),
            None => x.data().iter().map(|v| *v > T::zero()).collect(),
        };
        let slope = T::of(LEAKY_SLOPE);
        let out = x.data().iter().zip(&positive).map(|(&v, &p)| if p { v } else { v * slope }).collect();
        self.graph().record(
            Tensor::from_parts(x.shape().to_vec(), out),
            &[self],
            Box::new(move |ctx| {
                let g = ctx.grad.data().iter().zip(&positive);
                let data = g.map(|(&gi, &p)| if p { gi } else { gi * slope }).collect();
                vec![Some(Tensor::from_parts(ctx.grad.shape().to_vec(), data))]
            }),
        )
    }

    pub fn add_scalar(self, c: f64) -> Var<'g, T> {
        self.unary(UnaryOp::AddScalar(c))
    }

    pub fn mul_scalar(self, c: f64) -> Var<'g, T> {
        self.unary(UnaryOp::MulScalar(c))
    }

    pub fn powf(self, p: f64) -> Var<'g, T> {
        self.unary(UnaryOp::PowScalar(p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Graph};

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn add_vectors() {
        let g = Graph::<f32>::new();
        let a = g.constant(Tensor::new([2], vec![1.0, 2.0]).unwrap());
        let b = g.constant(Tensor::new([2], vec![3.0, 4.0]).unwrap());
        assert_eq!(a.add(b).unwrap().value().data(), &[4.0, 6.0]);
    }

    #[test]
    fn scalar_broadcast_both_sides() {
        let g = Graph::<f64>::new();
        let a = g.param(t(&[3], &[1., 2., 3.]));
        let s = g.param(Tensor::scalar(2.0));
        let y = s.sub(a).unwrap();
        assert_eq!(y.value().data(), &[1., 0., -1.]);
        let z = a.div(s).unwrap();
        assert_eq!(z.value().data(), &[0.5, 1., 1.5]);
        z.sum_all().backward().unwrap();
        // d/ds sum(a/s) = -sum(a)/s^2
        assert!((s.grad().unwrap().data()[0] + 6.0 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([3, 2]));
        let msg = a.mul(b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn swish_at_zero() {
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::scalar(0.0));
        assert_eq!(x.swish().value().data()[0], 0.0);
    }

    #[test]
    fn swish_derivative_matches_central_difference_at_one() {
        let swish = |x: f64| x / (1.0 + (-x).exp());
        let h = 1e-3;
        let fd = (swish(1.0 + h) - swish(1.0 - h)) / (2.0 * h);
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(1.0));
        x.swish().backward().unwrap();
        let analytic = x.grad().unwrap().data()[0];
        assert!(((analytic - fd) / analytic).abs() < 1e-4);
        // in single precision as well
        let g = Graph::<f32>::new();
        let x = g.param(Tensor::scalar(1.0f32));
        x.swish().backward().unwrap();
        let a32 = x.grad().unwrap().data()[0] as f64;
        assert!(((a32 - fd) / fd).abs() < 1e-4);
    }

    #[test]
    fn leaky_relu_slope() {
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::new([2], vec![-1.0, 2.0]).unwrap());
        assert_eq!(x.leaky_relu().value().data(), &[-0.2, 2.0]);
    }

    #[test]
    fn every_unary_and_binary_op_passes_grad_check() {
        use rand::SeedableRng;
        let unary = [
            UnaryOp::Exp,
            UnaryOp::Neg,
            UnaryOp::Square,
            UnaryOp::Sigmoid,
            UnaryOp::Swish,
            UnaryOp::LeakyRelu,
            UnaryOp::AddScalar(0.3),
            UnaryOp::MulScalar(-1.7),
        ];
        for seed in 0..5 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f64>::randn([3, 4], &mut rng).map(|v| if v.abs() < 1e-2 { v + 0.05 } else { v });
            let w = Tensor::<f64>::randn([3, 4], &mut rng);
            for op in unary {
                let w = w.clone();
                let err = grad_check(
                    |g, x| {
                        let c = g.constant(w.clone());
                        x.unary(op).mul(c).unwrap().sum_all()
                    },
                    &x,
                    1e-3,
                )
                .unwrap();
                assert!(err < 1e-4, "{op:?} seed {seed}: {err}");
            }
            // positive-domain ops
            let xp = x.map(|v| v.abs() + 0.5);
            for op in [UnaryOp::Log, UnaryOp::Sqrt, UnaryOp::PowScalar(1.5)] {
                let w = w.clone();
                let err = grad_check(
                    |g, x| x.unary(op).mul(g.constant(w.clone())).unwrap().sum_all(),
                    &xp,
                    1e-3,
                )
                .unwrap();
                assert!(err < 1e-4, "{op:?} seed {seed}: {err}");
            }
            let other = Tensor::<f64>::randn([3, 4], &mut rng).map(|v| v.abs() + 0.5);
            for op in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div, BinaryOp::Pow] {
                let (o1, o2) = (other.clone(), other.clone());
                let base = if op == BinaryOp::Pow { xp.clone() } else { x.clone() };
                let lhs = grad_check(
                    |g, x| x.binary(op, g.constant(o1.clone())).unwrap().sum_all(),
                    &base,
                    1e-3,
                )
                .unwrap();
                let rhs = grad_check(
                    |g, y| g.constant(o2.map(|v| v + 0.1)).binary(op, y).unwrap().sum_all(),
                    &other,
                    1e-3,
                )
                .unwrap();
                assert!(lhs < 1e-4 && rhs < 1e-4, "{op:?} seed {seed}: {lhs} {rhs}");
            }
        }
    }
}
