//! Element-wise ops, reductions and layout ops.

use super::tape::{Tape, Var};
use super::Real;

/// Standard normal pdf, used by the GELU derivative.
fn std_normal_pdf<R: Real>(x: R) -> R {
    R::of(std::f64::consts::FRAC_2_SQRT_PI * 0.5 * std::f64::consts::FRAC_1_SQRT_2) * (-(x * x) * R::of(0.5)).exp()
}

pub fn gelu_scalar<R: Real>(x: R) -> R {
    R::of(0.5) * x * (R::one() + (x * R::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad_scalar<R: Real>(x: R) -> R {
    let cdf = R::of(0.5) * (R::one() + (x * R::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    cdf + x * std_normal_pdf(x)
}

impl<R: Real> Tape<R> {
    /// Element-wise map with derivative `df(x, y)` where `y = f(x)`.
    pub fn unary(&mut self, a: Var, f: impl Fn(R) -> R, df: fn(R, R) -> R) -> Var {
        let value: Vec<R> = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.custom(
            &[a],
            shape,
            value,
            Box::new(move |ctx| {
                let g = ctx
                    .inputs[0]
                    .iter()
                    .zip(ctx.output)
                    .zip(ctx.grad)
                    .map(|((&x, &y), &g)| g * df(x, y))
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    fn check_same(&self, a: Var, b: Var, op: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{op}: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "add");
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.custom(
            &[a, b],
            shape,
            value,
            Box::new(|ctx| {
                let g = ctx.grad.to_vec();
                vec![ctx.needs[0].then(|| g.clone()), ctx.needs[1].then_some(g)]
            }),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "sub");
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.custom(
            &[a, b],
            shape,
            value,
            Box::new(|ctx| {
                vec![
                    ctx.needs[0].then(|| ctx.grad.to_vec()),
                    ctx.needs[1].then(|| ctx.grad.iter().map(|&g| -g).collect()),
                ]
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "mul");
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.custom(
            &[a, b],
            shape,
            value,
            Box::new(|ctx| {
                let ga = ctx.needs[0].then(|| {
                    ctx.grad
                        .iter()
                        .zip(ctx.inputs[1])
                        .map(|(&g, &y)| g * y)
                        .collect()
                });
                let gb = ctx.needs[1].then(|| {
                    ctx.grad
                        .iter()
                        .zip(ctx.inputs[0])
                        .map(|(&g, &x)| g * x)
                        .collect()
                });
                vec![ga, gb]
            }),
        )
    }

    /// Sum of a list of same-shaped nodes.
    pub fn add_n(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "add_n of nothing");
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = self.add(acc, x);
        }
        acc
    }

    pub fn scale(&mut self, a: Var, c: R) -> Var {
        let value = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.custom(
            &[a],
            shape,
            value,
            Box::new(move |ctx| vec![Some(ctx.grad.iter().map(|&g| g * c).collect())]),
        )
    }

    pub fn add_scalar(&mut self, a: Var, c: R) -> Var {
        let value = self.value(a).iter().map(|&x| x + c).collect();
        let shape = self.shape(a).to_vec();
        self.custom(
            &[a],
            shape,
            value,
            Box::new(|ctx| vec![Some(ctx.grad.to_vec())]),
        )
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -R::one())
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x, _| x + x)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), |_, y| y)
    }

    /// `ln(max(x, floor))`; zero gradient below the floor.
    pub fn ln_floor(&mut self, a: Var, floor: R) -> Var {
        let value = self
            .value(a)
            .iter()
            .map(|&x| x.max(floor).ln())
            .collect();
        let shape = self.shape(a).to_vec();
        self.custom(
            &[a],
            shape,
            value,
            Box::new(move |ctx| {
                let g = ctx
                    .inputs[0]
                    .iter()
                    .zip(ctx.grad)
                    .map(|(&x, &g)| if x > floor { g / x } else { R::zero() })
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), |x, _| {
            if x > R::zero() {
                R::one()
            } else if x < R::zero() {
                -R::one()
            } else {
                R::zero()
            }
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| x.max(R::zero()),
            |x, _| if x > R::zero() { R::one() } else { R::zero() },
        )
    }

    pub fn leaky_relu(&mut self, a: Var, slope: R) -> Var {
        let value = self
            .value(a)
            .iter()
            .map(|&x| if x >= R::zero() { x } else { x * slope })
            .collect();
        let shape = self.shape(a).to_vec();
        self.custom(
            &[a],
            shape,
            value,
            Box::new(move |ctx| {
                let g = ctx
                    .inputs[0]
                    .iter()
                    .zip(ctx.grad)
                    .map(|(&x, &g)| if x >= R::zero() { g } else { g * slope })
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    /// GELU with the exact Gaussian CDF.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu_scalar, |x, _| gelu_grad_scalar(x))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.cos(), |x, _| -x.sin())
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.sin(), |x, _| x.cos())
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum::<R>();
        let n = self.value(a).len();
        self.custom(
            &[a],
            vec![1],
            vec![s],
            Box::new(move |ctx| vec![Some(vec![ctx.grad[0]; n])]),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let inv = R::one() / R::of(n as f64);
        let s = self.value(a).iter().copied().sum::<R>() * inv;
        self.custom(
            &[a],
            vec![1],
            vec![s],
            Box::new(move |ctx| vec![Some(vec![ctx.grad[0] * inv; n])]),
        )
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let d2 = self.square(d);
        self.mean(d2)
    }

    /// Mean absolute difference.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let d = self.abs(d);
        self.mean(d)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.value(a).len(),
            "reshape: element count mismatch"
        );
        let value = self.value(a).to_vec();
        self.custom(
            &[a],
            shape.to_vec(),
            value,
            Box::new(|ctx| vec![Some(ctx.grad.to_vec())]),
        )
    }

    /// Transpose of a rank-2 node.
    pub fn transpose(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        assert_eq!(shape.len(), 2, "transpose expects rank 2");
        let (rows, cols) = (shape[0], shape[1]);
        let value = transpose_buf(self.value(a), rows, cols);
        self.custom(
            &[a],
            vec![cols, rows],
            value,
            Box::new(move |ctx| vec![Some(transpose_buf(ctx.grad, cols, rows))]),
        )
    }

    /// Selects `index` along the leading axis.
    pub fn select(&mut self, a: Var, index: usize) -> Var {
        let shape = self.shape(a).to_vec();
        let inner: usize = shape[1..].iter().product();
        assert!(index < shape[0], "select: index out of range");
        let value = self.value(a)[index * inner..(index + 1) * inner].to_vec();
        let total = self.value(a).len();
        self.custom(
            &[a],
            if shape.len() > 1 {
                shape[1..].to_vec()
            } else {
                vec![1]
            },
            value,
            Box::new(move |ctx| {
                let mut g = vec![R::zero(); total];
                g[index * inner..(index + 1) * inner].copy_from_slice(ctx.grad);
                vec![Some(g)]
            }),
        )
    }

    /// Stacks same-shaped nodes along a new leading axis.
    pub fn stack(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let inner_shape = self.shape(xs[0]).to_vec();
        let inner = self.value(xs[0]).len();
        let mut value = Vec::with_capacity(inner * xs.len());
        for &x in xs {
            assert_eq!(self.shape(x), inner_shape.as_slice(), "stack: shape mismatch");
            value.extend_from_slice(self.value(x));
        }
        let mut shape = vec![xs.len()];
        shape.extend(inner_shape);
        let count = xs.len();
        self.custom(
            xs,
            shape,
            value,
            Box::new(move |ctx| {
                (0..count)
                    .map(|k| ctx.needs[k].then(|| ctx.grad[k * inner..(k + 1) * inner].to_vec()))
                    .collect()
            }),
        )
    }
}

pub(crate) fn transpose_buf<R: Real>(x: &[R], rows: usize, cols: usize) -> Vec<R> {
    let mut out = vec![R::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_and_leaky_values() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        assert!((gelu_scalar(1.0f64) - 0.841_344_746_068_542_9).abs() < 1e-12);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&[2], vec![-1.0, 2.0]);
        let y = tape.leaky_relu(x, 0.1);
        assert_eq!(tape.value(y), &[-0.1, 2.0]);
    }

    #[test]
    fn mean_backward_spreads_evenly() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(&[4], vec![1.0, 2.0, 3.0, 4.0]);
        let m = tape.mean(x);
        assert_eq!(tape.scalar(m), 2.5);
        let g = tape.backward(m);
        assert_eq!(g.get(x).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(&[2], vec![1.0, 2.0]);
        let c = tape.constant(&[2], vec![3.0, 4.0]);
        let y = tape.mul(x, c);
        let s = tape.sum(y);
        let g = tape.backward(s);
        assert_eq!(g.get(x).unwrap(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }
}
