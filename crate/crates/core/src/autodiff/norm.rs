use super::tape::{Tape, Var};
use super::Real;

impl<R: Real> Tape<R> {
    /// Layer normalization over the channel axis of a `[C, T]` node, independently
    /// for every time step, followed by a per-channel affine transform.
    pub fn layer_norm(&mut self, input: Var, gain: Var, bias: Var, eps: R) -> Var {
        let shape = self.shape(input).to_vec();
        assert_eq!(shape.len(), 2, "layer_norm expects [C, T]");
        let (c, t) = (shape[0], shape[1]);
        assert!(c >= 1, "layer_norm needs at least one channel");
        assert!(eps > R::zero(), "layer_norm eps must be positive");
        assert_eq!(self.shape(gain), &[c]);
        assert_eq!(self.shape(bias), &[c]);

        let x = self.value(input);
        let (gm, bs) = (self.value(gain), self.value(bias));
        let inv_c = R::one() / R::of(c as f64);
        let mut xhat = vec![R::zero(); c * t];
        let mut rstd = vec![R::zero(); t];
        for ti in 0..t {
            let mean = (0..c).map(|ci| x[ci * t + ti]).sum::<R>() * inv_c;
            let var = (0..c)
                .map(|ci| {
                    let d = x[ci * t + ti] - mean;
                    d * d
                })
                .sum::<R>()
                * inv_c;
            let r = R::one() / (var + eps).sqrt();
            rstd[ti] = r;
            for ci in 0..c {
                xhat[ci * t + ti] = (x[ci * t + ti] - mean) * r;
            }
        }
        let value = (0..c * t)
            .map(|i| xhat[i] * gm[i / t] + bs[i / t])
            .collect();
        self.custom(
            &[input, gain, bias],
            shape,
            value,
            Box::new(move |ctx| {
                let (g, gm) = (ctx.grad, ctx.inputs[1]);
                let dx = ctx.needs[0].then(|| {
                    let mut dx = vec![R::zero(); c * t];
                    for ti in 0..t {
                        let mut mean_d = R::zero();
                        let mut mean_dx = R::zero();
                        for ci in 0..c {
                            let d = g[ci * t + ti] * gm[ci];
                            mean_d = mean_d + d;
                            mean_dx = mean_dx + d * xhat[ci * t + ti];
                        }
                        mean_d = mean_d * inv_c;
                        mean_dx = mean_dx * inv_c;
                        for ci in 0..c {
                            let i = ci * t + ti;
                            let d = g[i] * gm[ci];
                            dx[i] = rstd[ti] * (d - mean_d - xhat[i] * mean_dx);
                        }
                    }
                    dx
                });
                let dgain = ctx.needs[1].then(|| {
                    (0..c)
                        .map(|ci| (0..t).map(|ti| g[ci * t + ti] * xhat[ci * t + ti]).sum())
                        .collect()
                });
                let dbias = ctx.needs[2]
                    .then(|| g.chunks(t).map(|row| row.iter().copied().sum()).collect());
                vec![dx, dgain, dbias]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_channels_normalize_to_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&[3, 2], vec![5.0; 6]);
        let g = tape.constant(&[3], vec![1.0; 3]);
        let b = tape.constant(&[3], vec![0.0; 3]);
        let y = tape.layer_norm(x, g, b, 1e-5);
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn already_normalized_input() {
        let eps = 1e-5;
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&[2, 1], vec![1.0, -1.0]);
        let g = tape.constant(&[2], vec![1.0; 2]);
        let b = tape.constant(&[2], vec![0.0; 2]);
        let y = tape.layer_norm(x, g, b, eps);
        let s = 1.0 / (1.0f64 + eps).sqrt();
        assert!((tape.value(y)[0] - s).abs() < 1e-15);
        assert!((tape.value(y)[1] + s).abs() < 1e-15);
    }
}
