//! Dense layers addressed by offsets into a flat parameter buffer.

use rand::Rng;

/// Location of one `out x in` weight matrix and its bias in a flat buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub n_in: usize,
    pub n_out: usize,
    pub weight: usize,
    pub bias: usize,
}

impl Linear {
    pub fn param_count(n_in: usize, n_out: usize) -> usize {
        n_in * n_out + n_out
    }

    pub(crate) fn at(offset: &mut usize, n_in: usize, n_out: usize) -> Self {
        let l = Self {
            n_in,
            n_out,
            weight: *offset,
            bias: *offset + n_in * n_out,
        };
        *offset += Self::param_count(n_in, n_out);
        l
    }

    pub fn end(&self) -> usize {
        self.bias + self.n_out
    }

    /// `out = W x + b`.
    #[inline]
    pub fn forward(&self, params: &[f64], x: &[f64], out: &mut [f64]) {
        let w = &params[self.weight..self.bias];
        let b = &params[self.bias..self.bias + self.n_out];
        for (o, (row, bias)) in out[..self.n_out].iter_mut().zip(w.chunks_exact(self.n_in).zip(b)) {
            *o = bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    /// Accumulates parameter gradients into `grads` and writes `dL/dx`
    /// into `dx` (when given).
    #[inline]
    pub fn backward(&self, params: &[f64], x: &[f64], dy: &[f64], grads: &mut [f64], dx: Option<&mut [f64]>) {
        let n_in = self.n_in;
        {
            let (gw, gb) = grads[self.weight..self.bias + self.n_out].split_at_mut(self.n_out * n_in);
            for (o, &g) in dy[..self.n_out].iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                gb[o] += g;
                for (gwi, xi) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(x) {
                    *gwi += g * xi;
                }
            }
        }
        if let Some(dx) = dx {
            let w = &params[self.weight..self.bias];
            dx[..n_in].iter_mut().for_each(|v| *v = 0.0);
            for (o, &g) in dy[..self.n_out].iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                for (d, wi) in dx[..n_in].iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                    *d += g * wi;
                }
            }
        }
    }

    /// Uniform `±1/sqrt(n_in)` weights, zero bias.
    pub(crate) fn init_uniform<R: Rng>(&self, params: &mut [f64], rng: &mut R) {
        let bound = 1.0 / (self.n_in as f64).sqrt();
        for w in &mut params[self.weight..self.bias] {
            *w = rng.random_range(-bound..bound);
        }
        params[self.bias..self.end()].iter_mut().for_each(|b| *b = 0.0);
    }

    pub(crate) fn init_zero(&self, params: &mut [f64]) {
        params[self.weight..self.end()].iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Two dense layers with a ReLU between them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TwoLayer {
    pub first: Linear,
    pub second: Linear,
}

impl TwoLayer {
    pub(crate) fn at(offset: &mut usize, n_in: usize, width: usize, n_out: usize) -> Self {
        let first = Linear::at(offset, n_in, width);
        let second = Linear::at(offset, width, n_out);
        Self { first, second }
    }

    /// Writes the post-ReLU hidden layer into `hidden` and the output into `out`.
    pub fn forward(&self, params: &[f64], x: &[f64], hidden: &mut [f64], out: &mut [f64]) {
        self.first.forward(params, x, hidden);
        hidden[..self.first.n_out].iter_mut().for_each(|h| *h = h.max(0.0));
        self.second.forward(params, hidden, out);
    }

    /// `hidden` is the activation recorded by [`Self::forward`]; `scratch`
    /// needs room for the hidden width.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        params: &[f64],
        x: &[f64],
        hidden: &[f64],
        dy: &[f64],
        grads: &mut [f64],
        scratch: &mut [f64],
        dx: Option<&mut [f64]>,
    ) {
        let width = self.first.n_out;
        let d_act = &mut scratch[..width];
        self.second.backward(params, hidden, dy, grads, Some(d_act));
        for (d, h) in d_act.iter_mut().zip(hidden) {
            if *h <= 0.0 {
                *d = 0.0;
            }
        }
        self.first.backward(params, x, d_act, grads, dx);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_layer_gradients_match_finite_differences() {
        let mut off = 0;
        let net = TwoLayer::at(&mut off, 5, 7, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = vec![0.0; off];
        net.first.init_uniform(&mut params, &mut rng);
        net.second.init_uniform(&mut params, &mut rng);
        for b in &mut params[net.first.bias..net.first.end()] {
            *b = rng.random_range(-0.3..0.3);
        }
        let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dy = [0.3, -1.2, 0.8];
        let loss = |p: &[f64], x: &[f64]| {
            let mut h = vec![0.0; 7];
            let mut o = vec![0.0; 3];
            net.forward(p, x, &mut h, &mut o);
            o.iter().zip(&dy).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut hidden = vec![0.0; 7];
        let mut out = vec![0.0; 3];
        net.forward(&params, &x, &mut hidden, &mut out);
        let mut grads = vec![0.0; off];
        let mut dx = vec![0.0; 5];
        net.backward(&params, &x, &hidden, &dy, &mut grads, &mut [0.0; 7], Some(&mut dx));
        let h = 1e-6;
        for k in 0..off {
            let mut pp = params.clone();
            let mut pm = params.clone();
            pp[k] += h;
            pm[k] -= h;
            let fd = (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * h);
            assert!((fd - grads[k]).abs() < 1e-7, "param {k}: {fd} vs {}", grads[k]);
        }
        for k in 0..5 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            let fd = (loss(&params, &xp) - loss(&params, &xm)) / (2.0 * h);
            assert!((fd - dx[k]).abs() < 1e-7);
        }
    }
}
