use crate::float::Float;
use crate::param::{join, Module, Param};

#[derive(Clone, Debug)]
pub struct LayerNorm<T> {
    pub gain: Param<T>,
    pub shift: Param<T>,
    pub dim: usize,
    pub eps: f64,
}

pub struct LayerNormCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

impl<T: Float> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self { gain: Param::filled(&[dim], T::one()), shift: Param::zeros(&[dim]), dim, eps: 1e-5 }
    }

    pub fn forward(&self, x: &[T]) -> (Vec<T>, LayerNormCache<T>) {
        let d = self.dim;
        let rows = x.len() / d;
        let mut y = vec![T::zero(); x.len()];
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); rows];
        let inv_d = T::one() / T::lit(d as f64);
        let eps = T::lit(self.eps);
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                y[r * d + j] = h * self.gain.value[j] + self.shift.value[j];
            }
        }
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&mut self, cache: &LayerNormCache<T>, dy: &[T], train: bool) -> Vec<T> {
        let d = self.dim;
        let rows = dy.len() / d;
        let inv_d = T::one() / T::lit(d as f64);
        let mut dx = vec![T::zero(); dy.len()];
        let mut dxhat = vec![T::zero(); d];
        for r in 0..rows {
            let dyr = &dy[r * d..(r + 1) * d];
            let xh = &cache.xhat[r * d..(r + 1) * d];
            if train {
                for j in 0..d {
                    self.gain.grad[j] += dyr[j] * xh[j];
                    self.shift.grad[j] += dyr[j];
                }
            }
            let mut mean_dxhat = T::zero();
            let mut mean_dxhat_xhat = T::zero();
            for j in 0..d {
                dxhat[j] = dyr[j] * self.gain.value[j];
                mean_dxhat += dxhat[j];
                mean_dxhat_xhat += dxhat[j] * xh[j];
            }
            mean_dxhat *= inv_d;
            mean_dxhat_xhat *= inv_d;
            let rs = cache.rstd[r];
            for j in 0..d {
                dx[r * d + j] = rs * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
            }
        }
        dx
    }
}

impl<T: Float> Module<T> for LayerNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "gain"), &self.gain);
        f(&join(prefix, "shift"), &self.shift);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "gain"), &mut self.gain);
        f(&join(prefix, "shift"), &mut self.shift);
    }
}
