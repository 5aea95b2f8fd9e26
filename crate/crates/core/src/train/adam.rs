use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(param_sizes: &[usize]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Applies one update. With `lr == 0` the moments advance but parameters are untouched.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[&[f64]], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Consistency(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.into_iter().enumerate() {
            let g = grads[i];
            if g.len() != p.len() || self.m[i].len() != p.len() {
                return Err(Error::dim("adam", p.shape(), &[g.len()]));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..g.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
            }
            if lr == 0.0 {
                continue;
            }
            let data = p.data_mut();
            for k in 0..g.len() {
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                data[k] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub(crate) fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_u64::<LittleEndian>(self.t)?;
        w.write_u32::<LittleEndian>(self.m.len() as u32)?;
        for (m, v) in self.m.iter().zip(&self.v) {
            w.write_u64::<LittleEndian>(m.len() as u64)?;
            for x in m.iter().chain(v) {
                w.write_f64::<LittleEndian>(*x)?;
            }
        }
        Ok(())
    }

    pub(crate) fn read_from<R: Read>(r: &mut R, param_sizes: &[usize]) -> Result<Self> {
        let mut adam = Adam::new(param_sizes);
        adam.t = r.read_u64::<LittleEndian>()?;
        let count = r.read_u32::<LittleEndian>()? as usize;
        if count != param_sizes.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer state has {count} tensors, model has {}",
                param_sizes.len()
            )));
        }
        for i in 0..count {
            let n = r.read_u64::<LittleEndian>()? as usize;
            if n != param_sizes[i] {
                return Err(Error::Checkpoint(format!("optimizer tensor {i} has {n} entries")));
            }
            r.read_f64_into::<LittleEndian>(&mut adam.m[i])?;
            r.read_f64_into::<LittleEndian>(&mut adam.v[i])?;
        }
        Ok(adam)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut adam = Adam::new(&[3]);
        adam.step(vec![&mut p], &[&[0.3, -4.0, 0.0]], 0.01).unwrap();
        // After bias correction the first step is lr * g / (|g| + eps).
        let expect = [1.0 - 0.01 * 0.3 / (0.3 + 1e-8), -2.0 + 0.01 * 4.0 / (4.0 + 1e-8), 0.5];
        for (a, b) in p.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_lr_is_bit_identical() {
        let orig = Tensor::new(vec![3], vec![-0.0, 1e-300, 7.0]).unwrap();
        let mut p = orig.clone();
        let mut adam = Adam::new(&[3]);
        for _ in 0..5 {
            adam.step(vec![&mut p], &[&[1.0, -1.0, 3.0]], 0.0).unwrap();
        }
        assert!(p.bit_eq(&orig));
        assert_eq!(adam.t, 5);
    }

    #[test]
    fn state_round_trip() {
        let mut p = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut adam = Adam::new(&[2]);
        adam.step(vec![&mut p], &[&[0.5, 0.25]], 0.1).unwrap();
        let mut buf = Vec::new();
        adam.write_to(&mut buf).unwrap();
        let back = Adam::read_from(&mut buf.as_slice(), &[2]).unwrap();
        assert_eq!(back, adam);
        assert!(Adam::read_from(&mut buf.as_slice(), &[3]).is_err());
    }
}
