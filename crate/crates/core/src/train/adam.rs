use crate::error::{Error, Result};
use crate::nets::ParamStore;
use crate::tensor::Tensor;

/// Adam with bias-corrected moments, one buffer pair per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Restores saved moments; shapes must match the parameters.
    pub fn with_state(params: &ParamStore, lr: f64, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Result<Self> {
        let mut adam = Adam::new(params, lr);
        if m.len() != adam.m.len() || v.len() != adam.v.len() {
            return Err(Error::Checkpoint("optimizer state does not match the parameters".into()));
        }
        for ((a, b), (name, p)) in m.iter().zip(&v).zip(params.iter()) {
            if a.shape() != p.shape() || b.shape() != p.shape() {
                return Err(Error::Checkpoint(format!("optimizer state for {name} has the wrong shape")));
            }
        }
        adam.step = step;
        adam.m = m;
        adam.v = v;
        Ok(adam)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    /// One update. Nothing is modified if any new value would be non-finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::invalid("adam", format!("{} gradients for {} parameters", grads.len(), self.m.len())));
        }
        let t = self.step + 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powf(t as f64);
        let c2 = 1.0 - b2.powf(t as f64);
        let mut next = Vec::with_capacity(grads.len());
        for ((id, g), (m, v)) in params.ids().zip(grads).zip(self.m.iter().zip(&self.v)) {
            let p = params.get(id);
            if g.shape() != p.shape() {
                return Err(Error::shape("adam", p.shape(), g.shape()));
            }
            let n = p.numel();
            let (mut pn, mut mn, mut vn) = (vec![0.0f32; n], vec![0.0f32; n], vec![0.0f32; n]);
            for i in 0..n {
                let gi = g.data()[i] as f64;
                let mi = b1 * m.data()[i] as f64 + (1.0 - b1) * gi;
                let vi = b2 * v.data()[i] as f64 + (1.0 - b2) * gi * gi;
                let upd = self.lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                pn[i] = (p.data()[i] as f64 - upd) as f32;
                mn[i] = mi as f32;
                vn[i] = vi as f32;
            }
            if !pn.iter().chain(&mn).chain(&vn).all(|x| x.is_finite()) {
                return Err(Error::NonFinite(format!("parameter {} after the optimizer step", params.name(id))));
            }
            next.push((pn, mn, vn));
        }
        for (i, (id, (pn, mn, vn))) in params.ids().collect::<Vec<_>>().into_iter().zip(next).enumerate() {
            params.get_mut(id).data_mut().copy_from_slice(&pn);
            self.m[i].data_mut().copy_from_slice(&mn);
            self.v[i].data_mut().copy_from_slice(&vn);
        }
        self.step = t;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a", Tensor::from_fn([3], |i| i as f32 - 1.0));
        s.add("b", Tensor::full([2, 2], 0.5));
        s
    }

    #[test]
    fn zero_gradient_keeps_parameters_and_decays_moments() {
        let mut p = store();
        let before = p.clone();
        let mut adam = Adam::new(&p, 0.1);
        let g = vec![Tensor::ones([3]), Tensor::ones([2, 2])];
        adam.step(&mut p, &g).unwrap();
        let (m1, v1) = (adam.first_moments().to_vec(), adam.second_moments().to_vec());
        let snapshot = p.clone();
        let zero = vec![Tensor::zeros([3]), Tensor::zeros([2, 2])];
        adam.step(&mut p, &zero).unwrap();
        // moments decay geometrically, the update is the decayed momentum
        for (a, b) in adam.first_moments().iter().zip(&m1) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| (x - 0.9 * y).abs() < 1e-8));
        }
        for (a, b) in adam.second_moments().iter().zip(&v1) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| (x - 0.999 * y).abs() < 1e-9));
        }
        assert_ne!(p.get(p.find("a").unwrap()), snapshot.get(p.find("a").unwrap()));

        let mut fresh = before.clone();
        let mut adam = Adam::new(&fresh, 0.1);
        adam.step(&mut fresh, &zero).unwrap();
        assert_eq!(fresh.get(fresh.find("b").unwrap()), before.get(before.find("b").unwrap()));
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = store();
        let mut adam = Adam::new(&p, 0.01);
        let g = vec![Tensor::new([3], vec![2.0, -3.0, 0.5]).unwrap(), Tensor::ones([2, 2])];
        adam.step(&mut p, &g).unwrap();
        let a = p.get(p.find("a").unwrap()).data().to_vec();
        for (got, (x, s)) in a.iter().zip([(-1.0f32, 1.0f32), (0.0, -1.0), (1.0, 1.0)]) {
            assert!((got - (x - 0.01 * s)).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_rate_is_bit_identical_and_nan_is_refused() {
        let mut p = store();
        let before = p.clone();
        let mut adam = Adam::new(&p, 0.0);
        adam.step(&mut p, &[Tensor::ones([3]), Tensor::full([2, 2], -4.0)]).unwrap();
        for ((_, a), (_, b)) in p.iter().zip(before.iter()) {
            assert_eq!(a.data(), b.data());
        }
        let mut adam = Adam::new(&p, 0.1);
        let bad = [Tensor::full([3], f32::NAN), Tensor::zeros([2, 2])];
        assert!(matches!(adam.step(&mut p, &bad), Err(Error::NonFinite(_))));
        assert_eq!(adam.step_count(), 0);
        assert!(adam.step(&mut p, &bad[..1]).is_err());
    }
}
