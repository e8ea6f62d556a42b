//! The conditional score network, the deformation network and the
//! single-pass inference routines built on them.

mod deform;
mod layers;
mod params;
mod score;

pub use deform::DeformNet;
pub use layers::{sinusoidal_embedding, Attention, Conv, GroupNorm, Linear, ResBlock, TimeEmbedding, UpConv};
pub use params::{Bound, Init, ParamId, ParamStore};
pub use score::ScoreNet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::schedule::ScoreModel;
use crate::tensor::{Graph, Tensor};
use crate::warp::{warp_tensor, RegistrationField};

/// Architecture hyperparameters; enough to rebuild both networks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchConfig {
    /// Image channels.
    pub channels: usize,
    /// Per-level widths of the score network.
    pub score_widths: Vec<usize>,
    /// Per-level widths of the deformation network.
    pub deform_widths: Vec<usize>,
    pub time_dim: usize,
    pub attention: bool,
    /// Preferred group-norm group count.
    pub groups: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            channels: 1,
            score_widths: vec![16, 32, 64, 128],
            deform_widths: vec![16, 32, 32, 32],
            time_dim: 64,
            attention: true,
            groups: 8,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::invalid("architecture", msg.to_string()));
        if self.channels == 0 || self.groups == 0 {
            return bad("channels and groups must be positive");
        }
        if self.score_widths.is_empty() || self.deform_widths.is_empty() {
            return bad("width ladders must be non-empty");
        }
        if self.score_widths.iter().chain(&self.deform_widths).any(|&w| w == 0) {
            return bad("widths must be positive");
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return bad("time embedding dimension must be even and at least 2");
        }
        Ok(())
    }

    /// Image extents must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.score_widths.len().saturating_sub(1).max(self.deform_widths.len())
    }
}

/// Both networks and their parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub arch: ArchConfig,
    pub params: ParamStore,
    pub score: ScoreNet,
    pub deform: DeformNet,
}

impl Model {
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let score = ScoreNet::new(&mut Init::new(&mut params, &mut rng, "score"), &arch);
        let deform = DeformNet::new(&mut Init::new(&mut params, &mut rng, "deform"), &arch);
        Ok(Model {
            arch,
            params,
            score,
            deform,
        })
    }

    fn check_pair(&self, moving: &Tensor, fixed: &Tensor) -> Result<()> {
        if moving.shape() != fixed.shape() {
            return Err(Error::shape("register", moving.shape(), fixed.shape()));
        }
        Ok(())
    }

    /// Noise prediction with the fixed image as the clean sample at step 0.
    pub fn latent(&self, moving: &Tensor, fixed: &Tensor) -> Result<Tensor> {
        self.check_pair(moving, fixed)?;
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let (m, f) = (g.constant(moving.clone()), g.constant(fixed.clone()));
        let steps = vec![0; moving.shape()[0]];
        let out = self.score.forward(&p, m, f, f, &steps)?;
        Ok((*out.value()).clone())
    }

    /// The step-0 latent scaled by `eta` in `[0, 1]`.
    pub fn latent_at_eta(&self, moving: &Tensor, fixed: &Tensor, eta: f64) -> Result<Tensor> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::invalid("latent_at_eta", format!("eta {eta} outside [0, 1]")));
        }
        Ok(self.latent(moving, fixed)?.scale(eta as f32))
    }

    pub fn field_from_latent(&self, moving: &Tensor, latent: &Tensor) -> Result<RegistrationField> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let out = self
            .deform
            .forward(&p, g.constant(moving.clone()), g.constant(latent.clone()))?;
        RegistrationField::new((*out.value()).clone())
    }

    /// Field from a given latent and the moving image warped by it.
    pub fn warp_with_latent(&self, moving: &Tensor, latent: &Tensor) -> Result<(RegistrationField, Tensor)> {
        let field = self.field_from_latent(moving, latent)?;
        let warped = warp_tensor(moving, field.tensor())?;
        Ok((field, warped))
    }

    /// Single-pass registration of `moving` onto `fixed`.
    pub fn register(&self, moving: &Tensor, fixed: &Tensor) -> Result<(RegistrationField, Tensor)> {
        let latent = self.latent(moving, fixed)?;
        self.warp_with_latent(moving, &latent)
    }
}

impl ScoreModel for Model {
    fn predict(&self, moving: &Tensor, fixed: &Tensor, x_t: &Tensor, t: usize) -> Result<Tensor> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let steps = vec![t; x_t.shape().first().copied().unwrap_or(1)];
        let out = self.score.forward(
            &p,
            g.constant(moving.clone()),
            g.constant(fixed.clone()),
            g.constant(x_t.clone()),
            &steps,
        )?;
        Ok((*out.value()).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check_piecewise, Var};

    fn small() -> ArchConfig {
        ArchConfig {
            score_widths: vec![8, 16, 16, 16],
            deform_widths: vec![8, 8, 8, 8],
            time_dim: 16,
            ..ArchConfig::default()
        }
    }

    fn images(b: usize, n: usize, seed: u64) -> (Tensor, Tensor) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let m = Tensor::randn([b, 1, n, n], &mut r).map(|v: f32| v.tanh());
        let f = Tensor::randn([b, 1, n, n], &mut r).map(|v: f32| v.tanh());
        (m, f)
    }

    #[test]
    fn default_shapes_and_determinism() {
        let model = Model::new(ArchConfig::default(), 0).unwrap();
        let (m, f) = images(1, 32, 1);
        let e = model.predict(&m, &f, &f, 17).unwrap();
        assert_eq!(e.shape(), &[1, 1, 32, 32]);
        assert_eq!(e, model.predict(&m, &f, &f, 17).unwrap());
        let (field, warped) = model.register(&m, &f).unwrap();
        assert_eq!(field.tensor().shape(), &[1, 2, 32, 32]);
        assert_eq!(warped.shape(), m.shape());
    }

    #[test]
    fn fresh_deformation_net_is_identity() {
        let model = Model::new(small(), 3).unwrap();
        let (m, f) = images(2, 16, 4);
        let (field, warped) = model.register(&m, &f).unwrap();
        assert!(field.tensor().data().iter().all(|&v| v == 0.0));
        assert_eq!(warped, m);
        assert_eq!(model.register(&m, &f).unwrap().0, field);
    }

    #[test]
    fn latent_scaling() {
        let model = Model::new(small(), 3).unwrap();
        let (m, f) = images(1, 16, 5);
        assert!(model.latent_at_eta(&m, &f, 0.0).unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(model.latent_at_eta(&m, &f, 1.0).unwrap(), model.latent(&m, &f).unwrap());
        for eta in [0.1, 0.25, 0.3, 0.5] {
            let a = model.latent_at_eta(&m, &f, eta).unwrap().scale(2.0);
            assert_eq!(a, model.latent_at_eta(&m, &f, 2.0 * eta).unwrap());
        }
        assert!(model.latent_at_eta(&m, &f, 1.5).is_err());
        assert!(model.latent_at_eta(&m, &f, -0.1).is_err());
    }

    #[test]
    fn shape_errors() {
        let model = Model::new(small(), 3).unwrap();
        let (m, f) = images(1, 16, 5);
        assert!(model.register(&m, &Tensor::zeros([1, 1, 16, 32])).is_err());
        let (m2, f2) = images(1, 12, 5);
        assert!(model.register(&m2, &f2).is_err());
        assert!(model.field_from_latent(&m, &Tensor::zeros([1, 2, 16, 16])).is_err());
        let _ = f;
    }

    #[test]
    fn batch_decomposition_invariance() {
        let mut model = Model::new(small(), 7).unwrap();
        // a non-zero output layer so the field actually depends on the inputs
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let id = model.params.find("deform.output.w").unwrap();
        let shape = model.params.get(id).shape().to_vec();
        *model.params.get_mut(id) = Tensor::randn(shape, &mut r).scale(0.05);
        let (m, f) = images(3, 16, 9);
        let (batched, _) = model.register(&m, &f).unwrap();
        for i in 0..3 {
            let (single, _) = model
                .register(&m.narrow(0, i, 1).unwrap(), &f.narrow(0, i, 1).unwrap())
                .unwrap();
            let part = batched.tensor().narrow(0, i, 1).unwrap();
            let diff = part.zip_map(single.tensor(), |a, b| (a - b).abs()).unwrap().max_abs();
            assert!(diff < 1e-6, "{diff}");
        }
    }

    fn slice_check(
        model: &Model,
        name: &str,
        loss: impl for<'g> Fn(&Bound<'g, f64>, &'g Graph<f64>) -> Var<'g, f64>,
    ) -> f64 {
        model.params.grad_check_slice(name, 0, 10, 1e-3, loss).unwrap()
    }

    #[test]
    fn score_parameter_slice_gradients() {
        let model = Model::new(small(), 11).unwrap();
        for seed in 0..5 {
            let (m, f) = images(1, 16, 20 + seed);
            let (m, f): (Tensor<f64>, Tensor<f64>) = (m.cast(), f.cast());
            for name in ["score.enc0.conv1.w", "score.attn.q.w", "score.time.fc1.w"] {
                let err = slice_check(&model, name, |p, g| {
                    let (mv, fv) = (g.constant(m.clone()), g.constant(f.clone()));
                    model.score.forward(p, mv, fv, fv, &[37]).unwrap().square().mean_all()
                });
                assert!(err < 1e-3, "{name} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn deform_gradients() {
        let mut model = Model::new(small(), 12).unwrap();
        let id = model.params.find("deform.output.w").unwrap();
        let shape = model.params.get(id).shape().to_vec();
        *model.params.get_mut(id) = Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(1)).scale(0.1);
        for seed in 0..5 {
            let (m, e) = images(1, 16, 40 + seed);
            let (m, e): (Tensor<f64>, Tensor<f64>) = (m.cast(), e.cast());
            for name in ["deform.enc1.w", "deform.up2.w", "deform.output.w"] {
                let err = slice_check(&model, name, |p, g| {
                    let out = model.deform.forward(p, g.constant(m.clone()), g.constant(e.clone())).unwrap();
                    out.square().mean_all()
                });
                assert!(err < 1e-3, "{name} seed {seed}: {err}");
            }
            // and through the input latent
            let err = grad_check_piecewise(
                |g, x| {
                    let p = model.params.bind(g, false);
                    model.deform.forward(&p, g.constant(m.clone()), x).unwrap().square().mean_all()
                },
                &e,
                1e-3,
            )
            .unwrap();
            assert!(err < 1e-3, "latent seed {seed}: {err}");
        }
    }
}
