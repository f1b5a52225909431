use rand::SeedableRng;

use super::{Matrix, ParamRef, ParamStore, Real, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Dense layer `y = x W + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamRef,
    pub b: ParamRef,
}

impl Linear {
    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn new<T: Real>(store: &mut ParamStore<T>, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let w = store.alloc_uniform(fan_in, fan_out, bound, rng);
        let b = store.alloc_uniform(1, fan_out, bound, rng);
        Linear { w, b }
    }

    pub fn fan_in(&self) -> usize {
        self.w.rows
    }

    pub fn fan_out(&self) -> usize {
        self.w.cols
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = self.w.on(tape, store)?;
        let b = self.b.on(tape, store)?;
        tape.affine(x, w, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Softplus,
}

impl Activation {
    fn apply<T: Real>(self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Softplus => tape.softplus(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlpConfig {
    pub depth: usize,
    pub width: usize,
    pub input_dim: usize,
    pub dir_dim: usize,
    /// Trunk layer whose input is re-concatenated with the encoded point.
    pub skip: Option<usize>,
    pub activation: Activation,
}

impl MlpConfig {
    /// Eight layers of 256 channels with the input re-injected at layer 4.
    pub fn nerf(input_dim: usize, dir_dim: usize) -> Self {
        MlpConfig {
            depth: 8,
            width: 256,
            input_dim,
            dir_dim,
            skip: Some(4),
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 {
            return Err(Error::invalid("MLP depth and width must be at least 1"));
        }
        Ok(())
    }
}

/// Density and radiance network. Density comes from the trunk alone; the
/// view direction is injected after the density head. Both heads end in a
/// softplus so radiance is nonnegative and unbounded.
#[derive(Debug, Clone, PartialEq)]
pub struct RadianceMlp {
    pub config: MlpConfig,
    pub trunk: Vec<Linear>,
    pub sigma_head: Linear,
    pub feature: Linear,
    pub dir_layer: Linear,
    pub rgb_head: Linear,
}

pub struct MlpOutput {
    pub sigma: Var,
    pub rgb: Var,
}

impl RadianceMlp {
    pub fn new<T: Real>(config: MlpConfig, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let mut trunk = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let fan_in = if i == 0 {
                config.input_dim
            } else if config.skip == Some(i) {
                w + config.input_dim
            } else {
                w
            };
            trunk.push(Linear::new(store, fan_in, w, rng));
        }
        let sigma_head = Linear::new(store, w, 1, rng);
        let feature = Linear::new(store, w, w, rng);
        let half = (w / 2).max(1);
        let dir_layer = Linear::new(store, w + config.dir_dim, half, rng);
        let rgb_head = Linear::new(store, half, 3, rng);
        Ok(RadianceMlp {
            config,
            trunk,
            sigma_head,
            feature,
            dir_layer,
            rgb_head,
        })
    }

    /// Convenience constructor with its own parameter store.
    pub fn with_seed<T: Real>(config: MlpConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = Rng::seed_from_u64(seed);
        let mlp = RadianceMlp::new(config, &mut store, &mut rng)?;
        Ok((mlp, store))
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        points: Var,
        dirs: Var,
    ) -> Result<MlpOutput> {
        let (pc, dc) = (tape.value(points).cols, tape.value(dirs).cols);
        if pc != self.config.input_dim || dc != self.config.dir_dim {
            return Err(Error::dim(format!(
                "MLP expects {}+{} input columns, got {pc}+{dc}",
                self.config.input_dim, self.config.dir_dim
            )));
        }
        let mut h = points;
        for (i, layer) in self.trunk.iter().enumerate() {
            let inp = if i > 0 && self.config.skip == Some(i) {
                tape.concat(h, points)?
            } else {
                h
            };
            let z = layer.forward(tape, store, inp)?;
            h = self.config.activation.apply(tape, z)?;
        }
        let sigma_pre = self.sigma_head.forward(tape, store, h)?;
        let sigma = tape.softplus(sigma_pre)?;
        let feat = self.feature.forward(tape, store, h)?;
        let fd = tape.concat(feat, dirs)?;
        let hd = self.dir_layer.forward(tape, store, fd)?;
        let hd = tape.relu(hd)?;
        let rgb_pre = self.rgb_head.forward(tape, store, hd)?;
        let rgb = tape.softplus(rgb_pre)?;
        Ok(MlpOutput { sigma, rgb })
    }

    /// Forward pass without keeping the tape.
    pub fn eval<T: Real>(
        &self,
        store: &ParamStore<T>,
        points: Matrix<T>,
        dirs: Matrix<T>,
    ) -> Result<(Matrix<T>, Matrix<T>)> {
        let mut tape = Tape::new();
        let p = tape.input(points)?;
        let d = tape.input(dirs)?;
        let out = self.forward(&mut tape, store, p, d)?;
        Ok((tape.value(out.sigma).clone(), tape.value(out.rgb).clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> MlpConfig {
        MlpConfig {
            depth: 3,
            width: 8,
            input_dim: 5,
            dir_dim: 2,
            skip: Some(2),
            activation: Activation::Relu,
        }
    }

    #[test]
    fn outputs_are_nonnegative() {
        let (mlp, store) = RadianceMlp::with_seed::<f64>(small(), 3).unwrap();
        let pts: Vec<f64> = (0..50).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let dirs: Vec<f64> = (0..20).map(|i| (i as f64).sin()).collect();
        let (s, c) = mlp
            .eval(&store, Matrix::from_f64(10, 5, &pts).unwrap(), Matrix::from_f64(10, 2, &dirs).unwrap())
            .unwrap();
        assert!(s.data.iter().all(|&v| v >= 0.0));
        assert!(c.data.iter().all(|&v| v >= 0.0));
        assert_eq!((s.rows, s.cols, c.cols), (10, 1, 3));
    }

    #[test]
    fn radiance_head_does_not_saturate() {
        let (mlp, mut store) = RadianceMlp::with_seed::<f64>(small(), 5).unwrap();
        let x = Matrix::from_f64(1, 5, &[0.3, -0.2, 0.8, 0.1, 0.5]).unwrap();
        let d = Matrix::from_f64(1, 2, &[0.6, 0.8]).unwrap();
        // force a clearly positive pre-activation, then scale the head by 10
        store.block_mut(mlp.rgb_head.b).iter_mut().for_each(|b| *b = 5.0);
        let (_, c1) = mlp.eval(&store, x.clone(), d.clone()).unwrap();
        for r in [mlp.rgb_head.w, mlp.rgb_head.b] {
            store.block_mut(r).iter_mut().for_each(|v| *v *= 10.0);
        }
        let (_, c2) = mlp.eval(&store, x, d).unwrap();
        for k in 0..3 {
            assert!(c2.data[k] > 9.0 * c1.data[k] * 0.95, "{} vs {}", c2.data[k], c1.data[k]);
        }
    }

    #[test]
    fn nerf_defaults() {
        let c = MlpConfig::nerf(63, 27);
        assert_eq!((c.depth, c.width, c.skip), (8, 256, Some(4)));
    }

    #[test]
    fn wrong_input_width_is_rejected() {
        let (mlp, store) = RadianceMlp::with_seed::<f32>(small(), 1).unwrap();
        assert!(mlp.eval(&store, Matrix::zeros(1, 4), Matrix::zeros(1, 2)).is_err());
    }
}
