//! Geometric affine modulation: a per-channel scale and shift predicted from
//! the global descriptor of a modality's shallow features, applied as
//! `F·(1+γ) + β`.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv1x1, Init};
use crate::tensor::Real;

/// Spatial mean of each channel, (n, c, 1, 1).
pub fn global_descriptor<T: Real>(tape: &mut Tape<T>, feat: Var) -> Result<Var> {
    tape.global_avg_pool(feat)
}

#[derive(Clone, Copy, Debug)]
pub struct AffineParams {
    pub gamma: Var,
    pub beta: Var,
}

/// `fuse·(1+γ) + β` with γ and β broadcast over space.
pub fn modulate<T: Real>(tape: &mut Tape<T>, fuse: Var, p: AffineParams) -> Result<Var> {
    let one_plus = tape.add_scalar(p.gamma, T::one())?;
    let scaled = tape.mul(fuse, one_plus)?;
    tape.add(scaled, p.beta)
}

/// Two 1×1 convolutions with a ReLU between; the second is zero-initialised
/// so a fresh module is the identity.
#[derive(Clone, Debug)]
pub struct Gam {
    fc1: Conv1x1,
    fc2: Conv1x1,
    channels: usize,
}

impl Gam {
    pub fn new(init: &mut Init, name: &str, c: usize) -> Result<Self> {
        init.scoped(name, |init| {
            Ok(Gam {
                fc1: Conv1x1::new(init, "fc1", c, c)?,
                fc2: Conv1x1::zeroed(init, "fc2", c, 2 * c)?,
                channels: c,
            })
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn output_layer(&self) -> &Conv1x1 {
        &self.fc2
    }

    pub fn affine_params<T: Real>(&self, tape: &mut Tape<T>, descriptor: Var) -> Result<AffineParams> {
        let h = self.fc1.forward(tape, descriptor)?;
        let h = tape.relu(h)?;
        let gb = self.fc2.forward(tape, h)?;
        if tape.shape(gb).c() != 2 * self.channels {
            return Err(Error::Config(format!(
                "affine head produced {} channels, expected {}",
                tape.shape(gb).c(),
                2 * self.channels
            )));
        }
        let (gamma, beta) = tape.split(gb, self.channels)?;
        Ok(AffineParams { gamma, beta })
    }

    /// Modulates `fuse` with parameters derived from `source`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, fuse: Var, source: Var) -> Result<Var> {
        let g = global_descriptor(tape, source)?;
        let p = self.affine_params(tape, g)?;
        modulate(tape, fuse, p)
    }
}
