use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Training/evaluation switch for one forward pass. Dropout masks draw from
/// the trainer's generator; evaluation passes have no generator and are
/// deterministic.
pub struct ForwardCtx<'a> {
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> ForwardCtx<'a> {
    pub fn eval() -> Self {
        Self { rng: None }
    }

    pub fn train(rng: &'a mut ChaCha8Rng) -> Self {
        Self { rng: Some(rng) }
    }

    pub fn training(&self) -> bool {
        self.rng.is_some()
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - p)`.
    pub fn dropout(&mut self, tape: &mut Tape, x: Var, p: f64) -> Result<Var> {
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x);
        };
        if p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let shape = tape.shape(x).to_vec();
        let n = shape.iter().product();
        let mask = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mask = tape.constant(Tensor::new(shape, mask)?);
        tape.mul(x, mask)
    }
}
