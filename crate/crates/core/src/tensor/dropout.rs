use rand::RngCore;

use super::ops::dropout_mask;
use super::{Graph, NodeId, Real};
use crate::error::{Error, Result};

/// Dropout state threaded through a forward pass. Inference passes use
/// [`Dropout::inference`], which is exactly the identity.
pub struct Dropout<'r> {
    rate: f64,
    rng: Option<&'r mut dyn RngCore>,
}

impl<'r> Dropout<'r> {
    pub fn inference() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn training(rate: f64, rng: &'r mut dyn RngCore) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        Ok(Dropout { rate, rng: Some(rng) })
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn apply<T: Real>(&mut self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => {
                let mask = dropout_mask(g.value(x).len(), self.rate, rng);
                g.mul_const(x, mask)
            }
            _ => Ok(x),
        }
    }
}
