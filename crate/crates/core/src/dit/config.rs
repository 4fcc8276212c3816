use crate::error::{Error, Result};

/// Architecture hyperparameters of the toy diffusion transformer.
#[derive(Clone, Debug, PartialEq)]
pub struct DitConfig {
    pub num_blocks: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Per-token input/output width.
    pub data_dim: usize,
    /// Real classes plus one reserved null id (the last id).
    pub num_classes: usize,
    /// Width of the sinusoidal timestep embedding and of each class embedding.
    pub t_embed_dim: usize,
    /// Upper end of the timestep range the model accepts.
    pub sigma_max: f64,
}

impl Default for DitConfig {
    fn default() -> Self {
        DitConfig {
            num_blocks: 6,
            hidden_size: 64,
            num_heads: 4,
            grid_h: 4,
            grid_w: 4,
            data_dim: 2,
            num_classes: 9,
            t_embed_dim: 32,
            sigma_max: 3.0,
        }
    }
}

impl DitConfig {
    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// The reserved unconditional id.
    pub fn null_class(&self) -> usize {
        self.num_classes - 1
    }

    pub fn real_classes(&self) -> std::ops::Range<usize> {
        0..self.num_classes - 1
    }

    /// Width of the modulation network output: (gamma, beta, alpha) for two branches.
    pub fn modulation_width(&self) -> usize {
        6 * self.hidden_size
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.num_blocks == 0 {
            return bad("num_blocks must be positive".into());
        }
        if self.hidden_size < 2 {
            return bad(format!(
                "hidden_size {} must be at least 2",
                self.hidden_size
            ));
        }
        if self.num_heads == 0 || !self.hidden_size.is_multiple_of(self.num_heads) {
            return bad(format!(
                "num_heads {} must divide hidden_size {}",
                self.num_heads, self.hidden_size
            ));
        }
        if self.grid_h == 0 || self.grid_w == 0 || self.data_dim == 0 {
            return bad("token grid and data_dim must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!(
                "num_classes {} must be at least 2",
                self.num_classes
            ));
        }
        if self.t_embed_dim == 0 || !self.t_embed_dim.is_multiple_of(2) {
            return Err(Error::OddDimension(self.t_embed_dim));
        }
        if !(self.sigma_max.is_finite() && self.sigma_max > 0.0) {
            return bad(format!("sigma_max {} must be positive", self.sigma_max));
        }
        Ok(())
    }

    pub(crate) fn check_condition(&self, c: usize) -> Result<()> {
        if c >= self.num_classes {
            return Err(Error::InvalidCondition {
                id: c,
                num_classes: self.num_classes,
            });
        }
        Ok(())
    }

    pub(crate) fn check_timestep(&self, t: f64) -> Result<()> {
        if !(t.is_finite() && (0.0..=self.sigma_max).contains(&t)) {
            return Err(Error::InvalidTimestep {
                t,
                max: self.sigma_max,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        let c = DitConfig::default();
        c.validate().unwrap();
        assert_eq!(c.tokens(), 16);
        assert_eq!(c.null_class(), 8);
    }

    #[test]
    fn heads_must_divide_width() {
        let c = DitConfig {
            num_heads: 3,
            ..DitConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn needs_a_real_class_besides_null() {
        let c = DitConfig {
            num_classes: 1,
            ..DitConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
