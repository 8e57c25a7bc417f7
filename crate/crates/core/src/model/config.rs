use crate::error::{Error, Result};
use crate::masking::{Grid3, ScanOrder};
use crate::mamba::MambaConfig;
use crate::toki::{TokiVariant, DEFAULT_INIT};

/// How masked coarse tokens are filled before decoding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum MaskFill {
    /// State-space interpolation between neighbouring visible tokens.
    #[default]
    Toki,
    /// A single learnable token at every masked position.
    Learnable,
}

impl MaskFill {
    pub fn name(self) -> &'static str {
        match self {
            MaskFill::Toki => "toki",
            MaskFill::Learnable => "learnable",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "toki" => Some(MaskFill::Toki),
            "learnable" => Some(MaskFill::Learnable),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub volume: Grid3,
    /// Total stages: `n_stages - 1` convolutional stages plus the token stage.
    pub n_stages: usize,
    /// Channels of the first convolutional stage; doubles per stage.
    pub cnn_width: usize,
    pub model_dim: usize,
    pub depth: usize,
    pub state_dim: usize,
    pub expand: usize,
    pub conv_width: Option<usize>,
    /// Channels at the coarsest decoder stage; halves per finer stage.
    pub decoder_width: usize,
    pub mask_fill: MaskFill,
    pub toki_variant: TokiVariant,
    pub toki_init: f64,
    pub scan_order: ScanOrder,
    pub scan_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            volume: Grid3::cube(16),
            n_stages: 3,
            cnn_width: 8,
            model_dim: 32,
            depth: 2,
            state_dim: 8,
            expand: 2,
            conv_width: Some(3),
            decoder_width: 16,
            mask_fill: MaskFill::Toki,
            toki_variant: TokiVariant::Eq8,
            toki_init: DEFAULT_INIT,
            scan_order: ScanOrder::Raster,
            scan_seed: 0,
        }
    }
}

/// Smallest decoder width.
pub const MIN_DECODER_WIDTH: usize = 4;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_stages == 0 {
            return Err(Error::invalid("model_config", "n_stages must be at least 1"));
        }
        if self.n_stages > 16 {
            return Err(Error::invalid("model_config", "n_stages too large"));
        }
        if self.volume.is_empty() {
            return Err(Error::invalid("model_config", "empty volume"));
        }
        self.volume.divided(1 << self.n_stages).map_err(|_| Error::Indivisible {
            op: "model_config",
            extents: self.volume.as_array(),
            divisor: 1 << self.n_stages,
        })?;
        for (v, what) in [
            (self.cnn_width, "cnn_width"),
            (self.model_dim, "model_dim"),
            (self.state_dim, "state_dim"),
            (self.expand, "expand"),
            (self.decoder_width, "decoder_width"),
        ] {
            if v == 0 {
                return Err(Error::invalid("model_config", alloc::format!("{what} must be positive")));
            }
        }
        if !(self.toki_init < 0.0) {
            return Err(Error::invalid("model_config", "toki init must be negative"));
        }
        Ok(())
    }

    /// Grid of the token stage.
    pub fn coarse_grid(&self) -> Grid3 {
        let f = 1 << (self.n_stages - 1);
        Grid3::new(self.volume.x / f, self.volume.y / f, self.volume.z / f)
    }

    /// Grid of stage `i`, 0 = finest.
    pub fn stage_grid(&self, i: usize) -> Grid3 {
        let f = 1 << i;
        Grid3::new(self.volume.x / f, self.volume.y / f, self.volume.z / f)
    }

    /// Encoder channels of convolutional stage `i`, 0 = finest.
    pub fn encoder_width(&self, i: usize) -> usize {
        self.cnn_width << i
    }

    /// Decoder channels of stage `i`, 0 = finest.
    pub fn decoder_width(&self, i: usize) -> usize {
        let halvings = self.n_stages - 1 - i;
        (self.decoder_width >> halvings).max(MIN_DECODER_WIDTH.min(self.decoder_width))
    }

    pub fn mamba(&self) -> MambaConfig {
        MambaConfig { model_dim: self.model_dim, state_dim: self.state_dim, expand: self.expand, conv_width: self.conv_width }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn widths_and_grids() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.coarse_grid(), Grid3::cube(4));
        assert_eq!([c.decoder_width(0), c.decoder_width(1), c.decoder_width(2)], [4, 8, 16]);
        assert_eq!([c.encoder_width(0), c.encoder_width(1)], [8, 16]);
    }

    #[test]
    fn rejects_indivisible_volume() {
        let c = ModelConfig { volume: Grid3::new(16, 16, 12), ..ModelConfig::default() };
        assert!(matches!(c.validate(), Err(Error::Indivisible { .. })));
    }

    #[test]
    fn names_round_trip() {
        for f in [MaskFill::Toki, MaskFill::Learnable] {
            assert_eq!(MaskFill::parse(f.name()), Some(f));
        }
    }
}
