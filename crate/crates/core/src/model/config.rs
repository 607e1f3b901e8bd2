use serde::{Deserialize, Serialize};

use crate::adapter::{check_filter, FilterSpec};
use crate::error::{contract, Result};

/// Which sharing/modulation scheme the Sine-AWB layers use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// One shared base per layer, `sin(omega_t * M)`.
    Sinewich,
    /// One shared base, `omega_t * M`.
    LinearScale,
    /// One shared base used as-is for every task.
    NoModulation,
    /// A separate base for every task in every Sine-AWB layer.
    IndependentBase,
    /// Shared encoder bases, a separate decoder base per task.
    IndependentDecoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modulation {
    Sine,
    Linear,
    Identity,
}

impl Variant {
    pub fn modulation(self) -> Modulation {
        match self {
            Variant::LinearScale => Modulation::Linear,
            Variant::NoModulation => Modulation::Identity,
            _ => Modulation::Sine,
        }
    }

    pub fn independent_encoder_bases(self) -> bool {
        self == Variant::IndependentBase
    }

    pub fn independent_decoder_base(self) -> bool {
        matches!(self, Variant::IndependentBase | Variant::IndependentDecoder)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Sinewich => "sinewich",
            Variant::LinearScale => "linear-scale",
            Variant::NoModulation => "no-modulation",
            Variant::IndependentBase => "independent-base",
            Variant::IndependentDecoder => "independent-decoder",
        }
    }
}

/// Architecture of the desk-scale multi-task model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub image_size: usize,
    /// Channel width of each of the four encoder stages.
    pub stage_channels: Vec<usize>,
    /// Layers per stage; all but the last are task-agnostic.
    pub layers_per_stage: usize,
    /// Spatial size of the frozen per-layer convolution.
    pub frozen_kernel: usize,
    pub rank: usize,
    /// Spatial size of the mid kernel `W` in every Sine-AWB layer.
    pub awb_kernel: usize,
    pub token_width: usize,
    /// Channels each stage is projected to in the decoder.
    pub decoder_proj: usize,
    pub decoder_hidden: usize,
    pub decoder_rank: usize,
    pub tail_kernel: usize,
    pub num_tasks: usize,
    pub variant: Variant,
    pub filter: Option<FilterSpec>,
    /// Standard deviation of the Sine-AWB factors `A` and `B` at init.
    pub base_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            image_size: 32,
            stage_channels: vec![4, 6, 8, 8],
            layers_per_stage: 2,
            frozen_kernel: 1,
            rank: 2,
            awb_kernel: 3,
            token_width: 8,
            decoder_proj: 2,
            decoder_hidden: 4,
            decoder_rank: 2,
            tail_kernel: 1,
            num_tasks: 3,
            variant: Variant::Sinewich,
            filter: Some(FilterSpec::default()),
            base_init_std: 1.0,
        }
    }
}

pub const NUM_STAGES: usize = 4;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != NUM_STAGES {
            return Err(contract!(
                "expected {NUM_STAGES} stage widths, got {:?}",
                self.stage_channels
            ));
        }
        let pos = [
            ("in_channels", self.in_channels),
            ("layers_per_stage", self.layers_per_stage),
            ("rank", self.rank),
            ("token_width", self.token_width),
            ("decoder_proj", self.decoder_proj),
            ("decoder_hidden", self.decoder_hidden),
            ("decoder_rank", self.decoder_rank),
            ("num_tasks", self.num_tasks),
        ];
        for (name, v) in pos {
            if v == 0 {
                return Err(contract!("{name} must be positive"));
            }
        }
        if self.stage_channels.iter().any(|&c| c < self.rank) {
            return Err(contract!(
                "rank {} exceeds a stage width in {:?}",
                self.rank,
                self.stage_channels
            ));
        }
        if self.decoder_rank > self.decoder_hidden.min(NUM_STAGES * self.decoder_proj) {
            return Err(contract!("decoder rank {} too large", self.decoder_rank));
        }
        for (name, k) in [
            ("frozen_kernel", self.frozen_kernel),
            ("awb_kernel", self.awb_kernel),
            ("tail_kernel", self.tail_kernel),
        ] {
            if k % 2 == 0 {
                return Err(contract!("{name} must be odd, got {k}"));
            }
        }
        let downscale = 1 << (NUM_STAGES - 1);
        if self.image_size == 0 || !self.image_size.is_multiple_of(downscale) {
            return Err(contract!(
                "image size {} must be a positive multiple of {downscale}",
                self.image_size
            ));
        }
        if let Some(f) = &self.filter {
            check_filter(f)?;
        }
        if !(self.base_init_std > 0.0) {
            return Err(contract!("base_init_std must be positive"));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels
    }

    pub fn stage_size(&self, stage: usize) -> usize {
        self.image_size >> stage
    }

    /// Number of encoder base copies per TS layer.
    pub fn encoder_bases(&self) -> usize {
        if self.variant.independent_encoder_bases() {
            self.num_tasks
        } else {
            1
        }
    }

    pub fn decoder_bases(&self) -> usize {
        if self.variant.independent_decoder_base() {
            self.num_tasks
        } else {
            1
        }
    }

    /// `mr + nr + r^2 k^2` for the TS layer of `stage`.
    pub fn encoder_base_params(&self, stage: usize) -> usize {
        let c = self.stage_channels[stage];
        let r = self.rank;
        2 * c * r + r * r * self.awb_kernel * self.awb_kernel
    }

    pub fn decoder_base_params(&self) -> usize {
        let m = NUM_STAGES * self.decoder_proj;
        let r = self.decoder_rank;
        m * r + self.decoder_hidden * r + r * r * self.awb_kernel * self.awb_kernel
    }
}
