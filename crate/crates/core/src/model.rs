//! All trainable modules of one configuration, built together.

use serde::{Deserialize, Serialize};

use crate::conditioner::{self, Conditioner, ConditionerConfig};
use crate::diffusion::{self, Denoiser, DenoiserConfig, NoiseSchedule, ScheduleConfig};
use crate::encoder::{self, Encoder, EncoderConfig, PerceptualProxy, RgbHead, TokenGrid};
use crate::error::{Error, Result};
use crate::geometry::Image;
use crate::nn::ParamStore;
use crate::rng::{seeded, stream};
use crate::scalar::Scalar;
use crate::spatial_decoder::{self, DecoderConfig, SpatialDecoder};
use crate::spatial_vae::{self, SpatialVae, VaeConfig, LATENT_CHANNELS};

/// Store entry holding the latent normalization factor `1 / std(μ)`.
pub const LATENT_SCALE: &str = "stats.latent_scale";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub vae: VaeConfig,
    pub conditioner: ConditionerConfig,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
}

impl ModelConfig {
    /// 32×32 images, 4×4 token grid, widths of 32–64. Sized so every stage
    /// overfits eight pairs on one CPU core in minutes.
    pub fn toy() -> Self {
        Self {
            encoder: EncoderConfig { image_height: 32, image_width: 32, patch_size: 8, dim: 64, depth: 2, heads: 4, mlp_ratio: 2 },
            decoder: DecoderConfig { dim: 64, depth: 2, heads: 4, descriptor_dim: 16, mlp_ratio: 2, shared_branches: false },
            vae: VaeConfig { hidden: 64, width: 32, blocks: 1, heads: 4, mlp_ratio: 2 },
            conditioner: ConditionerConfig { dim: 64, depth: 2, heads: 4, mlp_ratio: 2, vocab: 64, max_text_len: 24 },
            denoiser: DenoiserConfig { dim: 64, depth: 2, heads: 4, mlp_ratio: 2 },
            schedule: ScheduleConfig::default(),
        }
    }
}

pub struct Model<T> {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub rgb_head: RgbHead,
    pub decoder: SpatialDecoder,
    pub vae: SpatialVae,
    pub conditioner: Conditioner,
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
    pub proxy: PerceptualProxy<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let vae = SpatialVae::new(&cfg.encoder, &cfg.vae)?;
        let denoiser = Denoiser::new(&cfg.denoiser, vae.latent_grid(), LATENT_CHANNELS, cfg.conditioner.dim)?;
        Ok(Self {
            cfg: cfg.clone(),
            encoder: Encoder::new(&cfg.encoder)?,
            rgb_head: RgbHead::new(&cfg.encoder)?,
            decoder: SpatialDecoder::new(&cfg.encoder, &cfg.decoder)?,
            vae,
            conditioner: Conditioner::new(&cfg.encoder, &cfg.conditioner)?,
            denoiser,
            schedule: NoiseSchedule::from_config(&cfg.schedule)?,
            proxy: PerceptualProxy::new(),
        })
    }

    /// Initializes the module owning `prefix` from a seed derived from
    /// `(seed, prefix)`, leaving every other entry alone.
    pub fn init_module(&self, store: &mut ParamStore<T>, prefix: &str, seed: u64) -> Result<()> {
        let mut rng = seeded(stream(seed, &format!("init.{prefix}")));
        match prefix {
            encoder::PREFIX => self.encoder.init(store, &mut rng),
            encoder::RGB_PREFIX => self.rgb_head.init(store, &mut rng),
            spatial_decoder::PREFIX => self.decoder.init(store, &mut rng),
            spatial_vae::PREFIX => self.vae.init(store, &mut rng),
            conditioner::PREFIX => self.conditioner.init(store, &mut rng),
            diffusion::PREFIX => self.denoiser.init(store, &mut rng),
            other => return Err(Error::Config(format!("unknown module '{other}'"))),
        }
        Ok(())
    }

    pub fn encode_image(&self, params: &ParamStore<T>, image: &Image) -> Result<TokenGrid<T>> {
        self.encoder.encode(params, &image.to_tensor())
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        let (lh, lw) = self.vae.latent_grid();
        [lh, lw, LATENT_CHANNELS]
    }
}

/// The stored latent scale, or a configuration error when the store has
/// not been through a unified stage.
pub fn latent_scale<T: Scalar>(params: &ParamStore<T>) -> Result<f64> {
    params
        .get(LATENT_SCALE)
        .map(|t| t.data()[0].as_f64())
        .ok_or_else(|| Error::Config(format!("checkpoint has no '{LATENT_SCALE}' entry")))
}

/// Fails with a configuration error naming the first absent prefix.
pub fn require_prefixes<T: Scalar>(params: &ParamStore<T>, prefixes: &[&str]) -> Result<()> {
    for p in prefixes {
        if !params.has_prefix(p) {
            return Err(Error::Config(format!("checkpoint has no parameters under '{p}'")));
        }
    }
    Ok(())
}
