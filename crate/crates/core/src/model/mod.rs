//! The progressive attention-guided depth super-resolution network.
//!
//! Two streams: a depth upsampling branch built from residual dense
//! networks and a guidance pyramid that feeds each ×2 stage the RGB
//! features at matching resolution, gated by a depth-derived spatial
//! attention map. A model for factor `2^l` chains `l` stages.

mod blocks;
mod weights_io;

pub use blocks::{
    agfe_forward, agfe_parts, attention_map, guidance_pyramid, rdb_forward, rdn_forward,
    stage_forward, stage_forward_traced, AgfeParts, StageTrace,
};
pub use weights_io::{read_weight_config, WEIGHT_FORMAT_VERSION, WEIGHT_MAGIC};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::bicubic::bicubic_resample;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// Number of ×2 stages; the total upsampling factor is `2^l`.
    pub upsample_exponent: usize,
    /// Feature width C of the depth stream.
    pub base_channels: usize,
    /// Conv layers per residual dense block.
    pub rdb_layers: usize,
    /// Channels each dense layer emits.
    pub growth_rate: usize,
    /// Feature width Cg of the guidance stream.
    pub guidance_channels: usize,
    /// Seed for weight initialization.
    pub seed: u64,
    /// Add the bicubically upsampled input depth to the reconstruction.
    pub global_residual: bool,
}

impl ModelConfig {
    /// Defaults for a given number of stages.
    pub fn with_exponent(l: usize) -> Self {
        ModelConfig {
            upsample_exponent: l,
            base_channels: 64,
            rdb_layers: 4,
            growth_rate: 32,
            guidance_channels: 64,
            seed: 0,
            global_residual: true,
        }
    }

    pub fn scale(&self) -> usize {
        1 << self.upsample_exponent
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.upsample_exponent) {
            return Err(Error::InvalidConfig(format!(
                "upsample_exponent must be in 1..=4, got {}",
                self.upsample_exponent
            )));
        }
        if self.base_channels == 0 || self.base_channels % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "base_channels must be positive and even (the attention module halves it), got {}",
                self.base_channels
            )));
        }
        if self.rdb_layers == 0 || self.growth_rate == 0 || self.guidance_channels == 0 {
            return Err(Error::InvalidConfig(
                "rdb_layers, growth_rate and guidance_channels must all be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Every convolution the config implies, in canonical order:
    /// `(name, cout, cin, kh, kw)`.
    pub(crate) fn layer_specs(&self) -> Vec<(String, usize, usize, usize, usize)> {
        let (l, c, d, g, cg) = (
            self.upsample_exponent,
            self.base_channels,
            self.rdb_layers,
            self.growth_rate,
            self.guidance_channels,
        );
        let mut specs = Vec::new();
        let mut conv =
            |name: String, cout: usize, cin: usize, kh: usize, kw: usize| {
                specs.push((name, cout, cin, kh, kw));
            };

        conv("entry".into(), c, 1, 3, 3);
        conv("pyramid.entry".into(), cg, 3, 3, 3);
        for j in 1..l {
            conv(format!("pyramid.down{j}.refine"), cg, cg, 3, 3);
            conv(format!("pyramid.down{j}.down"), cg, cg, 2, 2);
        }
        for s in 1..=l {
            for rdn in ["rdn_a", "rdn_b"] {
                for b in 0..3 {
                    for j in 0..d {
                        conv(format!("stage{s}.{rdn}.rdb{b}.layer{j}"), g, c + j * g, 3, 3);
                    }
                    conv(format!("stage{s}.{rdn}.rdb{b}.fuse"), c, c + d * g, 1, 1);
                }
                conv(format!("stage{s}.{rdn}.fuse"), c, 3 * c, 1, 1);
                conv(format!("stage{s}.{rdn}.conv"), c, c, 3, 3);
            }
            conv(format!("stage{s}.expand"), 4 * c, c, 1, 1);
            conv(format!("stage{s}.agfe.guide"), cg, cg, 3, 3);
            conv(format!("stage{s}.agfe.set1.a"), c / 2, c, 9, 1);
            conv(format!("stage{s}.agfe.set1.b"), 1, c / 2, 1, 9);
            conv(format!("stage{s}.agfe.set2.a"), c / 2, c, 1, 9);
            conv(format!("stage{s}.agfe.set2.b"), 1, c / 2, 9, 1);
            conv(format!("stage{s}.fuse"), c, c + cg, 3, 3);
        }
        conv("recon".into(), 1, c, 3, 3);
        specs
    }

    /// Closed-form parameter count, written out as arithmetic rather than
    /// derived from the layer list, so tests can cross-check the two.
    pub fn expected_param_count(&self) -> usize {
        let (l, c, d, g, cg) = (
            self.upsample_exponent,
            self.base_channels,
            self.rdb_layers,
            self.growth_rate,
            self.guidance_channels,
        );
        // dense layers: sum_j 9*G*(C + j*G) + G for j in 0..D
        let rdb = 9 * g * (d * c + g * d * (d - 1) / 2)
            + d * g
            + c * (c + d * g)
            + c;
        let rdn = 3 * rdb + (c * 3 * c + c) + (9 * c * c + c);
        let agfe = (9 * cg * cg + cg)
            + 2 * (9 * (c / 2) * c + c / 2)
            + 2 * (9 * (c / 2) + 1);
        let stage = 2 * rdn + (4 * c * c + 4 * c) + agfe + (9 * c * (c + cg) + c);
        let pyramid = (27 * cg + cg) + (l - 1) * ((9 * cg * cg + cg) + (4 * cg * cg + cg));
        let entry = 9 * c + c;
        let recon = 9 * c + 1;
        entry + pyramid + l * stage + recon
    }
}

enum InitMode {
    /// Zero-mean Gaussian weights with He scaling `sqrt(2 / fan_in)`,
    /// zero biases.
    HeNormal(u64),
    /// Everything zero — a test construction for residual-collapse checks.
    Zeros,
}

fn build_store<S: Scalar>(config: &ModelConfig, mode: InitMode) -> Result<ParamStore<S>> {
    let mut store = ParamStore::new();
    let mut rng = match &mode {
        InitMode::HeNormal(seed) => Some(ChaCha8Rng::seed_from_u64(*seed)),
        InitMode::Zeros => None,
    };
    for (name, cout, cin, kh, kw) in config.layer_specs() {
        let wshape = Shape::new(cout, cin, kh, kw)?;
        let weight = match &mut rng {
            Some(rng) => {
                let fan_in = cin * kh * kw;
                let std = (2.0 / fan_in as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("std is positive and finite");
                let data = (0..wshape.numel())
                    .map(|_| S::from_f64(normal.sample(rng)))
                    .collect();
                Tensor::from_vec(wshape, data)?
            }
            None => Tensor::zeros(wshape),
        };
        store.insert(&format!("{name}.weight"), weight, vec![cout, cin, kh, kw])?;
        let bias = Tensor::zeros(Shape::new(1, cout, 1, 1)?);
        store.insert(&format!("{name}.bias"), bias, vec![cout])?;
    }
    Ok(store)
}

/// Initialize a fresh parameter store for `config`: Gaussian weights with
/// std `sqrt(2 / fan_in)`, biases exactly zero, deterministic in the seed.
pub fn init_weights<S: Scalar>(config: &ModelConfig) -> Result<ParamStore<S>> {
    config.validate()?;
    build_store(config, InitMode::HeNormal(config.seed))
}

/// The network: a config plus its parameter store.
pub struct PagNet<S> {
    config: ModelConfig,
    store: ParamStore<S>,
}

impl<S: Scalar> PagNet<S> {
    pub fn init(config: ModelConfig) -> Result<Self> {
        let store = init_weights(&config)?;
        Ok(PagNet { config, store })
    }

    /// All-zero weights; with the global residual on, the forward pass
    /// reduces to bicubic upsampling. Test fixture, not an initializer.
    pub fn with_zero_weights(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let store = build_store(&config, InitMode::Zeros)?;
        Ok(PagNet { config, store })
    }

    pub fn from_parts(config: ModelConfig, store: ParamStore<S>) -> Self {
        PagNet { config, store }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<S> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.element_count()
    }

    fn check_inputs(&self, dl: &Tensor<S>, ih: &Tensor<S>) -> Result<()> {
        let l = self.config.upsample_exponent;
        let (ds, is) = (dl.shape(), ih.shape());
        if ds.c != 1 {
            return Err(Error::DimMismatch {
                dim: "depth channels",
                expected: 1,
                got: ds.c,
            });
        }
        if is.c != 3 {
            return Err(Error::DimMismatch {
                dim: "guidance channels",
                expected: 3,
                got: is.c,
            });
        }
        if is.n != ds.n {
            return Err(Error::DimMismatch {
                dim: "batch",
                expected: ds.n,
                got: is.n,
            });
        }
        if is.h != ds.h << l || is.w != ds.w << l {
            return Err(Error::Ratio {
                context: "guidance size must be the depth size times 2^l",
                expected: format!("{}x{}", ds.h << l, ds.w << l),
                got: format!("{}x{}", is.h, is.w),
            });
        }
        Ok(())
    }

    /// Map a low-resolution depth map and its high-resolution guidance
    /// image to the high-resolution depth map.
    pub fn forward(&self, tape: &mut Tape<S>, dl: &Tensor<S>, ih: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_inputs(dl, ih)?;
        let l = self.config.upsample_exponent;
        let d = self.config.rdb_layers;
        let pyramid = guidance_pyramid(tape, &self.store, ih, l)?;
        let mut df = blocks::conv_same(tape, &self.store, "entry", dl)?;
        for s in 1..=l {
            // stage s consumes the pyramid level at its own output resolution
            let gf = &pyramid[l - s];
            df = stage_forward(tape, &self.store, &format!("stage{s}"), &df, gf, d)?;
        }
        let recon = blocks::conv_same(tape, &self.store, "recon", &df)?;
        if self.config.global_residual {
            let up = bicubic_resample(dl, ih.shape().h, ih.shape().w)?;
            tape.add(&recon, &up)
        } else {
            Ok(recon)
        }
    }

    /// Forward only as far as `stage` (1-based), returning that stage's
    /// intermediate feature tensors. Used by the feature-dump tooling.
    pub fn forward_traced(
        &self,
        tape: &mut Tape<S>,
        dl: &Tensor<S>,
        ih: &Tensor<S>,
        stage: usize,
    ) -> Result<StageTrace<S>> {
        self.check_inputs(dl, ih)?;
        let l = self.config.upsample_exponent;
        if stage == 0 || stage > l {
            return Err(Error::StageOutOfRange { got: stage, max: l });
        }
        let d = self.config.rdb_layers;
        let pyramid = guidance_pyramid(tape, &self.store, ih, l)?;
        let mut df = blocks::conv_same(tape, &self.store, "entry", dl)?;
        for s in 1..stage {
            let gf = &pyramid[l - s];
            df = stage_forward(tape, &self.store, &format!("stage{s}"), &df, gf, d)?;
        }
        stage_forward_traced(
            tape,
            &self.store,
            &format!("stage{stage}"),
            &df,
            &pyramid[l - stage],
            d,
        )
    }
}
