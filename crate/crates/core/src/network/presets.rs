use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Activation, BatchNorm, Block, Linear, Model, Pool, ResidualUnit, Stage};
use crate::quant::{levels, PactMode, PactState, QuantScheme, RescaleMode, WeightFormat};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Six conv blocks, BN after every conv, FC head.
    ConvnetBn,
    /// As `ConvnetBn` but the last conv has no BN.
    ConvnetNobnTail,
    /// Stem plus two pre-activation residual units.
    PreresnetToy,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::ConvnetBn => "convnet-bn",
            Preset::ConvnetNobnTail => "convnet-nobn-tail",
            Preset::PreresnetToy => "preresnet-toy",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "convnet-bn" => Ok(Preset::ConvnetBn),
            "convnet-nobn-tail" => Ok(Preset::ConvnetNobnTail),
            "preresnet-toy" => Ok(Preset::PreresnetToy),
            _ => Err(Error::Config(format!(
                "unknown preset `{s}` (expected convnet-bn|convnet-nobn-tail|preresnet-toy)"
            ))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which linear layers receive the configured rescale mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RescaleScope {
    /// The head and every linear layer not followed by BN.
    Auto,
    /// The head only.
    Fc,
    /// Every linear layer.
    All,
}

impl FromStr for RescaleScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(RescaleScope::Auto),
            "fc" => Ok(RescaleScope::Fc),
            "all" => Ok(RescaleScope::All),
            _ => Err(Error::Config(format!(
                "unknown rescale_scope `{s}` (expected auto|fc|all)"
            ))),
        }
    }
}

impl fmt::Display for RescaleScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RescaleScope::Auto => "auto",
            RescaleScope::Fc => "fc",
            RescaleScope::All => "all",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub preset: Preset,
    /// `C×H×W`; H and W must be multiples of 4.
    pub input: [usize; 3],
    pub classes: usize,
    /// Channel count of the first blocks.
    pub width: usize,
    /// Format of the internal layers.
    pub weights: WeightFormat,
    /// Bit width of the first and last layer when `weights` is quantized.
    pub first_last_bits: u32,
    pub rescale: RescaleMode,
    pub rescale_scope: RescaleScope,
    /// Activation bits; `None` keeps plain ReLU.
    pub act_bits: Option<u32>,
    pub pact_mode: PactMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            preset: Preset::ConvnetBn,
            input: [3, 32, 32],
            classes: 10,
            width: 8,
            weights: WeightFormat::Float,
            first_last_bits: 8,
            rescale: RescaleMode::None,
            rescale_scope: RescaleScope::Auto,
            act_bits: None,
            pact_mode: PactMode::Calibrated,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.input;
        if c == 0 || h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Config(format!(
                "input {c}×{h}×{w}: extents must be positive and H, W multiples of 4"
            )));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "classes must be ≥ 2, got {}",
                self.classes
            )));
        }
        if self.width == 0 {
            return Err(Error::Config("width must be ≥ 1".into()));
        }
        if let WeightFormat::Quantized(b) = self.weights {
            levels(b).map_err(|e| Error::Config(format!("bits: {e}")))?;
            levels(self.first_last_bits)
                .map_err(|e| Error::Config(format!("first_last_bits: {e}")))?;
        }
        if let Some(b) = self.act_bits {
            levels(b).map_err(|e| Error::Config(format!("act_bits: {e}")))?;
        }
        Ok(())
    }

    fn activation(&self) -> Result<Activation> {
        Ok(match self.act_bits {
            Some(b) => Activation::Pact(PactState::new(Some(b), self.pact_mode)?),
            None => Activation::Relu,
        })
    }
}

fn conv_block(
    cfg: &ModelConfig,
    name: &str,
    linear: Linear,
    bn: bool,
    pool: Pool,
) -> Result<Stage> {
    let ch = linear.out_channels();
    Ok(Stage::Block(Block {
        name: name.to_string(),
        bn: bn.then(|| BatchNorm::new(&format!("{name}.bn"), ch)),
        linear,
        act: cfg.activation()?,
        pool,
    }))
}

fn residual(cfg: &ModelConfig, name: &str, ch: usize) -> Result<Stage> {
    Ok(Stage::Residual(ResidualUnit {
        name: name.to_string(),
        bn1: BatchNorm::new(&format!("{name}.bn1"), ch),
        act1: cfg.activation()?,
        conv1: Linear::conv(&format!("{name}.conv1"), ch, ch, 3, 1, 1),
        bn2: BatchNorm::new(&format!("{name}.bn2"), ch),
        act2: cfg.activation()?,
        conv2: Linear::conv(&format!("{name}.conv2"), ch, ch, 3, 1, 1),
    }))
}

/// Builds a preset with weight-variance `1/n̂` init drawn from `seed`.
///
/// The stem is a stride-2 2×2 conv; the second stage halves the map again,
/// so the head's global pool covers `H/4 × W/4`.
pub fn build_preset(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let w = cfg.width;
    let c_in = cfg.input[0];
    let mut stages = Vec::new();
    let head_in = match cfg.preset {
        Preset::ConvnetBn | Preset::ConvnetNobnTail => {
            let chans = [w, w, 2 * w, 2 * w, 2 * w, 2 * w];
            let mut prev = c_in;
            for (i, &ch) in chans.iter().enumerate() {
                let name = format!("conv{}", i + 1);
                let linear = if i == 0 {
                    Linear::conv(&name, prev, ch, 2, 2, 0)
                } else {
                    Linear::conv(&name, prev, ch, 3, 1, 1)
                };
                let bn = !(i == 5 && cfg.preset == Preset::ConvnetNobnTail);
                let pool = if i == 1 { Pool::Avg(2) } else { Pool::None };
                stages.push(conv_block(cfg, &name, linear, bn, pool)?);
                prev = ch;
            }
            prev
        }
        Preset::PreresnetToy => {
            let stem = Linear::conv("conv1", c_in, w, 2, 2, 0);
            stages.push(conv_block(cfg, "conv1", stem, true, Pool::Avg(2))?);
            stages.push(residual(cfg, "res1", w)?);
            stages.push(residual(cfg, "res2", w)?);
            stages.push(Stage::Norm {
                name: "tail".into(),
                bn: BatchNorm::new("tail.bn", w),
                act: cfg.activation()?,
            });
            w
        }
    };
    let mut model = Model {
        preset: cfg.preset,
        width: w,
        input: cfg.input,
        classes: cfg.classes,
        stages,
        head: Linear::fc("fc", head_in, cfg.classes),
    };
    assign_schemes(&mut model, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for l in model.linears_mut() {
        l.init_kaiming(&mut rng);
    }
    Ok(model)
}

/// Sets every linear layer's [`QuantScheme`] from the config.
pub(crate) fn assign_schemes(model: &mut Model, cfg: &ModelConfig) -> Result<()> {
    let follows = model.follows_bn();
    let mut linears = model.linears_mut();
    let last = linears.len() - 1;
    for (i, l) in linears.iter_mut().enumerate() {
        let edge = i == 0 || i == last;
        let format = match cfg.weights {
            WeightFormat::Quantized(_) if edge => WeightFormat::Quantized(cfg.first_last_bits),
            f => f,
        };
        let in_scope = match cfg.rescale_scope {
            RescaleScope::All => true,
            RescaleScope::Fc => i == last,
            RescaleScope::Auto => i == last || !follows[i],
        };
        let rescale = if in_scope {
            cfg.rescale
        } else {
            RescaleMode::None
        };
        l.scheme = QuantScheme::new(format, rescale, l.fan_out())?;
    }
    Ok(())
}
