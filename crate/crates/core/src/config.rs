//! Model, ablation and optimizer settings.
//!
//! Settings round-trip through `key = value` pairs; the `tsn` crate reads
//! and writes them as a line-oriented text file.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use crate::error::{Error, Result};

/// How the two stream embeddings are combined (routing-map ablation).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// `W·F_inst + (1 − W)·F_pix` with the learned routing map.
    Routing,
    /// `W ≡ 0`.
    PixelOnly,
    /// `W ≡ 0.5`.
    Equal,
    /// `W ≡ 1`.
    InstanceOnly,
}

/// How instance-level memory is built (head-count / predictor ablation).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InstanceMode {
    /// One dynamically generated head per reference frame.
    PerFrameHeads,
    /// One head generated from all reference frames' tokens together.
    SinglePooledHead,
    /// Per-frame heads whose parameters come from average-pooled values
    /// through a linear layer instead of the attention predictor.
    GapPredictor,
}

/// Position channels fed to segmentation heads (position-map ablation).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionMode {
    RelCoord,
    Sine,
    None,
}

/// Shape of the residual fed to the routing layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoutingForm {
    /// `D = ‖R_K − K_Q‖² / C_k` through a scalar affine map.
    Scalar,
    /// Channelwise squared residual through a `C_k → 1` linear layer.
    Channelwise,
}

macro_rules! keyword_enum {
    ($ty:ty, $what:literal, $($name:literal => $variant:expr),+ $(,)?) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(Error::Config(format!("unknown {} '{}'", $what, other))),
                }
            }
        }
        impl $ty {
            pub fn name(self) -> &'static str {
                $(if self == $variant { return $name; })+
                unreachable!()
            }
        }
    };
}

keyword_enum!(FusionMode, "fusion mode",
    "routing" => FusionMode::Routing,
    "pixel_only" => FusionMode::PixelOnly,
    "equal" => FusionMode::Equal,
    "instance_only" => FusionMode::InstanceOnly,
);
keyword_enum!(InstanceMode, "instance mode",
    "per_frame_heads" => InstanceMode::PerFrameHeads,
    "single_pooled_head" => InstanceMode::SinglePooledHead,
    "gap_predictor" => InstanceMode::GapPredictor,
);
keyword_enum!(PositionMode, "position mode",
    "rel_coord" => PositionMode::RelCoord,
    "sine" => PositionMode::Sine,
    "none" => PositionMode::None,
);
keyword_enum!(RoutingForm, "routing form",
    "scalar" => RoutingForm::Scalar,
    "channelwise" => RoutingForm::Channelwise,
);

/// Adam and schedule settings.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub poly_power: f64,
    pub iterations: usize,
    pub batch: usize,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Learning-rate multiplier for the routing gate's parameters. The gate
    /// is a handful of scalars; at the base rate Adam moves each by roughly
    /// `lr` per step, far too little to calibrate it in a short schedule.
    pub routing_lr_scale: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 4e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            poly_power: 0.9,
            iterations: 2000,
            batch: 4,
            grad_clip: 0.0,
            routing_lr_scale: 50.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Backbone stride `s`; the encoders are built for 4.
    pub stride: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    /// Channels of each dynamic head layer; the head layout is fixed at 8.
    pub head_channels: usize,
    /// Hidden widths of the first two encoder layers.
    pub enc_widths: [usize; 2],
    pub topk: usize,
    /// Use the dense affinity at inference instead of top-k.
    pub dense_inference: bool,
    pub n_max: usize,
    pub mem_every: usize,
    pub image_size: usize,
    pub fusion: FusionMode,
    pub instance: InstanceMode,
    pub position: PositionMode,
    pub routing_form: RoutingForm,
    pub optim: OptimConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stride: 4,
            key_dim: 16,
            value_dim: 32,
            head_channels: 8,
            enc_widths: [16, 32],
            topk: 20,
            dense_inference: false,
            n_max: 8,
            mem_every: 5,
            image_size: 64,
            fusion: FusionMode::Routing,
            instance: InstanceMode::PerFrameHeads,
            position: PositionMode::RelCoord,
            routing_form: RoutingForm::Scalar,
            optim: OptimConfig::default(),
            seed: 0,
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value '{value}' for '{key}'")))
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.stride != 4 {
            return fail(format!("stride must be 4 (two stride-2 encoder layers), got {}", self.stride));
        }
        if self.head_channels != 8 {
            return fail(format!("head_channels is fixed at 8, got {}", self.head_channels));
        }
        if self.key_dim == 0 || self.value_dim < 4 || self.value_dim % 4 != 0 {
            return fail(format!(
                "key_dim must be positive and value_dim a positive multiple of 4 (got {}, {})",
                self.key_dim, self.value_dim
            ));
        }
        if self.enc_widths.contains(&0) {
            return fail("encoder widths must be positive".to_string());
        }
        if self.topk == 0 {
            return fail("topk must be at least 1".to_string());
        }
        if self.n_max < 2 {
            return fail(format!("n_max must be at least 2, got {}", self.n_max));
        }
        if self.mem_every == 0 {
            return fail("mem_every must be at least 1".to_string());
        }
        if self.image_size == 0 || self.image_size % self.stride != 0 {
            return fail(format!("image_size {} not divisible by stride", self.image_size));
        }
        let o = &self.optim;
        if !(o.lr >= 0.0 && o.lr.is_finite()) || o.batch == 0 || o.iterations == 0 {
            return fail("optimizer needs lr ≥ 0, batch ≥ 1, iterations ≥ 1".to_string());
        }
        if !(o.routing_lr_scale >= 0.0 && o.routing_lr_scale.is_finite()) {
            return fail(format!("routing_lr_scale must be finite and ≥ 0, got {}", o.routing_lr_scale));
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "s" | "stride" => self.stride = parse(key, value)?,
            "c_k" | "key_dim" => self.key_dim = parse(key, value)?,
            "c_v" | "value_dim" => self.value_dim = parse(key, value)?,
            "head_channels" => self.head_channels = parse(key, value)?,
            "enc_width1" => self.enc_widths[0] = parse(key, value)?,
            "enc_width2" => self.enc_widths[1] = parse(key, value)?,
            "k_topk" | "topk" => self.topk = parse(key, value)?,
            "dense_inference" => self.dense_inference = parse(key, value)?,
            "n_max" => self.n_max = parse(key, value)?,
            "mem_every" => self.mem_every = parse(key, value)?,
            "image_size" => self.image_size = parse(key, value)?,
            "fusion" => self.fusion = value.parse()?,
            "instance" => self.instance = value.parse()?,
            "position" => self.position = value.parse()?,
            "routing_form" => self.routing_form = value.parse()?,
            "lr" => self.optim.lr = parse(key, value)?,
            "beta1" => self.optim.beta1 = parse(key, value)?,
            "beta2" => self.optim.beta2 = parse(key, value)?,
            "adam_eps" => self.optim.eps = parse(key, value)?,
            "poly_power" => self.optim.poly_power = parse(key, value)?,
            "iterations" => self.optim.iterations = parse(key, value)?,
            "batch" => self.optim.batch = parse(key, value)?,
            "grad_clip" => self.optim.grad_clip = parse(key, value)?,
            "routing_lr_scale" => self.optim.routing_lr_scale = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// All settings as `(key, value)` pairs accepted by [`ModelConfig::set`].
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let o = &self.optim;
        vec![
            ("stride", self.stride.to_string()),
            ("key_dim", self.key_dim.to_string()),
            ("value_dim", self.value_dim.to_string()),
            ("head_channels", self.head_channels.to_string()),
            ("enc_width1", self.enc_widths[0].to_string()),
            ("enc_width2", self.enc_widths[1].to_string()),
            ("topk", self.topk.to_string()),
            ("dense_inference", self.dense_inference.to_string()),
            ("n_max", self.n_max.to_string()),
            ("mem_every", self.mem_every.to_string()),
            ("image_size", self.image_size.to_string()),
            ("fusion", self.fusion.name().to_string()),
            ("instance", self.instance.name().to_string()),
            ("position", self.position.name().to_string()),
            ("routing_form", self.routing_form.name().to_string()),
            ("lr", format!("{:?}", o.lr)),
            ("beta1", format!("{:?}", o.beta1)),
            ("beta2", format!("{:?}", o.beta2)),
            ("adam_eps", format!("{:?}", o.eps)),
            ("poly_power", format!("{:?}", o.poly_power)),
            ("iterations", o.iterations.to_string()),
            ("batch", o.batch.to_string()),
            ("grad_clip", format!("{:?}", o.grad_clip)),
            ("routing_lr_scale", format!("{:?}", o.routing_lr_scale)),
            ("seed", self.seed.to_string()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.topk, 20);
        let mut back = ModelConfig {
            key_dim: 3,
            fusion: FusionMode::Equal,
            ..ModelConfig::default()
        };
        for (k, v) in cfg.to_pairs() {
            back.set(k, &v).unwrap();
        }
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_bad_settings() {
        let mut cfg = ModelConfig::default();
        assert!(cfg.set("fusion", "sometimes").is_err());
        assert!(cfg.set("nonsense", "1").is_err());
        assert!(cfg.set("topk", "-3").is_err());
        cfg.stride = 8;
        assert!(cfg.validate().is_err());
    }
}
