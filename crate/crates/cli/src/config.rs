//! JSON experiment configuration: the network architecture, the training
//! hyperparameters, and the data-handling options, mirrored onto the
//! library types.
//!
//! Unknown keys are rejected so a typo cannot silently fall back to a
//! default. Companion `gamma` is required: a number, or the string `"inf"`
//! for a gate that never opens.

use std::fmt;
use std::path::Path;

use serde::de::{self, Deserializer, Visitor};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use dsn_core::layers::{
    Activation, ActivationPoolLayer, ConvLayer, DropoutLayer, FlattenLayer, Layer, Pooling,
};
use dsn_core::loss::HeadKind;
use dsn_core::network::{CompanionSpec, DsnNetwork, FeatureReduce, GateGranularity};
use dsn_core::optim::TrainConfig;

use crate::error::CliError;

/// A threshold that round-trips infinity as the string `"inf"` (JSON has no
/// literal for it).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gamma(pub f64);

impl Serialize for Gamma {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.0.is_infinite() && self.0 > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Gamma {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct GammaVisitor;
        impl Visitor<'_> for GammaVisitor {
            type Value = Gamma;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a non-negative number or the string \"inf\"")
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Gamma, E> {
                if v.is_nan() || v < 0.0 {
                    Err(E::custom(format!("gamma must be non-negative, got {v}")))
                } else {
                    Ok(Gamma(v))
                }
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Gamma, E> {
                self.visit_f64(v as f64)
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Gamma, E> {
                self.visit_f64(v as f64)
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Gamma, E> {
                if v == "inf" {
                    Ok(Gamma(f64::INFINITY))
                } else {
                    Err(E::custom(format!(
                        "gamma accepts a number or \"inf\", got {v:?}"
                    )))
                }
            }
        }
        d.deserialize_any(GammaVisitor)
    }
}

/// Parses the `--gamma FLOAT|inf` flag with the same grammar as the config
/// field.
pub fn parse_gamma_flag(text: &str) -> Result<f64, String> {
    if text == "inf" {
        return Ok(f64::INFINITY);
    }
    match text.parse::<f64>() {
        Ok(v) if v >= 0.0 && !v.is_nan() => Ok(v),
        Ok(v) => Err(format!("gamma must be non-negative, got {v}")),
        Err(_) => Err(format!("gamma accepts a number or \"inf\", got {text:?}")),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum ActivationConfig {
    Identity,
    Relu,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PoolingConfig {
    None,
    Max { window: usize, stride: usize },
    Average { window: usize, stride: usize },
    GlobalAverage,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerConfig {
    Conv {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    ActPool {
        activation: ActivationConfig,
        pooling: PoolingConfig,
    },
    Dropout {
        rate: f64,
    },
    Flatten,
}

fn default_stride() -> usize {
    1
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum HeadKindConfig {
    Svm,
    Softmax,
}

impl From<HeadKindConfig> for HeadKind {
    fn from(k: HeadKindConfig) -> HeadKind {
        match k {
            HeadKindConfig::Svm => HeadKind::Svm,
            HeadKindConfig::Softmax => HeadKind::Softmax,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum ReduceConfig {
    GlobalAverage,
    Flatten,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum GateConfig {
    Batch,
    PerSample,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig::Batch
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CompanionConfig {
    pub after_layer: usize,
    pub kind: HeadKindConfig,
    pub alpha: f64,
    /// Required; absence is a config error reported at build time so that a
    /// message can name the companion.
    #[serde(default)]
    pub gamma: Option<Gamma>,
    #[serde(default = "default_reduce")]
    pub reduce: ReduceConfig,
}

fn default_reduce() -> ReduceConfig {
    ReduceConfig::GlobalAverage
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerConfig>,
    #[serde(default)]
    pub companions: Vec<CompanionConfig>,
    pub output: HeadKindConfig,
    pub classes: usize,
    #[serde(default = "default_balance_c")]
    pub balance_c: f64,
    #[serde(default)]
    pub gate: GateConfig,
}

fn default_balance_c() -> f64 {
    1.0
}

/// Mirrors the library's `TrainConfig`, with the same defaults.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub head_weight_decay: f64,
    pub anneal_epochs: Vec<usize>,
    pub anneal_factor: f64,
    pub alpha_decay: bool,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            momentum: d.momentum,
            weight_decay: d.weight_decay,
            head_weight_decay: d.head_weight_decay,
            anneal_epochs: d.anneal_epochs,
            anneal_factor: d.anneal_factor,
            alpha_decay: d.alpha_decay,
            seed: d.seed,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            head_weight_decay: self.head_weight_decay,
            anneal_epochs: self.anneal_epochs.clone(),
            anneal_factor: self.anneal_factor,
            alpha_decay: self.alpha_decay,
            seed: self.seed,
        }
    }
}

/// Dataset handling ahead of training.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// When set, the training split is cut to this many samples per class
    /// (seeded from the run seed) before anything else happens.
    pub train_per_class: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FullConfig {
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub data: DataSection,
}

/// Command-line overrides applied on top of a loaded config.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub gamma: Option<f64>,
    pub alpha: Option<f64>,
    pub seed: Option<u64>,
}

impl FullConfig {
    pub fn load(path: &Path) -> Result<FullConfig, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config_io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn apply(&mut self, overrides: &Overrides) {
        if let Some(g) = overrides.gamma {
            for c in &mut self.network.companions {
                c.gamma = Some(Gamma(g));
            }
        }
        if let Some(a) = overrides.alpha {
            for c in &mut self.network.companions {
                c.alpha = a;
            }
        }
        if let Some(s) = overrides.seed {
            self.train.seed = s;
        }
    }

    /// Builds the network with freshly initialized weights (seeded from the
    /// training seed).
    pub fn build_network(&self) -> Result<DsnNetwork, CliError> {
        let mut net = build_uninitialized(&self.network)?;
        net.init_weights(self.train.seed);
        Ok(net)
    }
}

fn build_layer(cfg: &LayerConfig, in_channels: usize) -> Result<Layer, CliError> {
    Ok(match cfg {
        LayerConfig::Conv {
            out_channels,
            kernel,
            stride,
            padding,
        } => Layer::Conv(ConvLayer::new(
            in_channels,
            *out_channels,
            *kernel,
            *stride,
            *padding,
        )?),
        LayerConfig::ActPool {
            activation,
            pooling,
        } => {
            let act = match activation {
                ActivationConfig::Identity => Activation::Identity,
                ActivationConfig::Relu => Activation::Relu,
            };
            let pool = match pooling {
                PoolingConfig::None => Pooling::None,
                PoolingConfig::Max { window, stride } => Pooling::Max {
                    window: *window,
                    stride: *stride,
                },
                PoolingConfig::Average { window, stride } => Pooling::Average {
                    window: *window,
                    stride: *stride,
                },
                PoolingConfig::GlobalAverage => Pooling::GlobalAverage,
            };
            Layer::ActPool(ActivationPoolLayer::new(act, pool)?)
        }
        // The placeholder mask seed is replaced by init_weights.
        LayerConfig::Dropout { rate } => Layer::Dropout(DropoutLayer::new(*rate, 0)?),
        LayerConfig::Flatten => Layer::Flatten(FlattenLayer),
    })
}

fn build_uninitialized(cfg: &NetworkConfig) -> Result<DsnNetwork, CliError> {
    let [c, h, w] = cfg.input_shape;
    let mut layers = Vec::with_capacity(cfg.layers.len());
    let mut shape = vec![1usize, c, h, w];
    for (i, lc) in cfg.layers.iter().enumerate() {
        let channels = if shape.len() == 4 { shape[1] } else { 0 };
        let layer = build_layer(lc, channels)?;
        shape = layer.output_shape(&shape).map_err(|e| {
            CliError::Config(format!("layer {i} does not fit the incoming shape: {e}"))
        })?;
        layers.push(layer);
    }

    let mut specs = Vec::with_capacity(cfg.companions.len());
    for (i, cc) in cfg.companions.iter().enumerate() {
        let gamma = cc.gamma.ok_or_else(|| {
            CliError::Config(format!(
                "companion {i} (after layer {}) needs a gamma: a number or \"inf\"",
                cc.after_layer
            ))
        })?;
        specs.push(CompanionSpec {
            after_layer: cc.after_layer,
            kind: cc.kind.into(),
            alpha: cc.alpha,
            gamma: gamma.0,
            reduce: match cc.reduce {
                ReduceConfig::GlobalAverage => FeatureReduce::GlobalAverage,
                ReduceConfig::Flatten => FeatureReduce::Flatten,
            },
        });
    }

    let gate = match cfg.gate {
        GateConfig::Batch => GateGranularity::Batch,
        GateConfig::PerSample => GateGranularity::PerSample,
    };
    Ok(DsnNetwork::new(
        cfg.input_shape,
        layers,
        &specs,
        cfg.output.into(),
        cfg.classes,
        cfg.balance_c,
        gate,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json() -> String {
        r#"{
            "network": {
                "input_shape": [1, 6, 6],
                "layers": [
                    {"kind": "conv", "out_channels": 2, "kernel": 3},
                    {"kind": "act_pool", "activation": "relu", "pooling": {"kind": "none"}},
                    {"kind": "flatten"}
                ],
                "companions": [
                    {"after_layer": 1, "kind": "svm", "alpha": 0.5, "gamma": 2.0}
                ],
                "output": "svm",
                "classes": 3
            },
            "train": {"epochs": 2, "batch_size": 4, "seed": 9}
        }"#
        .to_string()
    }

    fn parse(text: &str) -> Result<FullConfig, serde_json::Error> {
        serde_json::from_str(text)
    }

    #[test]
    fn minimal_config_parses_and_builds() {
        let cfg: FullConfig = parse(&minimal_json()).unwrap();
        let net = cfg.build_network().unwrap();
        assert_eq!(net.classes(), 3);
        assert_eq!(net.companions().len(), 1);
        assert_eq!(cfg.train.epochs, 2);
        // Defaults fill the unset training fields.
        assert_eq!(cfg.train.momentum, 0.9);
    }

    #[test]
    fn gamma_accepts_inf_and_numbers_and_rejects_junk() {
        let g: Gamma = serde_json::from_str("\"inf\"").unwrap();
        assert_eq!(g.0, f64::INFINITY);
        let g: Gamma = serde_json::from_str("2.5").unwrap();
        assert_eq!(g.0, 2.5);
        assert!(serde_json::from_str::<Gamma>("\"huge\"").is_err());
        assert!(serde_json::from_str::<Gamma>("-1.0").is_err());
    }

    #[test]
    fn gamma_round_trips_infinity_through_json() {
        let text = serde_json::to_string(&Gamma(f64::INFINITY)).unwrap();
        assert_eq!(text, "\"inf\"");
        let back: Gamma = serde_json::from_str(&text).unwrap();
        assert_eq!(back.0, f64::INFINITY);
    }

    #[test]
    fn missing_gamma_is_a_build_error_naming_the_companion() {
        let text = minimal_json().replace(", \"gamma\": 2.0", "");
        let cfg: FullConfig = parse(&text).unwrap();
        let err = cfg.build_network().unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("companion 0"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = minimal_json().replace("\"epochs\": 2", "\"epochs\": 2, \"warmup\": 1");
        assert!(parse(&text).is_err());
    }

    #[test]
    fn overrides_rewrite_every_companion_and_the_seed() {
        let mut cfg: FullConfig = parse(&minimal_json()).unwrap();
        cfg.apply(&Overrides {
            gamma: Some(f64::INFINITY),
            alpha: Some(0.25),
            seed: Some(77),
        });
        assert_eq!(cfg.network.companions[0].gamma, Some(Gamma(f64::INFINITY)));
        assert_eq!(cfg.network.companions[0].alpha, 0.25);
        assert_eq!(cfg.train.seed, 77);
    }

    #[test]
    fn gamma_flag_parser_matches_the_config_grammar() {
        assert_eq!(parse_gamma_flag("inf").unwrap(), f64::INFINITY);
        assert_eq!(parse_gamma_flag("0.5").unwrap(), 0.5);
        assert!(parse_gamma_flag("-2").is_err());
        assert!(parse_gamma_flag("infinite").is_err());
    }

    #[test]
    fn conv_channels_are_threaded_through_the_stack() {
        let text = minimal_json().replace(
            r#"{"kind": "conv", "out_channels": 2, "kernel": 3}"#,
            r#"{"kind": "conv", "out_channels": 2, "kernel": 3},
               {"kind": "conv", "out_channels": 4, "kernel": 2}"#,
        );
        let cfg: FullConfig = parse(&text).unwrap();
        let net = cfg.build_network().unwrap();
        // 6x6 -> conv3 -> 4x4 -> conv2 -> 3x3, flattened by the last layer.
        assert_eq!(net.layers().len(), 4);
    }
}
