//! Model configuration, presets, seeded generation and parameter counting.

mod io;

pub use io::{
    decode_sequence, decode_weights, encode_sequence, encode_weights, load_sequence, load_weights, load_weights_as,
    save_sequence, save_weights, FORMAT_VERSION, SEQUENCE_HEADER_LEN, SEQUENCE_MAGIC, WEIGHTS_HEADER_LEN,
    WEIGHTS_MAGIC,
};

use std::fmt;
use std::str::FromStr;

use crate::cells::{CellKind, LayerWeights};
use crate::error::{Error, Result};
use crate::numeric::{Matrix, Precision, Rng64, Scalar};

/// Default sequence length used by the benchmarks (1,024 input samples).
pub const DEFAULT_SEQ_LEN: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RnnConfig {
    pub kind: CellKind,
    pub d_in: usize,
    pub d_h: usize,
    pub n_layers: usize,
    pub precision: Precision,
}

impl RnnConfig {
    /// Single layer with `d_in == d_h == width`.
    pub fn square(kind: CellKind, width: usize, precision: Precision) -> Self {
        Self {
            kind,
            d_in: width,
            d_h: width,
            n_layers: 1,
            precision,
        }
    }

    pub fn with_layers(mut self, n_layers: usize) -> Self {
        self.n_layers = n_layers;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_h == 0 {
            return Err(Error::InvalidConfig(format!(
                "widths must be positive (d_in = {}, d_h = {})",
                self.d_in, self.d_h
            )));
        }
        if self.n_layers == 0 {
            return Err(Error::InvalidConfig("n_layers must be at least 1".into()));
        }
        if self.kind == CellKind::Sru && self.d_in != self.d_h {
            return Err(Error::InvalidConfig(format!(
                "SRU requires d_in == d_h (got {} and {})",
                self.d_in, self.d_h
            )));
        }
        Ok(())
    }

    /// `(d_in, d_h)` of layer `layer`; layers after the first read `d_h` inputs.
    pub fn layer_dims(&self, layer: usize) -> (usize, usize) {
        if layer == 0 {
            (self.d_in, self.d_h)
        } else {
            (self.d_h, self.d_h)
        }
    }
}

impl fmt::Display for RnnConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} d_in={} d_h={} layers={} {}",
            self.kind, self.d_in, self.d_h, self.n_layers, self.precision
        )
    }
}

/// Parameters of one layer, split into input-side (`W` and biases) and
/// recurrent (`U`) counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamSplit {
    pub input: u64,
    pub recurrent: u64,
}

impl ParamSplit {
    pub fn total(self) -> u64 {
        self.input + self.recurrent
    }
}

pub fn layer_params(kind: CellKind, d_in: usize, d_h: usize) -> ParamSplit {
    checked_layer_params(kind, d_in, d_h).expect("parameter count overflows u64")
}

fn checked_layer_params(kind: CellKind, d_in: usize, d_h: usize) -> Option<ParamSplit> {
    let (i, h) = (d_in as u128, d_h as u128);
    let (input, recurrent) = match kind {
        CellKind::Lstm => (4 * h * i + 4 * h, 4 * h * h),
        CellKind::Sru => (3 * h * i + 2 * h, 0),
        CellKind::Qrnn => (6 * h * i, 0),
    };
    Some(ParamSplit {
        input: input.try_into().ok()?,
        recurrent: recurrent.try_into().ok()?,
    })
}

/// Summed [`ParamSplit`] over all layers.
pub fn param_split(cfg: &RnnConfig) -> Result<ParamSplit> {
    cfg.validate()?;
    let overflow = || Error::InvalidConfig(format!("parameter count of {cfg} overflows"));
    let first = checked_layer_params(cfg.kind, cfg.d_in, cfg.d_h).ok_or_else(overflow)?;
    let rest = checked_layer_params(cfg.kind, cfg.d_h, cfg.d_h).ok_or_else(overflow)?;
    let later = (cfg.n_layers - 1) as u64;
    let total = ParamSplit {
        input: rest
            .input
            .checked_mul(later)
            .and_then(|v| v.checked_add(first.input))
            .ok_or_else(overflow)?,
        recurrent: rest
            .recurrent
            .checked_mul(later)
            .and_then(|v| v.checked_add(first.recurrent))
            .ok_or_else(overflow)?,
    };
    total.input.checked_add(total.recurrent).ok_or_else(overflow)?;
    Ok(total)
}

/// Total parameter count, biases included.
pub fn count_params(cfg: &RnnConfig) -> Result<u64> {
    param_split(cfg).map(ParamSplit::total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PresetSize {
    Small,
    Large,
}

impl FromStr for PresetSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(PresetSize::Small),
            "large" => Ok(PresetSize::Large),
            other => Err(Error::InvalidArgument(format!("unknown preset size `{other}`"))),
        }
    }
}

/// Model sizes of the reference experiments. QRNN reuses the SRU widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelPreset {
    pub kind: CellKind,
    pub size: PresetSize,
}

impl ModelPreset {
    pub const fn new(kind: CellKind, size: PresetSize) -> Self {
        Self { kind, size }
    }

    pub fn width(self) -> usize {
        match (self.kind, self.size) {
            (CellKind::Lstm, PresetSize::Small) => 350,
            (CellKind::Lstm, PresetSize::Large) => 700,
            (_, PresetSize::Small) => 512,
            (_, PresetSize::Large) => 1024,
        }
    }

    pub fn name(self) -> String {
        let size = match self.size {
            PresetSize::Small => "small",
            PresetSize::Large => "large",
        };
        format!("{}-{size}", self.kind.label().to_ascii_lowercase())
    }

    pub fn config(self, precision: Precision) -> RnnConfig {
        RnnConfig::square(self.kind, self.width(), precision)
    }
}

impl FromStr for ModelPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, size) = s
            .split_once('-')
            .ok_or_else(|| Error::InvalidArgument(format!("preset `{s}` is not <cell>-<size>")))?;
        Ok(Self::new(kind.parse()?, size.parse()?))
    }
}

/// Weights of every layer, in layer order, plus the config they satisfy.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet<S> {
    config: RnnConfig,
    layers: Vec<LayerWeights<S>>,
}

impl<S: Scalar> WeightSet<S> {
    pub fn new(config: RnnConfig, layers: Vec<LayerWeights<S>>) -> Result<Self> {
        config.validate()?;
        if config.precision != S::PRECISION {
            return Err(Error::InvalidConfig(format!(
                "config precision {} does not match element type {}",
                config.precision,
                S::PRECISION
            )));
        }
        if layers.len() != config.n_layers {
            return Err(Error::InvalidConfig(format!(
                "config has {} layers, got {}",
                config.n_layers,
                layers.len()
            )));
        }
        for (l, layer) in layers.iter().enumerate() {
            layer.validate()?;
            let (d_in, d_h) = config.layer_dims(l);
            if layer.kind() != config.kind || layer.d_in() != d_in || layer.d_h() != d_h {
                return Err(Error::ShapeInconsistent(format!(
                    "layer {l} is {} {}x{}, config expects {} {}x{}",
                    layer.kind(),
                    layer.d_h(),
                    layer.d_in(),
                    config.kind,
                    d_h,
                    d_in
                )));
            }
        }
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &RnnConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerWeights<S>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerWeights<S>] {
        &mut self.layers
    }
}

/// A weight set whose precision is only known at run time.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyWeightSet {
    F32(WeightSet<f32>),
    F64(WeightSet<f64>),
}

impl AnyWeightSet {
    pub fn config(&self) -> &RnnConfig {
        match self {
            AnyWeightSet::F32(w) => w.config(),
            AnyWeightSet::F64(w) => w.config(),
        }
    }

    pub fn generate(cfg: &RnnConfig, seed: u64) -> Result<Self> {
        Ok(match cfg.precision {
            Precision::F32 => AnyWeightSet::F32(generate_weights(cfg, seed)?),
            Precision::F64 => AnyWeightSet::F64(generate_weights(cfg, seed)?),
        })
    }
}

/// Fills every parameter from one SplitMix64 stream, layer by layer, in
/// canonical buffer order, row-major.
pub fn generate_weights<S: Scalar>(cfg: &RnnConfig, seed: u64) -> Result<WeightSet<S>> {
    if cfg.precision != S::PRECISION {
        return Err(Error::InvalidConfig(format!(
            "requested {} weights for a {} config",
            S::PRECISION,
            cfg.precision
        )));
    }
    cfg.validate()?;
    let mut rng = Rng64::new(seed);
    let layers = (0..cfg.n_layers)
        .map(|l| {
            let (d_in, d_h) = cfg.layer_dims(l);
            let buffers = LayerWeights::<S>::buffer_shapes(cfg.kind, d_in, d_h)
                .into_iter()
                .map(|(r, c)| (0..r * c).map(|_| S::from_f64(rng.next_weight())).collect())
                .collect();
            LayerWeights::from_buffers(cfg.kind, d_in, d_h, buffers)
        })
        .collect::<Result<Vec<_>>>()?;
    WeightSet::new(*cfg, layers)
}

/// Seed used for the input sequence when a single seed drives a whole run.
pub fn input_seed(seed: u64) -> u64 {
    seed ^ 0x5EED_0F00_1A7E_5EED
}

/// `len × width` sequence from its own SplitMix64 stream, row-major.
pub fn generate_sequence<S: Scalar>(len: usize, width: usize, seed: u64) -> Result<Matrix<S>> {
    if len == 0 || width == 0 {
        return Err(Error::InvalidArgument(format!(
            "sequence must be at least 1x1, got {len}x{width}"
        )));
    }
    let mut rng = Rng64::new(seed);
    Matrix::from_fn(len, width, |_, _| S::from_f64(rng.next_weight()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::uniform_weight;

    #[test]
    fn preset_param_counts() {
        let count = |name: &str| count_params(&name.parse::<ModelPreset>().unwrap().config(Precision::F32)).unwrap();
        assert_eq!(count("lstm-small"), 981_400);
        assert_eq!(count("lstm-large"), 3_922_800);
        assert_eq!(count("sru-small"), 787_456);
        assert_eq!(count("sru-large"), 3_147_776);
        assert_eq!(count("qrnn-small"), 6 * 512 * 512);
        let ratio = count("lstm-small") as f64 / count("sru-small") as f64;
        assert!((0.8..=1.3).contains(&ratio), "{ratio}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = RnnConfig::square(CellKind::Lstm, 0, Precision::F32);
        assert!(count_params(&cfg).is_err());
        cfg.d_h = 4;
        cfg.d_in = 4;
        cfg.n_layers = 0;
        assert!(count_params(&cfg).is_err());
        let sru = RnnConfig {
            kind: CellKind::Sru,
            d_in: 3,
            d_h: 4,
            n_layers: 1,
            precision: Precision::F32,
        };
        assert!(matches!(generate_weights::<f32>(&sru, 1), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn multi_layer_counts_use_hidden_width_after_first_layer() {
        let cfg = RnnConfig {
            kind: CellKind::Qrnn,
            d_in: 3,
            d_h: 5,
            n_layers: 2,
            precision: Precision::F64,
        };
        assert_eq!(count_params(&cfg).unwrap(), 6 * 5 * 3 + 6 * 5 * 5);
    }

    #[test]
    fn first_weight_comes_from_first_draw() {
        let cfg = RnnConfig::square(CellKind::Sru, 2, Precision::F64);
        let ws = generate_weights::<f64>(&cfg, 1).unwrap();
        let LayerWeights::Sru(w) = &ws.layers()[0] else {
            panic!()
        };
        let mut rng = Rng64::new(1);
        assert_eq!(w.w.get(0, 0), uniform_weight(rng.next()));
        assert_eq!(w.w.get(0, 1), uniform_weight(rng.next()));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = RnnConfig::square(CellKind::Lstm, 7, Precision::F32);
        let a = generate_weights::<f32>(&cfg, 99).unwrap();
        assert_eq!(a, generate_weights::<f32>(&cfg, 99).unwrap());
        let b = generate_weights::<f32>(&cfg, 100).unwrap();
        assert_ne!(a.layers()[0].buffers()[0][0], b.layers()[0].buffers()[0][0]);
    }

    #[test]
    fn sequence_shape_and_first_element() {
        let x = generate_sequence::<f32>(1024, 512, 5).unwrap();
        assert_eq!(x.shape(), (1024, 512));
        assert_eq!(x.get(0, 0), uniform_weight(Rng64::new(5).next()) as f32);
        assert!(generate_sequence::<f32>(0, 4, 5).is_err());
    }
}
