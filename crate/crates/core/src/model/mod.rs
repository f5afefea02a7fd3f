//! The four network components, their parameter sets and the bundle that
//! checkpoints them together.
//!
//! * `ufe` (G_F): residual-dense feature backbone shared by every head.
//! * `tpu` (G_T): through-plane upsampling head.
//! * `ipu` (G_I): in-plane upsampling head, the self-supervised proxy task.
//! * `srn` (G_S): residual axial refinement head.

mod io;
mod net;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::nn::{ConvSpec, Scalar};

pub use io::{load_bundle, save_bundle, BundleManifest, TensorEntry, MANIFEST_FILE};
pub use net::{
    head_forward_ipu, head_forward_srn, head_forward_tpu, srn_backward, srn_forward_cached, ufe_backward,
    ufe_forward, ufe_forward_cached, upsample_backward, upsample_forward, upsample_forward_cached, FeatureMap,
    SrnCache, UfeCache, UpsampleCache,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub num_rdb: usize,
    pub convs_per_rdb: usize,
    pub growth: usize,
    pub base_channels: usize,
    pub head_convs: usize,
    /// Channels per sub-pixel phase in the upsampling heads; the
    /// penultimate head conv emits `upscale * head_channels` maps.
    pub head_channels: usize,
    pub upscale: usize,
    pub input_channels: usize,
}

impl NetConfig {
    /// Six RDBs of eight convs, growth 32, 64 base channels.
    pub fn paper(upscale: usize) -> Self {
        NetConfig {
            num_rdb: 6,
            convs_per_rdb: 8,
            growth: 32,
            base_channels: 64,
            head_convs: 3,
            head_channels: 32,
            upscale,
            input_channels: 3,
        }
    }

    /// CPU-sized profile with every architectural element present.
    pub fn desk(upscale: usize) -> Self {
        NetConfig {
            num_rdb: 2,
            convs_per_rdb: 4,
            growth: 8,
            base_channels: 16,
            head_convs: 3,
            head_channels: 8,
            upscale,
            input_channels: 3,
        }
    }

    pub fn profile(name: &str, upscale: usize) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper(upscale)),
            "desk" => Ok(Self::desk(upscale)),
            other => Err(Error::contract(format!("unknown network profile `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.upscale >= 2, "upscale must be >= 2, got {}", self.upscale);
        ensure!(self.head_convs == 3, "heads have exactly three convolutions, got {}", self.head_convs);
        ensure!(
            self.num_rdb >= 1 && self.convs_per_rdb >= 1 && self.growth >= 1,
            "backbone needs at least one dense block with one conv"
        );
        ensure!(
            self.base_channels >= 1 && self.head_channels >= 1 && self.input_channels >= 1,
            "channel counts must be positive"
        );
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Ufe,
    Tpu,
    Ipu,
    Srn,
}

impl Component {
    pub const ALL: [Component; 4] = [Component::Ufe, Component::Tpu, Component::Ipu, Component::Srn];

    pub fn name(self) -> &'static str {
        match self {
            Component::Ufe => "ufe",
            Component::Tpu => "tpu",
            Component::Ipu => "ipu",
            Component::Srn => "srn",
        }
    }

    /// Ordered convolution layout of the component.
    pub fn layout(self, cfg: &NetConfig) -> Vec<(String, ConvSpec)> {
        let g0 = cfg.base_channels;
        match self {
            Component::Ufe => {
                let mut layers = vec![
                    ("sfe1".to_string(), ConvSpec::new(cfg.input_channels, g0, 3)),
                    ("sfe2".to_string(), ConvSpec::new(g0, g0, 3)),
                ];
                for b in 0..cfg.num_rdb {
                    for c in 0..cfg.convs_per_rdb {
                        layers.push((format!("rdb{b}.conv{c}"), ConvSpec::new(g0 + c * cfg.growth, cfg.growth, 3)));
                    }
                    layers.push((format!("rdb{b}.lff"), ConvSpec::new(g0 + cfg.convs_per_rdb * cfg.growth, g0, 1)));
                }
                layers.push(("gff1".to_string(), ConvSpec::new(cfg.num_rdb * g0, g0, 1)));
                layers.push(("gff2".to_string(), ConvSpec::new(g0, g0, 3)));
                layers
            }
            Component::Tpu | Component::Ipu => vec![
                ("conv1".to_string(), ConvSpec::new(g0, g0, 3)),
                ("conv2".to_string(), ConvSpec::new(g0, cfg.upscale * cfg.head_channels, 3)),
                ("conv3".to_string(), ConvSpec::new(cfg.head_channels, 1, 3)),
            ],
            Component::Srn => vec![
                ("conv1".to_string(), ConvSpec::new(g0, g0, 3)),
                ("conv2".to_string(), ConvSpec::new(g0, g0, 3)),
                ("conv3".to_string(), ConvSpec::new(g0, 1, 3)),
            ],
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ufe" | "G_F" => Ok(Component::Ufe),
            "tpu" | "G_T" => Ok(Component::Tpu),
            "ipu" | "G_I" => Ok(Component::Ipu),
            "srn" | "G_S" => Ok(Component::Srn),
            other => Err(Error::contract(format!("unknown component `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Named tensors of one component, in layout order: conv `i` owns tensors
/// `2i` (weight, `cout x cin x k x k`) and `2i + 1` (bias).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    pub tensors: Vec<Param<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn zeros(layout: &[(String, ConvSpec)]) -> Self {
        let mut tensors = Vec::with_capacity(layout.len() * 2);
        for (name, spec) in layout {
            tensors.push(Param {
                name: format!("{name}.weight"),
                shape: vec![spec.cout, spec.cin, spec.kernel, spec.kernel],
                data: vec![T::zero(); spec.weight_len()],
            });
            tensors.push(Param {
                name: format!("{name}.bias"),
                shape: vec![spec.cout],
                data: vec![T::zero(); spec.cout],
            });
        }
        ParamSet { tensors }
    }

    pub fn zeros_like(&self) -> Self {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: vec![T::zero(); p.data.len()],
                })
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|p| p.data.len()).sum()
    }

    /// Weight and bias of conv `i`.
    #[inline]
    pub fn conv(&self, i: usize) -> (&[T], &[T]) {
        (&self.tensors[2 * i].data, &self.tensors[2 * i + 1].data)
    }

    #[inline]
    pub fn conv_mut(&mut self, i: usize) -> (&mut [T], &mut [T]) {
        let (head, tail) = self.tensors.split_at_mut(2 * i + 1);
        (&mut head[2 * i].data, &mut tail[0].data)
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
                })
                .collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for p in &mut self.tensors {
            p.data.fill(T::zero());
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|p| p.data.iter().all(|v| v.is_finite()))
    }
}

impl ParamSet<f32> {
    /// SHA-256 over every tensor's little-endian bytes, in layout order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.tensors {
            h.update(p.name.as_bytes());
            for v in &p.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Closed-form parameter count of a component under `cfg`.
pub fn param_count(component: Component, cfg: &NetConfig) -> usize {
    component.layout(cfg).iter().map(|(_, s)| s.param_count()).sum()
}

/// Fresh parameters: He-uniform weights for convs followed by a rectifier,
/// variance-preserving uniform weights for linear convs, zero biases. The
/// refinement head's output conv starts at zero so the head is initially
/// the identity on its center slice.
pub fn init_params(component: Component, cfg: &NetConfig, rng: &mut ChaCha8Rng) -> ParamSet<f32> {
    let layout = component.layout(cfg);
    let mut set = ParamSet::<f32>::zeros(&layout);
    for (i, (name, spec)) in layout.iter().enumerate() {
        let fan_in = (spec.cin * spec.kernel * spec.kernel) as f32;
        let bound = if is_rectified(component, name) {
            (6.0 / fan_in).sqrt()
        } else if component == Component::Srn && name == "conv3" {
            0.0
        } else {
            (3.0 / fan_in).sqrt()
        };
        let (w, _) = set.conv_mut(i);
        for v in w.iter_mut() {
            *v = if bound == 0.0 { 0.0 } else { rng.random_range(-bound..bound) };
        }
    }
    set
}

/// Whether the named conv is followed by a rectifier.
pub(crate) fn is_rectified(component: Component, conv_name: &str) -> bool {
    match component {
        Component::Ufe => conv_name.contains(".conv"),
        Component::Tpu | Component::Ipu | Component::Srn => conv_name == "conv1" || conv_name == "conv2",
    }
}

/// Parameter sets of all four components.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub ufe: ParamSet<T>,
    pub tpu: ParamSet<T>,
    pub ipu: ParamSet<T>,
    pub srn: ParamSet<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn get(&self, c: Component) -> &ParamSet<T> {
        match c {
            Component::Ufe => &self.ufe,
            Component::Tpu => &self.tpu,
            Component::Ipu => &self.ipu,
            Component::Srn => &self.srn,
        }
    }

    pub fn get_mut(&mut self, c: Component) -> &mut ParamSet<T> {
        match c {
            Component::Ufe => &mut self.ufe,
            Component::Tpu => &mut self.tpu,
            Component::Ipu => &mut self.ipu,
            Component::Srn => &mut self.srn,
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            ufe: self.ufe.cast(),
            tpu: self.tpu.cast(),
            ipu: self.ipu.cast(),
            srn: self.srn.cast(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            ufe: self.ufe.zeros_like(),
            tpu: self.tpu.zeros_like(),
            ipu: self.ipu.zeros_like(),
            srn: self.srn.zeros_like(),
        }
    }
}

/// One entry of a bundle's stage history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub seed: u64,
    /// Settings the stage ran with (plans, data manifest hashes, ...).
    #[serde(default)]
    pub details: serde_json::Value,
    /// Checksums of every component after the stage.
    #[serde(default)]
    pub checksums: std::collections::BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub history: Vec<StageRecord>,
}

impl Provenance {
    pub fn has_stage(&self, stage: &str) -> bool {
        self.history.iter().any(|r| r.stage == stage)
    }

    pub fn last_stage(&self) -> Option<&str> {
        self.history.last().map(|r| r.stage.as_str())
    }
}

/// The unit of checkpointing: parameters of all four components, the set
/// of components an optimizer must leave untouched, the network config and
/// the stage history.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub config: NetConfig,
    pub params: ModelParams<f32>,
    pub frozen: BTreeSet<Component>,
    pub provenance: Provenance,
}

impl ModelBundle {
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ModelParams {
            ufe: init_params(Component::Ufe, &config, &mut rng),
            tpu: init_params(Component::Tpu, &config, &mut rng),
            ipu: init_params(Component::Ipu, &config, &mut rng),
            srn: init_params(Component::Srn, &config, &mut rng),
        };
        let mut bundle = ModelBundle {
            config,
            params,
            frozen: BTreeSet::new(),
            provenance: Provenance::default(),
        };
        bundle.record_stage("init", seed, serde_json::Value::Null);
        Ok(bundle)
    }

    pub fn is_frozen(&self, c: Component) -> bool {
        self.frozen.contains(&c)
    }

    pub fn trainable(&self) -> Vec<Component> {
        Component::ALL.into_iter().filter(|c| !self.frozen.contains(c)).collect()
    }

    pub fn checksums(&self) -> std::collections::BTreeMap<String, String> {
        Component::ALL
            .into_iter()
            .map(|c| (c.name().to_string(), self.params.get(c).checksum()))
            .collect()
    }

    pub fn record_stage(&mut self, stage: &str, seed: u64, details: serde_json::Value) {
        let checksums = self.checksums();
        self.provenance.history.push(StageRecord {
            stage: stage.to_string(),
            seed,
            details,
            checksums,
        });
    }

    pub fn num_params(&self) -> usize {
        Component::ALL.iter().map(|&c| self.params.get(c).num_params()).sum()
    }
}

/// Adds `components` to the bundle's frozen set.
pub fn freeze(bundle: &ModelBundle, components: &[Component]) -> ModelBundle {
    let mut out = bundle.clone();
    out.frozen.extend(components.iter().copied());
    out
}

/// Removes `components` from the bundle's frozen set.
pub fn thaw(bundle: &ModelBundle, components: &[Component]) -> ModelBundle {
    let mut out = bundle.clone();
    for c in components {
        out.frozen.remove(c);
    }
    out
}

/// Parses component names (`ufe`, `G_F`, ...) for [`freeze`].
pub fn parse_components<S: AsRef<str>>(names: &[S]) -> Result<Vec<Component>> {
    names.iter().map(|n| n.as_ref().parse()).collect()
}
