//! Toy-scale two-stream network: RGB and depth encoders with granularity
//! attention, a shared fusion stream, three decoders and 15 supervised maps.
//!
//! Level `l` of each encoder is `GBA(relu(conv3×3/2(·)))`. The shared stream
//! fuses both encoders per level and chains levels. Every encoder output is
//! reduced to a common width `r`, decoded top-down, and read out by a 1×1
//! head, a sigmoid and a bilinear upsample to input size.

mod checkpoint;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{Adam, Sgd};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{
    cda_fuse, emi_fuse, encoder_level_merge, enhance, AttentionFlow, AttentionMode, AttentionParams,
    CdaParams, EmiParams, MergeParams,
};
use crate::gba::{gba_forward, GbaParams, PoolingVariant};
use crate::granularity::{masks_for_depth, DepthMap, GranularityMasks};
use crate::objective::{multilevel_loss, LossWeights, BRANCHES, LEVELS};
use crate::params::{Bound, ConvParams, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Channel attention used inside the encoders.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderAttention {
    /// Per-region attention over the depth granularity masks.
    #[default]
    Granularity,
    /// One region covering the whole map (conventional channel attention).
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub input_size: usize,
    pub widths: [usize; LEVELS],
    pub reduced: usize,
    pub thresholds: usize,
    pub seed: u64,
    pub attention: EncoderAttention,
    pub flow: AttentionFlow,
    pub per_region_kernels: bool,
    pub pooling: PoolingVariant,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_size: 352,
            widths: [16, 24, 32, 48, 64],
            reduced: 16,
            thresholds: crate::granularity::DEFAULT_THRESHOLDS,
            seed: 42,
            attention: EncoderAttention::Granularity,
            flow: AttentionFlow::Cross,
            per_region_kernels: false,
            pooling: PoolingVariant::III,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size < 2 {
            return Err(Error::invalid("network: input size must be >= 2"));
        }
        if let Some(w) = self.widths.iter().find(|&&w| w == 0 || w % 2 != 0) {
            return Err(Error::invalid(format!(
                "network: stage widths must be even and positive, got {w}"
            )));
        }
        if self.reduced == 0 || self.reduced % 2 != 0 {
            return Err(Error::invalid(format!(
                "network: reduced width must be even and positive, got {}",
                self.reduced
            )));
        }
        if self.thresholds > crate::granularity::MAX_THRESHOLDS {
            return Err(Error::invalid(format!(
                "network: threshold count {} exceeds {}",
                self.thresholds,
                crate::granularity::MAX_THRESHOLDS
            )));
        }
        Ok(())
    }

    /// Spatial size of each encoder level.
    pub fn level_sizes(&self) -> [usize; LEVELS] {
        let mut s = self.input_size;
        std::array::from_fn(|_| {
            s = s.div_ceil(2);
            s
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Encoder {
    convs: Vec<ConvParams>,
    gba: Vec<GbaParams>,
}

#[derive(Clone, Debug, PartialEq)]
struct Decoder {
    /// Level `l` (0..4) upsamples level `l+1` and convolves.
    up: Vec<ConvParams>,
    skip: Vec<AttentionParams>,
}

#[derive(Clone, Debug, PartialEq)]
struct SharedDecoder {
    up: Vec<ConvParams>,
    emi: Vec<EmiParams>,
    cda: Vec<CdaParams>,
}

#[derive(Clone, Debug, PartialEq)]
struct Layers {
    enc: [Encoder; 2],
    cda: Vec<CdaParams>,
    merge: Vec<MergeParams>,
    rfb: [Vec<ConvParams>; BRANCHES],
    dec: [Decoder; 2],
    shared: SharedDecoder,
    heads: [Vec<ConvParams>; BRANCHES],
}

/// Index of each branch in [`ForwardOutputs::maps`].
pub const RGB: usize = 0;
pub const DEPTH: usize = 1;
pub const SHARED: usize = 2;

pub const BRANCH_NAMES: [&str; BRANCHES] = ["rgb", "depth", "shared"];

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    config: NetworkConfig,
    store: ParamStore,
    layers: Layers,
}

/// Saliency maps `maps[branch][level]` at input resolution, plus named
/// intermediate features.
pub struct ForwardOutputs<'t> {
    pub maps: Vec<Vec<Var<'t>>>,
    pub features: Vec<(String, Var<'t>)>,
}

impl<'t> ForwardOutputs<'t> {
    /// Shared-branch level-1 map.
    pub fn prediction(&self) -> Var<'t> {
        self.maps[SHARED][0]
    }

    pub fn feature(&self, name: &str) -> Option<Var<'t>> {
        self.features.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn loss(&self, gt: &Tensor, weights: &LossWeights) -> Result<Var<'t>> {
        multilevel_loss(&self.maps, gt, weights)
    }
}

pub fn build_network(config: NetworkConfig) -> Result<Network> {
    Network::new(config)
}

impl Network {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let s = &mut store;
        let w = config.widths;
        let r = config.reduced;
        let regions = config.thresholds + 1;

        let enc = [("rgb", 3), ("depth", 1)].map(|(name, cin)| {
            let mut convs = Vec::new();
            let mut gba = Vec::new();
            let mut prev = cin;
            for (l, &c) in w.iter().enumerate() {
                convs.push(ConvParams::init(s, &format!("enc_{name}{}.conv", l + 1), prev, c, 3, 2, true, rng));
                gba.push(GbaParams::init(
                    s,
                    &format!("enc_{name}{}.gba", l + 1),
                    c,
                    regions,
                    config.per_region_kernels,
                    config.pooling,
                    rng,
                ));
                prev = c;
            }
            Encoder { convs, gba }
        });
        let mut cda = Vec::new();
        for (l, &c) in w.iter().enumerate() {
            cda.push(CdaParams::init(s, &format!("fuse{}", l + 1), c, config.flow, rng)?);
        }
        let merge = (1..LEVELS)
            .map(|l| MergeParams::init(s, &format!("merge{}", l + 1), w[l] / 2, w[l - 1] / 2, rng))
            .collect();
        let rfb = [0, 1, 2].map(|b| {
            (0..LEVELS)
                .map(|l| {
                    let cin = if b == SHARED { w[l] / 2 } else { w[l] };
                    ConvParams::init(s, &format!("rfb_{}{}", BRANCH_NAMES[b], l + 1), cin, r, 1, 1, true, rng)
                })
                .collect()
        });
        let dec = [RGB, DEPTH].map(|b| Decoder {
            up: (0..LEVELS - 1)
                .map(|l| ConvParams::init(s, &format!("dec_{}{}.up", BRANCH_NAMES[b], l + 1), r, r, 3, 1, true, rng))
                .collect(),
            skip: (0..LEVELS)
                .map(|l| AttentionParams::init(s, &format!("dec_{}{}.skip", BRANCH_NAMES[b], l + 1), r, rng))
                .collect(),
        });
        let mut shared = SharedDecoder {
            up: Vec::new(),
            emi: Vec::new(),
            cda: Vec::new(),
        };
        for l in 0..LEVELS - 1 {
            let cin = if l + 1 == LEVELS - 1 { r } else { r / 2 };
            shared.up.push(ConvParams::init(s, &format!("dec_shared{}.up", l + 1), cin, r, 3, 1, true, rng));
        }
        for l in 0..LEVELS {
            shared.emi.push(EmiParams::init(s, &format!("dec_shared{}.emi", l + 1), r, rng));
        }
        for l in 0..LEVELS - 1 {
            shared.cda.push(CdaParams::init(s, &format!("dec_shared{}.fuse", l + 1), r, config.flow, rng)?);
        }
        let heads = [0, 1, 2].map(|b| {
            (0..LEVELS)
                .map(|l| {
                    let cin = if b == SHARED && l < LEVELS - 1 { r / 2 } else { r };
                    ConvParams::init(s, &format!("head_{}{}", BRANCH_NAMES[b], l + 1), cin, 1, 1, 1, true, rng)
                })
                .collect()
        });
        Ok(Self {
            config,
            store,
            layers: Layers {
                enc,
                cda,
                merge,
                rfb,
                dec,
                shared,
                heads,
            },
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn parameter_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Granularity masks of a depth map at full resolution, using the
    /// configured threshold count.
    pub fn masks_for(&self, depth: &Tensor) -> Result<GranularityMasks> {
        let d = DepthMap::from_tensor(depth)?;
        Ok(masks_for_depth(&d, self.config.thresholds)?.1)
    }

    /// Records the forward pass on `tape`.
    ///
    /// `rgb` is `1×3×H×W`, `depth` is `1×1×H×W`, both at the configured
    /// input size; `masks` are at full resolution.
    pub fn forward<'t>(
        &self,
        bound: &Bound<'t>,
        rgb: Var<'t>,
        depth: Var<'t>,
        masks: &GranularityMasks,
    ) -> Result<ForwardOutputs<'t>> {
        let size = self.config.input_size;
        for (name, v, c) in [("rgb", &rgb, 3), ("depth", &depth, 1)] {
            if v.shape() != [1, c, size, size] {
                return Err(Error::shape(
                    "network_forward",
                    format!("{name} must be [1, {c}, {size}, {size}], got {:?}", v.shape()),
                ));
            }
        }
        if (masks.height(), masks.width()) != (size, size) {
            return Err(Error::shape(
                "network_forward",
                format!(
                    "masks are {}x{}, input is {size}x{size}",
                    masks.height(),
                    masks.width()
                ),
            ));
        }
        let sizes = self.config.level_sizes();
        let level_masks: Vec<GranularityMasks> = sizes
            .iter()
            .map(|&s| match self.config.attention {
                EncoderAttention::Granularity => masks.resize(s, s),
                EncoderAttention::Global => Ok(GranularityMasks::single(s, s)),
            })
            .collect::<Result<_>>()?;
        let ly = &self.layers;
        let mut features = Vec::new();

        // Encoders.
        let mut enc: [Vec<Var<'t>>; 2] = [Vec::new(), Vec::new()];
        for (b, input) in [(RGB, rgb), (DEPTH, depth)] {
            let mut x = input;
            for l in 0..LEVELS {
                let y = ly.enc[b].convs[l].apply(x, bound)?.relu();
                x = gba_forward(y, &level_masks[l], &ly.enc[b].gba[l], bound)?;
                features.push((format!("enc_{}{}", BRANCH_NAMES[b], l + 1), x));
                enc[b].push(x);
            }
        }

        // Shared encoder stream.
        let mut shared_enc: Vec<Var<'t>> = Vec::new();
        for l in 0..LEVELS {
            let fused = cda_fuse(enc[RGB][l], enc[DEPTH][l], &ly.cda[l], bound)?;
            let prev = (l > 0).then(|| (shared_enc[l - 1], &ly.merge[l - 1]));
            let s = encoder_level_merge(fused, prev, bound)?;
            features.push((format!("enc_shared{}", l + 1), s));
            shared_enc.push(s);
        }

        // Width reduction.
        let sources = [&enc[RGB], &enc[DEPTH], &shared_enc];
        let mut rfb: [Vec<Var<'t>>; BRANCHES] = Default::default();
        for b in 0..BRANCHES {
            for l in 0..LEVELS {
                let v = ly.rfb[b][l].apply(sources[b][l], bound)?;
                features.push((format!("rfb_{}{}", BRANCH_NAMES[b], l + 1), v));
                rfb[b].push(v);
            }
        }

        // RGB and depth decoders, top-down.
        let mut dec: [Vec<Option<Var<'t>>>; 2] = [vec![None; LEVELS], vec![None; LEVELS]];
        for b in [RGB, DEPTH] {
            for l in (0..LEVELS).rev() {
                let g = match self.config.flow {
                    AttentionFlow::Cross => rfb[SHARED][l],
                    AttentionFlow::Own => rfb[b][l],
                };
                let skip = enhance(rfb[b][l], g, &ly.dec[b].skip[l], bound, AttentionMode::Learned)?;
                let d = if l == LEVELS - 1 {
                    skip
                } else {
                    let up = dec[b][l + 1].unwrap().upsample_bilinear(sizes[l], sizes[l])?;
                    ly.dec[b].up[l].apply(up, bound)?.add(skip)?
                };
                features.push((format!("dec_{}{}", BRANCH_NAMES[b], l + 1), d));
                dec[b][l] = Some(d);
            }
        }
        let dec = dec.map(|v| v.into_iter().map(Option::unwrap).collect::<Vec<_>>());

        // Shared decoder.
        let mut shared_dec: Vec<Option<Var<'t>>> = vec![None; LEVELS];
        for l in (0..LEVELS).rev() {
            let h = if l == LEVELS - 1 {
                emi_fuse(dec[RGB][l], dec[DEPTH][l], rfb[SHARED][l], &ly.shared.emi[l], bound)?
            } else {
                let up = shared_dec[l + 1].unwrap().upsample_bilinear(sizes[l], sizes[l])?;
                let f_h = ly.shared.up[l].apply(up, bound)?;
                let e = emi_fuse(dec[RGB][l], dec[DEPTH][l], f_h, &ly.shared.emi[l], bound)?;
                cda_fuse(e, rfb[SHARED][l], &ly.shared.cda[l], bound)?
            };
            features.push((format!("dec_shared{}", l + 1), h));
            shared_dec[l] = Some(h);
        }
        let shared_dec: Vec<Var<'t>> = shared_dec.into_iter().map(Option::unwrap).collect();

        let decoded = [&dec[RGB], &dec[DEPTH], &shared_dec];
        let mut maps = vec![Vec::new(); BRANCHES];
        for b in 0..BRANCHES {
            for l in 0..LEVELS {
                let logit = ly.heads[b][l].apply(decoded[b][l], bound)?;
                maps[b].push(logit.sigmoid().upsample_bilinear(size, size)?);
            }
        }
        Ok(ForwardOutputs { maps, features })
    }

    /// Inference on plain tensors; returns `maps[branch][level]` as
    /// `1×1×H×W` tensors. `rgb` may be `3×H×W` or `1×3×H×W`, `depth`
    /// `H×W`, `1×H×W` or `1×1×H×W`.
    pub fn predict(
        &self,
        rgb: &Tensor,
        depth: &Tensor,
        masks: Option<&GranularityMasks>,
    ) -> Result<Vec<Vec<Tensor>>> {
        let size = self.config.input_size;
        let rgb = as_batch(rgb, 3)?;
        let depth = as_batch(depth, 1)?;
        let owned;
        let masks = match masks {
            Some(m) => m,
            None => {
                if depth.shape()[2..] != [size, size] {
                    return Err(Error::shape(
                        "network_forward",
                        format!("depth is {:?}, expected {size}x{size}", &depth.shape()[2..]),
                    ));
                }
                owned = self.masks_for(&depth)?;
                &owned
            }
        };
        let tape = Tape::new();
        let bound = self.store.bind(&tape, false);
        let out = self.forward(&bound, tape.constant(rgb), tape.constant(depth), masks)?;
        Ok(out
            .maps
            .iter()
            .map(|b| b.iter().map(|v| (*v.value()).clone()).collect())
            .collect())
    }
}

/// Reshapes `C×H×W` (or `H×W` for one channel) to `1×C×H×W`.
pub fn as_batch(t: &Tensor, channels: usize) -> Result<Tensor> {
    match *t.shape() {
        [1, c, _, _] if c == channels => Ok(t.clone()),
        [c, h, w] if c == channels => t.reshape(&[1, c, h, w]),
        [h, w] if channels == 1 => t.reshape(&[1, 1, h, w]),
        _ => Err(Error::shape(
            "network_forward",
            format!("expected {channels} channels, got shape {:?}", t.shape()),
        )),
    }
}

/// One training sample at the configured resolution.
#[derive(Clone, Debug)]
pub struct Sample {
    pub rgb: Tensor,
    pub depth: Tensor,
    pub gt: Tensor,
    pub masks: GranularityMasks,
}

impl Sample {
    pub fn new(net: &Network, rgb: &Tensor, depth: &Tensor, gt: &Tensor) -> Result<Self> {
        let depth = as_batch(depth, 1)?;
        Ok(Self {
            rgb: as_batch(rgb, 3)?,
            masks: net.masks_for(&depth)?,
            gt: as_batch(gt, 1)?,
            depth,
        })
    }
}

/// Mean multi-level loss over `samples` and its gradient per parameter.
pub fn loss_and_grad(net: &Network, samples: &[Sample], weights: &LossWeights) -> Result<(f64, Vec<Tensor>)> {
    if samples.is_empty() {
        return Err(Error::invalid("loss_and_grad: no samples"));
    }
    let mut grads: Vec<Tensor> = net.store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut total = 0.0;
    let scale = 1.0 / samples.len() as f64;
    for s in samples {
        let tape = Tape::new();
        let bound = net.store.bind(&tape, true);
        let out = net.forward(&bound, tape.constant(s.rgb.clone()), tape.constant(s.depth.clone()), &s.masks)?;
        let loss = out.loss(&s.gt, weights)?.scale(scale);
        total += loss.value().data()[0];
        tape.backward(loss)?;
        for (g, v) in grads.iter_mut().zip(bound.vars()) {
            if let Some(vg) = v.grad() {
                for (a, b) in g.data_mut().iter_mut().zip(vg.data()) {
                    *a += b;
                }
            }
        }
    }
    Ok((total, grads))
}

#[cfg(test)]
mod tests;
