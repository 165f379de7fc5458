//! Cross dual-attention fusion, encoder level chaining and the multi-input
//! decoder fusion.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gba::{eca_kernel_size, global_eca};
use crate::params::{Bound, ConvParams, LinearParams, ParamId, ParamStore};
use crate::tensor::{concat_channels, Var};

/// MLP reduction ratio of the channel attention.
pub const MLP_REDUCTION: usize = 16;

/// Which branch's attention maps modulate a branch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionFlow {
    /// Each branch is modulated by the other branch's attention.
    #[default]
    Cross,
    /// Each branch is modulated by its own attention (no information
    /// crosses between branches before the output convolution).
    Own,
}

/// Whether attention maps are computed or replaced by ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    Learned,
    /// `M_c = M_s = 1`; used to check the multiplicative path in isolation.
    Saturated,
}

/// `F_t`: 1×1 convolution halving the channels, then a 3×3 convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct FtParams {
    pub reduce: ConvParams,
    pub conv: ConvParams,
}

impl FtParams {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Self {
        let half = channels / 2;
        Self {
            reduce: ConvParams::init(store, &format!("{name}.reduce"), channels, half, 1, 1, false, rng),
            conv: ConvParams::init(store, &format!("{name}.conv"), half, half, 3, 1, false, rng),
        }
    }
}

/// Channel MLP (`C → max(1, C/16) → C`) and 7×7 spatial convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub mlp: [LinearParams; 2],
    pub spatial: ConvParams,
}

impl AttentionParams {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Self {
        let hidden = (channels / MLP_REDUCTION).max(1);
        Self {
            mlp: [
                LinearParams::init(store, &format!("{name}.mlp1"), channels, hidden, rng),
                LinearParams::init(store, &format!("{name}.mlp2"), hidden, channels, rng),
            ],
            spatial: ConvParams::init(store, &format!("{name}.spatial"), 2, 1, 7, 1, true, rng),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CdaParams {
    pub channels: usize,
    pub ft: [FtParams; 2],
    pub attention: AttentionParams,
    pub out: ConvParams,
    pub flow: AttentionFlow,
}

fn check_even(op: &'static str, channels: usize) -> Result<()> {
    if channels == 0 || channels % 2 != 0 {
        return Err(Error::invalid(format!(
            "{op}: channel count must be even, got {channels}"
        )));
    }
    Ok(())
}

impl CdaParams {
    /// Fusion of two `channels`-wide inputs into `channels/2` outputs.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        flow: AttentionFlow,
        rng: &mut R,
    ) -> Result<Self> {
        check_even("cda", channels)?;
        let half = channels / 2;
        Ok(Self {
            channels,
            ft: [
                FtParams::init(store, &format!("{name}.ft_x"), channels, rng),
                FtParams::init(store, &format!("{name}.ft_y"), channels, rng),
            ],
            attention: AttentionParams::init(store, name, half, rng),
            out: ConvParams::init(store, &format!("{name}.out"), channels, half, 3, 1, true, rng),
            flow,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.channels / 2
    }
}

/// `Conv3×3(Conv1×1(f))`, halving the channel count.
pub fn transform_ft<'t>(f: Var<'t>, ft: &FtParams, bound: &Bound<'t>) -> Result<Var<'t>> {
    let s = f.shape();
    if s.len() != 4 {
        return Err(Error::shape("transform_ft", format!("expected NCHW, got {s:?}")));
    }
    check_even("transform_ft", s[1])?;
    let y = ft.reduce.apply(f, bound)?;
    ft.conv.apply(y, bound)
}

fn mlp<'t>(z: Var<'t>, mlp: &[LinearParams; 2], bound: &Bound<'t>) -> Result<Var<'t>> {
    let s = z.shape();
    let (n, c) = (s[0], s[1]);
    let h = mlp[0].apply(z.reshape(&[n, c])?, bound)?.relu();
    mlp[1].apply(h, bound)?.reshape(&[n, c, 1, 1])
}

/// `σ(MLP(GAP(f)) + MLP(GMP(f)))`, `N×C×1×1`.
pub fn channel_attention<'t>(f: Var<'t>, params: &[LinearParams; 2], bound: &Bound<'t>) -> Result<Var<'t>> {
    let avg = mlp(f.gap()?, params, bound)?;
    let max = mlp(f.gmp()?, params, bound)?;
    Ok(avg.add(max)?.sigmoid())
}

/// `σ(Conv7×7(Concat(CAP(f), CMP(f))))`, `N×1×H×W`.
pub fn spatial_attention<'t>(f: Var<'t>, conv: &ConvParams, bound: &Bound<'t>) -> Result<Var<'t>> {
    let pooled = concat_channels(&[f.cap()?, f.cmp()?])?;
    Ok(conv.apply(pooled, bound)?.sigmoid())
}

/// `M_s(g) ⊗ M_c(g) ⊗ x`.
pub fn enhance<'t>(
    x: Var<'t>,
    g: Var<'t>,
    params: &AttentionParams,
    bound: &Bound<'t>,
    mode: AttentionMode,
) -> Result<Var<'t>> {
    match mode {
        AttentionMode::Saturated => {
            let s = g.shape();
            let ones = g.tape().constant(crate::Tensor::ones(&[s[0], s[1], 1, 1]));
            let sp = g.tape().constant(crate::Tensor::ones(&[s[0], 1, s[2], s[3]]));
            sp.mul(ones)?.mul(x)
        }
        AttentionMode::Learned => {
            let ms = spatial_attention(g, &params.spatial, bound)?;
            let mc = channel_attention(g, &params.mlp, bound)?;
            ms.mul(mc)?.mul(x)
        }
    }
}

/// Intermediate maps of one CDA fusion.
pub struct CdaStages<'t> {
    pub fx: Var<'t>,
    pub fy: Var<'t>,
    pub enh_x: Var<'t>,
    pub enh_y: Var<'t>,
    pub out: Var<'t>,
}

pub fn cda_fuse_stages<'t>(
    f_x: Var<'t>,
    f_y: Var<'t>,
    params: &CdaParams,
    bound: &Bound<'t>,
    mode: AttentionMode,
) -> Result<CdaStages<'t>> {
    if f_x.shape() != f_y.shape() {
        return Err(Error::shape(
            "cda_fuse",
            format!("inputs differ: {:?} vs {:?}", f_x.shape(), f_y.shape()),
        ));
    }
    if f_x.shape().get(1) != Some(&params.channels) {
        return Err(Error::shape(
            "cda_fuse",
            format!(
                "expected {} channels, got shape {:?}",
                params.channels,
                f_x.shape()
            ),
        ));
    }
    let fx = transform_ft(f_x, &params.ft[0], bound)?;
    let fy = transform_ft(f_y, &params.ft[1], bound)?;
    let (gx, gy) = match params.flow {
        AttentionFlow::Cross => (fy, fx),
        AttentionFlow::Own => (fx, fy),
    };
    let enh_x = enhance(fx, gx, &params.attention, bound, mode)?;
    let enh_y = enhance(fy, gy, &params.attention, bound, mode)?;
    let out = params.out.apply(concat_channels(&[enh_x, enh_y])?, bound)?;
    Ok(CdaStages {
        fx,
        fy,
        enh_x,
        enh_y,
        out,
    })
}

/// Fuses two equally shaped `C`-channel maps into a `C/2`-channel map.
pub fn cda_fuse<'t>(f_x: Var<'t>, f_y: Var<'t>, params: &CdaParams, bound: &Bound<'t>) -> Result<Var<'t>> {
    Ok(cda_fuse_stages(f_x, f_y, params, bound, AttentionMode::Learned)?.out)
}

/// 3×3 convolution over `[fused, maxpool(previous)]` back to `fused`'s width.
#[derive(Clone, Debug, PartialEq)]
pub struct MergeParams {
    pub conv: ConvParams,
}

impl MergeParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fused: usize,
        previous: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: ConvParams::init(store, name, fused + previous, fused, 3, 1, true, rng),
        }
    }
}

/// Combines a level's fused map with the previous level's output. With no
/// previous level the fused map passes through unchanged.
pub fn encoder_level_merge<'t>(
    fused: Var<'t>,
    previous: Option<(Var<'t>, &MergeParams)>,
    bound: &Bound<'t>,
) -> Result<Var<'t>> {
    let Some((prev, params)) = previous else {
        return Ok(fused);
    };
    let pooled = prev.max_pool2d(3, 2, 1)?;
    let (fs, ps) = (fused.shape(), pooled.shape());
    if fs[2..] != ps[2..] {
        return Err(Error::shape(
            "encoder_level_merge",
            format!(
                "previous level pools to {}x{}, fused is {}x{} (H, W)",
                ps[2], ps[3], fs[2], fs[3]
            ),
        ));
    }
    params.conv.apply(concat_channels(&[fused, pooled])?, bound)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmiParams {
    pub conv: ConvParams,
    pub eca: ParamId,
}

impl EmiParams {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, width: usize, rng: &mut R) -> Self {
        let k = eca_kernel_size(width);
        Self {
            conv: ConvParams::init(store, &format!("{name}.conv"), 3 * width, width, 3, 1, true, rng),
            eca: store.add_uniform(format!("{name}.eca"), &[k], k, rng),
        }
    }
}

/// `G-ECA(Conv3×3(Concat(f_R, f_D, f_h))) + f_h`.
pub fn emi_fuse<'t>(
    f_r: Var<'t>,
    f_d: Var<'t>,
    f_h: Var<'t>,
    params: &EmiParams,
    bound: &Bound<'t>,
) -> Result<Var<'t>> {
    if f_r.shape() != f_h.shape() || f_d.shape() != f_h.shape() {
        return Err(Error::shape(
            "emi_fuse",
            format!(
                "inputs differ: {:?}, {:?}, {:?}",
                f_r.shape(),
                f_d.shape(),
                f_h.shape()
            ),
        ));
    }
    let mixed = params.conv.apply(concat_channels(&[f_r, f_d, f_h])?, bound)?;
    global_eca(mixed, bound.get(params.eca))?.add(f_h)
}
