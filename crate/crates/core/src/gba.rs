//! Granularity-based attention: channel attention per depth region.
//!
//! `f_out = Σ_i L-ECA(f_in ⊗ m_i) + f_in`, where
//! `L-ECA(x) = σ(conv1d(pool(x, m_i))) ⊗ x` and the pooled descriptor comes
//! from one of three average-pooling variants.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::granularity::GranularityMasks;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};

/// Average-pooling flavour used for the per-region descriptor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolingVariant {
    /// `ΣΣ x / (HW)`, ignores the mask.
    I,
    /// `ΣΣ x·m / (HW)`.
    II,
    /// `ΣΣ x·m / ΣΣ m`; zeros for an empty mask.
    #[default]
    III,
}

/// ECA kernel length: the odd integer nearest to `(log₂C + 1)/2`, at least 3.
pub fn eca_kernel_size(channels: usize) -> usize {
    let x = ((channels.max(1) as f64).log2() + 1.0) / 2.0;
    let k = 2.0 * ((x - 1.0) / 2.0).round() + 1.0;
    (k as usize).max(3)
}

/// 1-D channel kernels of one GBA instance.
#[derive(Clone, Debug, PartialEq)]
pub struct GbaParams {
    kernels: Vec<ParamId>,
    pub variant: PoolingVariant,
}

impl GbaParams {
    /// Registers the kernels in `store`: one shared kernel, or one per region
    /// when `per_region` is set.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        regions: usize,
        per_region: bool,
        variant: PoolingVariant,
        rng: &mut R,
    ) -> Self {
        let k = eca_kernel_size(channels);
        let kernels = if per_region {
            (0..regions.max(1))
                .map(|i| store.add_uniform(format!("{prefix}.eca{i}"), &[k], k, rng))
                .collect()
        } else {
            vec![store.add_uniform(format!("{prefix}.eca"), &[k], k, rng)]
        };
        Self { kernels, variant }
    }

    /// Wraps already registered kernels.
    pub fn from_ids(kernels: Vec<ParamId>, variant: PoolingVariant) -> Self {
        assert!(!kernels.is_empty(), "GbaParams needs at least one kernel");
        Self { kernels, variant }
    }

    pub fn kernel_ids(&self) -> &[ParamId] {
        &self.kernels
    }

    pub fn shared(&self) -> bool {
        self.kernels.len() == 1
    }

    fn kernel<'t>(&self, bound: &Bound<'t>, region: usize) -> Result<Var<'t>> {
        let id = if self.shared() {
            self.kernels[0]
        } else {
            *self.kernels.get(region).ok_or_else(|| {
                Error::invalid(format!(
                    "gba: region {region} has no kernel ({} configured)",
                    self.kernels.len()
                ))
            })?
        };
        Ok(bound.get(id))
    }
}

/// Per-channel descriptor `N×C×1×1` of `x` under one pooling variant.
pub fn pooling_variant<'t>(x: Var<'t>, mask: &Tensor, variant: PoolingVariant) -> Result<Var<'t>> {
    match variant {
        PoolingVariant::I => x.gap(),
        PoolingVariant::II => {
            let m = x.tape().constant(mask_4d(mask)?);
            x.mul(m)?.gap()
        }
        PoolingVariant::III => x.lap(mask),
    }
}

fn mask_4d(mask: &Tensor) -> Result<Tensor> {
    let s = mask.shape();
    if s.len() < 2 {
        return Err(Error::shape("mask", format!("expected H×W, got {s:?}")));
    }
    mask.reshape(&[1, 1, s[s.len() - 2], s[s.len() - 1]])
}

/// `σ(conv1d(pool(x, mask))) ⊗ x`.
pub fn local_eca<'t>(
    x: Var<'t>,
    mask: &Tensor,
    kernel: Var<'t>,
    variant: PoolingVariant,
) -> Result<Var<'t>> {
    let att = local_attention(x, mask, kernel, variant)?;
    x.mul(att)
}

/// The `N×C×1×1` attention vector of [`local_eca`].
pub fn local_attention<'t>(
    x: Var<'t>,
    mask: &Tensor,
    kernel: Var<'t>,
    variant: PoolingVariant,
) -> Result<Var<'t>> {
    Ok(pooling_variant(x, mask, variant)?
        .conv1d_channels(kernel)?
        .sigmoid())
}

/// Conventional ECA: global average pooling descriptor.
pub fn global_eca<'t>(x: Var<'t>, kernel: Var<'t>) -> Result<Var<'t>> {
    let att = x.gap()?.conv1d_channels(kernel)?.sigmoid();
    x.mul(att)
}

fn check_size(f_in: &Var<'_>, masks: &GranularityMasks) -> Result<()> {
    let s = f_in.shape();
    if s.len() != 4 {
        return Err(Error::shape("gba", format!("feature must be NCHW, got {s:?}")));
    }
    if (s[2], s[3]) != (masks.height(), masks.width()) {
        return Err(Error::shape(
            "gba",
            format!(
                "masks are {}x{} but the feature map is {}x{} (H, W)",
                masks.height(),
                masks.width(),
                s[2],
                s[3]
            ),
        ));
    }
    Ok(())
}

/// Regions with no pixels at the masks' resolution; their L-ECA term is zero.
pub fn empty_regions(masks: &GranularityMasks) -> Vec<usize> {
    masks
        .pixel_counts()
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == 0)
        .map(|(i, _)| i)
        .collect()
}

/// `Σ_i L-ECA(f_in ⊗ m_i) + f_in`. Masks must already match `f_in`'s size.
pub fn gba_forward<'t>(
    f_in: Var<'t>,
    masks: &GranularityMasks,
    params: &GbaParams,
    bound: &Bound<'t>,
) -> Result<Var<'t>> {
    check_size(&f_in, masks)?;
    let empty = empty_regions(masks);
    if !empty.is_empty() {
        log::debug!(
            "gba: empty regions {empty:?} at {}x{}",
            masks.height(),
            masks.width()
        );
    }
    let tape = f_in.tape();
    let mut acc: Option<Var<'t>> = None;
    for i in 0..masks.regions() {
        let m = masks.mask(i);
        let masked = f_in.mul(tape.constant(m.clone()))?;
        let term = local_eca(masked, &m, params.kernel(bound, i)?, params.variant)?;
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(term)?,
        });
    }
    acc.expect("at least one region").add(f_in)
}

/// Attention vector of region `i` inside [`gba_forward`].
pub fn region_attention<'t>(
    f_in: Var<'t>,
    masks: &GranularityMasks,
    params: &GbaParams,
    bound: &Bound<'t>,
    region: usize,
) -> Result<Var<'t>> {
    check_size(&f_in, masks)?;
    let m = masks.mask(region);
    let masked = f_in.mul(f_in.tape().constant(m.clone()))?;
    local_attention(masked, &m, params.kernel(bound, region)?, params.variant)
}
