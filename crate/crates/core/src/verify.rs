//! Registered gradient checks, grouped by module, as run by `granatt gradcheck`.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusion::{
    cda_fuse, channel_attention, emi_fuse, encoder_level_merge, enhance, spatial_attention, transform_ft,
    AttentionFlow, AttentionMode, AttentionParams, CdaParams, EmiParams, FtParams, MergeParams,
};
use crate::gba::{gba_forward, global_eca, local_eca, GbaParams, PoolingVariant};
use crate::granularity::{generate_masks, DepthMap, GranularityMasks, ThresholdSet};
use crate::network::{Network, NetworkConfig};
use crate::objective::{bce_loss, iou_loss, level_loss, multilevel_loss, LossWeights, BRANCHES, LEVELS};
use crate::params::{Bound, ParamStore};
use crate::tensor::{concat_channels, grad_check_coords, Tape, Tensor, Var};

/// Relative-error bound for per-operation checks.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Relative-error bound for the end-to-end network check.
pub const NETWORK_TOLERANCE: f64 = 1e-3;
pub const NETWORK_CHECK_SIZE: usize = 88;
pub const NETWORK_CHECK_PARAMS: usize = 32;
const EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Tensor,
    Gba,
    Fusion,
    Objective,
    Network,
}

impl Scope {
    pub const ALL: [Scope; 5] = [Scope::Tensor, Scope::Gba, Scope::Fusion, Scope::Objective, Scope::Network];

    pub fn name(self) -> &'static str {
        match self {
            Scope::Tensor => "tensor",
            Scope::Gba => "gba",
            Scope::Fusion => "fusion",
            Scope::Objective => "objective",
            Scope::Network => "network",
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tensor" | "tensor-core" => Ok(Scope::Tensor),
            "gba" => Ok(Scope::Gba),
            "fusion" => Ok(Scope::Fusion),
            "objective" => Ok(Scope::Objective),
            "network" => Ok(Scope::Network),
            other => Err(Error::invalid(format!(
                "unknown gradcheck scope {other:?} (expected all, tensor, gba, fusion, objective or network)"
            ))),
        }
    }
}

/// `all` or a single scope name.
pub fn parse_scopes(s: &str) -> Result<Vec<Scope>> {
    if s == "all" {
        Ok(Scope::ALL.to_vec())
    } else {
        Ok(vec![s.parse()?])
    }
}

type CheckFn = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> + Send + Sync>;

pub struct GradCase {
    pub scope: Scope,
    pub name: &'static str,
    pub tolerance: f64,
    inputs: Vec<Tensor>,
    /// `None` checks every coordinate.
    coords: Option<Vec<(usize, usize)>>,
    f: CheckFn,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub scope: Scope,
    pub name: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub checked: usize,
    /// `(input, coordinate)` of the largest error.
    pub worst: Option<(usize, usize)>,
    pub passed: bool,
    pub seconds: f64,
    /// Set when the check itself could not run.
    pub error: Option<String>,
}

impl GradCase {
    fn new(
        scope: Scope,
        name: &'static str,
        inputs: Vec<Tensor>,
        f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> + Send + Sync + 'static,
    ) -> Self {
        Self {
            scope,
            name,
            tolerance: OP_TOLERANCE,
            inputs,
            coords: None,
            f: Box::new(f),
        }
    }

    pub fn inputs(&self) -> &[Tensor] {
        &self.inputs
    }

    /// Runs the check. With `plant_fault` the analytic gradient of the whole
    /// function is doubled, which every check must catch.
    pub fn run(&self, plant_fault: bool) -> CheckOutcome {
        let start = Instant::now();
        let coords = self.coords.clone().unwrap_or_else(|| {
            self.inputs
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.len()).map(move |k| (i, k)))
                .collect()
        });
        let f = &self.f;
        let res = grad_check_coords(
            |tape, v| {
                let y = f(tape, v)?;
                Ok(if plant_fault { y.fault_double_grad() } else { y })
            },
            &self.inputs,
            &coords,
            EPS,
        );
        let seconds = start.elapsed().as_secs_f64();
        match res {
            Ok(rep) => CheckOutcome {
                scope: self.scope,
                name: self.name,
                max_rel_error: rep.max_rel_error,
                tolerance: self.tolerance,
                checked: rep.checked,
                worst: rep.worst,
                passed: rep.max_rel_error < self.tolerance,
                seconds,
                error: None,
            },
            Err(e) => CheckOutcome {
                scope: self.scope,
                name: self.name,
                max_rel_error: f64::NAN,
                tolerance: self.tolerance,
                checked: 0,
                worst: None,
                passed: false,
                seconds,
                error: Some(e.to_string()),
            },
        }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, r)
}

/// Contracts `y` against fixed random weights so every output coordinate
/// reaches the scalar with a distinct factor.
fn weigh<'t>(y: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let w = uniform(&y.shape(), &mut rng(seed));
    Ok(y.mul(y.tape().constant(w))?.sum())
}

/// Shuffled evenly spaced values in `(-1, 1)`: no two entries lie within a
/// finite-difference step of each other, so max selections stay put.
fn separated(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| -1.0 + (2 * i + 1) as f64 / n as f64).collect();
    v.shuffle(r);
    Tensor::new(shape, v).expect("valid shape")
}

fn random_masks(h: usize, w: usize, thresholds: Vec<u8>, r: &mut ChaCha8Rng) -> GranularityMasks {
    let vals = (0..h * w).map(|_| r.random_range(0..256u32) as f64 / 255.0).collect();
    let depth = DepthMap::new(h, w, vals).expect("valid map");
    generate_masks(&depth, &ThresholdSet::from_thresholds(thresholds).expect("sorted"))
}

fn tensor_cases() -> Vec<GradCase> {
    let s = Scope::Tensor;
    let mut r = rng(101);
    let x = separated(&[2, 4, 8, 8], &mut r);
    let other = uniform(&[2, 4, 8, 8], &mut r);
    let k3 = uniform(&[3, 4, 3, 3], &mut r);
    let k1 = uniform(&[3], &mut r);
    let desc = uniform(&[2, 4, 1, 1], &mut r);
    let mask = Tensor::from_fn(&[8, 8], |i| ((i * 7) % 3 == 0) as u8 as f64);
    let lin = (uniform(&[2, 4], &mut r), uniform(&[3, 4], &mut r), uniform(&[3], &mut r));
    let prob = Tensor::uniform(&[1, 1, 8, 8], 0.05, 0.95, &mut r);
    let gt = Tensor::from_fn(&[1, 1, 8, 8], |i| (i % 3 == 0) as u8 as f64);
    let (gt2, m2) = (gt.clone(), mask.clone());
    vec![
        GradCase::new(s, "conv2d", vec![x.clone(), k3.clone()], |_, v| weigh(v[0].conv2d(v[1], 1, 1)?, 1)),
        GradCase::new(s, "conv2d_stride2", vec![x.clone(), k3], |_, v| weigh(v[0].conv2d(v[1], 2, 1)?, 2)),
        GradCase::new(s, "conv1d_channels", vec![desc.clone(), k1], |_, v| weigh(v[0].conv1d_channels(v[1])?, 3)),
        GradCase::new(s, "gap", vec![x.clone()], |_, v| weigh(v[0].gap()?, 4)),
        GradCase::new(s, "gmp", vec![x.clone()], |_, v| weigh(v[0].gmp()?, 5)),
        GradCase::new(s, "cap", vec![x.clone()], |_, v| weigh(v[0].cap()?, 6)),
        GradCase::new(s, "cmp", vec![x.clone()], |_, v| weigh(v[0].cmp()?, 7)),
        GradCase::new(s, "lap", vec![x.clone()], move |_, v| weigh(v[0].lap(&m2)?, 8)),
        GradCase::new(s, "max_pool2d", vec![x.clone()], |_, v| weigh(v[0].max_pool2d(3, 2, 1)?, 9)),
        GradCase::new(s, "mul", vec![x.clone(), other.clone()], |_, v| weigh(v[0].mul(v[1])?, 10)),
        GradCase::new(s, "mul_broadcast", vec![x.clone(), desc.clone()], |_, v| weigh(v[0].mul(v[1])?, 11)),
        GradCase::new(s, "add_broadcast", vec![x.clone(), desc], |_, v| weigh(v[0].add(v[1])?, 12)),
        GradCase::new(s, "sigmoid", vec![x.clone()], |_, v| weigh(v[0].sigmoid(), 13)),
        GradCase::new(s, "relu", vec![x.clone()], |_, v| weigh(v[0].relu(), 14)),
        GradCase::new(s, "concat_channels", vec![x.clone(), other], |_, v| {
            weigh(concat_channels(&[v[0], v[1]])?, 15)
        }),
        GradCase::new(s, "upsample_bilinear", vec![x.clone()], |_, v| weigh(v[0].upsample_bilinear(13, 11)?, 16)),
        GradCase::new(s, "downsample_bilinear", vec![x.clone()], |_, v| weigh(v[0].upsample_bilinear(3, 5)?, 17)),
        GradCase::new(s, "linear", vec![lin.0, lin.1, lin.2], |_, v| weigh(v[0].linear(v[1], Some(v[2]))?, 18)),
        GradCase::new(s, "scale", vec![x.clone()], |_, v| weigh(v[0].scale(-1.7), 19)),
        GradCase::new(s, "reshape", vec![x], |_, v| weigh(v[0].reshape(&[8, 8, 8])?, 20)),
        GradCase::new(s, "bce", vec![prob.clone()], move |_, v| v[0].bce(&gt)),
        GradCase::new(s, "iou", vec![prob], move |_, v| v[0].iou(&gt2)),
    ]
}

fn gba_cases() -> Vec<GradCase> {
    let s = Scope::Gba;
    let mut r = rng(202);
    let x = uniform(&[2, 4, 8, 8], &mut r);
    let masks = random_masks(8, 8, vec![85, 170], &mut r);
    let kernel = uniform(&[3], &mut r);
    let mut cases = Vec::new();
    for (name, variant) in [
        ("local_eca_variant_i", PoolingVariant::I),
        ("local_eca_variant_ii", PoolingVariant::II),
        ("local_eca_variant_iii", PoolingVariant::III),
    ] {
        let m = masks.mask(1);
        cases.push(GradCase::new(s, name, vec![x.clone(), kernel.clone()], move |_, v| {
            weigh(local_eca(v[0], &m, v[1], variant)?, 30)
        }));
    }
    cases.push(GradCase::new(s, "global_eca", vec![x.clone(), kernel], |_, v| {
        weigh(global_eca(v[0], v[1])?, 31)
    }));
    for (name, per_region) in [("gba_forward_shared", false), ("gba_forward_per_region", true)] {
        let mut store = ParamStore::new();
        let p = GbaParams::init(&mut store, "gba", 4, 3, per_region, PoolingVariant::III, &mut r);
        let mut inputs = vec![x.clone()];
        inputs.extend(store.tensors().iter().cloned());
        let masks = masks.clone();
        cases.push(GradCase::new(s, name, inputs, move |_, v| {
            let bound = Bound::from_vars(v[1..].to_vec());
            weigh(gba_forward(v[0], &masks, &p, &bound)?, 32)
        }));
    }
    cases
}

fn fusion_cases() -> Vec<GradCase> {
    let s = Scope::Fusion;
    let mut r = rng(303);
    let mut cases = Vec::new();

    let mut store = ParamStore::new();
    let ft = FtParams::init(&mut store, "ft", 4, &mut r);
    let mut inputs = vec![uniform(&[2, 4, 6, 6], &mut r)];
    inputs.extend(store.tensors().iter().cloned());
    cases.push(GradCase::new(s, "transform_ft", inputs, move |_, v| {
        weigh(transform_ft(v[0], &ft, &Bound::from_vars(v[1..].to_vec()))?, 40)
    }));

    let mut store = ParamStore::new();
    let att = AttentionParams::init(&mut store, "att", 4, &mut r);
    let base = vec![uniform(&[2, 4, 6, 6], &mut r), uniform(&[2, 4, 6, 6], &mut r)];
    let mut inputs = base.clone();
    inputs.extend(store.tensors().iter().cloned());
    let a1 = att.clone();
    cases.push(GradCase::new(s, "channel_attention", inputs.clone(), move |_, v| {
        weigh(channel_attention(v[0], &a1.mlp, &Bound::from_vars(v[2..].to_vec()))?, 41)
    }));
    let a2 = att.clone();
    cases.push(GradCase::new(s, "spatial_attention", inputs.clone(), move |_, v| {
        weigh(spatial_attention(v[0], &a2.spatial, &Bound::from_vars(v[2..].to_vec()))?, 42)
    }));
    cases.push(GradCase::new(s, "enhance", inputs, move |_, v| {
        let bound = Bound::from_vars(v[2..].to_vec());
        weigh(enhance(v[0], v[1], &att, &bound, AttentionMode::Learned)?, 43)
    }));

    for (name, flow) in [("cda_fuse_cross", AttentionFlow::Cross), ("cda_fuse_own", AttentionFlow::Own)] {
        let mut store = ParamStore::new();
        let p = CdaParams::init(&mut store, "cda", 4, flow, &mut r).expect("even width");
        let mut inputs = vec![uniform(&[2, 4, 5, 5], &mut r), uniform(&[2, 4, 5, 5], &mut r)];
        inputs.extend(store.tensors().iter().cloned());
        cases.push(GradCase::new(s, name, inputs, move |_, v| {
            weigh(cda_fuse(v[0], v[1], &p, &Bound::from_vars(v[2..].to_vec()))?, 44)
        }));
    }

    let mut store = ParamStore::new();
    let p = EmiParams::init(&mut store, "emi", 4, &mut r);
    let mut inputs: Vec<Tensor> = (0..3).map(|_| uniform(&[2, 4, 4, 4], &mut r)).collect();
    inputs.extend(store.tensors().iter().cloned());
    cases.push(GradCase::new(s, "emi_fuse", inputs, move |_, v| {
        weigh(emi_fuse(v[0], v[1], v[2], &p, &Bound::from_vars(v[3..].to_vec()))?, 45)
    }));

    let mut store = ParamStore::new();
    let p = MergeParams::init(&mut store, "merge", 2, 2, &mut r);
    let mut inputs = vec![uniform(&[1, 2, 4, 4], &mut r), separated(&[1, 2, 8, 8], &mut r)];
    inputs.extend(store.tensors().iter().cloned());
    cases.push(GradCase::new(s, "encoder_level_merge", inputs, move |_, v| {
        let bound = Bound::from_vars(v[2..].to_vec());
        weigh(encoder_level_merge(v[0], Some((v[1], &p)), &bound)?, 46)
    }));
    cases
}

fn objective_cases() -> Vec<GradCase> {
    let s = Scope::Objective;
    let mut r = rng(404);
    let gt = Tensor::from_fn(&[1, 1, 8, 8], |i| ((i % 8) > 3) as u8 as f64);
    let prob = |r: &mut ChaCha8Rng| Tensor::uniform(&[1, 1, 8, 8], 0.05, 0.95, r);
    let p = prob(&mut r);
    let (g1, g2, g3, g4) = (gt.clone(), gt.clone(), gt.clone(), gt);
    let maps: Vec<Tensor> = (0..BRANCHES * LEVELS).map(|_| prob(&mut r)).collect();
    vec![
        GradCase::new(s, "bce_loss", vec![p.clone()], move |_, v| bce_loss(v[0], &g1)),
        GradCase::new(s, "iou_loss", vec![p.clone()], move |_, v| iou_loss(v[0], &g2)),
        GradCase::new(s, "level_loss", vec![p], move |_, v| level_loss(v[0], &g3)),
        GradCase::new(s, "multilevel_loss", maps, move |_, v| {
            let grid: Vec<Vec<Var>> = v.chunks(LEVELS).map(|c| c.to_vec()).collect();
            multilevel_loss(&grid, &g4, &LossWeights::default())
        }),
    ]
}

/// End-to-end loss gradient of the default network at 88×88, checked on a
/// seeded subsample of parameter coordinates.
fn network_case() -> Result<GradCase> {
    let cfg = NetworkConfig {
        input_size: NETWORK_CHECK_SIZE,
        ..NetworkConfig::default()
    };
    let net = Network::new(cfg)?;
    let size = NETWORK_CHECK_SIZE;
    let mut r = rng(505);
    let rgb = Tensor::uniform(&[1, 3, size, size], 0.0, 1.0, &mut r);
    let depth = Tensor::from_fn(&[1, 1, size, size], |_| r.random_range(0..256u32) as f64 / 255.0);
    let gt = Tensor::from_fn(&[1, 1, size, size], |i| {
        let (y, x) = ((i / size) as f64, (i % size) as f64);
        (((x - 40.0).powi(2) + (y - 48.0).powi(2)).sqrt() < 25.0) as u8 as f64
    });
    let masks = net.masks_for(&depth)?;
    let tensors = net.params().tensors().to_vec();
    let coords = (0..NETWORK_CHECK_PARAMS)
        .map(|_| {
            let i = r.random_range(0..tensors.len());
            (i, r.random_range(0..tensors[i].len()))
        })
        .collect();
    Ok(GradCase {
        scope: Scope::Network,
        name: "network_end_to_end",
        tolerance: NETWORK_TOLERANCE,
        inputs: tensors,
        coords: Some(coords),
        f: Box::new(move |tape, v| {
            let bound = Bound::from_vars(v.to_vec());
            let out = net.forward(&bound, tape.constant(rgb.clone()), tape.constant(depth.clone()), &masks)?;
            out.loss(&gt, &LossWeights::default())
        }),
    })
}

/// All registered checks for the given scopes, in scope order.
pub fn registry(scopes: &[Scope]) -> Result<Vec<GradCase>> {
    let mut cases = Vec::new();
    for &scope in Scope::ALL.iter().filter(|s| scopes.contains(s)) {
        match scope {
            Scope::Tensor => cases.extend(tensor_cases()),
            Scope::Gba => cases.extend(gba_cases()),
            Scope::Fusion => cases.extend(fusion_cases()),
            Scope::Objective => cases.extend(objective_cases()),
            Scope::Network => cases.push(network_case()?),
        }
    }
    Ok(cases)
}

pub fn run_checks(scopes: &[Scope], plant_fault: bool) -> Result<Vec<CheckOutcome>> {
    Ok(registry(scopes)?.iter().map(|c| c.run(plant_fault)).collect())
}
