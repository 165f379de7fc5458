use super::*;
use crate::gba::eca_kernel_size;
use crate::tensor::grad_check_coords;
use rand::Rng;

fn small(size: usize, seed: u64) -> NetworkConfig {
    NetworkConfig {
        input_size: size,
        widths: [4, 6, 8, 8, 10],
        reduced: 4,
        seed,
        ..NetworkConfig::default()
    }
}

fn inputs(size: usize, seed: u64) -> (Tensor, Tensor) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let rgb = Tensor::uniform(&[1, 3, size, size], 0.0, 1.0, &mut r);
    let depth = Tensor::from_fn(&[1, 1, size, size], |_| r.random_range(0..256u32) as f64 / 255.0);
    (rgb, depth)
}

/// Scalar count derived layer by layer from the architecture description.
fn expected_count(c: &NetworkConfig) -> usize {
    let w = c.widths;
    let r = c.reduced;
    let conv = |cin: usize, cout: usize, k: usize, bias: bool| cin * cout * k * k + if bias { cout } else { 0 };
    let attention = |ch: usize| {
        let h = (ch / 16).max(1);
        (ch * h + h) + (h * ch + ch) + conv(2, 1, 7, true)
    };
    let cda = |ch: usize| 2 * (conv(ch, ch / 2, 1, false) + conv(ch / 2, ch / 2, 3, false)) + attention(ch / 2) + conv(ch, ch / 2, 3, true);
    let kernels = if c.per_region_kernels { c.thresholds + 1 } else { 1 };
    let mut n = 0;
    for cin0 in [3, 1] {
        let mut cin = cin0;
        for &cw in &w {
            n += conv(cin, cw, 3, true) + kernels * eca_kernel_size(cw);
            cin = cw;
        }
    }
    n += w.iter().map(|&cw| cda(cw)).sum::<usize>();
    n += (1..5).map(|l| conv(w[l] / 2 + w[l - 1] / 2, w[l] / 2, 3, true)).sum::<usize>();
    n += w.iter().map(|&cw| 2 * conv(cw, r, 1, true) + conv(cw / 2, r, 1, true)).sum::<usize>();
    n += 2 * (4 * conv(r, r, 3, true) + 5 * attention(r));
    n += conv(r, r, 3, true) + 3 * conv(r / 2, r, 3, true);
    n += 5 * (conv(3 * r, r, 3, true) + eca_kernel_size(r));
    n += 4 * cda(r);
    n += 2 * 5 * conv(r, 1, 1, true) + conv(r, 1, 1, true) + 4 * conv(r / 2, 1, 1, true);
    n
}

#[test]
fn deterministic_construction() {
    let a = Network::new(NetworkConfig::default()).unwrap();
    let b = Network::new(NetworkConfig::default()).unwrap();
    assert_eq!(a, b);
    let c = Network::new(NetworkConfig { seed: 43, ..NetworkConfig::default() }).unwrap();
    assert_ne!(a.params(), c.params());
}

#[test]
fn parameter_count_closed_form() {
    for cfg in [
        NetworkConfig::default(),
        NetworkConfig { per_region_kernels: true, ..NetworkConfig::default() },
        small(32, 0),
    ] {
        let net = Network::new(cfg.clone()).unwrap();
        assert_eq!(net.parameter_count(), expected_count(&cfg), "{cfg:?}");
    }
}

#[test]
fn invalid_configs() {
    let mut c = NetworkConfig::default();
    c.widths[2] = 33;
    assert!(Network::new(c).is_err());
    assert!(Network::new(NetworkConfig { reduced: 5, ..NetworkConfig::default() }).is_err());
    assert!(Network::new(NetworkConfig { thresholds: 4, ..NetworkConfig::default() }).is_err());
}

#[test]
fn level_sizes_halve_with_ceiling() {
    assert_eq!(NetworkConfig::default().level_sizes(), [176, 88, 44, 22, 11]);
    assert_eq!(small(88, 0).level_sizes(), [44, 22, 11, 6, 3]);
}

#[test]
fn forward_contract_and_determinism() {
    let net = Network::new(small(40, 1)).unwrap();
    let (rgb, depth) = inputs(40, 2);
    let a = net.predict(&rgb, &depth, None).unwrap();
    assert_eq!(a.len(), 3);
    for branch in &a {
        assert_eq!(branch.len(), 5);
        for m in branch {
            assert_eq!(m.shape(), [1, 1, 40, 40]);
            assert!(m.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
    let b = net.predict(&rgb, &depth, None).unwrap();
    assert_eq!(a, b);

    let wrong = Tensor::zeros(&[1, 3, 39, 40]);
    assert!(net.predict(&wrong, &depth, None).is_err());
    let masks = GranularityMasks::single(20, 20);
    assert!(net.predict(&rgb, &depth, Some(&masks)).is_err());
}

#[test]
fn constant_depth_matches_global_attention() {
    let cfg = small(32, 3);
    let net = Network::new(cfg.clone()).unwrap();
    let global = Network::new(NetworkConfig { attention: EncoderAttention::Global, ..cfg }).unwrap();
    let (rgb, _) = inputs(32, 4);
    let depth = Tensor::full(&[1, 1, 32, 32], 0.4);
    let masks = net.masks_for(&depth).unwrap();
    assert_eq!(masks.regions(), 1);
    assert_eq!(
        net.predict(&rgb, &depth, None).unwrap(),
        global.predict(&rgb, &depth, None).unwrap()
    );
}

#[test]
fn own_attention_isolates_rgb_branch() {
    let (rgb, depth) = inputs(32, 5);
    let zero = Tensor::zeros(&[1, 1, 32, 32]);
    for flow in [AttentionFlow::Own, AttentionFlow::Cross] {
        let net = Network::new(NetworkConfig { flow, ..small(32, 6) }).unwrap();
        let masks = net.masks_for(&depth).unwrap();
        let a = net.predict(&rgb, &depth, Some(&masks)).unwrap();
        let b = net.predict(&rgb, &zero, Some(&masks)).unwrap();
        let same = (0..5).all(|l| a[RGB][l] == b[RGB][l]);
        assert_eq!(same, flow == AttentionFlow::Own, "{flow:?}");
        assert_ne!(a[SHARED][0], b[SHARED][0]);
    }
}

#[test]
fn checkpoint_round_trip_and_rejection() {
    let net = Network::new(small(24, 7)).unwrap();
    let bytes = net.to_checkpoint_bytes();
    assert_eq!(&bytes[..8], b"GRANATT1");
    assert_eq!(Network::from_checkpoint_bytes(&bytes).unwrap(), net);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Network::from_checkpoint_bytes(&bad).is_err());
    assert!(Network::from_checkpoint_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(Network::from_checkpoint_bytes(&longer).is_err());
    let mut huge = bytes.clone();
    huge[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
    assert!(Network::from_checkpoint_bytes(&huge).is_err());
    let mut nan = bytes.clone();
    let n = nan.len();
    nan[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
    assert!(Network::from_checkpoint_bytes(&nan).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    save_checkpoint(&net, &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), net);
    let err = load_checkpoint(&dir.path().join("missing")).unwrap_err();
    assert!(err.to_string().contains("missing"));
}

#[test]
fn end_to_end_gradient_subsample() {
    let cfg = small(24, 8);
    let net = Network::new(cfg).unwrap();
    let (rgb, depth) = inputs(24, 9);
    let gt = Tensor::from_fn(&[1, 1, 24, 24], |i| ((i % 24) > 10) as u8 as f64);
    let masks = net.masks_for(&depth).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(10);
    let tensors = net.params().tensors().to_vec();
    let coords: Vec<(usize, usize)> = (0..16)
        .map(|_| {
            let i = r.random_range(0..tensors.len());
            (i, r.random_range(0..tensors[i].len()))
        })
        .collect();
    let rep = grad_check_coords(
        |tape, v| {
            let bound = Bound::from_vars(v.to_vec());
            let out = net.forward(&bound, tape.constant(rgb.clone()), tape.constant(depth.clone()), &masks)?;
            out.loss(&gt, &LossWeights::default())
        },
        &tensors,
        &coords,
        1e-5,
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-3, "{rep:?}");
}

#[test]
fn optimizers_reduce_loss() {
    let net0 = Network::new(small(16, 11)).unwrap();
    let (rgb, depth) = inputs(16, 12);
    let gt = Tensor::from_fn(&[1, 1, 16, 16], |i| ((i / 16) > 7) as u8 as f64);
    let sample = Sample::new(&net0, &rgb, &depth, &gt).unwrap();
    let w = LossWeights::default();
    let (l0, _) = loss_and_grad(&net0, std::slice::from_ref(&sample), &w).unwrap();

    let mut net = net0.clone();
    let mut adam = Adam::new(1e-2);
    for _ in 0..10 {
        let (_, g) = loss_and_grad(&net, std::slice::from_ref(&sample), &w).unwrap();
        adam.step(net.params_mut(), &g);
    }
    let (l1, _) = loss_and_grad(&net, std::slice::from_ref(&sample), &w).unwrap();
    assert!(l1 < l0, "adam: {l0} -> {l1}");

    let mut net = net0.clone();
    let mut sgd = Sgd::new(1e-2, 0.9);
    for _ in 0..10 {
        let (_, g) = loss_and_grad(&net, std::slice::from_ref(&sample), &w).unwrap();
        sgd.step(net.params_mut(), &g);
    }
    let (l2, _) = loss_and_grad(&net, std::slice::from_ref(&sample), &w).unwrap();
    assert!(l2 < l0, "sgd: {l0} -> {l2}");
}
