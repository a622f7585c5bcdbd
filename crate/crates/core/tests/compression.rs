use ppgnas::diffcore::{ConvGeometry, GraphBuilder, Mode, ModelGraph, Op, Tensor};
use ppgnas::int_runtime::{export_quantized, QuantizedModel};
use ppgnas::mps::{self, bit_cost, freeze_precision};
use ppgnas::nas::{build_supernet, cost_expectation, extract_architecture};
use ppgnas::pit::{attach_masks, export_pruned, freeze_masks, mask_cost};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const C_IN: usize = 2;
const LEN: usize = 16;

fn rand_input(rng: &mut ChaCha8Rng, n: usize, c: usize, l: usize, amp: f64) -> Tensor<f64> {
    let v = (0..n * c * l).map(|_| rng.gen_range(-amp..amp)).collect();
    Tensor::from_vec(&[n, c, l], v).unwrap()
}

/// Small network touching every layer kind the compression stages support.
fn toy_net(seed: u64, width: usize) -> ModelGraph<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = GraphBuilder::<f64, _>::new(C_IN, LEN, &mut rng);
    let i = b.input();
    let c1 = b.conv("c1", i, ConvGeometry::new(C_IN, width, 5));
    let n1 = b.batchnorm("bn1", c1, width);
    let r1 = b.relu("r1", n1);
    let c2 = b.conv("c2", r1, ConvGeometry::new(width, width, 3));
    let n2 = b.batchnorm("bn2", c2, width);
    let p2 = b.prelu("p2", n2, width);
    let add = b.add("add", &[p2, r1]);
    let mp = b.maxpool("mp", add, 2, 2);
    let dw = b.conv("dw", mp, ConvGeometry::new(width, width, 3).with_groups(width));
    let c3 = b.conv("c3", dw, ConvGeometry::new(width, 2 * width, 3));
    let r3 = b.relu("r3", c3);
    let ap = b.avgpool("ap", r3, 2, 2);
    let up = b.upsample("up", ap, 2);
    let cat = b.concat("cat", &[up, mp]);
    let c4 = b.conv("c4", cat, ConvGeometry::new(3 * width, width, 3));
    let r4 = b.relu("r4", c4);
    let head = b.linear("head", r4, width * LEN / 2, 3);
    let mut g = b.finish(head).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbeef);
    for node in &mut g.nodes {
        if let Op::BatchNorm(bn) = &mut node.op {
            for v in bn.running_mean.data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
            for v in bn.running_var.data_mut() {
                *v = rng.gen_range(0.5..2.0);
            }
            for v in bn.gamma.data_mut() {
                *v = rng.gen_range(0.5..1.5);
            }
            for v in bn.beta.data_mut() {
                *v = rng.gen_range(-0.2..0.2);
            }
        }
    }
    g
}

#[test]
fn supernet_one_hot_matches_extracted() {
    for seed in 0..5 {
        let g = toy_net(seed, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut sn = build_supernet(&g, &mut rng).unwrap();
        for node in &mut sn.nodes {
            if let Op::Choice(c) = &mut node.op {
                let k = rng.gen_range(0..c.alternatives.len());
                for (j, t) in c.theta.data_mut().iter_mut().enumerate() {
                    *t = if j == k { 1000.0 } else { 0.0 };
                }
            }
        }
        let mut ex = extract_architecture(&sn).unwrap();
        assert_eq!(cost_expectation(&sn), ex.param_count() as f64);
        let x = rand_input(&mut rng, 4, C_IN, LEN, 1.0);
        let a = sn.forward(&x, Mode::Eval).unwrap();
        let b = ex.forward(&x, Mode::Eval).unwrap();
        assert_eq!(a.max_abs_diff(&b), 0.0);
    }
}

#[test]
fn pruned_export_matches_masked() {
    for seed in 0..5 {
        let mut g = toy_net(seed, 6);
        attach_masks(&mut g).unwrap();
        assert!(!g.masks.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        for m in &mut g.masks {
            for t in m.theta.data_mut() {
                *t = rng.gen_range(-0.5..1.0);
            }
        }
        freeze_masks(&mut g);
        let mut ex = export_pruned(&g).unwrap();
        assert_eq!(mask_cost(&mut g, None), ex.param_count() as f64);
        let x = rand_input(&mut rng, 100, C_IN, LEN, 1.0);
        let a = g.forward(&x, Mode::Eval).unwrap();
        let b = ex.forward(&x, Mode::Eval).unwrap();
        assert_eq!(a.max_abs_diff(&b), 0.0, "seed {seed}");
    }
}

fn quantized_net(seed: u64) -> ModelGraph<f64> {
    let mut g = toy_net(seed, 4);
    mps::prepare(&mut g, &[2, 4, 8], 4.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
    let mut i = 0;
    for node in &mut g.nodes {
        let q = match &mut node.op {
            Op::Conv(c) => c.quant.as_mut(),
            Op::Linear(l) => l.quant.as_mut(),
            _ => None,
        };
        if let Some(q) = q {
            // cycle through every width so each model mixes 2, 4 and 8 bits
            q.theta.data_mut()[i % 3] = 1.0;
            i += 1;
        }
    }
    for node in &mut g.nodes {
        if let Op::ActQuant(a) = &mut node.op {
            a.alpha.data_mut()[0] = rng.gen_range(1.0..6.0);
        }
    }
    freeze_precision(&mut g);
    g
}

#[test]
fn integer_runtime_matches_fake_quant() {
    for seed in 0..3 {
        let mut g = quantized_net(seed);
        let bits: Vec<u32> = mps::layer_bits(&g).into_iter().map(|(_, b)| b.unwrap()).collect();
        for b in [2, 4, 8] {
            assert!(bits.contains(&b));
        }
        let q = export_quantized(&g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let x = rand_input(&mut rng, 100, C_IN, LEN, 3.0);
        let fake = g.forward(&x, Mode::Eval).unwrap();
        let int = q.forward(&x).unwrap();
        assert_eq!(fake.shape(), int.shape());
        assert_eq!(fake.max_abs_diff(&int), 0.0, "seed {seed}");

        let restored = QuantizedModel::from_bytes(&q.to_bytes().unwrap()).unwrap();
        assert_eq!(restored.forward(&x).unwrap().max_abs_diff(&int), 0.0);
        assert_eq!(restored.footprint(), q.footprint());
    }
}

#[test]
fn bit_cost_at_frozen_precision() {
    let mut g = quantized_net(7);
    let brute: usize = g
        .nodes
        .iter()
        .map(|n| match &n.op {
            Op::Conv(c) => c.weight.len() * c.quant.as_ref().unwrap().frozen.unwrap() as usize,
            Op::Linear(l) => l.weight.len() * l.quant.as_ref().unwrap().frozen.unwrap() as usize,
            _ => 0,
        })
        .sum();
    assert_eq!(bit_cost(&mut g, None), brute as f64);
    let q = export_quantized(&g).unwrap();
    let fp = q.footprint();
    assert!(fp.weight_bytes * 8 >= brute && fp.weight_bytes * 8 < brute + 8 * q.layer_bits().len());
}

#[test]
fn export_rejects_unfrozen_precision() {
    let mut g = toy_net(1, 4);
    mps::prepare(&mut g, &[2, 4, 8], 4.0).unwrap();
    let err = export_quantized(&g).unwrap_err().to_string();
    assert!(err.contains("freeze"), "{err}");
}

#[test]
fn container_rejects_truncation() {
    let q = export_quantized(&quantized_net(2)).unwrap();
    let bytes = q.to_bytes().unwrap();
    assert!(QuantizedModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    assert!(QuantizedModel::from_bytes(b"NOPE").is_err());
}
