use dkgh_core::gradcheck::{finite_diff_check, GradCheckConfig};
use dkgh_core::loss::objective;
use dkgh_core::model::{DkghNet, GazeEncoder, ModelConfig};
use dkgh_core::nn::{Conv2d, Linear, Mlp, Module, ResidualBasicBlock};
use dkgh_core::{rng, DkghError, Result, Tape, Tensor, Var};
use rand::Rng;

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut r = rng::stream(seed, 21);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

fn tight() -> GradCheckConfig {
    GradCheckConfig {
        eps: 1e-5,
        tol: 1e-6,
        ..Default::default()
    }
}

/// Scalar probe of a layer output: a fixed random projection.
fn probe(tape: &mut Tape<'_, f64>, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(random(&shape, 99, -1.0, 1.0));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

#[test]
fn linear_and_mlp_pass_gradcheck() {
    let x = random(&[3, 4], 1, -1.0, 1.0);
    let mut lin = Linear::<f64>::new(4, 5, &mut rng::stream(1, 0));
    let r = finite_diff_check(
        &mut lin,
        |m: &Linear<f64>, t: &mut Tape<'_, f64>| {
            let xv = t.constant(x.clone());
            let y = m.forward(t, xv)?;
            probe(t, y)
        },
        &tight(),
    )
    .unwrap();
    assert!(r.passed, "{r:?}");

    let mut mlp = Mlp::<f64>::new(&[4, 6, 3], &mut rng::stream(2, 0)).unwrap();
    let r = finite_diff_check(
        &mut mlp,
        |m: &Mlp<f64>, t: &mut Tape<'_, f64>| {
            let xv = t.constant(x.clone());
            let y = m.forward(t, xv)?;
            probe(t, y)
        },
        &tight(),
    )
    .unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn conv_and_residual_block_pass_gradcheck() {
    let x = random(&[2, 2, 5, 5], 3, -1.0, 1.0);
    let mut conv = Conv2d::<f64>::new(2, 3, 3, 2, 1, &mut rng::stream(3, 0));
    let r = finite_diff_check(
        &mut conv,
        |m: &Conv2d<f64>, t: &mut Tape<'_, f64>| {
            let xv = t.constant(x.clone());
            let y = m.forward(t, xv)?;
            probe(t, y)
        },
        &tight(),
    )
    .unwrap();
    assert!(r.passed, "{r:?}");

    for (c_out, stride) in [(2, 1), (3, 2)] {
        let mut blk = ResidualBasicBlock::<f64>::new(2, c_out, stride, &mut rng::stream(4, 0));
        let r = finite_diff_check(
            &mut blk,
            |m: &ResidualBasicBlock<f64>, t: &mut Tape<'_, f64>| {
                let xv = t.constant(x.clone());
                let y = m.forward(t, xv)?;
                probe(t, y)
            },
            &tight(),
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }
}

#[test]
fn gaze_encoder_matches_straight_line_composition() {
    let enc = GazeEncoder::<f64>::new(&[4, 8, 8], 6, &mut rng::stream(5, 0));
    let hm = random(&[1, 1, 16, 16], 5, 0.0, 1.0);
    let mut tape = Tape::new();
    let h = tape.constant(hm.clone());
    let got = enc.encode(&mut tape, h).unwrap();
    let got = tape.value(got).clone();

    let mut t2 = Tape::new();
    let mut v = t2.constant(hm);
    for conv in &enc.convs {
        let w = t2.constant(conv.weight.clone());
        let b = t2.constant(conv.bias.clone());
        v = t2.conv2d(v, w, 2, 1).unwrap();
        v = t2.add_channel_bias(v, b).unwrap();
        v = t2.relu(v).unwrap();
    }
    let pooled = t2.global_avg_pool(v).unwrap();
    let w = t2.constant(enc.out.weight.clone());
    let wt = t2.transpose(w).unwrap();
    let y = t2.matmul(pooled, wt).unwrap();
    let b = t2.constant(enc.out.bias.clone());
    let y = t2.add_row_bias(y, b).unwrap();
    assert_eq!(t2.value(y), &got);
    assert_eq!(got.shape(), &[1, 6]);
}

fn batch(config: &ModelConfig, b: usize, size: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    (
        random(&[b, config.in_channels, size, size], seed, 0.0, 1.0),
        random(&[b, 1, size, size], seed + 1, 0.0, 1.0),
    )
}

fn logits(net: &DkghNet<f64>, image: &Tensor<f64>, heatmap: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let i = tape.constant(image.clone());
    let h = tape.constant(heatmap.clone());
    let out = net.forward(&mut tape, i, h).unwrap();
    tape.value(out.logits).clone()
}

#[test]
fn baseline_ignores_the_heatmap() {
    let cfg = ModelConfig::toy().baseline();
    let net = DkghNet::<f64>::new(cfg.clone()).unwrap();
    assert!(net.gaze.is_none());
    let (img, hm) = batch(&cfg, 3, 16, 1);
    let other = random(&[3, 1, 16, 16], 77, 0.0, 1.0);
    let a = logits(&net, &img, &hm);
    let b = logits(&net, &img, &other);
    assert_eq!(a.data(), b.data());
    assert_eq!(net.count_expert_evals(&img, &hm).unwrap(), 0);
}

#[test]
fn samples_do_not_interact_within_a_batch() {
    let cfg = ModelConfig::toy();
    let net = DkghNet::<f64>::new(cfg.clone()).unwrap();
    let (img, hm) = batch(&cfg, 4, 16, 2);
    let all = logits(&net, &img, &hm);
    for b in 0..4 {
        let one = logits(&net, &img.slice_rows(b, 1).unwrap(), &hm.slice_rows(b, 1).unwrap());
        let diff = one.max_abs_diff(&all.slice_rows(b, 1).unwrap()).unwrap();
        assert!(diff < 1e-9, "sample {b}: {diff}");
    }
}

#[test]
fn mismatched_batches_are_a_contract_error() {
    let cfg = ModelConfig::toy();
    let net = DkghNet::<f64>::new(cfg.clone()).unwrap();
    let mut tape = Tape::new();
    let i = tape.constant(random(&[2, 1, 16, 16], 1, 0.0, 1.0));
    let h = tape.constant(random(&[3, 1, 16, 16], 2, 0.0, 1.0));
    assert!(matches!(net.forward(&mut tape, i, h), Err(DkghError::Contract(_))));
}

#[test]
fn toy_logits_match_frozen_values() {
    let cfg = ModelConfig::toy();
    let net = DkghNet::<f64>::new(cfg.clone()).unwrap();
    let (img, hm) = batch(&cfg, 2, 16, 3);
    let got = logits(&net, &img, &hm);
    let frozen = [
        -4.515061995120256,
        0.06040783302244872,
        -5.052778163132466,
        -3.6784493343780063,
        0.17758008486790838,
        -4.748884454505049,
    ];
    for (g, f) in got.data().iter().zip(frozen) {
        assert!((g - f).abs() < 1e-12, "{g} vs {f}");
    }
}

#[test]
fn parameter_count_follows_from_config() {
    for cfg in [ModelConfig::toy(), ModelConfig::default(), ModelConfig::toy().baseline()] {
        let net = DkghNet::<f64>::new(cfg.clone()).unwrap();
        assert_eq!(net.param_count(), DkghNet::<f64>::expected_param_count(&cfg));
    }
    // toy hybrid block by hand: 8 -> 16 channels, stride 2, N = 2
    let expert = (16 * 8 * 9 + 16) + (16 * 16 * 9 + 16) + (16 * 8 + 16);
    let router = (8 * 8 + 8) + (8 * 2 + 2);
    let gate = 16 + 1;
    let projection = 16 * 8 + 8;
    let hybrid = 2 * 2 * expert + 2 * router + gate + projection;
    let stem = 8 * 9 + 8;
    let plain = 2 * (8 * 8 * 9 + 8);
    let gaze = (4 * 9 + 4) + (8 * 4 * 9 + 8) + (8 * 8 * 9 + 8) + (16 * 8 + 16);
    let head = 3 * 16 + 3;
    let net = DkghNet::<f64>::new(ModelConfig::toy()).unwrap();
    assert_eq!(net.param_count(), stem + plain + hybrid + gaze + head);
}

#[test]
fn expert_evaluations_are_counted() {
    let mut cfg = ModelConfig::toy();
    cfg.num_experts = 4;
    cfg.stage_blocks = vec![2, 2];
    cfg.dkgh_positions = vec![(0, 1)];
    for (k, b, want) in [(1, 8, 16), (4, 8, 64)] {
        cfg.top_k = k;
        let net = DkghNet::<f64>::new(cfg.clone()).unwrap();
        let (img, hm) = batch(&cfg, b, 8, 4);
        assert_eq!(net.count_expert_evals(&img, &hm).unwrap(), want);
    }
    cfg.top_k = 1;
    cfg.dkgh_positions = vec![(0, 1), (1, 1)];
    let net = DkghNet::<f64>::new(cfg.clone()).unwrap();
    let (img, hm) = batch(&cfg, 3, 8, 5);
    assert_eq!(net.count_expert_evals(&img, &hm).unwrap(), 12);
}

#[test]
fn records_cover_every_sample_branch_and_block() {
    let mut cfg = ModelConfig::toy();
    cfg.stage_blocks = vec![2, 1];
    cfg.dkgh_positions = vec![(0, 1), (1, 0)];
    let net = DkghNet::<f64>::new(cfg.clone()).unwrap();
    let (img, hm) = batch(&cfg, 3, 8, 6);
    let mut tape = Tape::new();
    let i = tape.constant(img);
    let h = tape.constant(hm);
    let out = net.forward(&mut tape, i, h).unwrap();
    let recs = out.records(&tape);
    assert_eq!(recs.len(), 3 * 2 * 2);
    assert!(recs.iter().all(|r| r.indices.len() == 1 && r.weights == vec![1.0]));
}

fn end_to_end(k: usize) {
    let mut cfg = ModelConfig::toy();
    cfg.top_k = k;
    cfg.seed = 4;
    let mut net = DkghNet::<f64>::new(cfg.clone()).unwrap();
    let (img, hm) = batch(&cfg, 2, 16, 8);
    let labels = [0usize, 2];
    let check = GradCheckConfig {
        max_coords_per_tensor: Some(4),
        ..Default::default()
    };
    let report = finite_diff_check(
        &mut net,
        |m: &DkghNet<f64>, t: &mut Tape<'_, f64>| {
            let i = t.constant(img.clone());
            let h = t.constant(hm.clone());
            let out = m.forward(t, i, h)?;
            Ok(objective(t, &out, &labels, 0.5)?.total)
        },
        &check,
    )
    .unwrap();
    assert!(report.passed, "k={k}: {report:?}");
}

#[test]
fn whole_network_gradients_sparse_routing() {
    end_to_end(1);
}

#[test]
fn whole_network_gradients_dense_routing() {
    end_to_end(2);
}
