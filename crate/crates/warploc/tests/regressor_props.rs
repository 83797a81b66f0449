//! Correlation layer, point regressor, and pairwise-warp composition tests.

mod common;

use rand::Rng;
use warploc::encoder::{EncoderModel, FEATURE_GRID_SIZE};
use warploc::geometry::NORMALIZED_CORNERS;
use warploc::regressor::{
    correlation_map, correlation_map_raw, regress_points, warp_pair, RegressorError,
    RegressorModel, CORR_CHANNELS,
};
use warploc::tensor::gradcheck::{assert_grads_close, finite_diff_grad};
use warploc::tensor::{Graph, ParameterSet, Tensor};

const GRID: usize = FEATURE_GRID_SIZE;

/// Random per-location unit-norm feature grid [c, 15, 15].
fn unit_grid(seed: u64, c: usize) -> Tensor<f64> {
    let mut rng = common::rng(seed);
    let mut data = common::rand_vec(&mut rng, c * GRID * GRID, -1.0, 1.0);
    for i in 0..GRID {
        for j in 0..GRID {
            let mut norm = 0.0;
            for ch in 0..c {
                norm += data[(ch * GRID + i) * GRID + j].powi(2);
            }
            let norm = norm.sqrt();
            for ch in 0..c {
                data[(ch * GRID + i) * GRID + j] /= norm;
            }
        }
    }
    Tensor::new(&[c, GRID, GRID], data).unwrap()
}

// ---- correlation ----

#[test]
fn self_correlation_has_unit_diagonal_and_bounded_entries() {
    let f = unit_grid(1, 8);
    let mut g: Graph<f64> = Graph::new();
    let fv = g.leaf(f);
    let raw = correlation_map_raw(&mut g, fv, fv).unwrap();
    assert_eq!(g.shape(raw), &[CORR_CHANNELS, GRID, GRID]);
    let vals = g.value(raw).data();
    for i in 0..GRID {
        for j in 0..GRID {
            let k = i * GRID + j;
            let diag = vals[(k * GRID + i) * GRID + j];
            assert!((diag - 1.0).abs() <= 1e-6, "diag ({i},{j}) = {diag}");
        }
    }
    for v in vals {
        assert!(*v <= 1.0 + 1e-6 && *v >= -1.0 - 1e-6, "entry {v} out of [-1,1]");
    }
}

#[test]
fn orthogonal_fields_correlate_to_zero() {
    let mut e0 = vec![0.0f64; 2 * GRID * GRID];
    let mut e1 = vec![0.0f64; 2 * GRID * GRID];
    e0[..GRID * GRID].iter_mut().for_each(|v| *v = 1.0); // channel 0 = 1
    e1[GRID * GRID..].iter_mut().for_each(|v| *v = 1.0); // channel 1 = 1
    let mut g: Graph<f64> = Graph::new();
    let fq = g.leaf(Tensor::new(&[2, GRID, GRID], e0).unwrap());
    let fp = g.leaf(Tensor::new(&[2, GRID, GRID], e1).unwrap());
    let full = correlation_map(&mut g, fq, fp).unwrap();
    for v in g.value(full).data() {
        assert_eq!(*v, 0.0);
    }
}

#[test]
fn correlation_matches_triple_loop_reference() {
    let fq = unit_grid(2, 16);
    let fp = unit_grid(3, 16);
    let mut g: Graph<f64> = Graph::new();
    let qv = g.leaf(fq.clone());
    let pv = g.leaf(fp.clone());
    let full = correlation_map(&mut g, qv, pv).unwrap();
    let got = g.value(full).data();

    let at = |t: &Tensor<f64>, ch: usize, i: usize, j: usize| t.data()[(ch * GRID + i) * GRID + j];
    // reference: raw inner products, ReLU, then L2 along k per (i,j)
    let mut reference = vec![0.0f64; CORR_CHANNELS * GRID * GRID];
    for i in 0..GRID {
        for j in 0..GRID {
            let mut col = vec![0.0f64; CORR_CHANNELS];
            for ik in 0..GRID {
                for jk in 0..GRID {
                    let k = ik * GRID + jk;
                    let mut dot = 0.0;
                    for ch in 0..16 {
                        dot += at(&fq, ch, i, j) * at(&fp, ch, ik, jk);
                    }
                    col[k] = dot.max(0.0);
                }
            }
            let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for (k, v) in col.iter().enumerate() {
                reference[(k * GRID + i) * GRID + j] = v / norm;
            }
        }
    }
    for (a, b) in got.iter().zip(&reference) {
        assert!((a - b).abs() <= 1e-6, "{a} vs reference {b}");
    }
}

#[test]
fn correlation_rejects_mismatched_grids() {
    let mut g: Graph<f64> = Graph::new();
    let a = g.leaf(Tensor::zeros(&[8, GRID, GRID]));
    let b = g.leaf(Tensor::zeros(&[4, GRID, GRID]));
    assert!(correlation_map_raw(&mut g, a, b).is_err());
    let c = g.leaf(Tensor::zeros(&[8, 14, GRID]));
    assert!(correlation_map_raw(&mut g, a, c).is_err());
}

// ---- regressor ----

#[test]
fn initialized_regressor_outputs_corners_for_any_input() {
    let model = RegressorModel::<f32>::init(5);
    let mut rng = common::rng(6);
    for _ in 0..3 {
        let corr = Tensor::new(
            &[CORR_CHANNELS, GRID, GRID],
            common::rand_vec_f32(&mut rng, CORR_CHANNELS * GRID * GRID, -1.0, 1.0),
        )
        .unwrap();
        let pred = regress_points(&model, &corr).unwrap();
        assert_eq!(pred.t_q.0, NORMALIZED_CORNERS);
        assert_eq!(pred.t_p.0, NORMALIZED_CORNERS);
    }
}

#[test]
fn prediction_split_keeps_first_image_first() {
    let mut model = RegressorModel::<f64>::init(7);
    let ramp: Vec<f64> = (0..16).map(|v| v as f64 / 10.0).collect();
    model
        .params_mut()
        .get_mut("regressor.fc.b")
        .unwrap()
        .data_mut()
        .copy_from_slice(&ramp);
    let corr = Tensor::zeros(&[CORR_CHANNELS, GRID, GRID]);
    let pred = regress_points(&model, &corr).unwrap();
    for i in 0..8 {
        assert_eq!(pred.t_q.0[i], ramp[i]);
        assert_eq!(pred.t_p.0[i], ramp[8 + i]);
    }
}

#[test]
fn regress_rejects_bad_shapes() {
    let model = RegressorModel::<f32>::init(1);
    let corr = Tensor::zeros(&[100, GRID, GRID]);
    assert!(matches!(
        regress_points(&model, &corr),
        Err(RegressorError::Tensor(_))
    ));
}

#[test]
fn from_params_validates_architecture() {
    let good = RegressorModel::<f32>::init(2);

    let mut missing = ParameterSet::new();
    for (name, t) in good.params().iter() {
        if name != "regressor.conv4.w" {
            missing.insert(name, t.clone()).unwrap();
        }
    }
    assert!(matches!(
        RegressorModel::from_params(missing),
        Err(RegressorError::BadParameters(_))
    ));

    let mut wrong = good.params().clone();
    *wrong.get_mut("regressor.fc.w").unwrap() = Tensor::zeros(&[16, 64]);
    assert!(matches!(
        RegressorModel::from_params(wrong),
        Err(RegressorError::BadParameters(_))
    ));

    assert!(RegressorModel::from_params(good.params().clone()).is_ok());
}

// ---- warp_pair ----

#[test]
fn untrained_warp_pair_is_the_identity() {
    let mut encoder = EncoderModel::<f32>::init(3);
    encoder.freeze();
    let model = RegressorModel::<f32>::init(4);
    let mut rng = common::rng(8);
    let iq = Tensor::new(&[3, 64, 64], common::rand_vec_f32(&mut rng, 3 * 64 * 64, 0.0, 1.0))
        .unwrap();
    let ip = Tensor::new(&[3, 64, 96], common::rand_vec_f32(&mut rng, 3 * 64 * 96, 0.0, 1.0))
        .unwrap();

    let mut g: Graph<f32> = Graph::new();
    let qv = g.leaf(iq.clone());
    let pv = g.leaf(ip.clone());
    let out = warp_pair(&mut g, &encoder, &model, qv, pv, false).unwrap();

    let pts = g.value(out.points).data();
    for i in 0..8 {
        assert_eq!(pts[i] as f64, NORMALIZED_CORNERS[i]);
        assert_eq!(pts[8 + i] as f64, NORMALIZED_CORNERS[i]);
    }
    assert_eq!(g.value(out.warped_q).data(), iq.data());
    assert_eq!(g.value(out.warped_p).data(), ip.data());
}

fn pair_feature_loss(
    encoder: &EncoderModel<f64>,
    model: &RegressorModel<f64>,
    iq: &Tensor<f64>,
    ip: &Tensor<f64>,
    probe: &Tensor<f64>,
) -> f64 {
    let mut g: Graph<f64> = Graph::new();
    let qv = g.leaf(iq.clone());
    let pv = g.leaf(ip.clone());
    let out = warp_pair(&mut g, encoder, model, qv, pv, false).unwrap();
    let f = encoder.feature_grid(&mut g, out.warped_q).unwrap();
    let probe_v = g.leaf(probe.clone());
    let prod = g.mul(f, probe_v).unwrap();
    let loss = g.sum(prod);
    g.value(loss).data()[0]
}

#[test]
fn warp_pair_fc_bias_gradient_matches_finite_differences() {
    let mut rng = common::rng(9);
    let mut encoder = EncoderModel::<f64>::init(10);
    encoder.freeze();
    let mut model = RegressorModel::<f64>::init(11);
    // move the biases off the exact corners: the identity configuration
    // pins every sample to the bilinear kinks where one-sided gradients and
    // central differences legitimately disagree
    {
        let b = model.params_mut().get_mut("regressor.fc.b").unwrap();
        for v in b.data_mut() {
            *v += rng.gen_range(0.02..0.08) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
        }
    }
    let iq = Tensor::new(&[3, 64, 64], common::smooth_image(&mut rng, 3, 64, 64)).unwrap();
    let ip = Tensor::new(&[3, 64, 64], common::smooth_image(&mut rng, 3, 64, 64)).unwrap();
    let probe = Tensor::new(
        &[64, GRID, GRID],
        common::rand_vec(&mut rng, 64 * GRID * GRID, -1.0, 1.0),
    )
    .unwrap();

    let mut g: Graph<f64> = Graph::new();
    let qv = g.leaf(iq.clone());
    let pv = g.leaf(ip.clone());
    let out = warp_pair(&mut g, &encoder, &model, qv, pv, true).unwrap();
    let f = encoder.feature_grid(&mut g, out.warped_q).unwrap();
    let probe_v = g.leaf(probe.clone());
    let prod = g.mul(f, probe_v).unwrap();
    let loss = g.sum(prod);
    let mut ps = model.params().clone();
    g.backward(loss, &mut ps).unwrap();
    let analytic = ps
        .get("regressor.fc.b")
        .unwrap()
        .grad()
        .expect("fc bias gradient")
        .to_vec();

    let base = model.params().get("regressor.fc.b").unwrap().data().to_vec();
    let numeric = finite_diff_grad(
        |b| {
            let mut p2 = model.params().clone();
            p2.get_mut("regressor.fc.b").unwrap().data_mut().copy_from_slice(b);
            let m2 = RegressorModel::from_params(p2).unwrap();
            pair_feature_loss(&encoder, &m2, &iq, &ip, &probe)
        },
        &base,
        // small step: the loss is piecewise smooth (ReLU and bilinear kinks)
        // and the kink-crossing error shrinks linearly with h
        1e-6,
    );
    assert_grads_close(&analytic, &numeric, 1e-3, "warp_pair fc bias");
}
