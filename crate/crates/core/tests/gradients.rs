use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ris_core::convlstm::{self, ConvLstmParams};
use ris_core::gradcheck::{self, GradCheckConfig, GradCheckReport};
use ris_core::inhibition::{self, HeadOrder, InhibitionParams};
use ris_core::nnops::{self, Padding, Pointwise};
use ris_core::{Result, Tape, Tensor, Var};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::uniform_with(r, -1.0, 1.0, shape)
}

/// Reduce `out` to a scalar with fixed random weights so every output
/// element contributes a distinct amount.
fn weighted_sum(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(uniform(&mut rng(seed ^ 0xfeed), &shape));
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn assert_passes(what: &str, r: &GradCheckReport) {
    assert!(
        r.passed(),
        "{what}: worst {:.3e} at {} (analytic {:.6e}, numeric {:.6e})",
        r.worst_relative,
        r.worst_at,
        r.worst_analytic,
        r.worst_numeric
    );
}

#[test]
fn conv2d_same_and_valid() {
    let gc = GradCheckConfig::default();
    for seed in 0..3u64 {
        let mut r = rng(seed);
        let c = r.random_range(1..=3);
        let o = r.random_range(1..=3);
        let f = [1, 3, 5][r.random_range(0..3)];
        let h = r.random_range(f..f + 4);
        let w = r.random_range(f..f + 4);
        let inputs = vec![
            uniform(&mut r, &[c, h, w]),
            uniform(&mut r, &[o, c, f, f]),
            uniform(&mut r, &[o]),
        ];
        for (padding, stride) in [(Padding::Same, 1), (Padding::Valid, 1), (Padding::Same, 2)] {
            let rep = gradcheck::check_op(&inputs, &gc, |t, v| {
                let y = nnops::conv2d(t, v[0], v[1], Some(v[2]), stride, padding)?;
                weighted_sum(t, y, seed)
            })
            .unwrap();
            assert_passes(&format!("conv2d {padding:?} stride {stride}"), &rep);
        }
    }
}

#[test]
fn pointwise_ops() {
    let gc = GradCheckConfig::default();
    let x = uniform(&mut rng(3), &[2, 3, 4]);
    for kind in [Pointwise::Sigmoid, Pointwise::Tanh, Pointwise::Relu] {
        let rep = gradcheck::check_op(std::slice::from_ref(&x), &gc, |t, v| {
            let y = nnops::pointwise(t, kind, v[0])?;
            weighted_sum(t, y, 3)
        })
        .unwrap();
        assert_passes(&format!("{kind:?}"), &rep);
    }
}

#[test]
fn pooling() {
    let gc = GradCheckConfig::default();
    let x = uniform(&mut rng(4), &[2, 6, 5]);
    let rep = gradcheck::check_op(std::slice::from_ref(&x), &gc, |t, v| {
        let y = nnops::maxpool2d(t, v[0], (2, 2), (2, 1))?;
        weighted_sum(t, y, 4)
    })
    .unwrap();
    assert_passes("maxpool2d", &rep);
    let rep = gradcheck::check_op(&[x], &gc, |t, v| {
        let y = nnops::global_maxpool(t, v[0])?;
        weighted_sum(t, y, 5)
    })
    .unwrap();
    assert_passes("global_maxpool", &rep);
}

#[test]
fn log_softmax_and_scalar_bias() {
    let gc = GradCheckConfig::default();
    let mut r = rng(6);
    let inputs = vec![uniform(&mut r, &[1, 4, 5]), uniform(&mut r, &[1])];
    let rep = gradcheck::check_op(&inputs, &gc, |t, v| {
        let y = nnops::log_softmax_spatial(t, v[0])?;
        let y = nnops::bias_scalar_add(t, y, v[1])?;
        weighted_sum(t, y, 6)
    })
    .unwrap();
    assert_passes("log_softmax + bias", &rep);
}

#[test]
fn upsample_linear_slice() {
    let gc = GradCheckConfig::default();
    let mut r = rng(7);
    let x = uniform(&mut r, &[2, 3, 4]);
    let rep = gradcheck::check_op(std::slice::from_ref(&x), &gc, |t, v| {
        let y = nnops::upsample_bilinear(t, v[0], (7, 9))?;
        weighted_sum(t, y, 7)
    })
    .unwrap();
    assert_passes("upsample_bilinear", &rep);

    let inputs = vec![
        uniform(&mut r, &[4]),
        uniform(&mut r, &[3, 4]),
        uniform(&mut r, &[3]),
    ];
    let rep = gradcheck::check_op(&inputs, &gc, |t, v| {
        let y = nnops::linear(t, v[0], v[1], v[2])?;
        weighted_sum(t, y, 8)
    })
    .unwrap();
    assert_passes("linear", &rep);

    let rep = gradcheck::check_op(&[x], &gc, |t, v| {
        let y = t.slice_channels(v[0], 1, 1)?;
        let z = t.reshape(y, &[12])?;
        weighted_sum(t, z, 9)
    })
    .unwrap();
    assert_passes("slice + reshape", &rep);
}

#[test]
fn convlstm_two_step_bptt() {
    let gc = GradCheckConfig::default();
    let mut r = rng(10);
    let (d_in, d, f) = (2, 3, 3);
    let p = ConvLstmParams::<f64> {
        w_x: Tensor::uniform_with(&mut r, -0.5, 0.5, &[4 * d, d_in, f, f]),
        w_h: Tensor::uniform_with(&mut r, -0.5, 0.5, &[4 * d, d, f, f]),
        bias: Tensor::uniform_with(&mut r, -0.5, 0.5, &[4 * d]),
    };
    let x = uniform(&mut r, &[d_in, 4, 4]);
    let inputs = vec![x, p.w_x.clone(), p.w_h.clone(), p.bias.clone()];
    let rep = gradcheck::check_op(&inputs, &gc, |t, v| {
        let layer = convlstm::ConvLstmVars {
            w_x: v[1],
            w_h: v[2],
            bias: v[3],
            hidden: d,
        };
        let states = convlstm::unroll_on(t, v[0], &[layer], 2)?;
        let a = t.sum(states[0].h)?;
        let b = weighted_sum(t, states[1].h, 10)?;
        t.add(a, b)
    })
    .unwrap();
    assert_passes("convlstm 2 steps", &rep);
}

#[test]
fn stacked_convlstm_hidden_sum() {
    let gc = GradCheckConfig::default();
    let mut r = rng(11);
    let d = 2;
    let mut inputs = vec![uniform(&mut r, &[1, 3, 3])];
    for d_in in [1, d] {
        inputs.push(Tensor::uniform_with(
            &mut r,
            -0.5,
            0.5,
            &[4 * d, d_in, 3, 3],
        ));
        inputs.push(Tensor::uniform_with(&mut r, -0.5, 0.5, &[4 * d, d, 3, 3]));
        inputs.push(Tensor::uniform_with(&mut r, -0.5, 0.5, &[4 * d]));
    }
    let rep = gradcheck::check_op(&inputs, &gc, |t, v| {
        let layers: Vec<_> = (0..2)
            .map(|l| convlstm::ConvLstmVars {
                w_x: v[1 + 3 * l],
                w_h: v[2 + 3 * l],
                bias: v[3 + 3 * l],
                hidden: d,
            })
            .collect();
        let states = convlstm::unroll_on(t, v[0], &layers, 3)?;
        let mut total = t.sum(states[0].h)?;
        for s in &states[1..] {
            let part = t.sum(s.h)?;
            total = t.add(total, part)?;
        }
        Ok(total)
    })
    .unwrap();
    assert_passes("2-layer convlstm", &rep);
}

#[test]
fn inhibition_heads() {
    let gc = GradCheckConfig::default();
    let mut r = rng(12);
    let d = 3;
    let p = InhibitionParams::<f64> {
        proj: nnops::Conv2dParams::new(uniform(&mut r, &[1, d, 1, 1]), uniform(&mut r, &[1]))
            .unwrap(),
        threshold: uniform(&mut r, &[1]),
        conf_weight: uniform(&mut r, &[1, d]),
        conf_bias: uniform(&mut r, &[1]),
    };
    let h = uniform(&mut r, &[d, 3, 4]);
    // the projection bias is left out: log-softmax cancels it, so its
    // gradient is exactly zero and the finite difference is pure noise
    let inputs = vec![
        h.clone(),
        p.proj.weight.clone(),
        p.threshold.clone(),
        p.conf_weight.clone(),
        p.conf_bias.clone(),
    ];
    let proj_bias = p.proj.bias.clone();
    for order in [
        HeadOrder::UpsampleThenSigmoid,
        HeadOrder::SigmoidThenUpsample,
    ] {
        let rep = gradcheck::check_op(&inputs, &gc, |t, v| {
            let bias = t.constant(proj_bias.clone());
            let vars = inhibition::InhibitionVars {
                proj: nnops::ConvVars { weight: v[1], bias },
                threshold: v[2],
                conf_weight: v[3],
                conf_bias: v[4],
            };
            let mask = inhibition::segment_head_on(t, v[0], &vars, (6, 7), order)?;
            let score = inhibition::confidence_head_on(t, v[0], &vars)?;
            let a = weighted_sum(t, mask, 12)?;
            let b = t.sum(score)?;
            t.add(a, b)
        })
        .unwrap();
        assert_passes(&format!("heads {order:?}"), &rep);

        let mut t = Tape::new();
        let vars = p.record(&mut t);
        let hv = t.constant(h.clone());
        let mask = inhibition::segment_head_on(&mut t, hv, &vars, (6, 7), order).unwrap();
        let loss = weighted_sum(&mut t, mask, 12).unwrap();
        let g = t.backward(loss).unwrap();
        assert!(g.wrt(&t, vars.proj.bias).data()[0].abs() < 1e-14);
    }
}
