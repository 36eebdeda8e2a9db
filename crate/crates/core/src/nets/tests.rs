use super::*;
use approx::assert_relative_eq;
use rand::Rng;

fn random_store(shapes: &[Vec<usize>], seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    for (i, shape) in shapes.iter().enumerate() {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        s.add(&format!("p{i}"), shape.clone(), ParamRole::Weight, data).unwrap();
    }
    s
}

/// Checks tape gradients of `sum(w * f(params))` against central differences.
fn check_gradients(store: ParamStore, f: impl Fn(&mut Tape, &ParamStore) -> NodeId) {
    let weighted = |tape: &mut Tape, store: &ParamStore| -> (NodeId, f64) {
        let out = f(tape, store);
        let v = tape.value(out);
        let w: Vec<f64> = (0..v.len()).map(|j| ((j * 37 % 11) as f64 - 5.0) / 5.0).collect();
        let value = v.data.iter().zip(&w).map(|(a, b)| a * b).sum();
        (tape.custom(value, vec![(out, w)]).unwrap(), value)
    };
    let mut tape = Tape::new();
    let (loss, _) = weighted(&mut tape, &store);
    let grads = tape.backward(loss, &store).unwrap();
    let h = 1e-6;
    for p in 0..store.entries.len() {
        if store.entries[p].role == ParamRole::Buffer {
            continue;
        }
        for k in 0..store.entries[p].data.len() {
            let eval = |delta: f64| {
                let mut s = store.clone();
                s.entries[p].data[k] += delta;
                weighted(&mut Tape::new(), &s).1
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = grads[p][k];
            assert!(
                (a - fd).abs() <= 1e-4 * a.abs().max(fd.abs()) + 1e-7,
                "param {p}[{k}]: tape {a} vs fd {fd}"
            );
        }
    }
}

#[test]
fn linear_gradient_is_an_outer_product() {
    let store = random_store(&[vec![2, 3], vec![3, 4], vec![4]], 1);
    let mut tape = Tape::new();
    let x = tape.param(&store, 0);
    let w = tape.param(&store, 1);
    let b = tape.param(&store, 2);
    let y = tape.linear(x, w, b).unwrap();
    let loss = tape.sum(y);
    let g = tape.backward(loss, &store).unwrap();
    let xs = &store.entries[0].data;
    for i in 0..3 {
        for o in 0..4 {
            assert_relative_eq!(g[1][i * 4 + o], xs[i] + xs[3 + i], epsilon = 1e-12);
        }
    }
    assert!(g[2].iter().all(|&v| v == 2.0));
}

#[test]
fn linear_gradients() {
    check_gradients(random_store(&[vec![3, 5], vec![5, 2], vec![2]], 2), |t, s| {
        let (x, w, b) = (t.param(s, 0), t.param(s, 1), t.param(s, 2));
        t.linear(x, w, b).unwrap()
    });
}

fn direct_conv(x: &Tensor, w: &Tensor, b: &[f64], stride: usize) -> Tensor {
    let (n, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (o, k) = (w.shape[0], w.shape[2]);
    let oh = h.div_ceil(stride);
    let ow = wd.div_ceil(stride);
    let pad_h = ((oh - 1) * stride + k).saturating_sub(h) / 2;
    let pad_w = ((ow - 1) * stride + k).saturating_sub(wd) / 2;
    let mut out = Tensor::zeros(vec![n, o, oh, ow]);
    for i in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[oc];
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let y = (oy * stride + ky) as isize - pad_h as isize;
                                let xx = (ox * stride + kx) as isize - pad_w as isize;
                                if y < 0 || xx < 0 || y as usize >= h || xx as usize >= wd {
                                    continue;
                                }
                                acc += w.data[((oc * c + ic) * k + ky) * k + kx]
                                    * x.data[((i * c + ic) * h + y as usize) * wd + xx as usize];
                            }
                        }
                    }
                    out.data[((i * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn convolution_matches_direct_evaluation() {
    for (k, stride, h, w) in [(3, 1, 5, 4), (3, 2, 7, 6), (4, 1, 3, 5), (3, 2, 4, 4)] {
        let store = random_store(&[vec![2, 3, h, w], vec![4, 3, k, k], vec![4]], 3);
        let mut tape = Tape::new();
        let (x, wt, b) = (tape.param(&store, 0), tape.param(&store, 1), tape.param(&store, 2));
        let y = tape.conv2d(x, wt, b, stride).unwrap();
        let expect = direct_conv(tape.value(x), tape.value(wt), &tape.value(b).data, stride);
        assert_eq!(tape.value(y).shape, expect.shape);
        for (a, e) in tape.value(y).data.iter().zip(&expect.data) {
            assert_relative_eq!(a, e, epsilon = 1e-12);
        }
    }
}

#[test]
fn convolution_gradients() {
    for (k, stride) in [(3, 1), (3, 2), (4, 1)] {
        check_gradients(random_store(&[vec![2, 2, 5, 4], vec![3, 2, k, k], vec![3]], 4), |t, s| {
            let (x, w, b) = (t.param(s, 0), t.param(s, 1), t.param(s, 2));
            t.conv2d(x, w, b, stride).unwrap()
        });
    }
}

fn bn_store(shape: Vec<usize>, channels: usize) -> (ParamStore, BatchNormParams) {
    let mut s = random_store(&[shape], 5);
    let bn = s.add_batch_norm("bn", channels).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for idx in [bn.gamma, bn.beta, bn.running_mean] {
        s.entries[idx].data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    s.entries[bn.running_var].data.iter_mut().for_each(|v| *v = rng.random_range(0.5..2.0));
    (s, bn)
}

#[test]
fn batch_norm_gradients() {
    for mode in [Mode::Train, Mode::Eval] {
        let (store, bn) = bn_store(vec![3, 2, 2, 3], 2);
        check_gradients(store, |t, s| {
            let x = t.param(s, 0);
            t.batch_norm(s, x, bn, mode).unwrap()
        });
        let (store, bn) = bn_store(vec![4, 3], 3);
        check_gradients(store, |t, s| {
            let x = t.param(s, 0);
            t.batch_norm(s, x, bn, mode).unwrap()
        });
    }
}

#[test]
fn batch_norm_train_normalises() {
    let (mut store, bn) = bn_store(vec![5, 2], 2);
    store.entries[bn.gamma].data = vec![1.0, 1.0];
    store.entries[bn.beta].data = vec![0.0, 0.0];
    let mut tape = Tape::new();
    let x = tape.param(&store, 0);
    let y = tape.batch_norm(&store, x, bn, Mode::Train).unwrap();
    for ch in 0..2 {
        let col: Vec<f64> = (0..5).map(|i| tape.value(y).data[2 * i + ch]).collect();
        let mean = col.iter().sum::<f64>() / 5.0;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 5.0;
        assert!(mean.abs() < 1e-12);
        assert_relative_eq!(var, 1.0, epsilon = 1e-3);
    }
    assert_eq!(tape.batch_stats.len(), 1);
}

#[test]
fn elementwise_gradients() {
    let store = random_store(&[vec![3, 4], vec![3, 4]], 7);
    check_gradients(store.clone(), |t, s| {
        let x = t.param(s, 0);
        t.relu(x)
    });
    check_gradients(store.clone(), |t, s| {
        let x = t.param(s, 0);
        t.tanh(x)
    });
    check_gradients(store.clone(), |t, s| {
        let x = t.param(s, 0);
        t.softplus(x)
    });
    check_gradients(store.clone(), |t, s| {
        let x = t.param(s, 0);
        t.softplus_columns(x, &[1, 3]).unwrap()
    });
    check_gradients(store.clone(), |t, s| {
        let x = t.param(s, 0);
        t.softmax(x).unwrap()
    });
    check_gradients(store.clone(), |t, s| {
        let x = t.param(s, 0);
        t.scale(x, -2.5)
    });
    check_gradients(store.clone(), |t, s| {
        let (a, b) = (t.param(s, 0), t.param(s, 1));
        let p = t.mul(a, b).unwrap();
        t.add(p, a).unwrap()
    });
    check_gradients(store, |t, s| {
        let x = t.param(s, 0);
        let r = t.reshape(x, vec![2, 6]).unwrap();
        t.sum(r)
    });
}

#[test]
fn pooling_scatter_and_gather_gradients() {
    check_gradients(random_store(&[vec![2, 2, 5, 3]], 8), |t, s| {
        let x = t.param(s, 0);
        t.max_pool(x).unwrap()
    });
    check_gradients(random_store(&[vec![2, 2], vec![2, 3]], 9), |t, s| {
        let (a, b) = (t.param(s, 0), t.param(s, 1));
        t.scatter_columns(vec![(a, vec![4, 0]), (b, vec![1, 3, 2])], 5).unwrap()
    });
    check_gradients(random_store(&[vec![3, 2]], 10), |t, s| {
        let x = t.param(s, 0);
        t.gather(x, vec![5, 0, 0, 3], 2).unwrap()
    });
}

#[test]
fn max_pool_routes_to_the_first_maximum() {
    let store = ParamStore {
        entries: vec![ParamEntry {
            name: "x".into(),
            shape: vec![1, 1, 2, 3],
            role: ParamRole::Weight,
            data: vec![1.0, 3.0, 2.0, 3.0, 0.0, 5.0],
        }],
    };
    let mut tape = Tape::new();
    let x = tape.param(&store, 0);
    let y = tape.max_pool(x).unwrap();
    assert_eq!(tape.value(y).shape, vec![1, 1, 1, 2]);
    assert_eq!(tape.value(y).data, vec![3.0, 5.0]);
    let loss = tape.sum(y);
    let g = tape.backward(loss, &store).unwrap();
    assert_eq!(g[0], vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
}

#[test]
fn backward_needs_a_scalar() {
    let store = random_store(&[vec![2]], 11);
    let mut tape = Tape::new();
    let x = tape.param(&store, 0);
    assert!(tape.backward(x, &store).is_err());
}

fn small_config(kind: MeshKind) -> NetConfig {
    NetConfig {
        width: 16,
        height: 12,
        channels: [4, 6, 6, 8, 8],
        feature: 16,
        latent_dim: 4,
        decoder_hidden: 8,
        theta_bins: 12,
        light_bins: 3,
        infer_pose: true,
        infer_light: true,
        kind,
    }
}

fn noise_image(w: usize, h: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_data(w, h, (0..3 * w * h).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

#[test]
fn encoder_heads_respect_their_ranges() {
    let model = Model::new(NetConfig::default(), 1).unwrap();
    let images: Vec<Image> = (0..2).map(|s| noise_image(128, 96, s)).collect();
    let refs: Vec<&Image> = images.iter().collect();
    for mode in [Mode::Train, Mode::Eval] {
        for p in model.encode(&refs, mode).unwrap() {
            assert_eq!(p.theta_probs.len(), 12);
            assert_relative_eq!(p.theta_probs.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            assert_eq!(p.light_probs.len(), 3);
            let (tm, ts) = p.theta_fine.unwrap();
            let (lm, ls) = p.light_fine.unwrap();
            assert!(tm.abs() < PI / 12.0 && lm.abs() < PI / 3.0);
            assert!(ts > 0.0 && ls > 0.0 && p.z_std.iter().all(|&s| s > 0.0));
            p.validate().unwrap();
        }
    }
}

#[test]
fn fine_means_stay_bounded_for_extreme_inputs() {
    let mut model = Model::new(small_config(MeshKind::OrthoBlock { blocks: 1 }), 2).unwrap();
    for e in &mut model.store.entries {
        if e.role != ParamRole::Buffer {
            e.data.iter_mut().for_each(|v| *v *= 1e4);
        }
    }
    let img = Image::filled(16, 12, [1.0, 1.0, 1.0]);
    let p = &model.encode(&[&img], Mode::Eval).unwrap()[0];
    let (tm, _) = p.theta_fine.unwrap();
    assert!(tm.abs() <= PI / 12.0);
}

#[test]
fn observed_angles_have_no_heads() {
    let mut cfg = small_config(MeshKind::OrthoBlock { blocks: 2 });
    cfg.infer_pose = false;
    cfg.infer_light = false;
    let model = Model::new(cfg, 3).unwrap();
    assert!(model.store.index_of("enc.theta.logits.w").is_none());
    let p = &model.encode(&[&noise_image(16, 12, 4)], Mode::Eval).unwrap()[0];
    assert_eq!(p.theta_probs, vec![1.0]);
    assert!(p.theta_fine.is_none() && p.light_fine.is_none());
}

#[test]
fn encoder_rejects_wrong_size() {
    let model = Model::new(small_config(MeshKind::OrthoBlock { blocks: 1 }), 4).unwrap();
    assert!(model.encode(&[&noise_image(12, 16, 1)], Mode::Eval).is_err());
}

#[test]
fn eval_mode_batches_agree_with_singles() {
    let model = Model::new(small_config(MeshKind::OrthoBlock { blocks: 1 }), 5).unwrap();
    let images: Vec<Image> = (0..3).map(|s| noise_image(16, 12, 10 + s)).collect();
    let batched = model.encode(&images.iter().collect::<Vec<_>>(), Mode::Eval).unwrap();
    for (img, b) in images.iter().zip(&batched) {
        let single = &model.encode(&[img], Mode::Eval).unwrap()[0];
        for (x, y) in single.z_mean.iter().zip(&b.z_mean) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
        for (x, y) in single.theta_probs.iter().zip(&b.theta_probs) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
    }
}

#[test]
fn decoder_output_sizes() {
    let mut cfg = NetConfig::default();
    let model = Model::new(cfg.clone(), 6).unwrap();
    assert_eq!(model.decode(&[0.3; 12]).unwrap().values.len(), 294);
    cfg.kind = MeshKind::OrthoBlock { blocks: 6 };
    let model = Model::new(cfg.clone(), 6).unwrap();
    let p = model.decode(&[-0.5; 12]).unwrap();
    assert_eq!(p.values.len(), 36);
    let scales = cfg.kind.scale_indices();
    assert_eq!(scales.len(), 18);
    assert!(scales.iter().all(|&i| p.values[i] > 0.0));
    cfg.kind = MeshKind::FullBlock { blocks: 12 };
    let model = Model::new(cfg, 6).unwrap();
    assert_eq!(model.decode(&[0.1; 12]).unwrap().values.len(), 108);
    assert!(model.decode(&[0.1; 3]).is_err());
}

#[test]
fn zero_code_decodes_through_the_biases() {
    let cfg = small_config(MeshKind::OrthoBlock { blocks: 2 });
    let mut model = Model::new(cfg.clone(), 7).unwrap();
    let hidden_b = model.store.index_of("dec.hidden.b").unwrap();
    let out_b = model.store.index_of("dec.out.b").unwrap();
    let out_w = model.store.index_of("dec.out.w").unwrap();
    model.store.entries[hidden_b].data.iter_mut().for_each(|v| *v = 0.25);
    model.store.entries[out_b].data = (0..12).map(|i| 0.1 * i as f64 - 0.5).collect();
    let w = model.store.entries[out_w].data.clone();
    let decoded = model.decode(&[0.0; 4]).unwrap();
    let scales = cfg.kind.scale_indices();
    for j in 0..12 {
        let pre = model.store.entries[out_b].data[j] + (0..8).map(|h| 0.25 * w[h * 12 + j]).sum::<f64>();
        let expect = if scales.contains(&j) { pre.max(0.0) + (-pre.abs()).exp().ln_1p() } else { pre };
        assert_relative_eq!(decoded.values[j], expect, epsilon = 1e-12);
    }
    let again = Model::new(cfg, 7).unwrap();
    assert_eq!(again.decode(&[0.0; 4]).unwrap(), Model::new(again.config.clone(), 7).unwrap().decode(&[0.0; 4]).unwrap());
}

#[test]
fn rotation_head_is_slow() {
    let model = Model::new(small_config(MeshKind::FullBlock { blocks: 2 }), 8).unwrap();
    let idx = model.store.index_of("dec.rotation.w").unwrap();
    assert_eq!(model.store.entries[idx].role, ParamRole::SlowWeight);
    assert_eq!(model.store.entries[idx].shape, vec![8, 6]);
}

#[test]
fn whole_networks_match_finite_differences() {
    let mut cfg = small_config(MeshKind::FullBlock { blocks: 1 });
    cfg.width = 8;
    cfg.height = 6;
    cfg.channels = [2, 2, 3, 3, 2];
    cfg.feature = 4;
    cfg.latent_dim = 2;
    cfg.decoder_hidden = 3;
    cfg.theta_bins = 2;
    cfg.light_bins = 2;
    let mut model = Model::new(cfg, 9).unwrap();
    // larger weights than the default init so every path carries signal
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for e in &mut model.store.entries {
        if e.role != ParamRole::Buffer {
            e.data.iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
        }
    }
    let images = [noise_image(8, 6, 20), noise_image(8, 6, 21), noise_image(8, 6, 22)];
    let batch = images_to_tensor(&images.iter().collect::<Vec<_>>()).unwrap();
    let (encoder, decoder) = (model.encoder.clone(), model.decoder.clone());
    check_gradients(model.store, |t, s| {
        let x = t.leaf(batch.clone());
        let e = encoder.forward(t, s, x, Mode::Train).unwrap();
        let theta = e.theta.unwrap();
        let light = e.light.unwrap();
        let mesh = decoder.forward(t, s, e.z_mean).unwrap();
        let parts = [e.z_std, theta.probs, theta.mean, theta.std, light.probs, light.mean, light.std, mesh];
        let cols: Vec<usize> = parts.iter().map(|&p| t.value(p).shape[1]).collect();
        let total: usize = cols.iter().sum();
        let mut offset = 0;
        let mut scattered = Vec::new();
        for (&p, &c) in parts.iter().zip(&cols) {
            scattered.push((p, (offset..offset + c).collect()));
            offset += c;
        }
        t.scatter_columns(scattered, total).unwrap()
    });
}

#[test]
fn multiview_pooling() {
    let view = |m: Vec<f64>, s: Vec<f64>, theta: f64| VariationalParams {
        z_mean: m,
        z_std: s,
        theta_probs: vec![1.0],
        theta_fine: Some((theta, 0.1)),
        light_probs: vec![1.0],
        light_fine: None,
    };
    let a = view(vec![1.0, -2.0], vec![0.1, 0.2], 0.05);
    let b = view(vec![0.0, 3.0], vec![0.3, 0.4], -0.05);
    assert_eq!(pool_multiview(std::slice::from_ref(&a)).unwrap(), vec![a.clone()]);
    let pooled = pool_multiview(&[a.clone(), b.clone()]).unwrap();
    assert_eq!(pooled[0].z_mean, vec![1.0, 3.0]);
    assert_eq!(pooled[0].z_std, vec![0.1, 0.4]);
    assert_eq!(pooled[1].theta_fine, Some((-0.05, 0.1)));
    let swapped = pool_multiview(&[b, a]).unwrap();
    assert_eq!(swapped[0].z_mean, pooled[0].z_mean);
    assert_eq!(swapped[0].z_std, pooled[0].z_std);
    assert!(pool_multiview(&[]).is_err());
}

#[test]
fn tape_pooling_matches_value_pooling() {
    let store = random_store(&[vec![6, 3], vec![6, 3]], 12);
    let mut tape = Tape::new();
    let (m, s) = (tape.param(&store, 0), tape.param(&store, 1));
    let (pm, ps) = pool_views(&mut tape, m, s, 2).unwrap();
    for obj in 0..3 {
        let views: Vec<VariationalParams> = (0..2)
            .map(|v| VariationalParams {
                z_mean: tape.value(m).row(2 * obj + v).to_vec(),
                z_std: tape.value(s).row(2 * obj + v).to_vec(),
                theta_probs: vec![1.0],
                theta_fine: None,
                light_probs: vec![1.0],
                light_fine: None,
            })
            .collect();
        let pooled = pool_multiview(&views).unwrap();
        assert_eq!(tape.value(pm).row(obj), pooled[0].z_mean.as_slice());
        assert_eq!(tape.value(ps).row(obj), pooled[0].z_std.as_slice());
    }
    check_gradients(store, |t, s| {
        let (m, sd) = (t.param(s, 0), t.param(s, 1));
        let (a, b) = pool_views(t, m, sd, 3).unwrap();
        t.add(a, b).unwrap()
    });
}
