//! Straight-line reference implementations checked against the tape ops
//! and modules.

use img_core::autodiff::NormStats;
use img_core::clim::Clim;
use img_core::cmem::{AttentionForm, Cmem, CmemConfig};
use img_core::gradcheck::{gradient_check, DEFAULT_EPS};
use img_core::nn::{BatchNorm, Forward, Mode, ParamStore};
use img_core::shift::{adaptive_shift, make_tsm_kernel, tsm_shift, ShiftMode};
use img_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// `[N, C, H, W]` zero-padded 2-D convolution with odd square kernel.
fn naive_conv(x: &[f64], w: &[f64], b: Option<&[f64]>, n: usize, ci: usize, co: usize, h: usize, wd: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; n * co * h * wd];
    for ni in 0..n {
        for o in 0..co {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b.map_or(0.0, |b| b[o]);
                    for i in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - pad;
                                let sx = xx as isize + kx as isize - pad;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                acc += w[((o * ci + i) * k + ky) * k + kx]
                                    * x[((ni * ci + i) * h + sy as usize) * wd + sx as usize];
                            }
                        }
                    }
                    out[((ni * co + o) * h + y) * wd + xx] = acc;
                }
            }
        }
    }
    out
}

/// `out[t] = k0 * x[t-1] + k1 * x[t] + k2 * x[t+1]` per channel, zero outside.
fn naive_temporal(x: &Tensor<f64>, k: &[f64]) -> Tensor<f64> {
    let [n, t, c, h, w] = x.dims5().unwrap();
    let mut out = Tensor::zeros(x.shape());
    for ni in 0..n {
        for ti in 0..t {
            for ci in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = k[ci * 3 + 1] * x.at5(ni, ti, ci, y, xx);
                        if ti > 0 {
                            acc += k[ci * 3] * x.at5(ni, ti - 1, ci, y, xx);
                        }
                        if ti + 1 < t {
                            acc += k[ci * 3 + 2] * x.at5(ni, ti + 1, ci, y, xx);
                        }
                        let o = out.offset5(ni, ti, ci, y, xx);
                        out.data_mut()[o] = acc;
                    }
                }
            }
        }
    }
    out
}

fn video_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Tensor<f64> {
    let [n, t, c, h, wd] = x.dims5().unwrap();
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let out = naive_conv(x.data(), w.data(), b.map(|b| b.data()), n * t, c, co, h, wd, k);
    Tensor::new(&[n, t, co, h, wd], out).unwrap()
}

fn channels(x: &Tensor<f64>, start: usize, len: usize) -> Tensor<f64> {
    let [n, t, c, h, w] = x.dims5().unwrap();
    let plane = h * w;
    let mut data = Vec::with_capacity(n * t * len * plane);
    for frame in x.data().chunks(c * plane) {
        data.extend_from_slice(&frame[start * plane..(start + len) * plane]);
    }
    Tensor::new(&[n, t, len, h, w], data).unwrap()
}

fn concat_channels(parts: &[Tensor<f64>]) -> Tensor<f64> {
    let [n, t, _, h, w] = parts[0].dims5().unwrap();
    let plane = h * w;
    let c: usize = parts.iter().map(|p| p.shape()[2]).sum();
    let mut data = Vec::new();
    for f in 0..n * t {
        for p in parts {
            let pc = p.shape()[2];
            data.extend_from_slice(&p.data()[f * pc * plane..(f + 1) * pc * plane]);
        }
    }
    Tensor::new(&[n, t, c, h, w], data).unwrap()
}

fn add(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn conv2d_matches_sliding_window() {
    for (k, bias, h, w) in [(3, true, 5, 7), (1, false, 4, 4), (3, false, 1, 1), (3, true, 2, 9), (1, true, 6, 3)] {
        let x = random(&[2, 3, 3, h, w], 1);
        let wt = random(&[4, 3, k, k], 2);
        let b = random(&[4], 3);
        let tape = Tape::new();
        let y = tape
            .constant(x.clone())
            .conv2d(tape.constant(wt.clone()), bias.then(|| tape.constant(b.clone())))
            .unwrap();
        let expect = video_conv(&x, &wt, bias.then_some(&b));
        assert!(y.value().max_abs_diff(&expect) < 1e-12, "k={k} {h}x{w}");
    }
}

#[test]
fn conv2d_backward_is_the_adjoint() {
    // <conv(x), dy> = <x, dx> and = <w, dw> for a bias-free convolution
    let x = random(&[1, 2, 3, 6, 5], 4);
    let wt = random(&[2, 3, 3, 3], 5);
    let dy = random(&[1, 2, 2, 6, 5], 6);
    let tape = Tape::new();
    let (xv, wv) = (tape.leaf(x.clone(), true), tape.leaf(wt.clone(), true));
    let y = xv.conv2d(wv, None).unwrap();
    let loss = y.mul(tape.constant(dy.clone())).unwrap().sum();
    let g = tape.backward(loss).unwrap();
    let inner = dot(y.value().data(), dy.data());
    assert!((inner - dot(x.data(), g.get(xv).unwrap().data())).abs() < 1e-10);
    assert!((inner - dot(wt.data(), g.get(wv).unwrap().data())).abs() < 1e-10);
}

#[test]
fn temporal_kernels_match_reference() {
    let x = random(&[2, 5, 8, 3, 2], 7);
    let k = random(&[8, 3], 8);
    let tape = Tape::new();
    let y = adaptive_shift(tape.constant(x.clone()), tape.constant(k.clone())).unwrap();
    assert!(y.value().max_abs_diff(&naive_temporal(&x, k.data())) < 1e-12);

    // a diagonal channel-mixing kernel reduces to the depthwise one
    let mut full = Tensor::zeros(&[8, 8, 3]);
    for c in 0..8 {
        full.data_mut()[(c * 8 + c) * 3..][..3].copy_from_slice(&k.data()[c * 3..][..3]);
    }
    let z = adaptive_shift(tape.constant(x), tape.constant(full)).unwrap();
    assert!(z.value().max_abs_diff(&y.value()) < 1e-12);
}

#[test]
fn tsm_kernel_reproduces_fixed_shift() {
    for seed in 0..10 {
        let x = random(&[2, 8, 32, 7, 7], seed);
        let tape = Tape::new();
        let y = adaptive_shift(tape.constant(x.clone()), tape.constant(make_tsm_kernel(32).unwrap())).unwrap();
        assert_eq!(y.value().data(), tsm_shift(&x).unwrap().data());
    }
}

#[test]
fn pooling_matches_reference() {
    let x = random(&[1, 2, 3, 4, 6], 9);
    let tape = Tape::new();
    let g = tape.constant(x.clone()).global_avg_pool().unwrap().value();
    let p = tape.constant(x.clone()).avg_pool2d(2).unwrap().value();
    assert_eq!(p.shape(), [1, 2, 3, 2, 3]);
    for t in 0..2 {
        for c in 0..3 {
            let plane: Vec<f64> = (0..24).map(|i| x.at5(0, t, c, i / 6, i % 6)).collect();
            assert!((g.at5(0, t, c, 0, 0) - plane.iter().sum::<f64>() / 24.0).abs() < 1e-14);
            for (py, px) in [(0, 0), (1, 2), (0, 1)] {
                let s: f64 = (0..4).map(|i| x.at5(0, t, c, 2 * py + i / 2, 2 * px + i % 2)).sum();
                assert!((p.at5(0, t, c, py, px) - s / 4.0).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn cosine_matches_reference() {
    let a = random(&[1, 2, 3, 4, 4], 10);
    let b = random(&[1, 2, 3, 4, 4], 11);
    let tape = Tape::new();
    let cos = tape.constant(a.clone()).cosine_per_channel(tape.constant(b.clone())).unwrap().value();
    for (i, (pa, pb)) in a.data().chunks(16).zip(b.data().chunks(16)).enumerate() {
        let expect = dot(pa, pb) / (dot(pa, pa).sqrt() * dot(pb, pb).sqrt());
        assert!((cos.data()[i] - expect).abs() < 1e-12);
    }
    // identical planes give 1, opposite planes -1, a zero plane 0
    let neg = a.map(|v| -v);
    let zero = Tensor::zeros(a.shape());
    let c1 = tape.constant(a.clone()).cosine_per_channel(tape.constant(a.clone())).unwrap().value();
    let c2 = tape.constant(a.clone()).cosine_per_channel(tape.constant(neg)).unwrap().value();
    let c3 = tape.constant(a).cosine_per_channel(tape.constant(zero)).unwrap().value();
    assert!(c1.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
    assert!(c2.data().iter().all(|v| (v + 1.0).abs() < 1e-12));
    assert!(c3.data().iter().all(|&v| v == 0.0));
}

#[test]
fn batch_norm_matches_reference() {
    let x = random(&[2, 3, 4, 2, 3], 12);
    let gamma = random(&[4], 13);
    let beta = random(&[4], 14);
    let tape = Tape::new();
    let (y, stats) = tape
        .constant(x.clone())
        .batch_norm(tape.constant(gamma.clone()), tape.constant(beta.clone()), NormStats::Batch, 1e-5)
        .unwrap();
    let (mean, var) = stats.unwrap();
    let y = y.value();
    for c in 0..4 {
        let vals: Vec<f64> = x.data().chunks(6).enumerate().filter(|(i, _)| i % 4 == c).flat_map(|(_, p)| p.to_vec()).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!((mean[c] - m).abs() < 1e-14 && (var[c] - v).abs() < 1e-14);
        let o = y.offset5(1, 2, c, 1, 2);
        let expect = gamma.data()[c] * (x.data()[o] - m) / (v + 1e-5).sqrt() + beta.data()[c];
        assert!((y.data()[o] - expect).abs() < 1e-12);
    }
}

#[test]
fn clim_matches_composition() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let modes = [ShiftMode::Random, ShiftMode::Pretrained, ShiftMode::Random];
    let clim = Clim::new(&mut store, "clim", 32, modes, &mut rng).unwrap();
    let x = random(&[2, 4, 32, 5, 5], 16);
    let tape = Tape::new();
    let ctx = Forward::new(&tape, &store, Mode::Train, 0);
    let y = clim.forward(&ctx, tape.constant(x.clone())).unwrap().value();

    let mut parts = vec![channels(&x, 0, 8)];
    for i in 1..4 {
        let conv = &clim.conv_spt[i - 1];
        let mut input = channels(&x, 8 * i, 8);
        if i > 1 {
            input = add(&input, &parts[i - 1]);
        }
        let bias = conv.bias.map(|b| store.value(b).clone());
        let convolved = video_conv(&input, store.value(conv.weight), bias.as_ref());
        parts.push(naive_temporal(&convolved, store.value(clim.shifts[i - 1].weight).data()));
    }
    assert!(y.max_abs_diff(&concat_channels(&parts)) < 1e-10);
    assert_eq!(&y.data()[..8 * 25], &x.data()[..8 * 25]);
}

#[test]
fn cmem_matches_composition() {
    for form in [AttentionForm::ShiftedSigmoid, AttentionForm::OffsetSigmoid] {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let config = CmemConfig { r: 4, alpha: 0.3, beta: 0.7, attention_form: form };
        let cmem = Cmem::new(&mut store, "cmem", 16, config, &mut rng).unwrap();
        let x = random(&[2, 3, 16, 4, 4], 18);
        let tape = Tape::new();
        let ctx = Forward::new(&tape, &store, Mode::Train, 0);
        let y = cmem.forward(&ctx, tape.constant(x.clone())).unwrap().value();

        let conv = |c: &img_core::nn::Conv2d, input: &Tensor<f64>| {
            video_conv(input, store.value(c.weight), c.bias.map(|b| store.value(b)))
        };
        let z = conv(&cmem.conv_trans, &conv(&cmem.conv_prev, &x));
        let (n, t, cr, plane) = (2, 3, 4, 16);
        let mut fused = Tensor::zeros(&[n, t, cr, 1, 1]);
        for ni in 0..n {
            for ti in 0..t - 1 {
                for c in 0..cr {
                    let a = &z.data()[z.offset5(ni, ti + 1, c, 0, 0)..][..plane];
                    let b = &z.data()[z.offset5(ni, ti, c, 0, 0)..][..plane];
                    let pooled = a.iter().zip(b).map(|(p, q)| p - q).sum::<f64>() / plane as f64;
                    let cos = dot(a, b) / (dot(a, a) * dot(b, b)).sqrt();
                    let o = fused.offset5(ni, ti, c, 0, 0);
                    fused.data_mut()[o] = 0.3 * pooled + 0.7 * cos;
                }
            }
        }
        let e = conv(&cmem.conv_exp, &fused);
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        for ni in 0..n {
            for ti in 0..t {
                for c in 0..16 {
                    let z = e.at5(ni, ti, c, 0, 0);
                    let gain = match form {
                        AttentionForm::ShiftedSigmoid => 2.0 * sig(z) - 1.0,
                        AttentionForm::OffsetSigmoid => 2.0 * sig(z - 1.0),
                    };
                    for p in 0..plane {
                        let xv = x.at5(ni, ti, c, p / 4, p % 4);
                        assert!((y.at5(ni, ti, c, p / 4, p % 4) - xv * (1.0 + gain)).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

#[test]
fn batch_statistics_gradients_pass_finite_differences() {
    let x = random(&[2, 2, 3, 3, 2], 19);
    let gamma = random(&[3], 20);
    let beta = random(&[3], 21);
    let proj = random(&[2, 2, 3, 3, 2], 22);
    let report = gradient_check(&[x, gamma, beta], DEFAULT_EPS, |tape, v| {
        let (y, _) = v[0].batch_norm(v[1], v[2], NormStats::Batch, 1e-5)?;
        Ok(y.mul(tape.constant(proj.clone()))?.sum())
    })
    .unwrap();
    assert!(report.max_rel_error() <= 1e-5, "{report:?}");
}

#[test]
fn batch_norm_layer_in_train_mode_passes_finite_differences() {
    // the module path, with running-stat updates deferred
    let mut store = ParamStore::<f64>::new();
    let bn = BatchNorm::new(&mut store, "bn", 3, 1.0);
    let x = random(&[2, 3, 3, 2, 2], 23);
    let proj = random(&[2, 3, 3, 2, 2], 24);
    let report = gradient_check(&[x], DEFAULT_EPS, |tape, v| {
        let ctx = Forward::new(tape, &store, Mode::Train, 0);
        let y = bn.forward(&ctx, v[0])?.relu();
        Ok(y.mul(tape.constant(proj.clone()))?.sum())
    })
    .unwrap();
    assert!(report.max_rel_error() <= 1e-5, "{report:?}");
}
