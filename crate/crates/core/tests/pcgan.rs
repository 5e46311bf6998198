use fas::datapipe::{FaceSample, Label, Provenance};
use fas::image::Image;
use fas::pcgan::*;
use fas::rng;
use fas::FasError;
use fas_nn::{Adam, Graph, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn small_cfg(size: usize) -> PcganConfig {
    PcganConfig {
        image_size: size,
        enc_width: 4,
        gen_width: 8,
        gen_out_width: 4,
        disc_width: 4,
        patch_feat: 8,
        patch_size: 8,
        patch_crops: 2,
        ref_crops: 2,
        batch_size: 2,
        ..PcganConfig::desk()
    }
}

fn rand_images<T: fas_nn::Float>(n: usize, s: usize, seed: u64) -> Tensor<T> {
    let mut r = rng::stream(seed, "test/img", 0);
    Tensor::from_fn(&[n, 3, s, s], |_| T::from_f64(r.random_range(0.0..1.0)))
}

fn value(g: &Graph<f64>, v: fas_nn::Var) -> f64 {
    g.value(v).item()
}

#[test]
fn desk_latent_shapes_and_determinism() {
    let m = Pcgan::<f32>::new(PcganConfig::desk(), 0).unwrap();
    let x = rand_images::<f32>(1, 64, 1);
    let a = m.encode(&x).unwrap();
    assert_eq!(a.z_pat.shape(), &[1, 8, 32, 32]);
    assert_eq!(a.z_con.shape(), &[1, 8]);
    assert_eq!(a, m.encode(&x).unwrap());
    let y = m.generate(&a.z_con, &a.z_pat).unwrap();
    assert_eq!(y.shape(), &[1, 3, 64, 64]);
    assert!(y.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
}

#[test]
fn bad_shapes_rejected() {
    let m = Pcgan::<f32>::new(small_cfg(16), 0).unwrap();
    assert!(matches!(m.encode(&Tensor::zeros(&[1, 3, 16, 8])), Err(FasError::Shape(_))));
    assert!(matches!(m.encode(&Tensor::zeros(&[1, 3, 15, 15])), Err(FasError::Shape(_))));
    let z = m.encode(&rand_images::<f32>(1, 16, 0)).unwrap();
    assert!(matches!(m.generate(&z.z_con, &Tensor::zeros(&[1, 8, 4, 4])), Err(FasError::Shape(_))));
    assert!(matches!(m.generate(&Tensor::zeros(&[1, 3]), &z.z_pat), Err(FasError::Shape(_))));
    assert!(PcganConfig { image_size: 20, ..PcganConfig::desk() }.validate().is_err());
}

#[test]
fn discriminator_output_guard() {
    assert_eq!(neg_log_prob(1.0).unwrap(), 0.0);
    assert!((neg_log_prob(0.5).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    for p in [0.0, -0.1, 1.5, f64::NAN] {
        assert!(matches!(neg_log_prob(p), Err(FasError::Numerical(_))));
    }
}

#[test]
fn adversarial_loss_at_fixed_outputs() {
    let mut g = Graph::<f64>::new();
    let sure = g.constant(Tensor::full(&[4], 60.0));
    let l = adversarial_loss(&mut g, sure);
    assert!(value(&g, l) < 1e-25);
    let half = g.constant(Tensor::zeros(&[4]));
    let l = adversarial_loss(&mut g, half);
    assert!((value(&g, l) - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn reconstruction_closed_forms() {
    let n = 5 * 6;
    let mut g = Graph::<f64>::new();
    let zeros = g.constant(Tensor::zeros(&[1, 3, 5, 6]));
    let ones = g.constant(Tensor::full(&[1, 3, 5, 6], 1.0));
    let s = reconstruction_loss(&mut g, zeros, ones, RecNorm::Sum);
    assert!((value(&g, s) - (3.0 * n as f64).sqrt()).abs() < 1e-12);
    let r = reconstruction_loss(&mut g, zeros, ones, RecNorm::Rms);
    assert!((value(&g, r) - 1.0).abs() < 1e-12);
    let same = reconstruction_loss(&mut g, ones, ones, RecNorm::Sum);
    assert_eq!(value(&g, same), 0.0);

    let a = g.constant(rand_images(2, 4, 1));
    let b = g.constant(rand_images(2, 4, 2));
    let ab = reconstruction_loss(&mut g, a, b, RecNorm::Sum);
    let ba = reconstruction_loss(&mut g, b, a, RecNorm::Sum);
    assert_eq!(value(&g, ab), value(&g, ba));
}

#[test]
fn blur_properties() {
    let x = Tensor::<f32>::zeros(&[3, 1024, 1024]);
    assert_eq!(blur_tensor(&x).unwrap().shape(), &[3, 512, 512]);
    let c = Tensor::<f64>::full(&[1, 3, 8, 8], 0.3);
    assert!(blur_tensor(&c).unwrap().data().iter().all(|v| (v - 0.3).abs() < 1e-15));
    assert!(matches!(blur_tensor(&Tensor::<f64>::zeros(&[1, 3, 7, 8])), Err(FasError::Shape(_))));

    let (x, y) = (rand_images::<f64>(2, 8, 3), rand_images::<f64>(2, 8, 4));
    let (a, b) = (0.7, -1.3);
    let lhs = blur_tensor(&x.zip_map(&y, |p, q| a * p + b * q)).unwrap();
    let (bx, by) = (blur_tensor(&x).unwrap(), blur_tensor(&y).unwrap());
    let rhs = bx.zip_map(&by, |p, q| a * p + b * q);
    assert!(lhs.data().iter().zip(rhs.data()).all(|(p, q)| (p - q).abs() < 1e-12));
}

#[test]
fn blurred_loss_ignores_two_by_two_checkerboard() {
    let x = rand_images::<f64>(1, 8, 5);
    let amp = 0.05;
    let mixed = Tensor::from_fn(&[1, 3, 8, 8], |i| {
        let (y, xx) = ((i / 8) % 8, i % 8);
        x.data()[i] + if (y + xx) % 2 == 0 { amp } else { -amp }
    });
    let mut g = Graph::new();
    let (a, b) = (g.constant(x.clone()), g.constant(mixed));
    let blurred = blurred_reconstruction_loss(&mut g, a, b, RecNorm::Sum);
    assert!(value(&g, blurred) < 1e-12);
    let plain = reconstruction_loss(&mut g, a, b, RecNorm::Sum);
    assert!(value(&g, plain) > 0.1);
    let id = blurred_reconstruction_loss(&mut g, a, a, RecNorm::Sum);
    assert_eq!(value(&g, id), 0.0);
}

#[test]
fn total_is_sum_of_parts() {
    let mut g = Graph::<f64>::new();
    let parts: Vec<_> = (1..=5).map(|v| g.scalar(v as f64)).collect();
    let t = total_loss(&mut g, [parts[0], parts[1], parts[2], parts[3], parts[4]]);
    assert_eq!(value(&g, t), 15.0);
    let zeros: Vec<_> = (0..5).map(|_| g.scalar(0.0)).collect();
    let t = total_loss(&mut g, [zeros[0], zeros[1], zeros[2], zeros[3], zeros[4]]);
    assert_eq!(value(&g, t), 0.0);

    let m = Pcgan::<f64>::new(small_cfg(16), 1).unwrap();
    let boxes = sample_patch_boxes(&m.cfg, 2, &mut rng::stream(0, "boxes", 0));
    let mut g = Graph::new();
    let xs = g.constant(rand_images(2, 16, 6));
    let xt = g.constant(rand_images(2, 16, 7));
    let l = m.generator_losses(&mut g, xs, xt, &boxes);
    let parts = [l.rec, l.rec_blur, l.adv_rec, l.adv_mix, l.pat].map(|v| value(&g, v));
    assert!(parts.iter().all(|v| *v >= 0.0 && v.is_finite()));
    assert_eq!(value(&g, l.total), parts[0] + parts[1] + parts[2] + parts[3] + parts[4]);
}

#[test]
fn generator_losses_leave_discriminators_without_gradient() {
    let m = Pcgan::<f64>::new(small_cfg(16), 2).unwrap();
    let boxes = sample_patch_boxes(&m.cfg, 2, &mut rng::stream(0, "boxes", 0));
    let mut g = Graph::new();
    let xs = g.constant(rand_images(2, 16, 8));
    let xt = g.constant(rand_images(2, 16, 9));
    let l = m.generator_losses(&mut g, xs, xt, &boxes);
    let grads = g.backward(l.total);
    for id in m.discriminator_ids() {
        assert!(grads.param(id).is_none_or(|t| t.max_abs() == 0.0));
    }
    assert!(m.generator_ids().iter().any(|&id| grads.param(id).is_some_and(|t| t.max_abs() > 0.0)));
}

#[test]
fn discriminator_loss_decreases_on_fixed_batch() {
    let m0 = Pcgan::<f64>::new(small_cfg(16), 3).unwrap();
    let mut m = m0.clone();
    let mut opt = Adam::new(m.cfg.adam, &m.store, m.discriminator_ids());
    let real = rand_images::<f64>(2, 16, 10);
    let fake = rand_images::<f64>(2, 16, 11).map(|v| v * 0.5);
    let boxes = sample_patch_boxes(&m.cfg, 2, &mut rng::stream(0, "boxes", 1));
    let eval = |m: &Pcgan<f64>| {
        let mut g = Graph::new();
        let (r, f) = (g.constant(real.clone()), g.constant(fake.clone()));
        let (ld, lp) = m.discriminator_loss(&mut g, r, f, f, &boxes, &boxes);
        let t = g.add(ld, lp);
        let v = g.value(t).item();
        (v, g.backward(t))
    };
    let mut trace = Vec::new();
    for _ in 0..50 {
        let (v, grads) = eval(&m);
        trace.push(v);
        opt.step(&mut m.store, &grads);
    }
    let last = eval(&m).0;
    let early = trace[..10].iter().sum::<f64>() / 10.0;
    let late = trace[40..].iter().sum::<f64>() / 10.0;
    assert!(late < early && last < trace[0], "{} -> {last} (early {early}, late {late})", trace[0]);
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let mut cfg = small_cfg(16);
    cfg.adam.lr = 0.0;
    let mut t = PcganTrainer::<f32>::new(cfg, 0).unwrap();
    let before = t.model.store.clone();
    t.train_step(&rand_images(2, 16, 1), &rand_images(2, 16, 2)).unwrap();
    assert_eq!(t.iteration, 1);
    for id in before.ids() {
        assert_eq!(before.get(id), t.model.store.get(id));
    }
}

#[test]
fn identical_pair_is_rejected() {
    let mut t = PcganTrainer::<f32>::new(small_cfg(16), 0).unwrap();
    let x = rand_images::<f32>(2, 16, 1);
    assert!(matches!(t.train_step(&x, &x), Err(FasError::Precondition(_))));
}

#[test]
fn reconstruction_drops_on_two_images() {
    let mut cfg = small_cfg(16);
    cfg.history_len = 1000;
    let mut t = PcganTrainer::<f32>::new(cfg, 4).unwrap();
    let data = rand_images::<f32>(2, 16, 12).map(|v| 0.25 + 0.5 * v);
    t.fit(&data, 500, |_, _| Ok(())).unwrap();
    let h: Vec<f64> = t.history.iter().map(|r| r.rec).collect();
    let tail = h[h.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(tail <= 0.5 * h[0], "rec {} -> {tail}", h[0]);
    assert_eq!(t.iteration, 500);
}

#[test]
fn history_is_bounded() {
    let mut cfg = small_cfg(16);
    cfg.history_len = 3;
    let mut t = PcganTrainer::<f32>::new(cfg, 0).unwrap();
    t.fit(&rand_images(3, 16, 1), 5, |_, _| Ok(())).unwrap();
    assert_eq!(t.history.len(), 3);
    let its: Vec<u64> = t.history.iter().map(|r| r.iteration).collect();
    assert_eq!(its, vec![3, 4, 5]);
}

#[test]
fn checkpoint_roundtrip_and_hash_guard() {
    let mut t = PcganTrainer::<f32>::new(small_cfg(16), 5).unwrap();
    t.fit(&rand_images(3, 16, 1), 2, |_, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.ckpt");
    t.save_checkpoint(&p, "abc", serde_json::Value::Null).unwrap();
    let back = PcganTrainer::<f32>::load_checkpoint(&p, "abc", false).unwrap();
    assert_eq!(back.iteration, 2);
    for id in t.model.store.ids() {
        assert_eq!(t.model.store.get(id), back.model.store.get(id));
    }
    assert!(matches!(PcganTrainer::<f32>::load_checkpoint(&p, "other", false), Err(FasError::Checkpoint(_))));
    assert!(PcganTrainer::<f32>::load_checkpoint(&p, "other", true).is_ok());

    // Two resumes from the same checkpoint follow the same trajectory.
    let data = rand_images::<f32>(3, 16, 1);
    let mut b = back;
    b.fit(&data, 4, |_, _| Ok(())).unwrap();
    let mut c = PcganTrainer::<f32>::load_checkpoint(&p, "abc", false).unwrap();
    c.fit(&data, 4, |_, _| Ok(())).unwrap();
    for id in b.model.store.ids() {
        assert_eq!(b.model.store.get(id), c.model.store.get(id));
    }
}

fn face(label: Label, seed: u64) -> FaceSample {
    let mut r = rng::stream(seed, "face", 0);
    FaceSample::new(Image::from_fn(16, 16, |_, _, _| r.random_range(0.0..1.0)), label, "A")
}

#[test]
fn conversions_set_labels_and_leave_inputs() {
    let m = Pcgan::<f32>::new(small_cfg(16), 0).unwrap();
    let (l, a) = (face(Label::Live, 1), face(Label::Attack, 2));
    let (l0, a0) = (l.clone(), a.clone());
    let inj = inject_artifact(&m, &l, &a).unwrap();
    assert_eq!((inj.label, inj.provenance), (Label::Attack, Provenance::Synthesized));
    let rem = remove_artifact(&m, &a, &l).unwrap();
    assert_eq!((rem.label, rem.provenance), (Label::Live, Provenance::Synthesized));
    assert_eq!((l, a), (l0, a0));
}

#[test]
fn conversion_label_misuse() {
    let m = Pcgan::<f32>::new(small_cfg(16), 0).unwrap();
    let (l, a) = (face(Label::Live, 1), face(Label::Attack, 2));
    assert!(matches!(inject_artifact(&m, &l, &l), Err(FasError::Misuse(_))));
    assert!(matches!(inject_artifact(&m, &a, &l), Err(FasError::Misuse(_))));
    assert!(matches!(remove_artifact(&m, &a, &a), Err(FasError::Misuse(_))));
    assert!(matches!(remove_artifact(&m, &l, &a), Err(FasError::Misuse(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn latent_shape_and_self_swap(k in 1usize..6, seed in 0u64..1000) {
        let s = 8 * k;
        let m = Pcgan::<f32>::new(small_cfg(s), seed).unwrap();
        let x = rand_images::<f32>(1, s, seed);
        let z = m.encode(&x).unwrap();
        prop_assert_eq!(z.z_pat.shape(), &[1, 8, s / 2, s / 2]);
        prop_assert_eq!(z.z_con.shape(), &[1, 8]);
        let rec = m.reconstruct(&x).unwrap();
        let swap = m.convert(&x, &x).unwrap();
        prop_assert!(rec.data().iter().zip(swap.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn blur_halves_any_even_side(h in 1usize..20, w in 1usize..20) {
        let x = Tensor::<f32>::zeros(&[2, 3, 2 * h, 2 * w]);
        let b = blur_tensor(&x).unwrap();
        prop_assert_eq!(b.shape(), &[2, 3, h, w]);
    }
}
