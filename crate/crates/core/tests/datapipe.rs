use std::path::{Path, PathBuf};

use fas::artifactviz::band_energy;
use fas::datapipe::*;
use fas::image::Image;
use fas::rng;
use fas::FasError;
use proptest::prelude::*;

fn entry_line(path: &str, label: &str) -> String {
    format!("{path}\t{label}\tA\t-\tid0\toriginal\t-\t-\t-\t-")
}

fn sample_manifest(counts: (usize, usize), tag: &str) -> DatasetManifest {
    let mut m = DatasetManifest::new(tag, "/data");
    for (label, n) in [(Label::Live, counts.0), (Label::Attack, counts.1)] {
        for i in 0..n {
            m.entries.push(ManifestEntry {
                path: PathBuf::from(format!("{tag}_{}_{i}.png", label.as_str())),
                label,
                domain: "A".into(),
                attack_type: None,
                identity: None,
                provenance: Provenance::Original,
                bbox: None,
            });
        }
    }
    m
}

#[test]
fn manifest_counts_labels() {
    let text: Vec<String> =
        [("a.png", "live"), ("b.png", "attack"), ("c.png", "live"), ("d.png", "attack")].iter().map(|(p, l)| entry_line(p, l)).collect();
    let m = parse_manifest(&text.join("\n"), Path::new("m.tsv"), "m", PathBuf::from("/x")).unwrap();
    assert_eq!(m.len(), 4);
    assert_eq!(m.label_counts(), LabelCounts { live: 2, attack: 2 });
    assert_eq!(m.entries[2].path, PathBuf::from("c.png"));
}

#[test]
fn empty_manifest() {
    let m = parse_manifest("", Path::new("m.tsv"), "m", PathBuf::from("/x")).unwrap();
    assert!(m.is_empty());
}

#[test]
fn unknown_label_names_the_line() {
    let text = format!("{}\n{}", entry_line("a.png", "live"), entry_line("b.png", "genuine"));
    match parse_manifest(&text, Path::new("m.tsv"), "m", PathBuf::from("/x")) {
        Err(FasError::Label { line, label, .. }) => {
            assert_eq!(line, 2);
            assert_eq!(label, "genuine");
        }
        other => panic!("expected label error, got {other:?}"),
    }
}

#[test]
fn malformed_line_is_a_parse_error() {
    let text = format!("{}\nonly\ttwo", entry_line("a.png", "live"));
    assert!(matches!(
        parse_manifest(&text, Path::new("m.tsv"), "m", PathBuf::from("/x")),
        Err(FasError::Parse { line: 2, .. })
    ));
}

#[test]
fn missing_manifest_is_io_error() {
    assert!(matches!(load_manifest(Path::new("/nonexistent/m.tsv")), Err(FasError::Io { .. })));
}

#[test]
fn duplicate_paths_rejected() {
    let text = format!("{}\n{}", entry_line("a.png", "live"), entry_line("a.png", "attack"));
    assert!(parse_manifest(&text, Path::new("m.tsv"), "m", PathBuf::from("/x")).is_err());
}

fn big_sample(bbox: BBox) -> FaceSample {
    let img = Image::from_fn(1024, 1024, |c, y, x| ((x + 2 * y + c) % 256) as f32 / 255.0);
    let mut s = FaceSample::new(img, Label::Live, "A");
    s.bbox = Some(bbox);
    s
}

#[test]
fn crop_face_padding_06() {
    let b = BBox { x: 100, y: 100, w: 100, h: 100 };
    assert_eq!(clipped_region(b, 0.6, 1024, 1024).unwrap(), (40, 40, 260, 260));
    let out = crop_face(&big_sample(b), 0.6, 224).unwrap();
    assert_eq!((out.image.height(), out.image.width()), (224, 224));
}

#[test]
fn crop_face_zero_padding_is_the_bbox() {
    let b = BBox { x: 100, y: 120, w: 50, h: 50 };
    assert_eq!(clipped_region(b, 0.0, 1024, 1024).unwrap(), (100, 120, 150, 170));
}

#[test]
fn crop_face_clips_at_corner() {
    let b = BBox { x: 0, y: 0, w: 100, h: 100 };
    assert_eq!(clipped_region(b, 0.6, 1024, 1024).unwrap(), (0, 0, 160, 160));
    let out = crop_face(&big_sample(b), 0.6, 224).unwrap();
    assert_eq!((out.image.height(), out.image.width()), (224, 224));
}

#[test]
fn crop_face_errors() {
    let mut s = big_sample(BBox { x: 2000, y: 0, w: 10, h: 10 });
    assert!(matches!(crop_face(&s, 0.6, 224), Err(FasError::Geometry(_))));
    s.bbox = None;
    assert!(matches!(crop_face(&s, 0.6, 224), Err(FasError::Precondition(_))));
}

#[test]
fn patch_random_02_10_side_range() {
    let spec = CropSpec { strategy: CropStrategy::Random, scale_min: 0.2, scale_max: 1.0, output_size: 224 };
    let mut r = rng::stream(0, "t", 0);
    for _ in 0..500 {
        let (x0, y0, side) = patch_window(224, 224, &spec, &mut r).unwrap();
        assert!((45..=224).contains(&side));
        assert!(x0 + side <= 224 && y0 + side <= 224);
    }
}

#[test]
fn patch_center_full_frame_is_identity() {
    let img = Image::from_fn(224, 224, |c, y, x| ((x * 3 + y + c) % 97) as f32 / 96.0);
    let spec = CropSpec { strategy: CropStrategy::Center, scale_min: 1.0, scale_max: 1.0, output_size: 224 };
    let out = extract_patch(&img, &spec, &mut rng::stream(0, "t", 0)).unwrap();
    assert_eq!(out, img);
}

#[test]
fn patch_left_up_half() {
    let spec = CropSpec { strategy: CropStrategy::LeftUp, scale_min: 0.5, scale_max: 0.5, output_size: 224 };
    assert_eq!(patch_window(224, 224, &spec, &mut rng::stream(0, "t", 0)).unwrap(), (0, 0, 112));
}

#[test]
fn tiny_patch_rejected() {
    let spec = CropSpec { strategy: CropStrategy::Random, scale_min: 0.1, scale_max: 0.1, output_size: 16 };
    assert!(matches!(patch_window(64, 64, &spec, &mut rng::stream(0, "t", 0)), Err(FasError::Geometry(_))));
}

#[test]
fn merge_examples() {
    let o = sample_manifest((10, 10), "o");
    let m = merge_sets(&o, &sample_manifest((10, 10), "s")).unwrap();
    assert_eq!(m.label_counts(), LabelCounts { live: 20, attack: 20 });
    assert_eq!(merge_sets(&o, &sample_manifest((0, 0), "s")).unwrap(), o);
    assert!(matches!(merge_sets(&o, &sample_manifest((10, 0), "s")), Err(FasError::Merge(_))));
}

#[test]
fn benchmark_is_deterministic() {
    let mut cfg = BenchmarkConfig::default();
    for d in &mut cfg.domains {
        d.identities = 3;
    }
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = make_synthetic_benchmark(&cfg, 7, a.path(), &["seed=7".into()]).unwrap();
    let mb = make_synthetic_benchmark(&cfg, 7, b.path(), &["seed=7".into()]).unwrap();
    assert_eq!(ma.entries, mb.entries);
    assert_eq!(ma.len(), 2 * (3 * 2 * 2));
    for e in &ma.entries {
        assert_eq!(std::fs::read(a.path().join(&e.path)).unwrap(), std::fs::read(b.path().join(&e.path)).unwrap());
    }
    assert_eq!(
        std::fs::read(a.path().join("manifest.tsv")).unwrap(),
        std::fs::read(b.path().join("manifest.tsv")).unwrap()
    );
    let back = load_manifest(&a.path().join("manifest.tsv")).unwrap();
    assert_eq!(back.entries, ma.entries);
    let loaded = back.load_samples().unwrap();
    assert!(loaded.iter().all(|s| s.image.in_unit_range()));
}

#[test]
fn benchmark_needs_two_domains() {
    let mut cfg = BenchmarkConfig::default();
    cfg.domains.truncate(1);
    let d = tempfile::tempdir().unwrap();
    assert!(matches!(make_synthetic_benchmark(&cfg, 0, d.path(), &[]), Err(FasError::Config(_))));
}

/// Largest non-DC bin of a direct 2-D DFT, as a radial frequency.
fn brute_peak(v: &[f64], n: usize) -> f64 {
    let mut best = (0.0, 0.0);
    for ky in 0..n {
        for kx in 0..n {
            if kx == 0 && ky == 0 {
                continue;
            }
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..n {
                for x in 0..n {
                    let a = -std::f64::consts::TAU * ((ky * y + kx * x) as f64) / n as f64;
                    re += v[y * n + x] * a.cos();
                    im += v[y * n + x] * a.sin();
                }
            }
            let m = re * re + im * im;
            if m > best.0 {
                let f = |k: usize| if k <= n / 2 { k as f64 } else { k as f64 - n as f64 } / n as f64;
                best = (m, (f(ky).powi(2) + f(kx).powi(2)).sqrt());
            }
        }
    }
    best.1
}

#[test]
fn attack_residual_peaks_at_overlay_frequency() {
    let cfg = BenchmarkConfig::default();
    for dom in &cfg.domains {
        let s = render_domain(&cfg, dom, 3, 0..1);
        let atk = s.iter().find(|s| s.label == Label::Attack).unwrap();
        let (a, c) = (atk.image.luma(), atk.clean.luma());
        let resid: Vec<f64> = a.iter().zip(&c).map(|(x, y)| x - y).collect();
        let f = brute_peak(&resid, cfg.image_size);
        assert!((f - dom.overlay_freq).abs() <= 1.5 / cfg.image_size as f64, "{}: peak {f}", dom.name);
    }
}

#[test]
fn live_band_energy_far_below_attack() {
    let cfg = BenchmarkConfig::default();
    for dom in &cfg.domains {
        for s in render_domain(&cfg, dom, 1, 0..5).iter().filter(|s| s.label == Label::Attack) {
            let live = band_energy(&s.clean, dom.overlay_freq);
            let atk = band_energy(&s.image, dom.overlay_freq);
            assert!(atk >= 10.0 * live, "{}: {atk} vs {live}", dom.name);
        }
    }
}

#[test]
fn disjoint_id_ranges_give_distinct_people() {
    let cfg = BenchmarkConfig::default();
    let d = &cfg.domains[0];
    let a = render_domain(&cfg, d, 0, 0..3);
    let b = render_domain(&cfg, d, 0, 3..6);
    let whole = render_domain(&cfg, d, 0, 0..6);
    for (x, y) in a.iter().chain(&b).zip(&whole) {
        assert_eq!(x.image, y.image);
    }
    assert!(a.iter().all(|x| b.iter().all(|y| x.identity != y.identity)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn patches_have_output_shape_and_range(
        h in 16usize..80, w in 16usize..80, lo in 0.5f64..1.0, span in 0.0f64..0.5,
        strat in 0usize..3, out in 4usize..40, seed in any::<u64>()
    ) {
        let img = Image::from_fn(h, w, |c, y, x| ((x * 7 + y * 3 + c * 11) % 31) as f32 / 30.0);
        let spec = CropSpec {
            strategy: [CropStrategy::Random, CropStrategy::Center, CropStrategy::LeftUp][strat],
            scale_min: lo,
            scale_max: (lo + span).min(1.0),
            output_size: out,
        };
        let p = extract_patch(&img, &spec, &mut rng::stream(seed, "p", 0)).unwrap();
        prop_assert_eq!((p.height(), p.width()), (out, out));
        prop_assert!(p.in_unit_range());
        let again = extract_patch(&img, &spec, &mut rng::stream(seed, "p", 0)).unwrap();
        prop_assert_eq!(p, again);
    }

    #[test]
    fn crop_window_stays_inside(
        x in -50i64..300, y in -50i64..300, bw in 1i64..200, bh in 1i64..200, pad in 0.0f64..2.0,
        w in 32usize..300, h in 32usize..300
    ) {
        let b = BBox { x, y, w: bw, h: bh };
        if let Ok((x0, y0, x1, y1)) = clipped_region(b, pad, w, h) {
            prop_assert!(x0 < x1 && y0 < y1);
            prop_assert!(x1 <= w && y1 <= h);
        }
    }

    #[test]
    fn symmetric_merge_keeps_ratio(l in 1usize..30, a in 1usize..30) {
        let o = sample_manifest((l, a), "o");
        let m = merge_sets(&o, &sample_manifest((l, a), "s")).unwrap();
        prop_assert_eq!(m.label_counts(), LabelCounts { live: 2 * l, attack: 2 * a });
        prop_assert_eq!(m.len(), o.len() * 2);
    }
}
