mod common;

use rand::Rng;
use tiqa::inconsistency::{
    analyze, decouple, gaussian_lowpass_mask, highlight, memory_threshold, InconsistencyConfig,
};
use tiqa::media::VideoTensor;
use tiqa::synth::{gen_pair, Pattern, SynthSpec};

use common::{random_video, rng};

#[test]
fn identical_videos_give_exact_zeros() {
    for (k, pattern) in common::PATTERNS.into_iter().enumerate() {
        let spec = SynthSpec { frames: 5, h: 32, w: 32, pattern, seed: k as u64, jitter_amp: 1.0, ..Default::default() };
        let clip = gen_pair(&spec).unwrap();
        let b = analyze(&clip.distorted, &clip.distorted, &InconsistencyConfig::default()).unwrap();
        assert!(b.vi.iter().flatten().all(|&v| v == 0.0));
        assert!(b.vi_coarse.iter().chain(&b.vi_fine).flatten().all(|&v| v == 0.0));
        assert!(b.frame_levels.iter().all(|&v| v == 0.0));
        assert_eq!(b.video_level, 0.0);
    }
}

#[test]
fn swapping_roles_keeps_maps() {
    let spec = SynthSpec { frames: 4, h: 32, w: 32, pattern: Pattern::NoiseTexture, jitter_amp: 1.5, ..Default::default() };
    let clip = gen_pair(&spec).unwrap();
    let cfg = InconsistencyConfig::default();
    let a = analyze(&clip.reference, &clip.distorted, &cfg).unwrap();
    let b = analyze(&clip.distorted, &clip.reference, &cfg).unwrap();
    assert_eq!(a.vi, b.vi);
    assert_eq!(a.frame_levels, b.frame_levels);
}

#[test]
fn decoupling_reconstructs_random_maps() {
    let mut r = rng(3);
    for _ in 0..100 {
        let (h, w) = (r.gen_range(4..=40), r.gen_range(4..=40));
        let frac = r.gen_range(0.01..0.49);
        let mask = gaussian_lowpass_mask(h, w, frac).unwrap();
        let scale = r.gen_range(0.1..10.0);
        let maps: Vec<Vec<f64>> = (0..2).map(|_| (0..h * w).map(|_| r.gen_range(0.0..scale)).collect()).collect();
        let (c, f) = decouple(&maps, &mask).unwrap();
        for ((m, c), f) in maps.iter().zip(&c).zip(&f) {
            let err = m.iter().zip(c).zip(f).map(|((m, c), f)| (c + f - m).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-5, "{h}x{w}: {err}");
        }
    }
}

#[test]
fn mask_at_dc_and_cutoff() {
    let mask = gaussian_lowpass_mask(40, 40, 0.05).unwrap();
    assert_eq!(mask.cutoff, 2.0);
    assert!((mask.at_frequency(0, 0) - 1.0).abs() <= 1e-12);
    assert!((mask.at_frequency(0, 2) - (-0.5f64).exp()).abs() <= 1e-12);
    assert!((mask.at_frequency(-2, 0) - (-0.5f64).exp()).abs() <= 1e-12);
}

#[test]
fn nyquist_checkerboard_is_mostly_fine() {
    let (h, w) = (16, 16);
    let map: Vec<f64> = (0..h * w).map(|i| ((i / w + i % w) % 2) as f64).collect();
    let (c, f) = decouple(&[map], &gaussian_lowpass_mask(h, w, 0.05).unwrap()).unwrap();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(norm(&f[0]) >= norm(&c[0]));
}

fn random_maps(r: &mut impl Rng, n: usize, len: usize) -> Vec<Vec<f64>> {
    let hi = r.gen_range(0.01..5.0);
    (0..n).map(|_| (0..len).map(|_| r.gen_range(0.0..hi)).collect()).collect()
}

#[test]
fn highlight_zero_maps_are_identity() {
    let mut r = rng(5);
    for _ in 0..50 {
        let v = random_video(&mut r, 4, 6, 7, 3);
        let out = highlight(&v, &vec![vec![0.0; 42]; 3]).unwrap();
        assert_eq!(out, v);
    }
}

#[test]
fn highlight_output_stays_in_unit_range() {
    let mut r = rng(6);
    for _ in 0..1000 {
        let (f, h, w, c) = (r.gen_range(2..=4), r.gen_range(2..=6), r.gen_range(2..=6), [1, 3][r.gen_range(0..2)]);
        let v: VideoTensor = random_video(&mut r, f, h, w, c);
        let maps = random_maps(&mut r, f - 1, h * w);
        let out = highlight(&v, &maps).unwrap();
        assert_eq!(out.dims(), v.dims());
        assert!(out.frames.iter().flat_map(|fr| &fr.data).all(|&s| (0.0..=1.0).contains(&s)));
    }
}

#[test]
fn threshold_endpoints_and_monotonicity() {
    let mut r = rng(7);
    for _ in 0..1000 {
        let levels: Vec<f64> = (0..r.gen_range(2..20)).map(|_| r.gen_range(0.0..3.0)).collect();
        let lo = levels.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = levels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            assert_eq!(memory_threshold(lo, lo, hi, 5.0, 4.0), 5.0);
            assert_eq!(memory_threshold(hi, lo, hi, 5.0, 4.0), 1.0);
        }
        let mut sorted = levels.clone();
        sorted.sort_by(f64::total_cmp);
        let ts: Vec<f64> = sorted.iter().map(|&l| memory_threshold(l, lo, hi, 5.0, 4.0)).collect();
        assert!(ts.windows(2).all(|p| p[1] <= p[0]), "{ts:?}");
        assert!(ts.iter().all(|t| (1.0..=5.0).contains(t)));
    }
}
