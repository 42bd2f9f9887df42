use ospatialnet::metrics::*;
use ospatialnet::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `reference + e` with `e` orthogonal to the reference (Gram-Schmidt) and
/// `|e|^2 = |reference|^2 / 10^(db/10)`.
fn with_orthogonal_noise(reference: &[f64], db: f64, seed: u64) -> Vec<f64> {
    let mut e = noise(reference.len(), seed);
    let k = dot(&e, reference) / dot(reference, reference);
    e.iter_mut().zip(reference).for_each(|(v, r)| *v -= k * r);
    let target = dot(reference, reference) / 10f64.powf(db / 10.0);
    let g = (target / dot(&e, &e)).sqrt();
    reference.iter().zip(&e).map(|(r, v)| r + g * v).collect()
}

#[test]
fn si_sdr_perfect_and_scaled_estimates_are_infinite() {
    let r = noise(1000, 1);
    assert_eq!(si_sdr(&r, &r).unwrap(), f64::INFINITY);
    let r2: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
    assert_eq!(si_sdr(&r2, &r).unwrap(), f64::INFINITY);
}

#[test]
fn si_sdr_orthogonal_noise_is_ten_db() {
    for seed in 0..5 {
        let r = noise(8000, 10 + seed);
        let est = with_orthogonal_noise(&r, 10.0, 20 + seed);
        let v = si_sdr(&est, &r).unwrap();
        assert!((v - 10.0).abs() <= 1e-6, "{}", v);
    }
}

#[test]
fn snr_examples() {
    let r = noise(1000, 2);
    assert_eq!(snr(&r, &r).unwrap(), f64::INFINITY);
    let n = with_orthogonal_noise(&r, 0.0, 3);
    let v = snr(&n, &r).unwrap();
    assert!(v.abs() < 1e-9, "{}", v);
    // not scale invariant: |ref - 2 ref| = |ref|
    let r2: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
    assert!(snr(&r2, &r).unwrap().abs() < 1e-12);
}

#[test]
fn invalid_inputs() {
    let z = vec![0.0; 10];
    let r = noise(10, 4);
    assert!(matches!(si_sdr(&r, &z), Err(Error::Contract(_))));
    assert!(matches!(snr(&r, &z), Err(Error::Contract(_))));
    assert!(matches!(si_sdr(&r[..9], &r), Err(Error::Contract(_))));
    assert!(matches!(
        segmental(Metric::SiSdr, &r, &r, 8000, 1.0, 1.0),
        Err(Error::Length { .. })
    ));
}

proptest! {
    #[test]
    fn si_sdr_is_scale_invariant(seed in 0u64..1000, exp in -8i32..8, c in 0.01f64..100.0, neg in any::<bool>()) {
        let r = noise(257, seed);
        let est: Vec<f64> = noise(257, seed + 1).iter().zip(&r).map(|(a, b)| 0.3 * a + b).collect();
        let base = si_sdr(&est, &r).unwrap();
        let sign = if neg { -1.0 } else { 1.0 };
        // power-of-two factors scale every intermediate exactly
        let p = sign * 2f64.powi(exp);
        let ep: Vec<f64> = est.iter().map(|v| v * p).collect();
        prop_assert_eq!(si_sdr(&ep, &r).unwrap(), base);
        let ec: Vec<f64> = est.iter().map(|v| v * c * sign).collect();
        prop_assert!((si_sdr(&ec, &r).unwrap() - base).abs() < 1e-9);
    }

    #[test]
    fn segment_count_formula(secs in 1usize..80, win in 1usize..6, hop in 1usize..4) {
        let n = secs * 100;
        let x = noise(n, 5);
        let res = segmental(Metric::Snr, &x, &x, 100, win as f64, hop as f64);
        if secs < win {
            prop_assert!(res.is_err());
        } else {
            prop_assert_eq!(res.unwrap().len(), (secs - win) / hop + 1);
        }
    }
}

#[test]
fn sixty_four_seconds_give_sixty_one_segments() {
    let r = noise(64 * 8000, 6);
    let est = with_orthogonal_noise(&r, 5.0, 7);
    let s = segmental(Metric::SiSdr, &est, &r, 8000, 4.0, 1.0).unwrap();
    assert_eq!(s.len(), 61);
    assert_eq!(s.starts_s[60], 60.0);
    let csv = s.to_csv();
    assert_eq!(csv.lines().count(), 62);
    assert!(csv.starts_with("segment_start_s,score_db\n0,"));
}

#[test]
fn single_window_equals_global_metric() {
    let r = noise(16000, 8);
    let est = with_orthogonal_noise(&r, 7.0, 9);
    let s = segmental(Metric::SiSdr, &est, &r, 8000, 2.0, 1.0).unwrap();
    assert_eq!(s.len(), 1);
    assert_eq!(s.scores[0], si_sdr(&est, &r).unwrap());
    assert_eq!(s.mean(), s.scores[0]);
}

#[test]
fn periodic_signals_score_equally_in_every_segment() {
    let period: Vec<f64> = noise(800, 10);
    let r: Vec<f64> = period.iter().cycle().take(8000).copied().collect();
    let e: Vec<f64> = r
        .iter()
        .enumerate()
        .map(|(i, v)| v + 0.1 * period[(i * 7) % 800])
        .collect();
    let s = segmental(Metric::Snr, &e, &r, 800, 2.0, 1.0).unwrap();
    assert_eq!(s.len(), 9);
    for v in &s.scores {
        assert!((v - s.scores[0]).abs() < 1e-9);
    }
    assert!((s.mean() - s.scores[0]).abs() < 1e-9);
}

#[test]
fn csv_and_mean_use_the_sentinel() {
    let r = noise(3000, 11);
    let s = segmental(Metric::SiSdr, &r, &r, 1000, 1.0, 1.0).unwrap();
    assert!(s.scores.iter().all(|v| v.is_infinite()));
    assert_eq!(s.mean(), SENTINEL_DB);
    assert!(s.to_csv().contains("0,300.000000"));
    let avg = SegmentalScore::average(&[s.clone(), s]).unwrap();
    assert_eq!(avg.scores, vec![300.0; 3]);
}

#[test]
fn f32_inputs_are_scored_in_double_precision() {
    let r = noise(4000, 12);
    let est = with_orthogonal_noise(&r, 10.0, 13);
    let (r32, e32): (Vec<f32>, Vec<f32>) = (
        r.iter().map(|&v| v as f32).collect(),
        est.iter().map(|&v| v as f32).collect(),
    );
    assert!((si_sdr(&e32, &r32).unwrap() - 10.0).abs() < 1e-4);
    assert_eq!("SI-SDR".parse::<Metric>().unwrap(), Metric::SiSdr);
    assert!("pesq".parse::<Metric>().is_err());
}
