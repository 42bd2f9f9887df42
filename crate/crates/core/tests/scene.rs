use ospatialnet::scene::rir::{add_delayed, SINC_HALF_WIDTH};
use ospatialnet::scene::trajectory::render_blocks;
use ospatialnet::scene::*;
use ospatialnet::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn direct_convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; x.len() + h.len() - 1];
    for (i, a) in x.iter().enumerate() {
        for (j, b) in h.iter().enumerate() {
            y[i + j] += a * b;
        }
    }
    y
}

fn argmax(x: &[f64]) -> usize {
    (0..x.len())
        .max_by(|&a, &b| x[a].abs().partial_cmp(&x[b].abs()).unwrap())
        .unwrap()
}

// ------------------------------------------------------------- room

#[test]
fn sabine_hand_example() {
    let room = Room::new([6.0, 5.0, 3.0], 0.5).unwrap();
    assert_eq!(room.volume(), 90.0);
    assert_eq!(room.surface(), 126.0);
    let alpha = room.absorption().unwrap();
    assert!((alpha - 0.161 * 90.0 / (0.5 * 126.0)).abs() < 1e-15);
    assert!((alpha - 0.2300).abs() < 5e-5);
    assert!((room.reflection().unwrap() - 0.77f64.sqrt()).abs() < 1e-12);
    assert!((room.reflection().unwrap() - 0.8775).abs() < 5e-5);
}

#[test]
fn sabine_limits_and_inverse() {
    let dims = [7.3, 4.1, 3.2];
    let long = Room::new(dims, 1e9).unwrap();
    assert!(long.absorption().unwrap() < 1e-9);
    assert!(1.0 - long.reflection().unwrap() < 1e-9);
    for rt60 in [0.2, 0.37, 1.0] {
        let a = Room::new(dims, rt60).unwrap().absorption().unwrap();
        assert!((Room::sabine_rt60(dims, a) - rt60).abs() < 1e-9);
    }
    let dead = Room::new([4.0, 4.0, 3.0], 0.02).unwrap();
    assert!(matches!(dead.absorption(), Err(Error::Config(_))));
}

// -------------------------------------------------------------- RIR

#[test]
fn order_zero_is_a_single_scaled_tap() {
    let room = Room::new([10.0, 8.0, 4.0], 0.4).unwrap();
    let mic = [2.0, 3.0, 1.5];
    let src = [2.0 + 3.43, 3.0, 1.5];
    let h = ism_rir(&room, 0.8, src, mic, &RirOptions::direct(8000, 200)).unwrap();
    let g = 1.0 / (4.0 * std::f64::consts::PI * 3.43);
    assert_eq!(argmax(&h), 80);
    assert!((h[80] - g).abs() < 1e-12, "{} vs {}", h[80], g);
    let rest: f64 = h
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != 80)
        .map(|(_, v)| v.abs())
        .sum();
    assert!(rest < 1e-12);
}

#[test]
fn fractional_delay_interpolates_band_limited_impulse() {
    let mut h = vec![0.0; 64];
    add_delayed(&mut h, 20.25, 1.0);
    // windowed sinc preserves DC gain up to window ripple
    let dc: f64 = h.iter().sum();
    assert!((dc - 1.0).abs() < 0.02, "{}", dc);
    assert!(h[20] > h[21] && h[21] > 0.0);
    assert_eq!(h[..20 - SINC_HALF_WIDTH].iter().filter(|v| **v != 0.0).count(), 0);
}

#[test]
fn zero_reflection_equals_order_zero() {
    let room = Room::new([6.0, 5.0, 3.0], 0.3).unwrap();
    let (src, mic) = ([1.3, 3.7, 1.6], [3.1, 2.4, 1.2]);
    let full = RirOptions {
        sample_rate: 8000,
        max_order: 30,
        len: 1500,
    };
    let a = ism_rir(&room, 0.0, src, mic, &full).unwrap();
    let b = ism_rir(&room, 0.0, src, mic, &RirOptions::direct(8000, 1500)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn positions_outside_the_room_are_rejected() {
    let room = Room::new([6.0, 5.0, 3.0], 0.3).unwrap();
    let opts = RirOptions::direct(8000, 100);
    assert!(matches!(
        ism_rir(&room, 0.5, [6.0, 1.0, 1.0], [1.0, 1.0, 1.0], &opts),
        Err(Error::Contract(_))
    ));
    assert!(matches!(
        ism_rir(&room, 0.5, [1.0, 1.0, 1.0], [1.0, -0.1, 1.0], &opts),
        Err(Error::Contract(_))
    ));
}

/// Time at which the Schroeder backward-integrated energy decay falls
/// 60 dB below its start, by linear fit of the -5..-35 dB range.
fn schroeder_t60(h: &[f64], fs: f64) -> f64 {
    let mut edc = vec![0.0; h.len()];
    let mut acc = 0.0;
    for i in (0..h.len()).rev() {
        acc += h[i] * h[i];
        edc[i] = acc;
    }
    let db: Vec<f64> = edc.iter().map(|e| 10.0 * (e / edc[0]).log10()).collect();
    let pts: Vec<(f64, f64)> = db
        .iter()
        .enumerate()
        .filter(|&(_, &d)| (-35.0..=-5.0).contains(&d))
        .map(|(i, &d)| (i as f64 / fs, d))
        .collect();
    let n = pts.len() as f64;
    let (mx, my) = (
        pts.iter().map(|p| p.0).sum::<f64>() / n,
        pts.iter().map(|p| p.1).sum::<f64>() / n,
    );
    let slope =
        pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    -60.0 / slope
}

#[test]
fn schroeder_decay_matches_rt60() {
    for (dims, rt60) in [([6.0, 5.0, 3.0], 0.3), ([5.0, 4.0, 3.0], 0.4), ([8.0, 6.0, 3.5], 0.25)] {
        let room = Room::new(dims, rt60).unwrap();
        let fs = 8000.0;
        let opts = RirOptions {
            sample_rate: 8000,
            max_order: 40,
            len: (2.0 * rt60 * fs) as usize,
        };
        let h = ism_rir(
            &room,
            room.reflection().unwrap(),
            [1.5, 1.2, 1.4],
            [dims[0] - 2.0, dims[1] - 1.5, 1.5],
            &opts,
        )
        .unwrap();
        let t60 = schroeder_t60(&h, fs);
        assert!((t60 / rt60 - 1.0).abs() <= 0.3, "rt60 {} measured {}", rt60, t60);
    }
}

#[test]
fn fft_convolution_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (n, m) in [(1, 1), (5, 40), (100, 33), (1000, 777)] {
        let x = synthetic_speech(&mut rng, n, 8000);
        let h: Vec<f64> = (0..m).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.5).collect();
        let a = fft_convolve(&x, &h);
        let b = direct_convolve(&x, &h);
        assert_eq!(a.len(), b.len());
        let err = a.iter().zip(&b).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "{} {} {}", n, m, err);
    }
}

// ------------------------------------------------------ trajectories

proptest! {
    #[test]
    fn trapezium_windows_sum_to_one(n in 1usize..5000, hop in 1usize..600, frac in 0.0f64..=1.0) {
        let cf = ((hop as f64 * frac).round() as usize).min(hop);
        let wins = trapezium_windows(n, hop, cf).unwrap();
        let mut sum = vec![0.0; n];
        for (start, w) in &wins {
            prop_assert!(start + w.len() <= n);
            for (i, v) in w.iter().enumerate() {
                prop_assert!((0.0..=1.0).contains(v));
                sum[start + i] += v;
            }
        }
        for s in sum {
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn crossfade_longer_than_hop_is_rejected() {
    assert!(matches!(trapezium_windows(100, 10, 11), Err(Error::Config(_))));
}

fn square_loop() -> Trajectory {
    Trajectory {
        waypoints: vec![[2.0, 2.0, 1.5], [4.0, 2.0, 1.5], [4.0, 4.0, 1.5], [2.0, 4.0, 1.5]],
        speed: 0.2,
        offset: 0.5,
        direction: 1.0,
    }
}

#[test]
fn loop_distance_travelled() {
    let t = square_loop();
    assert_eq!(t.perimeter(), 8.0);
    assert!((t.travelled(10.0) - 2.0).abs() < 1e-12);
    let p = t.position(10.0);
    assert!(distance(p, [4.0, 2.5, 1.5]) < 1e-12, "{:?}", p);
    // wraps around the loop
    assert!(distance(t.position(40.0), t.position(0.0)) < 1e-12);
    let back = Trajectory { direction: -1.0, ..t };
    assert!(distance(back.position(5.0), [2.0, 2.5, 1.5]) < 1e-12);
}

fn toy_setup() -> (Room, Vec<Point>, Vec<f64>) {
    let room = Room::new([6.0, 5.0, 3.0], 0.2).unwrap();
    let mics = vec![[3.0, 3.2, 1.2], [3.2, 3.2, 1.2]];
    let dry = synthetic_speech(&mut ChaCha8Rng::seed_from_u64(9), 8000, 8000);
    (room, mics, dry)
}

#[test]
fn static_source_is_one_convolution() {
    let (room, mics, dry) = toy_setup();
    let src = [1.5, 1.5, 1.6];
    let opts = RenderOptions::new(&room, 8000, 1024);
    let r = render_moving(&dry, &Trajectory::fixed(src), &room, &mics, &opts).unwrap();
    let h = ism_rir(&room, room.reflection().unwrap(), src, mics[1], &opts.rir).unwrap();
    let mut y = fft_convolve(&dry, &h);
    y.truncate(dry.len());
    assert_eq!(r.reverberant[1], y);
    // the block path collapses to the same signal
    let b = render_blocks(
        &dry,
        &Trajectory::fixed(src),
        &room,
        room.reflection().unwrap(),
        &mics,
        &opts,
    )
    .unwrap();
    let err = b.reverberant[1]
        .iter()
        .zip(&y)
        .map(|(u, v)| (u - v).abs())
        .fold(0.0, f64::max);
    assert!(err < 1e-12, "{}", err);
}

#[test]
fn direct_target_is_aligned_with_the_direct_path() {
    let (room, mics, dry) = toy_setup();
    let traj = Trajectory::fixed([2.0, 2.0, 1.5]);
    let opts = RenderOptions::new(&room, 8000, 512);
    let r = render_moving(&dry, &traj, &room, &mics, &opts).unwrap();
    let d0 = distance(traj.position(0.0), mics[0]) / SOUND_SPEED * 8000.0;
    let xcorr = |a: &[f64], b: &[f64], lag: usize| a.iter().zip(&b[lag..]).map(|(x, y)| x * y).sum::<f64>();
    let lags: Vec<f64> = (0..200).map(|l| xcorr(&dry, &r.direct, l)).collect();
    assert!((argmax(&lags) as f64 - d0).abs() <= 1.5, "{} vs {}", argmax(&lags), d0);
    let lags: Vec<f64> = (0..200).map(|l| xcorr(&dry, &r.reverberant[0], l)).collect();
    assert!((argmax(&lags) as f64 - d0).abs() <= 1.5);
}

#[test]
fn speaker_leaving_the_room_is_an_error() {
    let (room, mics, dry) = toy_setup();
    let mut traj = square_loop();
    traj.waypoints[1][0] = 7.0;
    let opts = RenderOptions::new(&room, 8000, 512);
    assert!(matches!(
        render_moving(&dry, &traj, &room, &mics, &opts),
        Err(Error::Contract(_))
    ));
}

// ------------------------------------------------------------ noise

#[test]
fn mix_noise_hits_requested_snr() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let clean = vec![
        synthetic_speech(&mut rng, 4000, 8000),
        synthetic_speech(&mut rng, 4000, 8000),
    ];
    let noise = diffuse_noise(&mut rng, &[[1.0, 1.0, 1.0], [1.1, 1.0, 1.0]], 4000, 8000).unwrap();
    for snr in [-5.0, 0.0, 3.7, 10.0] {
        let (mix, scaled) = mix_noise(&clean, &noise, snr).unwrap();
        assert!((snr_db(&clean[0], &scaled[0]) - snr).abs() < 1e-6);
        assert!((mix[1][7] - clean[1][7] - scaled[1][7]).abs() < 1e-15);
    }
    let (_, s0) = mix_noise(&clean, &noise, 0.0).unwrap();
    assert!((energy(&s0[0]) / energy(&clean[0]) - 1.0).abs() < 1e-9);
    let (_, s5) = mix_noise(&clean, &noise, -5.0).unwrap();
    assert!((energy(&s5[0]) / energy(&clean[0]) - 10f64.powf(0.5)).abs() < 1e-9);
    let silent = vec![vec![0.0; 4000]; 2];
    assert!(matches!(mix_noise(&silent, &noise, 0.0), Err(Error::Contract(_))));
    assert!(matches!(mix_noise(&clean, &noise[..1], 0.0), Err(Error::Contract(_))));
}

#[test]
fn diffuse_noise_follows_sinc_coherence() {
    let mics = [[1.0, 1.0, 1.0], [1.1, 1.0, 1.0]];
    let n = 8000 * 20;
    let x = diffuse_noise(&mut ChaCha8Rng::seed_from_u64(5), &mics, n, 8000).unwrap();
    assert_eq!(x[0].len(), n);
    // short-time cross spectra with 256-sample frames at bins 8, 40, 80
    let stft = ospatialnet::stft::Stft::<f64>::new(Default::default()).unwrap();
    let mut a = vec![Default::default(); 129];
    let mut b = vec![Default::default(); 129];
    for bin in [8usize, 40, 80] {
        let (mut sab, mut saa, mut sbb) = (ospatialnet::stft::Complex::new(0.0, 0.0), 0.0, 0.0);
        for t in (0..n - 256).step_by(128) {
            stft.forward_frame(&x[0][t..t + 256], &mut a);
            stft.forward_frame(&x[1][t..t + 256], &mut b);
            sab += a[bin] * b[bin].conj();
            saa += a[bin].norm_sqr();
            sbb += b[bin].norm_sqr();
        }
        let coh = sab.re / (saa * sbb).sqrt();
        let w = 2.0 * std::f64::consts::PI * bin as f64 * 8000.0 / 256.0 * 0.1 / SOUND_SPEED;
        let expect = w.sin() / w;
        assert!((coh - expect).abs() < 0.08, "bin {}: {} vs {}", bin, coh, expect);
    }
}

#[test]
fn synthetic_speech_is_normalized_and_bursty() {
    let a = synthetic_speech(&mut ChaCha8Rng::seed_from_u64(6), 32000, 8000);
    let b = synthetic_speech(&mut ChaCha8Rng::seed_from_u64(6), 32000, 8000);
    assert_eq!(a, b);
    assert!(((energy(&a) / 32000.0).sqrt() - 0.1).abs() < 1e-12);
    let silent_frames = a.chunks(400).filter(|c| energy(c) < 1e-12).count();
    assert!(silent_frames >= 2, "{}", silent_frames);
}

// ---------------------------------------------------------- dataset

#[test]
fn chime3_geometry_and_subset() {
    let g = ArrayGeometry::chime3();
    assert_eq!(g.len(), 6);
    assert!(g.subset(&[0, 2]).unwrap().positions[1][0] - g.positions[0][0] > 0.19);
    assert!(matches!(g.subset(&[6]), Err(Error::Config(_))));
    let placed = g.place([3.0, 3.0, 1.2], std::f64::consts::FRAC_PI_2);
    assert!((distance(placed[0], placed[2]) - distance(g.positions[0], g.positions[2])).abs() < 1e-12);
}

#[test]
fn generator_is_reproducible_and_order_independent() {
    let cfg = SceneConfig {
        duration_s: 1.0,
        ..SceneConfig::toy()
    };
    let a = SceneGenerator::new(cfg.clone(), 42).unwrap();
    let b = SceneGenerator::new(cfg.clone(), 42).unwrap();
    let s3 = a.scene(3).unwrap();
    b.scene(0).unwrap();
    let t3 = b.scene(3).unwrap();
    assert_eq!(s3.mixture, t3.mixture);
    assert_eq!(s3.target, t3.target);
    assert_eq!(s3.spec, t3.spec);
    let c = SceneGenerator::new(cfg, 43).unwrap();
    assert_ne!(c.spec(3).unwrap(), s3.spec);
}

#[test]
fn rendered_scene_properties() {
    let cfg = SceneConfig {
        duration_s: 2.0,
        ..SceneConfig::toy()
    };
    let gen = SceneGenerator::new(cfg.clone(), 7).unwrap();
    for i in 0..6 {
        let s = gen.scene(i).unwrap();
        assert_eq!(s.mixture.channels(), 2);
        assert_eq!(s.mixture.len(), 16000);
        assert_eq!(s.target.len(), 16000);
        let rms = (s.mixture.channel(0).iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / 16000.0).sqrt();
        assert!((rms - cfg.level_rms).abs() < 1e-6);
        let sp = &s.spec;
        assert!((5.0..=15.0).contains(&sp.snr_db));
        assert!((0.1..=0.3).contains(&sp.room.rt60));
        assert!(sp.mic_positions.iter().all(|&p| sp.room.contains(p)));
        assert!(sp.trajectory.waypoints.iter().all(|&p| sp.room.contains(p)));
        if sp.moving {
            assert!((0.12..=0.4).contains(&sp.trajectory.speed));
        } else {
            assert_eq!(sp.trajectory.speed, 0.0);
        }
    }
}

#[test]
fn default_ranges_follow_the_scene_family() {
    let gen = SceneGenerator::new(SceneConfig::default(), 1).unwrap();
    let m = gen.manifest(400).unwrap();
    let moving = m.scenes.iter().filter(|s| s.moving).count() as f64;
    // binomial 3 sigma around 200
    assert!((moving - 200.0).abs() <= 30.0, "{}", moving);
    for s in &m.scenes {
        let [x, y, z] = s.room.dims;
        assert!((4.0..=10.0).contains(&x) && (4.0..=10.0).contains(&y) && (3.0..=4.0).contains(&z));
        assert!((0.1..=1.0).contains(&s.room.rt60));
        assert!((-5.0..=10.0).contains(&s.snr_db));
        assert_eq!(s.mic_positions.len(), 6);
        let c = s.array_centre;
        assert!((c[0] - x / 2.0).abs() <= 0.5 && (c[1] - y / 2.0).abs() <= 0.5);
    }
    let back = Manifest::from_json(&m.to_json()).unwrap();
    assert_eq!(back, m);
}

#[test]
fn wav_folders_replace_synthetic_sources() {
    use ospatialnet::audio::{write_wav, MultichannelAudio, WavEncoding};
    let dir = tempfile::tempdir().unwrap();
    let (sd, nd) = (dir.path().join("speech"), dir.path().join("noise"));
    std::fs::create_dir_all(&sd).unwrap();
    std::fs::create_dir_all(&nd).unwrap();
    let tone: Vec<f32> = (0..4000).map(|i| (i as f32 * 0.05).sin() * 0.3).collect();
    write_wav(
        sd.join("a.wav"),
        &MultichannelAudio::from_channels(8000, vec![tone.clone()]).unwrap(),
        WavEncoding::Float32,
    )
    .unwrap();
    let hum: Vec<f32> = (0..3000).map(|i| (i as f32 * 0.3).cos() * 0.1).collect();
    write_wav(
        nd.join("n.wav"),
        &MultichannelAudio::from_channels(8000, vec![hum.clone(), hum]).unwrap(),
        WavEncoding::Float32,
    )
    .unwrap();
    let cfg = SceneConfig {
        duration_s: 1.0,
        speech_dir: Some(sd),
        noise_dir: Some(nd.clone()),
        ..SceneConfig::toy()
    };
    let gen = SceneGenerator::new(cfg.clone(), 2).unwrap();
    let s = gen.scene(0).unwrap();
    assert!(s.spec.speech_file.is_some() && s.spec.noise_file.is_some());
    assert_eq!(s.mixture.len(), 8000);
    let six = SceneConfig {
        mics: (0..6).collect(),
        ..cfg
    };
    let err = SceneGenerator::new(six, 2).unwrap().scene(0);
    assert!(matches!(err, Err(Error::Config(_))));
}
