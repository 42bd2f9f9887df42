use ospatialnet::audio::MultichannelAudio;
use ospatialnet::autodiff::gradcheck::sample_tensor;
use ospatialnet::enhance::{enhance_offline, enhance_streaming, StreamEnhancer};
use ospatialnet::model::{ModelConfig, SpatialNet, Variant};
use ospatialnet::stft::StftConfig;
use ospatialnet::Error;
use proptest::prelude::*;

fn noise(channels: usize, len: usize, seed: u64) -> MultichannelAudio<f32> {
    let t = sample_tensor(&[channels * len], seed, -0.5, 0.5).cast::<f32>();
    MultichannelAudio::new(8000, channels, t.data().to_vec()).unwrap()
}

#[test]
fn streaming_matches_offline_for_every_variant() {
    for (i, v) in Variant::ALL.into_iter().enumerate() {
        let model = SpatialNet::<f32>::new(ModelConfig::toy(v), 3 + i as u64).unwrap();
        // not a whole number of frames
        let x = noise(2, 8000 + 77, 9 + i as u64);
        let a = enhance_offline(&model, &x).unwrap();
        let b = enhance_streaming(&model, &x).unwrap();
        assert_eq!((a.len(), a.channels()), (x.len(), 1));
        assert_eq!(b.len(), x.len());
        let d = a
            .samples()
            .iter()
            .zip(b.samples())
            .map(|(p, q)| (p - q).abs())
            .fold(0.0f32, f32::max);
        assert!(d <= 1e-4, "{}: {}", v, d);
    }
}

#[test]
fn stream_enhancer_lags_one_window() {
    let model = SpatialNet::<f32>::new(ModelConfig::toy(Variant::Retention), 1).unwrap();
    let mut e = StreamEnhancer::new(&model).unwrap();
    let hop = vec![vec![0.1f32; 128]; 2];
    assert!(e.push_hop(&hop).unwrap().is_empty());
    assert_eq!(e.push_hop(&hop).unwrap().len(), 128);
    assert_eq!(e.state().frames(), 1);
    assert_eq!(e.finish().len(), 128);
}

#[test]
fn wrong_rate_or_channels_is_a_contract_error() {
    let model = SpatialNet::<f32>::new(ModelConfig::toy(Variant::Msa), 1).unwrap();
    let three = noise(3, 4000, 1);
    assert!(matches!(enhance_offline(&model, &three), Err(Error::Contract(_))));
    let fast = MultichannelAudio::new(16000, 2, vec![0.0f32; 8000]).unwrap();
    assert!(matches!(enhance_streaming(&model, &fast), Err(Error::Contract(_))));
}

#[test]
fn silence_stays_silent() {
    let model = SpatialNet::<f32>::new(ModelConfig::toy(Variant::Mamba), 2).unwrap();
    let x = MultichannelAudio::silence(8000, 2, 3000);
    assert!(enhance_streaming(&model, &x)
        .unwrap()
        .samples()
        .iter()
        .all(|&v| v == 0.0));
}

proptest! {
    #[test]
    fn padded_len_is_a_whole_number_of_frames(n in 0usize..100_000) {
        let c = StftConfig::default();
        let p = c.padded_len(n);
        prop_assert!(p >= n && p >= c.window);
        prop_assert_eq!(c.samples_for(c.frames_for(p)), p);
        prop_assert!(p - n < c.hop || n < c.window);
    }
}
