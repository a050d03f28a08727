use obidiff::datapipe::{synth_glyph, synth_noise, AlignedPair, NoiseType};
use obidiff::diffusion::{make_schedule, train, ConditionedDenoiser, DiffusionConfig, DiffusionExample, TrainConfig, TrainState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn loss_halves_over_200_steps_on_eight_pairs() {
    let examples: Vec<DiffusionExample> = (0..8)
        .map(|i| {
            let glyph = synth_glyph(i % 8, i as u64, 64).unwrap();
            let noise_type = NoiseType::ALL[i as usize % 4];
            let style = synth_noise(&glyph, noise_type, i as u64).unwrap();
            let pair = AlignedPair { pair_id: format!("p{i}"), class_id: i % 8, glyph, style, noise_type, iou: None };
            DiffusionExample::from_pair(&pair, true, 0.5).unwrap()
        })
        .collect();
    let cfg = TrainConfig { steps: 200, batch_size: 8, seed: 5, ..TrainConfig::default() };
    let model = ConditionedDenoiser::<f32>::new(DiffusionConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut state = TrainState::new(model, &cfg, make_schedule(1000, 1e-4, 0.02).unwrap());
    train(&mut state, &examples, &cfg, None, |_| {}).unwrap();
    let h = &state.loss_history;
    let start = h[..10].iter().sum::<f64>() / 10.0;
    let end = h[h.len() - 20..].iter().sum::<f64>() / 20.0;
    assert!(end <= 0.5 * start, "loss {start:.4} -> {end:.4}");
}
