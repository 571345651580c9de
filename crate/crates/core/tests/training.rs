use liteie::train::{load_dataset, train_on_images, TrainLog};
use liteie::{
    deserialize_weights, enhance_image, save_image, train, EnhanceConfig, Error, ImageTensor, NetTopology, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Smooth scenes with a few rectangles, darkened by a gamma curve.
fn dark_scene(seed: u64, h: usize, w: usize) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [f32; 3] = [rng.random_range(0.3..0.8), rng.random_range(0.3..0.8), rng.random_range(0.3..0.8)];
    let rects: Vec<(usize, usize, usize, usize, f32)> = (0..4)
        .map(|_| {
            let y = rng.random_range(0..h / 2);
            let x = rng.random_range(0..w / 2);
            (y, x, y + rng.random_range(4..h / 2), x + rng.random_range(4..w / 2), rng.random_range(-0.3..0.3))
        })
        .collect();
    ImageTensor::from_fn(h, w, 3, |c, y, x| {
        let mut v = base[c] * (0.6 + 0.4 * x as f32 / w as f32);
        for &(y0, x0, y1, x1, d) in &rects {
            if y >= y0 && y < y1 && x >= x0 && x < x1 {
                v += d;
            }
        }
        0.25 * v.clamp(0.0, 1.0).powf(1.8)
    })
}

fn small_cfg(steps: usize) -> TrainConfig {
    TrainConfig { steps, batch_size: 4, patch: 32, learning_rate: 1e-2, seed: 7, ..Default::default() }
}

#[test]
fn training_is_deterministic() {
    let imgs: Vec<_> = (0..3).map(|s| dark_scene(s, 40, 48)).collect();
    let t = NetTopology::canonical();
    let (w1, l1) = train_on_images(&imgs, &t, &small_cfg(15), |_| {}).unwrap();
    let (w2, l2) = liteie::parallel::with_threads(1, || train_on_images(&imgs, &t, &small_cfg(15), |_| {}).unwrap());
    assert_eq!(w1, w2);
    assert_eq!(l1.to_text(), l2.to_text());
}

#[test]
fn training_reduces_loss_and_brightens() {
    let imgs: Vec<_> = (0..6).map(|s| dark_scene(s, 48, 48)).collect();
    let t = NetTopology::canonical();
    let cfg = small_cfg(300);
    let mut seen = 0;
    let (w, log) = train_on_images(&imgs, &t, &cfg, |_| seen += 1).unwrap();
    assert_eq!(seen, 300);
    let early = log.smoothed(50, 50).unwrap();
    let late = log.smoothed(300, 50).unwrap();
    assert!(late < early, "smoothed loss {early} -> {late}");
    assert!(w.params().iter().all(|p| p.is_finite()));

    let test = dark_scene(99, 48, 48);
    let out = enhance_image(&w, &test, &EnhanceConfig::default()).unwrap();
    let mean = |i: &ImageTensor| i.channel_means().iter().sum::<f64>() / 3.0;
    assert!(mean(&out) > mean(&test) + 0.05, "{} -> {}", mean(&test), mean(&out));
}

#[test]
fn log_lines_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    for s in 0..2 {
        save_image(&dark_scene(s, 20, 24), dir.path().join(format!("{s}.png"))).unwrap();
    }
    let base = dir.path().join("out/model.lie");
    std::fs::create_dir_all(base.parent().unwrap()).unwrap();
    let cfg = TrainConfig {
        steps: 4,
        batch_size: 2,
        patch: 64,
        checkpoint_every: 2,
        checkpoint_path: Some(base.clone()),
        ..Default::default()
    };
    let (w, log) = train(dir.path(), &NetTopology::canonical(), &cfg).unwrap();
    let text = log.to_text();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("1, "));
    assert_eq!(lines[3].split(", ").count(), 5);
    assert_eq!(log.checkpoints.len(), 2);
    assert_eq!(deserialize_weights(&log.checkpoints[1]).unwrap(), w);
    assert!(log.checkpoints[0].ends_with("model.step2.lie"));
}

#[test]
fn missing_and_empty_datasets() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Dataset(_))));
    let r = train(dir.path().join("nope"), &NetTopology::canonical(), &TrainConfig::default());
    assert!(matches!(r, Err(Error::NotFound(_))));
}

#[test]
fn smoothed_window() {
    let mut log = TrainLog::default();
    for (i, v) in [4.0, 2.0, 0.0].iter().enumerate() {
        log.records
            .push(liteie::train::TrainRecord { step: i + 1, loss: liteie::LossBreakdown::from_terms(*v, 0.0, 0.0) });
    }
    assert_eq!(log.smoothed(3, 2), Some(1.0));
    assert_eq!(log.smoothed(3, 50), Some(2.0));
    assert_eq!(log.smoothed(4, 2), None);
}

#[test]
#[ignore = "timing probe"]
fn full_size_step_timing() {
    let imgs: Vec<_> = (0..4).map(|s| dark_scene(s, 400, 600)).collect();
    let cfg = TrainConfig { steps: 5, ..Default::default() };
    let t0 = std::time::Instant::now();
    train_on_images(&imgs, &NetTopology::canonical(), &cfg, |_| {}).unwrap();
    eprintln!("per step: {:?}", t0.elapsed() / 5);
}
