use mdm_tensor::{ema_update, Rng, Tensor};
use mdm_video::config::Config;
use mdm_video::denoiser::LatentShape;
use mdm_video::toyworld::{build_corpus, Corpus};
use mdm_video::trainer::{train_until, MaskMode, TrainState};

fn corpus(n: usize) -> Corpus {
    build_corpus(
        n,
        12,
        LatentShape::new(1, 16, 16),
        (1.0, 20.0),
        &Rng::new(4),
    )
    .unwrap()
}

fn small() -> Config {
    let mut c = Config::desk();
    c.train.batch_size = 4;
    c
}

#[test]
fn resuming_from_a_checkpoint_matches_an_uninterrupted_run() {
    let c = small();
    let data = corpus(16);
    let mut straight = TrainState::new(&c).unwrap();
    train_until(&mut straight, &data, 100, MaskMode::Learned, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("half.ckpt");
    let mut first = TrainState::new(&c).unwrap();
    train_until(&mut first, &data, 50, MaskMode::Learned, None).unwrap();
    first.save(&p).unwrap();
    drop(first);
    let mut resumed = TrainState::load(&p, Some(&c)).unwrap();
    assert_eq!(resumed.step, 50);
    train_until(&mut resumed, &data, 100, MaskMode::Learned, None).unwrap();

    assert_eq!(
        resumed.model.params().tensors(),
        straight.model.params().tensors()
    );
    assert_eq!(resumed.ema.tensors(), straight.ema.tensors());
    assert_eq!(resumed.to_bytes(), straight.to_bytes());
}

#[test]
fn resuming_under_a_different_configuration_fails() {
    let c = small();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.ckpt");
    TrainState::new(&c).unwrap().save(&p).unwrap();
    let mut other = c.clone();
    other.train.lr *= 2.0;
    assert!(matches!(
        TrainState::load(&p, Some(&other)),
        Err(mdm_video::Error::Incompatible { .. })
    ));
    let mut budget = c.clone();
    budget.train.steps += 100;
    assert!(TrainState::load(&p, Some(&budget)).is_ok());
}

#[test]
fn frozen_weights_pull_the_average_onto_them() {
    let st = TrainState::new(&small()).unwrap();
    let raw = st.model.params().clone();
    let mut ema = raw.clone();
    for t in ema.tensors_mut() {
        *t = t.map(|v| v + 1.0);
    }
    for _ in 0..10_000 {
        ema_update(&mut ema, &raw, 0.999).unwrap();
    }
    for (a, b) in ema.tensors().iter().zip(raw.tensors()) {
        assert!(a.sub(b).unwrap().max_abs() < 1e-3);
    }
}

#[test]
fn forced_zero_mask_trains_only_the_dynamic_head() {
    let c = small();
    let data = corpus(8);
    let mut st = TrainState::new(&c).unwrap();
    let before: Vec<Tensor> = st.model.params().tensors().to_vec();
    train_until(&mut st, &data, 3, MaskMode::ForcedZero, None).unwrap();
    let shrink = (1.0 - c.train.lr * c.train.weight_decay).powi(3);
    let mut dynamic_moved = false;
    for ((name, t), b) in st.model.params().iter().zip(&before) {
        if name.starts_with("mask.") {
            // no gradient reaches the mask head; only weight decay shrinks it
            let want = b.map(|v| v * shrink);
            assert!(
                t.sub(&want).unwrap().max_abs() <= 1e-6 * (1.0 + b.max_abs()),
                "{name}"
            );
        } else {
            dynamic_moved |= t.sub(b).unwrap().max_abs() > 1e-4;
        }
    }
    assert!(dynamic_moved);
}

#[test]
fn two_thousand_steps_halve_the_loss() {
    let c = Config::desk();
    let data = corpus(64);
    let mut st = TrainState::new(&c).unwrap();
    let hist = train_until(&mut st, &data, 2000, MaskMode::Learned, None).unwrap();
    let early = hist[..10].iter().map(|h| h.loss).sum::<f64>() / 10.0;
    let late = hist[1900..].iter().map(|h| h.loss).sum::<f64>() / 100.0;
    eprintln!("loss moving average: first 10 steps {early:.4}, last 100 steps {late:.4}");
    assert!(late <= 0.5 * early, "{late} vs {early}");
}
