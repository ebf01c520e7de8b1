use mmdet_core::corpus::{Label, VideoClip};
use mmdet_core::dataset::PreparedVideo;
use mmdet_core::detector::{Detector, DetectorConfig, Variant};
use mmdet_core::iafa::IafaConfig;
use mmdet_core::kv::KvMap;
use mmdet_core::mmfr::{FeatureProvider, MockConfig, MockProvider};
use mmdet_core::numerics::SplitMix64;
use mmdet_core::trainer::*;

fn tiny_cfg(flags: &str, seed: u64) -> DetectorConfig {
    DetectorConfig {
        iafa: IafaConfig {
            dim: 8,
            heads: 2,
            layers: 1,
            patch: 4,
            frame_size: 8,
            n_max: 4,
            in_channels: 3,
            stem_channels: 8,
            mlp_ratio: 2,
            ..IafaConfig::default()
        },
        gate_hidden: 4,
        variant: Variant::parse(flags).unwrap(),
        seed,
    }
}

/// Fakes reconstruct almost perfectly, reals carry visible residual noise.
fn video(i: usize, label: Label, n: usize) -> PreparedVideo {
    let mut rng = SplitMix64::derived(0xBEEF, i as u64 * 2 + label.as_u8() as u64);
    let frames: Vec<f32> = (0..n * 8 * 8 * 3).map(|_| rng.next_f32()).collect();
    let noise = if label == Label::Fake { 0.01 } else { 0.1 };
    let recon = frames.iter().map(|v| (v + noise * rng.normal() as f32).clamp(0.0, 1.0)).collect();
    let id = format!("{}_{i:04}", if label == Label::Fake { "fake" } else { "real" });
    PreparedVideo {
        video: VideoClip::new(id.clone(), label, 8.0, [n, 8, 8, 3], frames).unwrap(),
        recon: VideoClip::new(id, label, 8.0, [n, 8, 8, 3], recon).unwrap(),
    }
}

fn corpus(count: usize, offset: usize) -> Vec<PreparedVideo> {
    (0..count).map(|i| video(offset + i, if i % 2 == 0 { Label::Fake } else { Label::Real }, 6)).collect()
}

fn train_cfg(steps: usize, lr: f64) -> TrainConfig {
    TrainConfig { lr, clip_len: 3, crop: 8, batch: 4, steps, seed: 5, eval_every: 5 }
}

fn mock(sigma: f32) -> MockProvider {
    MockProvider::new(MockConfig { seed: 17, sigma, ..Default::default() })
}

fn params(m: &Detector) -> Vec<(String, Vec<u32>)> {
    m.to_checkpoint().tensors.iter().map(|(n, t)| (n.clone(), t.data().iter().map(|v| v.to_bits()).collect())).collect()
}

#[test]
fn bce_examples() {
    for y in [0.0, 1.0, 0.3] {
        assert!((bce_loss(0.0, y) - std::f64::consts::LN_2).abs() < 1e-15);
    }
    assert!(bce_loss(20.0, 1.0) < 1e-8);
    let reference = -(1.0 - 1.0 / (1.0 + (-1.5f64).exp())).ln();
    assert!((bce_loss(1.5, 0.0) - reference).abs() < 1e-6);
    // the stable form survives logits where the naive one overflows
    assert!((bce_loss(-800.0, 1.0) - 800.0).abs() < 1e-9);
    assert!(bce_loss(800.0, 0.0).is_finite());
}

#[test]
fn sample_clip_whole_video_and_determinism() {
    let v = &video(0, Label::Real, 10).video;
    let c = sample_clip(v, 10, 8, &mut SplitMix64::new(1)).unwrap();
    assert_eq!(c.frames, v.frames);
    let long = VideoClip::new("l", Label::Real, 8.0, [20, 8, 8, 3], (0..20 * 192).map(|i| i as f32).collect()).unwrap();
    let a = sample_clip(&long, 10, 8, &mut SplitMix64::new(42)).unwrap();
    let b = sample_clip(&long, 10, 8, &mut SplitMix64::new(42)).unwrap();
    assert_eq!(a.frames, b.frames);
    assert_eq!(a.n, 10);
    let c = sample_clip(&long, 10, 4, &mut SplitMix64::new(42)).unwrap();
    assert_eq!((c.h, c.w), (4, 4));
    assert!(matches!(sample_clip(v, 11, 8, &mut SplitMix64::new(1)), Err(TrainError::VideoTooShort { len: 10, clip_len: 11, .. })));
}

#[test]
fn sample_start_is_uniform() {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let mut rng = SplitMix64::new(2024);
    let mut counts = [0f64; 11];
    for _ in 0..10_000 {
        counts[sample_start(20, 10, &mut rng).unwrap()] += 1.0;
    }
    let expect = 10_000.0 / 11.0;
    let chi2: f64 = counts.iter().map(|c| (c - expect).powi(2) / expect).sum();
    let p = 1.0 - ChiSquared::new(10.0).unwrap().cdf(chi2);
    assert!(p > 0.01, "chi2 {chi2} p {p}");
}

#[test]
fn config_kv_requires_seed_and_rejects_bad_values() {
    let cfg = train_cfg(12, 3e-4);
    let back = TrainConfig::from_kv(&KvMap::parse(&cfg.to_kv().to_text()).unwrap()).unwrap();
    assert_eq!(back, cfg);
    assert!(TrainConfig::from_kv(&KvMap::parse("lr = 0.1\n").unwrap()).is_err());
    assert!(TrainConfig::from_kv(&KvMap::parse("seed = 1\nlr = -1\n").unwrap()).is_err());
    assert!(TrainConfig::from_kv(&KvMap::parse("seed = 1\nbatch = 0\n").unwrap()).is_err());
    assert_eq!(TrainConfig::from_kv(&KvMap::parse("seed = 9\n").unwrap()).unwrap().clip_len, 10);
}

#[test]
fn constructor_errors() {
    let p = mock(1.0);
    let fakes: Vec<_> = (0..4).map(|i| video(i, Label::Fake, 6)).collect();
    let m = || Detector::new(tiny_cfg("recon,iafa", 1)).unwrap();
    assert!(matches!(
        Trainer::new(train_cfg(1, 1e-3), m(), &fakes, &[], &p),
        Err(TrainError::SingleClassCorpus { fakes: 4, reals: 0 })
    ));
    let mut short = corpus(4, 0);
    short.push(video(9, Label::Real, 2));
    assert!(matches!(Trainer::new(train_cfg(1, 1e-3), m(), &short, &[], &p), Err(TrainError::VideoTooShort { len: 2, .. })));
    let long_clip = TrainConfig { clip_len: 5, ..train_cfg(1, 1e-3) };
    assert!(matches!(Trainer::new(long_clip, m(), &corpus(4, 0), &[], &p), Err(TrainError::Config(_))));
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let (train, val, p) = (corpus(8, 0), corpus(4, 100), mock(1.0));
    let m = Detector::new(tiny_cfg("recon,iafa,mmfr,fusion", 3)).unwrap();
    let before = params(&m);
    let out = Trainer::new(train_cfg(6, 0.0), m, &train, &val, &p).unwrap().run().unwrap();
    assert_eq!(out.metrics.len(), 6);
    assert_eq!(params(&out.last), before);
}

#[test]
fn resume_continues_bit_identically() {
    let (train, val, p) = (corpus(8, 0), corpus(4, 100), mock(1.0));
    let cfg = train_cfg(12, 1e-3);
    let m = Detector::new(tiny_cfg("recon,iafa,mmfr,fusion", 4)).unwrap();
    let full = Trainer::new(cfg.clone(), m.clone(), &train, &val, &p).unwrap().run().unwrap();

    let mut first = Trainer::new(cfg, m, &train, &val, &p).unwrap();
    first.run_until(7).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.ckpt");
    first.state_checkpoint().save(&path).unwrap();
    let head = first.metrics.clone();
    drop(first);
    let ck = mmdet_core::checkpoint::Checkpoint::load(&path).unwrap();
    let mut second = Trainer::resume(&ck, &train, &val, &p).unwrap();
    assert_eq!(second.step_index(), 7);
    second.run_until(12).unwrap();
    let rest = second.finish();

    let losses = |rows: &[MetricRow]| rows.iter().map(|r| (r.step, r.loss.to_bits(), r.val_auc.map(f64::to_bits))).collect::<Vec<_>>();
    let mut joined = losses(&head);
    joined.extend(losses(&rest.metrics));
    assert_eq!(joined, losses(&full.metrics));
    assert_eq!(params(&rest.last), params(&full.last));
    assert_eq!(params(&rest.best), params(&full.best));
    assert_eq!(rest.best_step, full.best_step);
}

#[test]
fn full_run_is_deterministic_and_leaves_inputs_frozen() {
    let (train, val, p) = (corpus(8, 0), corpus(4, 100), mock(1.0));
    let snapshot = train.clone();
    let rec_before = p.lookup("fake_0000", Label::Fake, 0.2, 8.0).unwrap().into_owned();
    let run = || {
        let m = Detector::new(tiny_cfg("recon,iafa,mmfr,fusion", 6)).unwrap();
        Trainer::new(train_cfg(10, 1e-3), m, &train, &val, &p).unwrap().run().unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(params(&a.last), params(&b.last));
    assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
    // reconstructions and provider features are inputs, never parameters
    assert!(a.last.store.ids().all(|id| !a.last.store.name(id).starts_with("vq")));
    for (x, y) in train.iter().zip(&snapshot) {
        assert_eq!(x.recon.frames, y.recon.frames);
    }
    let rec_after = p.lookup("fake_0000", Label::Fake, 0.2, 8.0).unwrap();
    assert_eq!(rec_after.f_v, rec_before.f_v);
    assert_eq!(rec_after.f_l, rec_before.f_l);
}

#[test]
fn best_checkpoint_tracks_validation() {
    let (train, val, p) = (corpus(8, 0), corpus(4, 100), mock(1.0));
    let m = Detector::new(tiny_cfg("recon,iafa,mmfr,fusion", 7)).unwrap();
    let out = Trainer::new(train_cfg(15, 1e-3), m, &train, &val, &p).unwrap().run().unwrap();
    let aucs: Vec<(usize, f64)> = out.metrics.iter().filter_map(|r| r.val_auc.map(|a| (r.step, a))).collect();
    assert_eq!(aucs.iter().map(|a| a.0).collect::<Vec<_>>(), [5, 10, 15]);
    let top = aucs.iter().map(|a| a.1).fold(f64::MIN, f64::max);
    let first_top = aucs.iter().find(|a| a.1 == top).unwrap().0;
    assert_eq!(out.best_auc, Some(top));
    assert_eq!(out.best_step, first_top);

    // no validation set: the final parameters are returned
    let m = Detector::new(tiny_cfg("recon,iafa", 7)).unwrap();
    let out = Trainer::new(train_cfg(3, 1e-3), m, &train, &[], &p).unwrap().run().unwrap();
    assert_eq!(out.best_auc, None);
    assert_eq!(params(&out.best), params(&out.last));
}

#[test]
fn loss_window_means_do_not_increase_on_informative_mock() {
    let (train, p) = (corpus(16, 0), mock(1.0));
    let m = Detector::new(tiny_cfg("recon,iafa,mmfr,fusion", 8)).unwrap();
    let cfg = TrainConfig { eval_every: 1000, ..train_cfg(100, 1e-3) };
    let out = Trainer::new(cfg, m, &train, &[], &p).unwrap().run().unwrap();
    let means: Vec<f32> = out.metrics.chunks(20).map(|w| w.iter().map(|r| r.loss).sum::<f32>() / 20.0).collect();
    assert_eq!(means.len(), 5);
    for w in means.windows(2) {
        assert!(w[1] <= w[0], "{means:?}");
    }
}

#[test]
fn metrics_csv_layout() {
    let rows = [MetricRow { step: 1, loss: 0.5, val_auc: None }, MetricRow { step: 2, loss: 0.25, val_auc: Some(0.75) }];
    assert_eq!(metrics_csv(&rows), "step,loss,val_auc\n1,0.500000,\n2,0.250000,0.750000\n");
}
