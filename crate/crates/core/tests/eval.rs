use mmdet_core::corpus::{Label, VideoClip};
use mmdet_core::dataset::PreparedVideo;
use mmdet_core::detector::{Detector, DetectorConfig, Variant};
use mmdet_core::eval::*;
use mmdet_core::iafa::IafaConfig;
use mmdet_core::mmfr::{MockConfig, MockProvider};
use mmdet_core::numerics::SplitMix64;
use proptest::prelude::*;

fn pairwise_auc(scores: &[(Label, f64)]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (_, f) in scores.iter().filter(|s| s.0 == Label::Fake) {
        for (_, r) in scores.iter().filter(|s| s.0 == Label::Real) {
            num += if f > r { 1.0 } else if f == r { 0.5 } else { 0.0 };
            pairs += 1.0;
        }
    }
    num / pairs
}

fn random_table(rng: &mut SplitMix64, n: usize, levels: usize) -> Vec<(Label, f64)> {
    let mut t: Vec<(Label, f64)> = (0..n)
        .map(|_| {
            let label = if rng.below(2) == 0 { Label::Fake } else { Label::Real };
            // a small level count forces ties
            (label, rng.below(levels) as f64 / levels as f64)
        })
        .collect();
    t[0].0 = Label::Fake;
    t[n - 1].0 = Label::Real;
    t
}

#[test]
fn auc_examples() {
    let t: Vec<_> = (0..6).map(|i| if i < 3 { (Label::Fake, 0.9) } else { (Label::Real, 0.1) }).collect();
    assert_eq!(auc(&t).unwrap(), 1.0);
    let t: Vec<_> = (0..6).map(|i| (if i % 2 == 0 { Label::Fake } else { Label::Real }, 0.3)).collect();
    assert_eq!(auc(&t).unwrap(), 0.5);
    assert_eq!(auc(&[(Label::Fake, 0.0), (Label::Real, 1.0)]).unwrap(), 0.0);
    assert!(matches!(auc(&[(Label::Fake, 0.1), (Label::Fake, 0.2)]), Err(EvalError::SingleClass { fakes: 2, reals: 0 })));
    assert!(matches!(auc(&[(Label::Fake, f64::NAN), (Label::Real, 0.2)]), Err(EvalError::NonFiniteScore(_))));
}

#[test]
fn auc_matches_pairwise_oracle_on_random_tables() {
    let mut rng = SplitMix64::new(77);
    for i in 0..50 {
        let n = 2 + rng.below(99);
        let levels = if i % 2 == 0 { 5 } else { 1 << 20 };
        let t = random_table(&mut rng, n, levels);
        assert_eq!(auc(&t).unwrap(), pairwise_auc(&t), "table {i}");
    }
    let t = random_table(&mut rng, 100, 1 << 30);
    assert_eq!(auc(&t).unwrap(), pairwise_auc(&t));
}

proptest! {
    #[test]
    fn auc_is_invariant_under_monotone_maps(seed in any::<u64>(), n in 2usize..80, a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let t = random_table(&mut SplitMix64::new(seed), n, 7);
        let base = auc(&t).unwrap();
        let affine: Vec<_> = t.iter().map(|&(l, s)| (l, a * s + b)).collect();
        let exp: Vec<_> = t.iter().map(|&(l, s)| (l, s.exp())).collect();
        prop_assert_eq!(auc(&affine).unwrap(), base);
        prop_assert_eq!(auc(&exp).unwrap(), base);
    }
}

#[test]
fn window_enumeration() {
    assert_eq!(window_starts(20, 10, 5, 0), [0, 5, 10]);
    assert_eq!(window_starts(10, 10, 10, 0), [0]);
    assert_eq!(window_starts(20, 10, 10, 3), [3]);
    assert!(window_starts(9, 10, 10, 0).is_empty());
    for seed in [1, 100, 999] {
        assert!(eval_offset(seed, "v", 20, 10, 10) < 10);
        assert_eq!(eval_offset(seed, "v", 10, 10, 10), 0);
        assert_eq!(eval_offset(seed, "v", 20, 10, 10), eval_offset(seed, "v", 20, 10, 10));
    }
}

fn tiny_model(flags: &str) -> Detector {
    Detector::new(DetectorConfig {
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
        seed: 3,
    })
    .unwrap()
}

fn prepared(id: &str, label: Label, n: usize, seed: u64) -> PreparedVideo {
    let mut rng = SplitMix64::new(seed);
    let frames: Vec<f32> = (0..n * 192).map(|_| rng.next_f32()).collect();
    let recon = frames.iter().map(|v| v * 0.9).collect();
    PreparedVideo {
        video: VideoClip::new(id, label, 8.0, [n, 8, 8, 3], frames).unwrap(),
        recon: VideoClip::new(id, label, 8.0, [n, 8, 8, 3], recon).unwrap(),
    }
}

fn constant_logit(m: &mut Detector, c: f32) {
    let w = m.store.id("fusion.classifier.w").unwrap();
    let b = m.store.id("fusion.classifier.b").unwrap();
    m.store.get_mut(w).data_mut().fill(0.0);
    m.store.get_mut(b).data_mut().fill(c);
}

#[test]
fn score_video_examples() {
    let p = MockProvider::new(MockConfig::default());
    let m = tiny_model("recon,iafa,mmfr,fusion");
    let v = prepared("fake_0001", Label::Fake, 4, 1);
    let single = score_video(&v, &m, &p, 4, 4, 0).unwrap();
    let logit = v.logit(&m, &p, 0, 4).unwrap() as f64;
    assert!((single - 1.0 / (1.0 + (-logit).exp())).abs() < 1e-12);

    let long = prepared("fake_0002", Label::Fake, 8, 2);
    let manual: f64 = [0, 2, 4].iter().map(|&s| 1.0 / (1.0 + (-(long.logit(&m, &p, s, 4).unwrap() as f64)).exp())).sum::<f64>() / 3.0;
    assert!((score_video(&long, &m, &p, 4, 2, 0).unwrap() - manual).abs() < 1e-12);

    let mut flat = m.clone();
    constant_logit(&mut flat, 0.0);
    for stride in [1, 2, 3, 4] {
        assert_eq!(score_video(&long, &flat, &p, 4, stride, 0).unwrap(), 0.5);
    }
    constant_logit(&mut flat, 1.3);
    let s1 = score_video(&long, &flat, &p, 4, 1, 0).unwrap();
    for stride in [2, 3, 4] {
        assert_eq!(score_video(&long, &flat, &p, 4, stride, 1).unwrap(), s1);
    }

    let short = prepared("real_0003", Label::Real, 3, 3);
    assert!(matches!(score_video(&short, &m, &p, 4, 4, 0), Err(EvalError::VideoTooShort { len: 3, .. })));
    assert!(matches!(score_video(&long, &m, &p, 4, 0, 0), Err(EvalError::BadParam(_))));
}

#[test]
fn score_table_is_reproducible_and_single_class_fails() {
    let p = MockProvider::new(MockConfig::default());
    let m = tiny_model("recon,iafa");
    let videos: Vec<_> = (0..6)
        .map(|i| {
            let label = if i % 2 == 0 { Label::Fake } else { Label::Real };
            prepared(&format!("{}_{i}", label.as_str()), label, 12, i as u64)
        })
        .collect();
    let a = score_videos(&videos, &m, &p, 4, 4, 999, "toy").unwrap();
    let b = score_videos(&videos, &m, &p, 4, 4, 999, "toy").unwrap();
    assert_eq!(a, b);
    assert!(a.rows.iter().all(|r| r.seed == 999 && r.tag == "toy"));
    assert!(a.auc().is_ok());
    let fakes: Vec<_> = videos.iter().filter(|v| v.label() == Label::Fake).cloned().collect();
    let t = score_videos(&fakes, &m, &p, 4, 4, 1, "toy").unwrap();
    let err = t.auc().unwrap_err();
    assert!(err.to_string().contains("SingleClass"), "{err}");
}

#[test]
fn mean_std_examples() {
    assert_eq!(mean_std(&[0.7; 5]), (0.7, 0.0));
    let (m, s) = mean_std(&[0.8, 0.9]);
    assert!((m - 0.85).abs() < 1e-15);
    assert!((s - 0.005f64.sqrt()).abs() < 1e-12);
    let v = [0.913, 0.877, 0.954, 0.902, 0.931];
    let mean = v.iter().sum::<f64>() / 5.0;
    let sd = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 4.0).sqrt();
    let (m, s) = mean_std(&v);
    assert!((m - mean).abs() < 1e-9 && (s - sd).abs() < 1e-9);
}

#[test]
fn multi_seed_report_layout() {
    assert!(matches!(multi_seed_report(&[1], |_| Ok(vec![])), Err(EvalError::TooFewSeeds(1))));
    let report = multi_seed_report(&DEFAULT_SEEDS, |s| Ok(vec![("toy".into(), 0.5 + s as f64 / 20_000.0), ("blur".into(), 0.75)])).unwrap();
    assert_eq!(report.results.len(), 10);
    assert_eq!(report.summary_for("blur").unwrap().std, 0.0);
    assert_eq!(report.summary_for("toy").unwrap().runs, 5);
    let csv = report.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "dataset_tag,seed,auc");
    assert_eq!(lines[1], "toy,1,0.500050");
    assert_eq!(lines[11], "");
    assert_eq!(lines[12], "dataset_tag,mean,std");
    assert_eq!(lines.len(), 15);
    assert_eq!(csv, SeedReport::from_results(report.results.clone()).to_csv());
}

#[test]
fn feature_dump_roundtrip() {
    let rows = vec![("a".to_string(), Label::Fake, vec![0.5f32, -1.25]), ("b".to_string(), Label::Real, vec![1e-7, 3.0])];
    let text = features_csv(&rows);
    assert!(text.starts_with("id,label,f_0,f_1\n"));
    let back = parse_features_csv(&text).unwrap();
    for ((id, l, f), (id2, l2, f2)) in rows.iter().zip(&back) {
        assert_eq!((id, l), (id2, l2));
        assert_eq!(*f, f2.iter().map(|&v| v as f32).collect::<Vec<_>>());
    }
    assert!(parse_features_csv("id,label\nx,maybe,1\n").is_err());
}

fn blobs(n: usize, gap: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<Label>) {
    let mut rng = SplitMix64::new(seed);
    (0..n)
        .map(|i| {
            let label = if i % 2 == 0 { Label::Fake } else { Label::Real };
            let c = if label == Label::Fake { gap } else { 0.0 };
            (vec![c + rng.normal(), c + rng.normal(), rng.normal()], label)
        })
        .unzip()
}

#[test]
fn probe_separates_blobs_and_stays_at_chance_under_null() {
    let cfg = KMeansConfig { seed: 4, ..Default::default() };
    let (pts, labels) = blobs(200, 20.0, 1);
    assert_eq!(layer_probe(&[pts], &labels, &cfg).unwrap(), [1.0]);
    let (pts, labels) = blobs(200, 0.0, 2);
    let acc = layer_probe(&[pts], &labels, &cfg).unwrap()[0];
    assert!((0.5..=0.65).contains(&acc), "{acc}");
}

#[test]
fn kmeans_matches_exhaustive_partition_on_four_points() {
    let pts = vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![4.0, 0.2], vec![5.0, 1.0]];
    let mut best = (f64::INFINITY, vec![]);
    for mask in 1u32..15 {
        let assign: Vec<usize> = (0..4).map(|i| (mask >> i & 1) as usize).collect();
        let w = inertia(&pts, &assign, 2);
        if w < best.0 {
            best = (w, assign);
        }
    }
    let got = kmeans(&pts, &KMeansConfig::default());
    assert!((inertia(&pts, &got, 2) - best.0).abs() < 1e-12);
    assert_eq!(got[0] == got[1], best.1[0] == best.1[1]);
    assert_eq!(got[1] == got[2], best.1[1] == best.1[2]);
    assert_eq!(got[2] == got[3], best.1[2] == best.1[3]);
}

#[test]
fn probe_errors() {
    let labels = vec![Label::Fake, Label::Real, Label::Fake, Label::Real];
    let flat = vec![vec![1.0, 2.0]; 4];
    assert!(matches!(layer_probe(&[flat], &labels, &KMeansConfig::default()), Err(EvalError::DegenerateFeatures { layer: 0 })));
    let few = vec![vec![1.0], vec![2.0]];
    assert!(matches!(layer_probe(&[few], &labels[..2], &KMeansConfig::default()), Err(EvalError::TooFewSamples { .. })));
    let ok = vec![vec![0.0], vec![1.0], vec![0.1], vec![1.1]];
    assert!(layer_probe(&[ok], &labels, &KMeansConfig { k: 3, ..Default::default() }).is_err());
}
