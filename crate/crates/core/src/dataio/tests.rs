use std::fs;

use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::*;

fn video(id: &str, t: usize, d: usize, labels: Labels, gt: Vec<GtInterval>) -> Video {
    let fm = |modality| FeatureMatrix {
        video_id: id.into(),
        modality,
        values: Tensor::new(vec![t, d], (0..t * d).map(|i| i as f64 * 0.5).collect()).unwrap(),
    };
    Video {
        record: VideoRecord {
            id: id.into(),
            subject: "a".into(),
            fps: 30.0,
            frame_count: t * 8,
            snippet_len: 8,
            labels,
            ground_truth: Some(gt),
        },
        rgb: fm(Modality::Rgb),
        flow: fm(Modality::Flow),
    }
}

fn write_raw(dir: &Path, v: &Video) {
    write_features(&dir.join(feature_file_name(v.id(), Modality::Rgb)), &v.rgb.values).unwrap();
    write_features(&dir.join(feature_file_name(v.id(), Modality::Flow)), &v.flow.values).unwrap();
    write_manifest(&dir.join(MANIFEST_FILE), &[v.record.clone()]).unwrap();
}

#[test]
fn loads_single_video() {
    let dir = tempfile::tempdir().unwrap();
    let v = video("clip", 10, 16, Labels::default(), vec![]);
    write_raw(dir.path(), &v);
    let corpus = load_corpus_dir(dir.path()).unwrap();
    assert_eq!(corpus.len(), 1);
    assert_eq!(corpus.dim(), Some(16));
    assert_eq!(corpus.videos[0], v);
}

#[test]
fn modality_length_mismatch_names_video() {
    let dir = tempfile::tempdir().unwrap();
    let v = video("clip7", 10, 16, Labels::default(), vec![]);
    write_raw(dir.path(), &v);
    let short = Tensor::zeros(vec![9, 16]);
    write_features(&dir.path().join("clip7.flow.mcwf"), &short).unwrap();
    let err = load_corpus_dir(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
    assert!(err.to_string().contains("clip7"), "{err}");
}

#[test]
fn label_inconsistent_with_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let gt = vec![GtInterval {
        onset_frame: 1,
        offset_frame: 16,
        class: ExprClass::Mae,
    }];
    let v = video("x", 10, 4, Labels::new(false, false), gt);
    write_raw(dir.path(), &v);
    let err = load_corpus_dir(dir.path()).unwrap_err();
    assert!(err.to_string().contains("inconsistent"), "{err}");
}

#[test]
fn missing_modality_and_bad_header() {
    let dir = tempfile::tempdir().unwrap();
    let v = video("m", 10, 4, Labels::default(), vec![]);
    write_raw(dir.path(), &v);
    fs::remove_file(dir.path().join("m.flow.mcwf")).unwrap();
    let err = load_corpus_dir(dir.path()).unwrap_err();
    assert!(err.to_string().contains("missing flow"), "{err}");

    write_raw(dir.path(), &v);
    fs::write(dir.path().join("m.rgb.mcwf"), b"MCWX\x01\0\0\0\0\0\0\0\0\0\0\0").unwrap();
    let err = load_corpus_dir(dir.path()).unwrap_err();
    assert!(err.to_string().contains("malformed header"), "{err}");
}

#[test]
fn out_of_range_ground_truth_rejected() {
    let gt = vec![GtInterval {
        onset_frame: 0,
        offset_frame: 4,
        class: ExprClass::Me,
    }];
    let v = video("o", 10, 4, Labels::new(false, true), gt);
    assert!(Corpus::new(vec![v]).is_err());
}

#[test]
fn manifest_field_names() {
    let v = video("n", 2, 1, Labels::new(true, false), vec![GtInterval {
        onset_frame: 1,
        offset_frame: 8,
        class: ExprClass::Mae,
    }]);
    let json = serde_json::to_value(&v.record).unwrap();
    for key in ["id", "subject", "fps", "frame_count", "snippet_len", "labels", "ground_truth"] {
        assert!(json.get(key).is_some(), "{key}");
    }
    assert_eq!(json["labels"]["mae"], 1);
    assert_eq!(json["ground_truth"][0]["class"], "mae");
    let bad = r#"[{"id":"a","subject":"s","fps":30,"frame_count":80,"snippet_len":8,"labels":{"mae":0,"me":0},"extra":1}]"#;
    assert!(serde_json::from_str::<Vec<VideoRecord>>(bad).is_err());
}

#[test]
fn synth_is_deterministic_per_seed() {
    let spec = SynthSpec::default();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_corpus(&synth_corpus(5, 11, &spec).unwrap(), a.path()).unwrap();
    write_corpus(&synth_corpus(5, 11, &spec).unwrap(), b.path()).unwrap();
    let mut names: Vec<_> = fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 11);
    for name in names {
        let x = fs::read(a.path().join(&name)).unwrap();
        let y = fs::read(b.path().join(&name)).unwrap();
        assert_eq!(x, y, "{name:?}");
    }
    assert_ne!(synth_corpus(5, 12, &spec).unwrap(), synth_corpus(5, 11, &spec).unwrap());
}

#[test]
fn synth_durations_follow_class_convention() {
    let spec = SynthSpec::default();
    let corpus = synth_corpus(60, 3, &spec).unwrap();
    let (mut n_me, mut n_mae) = (0, 0);
    for v in &corpus.videos {
        for iv in v.record.ground_truth() {
            let frames = iv.offset_frame - iv.onset_frame + 1;
            let first = (iv.onset_frame - 1) / spec.g;
            let last = (iv.offset_frame - 1) / spec.g;
            let covered = last - first + 1;
            match iv.class {
                ExprClass::Me => {
                    n_me += 1;
                    // 0.5 s · 30 fps = 15 frames
                    assert!(frames <= 15);
                    assert!((1..=2).contains(&covered));
                }
                ExprClass::Mae => {
                    n_mae += 1;
                    let secs = frames as f64 / spec.fps;
                    assert!(secs > 0.5 && secs <= 4.0, "{secs}");
                }
            }
        }
    }
    assert!(n_me > 10 && n_mae > 10);
}

#[test]
fn oversized_snippets_are_a_config_error() {
    let spec = SynthSpec {
        g: 16,
        ..SynthSpec::default()
    };
    assert!(matches!(synth_corpus(1, 0, &spec), Err(Error::Config(_))));
    let spec = SynthSpec {
        t_min: 9,
        ..SynthSpec::default()
    };
    assert!(matches!(synth_corpus(1, 0, &spec), Err(Error::Config(_))));
}

/// Welch two-sample t statistic and two-sided p-value.
fn welch_p(a: &[f64], b: &[f64]) -> f64 {
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let var = |x: &[f64], m: f64| x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64;
    let (ma, mb) = (mean(a), mean(b));
    let (va, vb) = (var(a, ma) / a.len() as f64, var(b, mb) / b.len() as f64);
    let t = (ma - mb) / (va + vb).sqrt();
    let df = (va + vb).powi(2)
        / (va.powi(2) / (a.len() - 1) as f64 + vb.powi(2) / (b.len() - 1) as f64);
    2.0 * (1.0 - StudentsT::new(0.0, 1.0, df).unwrap().cdf(t.abs()))
}

fn snippet_means(corpus: &Corpus) -> (Vec<f64>, Vec<f64>) {
    let (mut fg, mut bg) = (Vec::new(), Vec::new());
    for v in &corpus.videos {
        let g = v.record.snippet_len;
        let mut is_fg = vec![false; v.snippets()];
        for iv in v.record.ground_truth() {
            for t in (iv.onset_frame - 1) / g..iv.offset_frame / g {
                is_fg[t] = true;
            }
        }
        for (t, &f) in is_fg.iter().enumerate() {
            let row = v.rgb.values.row(t);
            let m = row.iter().sum::<f64>() / row.len() as f64;
            if f { fg.push(m) } else { bg.push(m) }
        }
    }
    (fg, bg)
}

#[test]
fn zero_effect_is_indistinguishable() {
    let spec = SynthSpec {
        effect_size: 0.0,
        ..SynthSpec::default()
    };
    let (fg, bg) = snippet_means(&synth_corpus(100, 5, &spec).unwrap());
    let p = welch_p(&fg, &bg);
    assert!(p > 0.01, "p = {p}");
}

#[test]
fn planted_signal_is_along_class_direction() {
    let spec = SynthSpec {
        effect_size: 2.0,
        ..SynthSpec::default()
    };
    let corpus = synth_corpus(40, 5, &spec).unwrap();
    // Mean of class foreground snippets has norm near effect_size; background mean near zero.
    let mut sums = [vec![0.0; spec.d], vec![0.0; spec.d], vec![0.0; spec.d]];
    let mut counts = [0usize; 3];
    for v in &corpus.videos {
        let mut class_of = vec![2usize; v.rgb.values.shape()[0]];
        for iv in v.record.ground_truth() {
            for slot in &mut class_of[(iv.onset_frame - 1) / 8..iv.offset_frame / 8] {
                *slot = iv.class.column();
            }
        }
        for (i, &c) in class_of.iter().enumerate() {
            counts[c] += 1;
            for (acc, x) in sums[c].iter_mut().zip(v.rgb.values.row(i)) {
                *acc += x;
            }
        }
    }
    let norm = |c: usize| sums[c].iter().map(|x| (x / counts[c] as f64).powi(2)).sum::<f64>().sqrt();
    assert!((norm(0) - 2.0).abs() < 0.5, "mae {}", norm(0));
    assert!((norm(1) - 2.0).abs() < 0.8, "me {}", norm(1));
    assert!(norm(2) < 0.4, "bg {}", norm(2));
}

#[test]
fn subsample_contracts() {
    assert_eq!(subsample_indices(250, 250, 1), (0..250).collect::<Vec<_>>());
    let idx = subsample_indices(300, 250, 1);
    assert_eq!(idx.len(), 250);
    assert!(idx.windows(2).all(|w| w[0] < w[1]));
    let idx = subsample_indices(40, 100, 2);
    assert_eq!(idx.len(), 100);
    assert!(idx.windows(2).all(|w| w[0] <= w[1]));
    for t in 0..40 {
        assert!(idx.contains(&t));
    }
}

#[test]
fn subsample_applies_same_indices_to_both_streams() {
    let t = 300;
    let marker = |modality, offset: f64| FeatureMatrix {
        video_id: "m".into(),
        modality,
        values: Tensor::new(vec![t, 2], (0..t).flat_map(|i| [i as f64, offset]).collect()).unwrap(),
    };
    let (rgb, flow) = (marker(Modality::Rgb, 1.0), marker(Modality::Flow, 2.0));
    let (r, f, idx) = subsample_snippets(&rgb, &flow, 250, 9);
    for (k, &i) in idx.iter().enumerate() {
        assert_eq!(r.values.row(k)[0], i as f64);
        assert_eq!(f.values.row(k)[0], i as f64);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn synth_round_trips_through_files(seed in 0u64..1000, n in 1usize..4) {
        let spec = SynthSpec { d: 8, t_min: 12, t_max: 30, ..SynthSpec::default() };
        let corpus = synth_corpus(n, seed, &spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus(&corpus, dir.path()).unwrap();
        let back = load_corpus_dir(dir.path()).unwrap();
        prop_assert_eq!(back, corpus);
    }
}
