use num_rational::Ratio;
use performer_core::data::{assemble, synth_corpus, CorpusSpec, Example, SplitFractions};
use performer_core::multimodal::{
    ablation_run, evaluate_classifier, train_classifier, variant_examples, ClfExample, ClfOptions, ConfusionMatrix,
    InputVariant, LabelSet, MultimodalConfig, MultimodalModel,
};
use performer_core::numerics::Tape;
use performer_core::preprocess::Passbands;
use performer_core::reconstructor::{ReconstructorModel, TrainSchedule};
use performer_core::spa::StageConfig;
use performer_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> MultimodalConfig {
    MultimodalConfig {
        d_model: 16,
        heads: 2,
        stem_channels: 2,
        ..Default::default()
    }
}

fn wave(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (f, p): (f64, f64) = (rng.gen_range(0.02..0.2), rng.gen_range(0.0..6.0));
    (0..512).map(|i| (i as f64 * f + p).sin()).collect()
}

#[test]
fn fused_sequence_has_class_token_and_two_groups() {
    let m = MultimodalModel::<f64>::new(small(), LabelSet::Cvd4, 1).unwrap();
    let (a, b) = (wave(1), wave(2));
    let t = m.fused_tokens(&[&a, &b]).unwrap();
    assert_eq!(t.shape(), &[33, 16]);
    let single = MultimodalModel::<f64>::new(MultimodalConfig { modalities: 1, ..small() }, LabelSet::Cvd4, 1).unwrap();
    assert_eq!(single.fused_tokens(&[&a]).unwrap().shape(), &[17, 16]);
    assert!(matches!(m.fused_tokens(&[&a]), Err(Error::Input(_))));
    assert!(matches!(m.fused_tokens(&[&a, &a[..100]]), Err(Error::Input(_))));
}

#[test]
fn shared_stem_groups_differ_by_modality_embeddings() {
    let cfg = MultimodalConfig { shared_stem: true, ..small() };
    let m = MultimodalModel::<f64>::new(cfg, LabelSet::Binary, 2).unwrap();
    let w = wave(3);
    let t = m.fused_tokens(&[&w, &w]).unwrap();
    let t0 = m.params().get("mm.type.0").unwrap().data();
    let t1 = m.params().get("mm.type.1").unwrap().data();
    for i in 0..16 {
        for j in 0..16 {
            let diff = t.get(&[1 + i, j]) - t.get(&[17 + i, j]);
            assert!((diff - (t0[j] - t1[j])).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_model_only_class_row_can_be_nonzero() {
    let mut m = MultimodalModel::<f64>::zeroed(small(), LabelSet::Binary).unwrap();
    m.params_mut().set("mm.cls", &[0.5; 16]).unwrap();
    let z = vec![0.0; 512];
    let t = m.fused_tokens(&[&z, &z]).unwrap();
    assert!(t.row(0).iter().all(|&v| v == 0.5));
    assert!(t.data()[16..].iter().all(|&v| v == 0.0));
}

#[test]
fn zero_model_predicts_uniform_distribution() {
    for labels in [LabelSet::Binary, LabelSet::Cvd4] {
        let m = MultimodalModel::<f64>::zeroed(small(), labels).unwrap();
        let p = m.classify(&[&wave(4), &wave(5)]).unwrap();
        assert!(p.iter().all(|&v| v == 1.0 / labels.len() as f64));
    }
}

#[test]
fn class_token_is_never_rotated() {
    let layout = small().layout();
    for groups in 1..8 {
        let perm = layout.permutation(groups);
        let inv = layout.inverse_permutation(groups);
        let wraps = layout.wrap_rows(groups);
        for g in 0..groups {
            assert_eq!(perm[g * 33], g * 33);
            assert_eq!(inv[g * 33], g * 33);
            assert!(!wraps.contains(&(g * 33)));
        }
    }
}

#[test]
fn swapping_inputs_without_modality_embeddings_permutes_groups() {
    let cfg = MultimodalConfig { shared_stem: true, depth: 0, ..small() };
    let mut m = MultimodalModel::<f64>::new(cfg, LabelSet::Cvd4, 6).unwrap();
    m.params_mut().set("mm.type.0", &[0.0; 16]).unwrap();
    m.params_mut().set("mm.type.1", &[0.0; 16]).unwrap();
    let (a, b) = (wave(7), wave(8));
    let ab = m.fused_tokens(&[&a, &b]).unwrap();
    let ba = m.fused_tokens(&[&b, &a]).unwrap();
    for i in 0..16 {
        assert_eq!(ab.row(1 + i), ba.row(17 + i));
        assert_eq!(ab.row(17 + i), ba.row(1 + i));
    }
    let mut tape = Tape::new();
    let fused = m.fuse(&mut tape, &[vec![&a[..], &b[..]], vec![&b[..], &a[..]]]).unwrap();
    let cls = m.class_rows(&mut tape, fused, 2).unwrap();
    let rows = tape.tensor(cls);
    assert_eq!(rows.row(0), rows.row(1));
    assert_eq!(m.classify(&[&a, &b]).unwrap(), m.classify(&[&b, &a]).unwrap());
}

fn labelled(n: usize) -> Vec<ClfExample<f64>> {
    (0..n)
        .map(|i| ClfExample {
            windows: vec![wave(100 + i as u64), wave(200 + i as u64)],
            label: i % 2,
        })
        .collect()
}

#[test]
fn training_rejects_bad_label_sets() {
    let mut m = MultimodalModel::<f64>::new(small(), LabelSet::Binary, 9).unwrap();
    let mut one_class = labelled(4);
    for e in &mut one_class {
        e.label = 1;
    }
    let sched = TrainSchedule { epochs: 1, ..Default::default() };
    assert!(matches!(train_classifier(&mut m, &one_class, &sched, &ClfOptions::default()), Err(Error::Input(_))));
    let mut outside = labelled(4);
    outside[0].label = 2;
    assert!(matches!(train_classifier(&mut m, &outside, &sched, &ClfOptions::default()), Err(Error::Input(_))));
    assert!(matches!(LabelSet::Cvd4.index_of("AFIB"), Err(Error::Input(_))));
    assert_eq!(LabelSet::Cvd4.index_of("MI").unwrap(), 2);
}

#[test]
fn zero_learning_rate_keeps_loss_constant() {
    let mut m = MultimodalModel::<f64>::new(small(), LabelSet::Binary, 10).unwrap();
    let sched = TrainSchedule { lr: 0.0, epochs: 3, batch_size: 4, ..Default::default() };
    let before = m.params().clone();
    let r = train_classifier(&mut m, &labelled(4), &sched, &ClfOptions::default()).unwrap();
    // Shuffling reorders the batch sum, so epochs agree up to rounding only.
    assert!(r.epoch_losses.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-12), "{:?}", r.epoch_losses);
    for (name, t) in before.iter() {
        assert_eq!(m.params().get(name).unwrap().data(), t.data(), "{name}");
    }
}

#[test]
fn separable_pair_converges_with_frozen_encoder() {
    let mut m = MultimodalModel::<f64>::new(small(), LabelSet::Binary, 11).unwrap();
    let before = m.params().get("mm.enc.b0.attn.q.w").unwrap().clone();
    let data = labelled(2);
    let sched = TrainSchedule { lr: 1e-2, epochs: 2000, batch_size: 2, seed: 0, max_steps: Some(2000), grad_clip: None };
    let opts = ClfOptions { frozen_encoder: true, ..Default::default() };
    let r = train_classifier(&mut m, &data, &sched, &opts).unwrap();
    assert!(r.steps <= 2000);
    assert!(*r.epoch_losses.last().unwrap() < 0.01, "{:?}", r.epoch_losses.last());
    assert_eq!(m.params().get("mm.enc.b0.attn.q.w").unwrap(), &before);
    assert_eq!(evaluate_classifier(&m, &data).unwrap().accuracy(), 1.0);
}

#[test]
fn class_weights_change_the_loss_only_under_imbalance() {
    let mut data = labelled(6);
    data[1].label = 0;
    let run = |weighting: bool| {
        let mut m = MultimodalModel::<f64>::new(small(), LabelSet::Binary, 12).unwrap();
        let sched = TrainSchedule { lr: 0.0, epochs: 1, batch_size: 6, ..Default::default() };
        let opts = ClfOptions { class_weighting: weighting, ..Default::default() };
        train_classifier(&mut m, &data, &sched, &opts).unwrap().epoch_losses[0]
    };
    assert_ne!(run(true), run(false));
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let mut m = MultimodalModel::<f64>::new(small(), LabelSet::Binary, 13).unwrap();
        let sched = TrainSchedule { lr: 1e-3, epochs: 2, batch_size: 3, seed: 4, ..Default::default() };
        train_classifier(&mut m, &labelled(6), &sched, &ClfOptions::default()).unwrap().epoch_losses
    };
    assert_eq!(run(), run());
}

#[test]
fn confusion_rows_are_exact_fractions() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let truths: Vec<usize> = (0..97).map(|_| rng.gen_range(0..4)).collect();
    let preds: Vec<usize> = (0..97).map(|_| rng.gen_range(0..4)).collect();
    let cm = ConfusionMatrix::new(&preds, &truths, 4).unwrap();
    for row in cm.row_normalized::<Ratio<i64>>() {
        assert_eq!(row.iter().sum::<Ratio<i64>>(), Ratio::from_integer(1));
    }
}

#[test]
fn checkpoint_round_trip() {
    let m = MultimodalModel::<f32>::new(MultimodalConfig { d_model: 8, heads: 2, ..Default::default() }, LabelSet::Cvd4, 15).unwrap();
    let dir = tempfile::tempdir().unwrap();
    m.save(dir.path(), 15).unwrap();
    let (back, _) = MultimodalModel::<f32>::load(dir.path(), m.config(), LabelSet::Cvd4).unwrap();
    let (a, b): (Vec<f32>, Vec<f32>) = (wave(1).iter().map(|&v| v as f32).collect(), wave(2).iter().map(|&v| v as f32).collect());
    assert_eq!(back.classify(&[&a, &b]).unwrap(), m.classify(&[&a, &b]).unwrap());
    assert!(matches!(MultimodalModel::<f32>::load(dir.path(), m.config(), LabelSet::Binary), Err(Error::Config(_))));
}

fn labelled_dataset(subjects: usize, seed: u64) -> Vec<Example<f32>> {
    let spec = CorpusSpec { subjects, duration_s: 6.0, n_classes: Some(4), seed, ..Default::default() };
    let recs = synth_corpus::<f32>(&spec, Some(&LabelSet::Cvd4.owned_names())).unwrap();
    assemble(&recs, &SplitFractions { train: 1.0, val: 0.0, test: 0.0 }, 0, &Passbands::default())
        .unwrap()
        .examples
}

#[test]
fn ablation_needs_reconstructor_for_reconstructed_variants() {
    let train = labelled_dataset(4, 1);
    let refs: Vec<&Example<f32>> = train.iter().collect();
    let sched = TrainSchedule { epochs: 1, ..Default::default() };
    let err = ablation_run(&refs, &refs, LabelSet::Cvd4, &InputVariant::ALL, &small(), &sched, &ClfOptions::default(), None)
        .unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(matches!(variant_examples(InputVariant::PpgReconEcg, &refs, None, LabelSet::Cvd4), Err(Error::Config(_))));
}

#[test]
fn ablation_table_has_a_row_per_class_and_column_per_variant() {
    let train = labelled_dataset(4, 2);
    let refs: Vec<&Example<f32>> = train.iter().collect();
    let recon = ReconstructorModel::<f32>::new(StageConfig { d_model: 8, heads: 2, stem_channels: 2, ..Default::default() }, 3).unwrap();
    let sched = TrainSchedule { epochs: 1, batch_size: 8, ..Default::default() };
    let cfg = MultimodalConfig { d_model: 8, heads: 2, stem_channels: 2, ..Default::default() };
    let table = ablation_run(&refs, &refs, LabelSet::Cvd4, &InputVariant::ALL, &cfg, &sched, &ClfOptions::default(), Some(&recon))
        .unwrap();
    assert_eq!(table.accuracy.len(), 4);
    assert!(table.accuracy.iter().all(|row| row.len() == 5));
    let text = table.to_string();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "class,PPG only,ECG only,Reconstructed ECG only,PPG + ECG,PPG + reconstructed ECG"
    );
    let first: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(first, vec!["CAD", "CHF", "MI", "HOTN", "overall"]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]
    #[test]
    fn classify_returns_a_distribution(seed in any::<u64>(), scale in 0.1f64..50.0) {
        let m = MultimodalModel::<f64>::new(small(), LabelSet::Cvd4, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..512).map(|_| rng.gen_range(-scale..scale)).collect();
        let b: Vec<f64> = (0..512).map(|_| rng.gen_range(-scale..scale)).collect();
        let p = m.classify(&[&a, &b]).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
    }
}
