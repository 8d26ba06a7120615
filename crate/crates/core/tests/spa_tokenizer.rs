use nalgebra::DMatrix;
use performer_core::numerics::{ParamStore, Tape, Tensor};
use performer_core::preprocess::{Channel, SignalWindow, WindowSource};
use performer_core::rng::substream;
use performer_core::spa::geometry::{patch_of, shifted_patch_of};
use performer_core::spa::{
    cyclic_shift, depatchify, embed, embed_window, init_stem, patch_merge, patch_split, unshift, window_input,
    ShiftLayout, StageConfig, Tokens,
};
use performer_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn window(values: Vec<f64>) -> SignalWindow<f64> {
    let source = WindowSource {
        subject_id: "t".into(),
        start: 0,
    };
    SignalWindow::new(values, Channel::Ppg, source, None).unwrap()
}

fn wave(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..512).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn stem_store(cfg: &StageConfig, seed: u64) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    init_stem(&mut store, "", cfg.patch_sizes[0], cfg, &mut substream(seed, "test")).unwrap();
    store
}

fn zero_all(store: &mut ParamStore<f64>) {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for n in names {
        let len = store.get(&n).unwrap().len();
        store.set(&n, &vec![0.0; len]).unwrap();
    }
}

/// Stage tokens on a fresh tape: `groups` windows of `count` random rows each.
fn tokens_at(tape: &mut Tape<f64>, rng: &mut ChaCha8Rng, stage: usize, groups: usize, d: usize) -> (Tokens, Tensor<f64>) {
    let patch = 32 << stage;
    let count = 512 / patch;
    let x = random(rng, &[groups * count, d]);
    let v = tape.input(x.clone());
    (Tokens::new(v, stage, patch, groups).unwrap(), x)
}

#[test]
fn token_schedule_is_exact() {
    let cfg = StageConfig::default();
    let counts: Vec<usize> = (0..cfg.stages()).map(|s| cfg.token_count(s)).collect();
    assert_eq!(counts, vec![16, 8, 4, 2, 1]);
    for s in 0..cfg.stages() {
        assert_eq!(cfg.token_count(s) * cfg.patch_sizes[s], 512);
    }
}

#[test]
fn merges_trace_the_hierarchy() {
    let cfg = StageConfig {
        d_model: 8,
        heads: 2,
        ..Default::default()
    };
    let mut store = stem_store(&cfg, 1);
    let mut rng = substream(2, "merge");
    for s in 1..5 {
        performer_core::spa::init_linear(&mut store, &format!("m{s}"), 16, 8, &mut rng).unwrap();
    }
    let mut tape = Tape::new();
    let w = wave(3);
    let x = window_input(&mut tape, &[&w]).unwrap();
    let mut t = embed(&mut tape, &store, "", x, 32).unwrap();
    let mut trace = vec![(t.count, t.patch_size)];
    for s in 1..5 {
        t = patch_merge(&mut tape, &store, &format!("m{s}"), t, None).unwrap();
        assert_eq!(t.stage, s);
        assert_eq!(tape.dims(t.var), (t.count, 8));
        trace.push((t.count, t.patch_size));
    }
    assert_eq!(trace, vec![(16, 32), (8, 64), (4, 128), (2, 256), (1, 512)]);
    let err = patch_merge(&mut tape, &store, "m1", t, None).unwrap_err();
    assert!(matches!(err, Error::State(_)), "{err}");
}

#[test]
fn embed_produces_sixteen_tokens() {
    let cfg = StageConfig::default();
    let store = stem_store(&cfg, 4);
    let seq = embed_window(&store, "", &window(wave(5)), 32).unwrap();
    assert_eq!(seq.token_count(), 16);
    assert_eq!(seq.patch_size, 32);
    assert_eq!(seq.tokens.shape(), &[16, 64]);
    assert!(!seq.shifted);
}

#[test]
fn zero_stem_gives_zero_tokens() {
    let cfg = StageConfig::default();
    let mut store = stem_store(&cfg, 4);
    zero_all(&mut store);
    let seq = embed_window(&store, "", &window(vec![0.0; 512]), 32).unwrap();
    assert!(seq.tokens.data().iter().all(|&v| v == 0.0));
}

#[test]
fn first_patch_change_reaches_only_through_conv_halo() {
    let cfg = StageConfig::default();
    let store = stem_store(&cfg, 6);
    let a = wave(7);
    let mut b = a.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for v in &mut b[..32] {
        *v = rng.gen_range(-1.0..1.0);
    }
    let ta = embed_window(&store, "", &window(a), 32).unwrap();
    let tb = embed_window(&store, "", &window(b), 32).unwrap();
    assert_ne!(ta.tokens.row(0), tb.tokens.row(0));
    assert_ne!(ta.tokens.row(1), tb.tokens.row(1), "halo of the 7-wide kernel reaches token 1");
    for r in 2..16 {
        assert_eq!(ta.tokens.row(r), tb.tokens.row(r), "row {r}");
    }
}

#[test]
fn merge_with_copy_projection_selects_even_tokens() {
    let d = 6;
    let mut store = ParamStore::new();
    // [I; 0]: the first half of the concatenated pair passes through.
    let mut w = vec![0.0; 2 * d * d];
    for i in 0..d {
        w[i * d + i] = 1.0;
    }
    store.insert("m.w", Tensor::new(&[2 * d, d], w).unwrap()).unwrap();
    store.insert("m.b", Tensor::zeros(&[d])).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for stage in 0..4 {
        let mut tape = Tape::new();
        let (t, x) = tokens_at(&mut tape, &mut rng, stage, 3, d);
        let m = patch_merge(&mut tape, &store, "m", t, None).unwrap();
        let out = tape.tensor(m.var);
        for k in 0..3 * t.count / 2 {
            assert_eq!(out.row(k), x.row(2 * k));
        }
    }
}

#[test]
fn split_with_duplicating_projection_copies_parent() {
    let d = 5;
    let mut store = ParamStore::new();
    // [I I]: both children receive the parent token.
    let mut w = vec![0.0; d * 2 * d];
    for i in 0..d {
        w[i * 2 * d + i] = 1.0;
        w[i * 2 * d + d + i] = 1.0;
    }
    store.insert("s.w", Tensor::new(&[d, 2 * d], w).unwrap()).unwrap();
    store.insert("s.b", Tensor::zeros(&[2 * d])).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for stage in 1..5 {
        let mut tape = Tape::new();
        let (t, x) = tokens_at(&mut tape, &mut rng, stage, 2, d);
        let s = patch_split(&mut tape, &store, "s", t, None).unwrap();
        assert_eq!((s.count, s.patch_size, s.stage), (2 * t.count, t.patch_size / 2, stage - 1));
        let out = tape.tensor(s.var);
        for k in 0..2 * t.count {
            assert_eq!(out.row(2 * k), x.row(k));
            assert_eq!(out.row(2 * k + 1), x.row(k));
        }
    }
}

#[test]
fn split_at_stage_zero_is_rejected() {
    let mut tape = Tape::new();
    let (t, _) = tokens_at(&mut tape, &mut ChaCha8Rng::seed_from_u64(0), 0, 1, 4);
    let store = ParamStore::<f64>::new();
    assert!(matches!(patch_split(&mut tape, &store, "s", t, None), Err(Error::State(_))));
}

#[test]
fn merge_then_split_round_trips_shape() {
    let d = 4;
    let mut store = ParamStore::new();
    let mut rng = substream(11, "rt");
    performer_core::spa::init_linear(&mut store, "m", 2 * d, d, &mut rng).unwrap();
    performer_core::spa::init_linear(&mut store, "s", d, 2 * d, &mut rng).unwrap();
    for stage in 0..4 {
        let mut tape = Tape::new();
        let (t, _) = tokens_at(&mut tape, &mut ChaCha8Rng::seed_from_u64(stage as u64), stage, 2, d);
        let m = patch_merge(&mut tape, &store, "m", t, None).unwrap();
        let s = patch_split(&mut tape, &store, "s", m, None).unwrap();
        assert_eq!(tape.dims(s.var), tape.dims(t.var));
        assert_eq!((s.stage, s.count, s.patch_size), (t.stage, t.count, t.patch_size));
    }
}

#[test]
fn every_interior_boundary_is_covered_by_a_shifted_patch() {
    for k in 1..=15 {
        let (left, right) = (32 * k - 1, 32 * k);
        assert_ne!(patch_of(left, 32), patch_of(right, 32));
        assert_eq!(shifted_patch_of(left, 512, 32), shifted_patch_of(right, 512, 32), "boundary {k}");
    }
}

#[test]
fn shifted_flag_is_enforced() {
    let mut tape = Tape::new();
    let (t, _) = tokens_at(&mut tape, &mut ChaCha8Rng::seed_from_u64(0), 0, 1, 4);
    let layout = ShiftLayout::single(16);
    assert!(matches!(unshift(&mut tape, t, &layout), Err(Error::State(_))));
    let s = cyclic_shift(&mut tape, t, &layout).unwrap();
    assert!(s.shifted);
    assert!(matches!(cyclic_shift(&mut tape, s, &layout), Err(Error::State(_))));
}

#[test]
fn depatchify_bias_only_head_gives_constant_waveform() {
    let d = 8;
    let mut store = ParamStore::new();
    store.insert("h.w", Tensor::zeros(&[d, 32])).unwrap();
    store.insert("h.b", Tensor::full(&[32], 0.375)).unwrap();
    let mut tape = Tape::new();
    let (t, _) = tokens_at(&mut tape, &mut ChaCha8Rng::seed_from_u64(1), 0, 2, d);
    let y = depatchify(&mut tape, &store, "h", t).unwrap();
    assert_eq!(tape.dims(y), (2, 512));
    assert!(tape.value(y).iter().all(|&v| v == 0.375));

    store.set("h.b", &[0.0; 32]).unwrap();
    let mut tape = Tape::new();
    let zeros = tape.input(Tensor::zeros(&[16, d]));
    let z = depatchify(&mut tape, &store, "h", Tokens::new(zeros, 0, 32, 1).unwrap()).unwrap();
    assert!(tape.value(z).iter().all(|&v| v == 0.0));
}

#[test]
fn depatchify_rejects_wrong_stage_or_shift() {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new();
    let (t1, _) = tokens_at(&mut tape, &mut ChaCha8Rng::seed_from_u64(1), 1, 1, 4);
    assert!(matches!(depatchify(&mut tape, &store, "h", t1), Err(Error::State(_))));
    let (t0, _) = tokens_at(&mut tape, &mut ChaCha8Rng::seed_from_u64(1), 0, 1, 4);
    let s = cyclic_shift(&mut tape, t0, &ShiftLayout::single(16)).unwrap();
    assert!(matches!(depatchify(&mut tape, &store, "h", s), Err(Error::State(_))));
}

#[test]
fn pseudo_inverse_head_recovers_the_window() {
    // Identity stem with one channel, random 32 → 32 projection, head = pinv(projection).
    let cfg = StageConfig {
        d_model: 32,
        heads: 4,
        stem_channels: 1,
        ..Default::default()
    };
    let mut store = stem_store(&cfg, 12);
    let mut kernel = vec![0.0; 7];
    kernel[3] = 1.0;
    store.set("stem.kernel", &kernel).unwrap();
    store.set("stem.bias", &[0.0]).unwrap();
    store.set("embed.b", &[0.0; 32]).unwrap();
    store.set("pos.s0", &[0.0; 16 * 32]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let proj: Vec<f64> = (0..32 * 32).map(|_| rng.gen_range(-1.0..1.0)).collect();
    store.set("embed.w", &proj).unwrap();
    let pinv = DMatrix::from_row_slice(32, 32, &proj).pseudo_inverse(1e-12).unwrap();
    let head: Vec<f64> = (0..32).flat_map(|i| (0..32).map(move |j| (i, j))).map(|(i, j)| pinv[(i, j)]).collect();
    store.insert("head.w", Tensor::new(&[32, 32], head).unwrap()).unwrap();
    store.insert("head.b", Tensor::zeros(&[32])).unwrap();

    let w = wave(14);
    let mut tape = Tape::new();
    let x = window_input(&mut tape, &[&w]).unwrap();
    let t = embed(&mut tape, &store, "", x, 32).unwrap();
    let y = depatchify(&mut tape, &store, "head", t).unwrap();
    let err = tape.value(y).iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-4, "max error {err:e}");
}

fn layouts() -> impl Strategy<Value = (ShiftLayout, usize)> {
    (0usize..3, prop::collection::vec(1usize..20, 1..4), 1usize..4)
        .prop_map(|(pinned, segments, groups)| (ShiftLayout { pinned, segments }, groups))
}

proptest! {
    #[test]
    fn shift_unshift_is_a_bitwise_involution((layout, groups) in layouts(), seed in any::<u64>()) {
        let rows = layout.tokens_per_group() * groups;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[rows, 3]);
        let mut tape = Tape::new();
        let v = tape.input(x.clone());
        let t = Tokens { var: v, stage: 0, count: layout.tokens_per_group(), patch_size: 32, groups, shifted: false };
        let s = cyclic_shift(&mut tape, t, &layout).unwrap();
        let u = unshift(&mut tape, s, &layout).unwrap();
        prop_assert!(!u.shifted);
        prop_assert_eq!(tape.value(u.var), x.data());
        for g in 0..groups {
            for p in 0..layout.pinned {
                let r = g * layout.tokens_per_group() + p;
                let shifted = tape.tensor(s.var);
                prop_assert_eq!(shifted.row(r), x.row(r));
            }
        }
    }

    #[test]
    fn shifted_partition_tiles_the_axis(k in 0usize..6) {
        let patch = 1usize << k.max(1);
        let len = 512;
        let mut seen = vec![0; len];
        for j in 0..len / patch {
            for s in performer_core::spa::geometry::shifted_patch(len, patch, j) {
                seen[s] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
    }
}
