use candle_core::{DType, Device, Tensor, Var};
use ipt_core::dataset::{rasterize, segment, valid_frames, DatasetSchema, IptEvent};
use ipt_core::downstream::marginalize;
use ipt_core::encoder::{weighted_sum, LayerWeights, StubEncoder, SAMPLE_RATE, WINDOW_SAMPLES};
use ipt_core::metrics::{event_f1, frame_f1, match_events};
use ipt_core::objective::{bce, total_loss, weighted_bce, LossWeights, Targets};
use ipt_core::downstream::PosteriorSet;
use ipt_core::postprocess::{decode_events, decode_runs, DecodeConfig};
use ndarray::Array2;
use proptest::prelude::*;

const FR: f64 = 75.0;

fn tensor(v: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_slice(v, shape, &Device::Cpu).unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_scalar::<f64>().unwrap()
}

// ---------------------------------------------------------------- downstream

fn factor_strategy() -> impl Strategy<Value = (usize, usize, usize, Vec<f64>)> {
    (1usize..=10, 1usize..=8, 1usize..=16).prop_flat_map(|(t, i, p)| {
        (Just(t), Just(i), Just(p), prop::collection::vec(-5.0f64..5.0, t * i * p))
    })
}

proptest! {
    #[test]
    fn marginals_agree_per_frame((t, ni, np, d) in factor_strategy()) {
        let (pi, pp) = marginalize(&tensor(&d, &[t, ni, np])).unwrap();
        let pi = pi.to_vec2::<f64>().unwrap();
        let pp = pp.to_vec2::<f64>().unwrap();
        for f in 0..t {
            let a: f64 = pi[f].iter().sum();
            let b: f64 = pp[f].iter().sum();
            prop_assert!((a - b).abs() < 1e-4);
        }
    }
}

// ---------------------------------------------------------------- encoder

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn layer_weights_sum_to_one(raw in prop::collection::vec(-30.0f64..30.0, 1..20)) {
        let w = LayerWeights::from_raw(tensor(&raw, &[raw.len()])).normalized().unwrap();
        let s: f64 = w.to_vec1::<f64>().unwrap().iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn weighted_sum_is_linear(
        raw in prop::collection::vec(-2.0f64..2.0, 3),
        s1 in prop::collection::vec(-1.0f64..1.0, 3 * 4 * 5),
        s2 in prop::collection::vec(-1.0f64..1.0, 3 * 4 * 5),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let w = LayerWeights::from_raw(tensor(&raw, &[3]));
        let t1 = tensor(&s1, &[3, 4, 5]);
        let t2 = tensor(&s2, &[3, 4, 5]);
        let mixed = ((&t1 * a).unwrap() + (&t2 * b).unwrap()).unwrap();
        let lhs = weighted_sum(&mixed, &w).unwrap();
        let rhs = ((weighted_sum(&t1, &w).unwrap() * a).unwrap()
            + (weighted_sum(&t2, &w).unwrap() * b).unwrap())
        .unwrap();
        let diff = (lhs - rhs).unwrap().abs().unwrap().max_all().unwrap();
        prop_assert!(scalar(&diff) < 1e-5);
    }
}

#[test]
fn stub_is_a_function_of_wave_and_seed() {
    let wave: Vec<f32> = (0..WINDOW_SAMPLES)
        .map(|i| (i as f32 * 440.0 * std::f32::consts::TAU / SAMPLE_RATE as f32).sin() * 0.3)
        .collect();
    let w = Tensor::from_slice(&wave, (1, WINDOW_SAMPLES), &Device::Cpu).unwrap();
    let a = StubEncoder::new(5, 3, 16).encode_batch(&w, DType::F32).unwrap();
    let b = StubEncoder::new(5, 3, 16).encode_batch(&w, DType::F32).unwrap();
    let c = StubEncoder::new(6, 3, 16).encode_batch(&w, DType::F32).unwrap();
    let flat = |t: &Tensor| t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
    assert_eq!(flat(&a), flat(&b));
    assert_ne!(flat(&a), flat(&c));
    assert!(flat(&a).iter().all(|v| v.is_finite()));
}

// ---------------------------------------------------------------- objective

fn loss_case() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec(0.0f64..1.0, 2 * 3 * 4),
        prop::collection::vec(prop::bool::ANY, 2 * 3 * 4),
        prop::collection::vec(prop::bool::ANY, 2 * 3),
    )
        .prop_map(|(p, y, m)| {
            let y = y.into_iter().map(|b| f64::from(u8::from(b))).collect();
            let mut m: Vec<f64> = m.into_iter().map(|b| f64::from(u8::from(b))).collect();
            m[0] = 1.0;
            (p, y, m)
        })
}

proptest! {
    #[test]
    fn loss_is_non_negative((p, y, m) in loss_case(), w in prop::collection::vec(1.0f64..100.0, 4)) {
        let l = weighted_bce(&tensor(&p, &[2, 3, 4]), &tensor(&y, &[2, 3, 4]), &tensor(&m, &[2, 3]), &w).unwrap();
        prop_assert!(scalar(&l) >= 0.0);
    }

    #[test]
    fn padding_predictions_do_not_matter((p, y, m) in loss_case(), junk in prop::collection::vec(0.0f64..1.0, 2 * 3 * 4)) {
        let mask = tensor(&m, &[2, 3]);
        let target = tensor(&y, &[2, 3, 4]);
        let q: Vec<f64> = p
            .iter()
            .zip(&junk)
            .enumerate()
            .map(|(i, (&a, &b))| if m[i / 4] == 1.0 { a } else { b })
            .collect();
        let a = scalar(&bce(&tensor(&p, &[2, 3, 4]), &target, &mask).unwrap());
        let b = scalar(&bce(&tensor(&q, &[2, 3, 4]), &target, &mask).unwrap());
        prop_assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn positive_bce_decreases_in_pred(a in 0.001f64..0.998, d in 0.0005f64..0.5) {
        let b = (a + d).min(0.999);
        prop_assume!(b > a);
        let one = tensor(&[1.0], &[1, 1, 1]);
        let m = tensor(&[1.0], &[1, 1]);
        let la = scalar(&bce(&tensor(&[a], &[1, 1, 1]), &one, &m).unwrap());
        let lb = scalar(&bce(&tensor(&[b], &[1, 1, 1]), &one, &m).unwrap());
        prop_assert!(lb < la);
    }
}

/// Central differences of `f` around `x`.
fn numeric_grad(x: &[f64], shape: &[usize], h: f64, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut up = x.to_vec();
            let mut dn = x.to_vec();
            up[i] += h;
            dn[i] -= h;
            (f(&tensor(&up, shape)) - f(&tensor(&dn, shape))) / (2.0 * h)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn bce_gradient_matches_finite_differences(
        p in prop::collection::vec(0.05f64..0.95, 3 * 4 * 5),
        y in prop::collection::vec(prop::bool::ANY, 3 * 4 * 5),
        w in prop::collection::vec(1.0f64..10.0, 5),
    ) {
        let shape = [3, 4, 5];
        let y: Vec<f64> = y.into_iter().map(|b| f64::from(u8::from(b))).collect();
        let target = tensor(&y, &shape);
        let mask = tensor(&[1.0; 12], &[3, 4]);
        let f = |t: &Tensor| scalar(&weighted_bce(t, &target, &mask, &w).unwrap());
        let var = Var::from_tensor(&tensor(&p, &shape)).unwrap();
        let l = weighted_bce(var.as_tensor(), &target, &mask, &w).unwrap();
        let g = l.backward().unwrap().get(&var).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let num = numeric_grad(&p, &shape, 1e-5, &f);
        for (a, b) in g.iter().zip(&num) {
            prop_assert!((a - b).abs() <= 1e-4 * a.abs().max(b.abs()).max(1e-8), "{a} vs {b}");
        }
    }
}

#[test]
fn cbf_style_loss_skips_pitch() {
    let half = tensor(&[0.5], &[1, 1, 1]);
    let post = PosteriorSet {
        onset: Some(half.clone()),
        p_ipt: None,
        p_pitch: None,
        y_ipt: half.clone(),
        y_pitch: Some(half.clone()),
    };
    let tg = Targets {
        ipt: half.ones_like().unwrap(),
        pitch: half.zeros_like().unwrap(),
        onset: half.ones_like().unwrap(),
        mask: tensor(&[1.0], &[1, 1]),
    };
    let w = LossWeights::default();
    let (_, br) = total_loss(&post, &tg, &w, &[1.0], false).unwrap();
    assert_eq!(br.pitch, 0.0);
    let expect = (w.lambda_ipt + w.lambda_onset) * std::f64::consts::LN_2;
    assert!((br.total - expect).abs() < 1e-12);
}

// ---------------------------------------------------------------- postprocess

/// Brute force: every active gated frame starts an event that extends over
/// the following active, ungated frames.
fn decode_oracle(active: &[Vec<bool>], gate: &[bool]) -> Vec<(usize, usize, usize)> {
    let n = gate.len();
    let mut out = Vec::new();
    for (c, col) in active.iter().enumerate() {
        for s in 0..n {
            if col[s] && gate[s] {
                let mut e = s + 1;
                while e < n && col[e] && !gate[e] {
                    e += 1;
                }
                out.push((s, e, c));
            }
        }
    }
    out.sort();
    out
}

fn decode_case() -> impl Strategy<Value = (Vec<Vec<bool>>, Vec<bool>)> {
    (1usize..=30, 1usize..=3).prop_flat_map(|(n, k)| {
        (
            prop::collection::vec(prop::collection::vec(prop::bool::ANY, n), k),
            prop::collection::vec(prop::bool::ANY, n),
        )
    })
}

fn to_y(active: &[Vec<bool>]) -> Array2<f64> {
    let n = active[0].len();
    Array2::from_shape_fn((n, active.len()), |(t, c)| if active[c][t] { 0.9 } else { 0.1 })
}

fn spans(events: &[IptEvent]) -> Vec<(usize, usize, usize)> {
    let mut v: Vec<_> = events
        .iter()
        .map(|e| ((e.onset * FR).round() as usize, (e.offset * FR).round() as usize, e.label))
        .collect();
    v.sort();
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn decode_matches_oracle((active, gate) in decode_case()) {
        let mask: Vec<u8> = gate.iter().map(|&g| u8::from(g)).collect();
        let ev = decode_events(to_y(&active).view(), &mask, &DecodeConfig::default(), FR).unwrap();
        prop_assert_eq!(spans(&ev), decode_oracle(&active, &gate));
    }
}

proptest! {
    #[test]
    fn decoded_events_are_valid_and_ordered((active, gate) in decode_case()) {
        let mask: Vec<u8> = gate.iter().map(|&g| u8::from(g)).collect();
        let ev = decode_events(to_y(&active).view(), &mask, &DecodeConfig::default(), FR).unwrap();
        for e in &ev {
            prop_assert!(e.offset > e.onset);
        }
        for c in 0..active.len() {
            let mine: Vec<&IptEvent> = ev.iter().filter(|e| e.label == c).collect();
            for w in mine.windows(2) {
                prop_assert!(w[0].onset < w[1].onset);
                prop_assert!(w[0].offset <= w[1].onset + 1e-12);
            }
        }
    }

    #[test]
    fn more_gates_never_fewer_events((active, gate) in decode_case(), extra in prop::collection::vec(prop::bool::ANY, 30)) {
        let y = to_y(&active);
        let cfg = DecodeConfig::default();
        let base: Vec<u8> = gate.iter().map(|&g| u8::from(g)).collect();
        let more: Vec<u8> = gate.iter().zip(&extra).map(|(&g, &x)| u8::from(g || x)).collect();
        let a = decode_events(y.view(), &base, &cfg, FR).unwrap().len();
        let b = decode_events(y.view(), &more, &cfg, FR).unwrap().len();
        prop_assert!(b >= a);
        let none = vec![0u8; gate.len()];
        prop_assert!(decode_events(y.view(), &none, &cfg, FR).unwrap().is_empty());
    }
}

// ---------------------------------------------------------------- metrics

/// Largest number of compatible disjoint pairs, by exhaustive search.
fn max_matching(pred: &[IptEvent], reference: &[IptEvent], tol: f64) -> usize {
    fn go(i: usize, pred: &[IptEvent], reference: &[IptEvent], used: &mut Vec<bool>, tol: f64) -> usize {
        if i == pred.len() {
            return 0;
        }
        let mut best = go(i + 1, pred, reference, used, tol);
        for j in 0..reference.len() {
            if !used[j] && pred[i].label == reference[j].label && (pred[i].onset - reference[j].onset).abs() <= tol {
                used[j] = true;
                best = best.max(1 + go(i + 1, pred, reference, used, tol));
                used[j] = false;
            }
        }
        best
    }
    go(0, pred, reference, &mut vec![false; reference.len()], tol)
}

fn events(max: usize, classes: usize) -> impl Strategy<Value = Vec<IptEvent>> {
    prop::collection::vec((0..classes, 0u32..40, 1u32..20), 0..=max).prop_map(|v| {
        v.into_iter()
            .map(|(c, on, len)| {
                let onset = on as f64 * 0.03;
                IptEvent::new(c, onset, onset + len as f64 * 0.03, None).unwrap()
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn matching_is_maximum(pred in events(6, 2), reference in events(6, 2)) {
        let m = match_events(&pred, &reference, 0.05);
        prop_assert_eq!(m.len(), max_matching(&pred, &reference, 0.05));
        for &(i, j) in &m {
            prop_assert_eq!(pred[i].label, reference[j].label);
            prop_assert!((pred[i].onset - reference[j].onset).abs() <= 0.05);
        }
    }

    #[test]
    fn wider_tolerance_never_hurts(pred in events(6, 3), reference in events(6, 3)) {
        let cm = DatasetSchema::Toy.class_map();
        let a = event_f1(&pred, &reference, 0.05, &cm);
        let b = event_f1(&pred, &reference, 0.20, &cm);
        prop_assert!(b.micro >= a.micro);
    }

    #[test]
    fn identical_events_score_one(reference in events(6, 3)) {
        prop_assume!(!reference.is_empty());
        let cm = DatasetSchema::Toy.class_map();
        prop_assert_eq!(event_f1(&reference, &reference, 0.05, &cm).micro, 1.0);
    }

    #[test]
    fn relabeling_keeps_scores(pred in events(6, 4), reference in events(6, 4), shift in 1usize..4) {
        let cm = DatasetSchema::Toy.class_map();
        let perm = |v: &[IptEvent]| -> Vec<IptEvent> {
            v.iter().map(|e| IptEvent { label: (e.label + shift) % 4, ..*e }).collect()
        };
        let a = event_f1(&pred, &reference, 0.05, &cm);
        let b = event_f1(&perm(&pred), &perm(&reference), 0.05, &cm);
        prop_assert!((a.micro - b.micro).abs() < 1e-12);
        prop_assert!((a.macro_ - b.macro_).abs() < 1e-12);
    }
}

fn grid_pair() -> impl Strategy<Value = (usize, usize, Vec<u8>, Vec<u8>, Vec<u8>)> {
    (1usize..20, 1usize..5).prop_flat_map(|(n, k)| {
        (
            Just(n),
            Just(k),
            prop::collection::vec(0u8..2, n * k),
            prop::collection::vec(0u8..2, n * k),
            prop::collection::vec(0u8..2, n),
        )
    })
}

proptest! {
    #[test]
    fn frame_micro_is_flattened_f1((n, k, p, r, m) in grid_pair()) {
        let pa = Array2::from_shape_vec((n, k), p.clone()).unwrap();
        let ra = Array2::from_shape_vec((n, k), r.clone()).unwrap();
        let s = frame_f1(pa.view(), ra.view(), &m).unwrap();
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for i in 0..n * k {
            if m[i / k] == 0 {
                continue;
            }
            match (p[i], r[i]) {
                (1, 1) => tp += 1.0,
                (1, 0) => fp += 1.0,
                (0, 1) => fn_ += 1.0,
                _ => {}
            }
        }
        let expect = if tp + fp + fn_ == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
        prop_assert!((s.micro - expect).abs() < 1e-12);
    }

    #[test]
    fn frame_scores_ignore_class_order((n, k, p, r, m) in grid_pair()) {
        let pa = Array2::from_shape_vec((n, k), p).unwrap();
        let ra = Array2::from_shape_vec((n, k), r).unwrap();
        let rev = |a: &Array2<u8>| a.slice(ndarray::s![.., ..;-1]).to_owned();
        let a = frame_f1(pa.view(), ra.view(), &m).unwrap();
        let b = frame_f1(rev(&pa).view(), rev(&ra).view(), &m).unwrap();
        prop_assert!((a.micro - b.micro).abs() < 1e-12);
        prop_assert!((a.macro_ - b.macro_).abs() < 1e-12);
    }
}

// ---------------------------------------------------------------- dataset

/// Non-overlapping events at least `min_frames` long with a gap of at least one frame.
fn spaced_events(classes: usize, min_frames: u32) -> impl Strategy<Value = Vec<IptEvent>> {
    prop::collection::vec((0..classes, 1u32..20, min_frames..40), 0..12).prop_map(|v| {
        let mut t = 0u32;
        v.into_iter()
            .map(|(c, gap, len)| {
                t += gap;
                let e = IptEvent::new(c, t as f64 / FR, (t + len) as f64 / FR, Some(76)).unwrap();
                t += len;
                e
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn grids_satisfy_invariants(ev in spaced_events(4, 1), n in 720usize..1000) {
        let cm = DatasetSchema::Toy.class_map();
        let g = rasterize(&ev, n, &cm).unwrap();
        prop_assert!(g.check_invariants(true).is_ok());
    }

    #[test]
    fn rasterized_events_decode_back(ev in spaced_events(4, 2)) {
        let cm = DatasetSchema::Toy.class_map();
        let n = 720;
        let g = rasterize(&ev, n, &cm).unwrap();
        let y = g.ipt.mapv(f64::from);
        let cfg = DecodeConfig::default();
        let gated = decode_events(y.view(), g.onset.as_slice().unwrap(), &cfg, FR).unwrap();
        let runs = decode_runs(y.view(), &cfg, FR);
        for decoded in [&gated, &runs] {
            prop_assert_eq!(decoded.len(), ev.len());
            let mut want: Vec<_> = ev.iter().map(|e| (e.label, e.onset)).collect();
            want.sort_by(|a, b| a.1.total_cmp(&b.1));
            for (d, (label, onset)) in decoded.iter().zip(&want) {
                prop_assert_eq!(d.label, *label);
                prop_assert!((d.onset - onset).abs() <= 1.0 / FR + 1e-9);
            }
        }
    }

    #[test]
    fn segmentation_conserves_labelled_frames(ev in spaced_events(4, 1), extra in 0usize..WINDOW_SAMPLES) {
        let cm = DatasetSchema::Toy.class_map();
        let samples_len = WINDOW_SAMPLES + extra;
        let wave = vec![0.0f32; samples_len];
        let ev: Vec<IptEvent> = ev.into_iter().filter(|e| e.offset < samples_len as f64 / SAMPLE_RATE as f64).collect();
        let n_frames = ipt_core::encoder::frames_for_samples(WINDOW_SAMPLES);
        let windows = segment(&wave, &ev, "r", &cm, n_frames).unwrap();
        let total = valid_frames(samples_len, usize::MAX / 2, FR);
        let whole = rasterize(&ev, total, &cm).unwrap();
        // events never overlap, so each window edge costs at most one frame
        let edges = windows.len();
        let seg: i64 = windows.iter().map(|w| w.labels.ipt.iter().map(|&v| i64::from(v)).sum::<i64>()).sum();
        let full: i64 = whole.ipt.iter().map(|&v| i64::from(v)).sum();
        prop_assert!((seg - full).unsigned_abs() as usize <= edges, "{seg} vs {full}");
    }
}
