mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spikecast::autograd::{ParamStore, Tape, Tensor};
use spikecast::config::RunConfig;
use spikecast::data::{split, SeriesDataset, Windows, WindowSpec, Part};
use spikecast::encoders::{Encoder, EncoderKind};
use spikecast::energy::{energy, EnergyReport, LayerCost, E_AC_PJ, E_MAC_PJ};
use spikecast::graph::{Graph, Mode};
use spikecast::layers::SpikeLayer;
use spikecast::lif::{lif_step, LifConfig, LifState};
use spikecast::metrics::{r2, rse};
use spikecast::nets::{sew_combine, OpCount, SewMode};

use common::gradcheck;

fn lif_params() -> impl Strategy<Value = LifConfig> {
    (0.2f32..3.0, 0.05f32..=1.0, -1.0f32..0.15).prop_map(|(u_thr, beta, v_reset)| LifConfig {
        u_thr,
        beta,
        v_reset: v_reset.min(u_thr - 0.05),
        ..LifConfig::default()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn analytic_gradients_match_finite_differences(case in 0..gradcheck::cases().len(), seed in any::<u64>()) {
        let cases = gradcheck::cases();
        let c = &cases[case];
        if let Err(m) = gradcheck::check(c, seed) {
            prop_assert!(false, "{}: {m:?}", c.name);
        }
    }
}

proptest! {
    #[test]
    fn lif_spikes_are_binary_and_reset_or_decay_exactly(
        cfg in lif_params(),
        currents in prop::collection::vec(prop::collection::vec(-3.0f32..3.0, 3), 1..30),
    ) {
        let mut tape = Tape::new();
        let mut state = LifState::new();
        let mut h_prev = vec![cfg.v_reset; 3];
        for c in &currents {
            let i = tape.constant(Tensor::vector(c.clone())).unwrap();
            let s = lif_step(&mut tape, i, &mut state, &cfg).unwrap();
            let s = tape.value(s).data().to_vec();
            let h = state.membrane(&tape, 3, &cfg);
            for k in 0..3 {
                let u = h_prev[k] + c[k];
                prop_assert!(s[k] == 0.0 || s[k] == 1.0);
                prop_assert_eq!(s[k] == 1.0, u >= cfg.u_thr);
                if s[k] == 1.0 {
                    prop_assert_eq!(h[k], cfg.v_reset);
                } else {
                    prop_assert_eq!(h[k], cfg.beta * u);
                }
            }
            h_prev = h;
        }
    }

    #[test]
    fn spike_backward_is_the_arctan_derivative(u in -10.0f32..10.0, alpha in 0.1f32..8.0, thr in 0.2f32..2.0) {
        let cfg = LifConfig { u_thr: thr, alpha, v_reset: 0.0, ..LifConfig::default() };
        let mut tape = Tape::new();
        let i = tape.leaf(Tensor::vector(vec![u]), true).unwrap();
        let mut state = LifState::new();
        let s = lif_step(&mut tape, i, &mut state, &cfg).unwrap();
        let loss = tape.sum(s).unwrap();
        let g = tape.backward(loss).unwrap().get(i).unwrap()[0] as f64;
        let x = (u - thr) as f64;
        let a = alpha as f64;
        let z = std::f64::consts::FRAC_PI_2 * a * x;
        let want = a / (2.0 * (1.0 + z * z));
        prop_assert!((g - want).abs() < 1e-6, "{g} vs {want}");
    }

    #[test]
    fn spike_layer_over_steps_is_binary(
        cfg in lif_params(),
        steps in 1usize..12,
        width in 1usize..6,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = ParamStore::new();
        let mut g = Graph::new(&store, Mode::Train);
        let x = Tensor::new(vec![steps, width], (0..steps * width).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let x = g.constant(x).unwrap();
        let s = SpikeLayer::new("p", cfg).forward(&mut g, x).unwrap();
        prop_assert!(g.value(s).data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn sew_combine_truth_tables(bits in prop::collection::vec((any::<bool>(), any::<bool>()), 1..40)) {
        let a: Vec<f32> = bits.iter().map(|p| p.0 as u8 as f32).collect();
        let b: Vec<f32> = bits.iter().map(|p| p.1 as u8 as f32).collect();
        let store = ParamStore::new();
        let mut g = Graph::new(&store, Mode::Eval);
        let va = g.constant(Tensor::vector(a.clone())).unwrap();
        let vb = g.constant(Tensor::vector(b.clone())).unwrap();
        for mode in [SewMode::Add, SewMode::And, SewMode::Iand] {
            let out = sew_combine(&mut g, va, vb, mode).unwrap();
            for (k, &o) in g.value(out).data().iter().enumerate() {
                let (x, y) = (a[k] == 1.0, b[k] == 1.0);
                let want = match mode {
                    SewMode::Add => x as u8 + y as u8,
                    SewMode::And => (x && y) as u8,
                    SewMode::Iand => (!x && y) as u8,
                };
                prop_assert_eq!(o, want as f32);
            }
        }
    }

    #[test]
    fn encoders_emit_binary_trains_of_shape_ts_t_c(
        ts in 1usize..6,
        t in 2usize..16,
        c in 1usize..4,
        seed in any::<u64>(),
        kind in prop::sample::select(EncoderKind::ALL.to_vec()),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &mut rng, kind, ts, 3, LifConfig::default()).unwrap();
        let x = Tensor::new(vec![t, c], (0..t * c).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let mut g = Graph::new(&store, Mode::Eval);
        let train = enc.encode_window(&mut g, &x).unwrap();
        prop_assert_eq!(train.shape(), &[ts, t, c][..]);
        prop_assert!(train.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn conv_encoder_ignores_the_future(t in 3usize..20, cut in 0usize..19, seed in any::<u64>()) {
        use rand::Rng;
        let cut = cut % (t - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &mut rng, EncoderKind::Conv, 4, 5, LifConfig::default()).unwrap();
        let a: Vec<f32> = (0..t).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut b = a.clone();
        for v in &mut b[cut + 1..] {
            *v = rng.random_range(-2.0..2.0);
        }
        let run = |v: Vec<f32>| {
            let mut g = Graph::new(&store, Mode::Eval);
            enc.encode_window(&mut g, &Tensor::new(vec![t, 1], v).unwrap()).unwrap().data().to_vec()
        };
        let (sa, sb) = (run(a), run(b));
        for k in 0..4 {
            prop_assert_eq!(&sa[k * t..k * t + cut + 1], &sb[k * t..k * t + cut + 1]);
        }
    }

    #[test]
    fn layer_energy_is_monotone_in_rate_and_zero_when_silent(flops in 1u64..1_000_000_000, ts in 1usize..16, g1 in 0.0f64..=1.0, g2 in 0.0f64..=1.0) {
        let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
        prop_assert!(LayerCost::spiking("l", flops, lo, ts).energy_pj <= LayerCost::spiking("l", flops, hi, ts).energy_pj);
        prop_assert_eq!(LayerCost::spiking("l", flops, 0.0, ts).energy_pj, 0.0);
        let one = LayerCost::spiking("l", flops, g1, ts);
        let two = LayerCost::spiking("l", flops, g1, 2 * ts);
        prop_assert_eq!(two.sops, 2.0 * one.sops);
    }

    #[test]
    fn below_break_even_rates_beat_the_reference(
        layers in prop::collection::vec((1u64..100_000_000, 0.0f64..1.0, any::<bool>()), 1..12),
        ts in 1usize..10,
    ) {
        let limit = E_MAC_PJ / E_AC_PJ / ts as f64;
        let mut counts = Vec::new();
        let mut rates = BTreeMap::new();
        for (i, &(flops, frac, float)) in layers.iter().enumerate() {
            let name = format!("l{i}");
            counts.push(OpCount { name: name.clone(), flops, float_input: float });
            rates.insert(name, (frac * limit).min(1.0) * 0.999);
        }
        let report = energy(&counts, &rates, ts).unwrap();
        let snn: f64 = report.layers.iter().map(|l| l.energy_pj).sum();
        let ann: f64 = report.layers.iter().map(|l| l.ann_energy_pj).sum();
        prop_assert_eq!(report.total_snn_pj, snn);
        prop_assert_eq!(report.total_ann_pj, ann);
        prop_assert!(report.total_snn_pj <= report.total_ann_pj);
        if layers.iter().any(|l| !l.2) {
            prop_assert!(report.total_snn_pj < report.total_ann_pj);
            prop_assert!(report.reduction_pct > 0.0);
        }
        let rebuilt = EnergyReport::from_layers(report.layers.clone(), ts);
        prop_assert_eq!(rebuilt, report);
    }

    #[test]
    fn metric_bounds_and_invariances(
        m in 2usize..10,
        l in 1usize..4,
        c in 1usize..3,
        seed in any::<u64>(),
        scale in 0.1f32..10.0,
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = m * l * c;
        let t: Vec<f32> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let p: Vec<f32> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let tensor = |v: &[f32]| Tensor::new(vec![m, l, c], v.to_vec()).unwrap();
        let (tt, pt) = (tensor(&t), tensor(&p));
        prop_assert_eq!(rse(&tt, &tt).unwrap(), 0.0);
        prop_assert_eq!(r2(&tt, &tt).unwrap(), 1.0);
        let e = rse(&pt, &tt).unwrap();
        let q = r2(&pt, &tt).unwrap();
        prop_assert!(e >= 0.0 && q <= 1.0);
        let sc = |v: &[f32]| tensor(&v.iter().map(|x| x * scale).collect::<Vec<_>>());
        prop_assert!((rse(&sc(&p), &sc(&t)).unwrap() - e).abs() < 1e-4 * e.max(1.0));
        prop_assert!((r2(&sc(&p), &sc(&t)).unwrap() - q).abs() < 1e-4 * q.abs().max(1.0));
    }

    #[test]
    fn windows_stay_inside_their_split_and_targets_follow_inputs(
        n in 30usize..200,
        lookback in 1usize..8,
        horizon in 1usize..8,
        stride in 1usize..4,
    ) {
        let values: Vec<f32> = (0..n).map(|i| i as f32).collect();
        let ds = SeriesDataset::new(values, n, 1, vec!["x".into()]).unwrap();
        let splits = split(n, (0.6, 0.2, 0.2)).unwrap();
        let spec = WindowSpec { lookback, horizon, stride };
        for part in [Part::Train, Part::Valid, Part::Test] {
            let rows = splits.part(part);
            let Ok(w) = Windows::new(&ds, rows.clone(), spec, part.name()) else { continue };
            for i in 0..w.len() {
                let (x, y) = w.get(i);
                let first = x.data()[0] as usize;
                let last_x = x.data()[lookback - 1] as usize;
                prop_assert!(first >= rows.start);
                prop_assert_eq!(y.data()[0] as usize, last_x + 1);
                prop_assert!((y.data()[horizon - 1] as usize) < rows.end);
            }
        }
    }

    #[test]
    fn config_round_trips_through_toml(
        seed in any::<u32>(),
        lookback in 1usize..100,
        horizon in 1usize..100,
        beta in 0.01f32..=1.0,
        ts in 1usize..9,
        lr in 1e-6f64..1e-1,
        backbone in prop::sample::select(vec!["tcn", "rnn", "gru", "ispikformer"]),
        encoder in prop::sample::select(vec!["conv", "delta", "repeat"]),
    ) {
        let sets = vec![
            format!("seed={seed}"),
            format!("window.lookback={lookback}"),
            format!("window.horizon={horizon}"),
            format!("model.lif.beta={beta:?}"),
            format!("model.ts={ts}"),
            format!("train.lr={lr:?}"),
            format!("model.backbone={backbone:?}"),
            format!("model.encoder={encoder:?}"),
        ];
        let cfg = RunConfig::from_toml_with("", &sets).unwrap();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.hash(), cfg.hash());
    }
}
