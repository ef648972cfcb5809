use pcm_selfrepair::compress::{self, Polarity};
use pcm_selfrepair::crossbar;
use pcm_selfrepair::device::{self, DeviceConfig};
use pcm_selfrepair::quantizer::{self, BinSet, QuantizationScheme};
use pcm_selfrepair::rng::substream;
use proptest::prelude::*;

fn scheme_strategy() -> impl Strategy<Value = QuantizationScheme> {
    let set = (0.01f64..0.2, prop::collection::btree_set(2u32..16, 1..7));
    (set.clone(), set).prop_map(|((bp, mp), (bn, mn))| {
        let mut a: Vec<u32> = vec![1];
        a.extend(mp);
        let mut b: Vec<u32> = vec![1];
        b.extend(mn);
        QuantizationScheme::new(BinSet::new(bp, a).unwrap(), BinSet::new(bn, b).unwrap(), 0.005, 0.002)
    })
}

proptest! {
    #[test]
    fn decompose_picks_a_nearest_value(s in scheme_strategy(), w in prop::collection::vec(-2.0f64..2.0, 1..200)) {
        let (dec, mse) = quantizer::decompose(&w, 1, w.len(), &s).unwrap();
        let rec = quantizer::reconstruct(&dec, &s).unwrap();
        let values = s.sq_values();
        let mut sum = 0.0;
        for (x, r) in w.iter().zip(&rec) {
            let best = values.iter().map(|v| (x - v).abs()).fold(f64::INFINITY, f64::min);
            prop_assert_eq!((x - r).abs(), best);
            sum += (x - r) * (x - r);
        }
        prop_assert!((mse - sum / w.len() as f64).abs() <= 1e-15);
    }

    #[test]
    fn drift_never_increases(g0 in 0.0f64..25.0, nu in 0.0f64..0.2, t1 in 0.0f64..1e6, dt in 0.0f64..1e6) {
        let a = device::drift(g0, 0.0, t1, nu, 1.0).unwrap();
        let b = device::drift(g0, 0.0, t1 + dt, nu, 1.0).unwrap();
        prop_assert!(b <= a);
        prop_assert!(b >= 0.0);
    }

    #[test]
    fn programmed_conductance_stays_in_range(target in 0.0f64..25.0, seed in any::<u64>()) {
        let cfg = DeviceConfig::default();
        let mut rng = substream(seed, "prop-program", &[]);
        let g = device::program(target, &cfg, &mut rng).unwrap();
        prop_assert!((0.0..=cfg.g_max).contains(&g));
    }

    #[test]
    fn ideal_tile_mvm_is_exact(s in scheme_strategy(), rows in 1usize..8, cols in 1usize..8, seed in any::<u64>()) {
        let cfg = DeviceConfig::ideal();
        let mut rng = substream(seed, "prop-mvm", &[]);
        let dec = crossbar::random_decomposed(rows, cols, &s, &mut rng);
        let cal = device::weight_to_conductance(&s, &cfg).unwrap();
        let tile = crossbar::program_layer(&dec, &s, &cal, &cfg, 0.0, &mut rng).unwrap();
        let x: Vec<f64> = (0..cols).map(|i| i as f64 * 0.25 - 0.5).collect();
        let y = crossbar::mvm(&tile, &x, 10.0, &cfg, &mut rng).unwrap();
        let w = quantizer::reconstruct(&dec, &s).unwrap();
        for r in 0..rows {
            let expect: f64 = (0..cols).map(|c| w[r * cols + c] * x[c]).sum();
            prop_assert!((y[r] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn packed_files_round_trip(s in scheme_strategy(), rows in 1usize..20, cols in 1usize..20, seed in any::<u64>()) {
        let mut rng = substream(seed, "prop-pack", &[]);
        let dec = crossbar::random_decomposed(rows, cols, &s, &mut rng);
        let (p, n) = compress::encode(&dec, &s).unwrap();
        prop_assert_eq!(p.polarity, Polarity::Pos);
        prop_assert_eq!(n.polarity, Polarity::Neg);
        let p2 = compress::PackedLayer::from_bytes(&p.to_bytes()).unwrap();
        let n2 = compress::PackedLayer::from_bytes(&n.to_bytes()).unwrap();
        p2.verify(&s).unwrap();
        prop_assert_eq!(compress::decode_layer(&p2, &n2).unwrap(), dec);
    }
}
