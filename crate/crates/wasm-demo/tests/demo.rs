use selfrepair_wasm_demo::{bin_distribution, drift_curves, pulse_error_curve};
use serde_json::Value;

fn parse(s: String) -> Value {
    serde_json::from_str(&s).unwrap()
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

#[test]
fn drift_mean_decays_and_is_deterministic() {
    let a = drift_curves(0.06, 0.02, 5, 1e4, 50, 3).unwrap();
    assert_eq!(a, drift_curves(0.06, 0.02, 5, 1e4, 50, 3).unwrap());
    let d = parse(a);
    let mean = floats(&d["mean"]);
    assert_eq!(mean.len(), 50);
    assert!(mean.windows(2).all(|p| p[1] < p[0]));
    assert_eq!(d["curves"].as_array().unwrap().len(), 5);
    assert!(drift_curves(-0.1, 0.0, 1, 10.0, 5, 0).is_err());
}

#[test]
fn bins_cover_every_weight() {
    let d = parse(bin_distribution(800, 0.005, 0.002, 300, 1).unwrap());
    let counts: u64 = d["counts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c.as_u64().unwrap())
        .sum();
    assert_eq!(counts, 800);
    assert_eq!(floats(&d["sq"]).len(), d["counts"].as_array().unwrap().len());
    assert!(d["mse"].as_f64().unwrap() <= d["initial_mse"].as_f64().unwrap());
    assert!(bin_distribution(100, 50.0, 0.002, 10, 1).is_err());
}

#[test]
fn pulse_curve_spans_the_anchors() {
    let d = parse(pulse_error_curve(20, 400, 0).unwrap());
    let e = floats(&d["errors"]);
    assert_eq!(e[0], 0.06);
    assert_eq!(*e.last().unwrap(), 0.002);
    assert!(e.windows(2).all(|p| p[1] <= p[0]));
    for s in d["samples"].as_array().unwrap() {
        assert!(s["rel_std"].as_f64().unwrap() > 0.0);
    }
}
