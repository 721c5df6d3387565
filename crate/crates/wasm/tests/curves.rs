use grail_wasm::{ablation_curve_json, alpha_curve_json, ratio_curve_json};
use serde_json::Value;

fn parse(s: &str) -> Value {
    serde_json::from_str(s).unwrap()
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

#[test]
fn ratio_curve_starts_at_the_original() {
    let v = parse(&ratio_curve_json(r#"{"method":"mag-l2"}"#).unwrap());
    assert_eq!(v["metric"], "relative_error");
    let compressed = floats(&v["compressed"]);
    let compensated = floats(&v["compensated"]);
    assert_eq!(compressed.len(), 9);
    assert_eq!(compressed[0], floats(&v["original"])[0]);
    assert!(compensated[5] < compressed[5]);
}

#[test]
fn ratio_curve_is_deterministic() {
    let p = r#"{"family":"ffn","method":"fold","seed":4}"#;
    assert_eq!(ratio_curve_json(p).unwrap(), ratio_curve_json(p).unwrap());
}

#[test]
fn ablation_curve_covers_all_sizes() {
    let v = parse(&ablation_curve_json(r#"{"method":"wanda","ratio":0.5}"#).unwrap());
    let sizes: Vec<u64> = v["sizes"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap()).collect();
    assert_eq!(sizes, vec![2, 4, 8, 16, 32, 64, 128, 256]);
    let imp = floats(&v["mean_improvement"]);
    assert!(imp[7] > imp[0]);
}

#[test]
fn alpha_curve_grows_with_alpha() {
    let v = parse(&alpha_curve_json(r#"{"ratio":0.5,"n":128}"#).unwrap());
    let rel = floats(&v["relative_error"]);
    let lambdas = floats(&v["lambdas"]);
    assert_eq!(rel.len(), 25);
    assert!(rel.iter().all(|&r| r <= 1.0 + 1e-9));
    assert!(rel[24] > rel[0]);
    assert!(lambdas.windows(2).all(|w| w[1] > w[0]));
    assert_eq!(v["kept"], 12);
}

#[test]
fn bad_parameters_are_reported() {
    assert!(ratio_curve_json(r#"{"method":"nope"}"#).unwrap_err().contains("bad parameters"));
    assert!(alpha_curve_json(r#"{"ratio":1.0}"#).is_err());
    assert!(ratio_curve_json(r#"{"alpha":2}"#).is_err());
}
