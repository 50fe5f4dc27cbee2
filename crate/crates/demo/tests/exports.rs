use serde_json::Value;
use vhempc_demo::{simulate_json, table1_json, terminal_region_json};

#[test]
fn scalar_simulation_reaches_terminal_mode() {
    let out: Value = serde_json::from_str(&simulate_json("scalar", "pi3", 0.5, 1.0, 0, &[2.0], 60).unwrap()).unwrap();
    assert_eq!(out["passed"], true);
    let steps = out["steps"].as_array().unwrap();
    assert_eq!(steps[0]["x"][0], 2.0);
    assert_eq!(steps.last().unwrap()["case"], "terminal");
}

#[test]
fn bad_inputs_are_reported() {
    assert!(simulate_json("scalar", "pi3", 0.5, 1.0, 0, &[3.0], 10).unwrap_err().contains("outside"));
    assert!(simulate_json("boiler", "pi3", 0.5, 1.0, 0, &[0.0], 10).is_err());
    assert!(simulate_json("scalar", "pi9", 0.5, 1.0, 0, &[0.0], 10).is_err());
}

#[test]
fn table_is_monotone_for_the_cstr() {
    let out: Value =
        serde_json::from_str(&table1_json("cstr", &[4.0, 3.70], &[20.0, 10.0, 5.0, 0.0]).unwrap()).unwrap();
    let n0: Vec<u64> = out["rows"].as_array().unwrap().iter().map(|r| r["n0"].as_u64().unwrap()).collect();
    assert!(n0.windows(2).all(|w| w[1] <= w[0]), "{n0:?}");
    assert_eq!(n0[3], out["reference_length"].as_u64().unwrap());
}

#[test]
fn region_boundaries_sit_on_their_level_sets() {
    let out: Value = serde_json::from_str(&terminal_region_json("cstr").unwrap()).unwrap();
    assert_eq!(out["terminal"].as_array().unwrap().len(), 96);
    let scalar: Value = serde_json::from_str(&terminal_region_json("scalar").unwrap()).unwrap();
    let ends = scalar["terminal"].as_array().unwrap();
    let alpha = scalar["alpha"].as_f64().unwrap();
    let x = ends[0][0].as_f64().unwrap();
    assert!(x > 0.0 && (x * x * 1.483899902678645 - alpha).abs() < 1e-9);
}
