use nexume::devmodel::{builtin, HardwareProfile};
use nexume::dynfit::{Activation, Dataset, LayerSpec, Model, Network, Shape};
use nexume::ehsim::{load_trace, EnergyTrace, TraceError};

#[test]
fn artifacts_survive_a_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();

    let trace = EnergyTrace::constant(120.5, 2.0, 0.25);
    std::fs::write(dir.path().join("t.csv"), trace.to_csv_string()).unwrap();
    let back = load_trace(dir.path().join("t.csv")).unwrap();
    assert_eq!(back.samples(), trace.samples());

    let p = builtin::synthetic_low();
    std::fs::write(dir.path().join("p.json"), p.to_json_string()).unwrap();
    assert_eq!(HardwareProfile::load(dir.path().join("p.json")).unwrap(), p);

    let data = Dataset::blobs(12, 3, 2, 4);
    std::fs::write(dir.path().join("d.json"), data.to_json_string()).unwrap();
    assert_eq!(Dataset::load(dir.path().join("d.json")).unwrap(), data);

    let net = Network::initialized(
        Shape::flat(3),
        &[LayerSpec::Dense { outputs: 5, activation: Activation::Relu }, LayerSpec::Dense { outputs: 2, activation: Activation::Identity }],
        9,
    )
    .unwrap();
    let model = Model::new(net);
    model.save(dir.path().join("m.json")).unwrap();
    // Weights are stored as f32, so the first trip rounds and later trips are exact.
    let once = Model::load(dir.path().join("m.json")).unwrap();
    for (a, b) in once.net.params().iter().zip(model.net.params()) {
        assert_eq!(*a, b as f32 as f64);
    }
    once.save(dir.path().join("m2.json")).unwrap();
    assert_eq!(Model::load(dir.path().join("m2.json")).unwrap(), once);
}

#[test]
fn missing_files_name_their_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.csv");
    let err = load_trace(&missing).unwrap_err();
    assert!(matches!(err, TraceError::Io { .. }));
    assert!(err.to_string().contains(missing.to_str().unwrap()));
    assert!(Model::load(dir.path().join("absent.json")).is_err());
}
