use lstm_nmpc::artifact::*;

#[test]
fn table_round_trips_exactly() {
    let mut t = Table::new(&["a", "b"]);
    t.comments = Provenance::new("abc", 7).header_lines();
    t.rows = vec![vec![0.1, -3.0e-17], vec![1.0 / 3.0, 12345.678]];
    let back = Table::parse(&t.to_csv().unwrap()).unwrap();
    assert_eq!(back, t);
    assert_eq!(back.comment_value("seed"), Some("7"));
    assert_eq!(back.column("b").unwrap(), vec![-3.0e-17, 12345.678]);
    assert!(back.column("c").is_err());
}

#[test]
fn fingerprint_is_stable() {
    assert_eq!(
        fingerprint(b"abc"),
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
    );
}

#[test]
fn model_envelope_checks_kind() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.json");
    write_model(&p, "thing", &Provenance::new("f", 1), &vec![1.0, 2.0]).unwrap();
    let (v, prov): (Vec<f64>, _) = read_model(&p, "thing").unwrap();
    assert_eq!(v, vec![1.0, 2.0]);
    assert_eq!(prov.seed, 1);
    assert!(read_model::<Vec<f64>>(&p, "other").is_err());
    let missing = read_model::<Vec<f64>>(&dir.path().join("nope.json"), "thing").unwrap_err();
    assert!(missing.to_string().contains("nope.json"));
}
