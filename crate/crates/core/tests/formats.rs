use std::fs;

use nalgebra::{Matrix2xX, Matrix3xX};
use proptest::prelude::*;
use sdm_core::dictlearn::{learn_dictionaries, DictLearnConfig};
use sdm_core::io::{
    append_results, format_number, read_dictionary, read_poses, read_results, write_dictionary, write_poses,
    write_results, Labeled, LearnSummary, Table,
};
use sdm_core::synth::{generate_family, orbit_project, Archetype};
use sdm_core::{Error, Pose2D, Pose3D};

fn scratch() -> tempfile::TempDir {
    tempfile::tempdir().unwrap()
}

#[test]
fn pose_records_round_trip() {
    let dir = scratch();
    let path = dir.path().join("train.txt");
    let poses = generate_family(&Archetype::Stride.family(3, 4)).unwrap();
    let records: Vec<_> = poses.iter().enumerate().map(|(i, p)| Labeled::new(format!("stride-{i}"), p.clone())).collect();
    write_poses(&path, &records).unwrap();
    let back: Vec<Labeled<Pose3D>> = read_poses(&path).unwrap();
    assert_eq!(back, records);

    let views: Vec<_> = orbit_project(&poses[0], 4)
        .into_iter()
        .enumerate()
        .map(|(v, x)| Labeled::new(format!("p0-v{v}"), x))
        .collect();
    let path2 = dir.path().join("views.txt");
    write_poses(&path2, &views).unwrap();
    let back: Vec<Labeled<Pose2D>> = read_poses(&path2).unwrap();
    assert_eq!(back, views);
}

#[test]
fn malformed_record_names_its_line() {
    let dir = scratch();
    let path = dir.path().join("bad.txt");
    fs::write(&path, "# header\na 2 1 2 3 4 5 6\nb 2 1 2 3 4 5\n").unwrap();
    match read_poses::<Pose3D>(&path) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a parse error, got {other:?}"),
    }
    fs::write(&path, "a 2 1 2 x 4 5 6\n").unwrap();
    assert!(matches!(read_poses::<Pose3D>(&path), Err(Error::Parse { line: 1, .. })));
    fs::write(&path, "a 2 1 2 NaN 4 5 6\n").unwrap();
    assert!(matches!(read_poses::<Pose3D>(&path), Err(Error::Parse { line: 1, .. })));
}

#[test]
fn empty_file_is_an_empty_dataset() {
    let dir = scratch();
    let path = dir.path().join("empty.txt");
    fs::write(&path, "").unwrap();
    assert!(read_poses::<Pose3D>(&path).unwrap().is_empty());
    assert!(read_poses::<Pose2D>(&path).unwrap().is_empty());
}

#[test]
fn mixed_joint_counts_are_rejected() {
    let dir = scratch();
    let path = dir.path().join("mixed.txt");
    fs::write(&path, "a 2 1 2 3 4 5 6\nb 3 1 2 3 4 5 6 7 8 9\n").unwrap();
    assert!(matches!(read_poses::<Pose3D>(&path), Err(Error::DimensionMismatch(_))));
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = scratch();
    assert!(matches!(read_poses::<Pose3D>(dir.path().join("nope.txt")), Err(Error::Io { .. })));
}

fn learned() -> (sdm_core::dictlearn::TrainReport, DictLearnConfig) {
    let train = generate_family(&Archetype::Stand.family(12, 3)).unwrap();
    let cfg = DictLearnConfig { k: 4, max_iter: 30, ..Default::default() };
    (learn_dictionaries(&train, &cfg).unwrap(), cfg)
}

#[test]
fn learned_dictionaries_round_trip() {
    let dir = scratch();
    let path = dir.path().join("dict.json");
    let (report, cfg) = learned();
    let summary = LearnSummary {
        config: cfg,
        iterations: report.iterations,
        final_loss: *report.loss_history.last().unwrap(),
    };
    write_dictionary(&path, &report.dict_u, &report.dict_v, Some(&summary)).unwrap();
    let back = read_dictionary(&path).unwrap();
    assert_eq!(back.dict_u, report.dict_u);
    assert_eq!(back.dict_v, report.dict_v);
    assert_eq!(back.learn, Some(summary));

    write_dictionary(&path, &report.dict_u, &report.dict_v, None).unwrap();
    assert_eq!(read_dictionary(&path).unwrap().learn, None);
}

fn edit_document(path: &std::path::Path, edit: impl FnOnce(&mut serde_json::Value)) {
    let mut doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    edit(&mut doc);
    fs::write(path, serde_json::to_string(&doc).unwrap()).unwrap();
}

#[test]
fn oversized_atom_is_rejected() {
    let dir = scratch();
    let path = dir.path().join("dict.json");
    let (report, _) = learned();
    write_dictionary(&path, &report.dict_u, &report.dict_v, None).unwrap();
    edit_document(&path, |doc| {
        let atom = doc["dict_u"]["atoms"][0].as_array_mut().unwrap();
        let norm: f64 = atom.iter().map(|v| v.as_f64().unwrap().powi(2)).sum::<f64>().sqrt();
        for v in atom.iter_mut() {
            *v = serde_json::json!(v.as_f64().unwrap() * 3.0 / norm);
        }
    });
    assert!(matches!(read_dictionary(&path), Err(Error::InvalidDictionary(_))));
}

#[test]
fn swapped_kinds_are_rejected() {
    let dir = scratch();
    let path = dir.path().join("dict.json");
    let (report, _) = learned();
    write_dictionary(&path, &report.dict_u, &report.dict_v, None).unwrap();
    edit_document(&path, |doc| {
        doc["dict_u"]["kind"] = serde_json::json!("deformation");
        doc["dict_v"]["kind"] = serde_json::json!("global_structure");
    });
    assert!(matches!(read_dictionary(&path), Err(Error::InvalidDictionary(_))));
}

#[test]
fn malformed_dictionary_is_a_parse_error() {
    let dir = scratch();
    let path = dir.path().join("dict.json");
    fs::write(&path, "{\n  \"format\": \"sdm-dictionary\",\n  oops\n}").unwrap();
    assert!(matches!(read_dictionary(&path), Err(Error::Parse { line: 3, .. })));
}

#[test]
fn results_round_trip_and_append() {
    let dir = scratch();
    let path = dir.path().join("results.csv");
    let mut table = Table::new(["method", "dataset", "category", "metric", "value"]);
    for method in ["sr", "sdm"] {
        for category in ["stand", "stride", "seated"] {
            table
                .push(vec![
                    method.into(),
                    "synthetic".into(),
                    category.into(),
                    "estimation_error".into(),
                    format_number(0.1 + 1.0 / 3.0),
                ])
                .unwrap();
        }
    }
    assert_eq!(table.rows.len(), 6);
    write_results(&path, &table).unwrap();
    let back = read_results(&path).unwrap();
    assert_eq!(back, table);
    assert_eq!(back.number(0, "value"), Some(0.1 + 1.0 / 3.0));

    let row = [
        ("value", "2".to_string()),
        ("method", "sdm".into()),
        ("dataset", "synthetic".into()),
        ("category", "all".into()),
        ("metric", "per_joint_error".into()),
    ];
    append_results(&path, &row).unwrap();
    let back = read_results(&path).unwrap();
    assert_eq!(back.rows.len(), 7);
    assert_eq!(back.rows[6], vec!["sdm", "synthetic", "all", "per_joint_error", "2"]);

    let missing = [("method", "sdm".to_string()), ("value", "1".into())];
    assert!(matches!(append_results(&path, &missing), Err(Error::SchemaMismatch(_))));

    let fresh = dir.path().join("fresh.csv");
    append_results(&fresh, &missing).unwrap();
    assert_eq!(read_results(&fresh).unwrap().columns, vec!["method", "value"]);
}

#[test]
fn ragged_tables_are_rejected() {
    let dir = scratch();
    let mut table = Table::new(["a", "b"]);
    assert!(matches!(table.push(vec!["1".into()]), Err(Error::SchemaMismatch(_))));
    table.rows.push(vec!["1".into()]);
    assert!(matches!(write_results(dir.path().join("t.csv"), &table), Err(Error::SchemaMismatch(_))));
}

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        proptest::num::f64::NORMAL,
        proptest::num::f64::SUBNORMAL,
        proptest::num::f64::ZERO,
        -1e4..1e4f64,
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn poses_round_trip_bit_exactly(values in proptest::collection::vec(finite(), 6..60)) {
        let dir = scratch();
        let p3 = values.len() / 3;
        let pose = Pose3D::new(Matrix3xX::from_column_slice(&values[..3 * p3])).unwrap();
        let path = dir.path().join("p3.txt");
        write_poses(&path, &[Labeled::new("x", pose.clone())]).unwrap();
        let back: Vec<Labeled<Pose3D>> = read_poses(&path).unwrap();
        prop_assert_eq!(back[0].pose.as_slice(), pose.as_slice());

        let p2 = values.len() / 2;
        let pose = Pose2D::new(Matrix2xX::from_column_slice(&values[..2 * p2])).unwrap();
        let path = dir.path().join("p2.txt");
        write_poses(&path, &[Labeled::new("y", pose.clone())]).unwrap();
        let back: Vec<Labeled<Pose2D>> = read_poses(&path).unwrap();
        prop_assert_eq!(back[0].pose.as_slice(), pose.as_slice());
    }

    #[test]
    fn numbers_round_trip_through_tables(v in finite()) {
        let dir = scratch();
        let path = dir.path().join("t.csv");
        let mut t = Table::new(["v"]);
        t.push(vec![format_number(v)]).unwrap();
        write_results(&path, &t).unwrap();
        prop_assert_eq!(read_results(&path).unwrap().number(0, "v").unwrap().to_bits(), v.to_bits());
    }
}
