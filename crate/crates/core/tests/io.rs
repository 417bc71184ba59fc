use calibps::data::{CellKey, Dataset, SchoolRecord, SubgroupCell};
use calibps::io::{read_csem_table, read_dataset, write_csem_table, write_dataset, Mode, RunConfig};
use calibps::sim::{generate_population, SimConfig};
use calibps::Error;
use proptest::prelude::*;

fn read(text: &str) -> calibps::Result<Dataset> {
    read_dataset(text.as_bytes())
}

const HEADER: &str = "school_id,treatment,z_frl,m_black_g5m,w_black_g5m,csem_black_g5m,m_all_g5m,w_all_g5m,csem_all_g5m";

#[test]
fn empty_obtained_field_is_a_withheld_cell() {
    let d = read(&format!("{HEADER}\nA,1,0.4,3,,250,40,1480.5,250\nB,0,0.2,,,,35,1502,250\n")).unwrap();
    assert_eq!(d.cell_keys, vec![CellKey::new("black", "g5m"), CellKey::new("all", "g5m")]);
    let a = &d.records[0];
    let black = a.cell(&CellKey::new("black", "g5m")).unwrap();
    assert_eq!(black.size, 3);
    assert!(black.is_withheld());
    assert!(d.records[1].cell(&CellKey::new("black", "g5m")).is_none(), "empty m_ means no cell");
    assert_eq!(d.obtained_vector(0), vec![None, Some(1480.5)]);
}

#[test]
fn subgroup_keys_may_contain_underscores() {
    let d = read("school_id,treatment,m_two_or_more_ela,w_two_or_more_ela\nX,0,5,1400\n").unwrap();
    assert_eq!(d.cell_keys, vec![CellKey::new("two_or_more", "ela")]);
}

#[test]
fn malformed_input_is_reported_with_context() {
    let cases = [
        ("school_id,m_a_b,w_a_b\nX,1,2\n", "treatment"),
        (&format!("{HEADER}\nA,1,0.4,3,,250,40,abc,250\n") as &str, "line 2"),
        (&format!("{HEADER}\nA,1,0.4,3,,250,40,1,250\nA,0,0.1,3,,250,40,1,250\n"), "duplicate school_id 'A'"),
        (&format!("{HEADER}\nA,2,0.4,3,,250,40,1,250\n"), "treatment"),
        (&format!("{HEADER}\nA,1,0.4,3,,-5,40,1,250\n"), "csem"),
        ("school_id,treatment,m_a_b\nX,1,3\n", "w_a_b"),
        ("school_id,treatment,q_a_b\nX,1,3\n", "unrecognized column"),
    ];
    for (text, needle) in cases {
        match read(text) {
            Err(e @ Error::Data(_)) => assert!(e.to_string().contains(needle), "'{e}' lacks '{needle}'"),
            other => panic!("expected a data error mentioning {needle}, got {other:?}"),
        }
    }
}

#[test]
fn ragged_row_names_its_line() {
    let err = read(&format!("{HEADER}\nA,1,0.4,3,,250,40,1,250\nB,0,0.1\n")).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn simulated_dataset_round_trips() {
    let pop = generate_population(&SimConfig { n_schools: 80, ..SimConfig::default() }, 5).unwrap();
    let mut buf = Vec::new();
    write_dataset(&mut buf, &pop.dataset).unwrap();
    assert_eq!(read_dataset(buf.as_slice()).unwrap(), pop.dataset);
}

#[test]
fn csem_table_round_trips() {
    let t = read_csem_table("score,csem\n1200,300\n1500,250\n1800,280\n".as_bytes()).unwrap();
    let mut buf = Vec::new();
    write_csem_table(&mut buf, &t).unwrap();
    assert_eq!(read_csem_table(buf.as_slice()).unwrap(), t);
    assert!(read_csem_table("score,csem\n1500,250\n1200,300\n".as_bytes()).is_err());
}

#[test]
fn config_round_trips_and_rejects_unknown_keys() {
    let mut c = RunConfig { mode: Mode::Simulate, ..RunConfig::default() };
    c.sim.n_replications = 17;
    c.matching.caliper = 0.7;
    let back = RunConfig::from_toml(&c.to_toml()).unwrap();
    assert_eq!(back.to_toml(), c.to_toml());
    assert_eq!(back.hash(), c.hash());
    let mut d = c.clone();
    d.sim.master_seed += 1;
    assert_ne!(d.hash(), c.hash());
    let err = RunConfig::from_toml("mode = \"simulate\"\ncolour = 1\n").unwrap_err();
    assert_eq!(err.exit_code(), 1);
    let err = RunConfig::from_toml("mode = \"simulate\"\n[sim]\nn_school = 3\n").unwrap_err();
    assert_eq!(err.exit_code(), 1);
}

fn dataset_strategy() -> impl Strategy<Value = Dataset> {
    let keys = vec![CellKey::new("a", "r"), CellKey::new("b_c", "r"), CellKey::new("a", "m")];
    let cell = (
        any::<bool>(),
        1u32..500,
        proptest::option::of(-1e4f64..1e4),
        proptest::option::of(1.0f64..500.0),
        proptest::option::of(-1e4f64..1e4),
    );
    let record = (0u8..=1, proptest::collection::vec(-5.0f64..5.0, 2), proptest::collection::vec(cell, 3));
    proptest::collection::vec(record, 1..25).prop_map(move |rows| {
        let records = rows
            .into_iter()
            .enumerate()
            .map(|(i, (t, z, cells))| SchoolRecord {
                school_id: format!("s{i}"),
                treatment: t,
                covariates: z,
                cells: cells
                    .into_iter()
                    .zip(&keys)
                    .filter(|(c, _)| c.0)
                    .map(|((_, m, w, csem, y), k)| SubgroupCell {
                        subgroup: k.subgroup.clone(),
                        assessment: k.assessment.clone(),
                        size: m,
                        obtained_avg: w,
                        csem,
                        outcome_avg: y,
                    })
                    .collect(),
            })
            .collect();
        Dataset::new(records, vec!["x".into(), "y".into()], keys.clone())
    })
}

proptest! {
    #[test]
    fn write_then_read_is_identity(d in dataset_strategy()) {
        let mut buf = Vec::new();
        write_dataset(&mut buf, &d).unwrap();
        let back = read_dataset(buf.as_slice()).unwrap();
        prop_assert_eq!(back, d);
    }
}
