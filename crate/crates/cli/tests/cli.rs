use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use calibps::io::{load_csem_table, save_dataset, write_csem_table};
use calibps::measure::CsemTable;
use calibps::sim::{generate_population, SimConfig};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_calibps"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).output().expect("spawn calibps")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn sample_data(dir: &Path, withheld: &[usize]) -> PathBuf {
    let cfg = SimConfig { n_schools: 150, ..SimConfig::default() };
    let mut pop = generate_population(&cfg, 11).unwrap();
    for &i in withheld {
        pop.dataset.records[i].cells[2].obtained_avg = None;
    }
    let path = dir.join("schools.csv");
    save_dataset(&path, &pop.dataset).unwrap();
    path
}

#[test]
fn simulate_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let base = ["simulate", "--reps", "3", "--seed", "7"];
    let a = run(&[&base[..], &["-o", "a", "--threads", "1"]].concat(), dir.path());
    let b = run(&[&base[..], &["-o", "b", "--threads", "4"]].concat(), dir.path());
    assert!(a.status.success(), "{}", stderr(&a));
    assert!(b.status.success(), "{}", stderr(&b));
    for f in ["replications.csv", "summary.csv", "unmatched.csv", "balance_summary.csv", "fig_balance.svg", "fig_rmse.svg"] {
        let x = fs::read(dir.path().join("a").join(f)).unwrap();
        let y = fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(x, y, "{f} differs between thread counts");
    }
    // rerun from the manifest alone
    let c = run(&["run", "--config", "a/manifest.toml", "-o", "c"], dir.path());
    assert!(c.status.success(), "{}", stderr(&c));
    for f in ["replications.csv", "summary.csv"] {
        assert_eq!(fs::read(dir.path().join("a").join(f)).unwrap(), fs::read(dir.path().join("c").join(f)).unwrap());
    }
    let manifest = fs::read_to_string(dir.path().join("a/manifest.toml")).unwrap();
    assert!(manifest.contains("config_sha256"));
    assert!(manifest.contains("effect_amplitude"));
    assert!(manifest.contains("master_seed = 7"));
}

#[test]
fn data_modes_write_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    sample_data(dir.path(), &[]);
    for (mode, files) in [
        ("fit-ps", &["ps.csv", "ps_coefficients.csv", "hlm.csv", "eb.csv"][..]),
        ("match", &["matched_ml.csv", "matched_rc.csv", "matched_naive.csv", "match_summary.csv"][..]),
        ("balance", &["balance.csv"][..]),
        ("estimate", &["estimates.csv"][..]),
    ] {
        let o = run(&[mode, "--data", "schools.csv", "-o", mode, "--caliper", "1.0"], dir.path());
        assert!(o.status.success(), "{mode}: {}", stderr(&o));
        for f in files.iter().chain(&["manifest.toml"]) {
            assert!(dir.path().join(mode).join(f).is_file(), "{mode} missing {f}");
        }
    }
    let ps = fs::read_to_string(dir.path().join("fit-ps/ps.csv")).unwrap();
    assert_eq!(ps.lines().count(), 1 + 3 * 150);
    let est = fs::read_to_string(dir.path().join("estimate/estimates.csv")).unwrap();
    assert!(est.lines().any(|l| l.starts_with("pencomp,ml,g1,test,")));
    let manifest = fs::read_to_string(dir.path().join("estimate/manifest.toml")).unwrap();
    assert!(manifest.contains("data_sha256"));
}

#[test]
fn naive_scores_refuse_withheld_cells() {
    let dir = tempfile::tempdir().unwrap();
    sample_data(dir.path(), &[4, 9]);
    let o = run(&["fit-ps", "--data", "schools.csv", "--kind", "naive", "-o", "out"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("0005") && err.contains("0010"), "{err}");
    // the error-aware scores use the predicted scores instead
    let o = run(&["fit-ps", "--data", "schools.csv", "--kind", "ml", "--kind", "rc", "-o", "out"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn csem_tables_drive_two_pass_fit() {
    let dir = tempfile::tempdir().unwrap();
    sample_data(dir.path(), &[]);
    let table = dir.path().join("csem.csv");
    let mut buf = Vec::new();
    let knots = vec![(1000.0, 240.0), (1500.0, 250.0), (2000.0, 260.0)];
    write_csem_table(&mut buf, &CsemTable::new(knots).unwrap()).unwrap();
    fs::write(&table, buf).unwrap();
    assert_eq!(load_csem_table(&table).unwrap().knots().len(), 3);
    let o = run(&["fit-ps", "--data", "schools.csv", "--csem-table", "test=csem.csv", "-o", "two"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(&["fit-ps", "--data", "schools.csv", "--csem-table", "other=csem.csv", "-o", "bad"], dir.path());
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["nonsense"], dir.path()).status.code(), Some(1));
    assert_eq!(run(&["match"], dir.path()).status.code(), Some(1), "no dataset is a usage error");
    assert_eq!(run(&["run"], dir.path()).status.code(), Some(1));
    assert_eq!(run(&["match", "--data", "missing.csv"], dir.path()).status.code(), Some(1));
    fs::write(dir.path().join("bad.toml"), "mode = \"simulate\"\nunknown_key = 3\n").unwrap();
    assert_eq!(run(&["run", "--config", "bad.toml"], dir.path()).status.code(), Some(1));
    fs::write(dir.path().join("broken.csv"), "school_id,treatment\n1,7\n").unwrap();
    let o = run(&["fit-ps", "--data", "broken.csv"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let mut pop = generate_population(&SimConfig { n_schools: 60, ..SimConfig::default() }, 3).unwrap();
    for (i, r) in pop.dataset.records.iter_mut().enumerate() {
        r.treatment = u8::from(i % 4 != 0);
    }
    save_dataset(dir.path().join("schools.csv"), &pop.dataset).unwrap();
    let o = run(&["match", "--data", "schools.csv", "--max-controls", "1", "--max-treated", "1", "--caliper", "5", "-o", "m"], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let o = run(&["approx-check", "-o", "ac"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
}
