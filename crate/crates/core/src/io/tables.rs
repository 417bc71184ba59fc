use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::measure::CsemTable;

/// Reads a two-column `score,csem` CSV (header required).
pub fn read_csem_table<R: Read>(input: R) -> Result<CsemTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let mut knots = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != 2 {
            return Err(Error::data(format!("line {line}: expected score,csem")));
        }
        let parse = |s: &str| s.parse::<f64>().map_err(|_| Error::data(format!("line {line}: '{s}' is not a number")));
        knots.push((parse(&row[0])?, parse(&row[1])?));
    }
    CsemTable::new(knots)
}

pub fn load_csem_table(path: impl AsRef<Path>) -> Result<CsemTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
    read_csem_table(file)
}

pub fn write_csem_table<W: Write>(out: W, table: &CsemTable) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["score", "csem"])?;
    for (s, c) in table.knots() {
        wtr.write_record([s.to_string(), c.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}
