//! On-disk formats.
//!
//! Dataset CSV: header `t,dim,x,y`, one row per (time, dimension), both
//! 1-based. `x` may be empty for observed data with no known latent path.
//!
//! Sample CSV: header `seed,iteration,element,x[1][1],x[2][1],...`; column
//! `x[j][i]` is dimension `j` at time `i`, 1-based, time-major.
//!
//! Sample binary (`samples.bin`), all little-endian:
//! magic `SEQPOOL1` (8 bytes), then `n`, `P`, `count` as u64, then `count`
//! records of `seed: u64, iteration: u64, element: u64` followed by `n * P`
//! f64 values in the same order as the CSV columns.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use seqpool::{LatentSequence, ObservationSequence, Sequence};

use crate::Usage;

const MAGIC: &[u8; 8] = b"SEQPOOL1";

pub fn write_dataset(path: &Path, x: &LatentSequence, y: &ObservationSequence) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["t", "dim", "x", "y"])?;
    for i in 0..y.len() {
        for j in 0..y.dim() {
            w.write_record([
                (i + 1).to_string(),
                (j + 1).to_string(),
                x.get(i, j).to_string(),
                y.get(i, j).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset with the given shape. Returns the latent path when every
/// row carries one.
pub fn read_dataset(path: &Path, n: usize, p: usize) -> Result<(Option<LatentSequence>, ObservationSequence)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Usage(format!("reading {}: {e}", path.display())))?;
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["t", "dim", "x", "y"] {
        bail!(Usage(format!("{}: expected header t,dim,x,y", path.display())));
    }
    let mut xs = vec![f64::NAN; n * p];
    let mut ys = vec![f64::NAN; n * p];
    let mut seen = vec![false; n * p];
    let mut has_x = true;
    for (line, row) in r.records().enumerate() {
        let row = row.map_err(|e| Usage(format!("{}: {e}", path.display())))?;
        let bad = |what: &str| Usage(format!("{} row {}: bad {what}", path.display(), line + 2));
        let t: usize = row[0].trim().parse().map_err(|_| bad("t"))?;
        let d: usize = row[1].trim().parse().map_err(|_| bad("dim"))?;
        if t == 0 || t > n || d == 0 || d > p {
            bail!(Usage(format!("{} row {}: (t, dim) = ({t}, {d}) outside n = {n}, P = {p}", path.display(), line + 2)));
        }
        let k = (t - 1) * p + (d - 1);
        if seen[k] {
            bail!(Usage(format!("{}: duplicate row for t = {t}, dim = {d}", path.display())));
        }
        seen[k] = true;
        match row[2].trim() {
            "" => has_x = false,
            v => xs[k] = v.parse().map_err(|_| bad("x"))?,
        }
        ys[k] = row[3].trim().parse().map_err(|_| bad("y"))?;
    }
    if let Some(k) = seen.iter().position(|s| !s) {
        bail!(Usage(format!("{}: no row for t = {}, dim = {}", path.display(), k / p + 1, k % p + 1)));
    }
    let y = Sequence::new(n, p, ys).map_err(|e| Usage(e.to_string()))?;
    let x = if has_x { Some(Sequence::new(n, p, xs).map_err(|e| Usage(e.to_string()))?) } else { None };
    Ok((x, y))
}

/// 1-based `x[dim][time]` name for flat index `v = i * p + j`.
pub fn variable_name(v: usize, p: usize) -> String {
    format!("x[{}][{}]", v % p + 1, v / p + 1)
}

/// Parses `x[j][i]` into a flat index.
pub fn parse_variable(name: &str, n: usize, p: usize) -> Result<usize> {
    let err = || Usage(format!("bad variable address {name:?}; expected x[dim][time], 1-based"));
    let rest = name.trim().strip_prefix("x[").ok_or_else(err)?;
    let (j, rest) = rest.split_once("][").ok_or_else(err)?;
    let i = rest.strip_suffix(']').ok_or_else(err)?;
    let j: usize = j.trim().parse().map_err(|_| err())?;
    let i: usize = i.trim().parse().map_err(|_| err())?;
    if j == 0 || j > p || i == 0 || i > n {
        bail!(Usage(format!("{name} outside P = {p}, n = {n}")));
    }
    Ok((i - 1) * p + (j - 1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Binary,
}

impl Format {
    pub fn file_name(self) -> &'static str {
        match self {
            Format::Csv => "samples.csv",
            Format::Binary => "samples.bin",
        }
    }
}

pub enum SampleWriter {
    Csv(Box<csv::Writer<File>>),
    Binary { out: BufWriter<File>, count: u64 },
}

impl SampleWriter {
    pub fn create(dir: &Path, format: Format, n: usize, p: usize) -> Result<Self> {
        let path = dir.join(format.file_name());
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        Ok(match format {
            Format::Csv => {
                let mut w = csv::Writer::from_writer(file);
                let mut header = vec!["seed".to_string(), "iteration".into(), "element".into()];
                header.extend((0..n * p).map(|v| variable_name(v, p)));
                w.write_record(&header)?;
                SampleWriter::Csv(Box::new(w))
            }
            Format::Binary => {
                let mut out = BufWriter::new(file);
                out.write_all(MAGIC)?;
                for v in [n as u64, p as u64, 0] {
                    out.write_all(&v.to_le_bytes())?;
                }
                SampleWriter::Binary { out, count: 0 }
            }
        })
    }

    pub fn write(&mut self, seed: u64, iteration: usize, element: usize, x: &LatentSequence) -> Result<()> {
        match self {
            SampleWriter::Csv(w) => {
                let mut row = vec![seed.to_string(), iteration.to_string(), element.to_string()];
                row.extend(x.values().iter().map(f64::to_string));
                w.write_record(&row)?;
            }
            SampleWriter::Binary { out, count } => {
                for v in [seed, iteration as u64, element as u64] {
                    out.write_all(&v.to_le_bytes())?;
                }
                for v in x.values() {
                    out.write_all(&v.to_le_bytes())?;
                }
                *count += 1;
            }
        }
        Ok(())
    }

    /// Flushes, and for the binary format patches the record count into the header.
    pub fn finish(self) -> Result<()> {
        match self {
            SampleWriter::Csv(mut w) => w.flush()?,
            SampleWriter::Binary { out, count } => {
                let mut file = out.into_inner().map_err(|e| e.into_error())?;
                file.seek(SeekFrom::Start(24))?;
                file.write_all(&count.to_le_bytes())?;
                file.flush()?;
            }
        }
        Ok(())
    }
}

/// Selected variables of every sample in a run directory.
pub struct SampleTable {
    pub n: usize,
    pub p: usize,
    /// `(seed, iteration, element)` per sample.
    pub provenance: Vec<(u64, usize, usize)>,
    /// `columns[c][s]`: selected variable `c` in sample `s`.
    pub columns: Vec<Vec<f64>>,
}

/// Reads samples, keeping only the variables chosen by `select(n, p)`.
pub fn read_samples<F>(dir: &Path, format: Format, select: F) -> Result<SampleTable>
where
    F: FnOnce(usize, usize) -> Result<Vec<usize>>,
{
    let path = dir.join(format.file_name());
    let file = File::open(&path).map_err(|e| Usage(format!("opening {}: {e}", path.display())))?;
    match format {
        Format::Csv => {
            let mut r = csv::Reader::from_reader(file);
            let headers = r.headers()?.clone();
            let vars = headers.len().saturating_sub(3);
            // the last column is x[P][n]; read the shape from it
            let (n, p) = match headers.iter().next_back() {
                Some(last) if vars > 0 => {
                    let inner = last.trim_start_matches("x[").trim_end_matches(']');
                    let (j, i) = inner.split_once("][").ok_or_else(|| Usage(format!("{}: bad header", path.display())))?;
                    (i.parse()?, j.parse()?)
                }
                _ => bail!(Usage(format!("{}: no variable columns", path.display()))),
            };
            if vars != n * p {
                bail!(Usage(format!("{}: {vars} columns for n = {n}, P = {p}", path.display())));
            }
            let chosen = select(n, p)?;
            let mut table = SampleTable { n, p, provenance: Vec::new(), columns: vec![Vec::new(); chosen.len()] };
            for row in r.records() {
                let row = row?;
                if row.len() != vars + 3 {
                    bail!(Usage(format!("{}: ragged row", path.display())));
                }
                table.provenance.push((row[0].parse()?, row[1].parse()?, row[2].parse()?));
                for (c, &v) in chosen.iter().enumerate() {
                    table.columns[c].push(row[v + 3].parse()?);
                }
            }
            Ok(table)
        }
        Format::Binary => {
            let mut r = BufReader::new(file);
            let mut magic = [0u8; 8];
            r.read_exact(&mut magic)?;
            if &magic != MAGIC {
                bail!(Usage(format!("{}: not a sample file", path.display())));
            }
            let mut word = [0u8; 8];
            let mut next_u64 = |r: &mut BufReader<File>| -> Result<u64> {
                r.read_exact(&mut word)?;
                Ok(u64::from_le_bytes(word))
            };
            let (n, p, count) = (next_u64(&mut r)? as usize, next_u64(&mut r)? as usize, next_u64(&mut r)? as usize);
            let chosen = select(n, p)?;
            let mut table = SampleTable { n, p, provenance: Vec::with_capacity(count), columns: vec![Vec::new(); chosen.len()] };
            let mut values = vec![0u8; n * p * 8];
            for _ in 0..count {
                let seed = next_u64(&mut r)?;
                let iteration = next_u64(&mut r)? as usize;
                let element = next_u64(&mut r)? as usize;
                table.provenance.push((seed, iteration, element));
                r.read_exact(&mut values)?;
                for (c, &v) in chosen.iter().enumerate() {
                    let bytes: [u8; 8] = values[v * 8..v * 8 + 8].try_into().expect("8 bytes");
                    table.columns[c].push(f64::from_le_bytes(bytes));
                }
            }
            Ok(table)
        }
    }
}
