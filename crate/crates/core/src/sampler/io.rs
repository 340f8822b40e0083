//! Persistence of posterior draws.
//!
//! Binary layout (little endian):
//!
//! ```text
//! magic     8 bytes  "SBRDRAWS"
//! version   u32      1
//! n_chains  u32
//! n_draws   u32
//! n_params  u32
//! names     n_params x (u32 byte length, UTF-8 bytes)
//! steps     n_chains x f64   adapted step size per chain
//! values    for each param, for each chain, n_draws x f64
//! ```
//!
//! Per-transition sampler statistics are not stored; they are reported in
//! the stage manifest instead.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{PosteriorDraws, Summary};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SBRDRAWS";
const VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn get_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_f64(r: &mut impl Read) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Data(format!("{what} {v} does not fit the draws format")))
}

pub fn write_draws(path: &Path, draws: &PosteriorDraws) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    put_u32(&mut w, VERSION).map_err(io)?;
    put_u32(&mut w, to_u32(draws.n_chains, "chain count")?).map_err(io)?;
    put_u32(&mut w, to_u32(draws.n_draws, "draw count")?).map_err(io)?;
    put_u32(&mut w, to_u32(draws.n_params(), "parameter count")?).map_err(io)?;
    for name in &draws.names {
        put_u32(&mut w, to_u32(name.len(), "name length")?).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
    }
    for c in 0..draws.n_chains {
        let s = draws.step_sizes.get(c).copied().unwrap_or(f64::NAN);
        w.write_all(&s.to_le_bytes()).map_err(io)?;
    }
    for p in 0..draws.n_params() {
        for c in 0..draws.n_chains {
            for i in 0..draws.n_draws {
                w.write_all(&draws.draw(c, i)[p].to_le_bytes()).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

pub fn read_draws(path: &Path) -> Result<PosteriorDraws> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| Error::io(path, e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Data(format!("{} is not a draws file", path.display())));
    }
    let version = get_u32(&mut r).map_err(io)?;
    if version != VERSION {
        return Err(Error::Data(format!("unsupported draws version {version} in {}", path.display())));
    }
    let n_chains = get_u32(&mut r).map_err(io)? as usize;
    let n_draws = get_u32(&mut r).map_err(io)? as usize;
    let n_params = get_u32(&mut r).map_err(io)? as usize;
    let mut names = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let len = get_u32(&mut r).map_err(io)? as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf).map_err(io)?;
        names.push(String::from_utf8(buf).map_err(|e| Error::Data(format!("bad parameter name: {e}")))?);
    }
    let mut step_sizes = Vec::with_capacity(n_chains);
    for _ in 0..n_chains {
        step_sizes.push(get_f64(&mut r).map_err(io)?);
    }
    let mut values = vec![vec![0.0; n_draws * n_params]; n_chains];
    for p in 0..n_params {
        for chain in values.iter_mut() {
            for i in 0..n_draws {
                chain[i * n_params + p] = get_f64(&mut r).map_err(io)?;
            }
        }
    }
    Ok(PosteriorDraws { names, n_chains, n_draws, values, stats: vec![Vec::new(); n_chains], step_sizes })
}

/// Writes one summary row per parameter.
pub fn write_summary_csv(path: &Path, summaries: &[Summary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["param", "mean", "median", "sd", "q2.5", "q97.5", "rhat", "ess_bulk", "ess_tail"])
        .map_err(|e| Error::csv(path, e))?;
    for s in summaries {
        let row = [
            s.name.clone(),
            format!("{:.6}", s.mean),
            format!("{:.6}", s.median),
            format!("{:.6}", s.sd),
            format!("{:.6}", s.q2_5),
            format!("{:.6}", s.q97_5),
            format!("{:.4}", s.rhat),
            format!("{:.1}", s.ess_bulk),
            format!("{:.1}", s.ess_tail),
        ];
        w.write_record(&row).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
