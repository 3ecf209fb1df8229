//! File formats.
//!
//! # Binary TT container
//!
//! All integers and floats are little-endian.
//!
//! | bytes            | content                                           |
//! |------------------|---------------------------------------------------|
//! | 8                | magic `TTQCORE\0` (`54 54 51 43 4F 52 45 00`)      |
//! | 4 (`u32`)        | format version, currently `1`                     |
//! | 4 (`u32`)        | order `d`                                         |
//! | 8·d (`u64`)      | mode sizes `n_0 … n_{d-1}`                        |
//! | 8·(d+1) (`u64`)  | ranks `r_0 … r_d` (`r_0 = r_d = 1`)               |
//! | 1 (`u8`)         | `1` if the cores are left-orthogonal, else `0`    |
//! | 8·Σ r_j n_j r_{j+1} (`f64`) | cores in order, each row-major          |
//!
//! "Row-major" means that entry `(a, i, b)` of a core of shape `(l, n, r)` is
//! stored at offset `b + r·(i + n·a)` within that core's block. Readers reject
//! trailing bytes, inconsistent shapes, non-finite values and a set
//! orthogonality flag that the cores do not satisfy.
//!
//! # JSON debug format
//!
//! ```json
//! {"format":"ttq-tt","version":1,"dims":[4,5],"ranks":[1,2,1],
//!  "left_orthogonal":false,"cores":[[...8 values...],[...10 values...]]}
//! ```
//!
//! Each entry of `cores` lists one core in the same row-major order as the
//! binary container.
//!
//! # Sample files
//!
//! A plain-text format for observed entries. Lines starting with `#` and blank
//! lines are ignored. The first three content lines hold the order `d`, the `d`
//! mode sizes separated by whitespace, and the number of samples. Every
//! following line holds `d` one-based indices and the observed value:
//!
//! ```text
//! # 2 x 3 matrix, two observations
//! 2
//! 2 3
//! 2
//! 1 1 0.5
//! 2 3 -1.25e-3
//! ```

use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use crate::completion::SampleSet;
use crate::tt::{Core, TTTensor};
use crate::{Error, Result};

/// Magic bytes opening a binary TT container.
pub const TT_MAGIC: [u8; 8] = *b"TTQCORE\0";
/// Current container version.
pub const TT_VERSION: u32 = 1;

const ORTHOGONALITY_TOLERANCE: f64 = 1e-12;

fn row_major_values(c: &Core) -> Vec<f64> {
    let (l, n, r) = c.shape();
    let mut out = Vec::with_capacity(c.len());
    for a in 0..l {
        for i in 0..n {
            for b in 0..r {
                out.push(c.get(a, i, b));
            }
        }
    }
    out
}

fn core_from_row_major(l: usize, n: usize, r: usize, v: &[f64]) -> Core {
    Core::from_fn(l, n, r, |a, i, b| v[b + r * (i + n * a)])
}

fn assemble(dims: &[usize], ranks: &[usize], left_orthogonal: bool, blocks: Vec<Vec<f64>>) -> Result<TTTensor> {
    let d = dims.len();
    if d == 0 || ranks.len() != d + 1 || blocks.len() != d {
        return Err(Error::Format(format!("inconsistent header: {d} dims, {} ranks, {} cores", ranks.len(), blocks.len())));
    }
    let mut cores = Vec::with_capacity(d);
    for (j, v) in blocks.iter().enumerate() {
        let expected = ranks[j] * dims[j] * ranks[j + 1];
        if v.len() != expected {
            return Err(Error::Format(format!("core {j} holds {} values, expected {expected}", v.len())));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Format(format!("core {j} contains non-finite values")));
        }
        cores.push(core_from_row_major(ranks[j], dims[j], ranks[j + 1], v));
    }
    let x = TTTensor::new(cores)?;
    if left_orthogonal {
        for j in 0..d - 1 {
            let l = x.core(j).left_unfolding();
            let g = l.transpose() * &l;
            let err = (g - crate::linalg::Mat::identity(ranks[j + 1], ranks[j + 1])).norm();
            if err > ORTHOGONALITY_TOLERANCE * (ranks[j + 1] as f64).sqrt().max(1.0) * 10.0 {
                return Err(Error::Format(format!("core {j} is flagged left-orthogonal but deviates by {err:.3e}")));
            }
        }
    }
    Ok(x.with_flag(left_orthogonal))
}

/// Write `x` in the binary container format.
pub fn write_tt<W: Write>(x: &TTTensor, mut w: W) -> Result<()> {
    w.write_all(&TT_MAGIC)?;
    w.write_all(&TT_VERSION.to_le_bytes())?;
    w.write_all(&(x.order() as u32).to_le_bytes())?;
    for n in x.dims() {
        w.write_all(&(n as u64).to_le_bytes())?;
    }
    for r in x.ranks() {
        w.write_all(&(r as u64).to_le_bytes())?;
    }
    w.write_all(&[x.is_left_orthogonal() as u8])?;
    for c in x.cores() {
        for v in row_major_values(c) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated container".into()),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

fn read_u64_usize<R: Read>(r: &mut R) -> Result<usize> {
    usize::try_from(u64::from_le_bytes(read_exact::<8, _>(r)?)).map_err(|_| Error::Format("size does not fit in memory".into()))
}

/// Read a tensor train from the binary container format.
pub fn read_tt<R: Read>(mut r: R) -> Result<TTTensor> {
    if read_exact::<8, _>(&mut r)? != TT_MAGIC {
        return Err(Error::Format("not a TT container (bad magic)".into()));
    }
    let version = u32::from_le_bytes(read_exact::<4, _>(&mut r)?);
    if version != TT_VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let d = u32::from_le_bytes(read_exact::<4, _>(&mut r)?) as usize;
    if d == 0 {
        return Err(Error::Format("order must be positive".into()));
    }
    let dims = (0..d).map(|_| read_u64_usize(&mut r)).collect::<Result<Vec<_>>>()?;
    let ranks = (0..=d).map(|_| read_u64_usize(&mut r)).collect::<Result<Vec<_>>>()?;
    let flag = match read_exact::<1, _>(&mut r)?[0] {
        0 => false,
        1 => true,
        f => return Err(Error::Format(format!("invalid orthogonality flag {f}"))),
    };
    let mut blocks = Vec::with_capacity(d);
    for j in 0..d {
        let len = ranks[j]
            .checked_mul(dims[j])
            .and_then(|v| v.checked_mul(ranks[j + 1]))
            .ok_or_else(|| Error::Format("core size overflows".into()))?;
        let mut v = Vec::with_capacity(len.min(1 << 24));
        for _ in 0..len {
            v.push(f64::from_le_bytes(read_exact::<8, _>(&mut r)?));
        }
        blocks.push(v);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after the last core".into()));
    }
    assemble(&dims, &ranks, flag, blocks)
}

#[derive(Serialize, Deserialize)]
struct JsonTt {
    format: String,
    version: u32,
    dims: Vec<usize>,
    ranks: Vec<usize>,
    left_orthogonal: bool,
    cores: Vec<Vec<f64>>,
}

/// Serialise `x` in the JSON debug format.
pub fn tt_to_json(x: &TTTensor) -> Result<String> {
    let doc = JsonTt {
        format: "ttq-tt".into(),
        version: TT_VERSION,
        dims: x.dims(),
        ranks: x.ranks(),
        left_orthogonal: x.is_left_orthogonal(),
        cores: x.cores().iter().map(row_major_values).collect(),
    };
    serde_json::to_string(&doc).map_err(|e| Error::Format(e.to_string()))
}

/// Parse the JSON debug format.
pub fn tt_from_json(s: &str) -> Result<TTTensor> {
    let doc: JsonTt = serde_json::from_str(s).map_err(|e| Error::Format(e.to_string()))?;
    if doc.format != "ttq-tt" || doc.version != TT_VERSION {
        return Err(Error::Format(format!("unsupported document '{}' version {}", doc.format, doc.version)));
    }
    assemble(&doc.dims, &doc.ranks, doc.left_orthogonal, doc.cores)
}

/// Write observed entries in the sample text format (one-based indices).
pub fn write_samples<W: Write>(s: &SampleSet, mut w: W) -> Result<()> {
    writeln!(w, "{}", s.order())?;
    writeln!(w, "{}", s.dims().iter().map(ToString::to_string).collect::<Vec<_>>().join(" "))?;
    writeln!(w, "{}", s.len())?;
    for k in 0..s.len() {
        for i in s.index(k) {
            write!(w, "{} ", i + 1)?;
        }
        // `{:e}` of f64 round-trips exactly
        writeln!(w, "{:e}", s.values()[k])?;
    }
    w.flush()?;
    Ok(())
}

fn parse_usize(tok: &str, line: usize) -> Result<usize> {
    tok.parse().map_err(|_| Error::Format(format!("line {line}: expected a non-negative integer, found '{tok}'")))
}

/// Read observed entries from the sample text format.
pub fn read_samples<R: Read>(r: R) -> Result<SampleSet> {
    let mut lines = BufReader::new(r).lines().enumerate().filter_map(|(no, l)| match l {
        Ok(l) => {
            let t = l.trim().to_owned();
            (!t.is_empty() && !t.starts_with('#')).then_some(Ok((no + 1, t)))
        }
        Err(e) => Some(Err(e)),
    });
    let mut next =
        |what: &str| -> Result<(usize, String)> { lines.next().transpose()?.ok_or_else(|| Error::Format(format!("missing {what}"))) };
    let (no, l) = next("order")?;
    let d = parse_usize(&l, no)?;
    let (no, l) = next("mode sizes")?;
    let dims = l.split_whitespace().map(|t| parse_usize(t, no)).collect::<Result<Vec<_>>>()?;
    if d == 0 || dims.len() != d {
        return Err(Error::Format(format!("line {no}: expected {d} mode sizes, found {}", dims.len())));
    }
    let (no, l) = next("sample count")?;
    let m = parse_usize(&l, no)?;
    let mut idx = Vec::with_capacity(m.saturating_mul(d).min(1 << 26));
    let mut values = Vec::with_capacity(m.min(1 << 24));
    for _ in 0..m {
        let (no, l) = next("sample line")?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.len() != d + 1 {
            return Err(Error::Format(format!("line {no}: expected {} fields, found {}", d + 1, toks.len())));
        }
        for (k, t) in toks[..d].iter().enumerate() {
            let i = parse_usize(t, no)?;
            if i == 0 || i > dims[k] {
                return Err(Error::Format(format!("line {no}: index {i} outside 1..={}", dims[k])));
            }
            idx.push(i - 1);
        }
        let v: f64 = toks[d].parse().map_err(|_| Error::Format(format!("line {no}: invalid value '{}'", toks[d])))?;
        values.push(v);
    }
    if let Some((no, _)) = lines.next().transpose()? {
        return Err(Error::Format(format!("line {no}: more samples than declared")));
    }
    SampleSet::from_flat(dims, idx, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_tt() -> TTTensor {
        let mut k = 0.0;
        let mut next = || {
            k += 1.0;
            k * 0.25 - 1.0
        };
        TTTensor::new(vec![Core::from_fn(1, 2, 2, |_, _, _| next()), Core::from_fn(2, 3, 1, |_, _, _| next())]).unwrap()
    }

    #[test]
    fn binary_layout_is_row_major() {
        let x =
            TTTensor::new(vec![Core::from_fn(1, 2, 2, |_, i, b| (10 * i + b) as f64), Core::from_fn(2, 1, 1, |a, _, _| 100.0 + a as f64)])
                .unwrap();
        let mut buf = Vec::new();
        write_tt(&x, &mut buf).unwrap();
        assert_eq!(&buf[..8], b"TTQCORE\0");
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 2);
        let header = 16 + 8 * 2 + 8 * 3 + 1;
        assert_eq!(buf.len(), header + 8 * (4 + 2));
        assert_eq!(buf[header - 1], 0);
        let vals: Vec<f64> = buf[header..].chunks(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        // first core: (a=0,i=0,b=0), (0,0,1), (0,1,0), (0,1,1)
        assert_eq!(vals, vec![0.0, 1.0, 10.0, 11.0, 100.0, 101.0]);
    }

    #[test]
    fn binary_and_json_round_trip() {
        let x = small_tt();
        let mut buf = Vec::new();
        write_tt(&x, &mut buf).unwrap();
        assert_eq!(read_tt(buf.as_slice()).unwrap(), x);
        assert_eq!(tt_from_json(&tt_to_json(&x).unwrap()).unwrap(), x);
        let y = x.left_orthogonalize().unwrap();
        let mut buf = Vec::new();
        write_tt(&y, &mut buf).unwrap();
        let back = read_tt(buf.as_slice()).unwrap();
        assert!(back.is_left_orthogonal());
        assert_eq!(back, y);
    }

    #[test]
    fn binary_rejects_corruption() {
        let x = small_tt();
        let mut buf = Vec::new();
        write_tt(&x, &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_tt(bad.as_slice()), Err(Error::Format(_))));
        assert!(matches!(read_tt(&buf[..buf.len() - 3]), Err(Error::Format(_))));
        let mut longer = buf.clone();
        longer.push(0);
        assert!(matches!(read_tt(longer.as_slice()), Err(Error::Format(_))));
        // claim orthogonality the cores do not have
        let flag = 16 + 8 * 2 + 8 * 3;
        let mut lying = buf.clone();
        lying[flag] = 1;
        assert!(matches!(read_tt(lying.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn samples_round_trip_with_comments() {
        let text = "# header comment\n2\n2 3\n\n2\n1 1 0.5\n# inner comment\n2 3 -1.25e-3\n";
        let s = read_samples(text.as_bytes()).unwrap();
        assert_eq!(s.dims(), &[2, 3]);
        assert_eq!(s.index(1), &[1, 2]);
        assert_eq!(s.values(), &[0.5, -1.25e-3]);
        let mut buf = Vec::new();
        write_samples(&s, &mut buf).unwrap();
        let back = read_samples(buf.as_slice()).unwrap();
        assert_eq!(back.flat_indices(), s.flat_indices());
        assert_eq!(back.values(), s.values());
    }

    #[test]
    fn samples_reject_bad_input() {
        assert!(read_samples("2\n2 3\n1\n0 1 1.0\n".as_bytes()).is_err());
        assert!(read_samples("2\n2 3\n1\n3 1 1.0\n".as_bytes()).is_err());
        assert!(read_samples("2\n2 3\n2\n1 1 1.0\n".as_bytes()).is_err());
        assert!(read_samples("2\n2 3\n1\n1 1 1.0\n2 2 1.0\n".as_bytes()).is_err());
        assert!(read_samples("2\n2 3\n2\n1 1 1.0\n1 1 2.0\n".as_bytes()).is_err());
        assert!(read_samples("2\n2\n1\n1 1 1.0\n".as_bytes()).is_err());
    }
}
