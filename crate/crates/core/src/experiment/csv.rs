//! Trajectory CSV: one header row, one row per logged step.
//!
//! Floats use Rust's shortest round-trip formatting, so parsing a written
//! file recovers every value exactly.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::net::TrajectoryRecord;

/// Column names for `m` neurons.
pub fn header(m: usize) -> Vec<String> {
    let mut cols = vec!["t".to_string()];
    for j in 1..=m {
        for l in 1..=2 {
            cols.push(format!("B{j}{l}"));
        }
    }
    for i in 1..=m {
        for j in 1..=m {
            if i != j {
                cols.push(format!("E{i}{j}"));
            }
        }
    }
    for j in 1..=m {
        cols.push(format!("R{j}"));
    }
    for i in 1..=m {
        for j in i + 1..=m {
            cols.push(format!("R{i}{j}"));
        }
    }
    cols.push("loss_sq".into());
    cols.push("loss_corr".into());
    for j in 1..=m {
        cols.push(format!("rho{j}"));
    }
    for i in 1..=m {
        for j in i + 1..=m {
            cols.push(format!("corr{i}{j}"));
        }
    }
    cols
}

fn row(r: &TrajectoryRecord) -> Vec<String> {
    let m = r.neurons();
    let mut out = vec![r.t.to_string()];
    out.extend(r.b.iter().map(f64::to_string));
    for i in 0..m {
        for j in 0..m {
            if i != j {
                out.push(r.e[[i, j]].to_string());
            }
        }
    }
    out.extend(r.r.iter().map(f64::to_string));
    out.extend(r.r_pairs.iter().map(f64::to_string));
    out.push(r.loss_sq.to_string());
    out.push(r.loss_corr.to_string());
    out.extend(r.rho.iter().map(f64::to_string));
    for i in 0..m {
        for j in i + 1..m {
            out.push(r.corr[[i, j]].to_string());
        }
    }
    out
}

/// Writes the CSV for `m` neurons. An empty trajectory gives a header-only
/// file.
pub fn write_csv<W: Write>(trajectory: &[TrajectoryRecord], m: usize, mut out: W) -> std::io::Result<()> {
    writeln!(out, "{}", header(m).join(","))?;
    for r in trajectory {
        debug_assert_eq!(r.neurons(), m);
        writeln!(out, "{}", row(r).join(","))?;
    }
    out.flush()
}

pub fn emit_csv(trajectory: &[TrajectoryRecord], m: usize, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(trajectory, m, std::io::BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

pub fn to_csv_string(trajectory: &[TrajectoryRecord], m: usize) -> String {
    let mut buf = Vec::new();
    write_csv(trajectory, m, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("ascii output")
}

/// Parses a trajectory CSV. The head diagonal is restored as 1 and the
/// correlation diagonal as 1.
pub fn parse_csv(text: &str) -> Result<Vec<TrajectoryRecord>> {
    let err = |line: usize, message: String| Error::Parse {
        path: "<csv>".into(),
        message: format!("line {line}: {message}"),
    };
    let mut lines = text.lines();
    let head: Vec<&str> = lines.next().ok_or_else(|| err(1, "missing header".into()))?.split(',').collect();
    let m = (1..=64)
        .find(|&m| header(m).len() == head.len())
        .ok_or_else(|| err(1, format!("{} columns match no neuron count", head.len())))?;
    if header(m) != head {
        return Err(err(1, "header does not match the schema".into()));
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != head.len() {
            return Err(err(lineno, format!("expected {} fields, got {}", head.len(), fields.len())));
        }
        let mut it = fields.into_iter();
        let mut next_f64 = || -> Result<f64> {
            let s = it.next().expect("length checked");
            s.parse::<f64>().map_err(|e| err(lineno, format!("`{s}`: {e}")))
        };
        let t = next_f64()?;
        if t < 0.0 || t.fract() != 0.0 {
            return Err(err(lineno, format!("bad step `{t}`")));
        }
        let mut b = Array2::zeros((m, 2));
        for v in b.iter_mut() {
            *v = next_f64()?;
        }
        let mut e = Array2::eye(m);
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    e[[i, j]] = next_f64()?;
                }
            }
        }
        let r = (0..m).map(|_| next_f64()).collect::<Result<Vec<_>>>()?;
        let r_pairs = (0..m * (m - 1) / 2).map(|_| next_f64()).collect::<Result<Vec<_>>>()?;
        let loss_sq = next_f64()?;
        let loss_corr = next_f64()?;
        let rho = (0..m).map(|_| next_f64()).collect::<Result<Vec<_>>>()?;
        let mut corr = Array2::eye(m);
        for i in 0..m {
            for j in i + 1..m {
                let c = next_f64()?;
                corr[[i, j]] = c;
                corr[[j, i]] = c;
            }
        }
        records.push(TrajectoryRecord {
            t: t as usize,
            b,
            e,
            r,
            r_pairs,
            loss_sq,
            loss_corr,
            rho,
            corr,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_neuron_header() {
        let h = header(2).join(",");
        assert!(h.starts_with("t,B11,B12,B21,B22,E12,E21,R1,R2,R12,"));
        assert_eq!(h, "t,B11,B12,B21,B22,E12,E21,R1,R2,R12,loss_sq,loss_corr,rho1,rho2,corr12");
    }

    #[test]
    fn empty_trajectory_is_header_only() {
        let s = to_csv_string(&[], 3);
        assert_eq!(s.lines().count(), 1);
        assert!(s.ends_with('\n') && !s.contains('\r'));
        assert!(parse_csv(&s).unwrap().is_empty());
    }

    #[test]
    fn rejects_malformed_rows() {
        let mut s = to_csv_string(&[], 2);
        s.push_str("1,2,3\n");
        assert!(parse_csv(&s).unwrap_err().to_string().contains("line 2"));
        assert!(parse_csv("a,b\n").is_err());
    }
}
