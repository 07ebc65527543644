//! The universal dataset record: a time-aligned series of control inputs,
//! exogenous inputs, and responses at fixed dt, persisted as CSV with
//! `#`-prefixed metadata lines ahead of the header. Serialization uses 17
//! significant decimal digits so doubles round-trip exactly.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub dt: f64,
    pub e_cmd: Vec<f64>,
    pub b_cmd: Vec<f64>,
    /// Road grade in percent; `None` for flat-mode episodes (w_dim = 0).
    pub grade: Option<Vec<f64>>,
    pub v: Vec<f64>,
    pub a: Vec<f64>,
    pub f_rate: Vec<f64>,
    pub seed: u64,
    pub generator: String,
    pub plant_hash: String,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    pub fn has_grade(&self) -> bool {
        self.grade.is_some()
    }

    pub fn u_at(&self, k: usize) -> [f64; 2] {
        [self.e_cmd[k], self.b_cmd[k]]
    }

    /// Exogenous input vector at step k (empty in flat mode).
    pub fn w_at(&self, k: usize) -> Vec<f64> {
        match &self.grade {
            Some(g) => vec![g[k]],
            None => vec![],
        }
    }

    /// Response vector at step k, channel order (a, v, f_rate).
    pub fn y_at(&self, k: usize) -> [f64; 3] {
        [self.a[k], self.v[k], self.f_rate[k]]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.v.len();
        let cols = [
            ("E_cmd", self.e_cmd.len()),
            ("B_cmd", self.b_cmd.len()),
            ("a", self.a.len()),
            ("f_rate", self.f_rate.len()),
        ];
        for (name, len) in cols {
            if len != n {
                return Err(Error::InvalidInput(format!(
                    "column {name} has {len} rows, expected {n}"
                )));
            }
        }
        if let Some(g) = &self.grade {
            if g.len() != n {
                return Err(Error::InvalidInput(format!(
                    "column theta_rdg has {} rows, expected {n}",
                    g.len()
                )));
            }
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidInput(format!("dt must be > 0, got {}", self.dt)));
        }
        Ok(())
    }
}

fn fmt_f64(x: f64) -> String {
    // 17 significant digits: enough for exact f64 round-trip.
    format!("{x:.16e}")
}

pub fn write_episode(ep: &Episode, path: &Path) -> Result<()> {
    ep.validate()?;
    let mut out = String::new();
    let _ = writeln!(out, "# dt = {}", fmt_f64(ep.dt));
    let _ = writeln!(out, "# seed = {}", ep.seed);
    let _ = writeln!(out, "# generator = {}", ep.generator);
    let _ = writeln!(out, "# plant_hash = {}", ep.plant_hash);
    if ep.has_grade() {
        let _ = writeln!(out, "t,E_cmd,B_cmd,theta_rdg,v,a,f_rate");
    } else {
        let _ = writeln!(out, "t,E_cmd,B_cmd,v,a,f_rate");
    }
    for k in 0..ep.len() {
        let t = k as f64 * ep.dt;
        if let Some(g) = &ep.grade {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                fmt_f64(t),
                fmt_f64(ep.e_cmd[k]),
                fmt_f64(ep.b_cmd[k]),
                fmt_f64(g[k]),
                fmt_f64(ep.v[k]),
                fmt_f64(ep.a[k]),
                fmt_f64(ep.f_rate[k])
            );
        } else {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                fmt_f64(t),
                fmt_f64(ep.e_cmd[k]),
                fmt_f64(ep.b_cmd[k]),
                fmt_f64(ep.v[k]),
                fmt_f64(ep.a[k]),
                fmt_f64(ep.f_rate[k])
            );
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_episode(path: &Path) -> Result<Episode> {
    let text = std::fs::read_to_string(path)?;
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let mut dt = None;
    let mut seed = 0u64;
    let mut generator = String::new();
    let mut plant_hash = String::new();
    let mut header: Option<(usize, Vec<String>)> = None;
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(meta) = line.strip_prefix('#') {
            if let Some((k, v)) = meta.split_once('=') {
                match k.trim() {
                    "dt" => {
                        dt = Some(v.trim().parse::<f64>().map_err(|e| {
                            perr(lineno, format!("bad dt: {e}"))
                        })?)
                    }
                    "seed" => {
                        seed = v
                            .trim()
                            .parse()
                            .map_err(|e| perr(lineno, format!("bad seed: {e}")))?
                    }
                    "generator" => generator = v.trim().to_string(),
                    "plant_hash" => plant_hash = v.trim().to_string(),
                    _ => {}
                }
            }
            continue;
        }
        match &header {
            None => {
                header = Some((lineno, line.split(',').map(|s| s.trim().to_string()).collect()));
            }
            Some((_, cols)) => {
                let vals: std::result::Result<Vec<f64>, _> =
                    line.split(',').map(|s| s.trim().parse::<f64>()).collect();
                let vals = vals.map_err(|e| perr(lineno, format!("bad number: {e}")))?;
                if vals.len() != cols.len() {
                    return Err(perr(
                        lineno,
                        format!("ragged row: {} fields, expected {}", vals.len(), cols.len()),
                    ));
                }
                rows.push((lineno, vals));
            }
        }
    }

    let (hline, cols) = header.ok_or_else(|| perr(0, "missing header".into()))?;
    let col = |name: &str| -> Result<usize> {
        cols.iter()
            .position(|c| c == name)
            .ok_or_else(|| perr(hline, format!("header missing `{name}` column")))
    };
    let it = col("t")?;
    let ie = col("E_cmd")?;
    let ib = col("B_cmd")?;
    let iv = col("v")?;
    let ia = col("a")?;
    let iff = col("f_rate")?;
    let ig = cols.iter().position(|c| c == "theta_rdg");

    let dt = match dt {
        Some(dt) => dt,
        None => {
            if rows.len() < 2 {
                return Err(perr(hline, "no dt metadata and too few rows to infer it".into()));
            }
            rows[1].1[it] - rows[0].1[it]
        }
    };
    if !(dt > 0.0) {
        return Err(perr(hline, format!("non-positive dt {dt}")));
    }

    let n = rows.len();
    let mut ep = Episode {
        dt,
        e_cmd: Vec::with_capacity(n),
        b_cmd: Vec::with_capacity(n),
        grade: ig.map(|_| Vec::with_capacity(n)),
        v: Vec::with_capacity(n),
        a: Vec::with_capacity(n),
        f_rate: Vec::with_capacity(n),
        seed,
        generator,
        plant_hash,
    };
    let t0 = rows.first().map(|(_, r)| r[it]).unwrap_or(0.0);
    for (k, (lineno, r)) in rows.iter().enumerate() {
        let expected_t = t0 + k as f64 * dt;
        if (r[it] - expected_t).abs() > 1e-6 * dt.max(1.0) {
            return Err(perr(
                *lineno,
                format!("non-uniform time grid: t = {}, expected {}", r[it], expected_t),
            ));
        }
        ep.e_cmd.push(r[ie]);
        ep.b_cmd.push(r[ib]);
        if let (Some(g), Some(i)) = (ep.grade.as_mut(), ig) {
            g.push(r[i]);
        }
        ep.v.push(r[iv]);
        ep.a.push(r[ia]);
        ep.f_rate.push(r[iff]);
    }
    Ok(ep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_episode(grade: bool) -> Episode {
        Episode {
            dt: 0.1,
            e_cmd: vec![0.0, 10.5, 33.333333333333331],
            b_cmd: vec![0.0, 0.0, 5.0],
            grade: grade.then(|| vec![0.1, -0.2, 1.5]),
            v: vec![1.0, 1.1, 1.2000000000000002],
            a: vec![0.0, 1.0, 1.0],
            f_rate: vec![0.8, 0.9, 1.0],
            seed: 42,
            generator: "test".into(),
            plant_hash: "deadbeef".into(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for grade in [true, false] {
            let ep = sample_episode(grade);
            let path = dir.path().join("ep.csv");
            write_episode(&ep, &path).unwrap();
            let back = read_episode(&path).unwrap();
            assert_eq!(ep, back);
        }
    }

    #[test]
    fn missing_v_column_names_it() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "t,E_cmd,B_cmd,a,f_rate\n0,0,0,0,0\n").unwrap();
        let err = read_episode(&path).unwrap_err().to_string();
        assert!(err.contains("`v`"), "error should name the column: {err}");
    }

    #[test]
    fn absent_grade_column_gives_flat_mode() {
        let dir = tempfile::tempdir().unwrap();
        let ep = sample_episode(false);
        let path = dir.path().join("flat.csv");
        write_episode(&ep, &path).unwrap();
        let back = read_episode(&path).unwrap();
        assert!(!back.has_grade());
        assert!(back.w_at(0).is_empty());
    }

    #[test]
    fn ragged_row_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ragged.csv");
        std::fs::write(&path, "t,E_cmd,B_cmd,v,a,f_rate\n0,0,0,0,0,0\n0.1,0,0\n").unwrap();
        match read_episode(&path).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_uniform_grid_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.csv");
        std::fs::write(
            &path,
            "# dt = 0.1\nt,E_cmd,B_cmd,v,a,f_rate\n0,0,0,0,0,0\n0.25,0,0,0,0,0\n",
        )
        .unwrap();
        assert!(read_episode(&path).is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_values_round_trip(values in proptest::collection::vec(-1e6f64..1e6, 1..20)) {
            let n = values.len();
            let ep = Episode {
                dt: 0.1,
                e_cmd: values.clone(),
                b_cmd: values.iter().map(|x| x * 0.5).collect(),
                grade: Some(values.iter().map(|x| x * 1e-3).collect()),
                v: values.iter().map(|x| x.abs()).collect(),
                a: vec![0.0; n],
                f_rate: vec![0.8; n],
                seed: 1,
                generator: "prop".into(),
                plant_hash: String::new(),
            };
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.csv");
            write_episode(&ep, &path).unwrap();
            let back = read_episode(&path).unwrap();
            prop_assert_eq!(ep, back);
        }
    }
}
