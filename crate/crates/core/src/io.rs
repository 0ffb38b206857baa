//! File formats shared by the library and the command line: atomic writes,
//! trajectory CSV and sequence CSV.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::synthworld::TrajectoryRecord;
use crate::tensor::Mat;

/// Writes `bytes` to a temporary sibling of `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::Contract(format!("`{}` is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    Ok(result?)
}

fn coord_header(prefix: &str, n: usize) -> String {
    let mut h = prefix.to_string();
    for c in 0..n {
        let _ = write!(h, ",c{c}");
    }
    h.push('\n');
    h
}

/// `traj_id,step,t,c0,...`: one row per grid point, sorted by trajectory then step.
pub fn trajectories_to_csv(trajs: &[TrajectoryRecord]) -> Result<String> {
    let coords = trajs.first().map_or(0, |t| t.coords());
    if trajs.iter().any(|t| t.coords() != coords) {
        return Err(Error::Shape("trajectories differ in coordinate count".into()));
    }
    let mut s = coord_header("traj_id,step,t", coords);
    for (id, tr) in trajs.iter().enumerate() {
        for (step, &t) in tr.grid.iter().enumerate() {
            let _ = write!(s, "{id},{step},{t:.16e}");
            for v in tr.states.row(step) {
                let _ = write!(s, ",{v:e}");
            }
            s.push('\n');
        }
    }
    Ok(s)
}

fn parse_f64(field: &str, line: usize) -> Result<f64> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::Parse(format!("line {line}: `{field}` is not a number")))
}

fn parse_usize(field: &str, line: usize) -> Result<usize> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::Parse(format!("line {line}: `{field}` is not an index")))
}

/// Parses the trajectory CSV, optionally attaching a `(frames, dim)` shape.
pub fn trajectories_from_csv(text: &str, frame_shape: Option<(usize, usize)>) -> Result<Vec<TrajectoryRecord>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::Parse("empty trajectory file".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 4 || cols[..3] != ["traj_id", "step", "t"] {
        return Err(Error::Parse("trajectory header must start with traj_id,step,t,c0".into()));
    }
    let coords = cols.len() - 3;
    let mut out = Vec::new();
    let mut cur: Option<(usize, Vec<f64>, Vec<f64>)> = None;
    let finish = |c: Option<(usize, Vec<f64>, Vec<f64>)>, out: &mut Vec<TrajectoryRecord>| -> Result<()> {
        if let Some((_, grid, data)) = c {
            let states = Mat::from_vec(grid.len(), coords, data)?;
            out.push(TrajectoryRecord::new(grid, states, frame_shape)?);
        }
        Ok(())
    };
    for (i, line) in lines {
        let ln = i + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != coords + 3 {
            return Err(Error::Parse(format!("line {ln}: expected {} fields, found {}", coords + 3, fields.len())));
        }
        let id = parse_usize(fields[0], ln)?;
        let step = parse_usize(fields[1], ln)?;
        let t = parse_f64(fields[2], ln)?;
        if cur.as_ref().is_some_and(|c| c.0 != id) {
            let prev = cur.take().unwrap();
            if id < prev.0 {
                return Err(Error::Parse(format!("line {ln}: rows not sorted by traj_id")));
            }
            finish(Some(prev), &mut out)?;
        }
        let entry = cur.get_or_insert_with(|| (id, Vec::new(), Vec::new()));
        if step != entry.1.len() {
            return Err(Error::Parse(format!("line {ln}: step {step} out of order")));
        }
        entry.1.push(t);
        for f in &fields[3..] {
            entry.2.push(parse_f64(f, ln)?);
        }
    }
    finish(cur, &mut out)?;
    if out.is_empty() {
        return Err(Error::Parse("trajectory file has no rows".into()));
    }
    Ok(out)
}

/// `seq_id,frame,c0,...` for sequences given as rows of `[N, F·d]`.
pub fn sequences_to_csv(seqs: &Mat, frames: usize) -> Result<String> {
    if frames == 0 || seqs.cols % frames != 0 {
        return Err(Error::Shape(format!("{} coordinates do not split into {frames} frames", seqs.cols)));
    }
    let d = seqs.cols / frames;
    let mut s = coord_header("seq_id,frame", d);
    for r in 0..seqs.rows {
        for (k, frame) in seqs.row(r).chunks(d).enumerate() {
            let _ = write!(s, "{r},{k}");
            for v in frame {
                let _ = write!(s, ",{v:e}");
            }
            s.push('\n');
        }
    }
    Ok(s)
}

/// Parses a sequence CSV into `([N, F·d], F)`.
pub fn sequences_from_csv(text: &str) -> Result<(Mat, usize)> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::Parse("empty sequence file".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 3 || cols[..2] != ["seq_id", "frame"] {
        return Err(Error::Parse("sequence header must start with seq_id,frame,c0".into()));
    }
    let d = cols.len() - 2;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in lines {
        let ln = i + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 2 {
            return Err(Error::Parse(format!("line {ln}: expected {} fields", d + 2)));
        }
        let id = parse_usize(fields[0], ln)?;
        let frame = parse_usize(fields[1], ln)?;
        if id == rows.len() && frame == 0 {
            rows.push(Vec::new());
        } else if id + 1 != rows.len() || frame * d != rows[id].len() {
            return Err(Error::Parse(format!("line {ln}: rows must be sorted by seq_id then frame")));
        }
        for f in &fields[2..] {
            rows[id].push(parse_f64(f, ln)?);
        }
    }
    let n = rows.len();
    if n == 0 {
        return Err(Error::Parse("sequence file has no rows".into()));
    }
    let width = rows[0].len();
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::Parse("sequences differ in frame count".into()));
    }
    let data = rows.into_iter().flatten().collect();
    Ok((Mat::from_vec(n, width, data)?, width / d))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trajectory_csv_round_trip() {
        let grid = vec![0.0, 1.0 / 3.0, 1.0];
        let states = Mat::from_vec(3, 2, vec![0.1, -2.0, 1e-9, 3.5, 7.0, 0.0]).unwrap();
        let tr = TrajectoryRecord::new(grid, states, None).unwrap();
        let text = trajectories_to_csv(&[tr.clone(), tr.clone()]).unwrap();
        assert!(text.starts_with("traj_id,step,t,c0,c1\n"));
        let back = trajectories_from_csv(&text, None).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].grid, tr.grid);
        assert_eq!(back[1].states, tr.states);
    }

    #[test]
    fn trajectory_csv_rejects_bad_input() {
        assert!(trajectories_from_csv("traj_id,step,t,c0\n0,0,0.0,1\n0,2,1.0,1\n", None).is_err());
        assert!(trajectories_from_csv("a,b,c,d\n", None).is_err());
        assert!(trajectories_from_csv("traj_id,step,t,c0\n0,0,0.0,x\n", None).is_err());
        assert!(trajectories_from_csv("traj_id,step,t,c0\n0,0,0.1,1\n0,1,1.0,1\n", None).is_err());
    }

    #[test]
    fn sequence_csv_round_trip() {
        let m = Mat::from_vec(2, 4, vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 0.25, 8.0]).unwrap();
        let text = sequences_to_csv(&m, 2).unwrap();
        assert!(text.starts_with("seq_id,frame,c0,c1\n"));
        let (back, f) = sequences_from_csv(&text).unwrap();
        assert_eq!(f, 2);
        assert_eq!(back, m);
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
