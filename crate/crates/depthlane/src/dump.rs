//! Plain-text lane dumps.
//!
//! ```text
//! depthlane-lanes 1
//! lanes 2
//! lane 0.91 3
//! -1.75 5.0 0.0
//! -1.74 7.0 0.0
//! -1.72 9.0 0.0
//! lane 0.88 3
//! ...
//! ```
//!
//! Each `lane` line gives the score and the number of `x y z` lines that
//! follow. Ground-truth lanes are written with score 1.

use depthlane_core::{LaneInstance, Point3};

const HEADER: &str = "depthlane-lanes";
pub const DUMP_VERSION: u32 = 1;

pub fn write_lanes(lanes: &[LaneInstance]) -> String {
    let mut s = format!("{HEADER} {DUMP_VERSION}\nlanes {}\n", lanes.len());
    for lane in lanes {
        s.push_str(&format!("lane {:?} {}\n", lane.score, lane.points.len()));
        for p in &lane.points {
            s.push_str(&format!("{:?} {:?} {:?}\n", p.x, p.y, p.z));
        }
    }
    s
}

/// Ground-truth polylines as lanes with score 1.
pub fn from_polylines(lanes: &[Vec<Point3>]) -> Vec<LaneInstance> {
    lanes
        .iter()
        .map(|points| LaneInstance {
            points: points.clone(),
            score: 1.0,
        })
        .collect()
}

pub fn read_lanes(text: &str) -> Result<Vec<LaneInstance>, String> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let mut next = |what: &str| lines.next().ok_or_else(|| format!("missing {what}"));
    let header = next("header")?;
    if header != format!("{HEADER} {DUMP_VERSION}") {
        return Err(format!("unexpected header `{header}`"));
    }
    let count: usize = next("lane count")?
        .strip_prefix("lanes ")
        .and_then(|n| n.parse().ok())
        .ok_or("bad lane count")?;
    let mut lanes = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let head: Vec<&str> = next("lane header")?.split_whitespace().collect();
        let (score, n) = match head.as_slice() {
            ["lane", score, n] => (
                score.parse::<f64>().map_err(|e| e.to_string())?,
                n.parse::<usize>().map_err(|e| e.to_string())?,
            ),
            _ => return Err("bad lane header".into()),
        };
        let mut points = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let v: Vec<f64> = next("point")?
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| e.to_string()))
                .collect::<Result<_, _>>()?;
            match v.as_slice() {
                [x, y, z] => points.push(Point3::new(*x, *y, *z)),
                _ => return Err("a point needs three coordinates".into()),
            }
        }
        lanes.push(LaneInstance { points, score });
    }
    if lines.next().is_some() {
        return Err("trailing lines".into());
    }
    Ok(lanes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let lanes = vec![
            LaneInstance {
                points: vec![Point3::new(-1.75, 5.0, 0.1 + 0.2), Point3::new(1.0 / 3.0, 7.0, -0.0)],
                score: 0.912345678901,
            },
            LaneInstance {
                points: vec![],
                score: 1.0,
            },
        ];
        assert_eq!(read_lanes(&write_lanes(&lanes)).unwrap(), lanes);
    }

    #[test]
    fn rejects_wrong_header_and_short_files() {
        assert!(read_lanes("lanes 0\n").is_err());
        assert!(read_lanes("depthlane-lanes 1\nlanes 1\nlane 1.0 2\n0 1 2\n").is_err());
        assert_eq!(read_lanes("depthlane-lanes 1\nlanes 0\n").unwrap(), vec![]);
    }
}
