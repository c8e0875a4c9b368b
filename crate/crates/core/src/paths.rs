//! Cadlag piecewise-constant histories and their dyadic discretizations.

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{config, domain, Result};

/// A right-continuous, piecewise-constant trajectory on `[0, horizon]`.
///
/// `times[0]` is always `0.0` and holds the initial value; every later entry
/// is a jump time. Coordinates that jump together share one record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePath {
    horizon: f64,
    times: Vec<f64>,
    values: Vec<Vec<f64>>,
}

impl SamplePath {
    pub fn constant(horizon: f64, value: Vec<f64>) -> Result<Self> {
        Self::new(horizon, value, Vec::new())
    }

    /// Builds a path from an initial value and `(time, value)` jump records.
    pub fn new(horizon: f64, initial: Vec<f64>, jumps: Vec<(f64, Vec<f64>)>) -> Result<Self> {
        if !(horizon.is_finite() && horizon >= 0.0) {
            return Err(domain(format!("horizon must be finite and >= 0, got {horizon}")));
        }
        let dim = initial.len();
        let mut times = Vec::with_capacity(jumps.len() + 1);
        let mut values = Vec::with_capacity(jumps.len() + 1);
        times.push(0.0);
        values.push(initial);
        for (t, v) in jumps {
            let last = *times.last().unwrap();
            if !(t > last && t <= horizon) {
                return Err(domain(format!(
                    "jump times must be strictly increasing in (0, {horizon}]; got {t} after {last}"
                )));
            }
            if v.len() != dim {
                return Err(domain(format!("jump at {t} has {} coordinates, expected {dim}", v.len())));
            }
            times.push(t);
            values.push(v);
        }
        if values.iter().flatten().any(|x| !x.is_finite()) {
            return Err(domain("path values must be finite"));
        }
        Ok(Self { horizon, times, values })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn initial(&self) -> &[f64] {
        &self.values[0]
    }

    /// All records including the initial one at time 0.
    pub fn records(&self) -> impl Iterator<Item = (f64, &[f64])> {
        self.times.iter().copied().zip(self.values.iter().map(Vec::as_slice))
    }

    pub fn jump_times(&self) -> &[f64] {
        &self.times[1..]
    }

    fn index_at(&self, t: f64) -> usize {
        self.times.partition_point(|&s| s <= t) - 1
    }

    pub fn value_at(&self, t: f64) -> Result<&[f64]> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(domain(format!("t = {t} outside [0, {}]", self.horizon)));
        }
        Ok(&self.values[self.index_at(t)])
    }

    /// Left limit `Z(t-)`; equals `Z(0)` at `t = 0`.
    pub fn value_before(&self, t: f64) -> Result<&[f64]> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(domain(format!("t = {t} outside [0, {}]", self.horizon)));
        }
        let i = self.times.partition_point(|&s| s < t);
        Ok(&self.values[i.saturating_sub(1)])
    }

    pub fn coordinate_at(&self, t: f64, coord: usize) -> Result<f64> {
        let v = self.value_at(t)?;
        v.get(coord)
            .copied()
            .ok_or_else(|| config(format!("coordinate {coord} out of range for path of dim {}", v.len())))
    }

    /// First time at which `coord` takes a value satisfying `pred`, if any.
    pub fn first_time_where(&self, coord: usize, pred: impl Fn(f64) -> bool) -> Option<f64> {
        self.records().find(|(_, v)| pred(v[coord])).map(|(t, _)| t)
    }

    pub fn discretize(&self, level: u32) -> Result<DiscretizedPath> {
        DiscretizationGrid::dyadic(level, self.horizon)?.discretize(self)
    }

    /// The path restricted to `[0, t]` and held constant afterwards.
    pub fn truncated(&self, t: f64) -> Result<SamplePath> {
        self.value_at(t)?;
        let keep = self.index_at(t) + 1;
        Ok(SamplePath {
            horizon: self.horizon,
            times: self.times[..keep].to_vec(),
            values: self.values[..keep].to_vec(),
        })
    }
}

/// Incremental construction with merging of coincident updates and
/// suppression of no-op records.
#[derive(Debug, Clone)]
pub struct PathBuilder {
    horizon: f64,
    current: Vec<f64>,
    times: Vec<f64>,
    values: Vec<Vec<f64>>,
}

impl PathBuilder {
    pub fn new(horizon: f64, initial: Vec<f64>) -> Self {
        Self {
            horizon,
            current: initial.clone(),
            times: vec![0.0],
            values: vec![initial],
        }
    }

    pub fn current(&self) -> &[f64] {
        &self.current
    }

    /// Sets `coord` to `value` from time `t` on. `t` must not precede the last update.
    pub fn set(&mut self, t: f64, coord: usize, value: f64) -> Result<()> {
        let last = *self.times.last().unwrap();
        if t < last || t > self.horizon {
            return Err(domain(format!("update at {t} precedes {last} or exceeds horizon")));
        }
        if self.current[coord] == value {
            return Ok(());
        }
        self.current[coord] = value;
        if t == last {
            *self.values.last_mut().unwrap() = self.current.clone();
        } else {
            self.times.push(t);
            self.values.push(self.current.clone());
        }
        Ok(())
    }

    pub fn finish(self) -> SamplePath {
        SamplePath {
            horizon: self.horizon,
            times: self.times,
            values: self.values,
        }
    }
}

/// Dyadic grid `τ·k/2^n`, optionally augmented with forced times where the
/// jump probability is positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretizationGrid {
    pub level: u32,
    pub horizon: f64,
    pub times: Vec<f64>,
}

impl DiscretizationGrid {
    pub fn dyadic(level: u32, horizon: f64) -> Result<Self> {
        if level == 0 || level > 30 {
            return Err(domain(format!("grid level must be in 1..=30, got {level}")));
        }
        let m = 1u64 << level;
        let times = (0..=m).map(|k| horizon * (k as f64) / (m as f64)).collect();
        Ok(Self { level, horizon, times })
    }

    pub fn with_forced(level: u32, horizon: f64, forced: &[f64]) -> Result<Self> {
        let mut g = Self::dyadic(level, horizon)?;
        for &f in forced {
            if !(0.0..=horizon).contains(&f) {
                return Err(domain(format!("forced grid time {f} outside [0, {horizon}]")));
            }
            g.times.push(f);
        }
        g.times.sort_by(f64::total_cmp);
        g.times.dedup();
        Ok(g)
    }

    pub fn bin_width(&self) -> f64 {
        1.0 / (1u64 << self.level) as f64
    }

    pub fn n_intervals(&self) -> usize {
        self.times.len() - 1
    }

    /// Index `k` of the interval `[τ_k, τ_{k+1})` containing `t`; `t = τ` maps
    /// to the last interval.
    pub fn interval_of(&self, t: f64) -> usize {
        let i = self.times.partition_point(|&s| s <= t);
        i.saturating_sub(1).min(self.n_intervals() - 1)
    }

    pub fn bin(&self, v: f64) -> i64 {
        bin_index(v, self.level)
    }

    pub fn discretize(&self, path: &SamplePath) -> Result<DiscretizedPath> {
        if (path.horizon() - self.horizon).abs() > 0.0 {
            return Err(domain("grid and path horizons differ"));
        }
        let bins = self
            .times
            .iter()
            .map(|&t| path.value_at(t).map(|v| v.iter().map(|&x| bin_index(x, self.level)).collect()))
            .collect::<Result<Vec<Vec<i64>>>>()?;
        Ok(DiscretizedPath { grid: self.clone(), bins })
    }
}

/// `i` such that `v ∈ [i/2^n, (i+1)/2^n)`.
pub fn bin_index(v: f64, level: u32) -> i64 {
    (v * (1u64 << level) as f64).floor() as i64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretizedPath {
    pub grid: DiscretizationGrid,
    /// `bins[k][j]`: bin of coordinate `j` at grid time `k`.
    pub bins: Vec<Vec<i64>>,
}

impl DiscretizedPath {
    /// Bins at grid times `τ_0..=τ_k`, flattened; the conditioning key for `Z̄^(n)_{τ_k}`.
    pub fn prefix(&self, k: usize) -> Vec<i64> {
        self.bins[..=k].iter().flatten().copied().collect()
    }

    /// Bins at every grid time `≤ t`.
    pub fn prefix_through(&self, t: f64) -> Vec<i64> {
        let k = self.grid.times.partition_point(|&s| s <= t).saturating_sub(1);
        self.prefix(k)
    }

    /// The level-`n-1` discretization, obtained without revisiting the path.
    /// Only defined for purely dyadic grids.
    pub fn coarsen(&self) -> Result<DiscretizedPath> {
        let level = self.grid.level;
        if level <= 1 {
            return Err(domain("cannot coarsen below level 1"));
        }
        let grid = DiscretizationGrid::dyadic(level - 1, self.grid.horizon)?;
        if grid.times.len() * 2 - 1 != self.grid.times.len() {
            return Err(domain("coarsening requires a purely dyadic grid"));
        }
        let bins = self
            .bins
            .iter()
            .step_by(2)
            .map(|row| row.iter().map(|b| b.div_euclid(2)).collect())
            .collect();
        Ok(DiscretizedPath { grid, bins })
    }
}

/// Reads a long-format paths CSV: `subject_id,time,<coord>...`. Subjects are
/// returned in order of first appearance.
pub fn read_paths_csv<R: Read>(reader: R, horizon: f64) -> Result<(Vec<String>, Vec<(u64, SamplePath)>)> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.len() < 3 || &headers[0] != "subject_id" || &headers[1] != "time" {
        return Err(config("paths CSV must start with columns subject_id,time and have >= 1 coordinate"));
    }
    let names: Vec<String> = headers.iter().skip(2).map(str::to_string).collect();
    let mut order: Vec<u64> = Vec::new();
    let mut rows: HashMap<u64, Vec<(f64, Vec<f64>)>> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let parse = |i: usize| -> Result<f64> {
            rec[i]
                .trim()
                .parse::<f64>()
                .map_err(|e| config(format!("bad number {:?}: {e}", &rec[i])))
        };
        let id: u64 = rec[0]
            .trim()
            .parse()
            .map_err(|e| config(format!("bad subject_id {:?}: {e}", &rec[0])))?;
        let t = parse(1)?;
        let v = (2..rec.len()).map(parse).collect::<Result<Vec<_>>>()?;
        rows.entry(id)
            .or_insert_with(|| {
                order.push(id);
                Vec::new()
            })
            .push((t, v));
    }
    let mut out = Vec::with_capacity(order.len());
    for id in order {
        let mut recs = rows.remove(&id).unwrap();
        if recs[0].0 != 0.0 {
            return Err(config(format!("subject {id}: first row must be at time 0")));
        }
        let (_, init) = recs.remove(0);
        out.push((id, SamplePath::new(horizon, init, recs)?));
    }
    Ok((names, out))
}

pub fn write_paths_csv<W: Write>(writer: W, names: &[String], paths: &[(u64, &SamplePath)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["subject_id".to_string(), "time".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for (id, path) in paths {
        for (t, v) in path.records() {
            let mut rec = vec![id.to_string(), t.to_string()];
            rec.extend(v.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}
