//! Surveillance panels, spatial structure and their file formats.
//!
//! A panel holds incidence counts `y[i][t]` for areas `i` and times
//! `t = 1..=T`, populations (constant per area or per time), and optional
//! births with a maternal-immunity lag. Spatial structure holds pairwise
//! distances and/or an adjacency graph, from which the graph order (number of
//! borders crossed) is derived.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Populations {
    Constant(Vec<u64>),
    PerTime(Vec<Vec<u64>>),
}

/// Areal count time series with populations and optional births.
///
/// Counts are stored area-major; time is 1-based in every accessor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveillancePanel {
    areas: Vec<String>,
    period: u32,
    counts: Vec<Vec<u64>>,
    populations: Populations,
    births: Option<Vec<Vec<u64>>>,
    maternal_lag: Option<usize>,
}

impl SurveillancePanel {
    pub fn new(
        areas: Vec<String>,
        period: u32,
        counts: Vec<Vec<u64>>,
        populations: Populations,
    ) -> Result<Self> {
        if areas.is_empty() {
            return Err(Error::Shape("panel has no areas".into()));
        }
        if areas.len() != counts.len() {
            return Err(Error::Shape(format!(
                "{} area labels but {} count rows",
                areas.len(),
                counts.len()
            )));
        }
        let mut seen = HashSet::new();
        for a in &areas {
            if !seen.insert(a.as_str()) {
                return Err(Error::Shape(format!("area {a} listed twice")));
            }
        }
        if period == 0 {
            return Err(Error::InvalidParameter("period per year must be >= 1".into()));
        }
        let t_len = counts[0].len();
        if t_len == 0 {
            return Err(Error::Shape("panel has no time points".into()));
        }
        for (a, row) in areas.iter().zip(&counts) {
            if row.len() != t_len {
                return Err(Error::Ragged {
                    area: a.clone(),
                    found: row.len(),
                    expected: t_len,
                });
            }
        }
        match &populations {
            Populations::Constant(p) => {
                if p.len() != areas.len() {
                    return Err(Error::Shape("population vector length differs from area count".into()));
                }
                if let Some(i) = p.iter().position(|&v| v == 0) {
                    return Err(Error::InvalidParameter(format!(
                        "population of area {} must be >= 1",
                        areas[i]
                    )));
                }
            }
            Populations::PerTime(p) => {
                if p.len() != areas.len() {
                    return Err(Error::Shape("population matrix rows differ from area count".into()));
                }
                for (a, row) in areas.iter().zip(p) {
                    if row.len() != t_len {
                        return Err(Error::Ragged {
                            area: a.clone(),
                            found: row.len(),
                            expected: t_len,
                        });
                    }
                    if let Some(t) = row.iter().position(|&v| v == 0) {
                        return Err(Error::InvalidParameter(format!(
                            "population of area {a} at time {} must be >= 1",
                            t + 1
                        )));
                    }
                }
            }
        }
        Ok(Self {
            areas,
            period,
            counts,
            populations,
            births: None,
            maternal_lag: None,
        })
    }

    /// Attaches births (same shape as counts) and the maternal-immunity lag `d`.
    pub fn with_births(mut self, births: Vec<Vec<u64>>, maternal_lag: usize) -> Result<Self> {
        if births.len() != self.areas.len() {
            return Err(Error::Shape("births rows differ from area count".into()));
        }
        for (a, row) in self.areas.iter().zip(&births) {
            if row.len() != self.n_times() {
                return Err(Error::Ragged {
                    area: a.clone(),
                    found: row.len(),
                    expected: self.n_times(),
                });
            }
        }
        self.births = Some(births);
        self.maternal_lag = Some(maternal_lag);
        Ok(self)
    }

    /// Same panel with the counts replaced.
    pub fn with_counts(&self, counts: Vec<Vec<u64>>) -> Result<Self> {
        let mut out = SurveillancePanel::new(
            self.areas.clone(),
            self.period,
            counts,
            self.populations.clone(),
        )?;
        if out.n_times() != self.n_times() {
            return Err(Error::Shape("replacement counts change the number of time points".into()));
        }
        out.births = self.births.clone();
        out.maternal_lag = self.maternal_lag;
        Ok(out)
    }

    pub fn with_period(mut self, period: u32) -> Result<Self> {
        if period == 0 {
            return Err(Error::InvalidParameter("period per year must be >= 1".into()));
        }
        self.period = period;
        Ok(self)
    }

    pub fn areas(&self) -> &[String] {
        &self.areas
    }

    pub fn n_areas(&self) -> usize {
        self.areas.len()
    }

    pub fn n_times(&self) -> usize {
        self.counts[0].len()
    }

    pub fn period(&self) -> u32 {
        self.period
    }

    /// Count for area `i` at 1-based time `t`.
    pub fn count(&self, i: usize, t: usize) -> u64 {
        self.counts[i][t - 1]
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn population(&self, i: usize, t: usize) -> u64 {
        match &self.populations {
            Populations::Constant(p) => p[i],
            Populations::PerTime(p) => p[i][t.clamp(1, self.n_times()) - 1],
        }
    }

    pub fn populations(&self) -> &Populations {
        &self.populations
    }

    pub fn births(&self) -> Option<&[Vec<u64>]> {
        self.births.as_deref()
    }

    pub fn maternal_lag(&self) -> Option<usize> {
        self.maternal_lag
    }

    /// Total count of each area over all times.
    pub fn area_totals(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn area_index(&self, area: &str) -> Option<usize> {
        self.areas.iter().position(|a| a == area)
    }
}

#[derive(Debug, Deserialize)]
struct CountRow {
    area: String,
    time: i64,
    count: i64,
}

#[derive(Debug, Deserialize)]
struct BirthRow {
    area: String,
    time: i64,
    births: i64,
}

#[derive(Debug, Deserialize)]
struct PopulationRow {
    area: String,
    #[serde(default)]
    time: Option<i64>,
    population: i64,
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Csv {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    rdr.deserialize().map(|r| r.map_err(|e| csv_err(path, e))).collect()
}

/// Long-format `(area, time, value)` rows gathered into an area-major matrix.
struct Grid {
    areas: Vec<String>,
    times: Vec<i64>,
    values: Vec<Vec<u64>>,
}

fn to_grid(
    rows: impl IntoIterator<Item = (String, i64, i64)>,
    what: &'static str,
) -> Result<Grid> {
    let mut areas: Vec<String> = Vec::new();
    let mut area_ix: HashMap<String, usize> = HashMap::new();
    let mut cells: Vec<BTreeMap<i64, u64>> = Vec::new();
    for (area, time, value) in rows {
        if value < 0 {
            return Err(Error::Negative {
                what,
                area,
                time,
                value,
            });
        }
        let ix = *area_ix.entry(area.clone()).or_insert_with(|| {
            areas.push(area.clone());
            cells.push(BTreeMap::new());
            areas.len() - 1
        });
        if cells[ix].insert(time, value as u64).is_some() {
            return Err(Error::Duplicate { area, time });
        }
    }
    if areas.is_empty() {
        return Err(Error::Shape(format!("no {what} rows")));
    }
    let times: Vec<i64> = cells
        .iter()
        .flat_map(|c| c.keys().copied())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut values = Vec::with_capacity(areas.len());
    for (a, c) in areas.iter().zip(&cells) {
        if c.len() != times.len() {
            return Err(Error::Ragged {
                area: a.clone(),
                found: c.len(),
                expected: times.len(),
            });
        }
        values.push(c.values().copied().collect());
    }
    Ok(Grid {
        areas,
        times,
        values,
    })
}

/// Reads counts (`area,time,count`) and populations (`area,population` or
/// `area,time,population`). Areas keep their order of first appearance in
/// the counts file; times are re-based to `1..=T` in increasing order.
pub fn load_panel(counts_path: &Path, populations_path: &Path, period: u32) -> Result<SurveillancePanel> {
    let rows: Vec<CountRow> = read_rows(counts_path)?;
    let grid = to_grid(rows.into_iter().map(|r| (r.area, r.time, r.count)), "count")?;
    let pops: Vec<PopulationRow> = read_rows(populations_path)?;
    let populations = populations_for(&grid, pops, populations_path)?;
    SurveillancePanel::new(grid.areas, period, grid.values, populations)
}

/// Reads counts only, with every population set to one. For analyses that
/// never touch populations, such as reporting-factor estimation.
pub fn load_counts(counts_path: &Path, period: u32) -> Result<SurveillancePanel> {
    let rows: Vec<CountRow> = read_rows(counts_path)?;
    let grid = to_grid(rows.into_iter().map(|r| (r.area, r.time, r.count)), "count")?;
    let n = grid.areas.len();
    SurveillancePanel::new(grid.areas, period, grid.values, Populations::Constant(vec![1; n]))
}

fn populations_for(grid: &Grid, rows: Vec<PopulationRow>, path: &Path) -> Result<Populations> {
    let source_name = path.display().to_string();
    let area_ix: HashMap<&str, usize> = grid
        .areas
        .iter()
        .enumerate()
        .map(|(i, a)| (a.as_str(), i))
        .collect();
    for r in &rows {
        if !area_ix.contains_key(r.area.as_str()) {
            return Err(Error::UnknownArea {
                area: r.area.clone(),
                source_name,
            });
        }
    }
    let per_time = rows.iter().any(|r| r.time.is_some());
    if per_time {
        if let Some(r) = rows.iter().find(|r| r.time.is_none()) {
            return Err(Error::Shape(format!(
                "population row for area {} lacks a time although others have one",
                r.area
            )));
        }
        let sub = to_grid(
            rows.into_iter()
                .map(|r| (r.area, r.time.unwrap_or_default(), r.population)),
            "population",
        )?;
        if sub.times != grid.times {
            return Err(Error::Shape("population times do not match count times".into()));
        }
        let mut out = vec![Vec::new(); grid.areas.len()];
        for (a, row) in sub.areas.iter().zip(sub.values) {
            out[area_ix[a.as_str()]] = row;
        }
        for (i, row) in out.iter().enumerate() {
            if row.is_empty() {
                return Err(Error::MissingArea {
                    area: grid.areas[i].clone(),
                    what: "population",
                });
            }
        }
        Ok(Populations::PerTime(out))
    } else {
        let mut out: Vec<Option<u64>> = vec![None; grid.areas.len()];
        for r in rows {
            if r.population < 0 {
                return Err(Error::Negative {
                    what: "population",
                    area: r.area,
                    time: 0,
                    value: r.population,
                });
            }
            let ix = area_ix[r.area.as_str()];
            if out[ix].replace(r.population as u64).is_some() {
                return Err(Error::Duplicate { area: r.area, time: 0 });
            }
        }
        out.into_iter()
            .enumerate()
            .map(|(i, p)| {
                p.ok_or_else(|| Error::MissingArea {
                    area: grid.areas[i].clone(),
                    what: "population",
                })
            })
            .collect::<Result<Vec<_>>>()
            .map(Populations::Constant)
    }
}

/// Reads a births file (`area,time,births`) matching the panel's areas and
/// time axis, and attaches it together with the maternal lag.
pub fn load_births(panel: SurveillancePanel, births_path: &Path, maternal_lag: usize) -> Result<SurveillancePanel> {
    let rows: Vec<BirthRow> = read_rows(births_path)?;
    let grid = to_grid(rows.into_iter().map(|r| (r.area, r.time, r.births)), "births")?;
    if grid.times.len() != panel.n_times() {
        return Err(Error::Shape(format!(
            "births cover {} time points, counts cover {}",
            grid.times.len(),
            panel.n_times()
        )));
    }
    let mut out = vec![Vec::new(); panel.n_areas()];
    for (a, row) in grid.areas.iter().zip(grid.values) {
        let ix = panel.area_index(a).ok_or_else(|| Error::UnknownArea {
            area: a.clone(),
            source_name: births_path.display().to_string(),
        })?;
        out[ix] = row;
    }
    if let Some(i) = out.iter().position(|r| r.is_empty()) {
        return Err(Error::MissingArea {
            area: panel.areas()[i].clone(),
            what: "births",
        });
    }
    panel.with_births(out, maternal_lag)
}

fn write_csv<F>(path: &Path, header: &[&str], mut rows: F) -> Result<()>
where
    F: FnMut(&mut csv::Writer<Vec<u8>>) -> std::result::Result<(), csv::Error>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    rows(&mut w).map_err(|e| csv_err(path, e))?;
    let bytes = w.into_inner().map_err(|e| Error::Csv {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    crate::io::write_atomic(path, &bytes)
}

impl SurveillancePanel {
    pub fn write_counts_csv(&self, path: &Path) -> Result<()> {
        write_csv(path, &["area", "time", "count"], |w| {
            for (a, row) in self.areas.iter().zip(&self.counts) {
                for (t, c) in row.iter().enumerate() {
                    w.write_record([a.clone(), (t + 1).to_string(), c.to_string()])?;
                }
            }
            Ok(())
        })
    }

    pub fn write_populations_csv(&self, path: &Path) -> Result<()> {
        match &self.populations {
            Populations::Constant(p) => write_csv(path, &["area", "population"], |w| {
                for (a, n) in self.areas.iter().zip(p) {
                    w.write_record([a.clone(), n.to_string()])?;
                }
                Ok(())
            }),
            Populations::PerTime(p) => write_csv(path, &["area", "time", "population"], |w| {
                for (a, row) in self.areas.iter().zip(p) {
                    for (t, n) in row.iter().enumerate() {
                        w.write_record([a.clone(), (t + 1).to_string(), n.to_string()])?;
                    }
                }
                Ok(())
            }),
        }
    }

    pub fn write_births_csv(&self, path: &Path) -> Result<()> {
        let births = self
            .births
            .as_ref()
            .ok_or_else(|| Error::MissingData("panel has no births".into()))?;
        write_csv(path, &["area", "time", "births"], |w| {
            for (a, row) in self.areas.iter().zip(births) {
                for (t, b) in row.iter().enumerate() {
                    w.write_record([a.clone(), (t + 1).to_string(), b.to_string()])?;
                }
            }
            Ok(())
        })
    }
}

/// All-pairs graph order; `None` marks pairs in different components.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphOrder {
    n: usize,
    order: Vec<Option<u32>>,
}

impl GraphOrder {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> Option<u32> {
        self.order[i * self.n + j]
    }

    pub fn is_connected(&self) -> bool {
        self.order.iter().all(Option::is_some)
    }

    pub fn rows(&self) -> impl Iterator<Item = &[Option<u32>]> {
        self.order.chunks(self.n)
    }
}

/// Shortest-path lengths with unit edge weights, one BFS per source.
pub fn graph_order(adjacency: &[Vec<bool>]) -> Result<GraphOrder> {
    let n = adjacency.len();
    for (i, row) in adjacency.iter().enumerate() {
        if row.len() != n {
            return Err(Error::Spatial(format!("adjacency row {i} has length {}, expected {n}", row.len())));
        }
        if row[i] {
            return Err(Error::Spatial(format!("adjacency diagonal entry {i} is true")));
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if adjacency[i][j] != adjacency[j][i] {
                return Err(Error::Spatial(format!("adjacency is asymmetric at ({i}, {j})")));
            }
        }
    }
    let neighbours: Vec<Vec<usize>> = adjacency
        .iter()
        .map(|row| row.iter().enumerate().filter(|(_, &a)| a).map(|(j, _)| j).collect())
        .collect();
    let mut order = vec![None; n * n];
    let mut queue = VecDeque::new();
    for src in 0..n {
        let row = &mut order[src * n..(src + 1) * n];
        row[src] = Some(0);
        queue.push_back(src);
        while let Some(u) = queue.pop_front() {
            let du = row[u].unwrap_or_default();
            for &v in &neighbours[u] {
                if row[v].is_none() {
                    row[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
    }
    Ok(GraphOrder { n, order })
}

/// Pairwise distances and adjacency between areas.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialStructure {
    areas: Vec<String>,
    distances: Option<Vec<Vec<f64>>>,
    adjacency: Option<Vec<Vec<bool>>>,
    graph_order: Option<GraphOrder>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum AdjacencyCell {
    Flag(bool),
    Int(u8),
}

#[derive(Debug, Serialize, Deserialize)]
struct SpatialFile {
    areas: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    distances: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    adjacency: Option<Vec<Vec<AdjacencyCell>>>,
}

impl SpatialStructure {
    pub fn new(
        areas: Vec<String>,
        distances: Option<Vec<Vec<f64>>>,
        adjacency: Option<Vec<Vec<bool>>>,
    ) -> Result<Self> {
        let n = areas.len();
        if distances.is_none() && adjacency.is_none() {
            return Err(Error::Spatial("need distances, adjacency, or both".into()));
        }
        if let Some(d) = &distances {
            if d.len() != n || d.iter().any(|r| r.len() != n) {
                return Err(Error::Spatial(format!("distance matrix must be {n}x{n}")));
            }
            for i in 0..n {
                if d[i][i] != 0.0 {
                    return Err(Error::Spatial(format!("distance diagonal entry {i} is not zero")));
                }
                for j in 0..n {
                    if !(d[i][j] >= 0.0) || !d[i][j].is_finite() {
                        return Err(Error::Spatial(format!("distance ({i}, {j}) must be finite and >= 0")));
                    }
                    if d[i][j] != d[j][i] {
                        return Err(Error::Spatial(format!("distance matrix asymmetric at ({i}, {j})")));
                    }
                }
            }
        }
        let graph_order = match &adjacency {
            Some(a) => {
                if a.len() != n {
                    return Err(Error::Spatial(format!("adjacency must be {n}x{n}")));
                }
                Some(graph_order(a)?)
            }
            None => None,
        };
        Ok(Self {
            areas,
            distances,
            adjacency,
            graph_order,
        })
    }

    pub fn areas(&self) -> &[String] {
        &self.areas
    }

    pub fn n(&self) -> usize {
        self.areas.len()
    }

    pub fn distances(&self) -> Option<&[Vec<f64>]> {
        self.distances.as_deref()
    }

    pub fn adjacency(&self) -> Option<&[Vec<bool>]> {
        self.adjacency.as_deref()
    }

    pub fn graph_order(&self) -> Option<&GraphOrder> {
        self.graph_order.as_ref()
    }

    /// Re-orders (and subsets) the structure to follow `areas`.
    pub fn aligned_to(&self, areas: &[String]) -> Result<Self> {
        let ix: Vec<usize> = areas
            .iter()
            .map(|a| {
                self.areas.iter().position(|b| b == a).ok_or_else(|| {
                    Error::MissingArea {
                        area: a.clone(),
                        what: "spatial entry",
                    }
                })
            })
            .collect::<Result<_>>()?;
        let pick = |m: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            ix.iter().map(|&i| ix.iter().map(|&j| m[i][j]).collect()).collect()
        };
        let pick_b = |m: &Vec<Vec<bool>>| -> Vec<Vec<bool>> {
            ix.iter().map(|&i| ix.iter().map(|&j| m[i][j]).collect()).collect()
        };
        SpatialStructure::new(
            areas.to_vec(),
            self.distances.as_ref().map(pick),
            self.adjacency.as_ref().map(pick_b),
        )
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let f: SpatialFile = serde_json::from_str(s)?;
        let adjacency = f
            .adjacency
            .map(|rows| {
                rows.into_iter()
                    .map(|row| {
                        row.into_iter()
                            .map(|c| match c {
                                AdjacencyCell::Flag(b) => Ok(b),
                                AdjacencyCell::Int(0) => Ok(false),
                                AdjacencyCell::Int(1) => Ok(true),
                                AdjacencyCell::Int(v) => {
                                    Err(Error::Spatial(format!("adjacency entry {v} is not 0/1")))
                                }
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .transpose()?;
        SpatialStructure::new(f.areas, f.distances, adjacency)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::from_json_str(&s)
    }

    pub fn to_json_string(&self) -> Result<String> {
        let f = SpatialFile {
            areas: self.areas.clone(),
            distances: self.distances.clone(),
            adjacency: self.adjacency.as_ref().map(|a| {
                a.iter()
                    .map(|r| r.iter().map(|&b| AdjacencyCell::Flag(b)).collect())
                    .collect()
            }),
        };
        Ok(serde_json::to_string_pretty(&f)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        let mut f = std::fs::File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn zero_panel_loads() {
        let dir = tempfile::tempdir().unwrap();
        let c = write(
            &dir,
            "c.csv",
            "area,time,count\na,1,0\na,2,0\na,3,0\nb,1,0\nb,2,0\nb,3,0\n",
        );
        let p = write(&dir, "p.csv", "area,population\na,10\nb,20\n");
        let panel = load_panel(&c, &p, 52).unwrap();
        assert_eq!(panel.n_times(), 3);
        assert_eq!(panel.n_areas(), 2);
        assert_eq!(panel.population(1, 2), 20);
    }

    #[test]
    fn times_are_rebased() {
        let dir = tempfile::tempdir().unwrap();
        let c = write(&dir, "c.csv", "area,time,count\na,2002,5\na,2001,4\n");
        let p = write(&dir, "p.csv", "area,population\na,10\n");
        let panel = load_panel(&c, &p, 52).unwrap();
        assert_eq!(panel.count(0, 1), 4);
        assert_eq!(panel.count(0, 2), 5);
    }

    #[test]
    fn negative_count_names_cell() {
        let dir = tempfile::tempdir().unwrap();
        let c = write(&dir, "c.csv", "area,time,count\na,1,3\na,2,-1\n");
        let p = write(&dir, "p.csv", "area,population\na,10\n");
        let err = load_panel(&c, &p, 52).unwrap_err();
        match err {
            Error::Negative { area, time, value, .. } => {
                assert_eq!((area.as_str(), time, value), ("a", 2, -1));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn ragged_duplicate_and_unknown_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "p.csv", "area,population\na,10\nb,10\n");
        let ragged = write(&dir, "r.csv", "area,time,count\na,1,3\na,2,1\nb,1,0\n");
        assert!(matches!(load_panel(&ragged, &p, 52), Err(Error::Ragged { .. })));
        let dup = write(&dir, "d.csv", "area,time,count\na,1,3\na,1,1\nb,1,0\nb,2,0\n");
        assert!(matches!(load_panel(&dup, &p, 52), Err(Error::Duplicate { .. })));
        let ok = write(&dir, "o.csv", "area,time,count\na,1,3\n");
        assert!(matches!(load_panel(&ok, &p, 52), Err(Error::UnknownArea { .. })));
    }

    #[test]
    fn per_time_populations_and_births() {
        let dir = tempfile::tempdir().unwrap();
        let c = write(&dir, "c.csv", "area,time,count\na,1,3\na,2,1\n");
        let p = write(&dir, "p.csv", "area,time,population\na,1,10\na,2,12\n");
        let b = write(&dir, "b.csv", "area,time,births\na,1,2\na,2,2\n");
        let panel = load_panel(&c, &p, 26).unwrap();
        assert_eq!(panel.population(0, 2), 12);
        let panel = load_births(panel, &b, 1).unwrap();
        assert_eq!(panel.births().unwrap()[0], vec![2, 2]);
        assert_eq!(panel.maternal_lag(), Some(1));
    }

    #[test]
    fn path_graph_order() {
        let adj = vec![
            vec![false, true, false],
            vec![true, false, true],
            vec![false, true, false],
        ];
        let m = graph_order(&adj).unwrap();
        assert_eq!(m.get(0, 2), Some(2));
        assert_eq!(m.get(1, 1), Some(0));
    }

    #[test]
    fn complete_graph_order() {
        let adj: Vec<Vec<bool>> = (0..4).map(|i| (0..4).map(|j| i != j).collect()).collect();
        let m = graph_order(&adj).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.get(i, j), Some(u32::from(i != j)));
            }
        }
    }

    #[test]
    fn disconnected_components() {
        let adj = vec![
            vec![false, true, false, false],
            vec![true, false, false, false],
            vec![false, false, false, true],
            vec![false, false, true, false],
        ];
        let m = graph_order(&adj).unwrap();
        assert_eq!(m.get(0, 2), None);
        assert_eq!(m.get(2, 3), Some(1));
        assert!(!m.is_connected());
    }

    #[test]
    fn asymmetric_adjacency_rejected() {
        let adj = vec![vec![false, true], vec![false, false]];
        assert!(matches!(graph_order(&adj), Err(Error::Spatial(_))));
    }

    #[test]
    fn spatial_json_accepts_ints_and_aligns() {
        let s = r#"{"areas":["x","y","z"],"adjacency":[[0,1,0],[1,0,1],[0,1,0]]}"#;
        let sp = SpatialStructure::from_json_str(s).unwrap();
        assert_eq!(sp.graph_order().unwrap().get(0, 2), Some(2));
        let re = sp.aligned_to(&["z".into(), "x".into(), "y".into()]).unwrap();
        assert_eq!(re.graph_order().unwrap().get(0, 1), Some(2));
        assert_eq!(re.graph_order().unwrap().get(0, 2), Some(1));
        let back = SpatialStructure::from_json_str(&sp.to_json_string().unwrap()).unwrap();
        assert_eq!(back, sp);
    }

    fn random_adjacency() -> impl Strategy<Value = Vec<Vec<bool>>> {
        (1usize..=8).prop_flat_map(|n| {
            proptest::collection::vec(proptest::bool::weighted(0.35), n * n).prop_map(move |bits| {
                let mut a = vec![vec![false; n]; n];
                for i in 0..n {
                    for j in (i + 1)..n {
                        a[i][j] = bits[i * n + j];
                        a[j][i] = bits[i * n + j];
                    }
                }
                a
            })
        })
    }

    proptest! {
        #[test]
        fn graph_order_is_a_metric(adj in random_adjacency()) {
            let m = graph_order(&adj).unwrap();
            let n = adj.len();
            for i in 0..n {
                prop_assert_eq!(m.get(i, i), Some(0));
                for j in 0..n {
                    prop_assert_eq!(m.get(i, j) == Some(1), adj[i][j]);
                    prop_assert_eq!(m.get(i, j), m.get(j, i));
                    for k in 0..n {
                        if let (Some(ij), Some(jk), Some(ik)) = (m.get(i, j), m.get(j, k), m.get(i, k)) {
                            prop_assert!(ik <= ij + jk);
                        }
                    }
                }
            }
        }

        #[test]
        fn panel_round_trips(
            counts in proptest::collection::vec(proptest::collection::vec(0u64..500, 5), 1..5),
            per_time in any::<bool>(),
        ) {
            let n = counts.len();
            let areas: Vec<String> = (0..n).map(|i| format!("area{i}")).collect();
            let pops = if per_time {
                Populations::PerTime((0..n).map(|i| (0..5).map(|t| 100 + (i * 7 + t) as u64).collect()).collect())
            } else {
                Populations::Constant((0..n).map(|i| 1000 + i as u64).collect())
            };
            let panel = SurveillancePanel::new(areas, 52, counts, pops).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let c = dir.path().join("c.csv");
            let p = dir.path().join("p.csv");
            panel.write_counts_csv(&c).unwrap();
            panel.write_populations_csv(&p).unwrap();
            let back = load_panel(&c, &p, 52).unwrap();
            prop_assert_eq!(back, panel);
        }
    }
}
