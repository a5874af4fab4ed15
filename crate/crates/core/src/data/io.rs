//! CSV and TOML persistence for trajectories, road networks and grid specs.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{
    class_index, GridSpec, RawPoint, RawTrajectory, RoadNetwork, RoadToken, RoadTrajectory, Segment, ROAD_CLASSES,
};
use crate::error::{Result, TigrError};

pub const RAW_HEADER: [&str; 5] = ["traj_id", "point_idx", "lon", "lat", "timestamp"];
pub const MATCHED_HEADER: [&str; 4] = ["traj_id", "point_idx", "segment_id", "timestamp"];
pub const SEGMENTS_HEADER: [&str; 5] = ["segment_id", "length_m", "speed_kmh", "class", "wkt_polyline"];
pub const EDGES_HEADER: [&str; 2] = ["from_segment", "to_segment"];

fn reader(path: &Path, header: &[&str]) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| TigrError::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let got = rdr.headers()?.clone();
    if got.iter().map(str::trim).ne(header.iter().copied()) {
        return Err(TigrError::Parse {
            path: path.display().to_string(),
            line: 1,
            reason: format!("expected header {}, found {}", header.join(","), got.iter().collect::<Vec<_>>().join(",")),
        });
    }
    Ok(rdr)
}

struct Row<'a> {
    path: &'a Path,
    line: usize,
    rec: csv::StringRecord,
}

impl Row<'_> {
    fn err(&self, reason: impl Into<String>) -> TigrError {
        TigrError::Parse {
            path: self.path.display().to_string(),
            line: self.line,
            reason: reason.into(),
        }
    }

    fn str(&self, i: usize, name: &str) -> Result<&str> {
        self.rec
            .get(i)
            .map(str::trim)
            .ok_or_else(|| self.err(format!("missing field {name}")))
    }

    fn parse<F: std::str::FromStr>(&self, i: usize, name: &str) -> Result<F> {
        let s = self.str(i, name)?;
        s.parse().map_err(|_| self.err(format!("field {name}: cannot parse {s:?}")))
    }
}

fn rows<'a>(path: &'a Path, header: &[&str]) -> Result<Vec<Row<'a>>> {
    let mut rdr = reader(path, header)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        out.push(Row { path, line, rec });
    }
    Ok(out)
}

/// Groups rows by id (ordered by first appearance) and sorts each group by
/// `point_idx`; duplicated `(id, point_idx)` pairs are rejected.
fn group<P>(path: &Path, items: Vec<(String, u64, usize, P)>) -> Result<Vec<(String, Vec<P>)>> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, BTreeMap<u64, (usize, P)>> = HashMap::new();
    for (id, idx, line, p) in items {
        let g = groups.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            BTreeMap::new()
        });
        if let Some((first, _)) = g.get(&idx) {
            return Err(TigrError::Parse {
                path: path.display().to_string(),
                line,
                reason: format!("duplicate point ({id}, {idx}), first seen on line {first}"),
            });
        }
        g.insert(idx, (line, p));
    }
    Ok(order
        .into_iter()
        .map(|id| {
            let pts = groups.remove(&id).unwrap().into_values().map(|(_, p)| p).collect();
            (id, pts)
        })
        .collect())
}

pub fn load_raw_csv(path: &Path) -> Result<Vec<RawTrajectory>> {
    let mut items = Vec::new();
    for row in rows(path, &RAW_HEADER)? {
        let id = row.str(0, "traj_id")?.to_string();
        let idx: u64 = row.parse(1, "point_idx")?;
        let x: f64 = row.parse(2, "lon")?;
        let y: f64 = row.parse(3, "lat")?;
        let t: i64 = row.parse(4, "timestamp")?;
        if !(x.is_finite() && y.is_finite()) {
            return Err(row.err("non-finite coordinate"));
        }
        items.push((id, idx, row.line, RawPoint { x, y, t }));
    }
    group(path, items)?
        .into_iter()
        .map(|(id, pts)| RawTrajectory::new(id, pts))
        .collect()
}

pub fn write_raw_csv(path: &Path, trajs: &[RawTrajectory]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(RAW_HEADER)?;
    for t in trajs {
        for (i, p) in t.points.iter().enumerate() {
            w.write_record([
                t.id.clone(),
                i.to_string(),
                format!("{:.7}", p.x),
                format!("{:.7}", p.y),
                p.t.to_string(),
            ])?;
        }
    }
    flush(path, w)
}

/// Loads matched trajectories, resolving `segment_id` against the network's
/// external ids and checking adjacency.
pub fn load_matched_csv(path: &Path, net: &RoadNetwork) -> Result<Vec<RoadTrajectory>> {
    let index: HashMap<&str, usize> = net
        .segments
        .iter()
        .enumerate()
        .map(|(i, s)| (s.external_id.as_str(), i))
        .collect();
    let mut items = Vec::new();
    for row in rows(path, &MATCHED_HEADER)? {
        let id = row.str(0, "traj_id")?.to_string();
        let idx: u64 = row.parse(1, "point_idx")?;
        let seg = row.str(2, "segment_id")?;
        let segment = *index
            .get(seg)
            .ok_or_else(|| row.err(format!("unknown segment {seg:?}")))?;
        let t: i64 = row.parse(3, "timestamp")?;
        items.push((id, idx, row.line, RoadToken { segment, t }));
    }
    let trajs: Vec<RoadTrajectory> = group(path, items)?
        .into_iter()
        .map(|(id, tokens)| RoadTrajectory { id, tokens })
        .collect();
    for t in &trajs {
        net.validate(t)?;
    }
    Ok(trajs)
}

pub fn write_matched_csv(path: &Path, trajs: &[RoadTrajectory], net: &RoadNetwork) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(MATCHED_HEADER)?;
    for t in trajs {
        for (i, tok) in t.tokens.iter().enumerate() {
            w.write_record([
                t.id.as_str(),
                &i.to_string(),
                &net.segments[tok.segment].external_id,
                &tok.t.to_string(),
            ])?;
        }
    }
    flush(path, w)
}

/// Parses `LINESTRING (x y, x y, …)`.
pub fn parse_wkt_linestring(s: &str) -> Option<Vec<(f64, f64)>> {
    let s = s.trim();
    s.get(..10).filter(|p| p.eq_ignore_ascii_case("LINESTRING"))?;
    let body = s[10..].trim().strip_prefix('(')?.strip_suffix(')')?;
    let pts = body
        .split(',')
        .map(|pair| {
            let mut it = pair.split_whitespace();
            let x = it.next()?.parse::<f64>().ok()?;
            let y = it.next()?.parse::<f64>().ok()?;
            (it.next().is_none() && x.is_finite() && y.is_finite()).then_some((x, y))
        })
        .collect::<Option<Vec<_>>>()?;
    (pts.len() >= 2).then_some(pts)
}

pub fn format_wkt_linestring(pts: &[(f64, f64)]) -> String {
    let body: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.7} {y:.7}")).collect();
    format!("LINESTRING ({})", body.join(", "))
}

pub fn load_road_network(segments_path: &Path, edges_path: &Path) -> Result<RoadNetwork> {
    let mut segments = Vec::new();
    let mut index = HashMap::new();
    for row in rows(segments_path, &SEGMENTS_HEADER)? {
        let external_id = row.str(0, "segment_id")?.to_string();
        let length_m: f64 = row.parse(1, "length_m")?;
        let speed_kmh: f64 = row.parse(2, "speed_kmh")?;
        let class_str = row.str(3, "class")?;
        let class = class_index(class_str).unwrap_or_else(|| {
            log::warn!(
                "{}:{}: unknown road class {class_str:?}, using \"other\"",
                segments_path.display(),
                row.line
            );
            ROAD_CLASSES.len() - 1
        });
        let wkt = row.str(4, "wkt_polyline")?;
        let geometry = parse_wkt_linestring(wkt).ok_or_else(|| row.err(format!("invalid WKT {wkt:?}")))?;
        if index.insert(external_id.clone(), segments.len()).is_some() {
            return Err(row.err(format!("duplicate segment {external_id:?}")));
        }
        segments.push(Segment {
            external_id,
            length_m,
            speed_kmh,
            class,
            geometry,
        });
    }
    let mut edges = Vec::new();
    for row in rows(edges_path, &EDGES_HEADER)? {
        let a = row.str(0, "from_segment")?;
        let b = row.str(1, "to_segment")?;
        match (index.get(a), index.get(b)) {
            (Some(&i), Some(&j)) => edges.push((i, j)),
            _ => return Err(row.err(format!("edge {a}->{b} references a missing segment"))),
        }
    }
    RoadNetwork::new(segments, &edges)
}

pub fn write_road_network(segments_path: &Path, edges_path: &Path, net: &RoadNetwork) -> Result<()> {
    let mut w = writer(segments_path)?;
    w.write_record(SEGMENTS_HEADER)?;
    for s in &net.segments {
        w.write_record([
            s.external_id.clone(),
            format!("{}", s.length_m),
            format!("{}", s.speed_kmh),
            ROAD_CLASSES[s.class].to_string(),
            format_wkt_linestring(&s.geometry),
        ])?;
    }
    flush(segments_path, w)?;
    let mut w = writer(edges_path)?;
    w.write_record(EDGES_HEADER)?;
    for (a, b) in net.edges() {
        w.write_record([&net.segments[a].external_id, &net.segments[b].external_id])?;
    }
    flush(edges_path, w)
}

pub fn load_grid_spec(path: &Path) -> Result<GridSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| TigrError::io(path, e))?;
    let spec: GridSpec = toml::from_str(&text).map_err(|e| TigrError::Parse {
        path: path.display().to_string(),
        line: 0,
        reason: e.to_string(),
    })?;
    let check = GridSpec::new(spec.min_x, spec.min_y, spec.max_x, spec.max_y, spec.cell_size_m)?;
    if (check.rows, check.cols) != (spec.rows, spec.cols) {
        return Err(TigrError::config(
            "grid",
            format!(
                "stored counts {}x{} disagree with derived {}x{}",
                spec.rows, spec.cols, check.rows, check.cols
            ),
        ));
    }
    Ok(spec)
}

pub fn write_grid_spec(path: &Path, spec: &GridSpec) -> Result<()> {
    let text = toml::to_string(spec).map_err(|e| TigrError::Data(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| TigrError::io(path, e))
}

fn writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    let file = File::create(path).map_err(|e| TigrError::io(path, e))?;
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(BufWriter::new(file)))
}

fn flush(path: &Path, w: csv::Writer<BufWriter<File>>) -> Result<()> {
    let mut inner = w.into_inner().map_err(|e| TigrError::io(path, e.into_error()))?;
    inner.flush().map_err(|e| TigrError::io(path, e))
}
