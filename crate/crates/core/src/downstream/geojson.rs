use serde_json::{json, Value};

use super::{encode_records, ts::ts_scores, TsInstance};
use crate::data::{RoadNetwork, RoadTrajectory};
use crate::encoder::TigrModel;
use crate::error::{Result, TigrError};
use crate::numerics::Real;
use crate::spatiotemporal::TrafficFeatures;

/// Concatenated segment polylines of a route, with repeated junction
/// points removed.
pub fn road_linestring(road: &RoadTrajectory, net: &RoadNetwork) -> Result<Vec<[f64; 2]>> {
    let mut line: Vec<[f64; 2]> = Vec::new();
    for tok in &road.tokens {
        let seg = net.segments.get(tok.segment).ok_or(TigrError::Index {
            what: "road segment",
            index: tok.segment,
            size: net.len(),
        })?;
        for &(x, y) in &seg.geometry {
            if line.last() != Some(&[x, y]) {
                line.push([x, y]);
            }
        }
    }
    if line.len() == 1 {
        line.push(line[0]);
    }
    Ok(line)
}

fn feature(road: &RoadTrajectory, net: &RoadNetwork, props: Value) -> Result<Value> {
    Ok(json!({
        "type": "Feature",
        "geometry": { "type": "LineString", "coordinates": road_linestring(road, net)? },
        "properties": props,
    }))
}

/// GeoJSON FeatureCollection holding the query's road geometry and its
/// `k` most similar database entries.
pub fn export_similar_geojson<T: Real>(
    query_id: &str,
    k: usize,
    instance: &TsInstance,
    model: &TigrModel<T>,
    feats: Option<&TrafficFeatures>,
    net: &RoadNetwork,
) -> Result<Value> {
    let q = encode_records(model, &instance.queries.iter().collect::<Vec<_>>(), feats)?;
    let db = encode_records(model, &instance.database.iter().collect::<Vec<_>>(), feats)?;
    similar_geojson(query_id, k, instance, &q, &db, net)
}

/// [`export_similar_geojson`] with precomputed query and database
/// embeddings.
pub fn similar_geojson(
    query_id: &str,
    k: usize,
    instance: &TsInstance,
    queries: &[Vec<f32>],
    database: &[Vec<f32>],
    net: &RoadNetwork,
) -> Result<Value> {
    let qi = instance
        .queries
        .iter()
        .position(|q| q.id == query_id)
        .ok_or_else(|| TigrError::Data(format!("query id {query_id:?} is not in the similarity instance")))?;
    let mut order: Vec<(usize, f64)> = ts_scores(&queries[qi], database).into_iter().enumerate().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    let query = &instance.queries[qi];
    let mut features = vec![feature(&query.road, net, json!({ "id": query.id, "role": "query" }))?];
    for (rank, &(j, score)) in order.iter().take(k).enumerate() {
        let d = &instance.database[j];
        features.push(feature(
            &d.road,
            net,
            json!({
                "id": d.id,
                "role": "match",
                "rank": rank + 1,
                "score": score,
                "is_truth": instance.truth[qi] == j,
            }),
        )?);
    }
    Ok(json!({ "type": "FeatureCollection", "features": features }))
}
