//! PLY overlays for inspecting a run in an external viewer.

use std::fs;
use std::path::Path;

use tagmap::io::{save_map, PlyFormat, PointCloudMap};
use tagmap::planes::PlaneSegment;
use tagmap::pose_graph::FactorGraph;
use tagmap::pipeline::graph_tags;

/// Plane members, intensity cycling with the segment index.
pub fn dump_planes(dir: &Path, map: &PointCloudMap, planes: &[PlaneSegment]) -> tagmap::Result<()> {
    create(dir)?;
    let mut out = PointCloudMap::default();
    let mut intensities = Vec::new();
    for (k, p) in planes.iter().enumerate() {
        let shade = 0.2 + 0.8 * ((k * 7) % 11) as f64 / 10.0;
        for &i in &p.members {
            out.points.push(map.points[i as usize]);
            intensities.push(shade);
        }
    }
    out.intensities = Some(intensities);
    save_map(&dir.join("planes.ply"), &out, PlyFormat::BinaryLittleEndian)
}

/// Tag corners and centers, and camera positions.
pub fn dump_graph(dir: &Path, graph: &FactorGraph, tag_size: f64) -> tagmap::Result<()> {
    create(dir)?;
    let tags = graph_tags(graph, tag_size)?;
    let points = tags.iter().flat_map(|t| t.sample_points()).collect();
    save_map(&dir.join("tags.ply"), &PointCloudMap::new(points), PlyFormat::BinaryLittleEndian)?;
    let cameras = graph.cameras.iter().map(|c| *c.translation()).collect();
    save_map(&dir.join("cameras.ply"), &PointCloudMap::new(cameras), PlyFormat::BinaryLittleEndian)
}

fn create(dir: &Path) -> tagmap::Result<()> {
    fs::create_dir_all(dir).map_err(|e| tagmap::Error::Io {
        path: dir.into(),
        source: e,
    })
}
