//! `map.cgm`: a JSON header followed by one binary point block per object.
//!
//! Layout:
//!
//! ```text
//! b"CGMAP001"
//! u64 LE   header length in bytes
//! [u8]     header, UTF-8 JSON (MapHeader)
//! per object, in header order:
//!     point_count × (f32 LE x, y, z)
//!     point_count × u32 LE view id
//! ```
//!
//! Points are stored as f32; header boxes describe the stored points, so decoding and
//! re-encoding is the identity.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::association::MapState;
use crate::error::{Error, Result};
use crate::geometry::{Aabb, FeatureVector, FrameId, ObjectId, PointCloud};
use crate::model::ObjectNode;

pub const MAGIC: &[u8; 8] = b"CGMAP001";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectMeta {
    pub object_id: ObjectId,
    pub point_count: usize,
    pub feature: FeatureVector,
    pub num_detections: u32,
    pub bbox: Aabb,
    pub view_contributions: BTreeMap<FrameId, u64>,
    pub view_crops: BTreeMap<FrameId, String>,
    pub caption: Option<String>,
    pub object_tag: Option<String>,
    pub is_background: bool,
    pub background_class: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapHeader {
    pub config_digest: String,
    pub object_count: usize,
    pub point_count: usize,
    pub next_object_id: ObjectId,
    pub objects: Vec<ObjectMeta>,
}

/// A map as stored on disk.
#[derive(Debug)]
pub struct MapFile {
    pub config_digest: String,
    pub map: MapState,
}

fn stored(p: &Point3<f64>) -> Point3<f64> {
    p.map(|c| c as f32 as f64)
}

/// Box of the points as they will read back.
fn stored_bbox(cloud: &PointCloud) -> Aabb {
    let mut min = Point3::from(nalgebra::Vector3::repeat(f64::INFINITY));
    let mut max = Point3::from(nalgebra::Vector3::repeat(f64::NEG_INFINITY));
    for p in cloud.points() {
        let q = stored(p);
        min = min.inf(&q);
        max = max.sup(&q);
    }
    Aabb { min, max }
}

fn meta(o: &ObjectNode) -> ObjectMeta {
    ObjectMeta {
        object_id: o.object_id,
        point_count: o.cloud.len(),
        feature: o.feature.clone(),
        num_detections: o.num_detections,
        bbox: stored_bbox(&o.cloud),
        view_contributions: o.view_contributions.clone(),
        view_crops: o.view_crops.clone(),
        caption: o.caption.clone(),
        object_tag: o.object_tag.clone(),
        is_background: o.is_background,
        background_class: o.background_class.clone(),
    }
}

pub fn encode(map: &MapState, config_digest: &str) -> Vec<u8> {
    let objects: Vec<ObjectMeta> = map.objects().map(meta).collect();
    let header = MapHeader {
        config_digest: config_digest.to_string(),
        object_count: objects.len(),
        point_count: objects.iter().map(|o| o.point_count).sum(),
        next_object_id: map.next_id(),
        objects,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + header.point_count * 16);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for o in map.objects() {
        for p in o.cloud.points() {
            for c in [p.x, p.y, p.z] {
                out.extend_from_slice(&(c as f32).to_le_bytes());
            }
        }
        for v in o.cloud.views() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_map(path: &Path, map: &MapState, config_digest: &str) -> Result<()> {
    let bytes = encode(map, config_digest);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| Error::parse(self.path, None, format!("truncated map file at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn word(&mut self) -> Result<[u8; 4]> {
        Ok(self.take(4)?.try_into().unwrap())
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<MapFile> {
    let mut cur = Cursor {
        buf: bytes,
        pos: 0,
        path,
    };
    if cur.take(8)? != MAGIC {
        return Err(Error::parse(path, None, "not a map file (bad magic)"));
    }
    let len = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
    let len = usize::try_from(len).map_err(|_| Error::parse(path, None, "header length overflows"))?;
    let header: MapHeader =
        serde_json::from_slice(cur.take(len)?).map_err(|e| Error::parse(path, None, format!("map header: {e}")))?;
    if header.object_count != header.objects.len() {
        return Err(Error::parse(path, None, "object count does not match header"));
    }
    let mut nodes = Vec::with_capacity(header.objects.len());
    for m in header.objects {
        let mut points = Vec::with_capacity(m.point_count);
        for _ in 0..m.point_count {
            let x = f32::from_le_bytes(cur.word()?);
            let y = f32::from_le_bytes(cur.word()?);
            let z = f32::from_le_bytes(cur.word()?);
            points.push(Point3::new(x as f64, y as f64, z as f64));
        }
        let mut views = Vec::with_capacity(m.point_count);
        for _ in 0..m.point_count {
            views.push(u32::from_le_bytes(cur.word()?));
        }
        let cloud = PointCloud::from_parts(points, views)?;
        let bbox = cloud.bbox()?;
        nodes.push(ObjectNode {
            object_id: m.object_id,
            cloud,
            feature: m.feature,
            num_detections: m.num_detections,
            bbox,
            view_contributions: m.view_contributions,
            view_crops: m.view_crops,
            caption: m.caption,
            object_tag: m.object_tag,
            is_background: m.is_background,
            background_class: m.background_class,
        });
    }
    if cur.pos != bytes.len() {
        return Err(Error::parse(path, None, "trailing bytes after point blocks"));
    }
    Ok(MapFile {
        config_digest: header.config_digest,
        map: MapState::from_objects(nodes, header.next_object_id)?,
    })
}

pub fn read_map(path: &Path) -> Result<MapFile> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Detection;

    fn sample() -> MapState {
        let mut map = MapState::with_base_id(10);
        for (i, x) in [0.0, 1.5].into_iter().enumerate() {
            let pts: Vec<_> = (0..30)
                .map(|k| Point3::new(x + k as f64 * 0.01, 0.25, 0.5 + i as f64))
                .collect();
            let det = Detection {
                frame_id: i as u32,
                mask: Default::default(),
                feature: FeatureVector::new(vec![1.0, i as f64]).renormalized().unwrap(),
                cloud: PointCloud::from_points(pts, i as u32).unwrap(),
                class_hint: None,
                crop_ref: Some(format!("mock:cup#{i}")),
            };
            map.init_object(&det, &Default::default()).unwrap();
        }
        map
    }

    #[test]
    fn roundtrip_is_byte_stable() {
        let map = sample();
        let bytes = encode(&map, "abc");
        let back = decode(&bytes, Path::new("m.cgm")).unwrap();
        assert_eq!(back.config_digest, "abc");
        assert_eq!(back.map.next_id(), map.next_id());
        assert_eq!(encode(&back.map, "abc"), bytes);
        for (a, b) in map.objects().zip(back.map.objects()) {
            assert_eq!(a.object_id, b.object_id);
            assert_eq!(a.cloud.views(), b.cloud.views());
            assert_eq!(a.view_crops, b.view_crops);
            for (p, q) in a.cloud.points().iter().zip(b.cloud.points()) {
                assert!((p - q).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn header_is_inspectable() {
        let bytes = encode(&sample(), "d");
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
        assert_eq!(header["object_count"], 2);
        let n: usize = sample().objects().map(|o| o.cloud.len()).sum();
        assert_eq!(header["point_count"], n);
        assert_eq!(bytes.len(), 16 + len + n * 16);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = encode(&sample(), "d");
        let p = Path::new("m.cgm");
        assert!(decode(&bytes[..bytes.len() - 1], p).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra, p).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(decode(&bad, p).is_err());
    }
}
