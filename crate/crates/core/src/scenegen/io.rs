//! Scene-pair files. Layout (little-endian):
//!
//! ```text
//! "LFM3D-PAIR" u32:version u64:id u64:object_id u8:class f64:baseline_deg
//! f64×12: relative pose (row-major rotation, translation)
//! view A, view B
//! u32:#matches (u32 i, u32 j)*  u32:#unmatched_a u32*  u32:#unmatched_b u32*
//!
//! view := f64×4 fx fy cx cy, u32 width, u32 height, f64×9 rotation, f64×3 translation,
//!         u8 estimated, u32 #features, u32 descriptor_dim,
//!         f32×2N positions, f32×N confidences, f32×N·D descriptors,
//!         u32×N point ids (u32::MAX for distractors),
//!         map depth, map nocs, map inverse_depth
//! map  := u32 width, u32 height, u32 channels, u32×4 window, f32×C fill,
//!         f32×(w·h·C) values, u8×(w·h) validity
//! ```

use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::Serialize;

use super::labels::MatchLabels;
use super::object::ShapeFamily;
use super::pair::ScenePair;
use super::render::View;
use super::SceneError;
use crate::encoding::{DenseMap3D, LocalFeature, Window};
use crate::geometry::{Camera, Intrinsics, Pose};

pub const MAGIC: &[u8; 10] = b"LFM3D-PAIR";
pub const VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("count fits in u32"));
    }

    fn pose(&mut self, rotation: &Matrix3<f64>, translation: &Vector3<f64>) {
        for r in 0..3 {
            for c in 0..3 {
                self.f64(rotation[(r, c)]);
            }
        }
        translation.iter().for_each(|&t| self.f64(t));
    }

    fn map(&mut self, m: &DenseMap3D) {
        self.u32(m.width);
        self.u32(m.height);
        self.len(m.channels);
        for v in [m.window.x0, m.window.y0, m.window.width, m.window.height] {
            self.u32(v);
        }
        m.fill.iter().for_each(|&v| self.f32(v));
        m.data.iter().for_each(|&v| self.f32(v));
        self.buf.extend_from_slice(&m.valid);
    }

    fn view(&mut self, v: &View) {
        let k = &v.camera.intrinsics;
        for x in [k.fx, k.fy, k.cx, k.cy] {
            self.f64(x);
        }
        self.u32(k.width);
        self.u32(k.height);
        self.pose(&v.camera.rotation, &v.camera.translation);
        self.u8(v.estimated as u8);
        let d = v.features.first().map_or(0, |f| f.descriptor.len());
        self.len(v.features.len());
        self.len(d);
        for f in &v.features {
            self.f32(f.x as f32);
            self.f32(f.y as f32);
        }
        v.features.iter().for_each(|f| self.f32(f.confidence as f32));
        for f in &v.features {
            f.descriptor.iter().for_each(|&x| self.f32(x as f32));
        }
        v.point_ids.iter().for_each(|id| self.u32(id.unwrap_or(u32::MAX)));
        self.map(&v.depth);
        self.map(&v.nocs);
        self.map(&v.inverse_depth);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

fn format_err(msg: impl Into<String>) -> SceneError {
    SceneError::Format(msg.into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], SceneError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| format_err("truncated pair file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, SceneError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, SceneError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, SceneError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64, SceneError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, SceneError> {
        Ok(self.take(n.checked_mul(4).ok_or_else(|| format_err("size overflow"))?)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect())
    }
    fn indices(&mut self) -> Result<Vec<usize>, SceneError> {
        let n = self.u32()? as usize;
        (0..n).map(|_| self.u32().map(|v| v as usize)).collect()
    }

    fn pose(&mut self) -> Result<(Matrix3<f64>, Vector3<f64>), SceneError> {
        let mut r = Matrix3::zeros();
        for i in 0..3 {
            for j in 0..3 {
                r[(i, j)] = self.f64()?;
            }
        }
        Ok((r, Vector3::new(self.f64()?, self.f64()?, self.f64()?)))
    }

    fn map(&mut self) -> Result<DenseMap3D, SceneError> {
        let (width, height, channels) = (self.u32()?, self.u32()?, self.u32()? as usize);
        let window = Window { x0: self.u32()?, y0: self.u32()?, width: self.u32()?, height: self.u32()? };
        if window.x0 as u64 + window.width as u64 > width as u64 || window.y0 as u64 + window.height as u64 > height as u64 {
            return Err(format_err("map window exceeds the image"));
        }
        let fill = self.f32s(channels)?;
        let n = window.width as usize * window.height as usize;
        let data = self.f32s(n * channels)?;
        let valid = self.take(n)?.to_vec();
        Ok(DenseMap3D { width, height, channels, window, data, valid, fill })
    }

    fn view(&mut self) -> Result<View, SceneError> {
        let (fx, fy, cx, cy) = (self.f64()?, self.f64()?, self.f64()?, self.f64()?);
        let (w, h) = (self.u32()?, self.u32()?);
        let (rotation, translation) = self.pose()?;
        let camera = Camera::new(Intrinsics::new(fx, fy, cx, cy, w, h)?, rotation, translation)?;
        let estimated = self.u8()? != 0;
        let n = self.u32()? as usize;
        let d = self.u32()? as usize;
        let positions = self.f32s(2 * n)?;
        let confidences = self.f32s(n)?;
        let descriptors = self.f32s(n * d)?;
        let features = (0..n)
            .map(|i| LocalFeature {
                x: positions[2 * i] as f64,
                y: positions[2 * i + 1] as f64,
                confidence: confidences[i] as f64,
                descriptor: descriptors[i * d..(i + 1) * d].iter().map(|&v| v as f64).collect(),
                signal: Vec::new(),
            })
            .collect();
        let point_ids = (0..n).map(|_| self.u32().map(|v| (v != u32::MAX).then_some(v))).collect::<Result<_, _>>()?;
        let (depth, nocs, inverse_depth) = (self.map()?, self.map()?, self.map()?);
        Ok(View { camera, features, point_ids, depth, nocs, inverse_depth, estimated })
    }
}

pub fn pair_to_bytes(pair: &ScenePair) -> Vec<u8> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u64(pair.id);
    w.u64(pair.object_id);
    w.u8(pair.class.code());
    w.f64(pair.baseline_deg);
    w.pose(&pair.relative_pose.rotation, &pair.relative_pose.translation);
    w.view(&pair.view_a);
    w.view(&pair.view_b);
    w.len(pair.labels.matches.len());
    for &(i, j) in &pair.labels.matches {
        w.len(i);
        w.len(j);
    }
    for set in [&pair.labels.unmatched_a, &pair.labels.unmatched_b] {
        w.len(set.len());
        set.iter().for_each(|&i| w.len(i));
    }
    w.buf
}

pub fn pair_from_bytes(bytes: &[u8]) -> Result<ScenePair, SceneError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(format_err("not a scene-pair file"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format_err(format!("unsupported pair format version {version}")));
    }
    let id = r.u64()?;
    let object_id = r.u64()?;
    let class = ShapeFamily::from_code(r.u8()?).ok_or_else(|| format_err("unknown class code"))?;
    let baseline_deg = r.f64()?;
    let (rotation, translation) = r.pose()?;
    let view_a = r.view()?;
    let view_b = r.view()?;
    let n = r.u32()? as usize;
    let matches = (0..n).map(|_| Ok((r.u32()? as usize, r.u32()? as usize))).collect::<Result<Vec<_>, SceneError>>()?;
    let unmatched_a = r.indices()?;
    let unmatched_b = r.indices()?;
    if r.pos != bytes.len() {
        return Err(format_err("trailing bytes"));
    }
    let (na, nb) = (view_a.features.len(), view_b.features.len());
    if matches.iter().any(|&(i, j)| i >= na || j >= nb) || unmatched_a.iter().any(|&i| i >= na) || unmatched_b.iter().any(|&j| j >= nb) {
        return Err(format_err("label index out of range"));
    }
    Ok(ScenePair {
        id,
        object_id,
        class,
        view_a,
        view_b,
        labels: MatchLabels { matches, unmatched_a, unmatched_b },
        relative_pose: Pose { rotation, translation },
        baseline_deg,
    })
}

pub fn write_pair(path: &Path, pair: &ScenePair) -> Result<(), SceneError> {
    let mut f = std::fs::File::create(path).map_err(|e| SceneError::Io(format!("{}: {e}", path.display())))?;
    f.write_all(&pair_to_bytes(pair)).map_err(|e| SceneError::Io(format!("{}: {e}", path.display())))
}

pub fn read_pair(path: &Path) -> Result<ScenePair, SceneError> {
    let bytes = std::fs::read(path).map_err(|e| SceneError::Io(format!("{}: {e}", path.display())))?;
    pair_from_bytes(&bytes)
}

/// One manifest row per pair.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct ManifestRecord {
    pub file: String,
    pub pair_id: u64,
    pub object_id: u64,
    pub class: String,
    pub baseline_deg: f64,
    pub features_a: usize,
    pub features_b: usize,
    pub matches: usize,
    pub unmatched_a: usize,
    pub unmatched_b: usize,
}

pub fn pair_file_name(index: usize) -> String {
    format!("pair_{index:05}.lfm3d")
}

impl ManifestRecord {
    pub fn new(file: String, p: &ScenePair) -> Self {
        Self {
            file,
            pair_id: p.id,
            object_id: p.object_id,
            class: p.class.name().to_string(),
            baseline_deg: p.baseline_deg,
            features_a: p.view_a.features.len(),
            features_b: p.view_b.features.len(),
            matches: p.labels.matches.len(),
            unmatched_a: p.labels.unmatched_a.len(),
            unmatched_b: p.labels.unmatched_b.len(),
        }
    }
}

/// Writes every pair plus `manifest.csv` into `dir`.
pub fn write_dataset(dir: &Path, pairs: &[ScenePair]) -> Result<Vec<ManifestRecord>, SceneError> {
    let io = |e: std::io::Error| SceneError::Io(format!("{}: {e}", dir.display()));
    std::fs::create_dir_all(dir).map_err(io)?;
    let mut records = Vec::with_capacity(pairs.len());
    for (k, p) in pairs.iter().enumerate() {
        let name = pair_file_name(k);
        write_pair(&dir.join(&name), p)?;
        records.push(ManifestRecord::new(name, p));
    }
    write_manifest(&dir.join(MANIFEST_FILE), &records)?;
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<(), SceneError> {
    let csv_err = |e: csv::Error| SceneError::Io(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| SceneError::Io(e.to_string()))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>, SceneError> {
    let csv_err = |e: csv::Error| SceneError::Io(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|rec| rec.map_err(csv_err)).collect()
}

/// Loads the pairs listed in `dir/manifest.csv`, in manifest order.
pub fn read_dataset(dir: &Path) -> Result<Vec<ScenePair>, SceneError> {
    read_manifest(&dir.join(MANIFEST_FILE))?.iter().map(|r| read_pair(&dir.join(&r.file))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_pair, ClassConfig, PairConfig};

    fn pair() -> ScenePair {
        let cfg = PairConfig { class: ClassConfig { num_points: 300, ..ClassConfig::default() }, ..PairConfig::default() };
        generate_pair(&cfg, 4).unwrap()
    }

    #[test]
    fn pair_bytes_round_trip_exactly() {
        let p = pair();
        let bytes = pair_to_bytes(&p);
        assert_eq!(&bytes[..10], MAGIC);
        assert_eq!(pair_from_bytes(&bytes).unwrap(), p);
    }

    #[test]
    fn damaged_files_are_rejected() {
        let bytes = pair_to_bytes(&pair());
        assert!(pair_from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[3] = b'x';
        assert!(pair_from_bytes(&bad).is_err());
        let mut bad = bytes;
        bad[10] = 7;
        assert!(matches!(pair_from_bytes(&bad), Err(SceneError::Format(_))));
    }

    #[test]
    fn dataset_directory_round_trips_with_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = vec![pair(), pair()];
        let records = write_dataset(dir.path(), &pairs).unwrap();
        assert_eq!(read_manifest(&dir.path().join(MANIFEST_FILE)).unwrap(), records);
        assert_eq!(read_dataset(dir.path()).unwrap(), pairs);
        let text = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(text.starts_with("file,pair_id,object_id,class,baseline_deg,"));
    }
}
