//! SemanticKITTI on-disk formats: `.bin` scans, `.label` files, `poses.txt`,
//! `calib.txt`, plus the class remapping table and sequence manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::RigidPose;

/// Train id used for every ignored point after remapping.
pub const IGNORE_ID: u16 = 255;

/// Rotations in text pose/calibration files are printed with limited
/// precision; anything closer than this to orthonormal is re-projected.
const POSE_TEXT_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

impl ScanPoint {
    pub fn xyz(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

/// One LiDAR sweep. Values are widened from the on-disk `f32`s, so writing a
/// scan that was read from disk reproduces the file exactly.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawScan {
    pub points: Vec<ScanPoint>,
}

impl RawScan {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelArray {
    pub semantic: Vec<u16>,
    pub instance: Vec<u16>,
}

impl LabelArray {
    pub fn len(&self) -> usize {
        self.semantic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.semantic.is_empty()
    }
}

pub fn decode_scan(bytes: &[u8]) -> Result<RawScan> {
    if !bytes.len().is_multiple_of(16) {
        return Err(Error::MalformedScan(format!(
            "length {} is not a multiple of 16 bytes",
            bytes.len()
        )));
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    for (i, chunk) in bytes.chunks_exact(16).enumerate() {
        let f = |o: usize| f32::from_le_bytes([chunk[o], chunk[o + 1], chunk[o + 2], chunk[o + 3]]);
        let (x, y, z, intensity) = (f(0), f(4), f(8), f(12));
        if !(x.is_finite() && y.is_finite() && z.is_finite() && intensity.is_finite()) {
            return Err(Error::MalformedScan(format!("non-finite value in point {i}")));
        }
        points.push(ScanPoint {
            x: x as f64,
            y: y as f64,
            z: z as f64,
            intensity: intensity as f64,
        });
    }
    Ok(RawScan { points })
}

pub fn encode_scan(scan: &RawScan) -> Vec<u8> {
    let mut out = Vec::with_capacity(scan.points.len() * 16);
    for p in &scan.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn read_scan(path: impl AsRef<Path>) -> Result<RawScan> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_scan(&bytes)
}

pub fn write_scan(path: impl AsRef<Path>, scan: &RawScan) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_scan(scan)).map_err(|e| Error::io(path, e))
}

pub fn decode_labels(bytes: &[u8], n_points: usize) -> Result<LabelArray> {
    if bytes.len() != n_points * 4 {
        return Err(Error::MalformedLabel(format!(
            "expected {} entries ({} bytes), found {} bytes",
            n_points,
            n_points * 4,
            bytes.len()
        )));
    }
    let mut labels = LabelArray {
        semantic: Vec::with_capacity(n_points),
        instance: Vec::with_capacity(n_points),
    };
    for chunk in bytes.chunks_exact(4) {
        let v = u32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        labels.semantic.push((v & 0xFFFF) as u16);
        labels.instance.push((v >> 16) as u16);
    }
    Ok(labels)
}

pub fn encode_labels(labels: &LabelArray) -> Vec<u8> {
    labels
        .semantic
        .iter()
        .zip(&labels.instance)
        .flat_map(|(&s, &i)| (((i as u32) << 16) | s as u32).to_le_bytes())
        .collect()
}

pub fn read_labels(path: impl AsRef<Path>, n_points: usize) -> Result<LabelArray> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_labels(&bytes, n_points)
}

pub fn write_labels(path: impl AsRef<Path>, labels: &LabelArray) -> Result<()> {
    if labels.semantic.len() != labels.instance.len() {
        return Err(Error::MalformedLabel(
            "semantic and instance arrays differ in length".into(),
        ));
    }
    let path = path.as_ref();
    fs::write(path, encode_labels(labels)).map_err(|e| Error::io(path, e))
}

fn parse_twelve(tokens: &[&str], what: &str) -> Result<[f64; 12]> {
    if tokens.len() != 12 {
        return Err(Error::MalformedPose(format!(
            "{what}: expected 12 values, found {}",
            tokens.len()
        )));
    }
    let mut m = [0.0; 12];
    for (dst, tok) in m.iter_mut().zip(tokens) {
        *dst = tok
            .parse()
            .map_err(|_| Error::MalformedPose(format!("{what}: bad number {tok:?}")))?;
    }
    Ok(m)
}

fn pose_from_text(m: &[f64; 12]) -> Result<RigidPose> {
    let r = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
    RigidPose::from_approx(r, Vector3::new(m[3], m[7], m[11]), POSE_TEXT_TOLERANCE)
}

/// Camera-frame poses, one row-major 3×4 matrix per non-empty line.
pub fn parse_camera_poses(text: &str) -> Result<Vec<RigidPose>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let tokens: Vec<&str> = line.split_whitespace().collect();
            pose_from_text(&parse_twelve(&tokens, &format!("pose line {}", i + 1))?)
        })
        .collect()
}

/// Extracts the `Tr:` velodyne-to-camera transform from a calibration file.
pub fn parse_calibration(text: &str) -> Result<RigidPose> {
    let line = text
        .lines()
        .find_map(|l| l.trim_start().strip_prefix("Tr:"))
        .ok_or_else(|| Error::MalformedPose("calibration has no `Tr:` line".into()))?;
    let tokens: Vec<&str> = line.split_whitespace().collect();
    pose_from_text(&parse_twelve(&tokens, "Tr")?)
}

/// Conjugates camera poses into the LiDAR frame: `Tr⁻¹ · P · Tr`.
pub fn camera_to_lidar_poses(camera: &[RigidPose], tr: &RigidPose) -> Vec<RigidPose> {
    let tr_inv = tr.inverse();
    camera.iter().map(|p| tr_inv.compose(p).compose(tr)).collect()
}

pub fn read_poses(poses_path: impl AsRef<Path>, calib_path: impl AsRef<Path>) -> Result<Vec<RigidPose>> {
    let (pp, cp) = (poses_path.as_ref(), calib_path.as_ref());
    let poses = fs::read_to_string(pp).map_err(|e| Error::io(pp, e))?;
    let calib = fs::read_to_string(cp).map_err(|e| Error::io(cp, e))?;
    Ok(camera_to_lidar_poses(
        &parse_camera_poses(&poses)?,
        &parse_calibration(&calib)?,
    ))
}

/// Writes poses as `poses.txt` lines (row-major 3×4).
pub fn format_poses(poses: &[RigidPose]) -> String {
    let mut out = String::new();
    for p in poses {
        let (r, t) = (p.rotation(), p.translation());
        let vals = [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t[0],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t[1],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t[2],
        ];
        let line: Vec<String> = vals.iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

/// Maps raw SemanticKITTI ids to contiguous train ids.
///
/// File format: one `raw_id train_id name` triple per line, `#` comments.
/// A train id of 255 sends the raw id to the ignore class. Raw ids missing
/// from the file are ignored as well.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    map: BTreeMap<u16, u16>,
    names: Vec<String>,
}

impl ClassMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut names: BTreeMap<u16, String> = BTreeMap::new();
        for (lineno, raw_line) in text.lines().enumerate() {
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let bad = || Error::Config(format!("class map line {}: {raw_line:?}", lineno + 1));
            let raw: u16 = it.next().and_then(|t| t.parse().ok()).ok_or_else(bad)?;
            let train: u16 = it.next().and_then(|t| t.parse().ok()).ok_or_else(bad)?;
            let name = it.collect::<Vec<_>>().join(" ");
            if map.insert(raw, train).is_some() {
                return Err(Error::Config(format!("raw id {raw} mapped twice")));
            }
            if train != IGNORE_ID {
                names.entry(train).or_insert(name);
            }
        }
        let n = names.len();
        for (expect, &id) in names.keys().enumerate() {
            if id as usize != expect {
                return Err(Error::Config(format!(
                    "train ids must be contiguous from 0; missing {expect} (have {n} classes)"
                )));
            }
        }
        Ok(Self {
            map,
            names: names.into_values().collect(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// The checked-in SemanticKITTI table (moving and static variants merged).
    pub fn semantic_kitti() -> Self {
        Self::parse(include_str!("../config/semantic-kitti.classmap")).expect("bundled class map is valid")
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.names
    }

    pub fn remap(&self, raw: u16) -> u16 {
        self.map.get(&raw).copied().unwrap_or(IGNORE_ID)
    }

    pub fn remap_all(&self, labels: &LabelArray) -> Vec<u16> {
        labels.semantic.iter().map(|&s| self.remap(s)).collect()
    }
}

/// The files and poses making up one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceManifest {
    pub sequence_id: String,
    pub frame_ids: Vec<u32>,
    pub scan_paths: Vec<PathBuf>,
    /// Empty for unlabeled sequences, otherwise one path per frame.
    pub label_paths: Vec<PathBuf>,
    pub poses: Vec<RigidPose>,
    pub calibration: RigidPose,
}

impl SequenceManifest {
    pub fn len(&self) -> usize {
        self.frame_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_ids.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvariantViolation(
                "frame ids must be strictly increasing".into(),
            ));
        }
        let n = self.frame_ids.len();
        if self.scan_paths.len() != n || self.poses.len() != n {
            return Err(Error::InvariantViolation(format!(
                "{n} frames but {} scans and {} poses",
                self.scan_paths.len(),
                self.poses.len()
            )));
        }
        if !self.label_paths.is_empty() && self.label_paths.len() != n {
            return Err(Error::InvariantViolation(format!(
                "{n} frames but {} label files",
                self.label_paths.len()
            )));
        }
        Ok(())
    }

    /// Reads `<root>/sequences/<id>/{velodyne,labels,poses.txt,calib.txt}`.
    pub fn discover(dataset_root: impl AsRef<Path>, sequence_id: &str) -> Result<Self> {
        let dir = dataset_root.as_ref().join("sequences").join(sequence_id);
        let velo = dir.join("velodyne");
        let mut frames: Vec<(u32, PathBuf)> = Vec::new();
        for entry in fs::read_dir(&velo).map_err(|e| Error::io(&velo, e))? {
            let path = entry.map_err(|e| Error::io(&velo, e))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("bin") {
                continue;
            }
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Data(format!("unexpected scan name {}", path.display())))?;
            frames.push((id, path));
        }
        frames.sort();
        let label_dir = dir.join("labels");
        let label_paths = if label_dir.is_dir() {
            frames
                .iter()
                .map(|(id, _)| label_dir.join(format!("{id:06}.label")))
                .collect()
        } else {
            Vec::new()
        };
        let poses = read_poses(dir.join("poses.txt"), dir.join("calib.txt"))?;
        let calib_path = dir.join("calib.txt");
        let calibration = parse_calibration(&fs::read_to_string(&calib_path).map_err(|e| Error::io(&calib_path, e))?)?;
        // poses.txt covers every frame of the sequence; keep the scanned ones
        let poses = frames
            .iter()
            .map(|(id, _)| {
                poses
                    .get(*id as usize)
                    .copied()
                    .ok_or_else(|| Error::InvariantViolation(format!("no pose for frame {id}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = Self {
            sequence_id: sequence_id.to_string(),
            frame_ids: frames.iter().map(|(id, _)| *id).collect(),
            scan_paths: frames.into_iter().map(|(_, p)| p).collect(),
            label_paths,
            poses,
            calibration,
        };
        manifest.validate()?;
        Ok(manifest)
    }
}

/// Writes frames as `<root>/sequences/<id>/{velodyne,labels,poses.txt,calib.txt}`.
/// Poses are LiDAR-frame poses; the calibration written is the identity, so
/// [`SequenceManifest::discover`] reads them back unchanged.
pub fn write_sequence(
    root: impl AsRef<Path>,
    sequence_id: &str,
    scans: &[RawScan],
    labels: &[LabelArray],
    poses: &[RigidPose],
) -> Result<PathBuf> {
    if scans.len() != poses.len() || (!labels.is_empty() && labels.len() != scans.len()) {
        return Err(Error::InvariantViolation(format!(
            "{} scans, {} label files, {} poses",
            scans.len(),
            labels.len(),
            poses.len()
        )));
    }
    let dir = root.as_ref().join("sequences").join(sequence_id);
    for sub in ["velodyne", "labels"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for (i, scan) in scans.iter().enumerate() {
        write_scan(dir.join("velodyne").join(format!("{i:06}.bin")), scan)?;
    }
    for (i, l) in labels.iter().enumerate() {
        write_labels(dir.join("labels").join(format!("{i:06}.label")), l)?;
    }
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("poses.txt", format_poses(poses))?;
    write("calib.txt", format!("Tr: {}", format_poses(&[RigidPose::identity()])))?;
    Ok(dir)
}

/// Keeps every `stride`-th frame (by position), preserving pose pairing.
pub fn build_tiny_subset(manifest: &SequenceManifest, stride: usize) -> Result<SequenceManifest> {
    if stride == 0 {
        return Err(Error::Config("stride must be at least 1".into()));
    }
    let keep = |i: &usize| i.is_multiple_of(stride);
    let pick = |v: &[PathBuf]| -> Vec<PathBuf> {
        v.iter()
            .enumerate()
            .filter(|(i, _)| keep(i))
            .map(|(_, p)| p.clone())
            .collect()
    };
    Ok(SequenceManifest {
        sequence_id: manifest.sequence_id.clone(),
        frame_ids: manifest
            .frame_ids
            .iter()
            .enumerate()
            .filter(|(i, _)| keep(i))
            .map(|(_, f)| *f)
            .collect(),
        scan_paths: pick(&manifest.scan_paths),
        label_paths: pick(&manifest.label_paths),
        poses: manifest
            .poses
            .iter()
            .enumerate()
            .filter(|(i, _)| keep(i))
            .map(|(_, p)| *p)
            .collect(),
        calibration: manifest.calibration,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn le_bytes(vals: &[f32]) -> Vec<u8> {
        vals.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    #[test]
    fn decode_single_point() {
        let scan = decode_scan(&le_bytes(&[1.0, 0.0, 0.0, 0.5])).unwrap();
        assert_eq!(
            scan.points,
            vec![ScanPoint {
                x: 1.0,
                y: 0.0,
                z: 0.0,
                intensity: 0.5
            }]
        );
    }

    #[test]
    fn empty_and_truncated_scans() {
        assert!(decode_scan(&[]).unwrap().is_empty());
        assert!(matches!(decode_scan(&[0u8; 17]), Err(Error::MalformedScan(_))));
    }

    #[test]
    fn scan_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_scan(dir.path().join("nope.bin")), Err(Error::Io { .. })));
    }

    #[test]
    fn label_packing() {
        let l = decode_labels(&0x0001_0009u32.to_le_bytes(), 1).unwrap();
        assert_eq!((l.semantic[0], l.instance[0]), (9, 1));
        let l = decode_labels(&0u32.to_le_bytes(), 1).unwrap();
        assert_eq!((l.semantic[0], l.instance[0]), (0, 0));
        assert!(matches!(decode_labels(&[0u8; 8], 3), Err(Error::MalformedLabel(_))));
    }

    #[test]
    fn identity_pose_line() {
        let poses = parse_camera_poses("1 0 0 0 0 1 0 0 0 0 1 0\n").unwrap();
        let out = camera_to_lidar_poses(&poses, &RigidPose::identity());
        assert_eq!(out, vec![RigidPose::identity()]);
        let tr = RigidPose::from_translation(1.0, 0.0, 0.0);
        let out = camera_to_lidar_poses(&poses, &tr);
        assert_eq!(out, vec![RigidPose::identity()]);
    }

    #[test]
    fn bad_pose_token_count() {
        assert!(matches!(
            parse_camera_poses("1 0 0 0 0 1 0 0 0 0 1\n"),
            Err(Error::MalformedPose(_))
        ));
        assert!(parse_calibration("P0: 1 2 3\n").is_err());
    }

    #[test]
    fn calibration_line_is_found() {
        let text = "P0: 1 0 0 0 0 1 0 0 0 0 1 0\nTr: 1 0 0 0.5 0 1 0 0 0 0 1 0\n";
        let tr = parse_calibration(text).unwrap();
        assert_eq!(tr.translation().x, 0.5);
    }

    #[test]
    fn class_map_bundled() {
        let cm = ClassMap::semantic_kitti();
        assert_eq!(cm.num_classes(), 19);
        assert_eq!(cm.remap(10), 0);
        assert_eq!(cm.remap(252), 0); // moving-car merges into car
        assert_eq!(cm.remap(0), IGNORE_ID);
        assert_eq!(cm.remap(12345), IGNORE_ID);
        assert_eq!(cm.class_names()[0], "car");
        assert_eq!(cm.class_names()[18], "traffic-sign");
    }

    #[test]
    fn class_map_rejects_gaps() {
        assert!(ClassMap::parse("1 0 a\n2 2 b\n").is_err());
        assert!(ClassMap::parse("1 0 a\n1 0 b\n").is_err());
    }

    #[test]
    fn manifest_validation() {
        let m = SequenceManifest {
            sequence_id: "00".into(),
            frame_ids: vec![0, 2, 1],
            scan_paths: vec!["a".into(), "b".into(), "c".into()],
            label_paths: vec![],
            poses: vec![RigidPose::identity(); 3],
            calibration: RigidPose::identity(),
        };
        assert!(m.validate().is_err());
    }

    proptest! {
        #[test]
        fn label_codec_round_trip(pairs in proptest::collection::vec((any::<u16>(), any::<u16>()), 0..64)) {
            let labels = LabelArray {
                semantic: pairs.iter().map(|p| p.0).collect(),
                instance: pairs.iter().map(|p| p.1).collect(),
            };
            let back = decode_labels(&encode_labels(&labels), pairs.len()).unwrap();
            prop_assert_eq!(back, labels);
        }

        #[test]
        fn scan_codec_round_trip(vals in proptest::collection::vec(-1e4f32..1e4f32, 0..64)) {
            let n = vals.len() / 4 * 4;
            let bytes = le_bytes(&vals[..n]);
            prop_assert_eq!(encode_scan(&decode_scan(&bytes).unwrap()), bytes);
        }
    }
}
