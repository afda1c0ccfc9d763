//! Synthetic datasets on disk.
//!
//! A dataset directory holds `manifest.csv` (`frame_id,split,pcl_path,label_path`
//! per line, no header, paths relative to the directory), one PCL1 point cloud
//! and one label file per frame.
//!
//! Every file the [`Dataset`] opens is appended to its access log so commands
//! can prove they never looked at labels.

use std::cell::RefCell;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use pillarq_core::detector::{normalize_yaw, pillarize, Box3D, GridConfig, PointCloud};
use pillarq_core::pipeline::LabeledFrame;
use pillarq_core::scene::{generate_scene, SceneSpec};
use pillarq_core::Tensor;

use crate::{Error, Result};

pub const PCL_MAGIC: &[u8; 4] = b"PCL1";
pub const MANIFEST: &str = "manifest.csv";

// ------------------------------------------------------------------ PCL1

pub fn encode_pcl(pc: &PointCloud) -> Result<Vec<u8>> {
    let n = u32::try_from(pc.points.len()).map_err(|_| Error::Config("point cloud too large".into()))?;
    let mut out = Vec::with_capacity(8 + 16 * pc.points.len());
    out.extend_from_slice(PCL_MAGIC);
    out.extend_from_slice(&n.to_le_bytes());
    for p in &pc.points {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_pcl(buf: &[u8], path: &Path) -> Result<PointCloud> {
    if buf.len() < 8 || &buf[..4] != PCL_MAGIC {
        return Err(Error::format(path, "not a PCL1 file"));
    }
    let n = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes")) as usize;
    let body = &buf[8..];
    if Some(body.len()) != n.checked_mul(16) {
        return Err(Error::format(path, format!("expected {n} points, found {} bytes", body.len())));
    }
    let points = body
        .chunks_exact(16)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes(c[4 * i..4 * i + 4].try_into().expect("4 bytes"));
            [f(0), f(1), f(2), f(3)]
        })
        .collect::<Vec<_>>();
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::format(path, "non-finite coordinate"));
    }
    Ok(PointCloud { points })
}

// ---------------------------------------------------------------- labels

/// One `x,y,z,h,w,l,yaw,cls` line per box; floats in shortest round-trip form.
pub fn encode_labels(boxes: &[Box3D]) -> String {
    boxes
        .iter()
        .map(|b| format!("{},{},{},{},{},{},{},{}\n", b.x, b.y, b.z, b.h, b.w, b.l, b.yaw, b.cls))
        .collect()
}

pub fn decode_labels(text: &str, path: &Path) -> Result<Vec<Box3D>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |m: &str| Error::format(path, format!("line {}: {m}", i + 1));
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 8 {
            return Err(bad(&format!("expected 8 fields, got {}", f.len())));
        }
        let mut v = [0.0f64; 7];
        for (k, s) in f[..7].iter().enumerate() {
            v[k] = s.parse().map_err(|_| bad(&format!("bad number `{s}`")))?;
            if !v[k].is_finite() {
                return Err(bad("non-finite value"));
            }
        }
        let cls: usize = f[7].parse().map_err(|_| bad(&format!("bad class `{}`", f[7])))?;
        if !(v[3] > 0.0 && v[4] > 0.0 && v[5] > 0.0) {
            return Err(bad("box sizes must be positive"));
        }
        out.push(Box3D { x: v[0], y: v[1], z: v[2], h: v[3], w: v[4], l: v[5], yaw: normalize_yaw(v[6]), cls, score: 1.0 });
    }
    Ok(out)
}

// -------------------------------------------------------------- manifest

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub frame_id: usize,
    pub split: Split,
    pub pcl: String,
    pub label: String,
}

pub fn encode_manifest(entries: &[ManifestEntry]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for e in entries {
        w.write_record([e.frame_id.to_string().as_str(), e.split.name(), &e.pcl, &e.label])
            .map_err(|e| Error::Config(format!("manifest: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(format!("manifest: {e}")))?;
    Ok(String::from_utf8(bytes).expect("utf-8 input"))
}

pub fn decode_manifest(text: &str, path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut out: Vec<ManifestEntry> = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, format!("record {}: {e}", i + 1)))?;
        let bad = |m: String| Error::format(path, format!("record {}: {m}", i + 1));
        if rec.len() != 4 {
            return Err(bad(format!("expected 4 fields, got {}", rec.len())));
        }
        let frame_id = rec[0].parse().map_err(|_| bad(format!("bad frame id `{}`", &rec[0])))?;
        let split = Split::parse(&rec[1]).ok_or_else(|| bad(format!("unknown split `{}`", &rec[1])))?;
        if out.iter().any(|e| e.frame_id == frame_id) {
            return Err(bad(format!("duplicate frame id {frame_id}")));
        }
        out.push(ManifestEntry { frame_id, split, pcl: rec[2].to_string(), label: rec[3].to_string() });
    }
    Ok(out)
}

// ------------------------------------------------------------ generation

/// Scene seed for a frame; frames are independent of each other.
pub fn frame_seed(seed: u64, frame_id: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ frame_id as u64
}

/// Writes `n_train + n_val` frames into `dir` (which must exist).
pub fn generate(dir: &Path, spec: &SceneSpec, n_train: usize, n_val: usize, seed: u64) -> Result<Vec<ManifestEntry>> {
    for sub in ["pcl", "labels"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut entries = Vec::with_capacity(n_train + n_val);
    for id in 0..n_train + n_val {
        let (pc, boxes) = generate_scene(spec, frame_seed(seed, id))?;
        let e = ManifestEntry {
            frame_id: id,
            split: if id < n_train { Split::Train } else { Split::Val },
            pcl: format!("pcl/{id:06}.pcl"),
            label: format!("labels/{id:06}.txt"),
        };
        write(&dir.join(&e.pcl), &encode_pcl(&pc)?)?;
        write(&dir.join(&e.label), encode_labels(&boxes).as_bytes())?;
        entries.push(e);
    }
    write(&dir.join(MANIFEST), encode_manifest(&entries)?.as_bytes())?;
    Ok(entries)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// --------------------------------------------------------------- reading

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessKind {
    Manifest,
    PointCloud,
    Label,
}

impl fmt::Display for AccessKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AccessKind::Manifest => "manifest",
            AccessKind::PointCloud => "point_cloud",
            AccessKind::Label => "label",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Access {
    pub kind: AccessKind,
    /// Path relative to the dataset directory.
    pub path: String,
}

#[derive(Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
    log: RefCell<Vec<Access>>,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let entries = decode_manifest(&text, &path)?;
        let d = Dataset { dir: dir.to_path_buf(), entries, log: RefCell::new(Vec::new()) };
        d.record(AccessKind::Manifest, MANIFEST);
        Ok(d)
    }

    fn record(&self, kind: AccessKind, path: &str) {
        self.log.borrow_mut().push(Access { kind, path: path.to_string() });
    }

    /// Files opened so far, in order.
    pub fn accesses(&self) -> Vec<Access> {
        self.log.borrow().clone()
    }

    pub fn label_reads(&self) -> usize {
        self.log.borrow().iter().filter(|a| a.kind == AccessKind::Label).count()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn point_cloud(&self, e: &ManifestEntry) -> Result<PointCloud> {
        self.record(AccessKind::PointCloud, &e.pcl);
        let path = self.dir.join(&e.pcl);
        let buf = fs::read(&path).map_err(|err| Error::io(&path, err))?;
        decode_pcl(&buf, &path)
    }

    pub fn labels(&self, e: &ManifestEntry) -> Result<Vec<Box3D>> {
        self.record(AccessKind::Label, &e.label);
        let path = self.dir.join(&e.label);
        let text = fs::read_to_string(&path).map_err(|err| Error::io(&path, err))?;
        decode_labels(&text, &path)
    }

    /// Pillarized inputs of one split, labels untouched.
    pub fn inputs(&self, split: Split, grid: &GridConfig) -> Result<Vec<(usize, Tensor<f32>)>> {
        self.split(split).map(|e| Ok((e.frame_id, pillarize(&self.point_cloud(e)?, grid).input()))).collect()
    }

    /// Pillarized inputs with their ground truth.
    pub fn labeled(&self, split: Split, grid: &GridConfig) -> Result<Vec<LabeledFrame>> {
        self.split(split)
            .map(|e| Ok(LabeledFrame { input: pillarize(&self.point_cloud(e)?, grid).input(), boxes: self.labels(e)? }))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pcl_rejects_truncation() {
        let pc = PointCloud { points: vec![[1.0, 2.0, 3.0, 0.5]; 3] };
        let b = encode_pcl(&pc).unwrap();
        let p = Path::new("x.pcl");
        assert_eq!(decode_pcl(&b, p).unwrap(), pc);
        assert!(decode_pcl(&b[..b.len() - 1], p).is_err());
        assert!(decode_pcl(b"PCL0\0\0\0\0", p).is_err());
    }

    #[test]
    fn labels_reject_bad_lines() {
        let p = Path::new("l.txt");
        assert!(decode_labels("1,2,3,1,1,1,0", p).is_err());
        assert!(decode_labels("1,2,3,1,0,1,0,0", p).is_err());
        assert!(decode_labels("1,2,3,1,1,1,0,x", p).is_err());
        assert_eq!(decode_labels("\n  \n", p).unwrap(), vec![]);
    }

    #[test]
    fn manifest_rejects_duplicates_and_unknown_splits() {
        let p = Path::new("m.csv");
        assert!(decode_manifest("0,train,a,b\n0,val,c,d\n", p).is_err());
        assert!(decode_manifest("0,test,a,b\n", p).is_err());
        assert_eq!(decode_manifest("3, val ,a,b\n", p).unwrap()[0].split, Split::Val);
    }
}
