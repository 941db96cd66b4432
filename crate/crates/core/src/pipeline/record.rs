//! Binary frame records and sequence directories.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "HOILSEQ1" | N u32 | N_k u32 | frame_index u32
//! points   N × 3 f32
//! part     N u8
//! contact  N u8 (0 or 1)
//! keypoints N_k × 3 f32
//! kp_valid  N_k u8
//! kp_contact N_k u8
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{KeypointProfile, KeypointSet, LabeledPointCloud, PointCloud, NUM_CLASSES};

pub const RECORD_MAGIC: &[u8; 8] = b"HOILSEQ1";
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub frame_index: u32,
    pub points: Vec<[f32; 3]>,
    pub part: Vec<u8>,
    pub contact: Vec<u8>,
    pub keypoints: Vec<[f32; 3]>,
    pub kp_valid: Vec<u8>,
    pub kp_contact: Vec<u8>,
}

fn flag(name: &str, values: &[u8]) -> Result<()> {
    match values.iter().position(|&v| v > 1) {
        Some(i) => Err(Error::Format(format!("{name}[{i}] = {} is not 0 or 1", values[i]))),
        None => Ok(()),
    }
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} {n} does not fit in u32")))
}

fn read_array<const K: usize>(r: &mut impl Read) -> Result<[u8; K]> {
    let mut b = [0u8; K];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated frame record: {e}")))?;
    Ok(b)
}

fn read_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated frame record: {e}")))?;
    Ok(b)
}

fn read_points(r: &mut impl Read, n: usize) -> Result<Vec<[f32; 3]>> {
    let raw = read_bytes(r, n * 12)?;
    Ok(raw
        .chunks_exact(12)
        .map(|c| {
            let f = |k: usize| f32::from_le_bytes(c[4 * k..4 * k + 4].try_into().expect("4 bytes"));
            [f(0), f(1), f(2)]
        })
        .collect())
}

impl FrameRecord {
    pub fn from_frame(frame_index: u32, cloud: &LabeledPointCloud, keypoints: &KeypointSet) -> Result<Self> {
        if !cloud.validate().is_empty() {
            return Err(Error::invalid(format!("frame {frame_index}: labelled cloud is inconsistent")));
        }
        let f32s = |p: &[f64; 3]| p.map(|v| v as f32);
        let rec = FrameRecord {
            frame_index,
            points: cloud.cloud.coords().iter().map(f32s).collect(),
            part: cloud.part.clone(),
            contact: cloud.contact.iter().map(|&c| c as u8).collect(),
            keypoints: keypoints.coords.iter().map(f32s).collect(),
            kp_valid: keypoints.valid.iter().map(|&c| c as u8).collect(),
            kp_contact: keypoints.contact.iter().map(|&c| c as u8).collect(),
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn num_points(&self) -> usize {
        self.points.len()
    }

    pub fn num_keypoints(&self) -> usize {
        self.keypoints.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, nk) = (self.points.len(), self.keypoints.len());
        if self.part.len() != n || self.contact.len() != n {
            return Err(Error::Format(format!("frame {}: point sections disagree with N = {n}", self.frame_index)));
        }
        if self.kp_valid.len() != nk || self.kp_contact.len() != nk {
            return Err(Error::Format(format!("frame {}: keypoint sections disagree with N_k = {nk}", self.frame_index)));
        }
        if let Some(i) = self.part.iter().position(|&p| p as usize >= NUM_CLASSES) {
            return Err(Error::Format(format!("frame {}: part[{i}] out of range", self.frame_index)));
        }
        flag("contact", &self.contact)?;
        flag("kp_valid", &self.kp_valid)?;
        flag("kp_contact", &self.kp_contact)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        self.validate()?;
        w.write_all(RECORD_MAGIC)?;
        w.write_all(&len_u32(self.points.len(), "N")?.to_le_bytes())?;
        w.write_all(&len_u32(self.keypoints.len(), "N_k")?.to_le_bytes())?;
        w.write_all(&self.frame_index.to_le_bytes())?;
        for p in &self.points {
            for v in p {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.write_all(&self.part)?;
        w.write_all(&self.contact)?;
        for p in &self.keypoints {
            for v in p {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.write_all(&self.kp_valid)?;
        w.write_all(&self.kp_contact)?;
        Ok(())
    }

    /// Reads exactly one record; trailing bytes are an error.
    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        if &read_array::<8>(&mut r)? != RECORD_MAGIC {
            return Err(Error::Format("not a frame record (bad magic)".into()));
        }
        let n = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let nk = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let frame_index = u32::from_le_bytes(read_array(&mut r)?);
        let rec = FrameRecord {
            frame_index,
            points: read_points(&mut r, n)?,
            part: read_bytes(&mut r, n)?,
            contact: read_bytes(&mut r, n)?,
            keypoints: read_points(&mut r, nk)?,
            kp_valid: read_bytes(&mut r, nk)?,
            kp_contact: read_bytes(&mut r, nk)?,
        };
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format(format!("frame {frame_index}: trailing bytes after record")));
        }
        rec.validate()?;
        Ok(rec)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::with_capacity(20 + self.points.len() * 14 + self.keypoints.len() * 14);
        self.write(&mut buf)?;
        Ok(buf)
    }

    pub fn cloud(&self) -> Result<LabeledPointCloud> {
        let coords = self.points.iter().map(|p| p.map(f64::from)).collect();
        Ok(LabeledPointCloud {
            cloud: PointCloud::new(coords)?,
            part: self.part.clone(),
            contact: self.contact.iter().map(|&c| c == 1).collect(),
            face_id: vec![None; self.points.len()],
        })
    }

    pub fn keypoint_set(&self) -> Result<KeypointSet> {
        KeypointSet::new(
            self.keypoints.iter().map(|p| p.map(f64::from)).collect(),
            self.kp_valid.iter().map(|&c| c == 1).collect(),
            self.kp_contact.iter().map(|&c| c == 1).collect(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub frames: usize,
    pub num_keypoints: usize,
    pub profile: KeypointProfile,
    pub dt: f64,
    pub seed: u64,
    pub files: Vec<String>,
}

/// A sequence directory held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub records: Vec<FrameRecord>,
}

pub fn record_file_name(frame: usize) -> String {
    format!("frame_{frame:06}.bin")
}

impl Dataset {
    pub fn new(records: Vec<FrameRecord>, profile: KeypointProfile, dt: f64, seed: u64) -> Result<Self> {
        let nk = profile.num_keypoints();
        if let Some(r) = records.iter().find(|r| r.num_keypoints() != nk) {
            return Err(Error::Format(format!(
                "frame {} has {} keypoints, profile expects {nk}",
                r.frame_index,
                r.num_keypoints()
            )));
        }
        let manifest = Manifest {
            format: String::from_utf8_lossy(RECORD_MAGIC).into_owned(),
            frames: records.len(),
            num_keypoints: nk,
            profile,
            dt,
            seed,
            files: (0..records.len()).map(record_file_name).collect(),
        };
        Ok(Dataset { manifest, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn profile(&self) -> KeypointProfile {
        self.manifest.profile
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        for (rec, name) in self.records.iter().zip(&self.manifest.files) {
            let mut w = BufWriter::new(File::create(dir.join(name))?);
            rec.write(&mut w)?;
            w.flush()?;
        }
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        fs::write(dir.join(MANIFEST), text)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path: PathBuf = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format.as_bytes() != RECORD_MAGIC {
            return Err(Error::Format(format!("unknown sequence format {:?}", manifest.format)));
        }
        if manifest.frames != manifest.files.len() {
            return Err(Error::Format("manifest frame count disagrees with its file list".into()));
        }
        if manifest.frames == 0 {
            return Err(Error::Degenerate(format!("{} holds no frames", dir.display())));
        }
        if manifest.num_keypoints != manifest.profile.num_keypoints() {
            return Err(Error::Format("manifest keypoint count disagrees with its profile".into()));
        }
        let records = manifest
            .files
            .iter()
            .map(|f| {
                let p = dir.join(f);
                let file = File::open(&p).map_err(|e| Error::Missing(format!("{}: {e}", p.display())))?;
                FrameRecord::read(BufReader::new(file))
            })
            .collect::<Result<Vec<_>>>()?;
        let out = Dataset::new(records, manifest.profile, manifest.dt, manifest.seed)?;
        if out.manifest != manifest {
            return Err(Error::Format("manifest does not match the records it lists".into()));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FrameRecord {
        FrameRecord {
            frame_index: 7,
            points: vec![[0.5, -1.25, 3.0], [f32::MIN_POSITIVE, 1e-30, -0.0]],
            part: vec![3, 25],
            contact: vec![1, 0],
            keypoints: vec![[1.0, 2.0, 3.0]],
            kp_valid: vec![1],
            kp_contact: vec![0],
        }
    }

    #[test]
    fn header_layout() {
        let b = sample().to_bytes().unwrap();
        assert_eq!(&b[..8], b"HOILSEQ1");
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(&b[16..20], &7u32.to_le_bytes());
        assert_eq!(b.len(), 20 + 2 * 14 + 14);
        assert_eq!(&b[20..24], &0.5f32.to_le_bytes());
    }

    #[test]
    fn malformed_records_are_rejected() {
        let b = sample().to_bytes().unwrap();
        assert!(FrameRecord::read(&b[..b.len() - 1]).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(FrameRecord::read(&extra[..]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(FrameRecord::read(&bad[..]).is_err());
        let mut flagged = sample();
        flagged.contact[0] = 2;
        assert!(flagged.to_bytes().is_err());
        let mut short = sample();
        short.part.pop();
        assert!(short.to_bytes().is_err());
    }
}
