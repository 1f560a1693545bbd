//! JSON clip files and the `MXDS` binary record format.

use std::fs;
use std::io::{ErrorKind, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{denormalize_2d, normalize_2d, Clip, SequenceDataset};
use crate::error::{Error, Result};
use crate::metrics::SkeletonSpec;
use crate::model::{sidecar_path, KeypointSequence2D, PoseSequence3D};

const MAGIC: &[u8; 4] = b"MXDS";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Json,
    Bin,
}

impl FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(DataFormat::Json),
            "bin" => Ok(DataFormat::Bin),
            _ => Err(Error::Config(format!("unknown data format {s:?} (json or bin)"))),
        }
    }
}

impl DataFormat {
    /// `bin` for `.mxds` files, `json` otherwise.
    pub fn infer(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("mxds") | Some("bin") => DataFormat::Bin,
            _ => DataFormat::Json,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonClip {
    skeleton: String,
    fps: f64,
    image_size: [f64; 2],
    keypoints_2d: Vec<Vec<Vec<Option<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    poses_3d: Option<Vec<Vec<Vec<Option<f64>>>>>,
    #[serde(default)]
    subject: String,
    #[serde(default)]
    action: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    camera: String,
}

/// Flattens nested `[T][N][C]` arrays, reporting the first malformed or
/// missing value by frame and joint.
fn flatten(what: &str, label: &str, rows: &[Vec<Vec<Option<f64>>>], joints: usize, channels: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(rows.len() * joints * channels);
    for (f, frame) in rows.iter().enumerate() {
        if frame.len() != joints {
            return Err(Error::Parse(format!(
                "{label}: {what} frame {f} has {} joints, expected {joints}",
                frame.len()
            )));
        }
        for (j, p) in frame.iter().enumerate() {
            if p.len() != channels {
                return Err(Error::Parse(format!(
                    "{label}: {what} frame {f} joint {j} has {} values, expected {channels}",
                    p.len()
                )));
            }
            for v in p {
                match v {
                    Some(v) if v.is_finite() => out.push(*v),
                    _ => {
                        return Err(Error::Parse(format!(
                            "{label}: {what} frame {f} joint {j} is not a finite number"
                        )))
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Parses one JSON clip. Pixel keypoints are normalized by the image size
/// and 3D poses made relative to the skeleton root.
pub fn read_json_clip(text: &str, label: &str) -> Result<(SkeletonSpec, Clip)> {
    let raw: JsonClip = serde_json::from_str(text).map_err(|e| Error::Parse(format!("{label}: {e}")))?;
    let skeleton = SkeletonSpec::by_name(&raw.skeleton)?;
    let [w, h] = raw.image_size;
    if !(w > 0.0 && h > 0.0) {
        return Err(Error::Parse(format!("{label}: image_size must be positive")));
    }
    let n = raw.keypoints_2d.first().map_or(skeleton.len(), |f| f.len());
    if n != skeleton.len() {
        return Err(Error::Schema(format!(
            "{label}: {n} joints but skeleton {} has {}",
            skeleton.name,
            skeleton.len()
        )));
    }
    let frames = raw.keypoints_2d.len();
    let px = flatten("keypoints_2d", label, &raw.keypoints_2d, n, 2)?;
    let coords = px.chunks(2).flat_map(|p| normalize_2d([p[0], p[1]], w, h)).collect();
    let keypoints = KeypointSequence2D::new(n, frames, coords, skeleton.name.clone())?;
    let poses = match &raw.poses_3d {
        None => None,
        Some(rows) => {
            if rows.len() != frames {
                return Err(Error::Schema(format!(
                    "{label}: {frames} 2D frames but {} 3D frames",
                    rows.len()
                )));
            }
            let c = flatten("poses_3d", label, rows, n, 3)?;
            Some(PoseSequence3D::new(n, frames, c)?.root_relative(skeleton.root))
        }
    };
    let clip = Clip {
        subject: raw.subject,
        action: raw.action,
        camera: raw.camera,
        fps: raw.fps,
        image_size: raw.image_size,
        keypoints,
        poses,
    };
    Ok((skeleton, clip))
}

fn nest(coords: &[f64], joints: usize, channels: usize) -> Vec<Vec<Vec<Option<f64>>>> {
    coords
        .chunks(joints * channels)
        .map(|f| f.chunks(channels).map(|p| p.iter().map(|&v| Some(v)).collect()).collect())
        .collect()
}

/// Serializes a clip with pixel keypoints.
pub fn write_json_clip(clip: &Clip, skeleton: &str) -> Result<String> {
    let [w, h] = clip.image_size;
    let k = &clip.keypoints;
    let px: Vec<f64> = k.coords.chunks(2).flat_map(|p| denormalize_2d([p[0], p[1]], w, h)).collect();
    let raw = JsonClip {
        skeleton: skeleton.to_string(),
        fps: clip.fps,
        image_size: clip.image_size,
        keypoints_2d: nest(&px, k.joints, 2),
        poses_3d: clip.poses.as_ref().map(|p| nest(&p.coords, p.joints, 3)),
        subject: clip.subject.clone(),
        action: clip.action.clone(),
        camera: clip.camera.clone(),
    };
    Ok(serde_json::to_string(&raw)?)
}

/// One record of a binary file.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryRecord {
    pub keypoints: KeypointSequence2D,
    pub poses: Option<PoseSequence3D>,
}

fn put_f32s<W: Write>(w: &mut W, values: impl Iterator<Item = f64>) -> Result<()> {
    let mut buf = Vec::new();
    values.for_each(|v| buf.extend_from_slice(&(v as f32).to_le_bytes()));
    w.write_all(&buf)?;
    Ok(())
}

/// Writes records back to back. The 2D block has 3 channels when the
/// keypoints carry confidences.
pub fn write_binary<W: Write>(w: &mut W, records: &[BinaryRecord]) -> Result<()> {
    for r in records {
        let k = &r.keypoints;
        let channels = if k.confidence.is_some() { 3 } else { 2 };
        w.write_all(MAGIC)?;
        for v in [VERSION, k.joints as u32, k.frames as u32, channels] {
            w.write_all(&v.to_le_bytes())?;
        }
        match &k.confidence {
            None => put_f32s(w, k.coords.iter().copied())?,
            Some(c) => put_f32s(
                w,
                k.coords.chunks(2).zip(c).flat_map(|(p, &c)| [p[0], p[1], c]),
            )?,
        }
        match &r.poses {
            None => w.write_all(&[0])?,
            Some(p) => {
                if p.joints != k.joints || p.frames != k.frames {
                    return Err(Error::shape("binary record", &[p.frames, p.joints], &[k.frames, k.joints]));
                }
                w.write_all(&[1])?;
                put_f32s(w, p.coords.iter().copied())?;
            }
        }
    }
    Ok(())
}

fn read_f32s<R: Read>(r: &mut R, n: usize, record: usize) -> Result<Vec<f64>> {
    let mut raw = vec![0u8; n * 4];
    r.read_exact(&mut raw)
        .map_err(|_| Error::Parse(format!("record {record}: truncated data block")))?;
    Ok(raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect())
}

fn read_u32<R: Read>(r: &mut R, record: usize) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Parse(format!("record {record}: truncated header")))?;
    Ok(u32::from_le_bytes(b))
}

/// Reads records until end of input.
pub fn read_binary<R: Read>(r: &mut R) -> Result<Vec<BinaryRecord>> {
    let mut out = Vec::new();
    loop {
        let i = out.len();
        let mut magic = [0u8; 4];
        match r.read_exact(&mut magic) {
            Ok(()) => {}
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        if &magic != MAGIC {
            return Err(Error::Parse(format!("record {i}: bad magic {magic:?}")));
        }
        let version = read_u32(r, i)?;
        if version != VERSION {
            return Err(Error::Parse(format!("record {i}: unsupported version {version}")));
        }
        let (n, t, c) = (read_u32(r, i)? as usize, read_u32(r, i)? as usize, read_u32(r, i)? as usize);
        if c != 2 && c != 3 {
            return Err(Error::Parse(format!("record {i}: 2D block has {c} channels")));
        }
        let block = read_f32s(r, t * n * c, i)?;
        let label = |e: Error| Error::Parse(format!("record {i}: {e}"));
        let keypoints = if c == 2 {
            KeypointSequence2D::new(n, t, block, "").map_err(label)?
        } else {
            let coords = block.chunks(3).flat_map(|p| [p[0], p[1]]).collect();
            let conf = block.chunks(3).map(|p| p[2]).collect();
            KeypointSequence2D::new(n, t, coords, "")
                .and_then(|k| k.with_confidence(conf))
                .map_err(label)?
        };
        let mut flag = [0u8];
        r.read_exact(&mut flag)
            .map_err(|_| Error::Parse(format!("record {i}: missing 3D presence flag")))?;
        let poses = match flag[0] {
            0 => None,
            1 => Some(PoseSequence3D::new(n, t, read_f32s(r, t * n * 3, i)?).map_err(label)?),
            f => return Err(Error::Parse(format!("record {i}: bad 3D presence flag {f}"))),
        };
        out.push(BinaryRecord { keypoints, poses });
    }
    Ok(out)
}

/// Clip metadata kept next to a binary file.
#[derive(Debug, Serialize, Deserialize)]
struct BinaryMeta {
    skeleton: String,
    clips: Vec<ClipMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ClipMeta {
    subject: String,
    action: String,
    camera: String,
    fps: f64,
    image_size: [f64; 2],
}

/// Writes a dataset: a directory of JSON clips, or one binary file plus a
/// JSON sidecar with clip metadata.
pub fn save_dataset(dataset: &SequenceDataset, path: &Path, format: DataFormat) -> Result<()> {
    match format {
        DataFormat::Json => {
            fs::create_dir_all(path)?;
            for (i, clip) in dataset.clips.iter().enumerate() {
                fs::write(path.join(format!("clip_{i:04}.json")), write_json_clip(clip, &dataset.skeleton.name)?)?;
            }
        }
        DataFormat::Bin => {
            let records: Vec<BinaryRecord> = dataset
                .clips
                .iter()
                .map(|c| BinaryRecord {
                    keypoints: c.keypoints.clone(),
                    poses: c.poses.clone(),
                })
                .collect();
            let mut buf = Vec::new();
            write_binary(&mut buf, &records)?;
            fs::write(path, buf)?;
            let meta = BinaryMeta {
                skeleton: dataset.skeleton.name.clone(),
                clips: dataset
                    .clips
                    .iter()
                    .map(|c| ClipMeta {
                        subject: c.subject.clone(),
                        action: c.action.clone(),
                        camera: c.camera.clone(),
                        fps: c.fps,
                        image_size: c.image_size,
                    })
                    .collect(),
            };
            fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)?)?;
        }
    }
    Ok(())
}

fn json_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads and validates a dataset written by [`save_dataset`] or a single
/// JSON clip file.
pub fn load_dataset(path: &Path, format: DataFormat) -> Result<SequenceDataset> {
    let dataset = match format {
        DataFormat::Json => {
            let files = if path.is_dir() { json_files(path)? } else { vec![path.to_path_buf()] };
            let mut skeleton: Option<SkeletonSpec> = None;
            let mut clips = Vec::with_capacity(files.len());
            for f in &files {
                let label = f.display().to_string();
                let (s, clip) = read_json_clip(&fs::read_to_string(f)?, &label)?;
                match &skeleton {
                    Some(prev) if prev.name != s.name => {
                        return Err(Error::Schema(format!(
                            "{label}: skeleton {} differs from {}",
                            s.name, prev.name
                        )))
                    }
                    _ => skeleton = Some(s),
                }
                clips.push(clip);
            }
            let skeleton = skeleton.ok_or_else(|| Error::Parse(format!("{}: no JSON clips found", path.display())))?;
            SequenceDataset { skeleton, clips }
        }
        DataFormat::Bin => {
            let records = read_binary(&mut fs::File::open(path)?)?;
            let side = sidecar_path(path);
            let meta: Option<BinaryMeta> = if side.exists() {
                Some(serde_json::from_slice(&fs::read(side)?)?)
            } else {
                None
            };
            let skeleton = match &meta {
                Some(m) => SkeletonSpec::by_name(&m.skeleton)?,
                None => match records.first().map(|r| r.keypoints.joints) {
                    Some(17) | None => SkeletonSpec::h36m17(),
                    Some(n) => SkeletonSpec::chain(n),
                },
            };
            if let Some(m) = &meta {
                if m.clips.len() != records.len() {
                    return Err(Error::Schema(format!(
                        "{} records but {} metadata entries",
                        records.len(),
                        m.clips.len()
                    )));
                }
            }
            let clips = records
                .into_iter()
                .enumerate()
                .map(|(i, r)| {
                    let m = meta.as_ref().map(|m| &m.clips[i]);
                    let mut keypoints = r.keypoints;
                    keypoints.skeleton = skeleton.name.clone();
                    Clip {
                        subject: m.map_or_else(|| format!("clip{i}"), |m| m.subject.clone()),
                        action: m.map_or_else(|| "unknown".into(), |m| m.action.clone()),
                        camera: m.map_or_else(String::new, |m| m.camera.clone()),
                        fps: m.map_or(50.0, |m| m.fps),
                        image_size: m.map_or([1000.0, 1000.0], |m| m.image_size),
                        keypoints,
                        poses: r.poses,
                    }
                })
                .collect();
            SequenceDataset { skeleton, clips }
        }
    };
    dataset.validate()?;
    Ok(dataset)
}
