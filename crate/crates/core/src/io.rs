//! On-disk formats.
//!
//! Binary formats are little-endian and start with a four-byte magic:
//!
//! | magic  | header                     | payload                                   |
//! |--------|----------------------------|-------------------------------------------|
//! | `TADM` | u32 H, u32 W               | H·W f32 depths, row-major                 |
//! | `TATK` | u32 F, u32 L               | F·L × (f32 x, f32 y, u8 visible), frame-major |
//! | `TATR` | u32 L, u32 F               | L·F × (f32 x, f32 y, u8 valid), trajectory-major |
//! | `TAFV` | u32 F, u32 H, u32 W, u32 C | F·H·W·C f32, frame-major                  |
//! | `TAAW` | u32 C, u32 heads           | wq, wk, wv, wo, each C·C f32 row-major    |
//!
//! Poses are JSON: `{"intrinsics": {fx, fy, cx, cy}, "frames": [{"R": [9], "t": [3]}]}`.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::attn::{AttentionWeights, FeatureVolume, SquareMatrix};
use crate::error::{Error, Result};
use crate::geom::{DepthMap, Extrinsics, Intrinsics};
use crate::traj::{PointTracks, TrajectorySet};

pub const DEPTH_MAGIC: &[u8; 4] = b"TADM";
pub const TRACKS_MAGIC: &[u8; 4] = b"TATK";
pub const TRAJ_MAGIC: &[u8; 4] = b"TATR";
pub const FEATURES_MAGIC: &[u8; 4] = b"TAFV";
pub const WEIGHTS_MAGIC: &[u8; 4] = b"TAAW";

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        let mut r = Self { buf, pos: 0 };
        let found = r.take(4, "magic")?;
        if found != magic {
            return Err(Error::format(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(found),
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.buf.len() - self.pos
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    /// Checks that exactly `expected` bytes of payload remain.
    fn expect_payload(&self, expected: usize) -> Result<()> {
        let actual = self.buf.len() - self.pos;
        if actual != expected {
            return Err(Error::format(
                self.pos as u64,
                format!("payload size mismatch: expected {expected} bytes, found {actual}"),
            ));
        }
        Ok(())
    }

    fn f32(&mut self) -> f32 {
        let b = &self.buf[self.pos..self.pos + 4];
        self.pos += 4;
        f32::from_le_bytes(b.try_into().unwrap())
    }

    fn flag(&mut self) -> Result<bool> {
        let at = self.pos;
        let b = self.buf[self.pos];
        self.pos += 1;
        match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::format(
                at as u64,
                format!("flag byte must be 0 or 1, found {other}"),
            )),
        }
    }
}

fn checked_len(dims: &[usize], record: usize) -> Result<usize> {
    dims.iter()
        .try_fold(record, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(4, format!("dimensions {dims:?} overflow")))
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid(format!("dimension {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn encode_depth(d: &DepthMap) -> Result<Vec<u8>> {
    let mut out = DEPTH_MAGIC.to_vec();
    put_u32(&mut out, d.height())?;
    put_u32(&mut out, d.width())?;
    for v in d.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_depth(buf: &[u8]) -> Result<DepthMap> {
    let mut r = Reader::new(buf, DEPTH_MAGIC)?;
    let h = r.u32("height")?;
    let w = r.u32("width")?;
    r.expect_payload(checked_len(&[h, w], 4)?)?;
    let values = (0..h * w).map(|_| r.f32()).collect();
    DepthMap::new(h, w, values)
}

pub fn encode_tracks(t: &PointTracks) -> Result<Vec<u8>> {
    let mut out = TRACKS_MAGIC.to_vec();
    put_u32(&mut out, t.frames())?;
    put_u32(&mut out, t.count())?;
    for (p, &v) in t.positions().iter().zip(t.visible()) {
        out.extend_from_slice(&p[0].to_le_bytes());
        out.extend_from_slice(&p[1].to_le_bytes());
        out.push(v as u8);
    }
    Ok(out)
}

pub fn decode_tracks(buf: &[u8]) -> Result<PointTracks> {
    let mut r = Reader::new(buf, TRACKS_MAGIC)?;
    let f = r.u32("frame count")?;
    let l = r.u32("track count")?;
    r.expect_payload(checked_len(&[f, l], 9)?)?;
    let mut positions = Vec::with_capacity(f * l);
    let mut visible = Vec::with_capacity(f * l);
    for _ in 0..f * l {
        positions.push([r.f32(), r.f32()]);
        visible.push(r.flag()?);
    }
    PointTracks::new(f, l, positions, visible)
}

pub fn encode_trajectories(ts: &TrajectorySet) -> Result<Vec<u8>> {
    let mut out = TRAJ_MAGIC.to_vec();
    put_u32(&mut out, ts.count())?;
    put_u32(&mut out, ts.frames())?;
    for l in 0..ts.count() {
        for f in 0..ts.frames() {
            let c = ts.coord(l, f);
            out.extend_from_slice(&c[0].to_le_bytes());
            out.extend_from_slice(&c[1].to_le_bytes());
            out.push(ts.is_valid(f, l) as u8);
        }
    }
    Ok(out)
}

pub fn decode_trajectories(buf: &[u8]) -> Result<TrajectorySet> {
    let mut r = Reader::new(buf, TRAJ_MAGIC)?;
    let l = r.u32("trajectory count")?;
    let f = r.u32("frame count")?;
    r.expect_payload(checked_len(&[l, f], 9)?)?;
    let mut coords = Vec::with_capacity(l * f);
    let mut mask = vec![false; l * f];
    for li in 0..l {
        for fi in 0..f {
            coords.push([r.f32(), r.f32()]);
            mask[fi * l + li] = r.flag()?;
        }
    }
    TrajectorySet::new(l, f, coords, mask)
}

pub fn encode_features(z: &FeatureVolume<f32>) -> Result<Vec<u8>> {
    let mut out = FEATURES_MAGIC.to_vec();
    let (f, h, w, c) = z.shape();
    for d in [f, h, w, c] {
        put_u32(&mut out, d)?;
    }
    out.reserve(z.len() * 4);
    for v in z.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(buf: &[u8]) -> Result<FeatureVolume<f32>> {
    let mut r = Reader::new(buf, FEATURES_MAGIC)?;
    let f = r.u32("frames")?;
    let h = r.u32("height")?;
    let w = r.u32("width")?;
    let c = r.u32("channels")?;
    r.expect_payload(checked_len(&[f, h, w, c], 4)?)?;
    let data = (0..f * h * w * c).map(|_| r.f32()).collect();
    FeatureVolume::new(f, h, w, c, data)
}

pub fn encode_weights(w: &AttentionWeights<f32>) -> Result<Vec<u8>> {
    let mut out = WEIGHTS_MAGIC.to_vec();
    put_u32(&mut out, w.channels())?;
    put_u32(&mut out, w.heads())?;
    for m in [&w.wq, &w.wk, &w.wv, &w.wo] {
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_weights(buf: &[u8]) -> Result<AttentionWeights<f32>> {
    let mut r = Reader::new(buf, WEIGHTS_MAGIC)?;
    let c = r.u32("channels")?;
    let heads = r.u32("heads")?;
    r.expect_payload(checked_len(&[c, c, 4], 4)?)?;
    let mut mat = || SquareMatrix::new(c, (0..c * c).map(|_| r.f32()).collect());
    let (wq, wk, wv, wo) = (mat()?, mat()?, mat()?, mat()?);
    AttentionWeights::new(wq, wk, wv, wo, heads)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IntrinsicsJson {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FrameJson {
    #[serde(rename = "R")]
    r: [f64; 9],
    t: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PoseFileJson {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    intrinsics: Option<IntrinsicsJson>,
    frames: Vec<FrameJson>,
}

/// Camera intrinsics (optional for metrics inputs) and per-frame poses.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseFile {
    pub intrinsics: Option<Intrinsics>,
    pub frames: Vec<Extrinsics>,
}

impl PoseFile {
    pub fn require_intrinsics(&self) -> Result<Intrinsics> {
        self.intrinsics
            .ok_or_else(|| Error::invalid("pose file has no intrinsics"))
    }
}

pub fn parse_poses(text: &str) -> Result<PoseFile> {
    let raw: PoseFileJson = serde_json::from_str(text)?;
    let intrinsics = raw
        .intrinsics
        .map(|k| Intrinsics::new(k.fx, k.fy, k.cx, k.cy))
        .transpose()?;
    let frames = raw
        .frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            Extrinsics::new(Matrix3::from_row_slice(&f.r), Vector3::from_row_slice(&f.t))
                .map_err(|e| Error::invalid(format!("frame {i}: {e}")))
        })
        .collect::<Result<_>>()?;
    Ok(PoseFile { intrinsics, frames })
}

pub fn poses_to_json(p: &PoseFile) -> Result<String> {
    let raw = PoseFileJson {
        intrinsics: p.intrinsics.map(|k| IntrinsicsJson {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
        }),
        frames: p
            .frames
            .iter()
            .map(|e| {
                let r = e.rotation();
                FrameJson {
                    r: [
                        r[(0, 0)],
                        r[(0, 1)],
                        r[(0, 2)],
                        r[(1, 0)],
                        r[(1, 1)],
                        r[(1, 2)],
                        r[(2, 0)],
                        r[(2, 1)],
                        r[(2, 2)],
                    ],
                    t: [e.translation().x, e.translation().y, e.translation().z],
                }
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&raw)?)
}

pub fn read_poses(path: &Path) -> Result<PoseFile> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_poses(&text)
}

pub fn write_poses(path: &Path, p: &PoseFile) -> Result<()> {
    write_bytes(path, poses_to_json(p)?.as_bytes())
}

macro_rules! file_pair {
    ($read:ident, $write:ident, $decode:ident, $encode:ident, $ty:ty) => {
        pub fn $read(path: &Path) -> Result<$ty> {
            $decode(&read_bytes(path)?)
        }

        pub fn $write(path: &Path, value: &$ty) -> Result<()> {
            write_bytes(path, &$encode(value)?)
        }
    };
}

file_pair!(
    read_depth,
    write_depth,
    decode_depth,
    encode_depth,
    DepthMap
);
file_pair!(
    read_tracks,
    write_tracks,
    decode_tracks,
    encode_tracks,
    PointTracks
);
file_pair!(
    read_trajectories,
    write_trajectories,
    decode_trajectories,
    encode_trajectories,
    TrajectorySet
);
file_pair!(
    read_features,
    write_features,
    decode_features,
    encode_features,
    FeatureVolume<f32>
);
file_pair!(
    read_weights,
    write_weights,
    decode_weights,
    encode_weights,
    AttentionWeights<f32>
);

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn truncated_depth_names_sizes() {
        let d = DepthMap::constant(3, 4, 2.0).unwrap();
        let mut bytes = encode_depth(&d).unwrap();
        bytes.truncate(bytes.len() - 5);
        let err = decode_depth(&bytes).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("expected 48 bytes") && msg.contains("found 43"),
            "{msg}"
        );
        assert!(matches!(err, Error::Format { offset: 12, .. }));
    }

    #[test]
    fn wrong_magic_fails_fast() {
        let z = FeatureVolume::<f32>::zeros(1, 1, 1, 1);
        let bytes = encode_features(&z).unwrap();
        assert!(matches!(
            decode_depth(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
        assert!(matches!(
            decode_features(&bytes[..6]),
            Err(Error::Format { offset: 4, .. })
        ));
    }

    #[test]
    fn bad_flag_byte_reports_offset() {
        let ts = TrajectorySet::identity_grid(1, 1, 1);
        let mut bytes = encode_trajectories(&ts).unwrap();
        let last = bytes.len() - 1;
        bytes[last] = 7;
        assert!(
            matches!(decode_trajectories(&bytes), Err(Error::Format { offset, .. }) if offset == last as u64)
        );
    }

    #[test]
    fn pose_json_layout() {
        let text = r#"{"intrinsics": {"fx": 260, "fy": 260, "cx": 32, "cy": 18},
            "frames": [{"R": [1,0,0, 0,1,0, 0,0,1], "t": [0.5, 0, 0]}]}"#;
        let p = parse_poses(text).unwrap();
        assert_eq!(p.intrinsics.unwrap().cx, 32.0);
        assert_eq!(p.frames[0].translation().x, 0.5);
        let back = parse_poses(&poses_to_json(&p).unwrap()).unwrap();
        assert_eq!(back, p);
        let bad = r#"{"frames": [{"R": [1,0,0, 0,2,0, 0,0,1], "t": [0, 0, 0]}]}"#;
        assert!(matches!(parse_poses(bad), Err(Error::InvalidArgument(_))));
    }

    fn finite_f32() -> impl Strategy<Value = f32> {
        -1e6f32..1e6f32
    }

    proptest! {
        #[test]
        fn features_round_trip(dims in (1usize..3, 1usize..4, 1usize..4, 1usize..5), seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (f, h, w, c) = dims;
            let data = (0..f * h * w * c).map(|_| rng.gen_range(-10.0f32..10.0)).collect();
            let z = FeatureVolume::new(f, h, w, c, data).unwrap();
            let bytes = encode_features(&z).unwrap();
            let back = decode_features(&bytes).unwrap();
            prop_assert!(back.data().iter().zip(z.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert_eq!(encode_features(&back).unwrap(), bytes);
        }

        #[test]
        fn trajectories_round_trip(
            entries in proptest::collection::vec((finite_f32(), finite_f32(), any::<bool>()), 1..40),
            frames in 1usize..4,
        ) {
            let count = entries.len() / frames;
            prop_assume!(count > 0);
            let coords = entries[..count * frames].iter().map(|e| [e.0, e.1]).collect();
            let mask = entries[..count * frames].iter().map(|e| e.2).collect();
            let ts = TrajectorySet::new(count, frames, coords, mask).unwrap();
            let bytes = encode_trajectories(&ts).unwrap();
            prop_assert_eq!(decode_trajectories(&bytes).unwrap(), ts);
        }
    }

    #[test]
    fn small_formats_round_trip() {
        let tracks = PointTracks::new(
            2,
            2,
            vec![[0.5, 1.5], [2.0, 3.0], [f32::NAN, 0.0], [1.0, 1.0]],
            vec![true, true, false, true],
        )
        .unwrap();
        let bytes = encode_tracks(&tracks).unwrap();
        let back = decode_tracks(&bytes).unwrap();
        assert_eq!(encode_tracks(&back).unwrap(), bytes);

        let d = DepthMap::new(2, 2, vec![1.0, 2.5, 3.25, 0.125]).unwrap();
        assert_eq!(decode_depth(&encode_depth(&d).unwrap()).unwrap(), d);

        let w = AttentionWeights::new(
            SquareMatrix::new(2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            SquareMatrix::identity(2),
            SquareMatrix::zeros(2),
            SquareMatrix::new(2, vec![-1.0, 0.5, 0.25, 8.0]).unwrap(),
            2,
        )
        .unwrap();
        assert_eq!(decode_weights(&encode_weights(&w).unwrap()).unwrap(), w);
    }
}
