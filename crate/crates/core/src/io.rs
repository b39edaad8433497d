//! On-disk formats: dataset directories, checkpoints and image files.
//!
//! Dataset layout:
//!
//! ```text
//! manifest.json
//! rgb/00000.png      8-bit RGB
//! depth/00000.f32    little-endian f32, row-major, meters
//! mask/00000.pgm     8-bit instance ids, 0 = static
//! tracks.bin         "MSDT", u32 version, u32 N, u32 T, N×T × {f32 x,y,z, f32 conf, u8 visible, 3 pad}
//! eval/{rgb,depth,mask,covis}/00000.*
//! ```
//!
//! Checkpoints are `"MSGC"`, u32 version, then sections of
//! `{u32 tag, u64 byte length, payload}`, all little-endian.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{ImageEncoder, ImageFormat};
use nalgebra::{Matrix3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::dataset::{CameraMatrix, EvalViews, Intrinsics, RawTracks, SceneCameras, SceneDataset, ViewSet};
use crate::error::{Error, Result};
use crate::gaussians::CanonicalGaussianField;
use crate::geom::{Quat, Se3, Vec3};
use crate::msdyn::{BlendWeights, LevelWeights, MSDynamics, MotionLevel, LEVELS};

pub const DATASET_VERSION: u32 = 1;
pub const TRACKS_MAGIC: &[u8; 4] = b"MSDT";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MSGC";
pub const CHECKPOINT_VERSION: u32 = 1;
const TRACK_RECORD: usize = 20;

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn encode_png(rgb: &[u8], width: usize, height: usize) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(rgb, width as u32, height as u32, image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::Config(format!("png encoding failed: {e}")))?;
    Ok(out)
}

pub fn write_png(path: &Path, rgb: &[u8], width: usize, height: usize) -> Result<()> {
    atomic_write(path, &encode_png(rgb, width, height)?)
}

/// Decodes an 8-bit RGB PNG and checks its size.
pub fn read_png(path: &Path, width: usize, height: usize) -> Result<Vec<u8>> {
    let bytes = read(path)?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|e| Error::format(path, None, format!("invalid PNG: {e}")))?
        .to_rgb8();
    if img.width() as usize != width || img.height() as usize != height {
        return Err(Error::format(
            path,
            None,
            format!("image is {}x{}, expected {width}x{height}", img.width(), img.height()),
        ));
    }
    Ok(img.into_raw())
}

pub fn encode_pgm(pixels: &[u8], width: usize, height: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses a binary 8-bit PGM of the expected size.
pub fn decode_pgm(path: &Path, bytes: &[u8], width: usize, height: usize) -> Result<Vec<u8>> {
    let mut pos = 0usize;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, Some(pos as u64), "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(Error::format(path, Some(0), format!("expected magic P5, found {}", fields[0])));
    }
    let dims: Vec<usize> = fields[1..].iter().map(|f| f.parse().unwrap_or(0)).collect();
    if dims != [width, height, 255] {
        return Err(Error::format(
            path,
            None,
            format!("PGM header {}x{} max {}, expected {width}x{height} max 255", dims[0], dims[1], dims[2]),
        ));
    }
    let data = bytes.get(pos..).unwrap_or_default();
    if data.len() != width * height {
        return Err(Error::format(
            path,
            Some(pos as u64),
            format!("expected {} pixel bytes, found {}", width * height, data.len()),
        ));
    }
    Ok(data.to_vec())
}

fn encode_f32s(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn decode_depth(path: &Path, bytes: &[u8], pixels: usize) -> Result<Vec<f32>> {
    if bytes.len() != pixels * 4 {
        return Err(Error::format(
            path,
            None,
            format!("expected {} bytes, found {}", pixels * 4, bytes.len()),
        ));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    frames: usize,
    width: usize,
    height: usize,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    canonical_frame: usize,
    cameras: Vec<CameraMatrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eval_cameras: Option<Vec<CameraMatrix>>,
}

fn frame_name(t: usize, ext: &str) -> String {
    format!("{t:05}.{ext}")
}

pub fn encode_tracks(tracks: &RawTracks) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + tracks.positions.len() * TRACK_RECORD);
    out.extend_from_slice(TRACKS_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(tracks.count as u32).to_le_bytes());
    out.extend_from_slice(&(tracks.frames as u32).to_le_bytes());
    for i in 0..tracks.positions.len() {
        for v in tracks.positions[i] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&tracks.confidence[i].to_le_bytes());
        out.extend_from_slice(&[tracks.visible[i] as u8, 0, 0, 0]);
    }
    out
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn check_magic(path: &Path, bytes: &[u8], magic: &[u8; 4]) -> Result<()> {
    if bytes.len() < 4 {
        return Err(Error::format(path, Some(0), format!("file too short for magic {:?}", String::from_utf8_lossy(magic))));
    }
    let found = &bytes[..4];
    if found == magic {
        return Ok(());
    }
    let mut swapped = *magic;
    swapped.reverse();
    let what = if found == swapped { " (byte-swapped: wrong endianness)" } else { "" };
    Err(Error::format(
        path,
        Some(0),
        format!(
            "expected magic {:?}, found {:?}{what}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(found)
        ),
    ))
}

pub fn decode_tracks(path: &Path, bytes: &[u8]) -> Result<RawTracks> {
    check_magic(path, bytes, TRACKS_MAGIC)?;
    if bytes.len() < 16 {
        return Err(Error::format(path, Some(bytes.len() as u64), "expected a 16-byte header"));
    }
    let version = u32_at(bytes, 4);
    if version != DATASET_VERSION {
        return Err(Error::Version {
            file: path.into(),
            expected: DATASET_VERSION,
            found: version,
        });
    }
    let count = u32_at(bytes, 8) as usize;
    let frames = u32_at(bytes, 12) as usize;
    let expected = 16 + count * frames * TRACK_RECORD;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            Some(bytes.len() as u64),
            format!("expected {expected} bytes for {count} tracks × {frames} frames, found {}", bytes.len()),
        ));
    }
    let mut tracks = RawTracks {
        count,
        frames,
        ..Default::default()
    };
    for rec in bytes[16..].chunks_exact(TRACK_RECORD) {
        let f = |i: usize| f32::from_le_bytes([rec[4 * i], rec[4 * i + 1], rec[4 * i + 2], rec[4 * i + 3]]);
        tracks.positions.push([f(0), f(1), f(2)]);
        tracks.confidence.push(f(3));
        tracks.visible.push(rec[16] != 0);
    }
    Ok(tracks)
}

fn save_views(dir: &Path, views: &ViewSet, intr: &Intrinsics, covis: Option<&[Vec<u8>]>) -> Result<()> {
    for t in 0..views.len() {
        write_png(&dir.join("rgb").join(frame_name(t, "png")), &views.rgb[t], intr.width, intr.height)?;
        atomic_write(&dir.join("depth").join(frame_name(t, "f32")), &encode_f32s(&views.depth[t]))?;
        atomic_write(
            &dir.join("mask").join(frame_name(t, "pgm")),
            &encode_pgm(&views.masks[t], intr.width, intr.height),
        )?;
        if let Some(c) = covis {
            atomic_write(&dir.join("covis").join(frame_name(t, "pgm")), &encode_pgm(&c[t], intr.width, intr.height))?;
        }
    }
    Ok(())
}

pub fn save_dataset(dataset: &SceneDataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    let intr = &dataset.intrinsics;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_views(dir, &dataset.train, intr, None)?;
    atomic_write(&dir.join("tracks.bin"), &encode_tracks(&dataset.tracks))?;
    if let Some(e) = &dataset.eval {
        save_views(&dir.join("eval"), &e.views, intr, Some(&e.covis))?;
    }
    let manifest = Manifest {
        format_version: DATASET_VERSION,
        frames: dataset.frames(),
        width: intr.width,
        height: intr.height,
        fx: intr.fx,
        fy: intr.fy,
        cx: intr.cx,
        cy: intr.cy,
        canonical_frame: dataset.canonical_frame,
        cameras: dataset.train.cameras.clone(),
        eval_cameras: dataset.eval.as_ref().map(|e| e.views.cameras.clone()),
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    atomic_write(&dir.join("manifest.json"), &json)
}

fn count_files(dir: &Path, ext: &str) -> Result<usize> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut n = 0;
    for e in entries {
        let e = e.map_err(|e| Error::io(dir, e))?;
        if e.path().extension().is_some_and(|x| x == ext) {
            n += 1;
        }
    }
    Ok(n)
}

fn load_views(dir: &Path, cameras: &[CameraMatrix], intr: &Intrinsics, with_covis: bool) -> Result<(ViewSet, Vec<Vec<u8>>)> {
    let t = cameras.len();
    let mut streams = vec![("rgb", "png"), ("depth", "f32"), ("mask", "pgm")];
    if with_covis {
        streams.push(("covis", "pgm"));
    }
    for (sub, ext) in &streams {
        let d = dir.join(sub);
        let found = count_files(&d, ext)?;
        if found != t {
            return Err(Error::format(d, None, format!("manifest declares {t} frames, found {found} .{ext} files")));
        }
    }
    let mut views = ViewSet {
        cameras: cameras.to_vec(),
        ..Default::default()
    };
    let mut covis = Vec::new();
    for i in 0..t {
        views.rgb.push(read_png(&dir.join("rgb").join(frame_name(i, "png")), intr.width, intr.height)?);
        let dp = dir.join("depth").join(frame_name(i, "f32"));
        views.depth.push(decode_depth(&dp, &read(&dp)?, intr.pixels())?);
        let mp = dir.join("mask").join(frame_name(i, "pgm"));
        views.masks.push(decode_pgm(&mp, &read(&mp)?, intr.width, intr.height)?);
        if with_covis {
            let cp = dir.join("covis").join(frame_name(i, "pgm"));
            covis.push(decode_pgm(&cp, &read(&cp)?, intr.width, intr.height)?);
        }
    }
    Ok((views, covis))
}

pub fn load_dataset(dir: &Path) -> Result<SceneDataset> {
    let mpath = dir.join("manifest.json");
    if !mpath.is_file() {
        return Err(Error::MissingManifest { dir: dir.into() });
    }
    let raw: serde_json::Value =
        serde_json::from_slice(&read(&mpath)?).map_err(|e| Error::format(&mpath, None, format!("invalid JSON: {e}")))?;
    let version = raw.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != DATASET_VERSION {
        return Err(Error::Version {
            file: mpath,
            expected: DATASET_VERSION,
            found: version,
        });
    }
    let m: Manifest = serde_json::from_value(raw).map_err(|e| Error::format(&mpath, None, format!("invalid manifest: {e}")))?;
    if m.cameras.len() != m.frames {
        return Err(Error::format(
            &mpath,
            None,
            format!("manifest declares {} frames but {} cameras", m.frames, m.cameras.len()),
        ));
    }
    let intr = Intrinsics {
        width: m.width,
        height: m.height,
        fx: m.fx,
        fy: m.fy,
        cx: m.cx,
        cy: m.cy,
    };
    let (train, _) = load_views(dir, &m.cameras, &intr, false)?;
    let tpath = dir.join("tracks.bin");
    let tracks = decode_tracks(&tpath, &read(&tpath)?)?;
    if tracks.frames != m.frames {
        return Err(Error::format(
            &tpath,
            Some(12),
            format!("tracks cover {} frames, manifest declares {}", tracks.frames, m.frames),
        ));
    }
    let eval = match &m.eval_cameras {
        Some(cams) => {
            let (views, covis) = load_views(&dir.join("eval"), cams, &intr, true)?;
            Some(EvalViews { views, covis })
        }
        None => None,
    };
    let ds = SceneDataset {
        intrinsics: intr,
        canonical_frame: m.canonical_frame,
        train,
        tracks,
        eval,
    };
    ds.validate()?;
    Ok(ds)
}

/// A trained model in its stored precision. Floats are 32-bit exactly as
/// written to disk, so saving and loading reproduces the struct bit for bit.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub means: Vec<[f32; 3]>,
    pub log_scales: Vec<[f32; 3]>,
    /// `w, x, y, z`.
    pub rotations: Vec<[f32; 4]>,
    pub colors: Vec<[f32; 3]>,
    pub opacity_logits: Vec<f32>,
    pub is_dynamic: Vec<bool>,
    pub frames: usize,
    pub canonical_frame: usize,
    pub levels: Vec<CheckpointLevel>,
    pub scene: SceneCameras,
    /// Free-form configuration echo.
    pub config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointLevel {
    /// `[t][k]`, row-major 3×4 `[R | t]`.
    pub patterns: Vec<Vec<[f32; 12]>>,
    pub parents: Vec<i32>,
    pub instance_of: Vec<u32>,
    /// Per Gaussian, up to `max_candidates` pattern indices.
    pub candidates: Vec<Vec<u32>>,
    pub logits: Vec<Vec<f32>>,
}

fn pattern_to_f32(p: &Se3) -> [f32; 12] {
    let m = p.to_matrix();
    let mut out = [0f32; 12];
    for r in 0..3 {
        for c in 0..4 {
            out[r * 4 + c] = m[(r, c)] as f32;
        }
    }
    out
}

fn pattern_from_f32(a: &[f32; 12]) -> Se3 {
    let r = Matrix3::from_fn(|i, j| a[i * 4 + j] as f64);
    let t = Vector3::new(a[3] as f64, a[7] as f64, a[11] as f64);
    Se3::new(UnitQuaternion::from_matrix(&r), t)
}

fn v3(a: &[f32; 3]) -> Vec3 {
    Vec3::new(a[0] as f64, a[1] as f64, a[2] as f64)
}

fn f3(v: &Vec3) -> [f32; 3] {
    [v.x as f32, v.y as f32, v.z as f32]
}

impl Checkpoint {
    pub fn from_state(field: &CanonicalGaussianField, dyn_: &MSDynamics, scene: SceneCameras, config: serde_json::Value) -> Self {
        let levels = (0..LEVELS)
            .map(|l| {
                let lvl = &dyn_.levels[l];
                let lw = &dyn_.weights.levels[l];
                CheckpointLevel {
                    patterns: (0..dyn_.frames).map(|t| lvl.patterns.iter().map(|p| pattern_to_f32(&p[t])).collect()).collect(),
                    parents: lvl.parent_of.iter().map(|p| p.map_or(-1, |v| v as i32)).collect(),
                    instance_of: lvl.instance_of.clone(),
                    candidates: lw.candidates.iter().map(|c| c.iter().map(|k| *k as u32).collect()).collect(),
                    logits: lw.logits.iter().map(|z| z.iter().map(|v| *v as f32).collect()).collect(),
                }
            })
            .collect();
        Self {
            means: field.means.iter().map(f3).collect(),
            log_scales: field.log_scales.iter().map(f3).collect(),
            rotations: field
                .rotations
                .iter()
                .map(|q| [q.w as f32, q.i as f32, q.j as f32, q.k as f32])
                .collect(),
            colors: field.colors.iter().map(f3).collect(),
            opacity_logits: field.opacity_logits.iter().map(|v| *v as f32).collect(),
            is_dynamic: field.is_dynamic.clone(),
            frames: dyn_.frames,
            canonical_frame: dyn_.canonical_frame,
            levels,
            scene,
            config,
        }
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn field(&self) -> CanonicalGaussianField {
        CanonicalGaussianField {
            means: self.means.iter().map(v3).collect(),
            log_scales: self.log_scales.iter().map(v3).collect(),
            rotations: self
                .rotations
                .iter()
                .map(|q| {
                    Unit::new_unchecked(nalgebra::Quaternion::new(q[0] as f64, q[1] as f64, q[2] as f64, q[3] as f64))
                })
                .collect::<Vec<Quat>>(),
            colors: self.colors.iter().map(v3).collect(),
            opacity_logits: self.opacity_logits.iter().map(|v| *v as f64).collect(),
            is_dynamic: self.is_dynamic.clone(),
        }
    }

    pub fn dynamics(&self) -> MSDynamics {
        let mut levels: [MotionLevel; LEVELS] = Default::default();
        let mut weights = BlendWeights::default();
        for (l, cl) in self.levels.iter().enumerate() {
            let k = cl.parents.len();
            levels[l] = MotionLevel {
                level: l as u8 + 1,
                patterns: (0..k).map(|i| (0..self.frames).map(|t| pattern_from_f32(&cl.patterns[t][i])).collect()).collect(),
                parent_of: cl.parents.iter().map(|p| (*p >= 0).then_some(*p as usize)).collect(),
                members: vec![Vec::new(); k],
                instance_of: cl.instance_of.clone(),
            };
            weights.levels[l] = LevelWeights {
                candidates: cl.candidates.iter().map(|c| c.iter().map(|v| *v as usize).collect()).collect(),
                logits: cl.logits.iter().map(|z| z.iter().map(|v| *v as f64).collect()).collect(),
            };
        }
        MSDynamics {
            levels,
            weights,
            canonical_frame: self.canonical_frame,
            frames: self.frames,
        }
    }
}

mod tag {
    pub const FIELD: u32 = 1;
    pub const DYNAMICS: u32 = 2;
    pub const LEVEL: u32 = 3;
    pub const WEIGHTS: u32 = 4;
    pub const SCENE: u32 = 5;
    pub const CONFIG: u32 = 6;
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.f32(*x);
        }
    }
}

fn section(out: &mut Vec<u8>, tag: u32, payload: &[u8]) {
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

/// Maximum number of candidates per Gaussian at any level; shorter lists
/// are padded with index −1.
fn max_candidates(level: &CheckpointLevel) -> usize {
    level.candidates.iter().map(|c| c.len()).max().unwrap_or(0)
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let n = ck.len();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());

    let mut w = Writer::default();
    w.u32(n as u32);
    for a in [&ck.means, &ck.log_scales, &ck.colors] {
        for v in a.iter() {
            w.f32s(v);
        }
    }
    for q in &ck.rotations {
        w.f32s(q);
    }
    w.f32s(&ck.opacity_logits);
    w.0.extend(ck.is_dynamic.iter().map(|d| *d as u8));
    section(&mut out, tag::FIELD, &w.0);

    let mut w = Writer::default();
    w.u32(ck.levels.len() as u32);
    w.u32(ck.frames as u32);
    w.u32(ck.canonical_frame as u32);
    section(&mut out, tag::DYNAMICS, &w.0);

    for (l, lvl) in ck.levels.iter().enumerate() {
        let k = lvl.parents.len();
        let mut w = Writer::default();
        w.u32(l as u32 + 1);
        w.u32(k as u32);
        for t in 0..ck.frames {
            for p in &lvl.patterns[t] {
                w.f32s(p);
            }
        }
        for p in &lvl.parents {
            w.i32(*p);
        }
        for i in &lvl.instance_of {
            w.u32(*i);
        }
        section(&mut out, tag::LEVEL, &w.0);

        let b = max_candidates(lvl);
        let mut w = Writer::default();
        w.u32(l as u32 + 1);
        w.u32(b as u32);
        for c in &lvl.candidates {
            for s in 0..b {
                w.i32(c.get(s).map_or(-1, |v| *v as i32));
            }
        }
        for z in &lvl.logits {
            for s in 0..b {
                w.f32(z.get(s).copied().unwrap_or(0.0));
            }
        }
        section(&mut out, tag::WEIGHTS, &w.0);
    }

    let scene = serde_json::to_vec(&ck.scene).map_err(|e| Error::Config(e.to_string()))?;
    section(&mut out, tag::SCENE, &scene);
    let config = serde_json::to_vec(&ck.config).map_err(|e| Error::Config(e.to_string()))?;
    section(&mut out, tag::CONFIG, &config);
    Ok(out)
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    atomic_write(path, &encode_checkpoint(ck)?)
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.path,
                Some((self.base + self.pos) as u64),
                format!("section ends early: need {n} more bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
    fn i32(&mut self) -> Result<i32> {
        Ok(self.u32()? as i32)
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_bits(self.u32()?))
    }
    fn arr<const N: usize>(&mut self) -> Result<[f32; N]> {
        let mut a = [0f32; N];
        for v in a.iter_mut() {
            *v = self.f32()?;
        }
        Ok(a)
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.path,
                Some((self.base + self.pos) as u64),
                format!("{} unexpected trailing bytes in section", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    check_magic(path, bytes, CHECKPOINT_MAGIC)?;
    if bytes.len() < 8 {
        return Err(Error::format(path, Some(4), "missing version"));
    }
    let version = u32_at(bytes, 4);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            file: path.into(),
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let mut sections: Vec<(u32, Reader)> = Vec::new();
    let mut pos = 8usize;
    while pos < bytes.len() {
        if pos + 12 > bytes.len() {
            return Err(Error::format(path, Some(pos as u64), "truncated section header"));
        }
        let t = u32_at(bytes, pos);
        let len = u64::from_le_bytes(bytes[pos + 4..pos + 12].try_into().expect("8 bytes")) as usize;
        let start = pos + 12;
        if start.checked_add(len).is_none_or(|end| end > bytes.len()) {
            return Err(Error::format(
                path,
                Some(pos as u64),
                format!("section {t} declares {len} bytes, only {} remain", bytes.len() - start),
            ));
        }
        sections.push((
            t,
            Reader {
                path,
                bytes: &bytes[start..start + len],
                pos: 0,
                base: start,
            },
        ));
        pos = start + len;
    }
    let mut next = |want: u32| -> Result<Reader> {
        if sections.is_empty() {
            return Err(Error::format(path, Some(bytes.len() as u64), format!("missing section {want}")));
        }
        let (t, r) = sections.remove(0);
        if t != want {
            return Err(Error::format(path, Some(r.base as u64 - 12), format!("expected section {want}, found {t}")));
        }
        Ok(r)
    };

    let mut r = next(tag::FIELD)?;
    let n = r.u32()? as usize;
    let read3 = |r: &mut Reader| (0..n).map(|_| r.arr::<3>()).collect::<Result<Vec<_>>>();
    let means = read3(&mut r)?;
    let log_scales = read3(&mut r)?;
    let colors = read3(&mut r)?;
    let rotations = (0..n).map(|_| r.arr::<4>()).collect::<Result<Vec<_>>>()?;
    let opacity_logits = (0..n).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
    let is_dynamic = r.take(n)?.iter().map(|b| *b != 0).collect();
    r.finish()?;

    let mut r = next(tag::DYNAMICS)?;
    let level_count = r.u32()? as usize;
    let frames = r.u32()? as usize;
    let canonical_frame = r.u32()? as usize;
    r.finish()?;
    if level_count != LEVELS {
        return Err(Error::format(
            path,
            Some(r.base as u64),
            format!("checkpoint has {level_count} levels; this format fixes {LEVELS}"),
        ));
    }

    let mut levels = Vec::with_capacity(LEVELS);
    for l in 0..LEVELS {
        let mut r = next(tag::LEVEL)?;
        let idx = r.u32()?;
        if idx as usize != l + 1 {
            return Err(Error::format(path, Some(r.base as u64), format!("expected level {}, found {idx}", l + 1)));
        }
        let k = r.u32()? as usize;
        let patterns = (0..frames)
            .map(|_| (0..k).map(|_| r.arr::<12>()).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let parents = (0..k).map(|_| r.i32()).collect::<Result<Vec<_>>>()?;
        let instance_of = (0..k).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        r.finish()?;

        let mut r = next(tag::WEIGHTS)?;
        let _ = r.u32()?;
        let b = r.u32()? as usize;
        let mut candidates = Vec::with_capacity(n);
        for _ in 0..n {
            let row = (0..b).map(|_| r.i32()).collect::<Result<Vec<_>>>()?;
            candidates.push(row.into_iter().filter(|c| *c >= 0).map(|c| c as u32).collect::<Vec<_>>());
        }
        let mut logits = Vec::with_capacity(n);
        for c in &candidates {
            let row = (0..b).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
            logits.push(row[..c.len()].to_vec());
        }
        r.finish()?;
        if candidates.iter().flatten().any(|c| *c as usize >= k) || parents.iter().any(|p| *p >= 0 && l == 0) {
            return Err(Error::format(path, Some(r.base as u64), format!("level {} references patterns out of range", l + 1)));
        }
        levels.push(CheckpointLevel {
            patterns,
            parents,
            instance_of,
            candidates,
            logits,
        });
    }
    let r = next(tag::SCENE)?;
    let scene: SceneCameras =
        serde_json::from_slice(r.bytes).map_err(|e| Error::format(path, Some(r.base as u64), format!("invalid camera block: {e}")))?;
    let r = next(tag::CONFIG)?;
    let config =
        serde_json::from_slice(r.bytes).map_err(|e| Error::format(path, Some(r.base as u64), format!("invalid config block: {e}")))?;
    if let Some((t, r)) = sections.first() {
        return Err(Error::format(path, Some(r.base as u64 - 12), format!("unexpected section {t}")));
    }
    Ok(Checkpoint {
        means,
        log_scales,
        rotations,
        colors,
        opacity_logits,
        is_dynamic,
        frames,
        canonical_frame,
        levels,
        scene,
        config,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(path, &read(path)?)
}

/// Path of frame `t` of a stream inside a dataset directory.
pub fn stream_path(dir: &Path, stream: &str, t: usize) -> PathBuf {
    let ext = match stream {
        "rgb" => "png",
        "depth" => "f32",
        _ => "pgm",
    };
    dir.join(stream).join(frame_name(t, ext))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_and_errors() {
        let px: Vec<u8> = (0..12).collect();
        let enc = encode_pgm(&px, 4, 3);
        assert_eq!(decode_pgm(Path::new("m.pgm"), &enc, 4, 3).unwrap(), px);
        let with_comment = [b"P5\n# made by hand\n4 3\n255\n".as_slice(), &px].concat();
        assert_eq!(decode_pgm(Path::new("m.pgm"), &with_comment, 4, 3).unwrap(), px);
        assert!(decode_pgm(Path::new("m.pgm"), &enc[..enc.len() - 1], 4, 3).is_err());
        assert!(decode_pgm(Path::new("m.pgm"), &enc, 3, 4).is_err());
    }

    #[test]
    fn tracks_round_trip_and_faults() {
        let tr = RawTracks {
            count: 2,
            frames: 2,
            positions: vec![[0.1, 0.2, 0.3], [1.0, -1.0, 2.5], [f32::MIN_POSITIVE, 0.0, -0.0], [3.0, 4.0, 5.0]],
            confidence: vec![1.0, 0.5, 0.0, 0.25],
            visible: vec![true, true, false, true],
        };
        let bytes = encode_tracks(&tr);
        let p = Path::new("tracks.bin");
        assert_eq!(decode_tracks(p, &bytes).unwrap(), tr);
        let err = decode_tracks(p, &bytes[..bytes.len() - 3]).unwrap_err().to_string();
        assert!(err.contains("tracks.bin") && err.contains(&format!("expected {} bytes", bytes.len())), "{err}");
        let mut swapped = bytes.clone();
        swapped[..4].copy_from_slice(b"TDSM");
        assert!(decode_tracks(p, &swapped).unwrap_err().to_string().contains("endianness"));
        let mut v2 = bytes;
        v2[4] = 2;
        assert!(matches!(decode_tracks(p, &v2), Err(Error::Version { found: 2, .. })));
    }

    #[test]
    fn depth_length_is_checked() {
        let d = [1.5f32, 2.0, 0.0];
        let bytes = encode_f32s(&d);
        assert_eq!(decode_depth(Path::new("d"), &bytes, 3).unwrap(), d);
        assert!(decode_depth(Path::new("d"), &bytes, 4).is_err());
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rgb: Vec<u8> = (0..5 * 4 * 3).map(|v| (v * 7 % 256) as u8).collect();
        let p = dir.path().join("x.png");
        write_png(&p, &rgb, 5, 4).unwrap();
        assert_eq!(read_png(&p, 5, 4).unwrap(), rgb);
        assert!(read_png(&p, 4, 5).is_err());
    }
}
