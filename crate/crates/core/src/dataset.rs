//! In-memory scene dataset.
//!
//! Streams are kept in their on-disk types (8-bit color and masks, 32-bit
//! depth and tracks) so that saving and loading is bit-exact; accessors
//! convert to 64-bit compute types.

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Se3, Vec3};
use crate::msdyn::TrackSet;
use crate::render::Camera;

/// Row-major 4×4 world-to-camera matrix.
pub type CameraMatrix = [f64; 16];

pub fn camera_matrix(pose: &Se3) -> CameraMatrix {
    let m = pose.to_matrix();
    let mut out = [0.0; 16];
    for r in 0..4 {
        for c in 0..4 {
            out[r * 4 + c] = m[(r, c)];
        }
    }
    out
}

pub fn pose_from_matrix(m: &CameraMatrix) -> Se3 {
    Se3::from_matrix(&Matrix4::from_row_slice(m))
}

/// Pinhole intrinsics shared by every view of a scene.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn camera(&self, world_to_camera: &CameraMatrix) -> Result<Camera> {
        Camera::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height, pose_from_matrix(world_to_camera))
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }
}

/// Camera set stored alongside a trained model, enough to render without
/// the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneCameras {
    pub intrinsics: Intrinsics,
    pub cameras: Vec<CameraMatrix>,
    pub eval_cameras: Vec<CameraMatrix>,
}

/// One stream of posed views.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ViewSet {
    pub cameras: Vec<CameraMatrix>,
    /// Interleaved 8-bit RGB, row-major.
    pub rgb: Vec<Vec<u8>>,
    /// Meters, row-major.
    pub depth: Vec<Vec<f32>>,
    /// Instance ids, 0 = static background.
    pub masks: Vec<Vec<u8>>,
}

impl ViewSet {
    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalViews {
    pub views: ViewSet,
    /// 1 where the pixel's content was seen by some training view.
    pub covis: Vec<Vec<u8>>,
}

/// Track records exactly as stored, indexed `[track][frame]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawTracks {
    pub count: usize,
    pub frames: usize,
    pub positions: Vec<[f32; 3]>,
    pub confidence: Vec<f32>,
    pub visible: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    pub intrinsics: Intrinsics,
    pub canonical_frame: usize,
    pub train: ViewSet,
    pub tracks: RawTracks,
    pub eval: Option<EvalViews>,
}

pub fn rgb_to_f64(rgb: &[u8]) -> Vec<Vec3> {
    rgb.chunks_exact(3)
        .map(|c| Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64) / 255.0)
        .collect()
}

pub fn rgb_from_f64(color: &[Vec3]) -> Vec<u8> {
    color
        .iter()
        .flat_map(|c| c.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect::<Vec<_>>())
        .collect()
}

impl SceneDataset {
    pub fn frames(&self) -> usize {
        self.train.len()
    }

    pub fn camera(&self, t: usize) -> Result<Camera> {
        self.intrinsics.camera(&self.train.cameras[t])
    }

    pub fn scene_cameras(&self) -> SceneCameras {
        SceneCameras {
            intrinsics: self.intrinsics,
            cameras: self.train.cameras.clone(),
            eval_cameras: self.eval.as_ref().map(|e| e.views.cameras.clone()).unwrap_or_default(),
        }
    }

    pub fn rgb(&self, t: usize) -> Vec<Vec3> {
        rgb_to_f64(&self.train.rgb[t])
    }

    pub fn depth(&self, t: usize) -> Vec<f64> {
        self.train.depth[t].iter().map(|d| *d as f64).collect()
    }

    /// Pixels belonging to any dynamic instance.
    pub fn dynamic_mask(&self, t: usize) -> Vec<bool> {
        self.train.masks[t].iter().map(|m| *m > 0).collect()
    }

    /// Checks that every stream agrees with the declared frame count and
    /// resolution.
    pub fn validate(&self) -> Result<()> {
        let t = self.frames();
        if t == 0 {
            return Err(Error::EmptyDataset);
        }
        let n = self.intrinsics.pixels();
        if n == 0 || !(self.intrinsics.fx > 0.0 && self.intrinsics.fy > 0.0) {
            return Err(Error::Config("invalid intrinsics".into()));
        }
        if self.canonical_frame >= t {
            return Err(Error::ShapeMismatch(format!("canonical frame {} of {t}", self.canonical_frame)));
        }
        let check = |what: &'static str, views: &ViewSet| -> Result<()> {
            let t = views.len();
            for (name, len) in [("rgb", views.rgb.len()), ("depth", views.depth.len()), ("mask", views.masks.len())] {
                if len != t {
                    return Err(Error::CountMismatch {
                        what: if name == "rgb" { what } else { name },
                        expected: t,
                        found: len,
                    });
                }
            }
            for i in 0..t {
                if views.rgb[i].len() != 3 * n || views.depth[i].len() != n || views.masks[i].len() != n {
                    return Err(Error::ShapeMismatch(format!("{what} view {i} does not match {}x{}", self.intrinsics.width, self.intrinsics.height)));
                }
            }
            Ok(())
        };
        check("training views", &self.train)?;
        if let Some(e) = &self.eval {
            check("evaluation views", &e.views)?;
            if e.covis.len() != e.views.len() || e.covis.iter().any(|c| c.len() != n) {
                return Err(Error::ShapeMismatch("covisibility masks do not match evaluation views".into()));
            }
        }
        let tr = &self.tracks;
        if tr.frames != t && tr.count > 0 {
            return Err(Error::CountMismatch {
                what: "track frames",
                expected: t,
                found: tr.frames,
            });
        }
        let m = tr.count * tr.frames;
        if tr.positions.len() != m || tr.confidence.len() != m || tr.visible.len() != m {
            return Err(Error::ShapeMismatch("track arrays do not match N×T".into()));
        }
        Ok(())
    }

    /// Instance id of every track: the most frequent mask label under its
    /// projection over the frames where it is visible (ties to the smaller
    /// label).
    pub fn track_instances(&self) -> Result<Vec<u32>> {
        let tr = &self.tracks;
        let (w, h) = (self.intrinsics.width as f64, self.intrinsics.height as f64);
        let cams: Vec<Camera> = (0..self.frames()).map(|t| self.camera(t)).collect::<Result<_>>()?;
        let mut out = Vec::with_capacity(tr.count);
        for j in 0..tr.count {
            let mut votes = [0usize; 256];
            for (t, cam) in cams.iter().enumerate() {
                let k = j * tr.frames + t;
                if !tr.visible[k] {
                    continue;
                }
                let p = tr.positions[k];
                let c = cam.to_camera(&Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64));
                if c.z <= 0.0 {
                    continue;
                }
                let uv = cam.project(&c);
                if uv.x < 0.0 || uv.y < 0.0 || uv.x >= w || uv.y >= h {
                    continue;
                }
                let pix = uv.y as usize * self.intrinsics.width + uv.x as usize;
                votes[self.train.masks[t][pix] as usize] += 1;
            }
            let best = (0..256).max_by_key(|&l| (votes[l], std::cmp::Reverse(l))).unwrap_or(0);
            out.push(best as u32);
        }
        Ok(out)
    }

    pub fn track_set(&self) -> Result<TrackSet> {
        let tr = &self.tracks;
        if tr.count == 0 {
            return Err(Error::EmptyTracks);
        }
        let positions = tr.positions.iter().map(|p| Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64)).collect();
        let confidence = tr.confidence.iter().map(|c| *c as f64).collect();
        TrackSet::new(tr.frames, positions, tr.visible.clone(), confidence, self.track_instances()?)
    }
}
