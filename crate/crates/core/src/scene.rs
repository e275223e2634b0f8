//! Synthetic scenes: analytic primitives with keyframed rigid trajectories,
//! closed-form deformation fields, and attach/detach events that bind one
//! primitive's trajectory to another's.
//!
//! Everything is exactly evaluable at any frame, so ground-truth positions
//! and labels stay available in closed form.

use nalgebra::{Isometry3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("scene `{0}` has no primitives")]
    Empty(String),
    #[error("primitive `{0}`: keyframes must be non-empty and strictly increasing")]
    BadKeyframes(String),
    #[error("primitive `{0}`: binding events must be strictly increasing in frame")]
    BadBindingOrder(String),
    #[error("primitive `{0}`: detach at frame {1} without a prior attach")]
    DetachWithoutAttach(String, u32),
    #[error("primitive `{0}`: unknown binding parent `{1}`")]
    UnknownParent(String, String),
    #[error("primitive `{0}`: binding cycle through `{1}`")]
    BindingCycle(String, String),
    #[error("scene has no cameras")]
    NoCameras,
}

/// Analytic solid; the local signed distance is exact.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    /// Slab whose top face is the local z = 0 plane, extending `thickness`
    /// downwards; bounded in local x/y.
    Plane { half_x: f64, half_y: f64, thickness: f64 },
    Box { half: [f64; 3] },
    Sphere { radius: f64 },
    /// Capsule along the local x axis.
    Capsule { half_length: f64, radius: f64 },
    /// Thin strip in the local xy plane (a heightfield once deformed).
    Strip { half_x: f64, half_y: f64, half_z: f64 },
}

fn box_sdf(p: &Vector3<f64>, half: &Vector3<f64>) -> f64 {
    let q = Vector3::new(p.x.abs() - half.x, p.y.abs() - half.y, p.z.abs() - half.z);
    let outside = Vector3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
    let inside = q.x.max(q.y).max(q.z).min(0.0);
    outside + inside
}

impl Shape {
    pub fn sdf(&self, p: &Vector3<f64>) -> f64 {
        match self {
            Shape::Plane { half_x, half_y, thickness } => {
                let center = Vector3::new(0.0, 0.0, -thickness / 2.0);
                box_sdf(&(p - center), &Vector3::new(*half_x, *half_y, thickness / 2.0))
            }
            Shape::Box { half } => box_sdf(p, &Vector3::new(half[0], half[1], half[2])),
            Shape::Sphere { radius } => p.norm() - radius,
            Shape::Capsule { half_length, radius } => {
                let x = p.x.clamp(-half_length, *half_length);
                (p - Vector3::new(x, 0.0, 0.0)).norm() - radius
            }
            Shape::Strip { half_x, half_y, half_z } => {
                box_sdf(p, &Vector3::new(*half_x, *half_y, *half_z))
            }
        }
    }

    /// Conservative local-frame bounding half-extents.
    pub fn half_extent(&self) -> Vector3<f64> {
        match self {
            Shape::Plane { half_x, half_y, thickness } => {
                Vector3::new(*half_x, *half_y, *thickness)
            }
            Shape::Box { half } => Vector3::new(half[0], half[1], half[2]),
            Shape::Sphere { radius } => Vector3::repeat(*radius),
            Shape::Capsule { half_length, radius } => {
                Vector3::new(half_length + radius, *radius, *radius)
            }
            Shape::Strip { half_x, half_y, half_z } => Vector3::new(*half_x, *half_y, *half_z),
        }
    }
}

fn smoothstep01(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * (3.0 - 2.0 * s)
}

fn ramp(t: f64, t0: f64, t1: f64) -> f64 {
    if t1 <= t0 {
        return if t >= t1 { 1.0 } else { 0.0 };
    }
    ((t - t0) / (t1 - t0)).clamp(0.0, 1.0)
}

/// Closed-form local deformation field with an exact inverse, applied before
/// the rigid trajectory. All fields move material along local z only, which
/// keeps the inverse map exact.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Deformation {
    #[default]
    None,
    /// Scale local z by a factor ramping s0 -> s1 over frames [t0, t1].
    StretchZ { s0: f64, s1: f64, t0: f64, t1: f64 },
    /// Vertical wave `z += a(t) * sin(freq * x + phase * t)`, amplitude
    /// ramping 0 -> amp over [t0, t1].
    BendWave { amp: f64, freq: f64, phase: f64, t0: f64, t1: f64 },
    /// Peeling front sweeping from +x: material with x beyond the front is
    /// lifted by `height` over a transition band of `width`. The front
    /// starts at `x_start` and moves toward -x at `speed` per frame after t0.
    Peel { height: f64, x_start: f64, speed: f64, width: f64, t0: f64 },
}

impl Deformation {
    fn stretch_factor(s0: f64, s1: f64, t0: f64, t1: f64, t: f64) -> f64 {
        s0 + (s1 - s0) * ramp(t, t0, t1)
    }

    fn wave_amp(amp: f64, t0: f64, t1: f64, t: f64) -> f64 {
        amp * ramp(t, t0, t1)
    }

    fn peel_offset(height: f64, x_start: f64, speed: f64, width: f64, t0: f64, t: f64, x: f64) -> f64 {
        let front = x_start - speed * (t - t0).max(0.0);
        height * smoothstep01((x - front) / width)
    }

    pub fn is_active(&self, t: f64) -> bool {
        match self {
            Deformation::None => false,
            Deformation::StretchZ { s0, s1, t0, t1 } => {
                (Self::stretch_factor(*s0, *s1, *t0, *t1, t) - 1.0).abs() > 1e-12
            }
            Deformation::BendWave { amp, t0, t1, .. } => Self::wave_amp(*amp, *t0, *t1, t) != 0.0,
            Deformation::Peel { t0, .. } => t >= *t0,
        }
    }

    /// Material point -> deformed point at frame time t.
    pub fn forward(&self, u: &Vector3<f64>, t: f64) -> Vector3<f64> {
        match self {
            Deformation::None => *u,
            Deformation::StretchZ { s0, s1, t0, t1 } => {
                let s = Self::stretch_factor(*s0, *s1, *t0, *t1, t);
                Vector3::new(u.x, u.y, u.z * s)
            }
            Deformation::BendWave { amp, freq, phase, t0, t1 } => {
                let a = Self::wave_amp(*amp, *t0, *t1, t);
                Vector3::new(u.x, u.y, u.z + a * (freq * u.x + phase * t).sin())
            }
            Deformation::Peel { height, x_start, speed, width, t0 } => {
                let h = Self::peel_offset(*height, *x_start, *speed, *width, *t0, t, u.x);
                Vector3::new(u.x, u.y, u.z + h)
            }
        }
    }

    /// Deformed point -> material point; exact by construction.
    pub fn inverse(&self, w: &Vector3<f64>, t: f64) -> Vector3<f64> {
        match self {
            Deformation::None => *w,
            Deformation::StretchZ { s0, s1, t0, t1 } => {
                let s = Self::stretch_factor(*s0, *s1, *t0, *t1, t);
                Vector3::new(w.x, w.y, w.z / s)
            }
            Deformation::BendWave { amp, freq, phase, t0, t1 } => {
                let a = Self::wave_amp(*amp, *t0, *t1, t);
                Vector3::new(w.x, w.y, w.z - a * (freq * w.x + phase * t).sin())
            }
            Deformation::Peel { height, x_start, speed, width, t0 } => {
                let h = Self::peel_offset(*height, *x_start, *speed, *width, *t0, t, w.x);
                Vector3::new(w.x, w.y, w.z - h)
            }
        }
    }

    /// Upper bound on the Lipschitz constant of the inverse map; safe
    /// sphere-tracing steps divide the sampled distance by this.
    pub fn inverse_lipschitz(&self, t: f64) -> f64 {
        match self {
            Deformation::None => 1.0,
            Deformation::StretchZ { s0, s1, t0, t1 } => {
                let s = Self::stretch_factor(*s0, *s1, *t0, *t1, t);
                (1.0 / s).max(1.0)
            }
            Deformation::BendWave { amp, freq, t0, t1, .. } => {
                let a = Self::wave_amp(*amp, *t0, *t1, t).abs();
                1.0 + a * freq.abs()
            }
            Deformation::Peel { height, width, .. } => 1.0 + 1.5 * height.abs() / width.max(1e-6),
        }
    }

    /// Upper bound on |forward(u) - u| at frame t, for bounding boxes.
    pub fn max_displacement(&self, t: f64, half_extent: &Vector3<f64>) -> f64 {
        match self {
            Deformation::None => 0.0,
            Deformation::StretchZ { s0, s1, t0, t1 } => {
                let s = Self::stretch_factor(*s0, *s1, *t0, *t1, t);
                (s - 1.0).abs() * half_extent.z
            }
            Deformation::BendWave { amp, t0, t1, .. } => Self::wave_amp(*amp, *t0, *t1, t).abs(),
            Deformation::Peel { height, t0, .. } => {
                if t >= *t0 {
                    height.abs()
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Keyframe {
    pub frame: u32,
    pub position: [f64; 3],
    /// Unit quaternion [x, y, z, w]; identity when omitted.
    #[serde(default = "identity_quat")]
    pub rotation: [f64; 4],
}

fn identity_quat() -> [f64; 4] {
    [0.0, 0.0, 0.0, 1.0]
}

fn keyframe_pose(k: &Keyframe) -> Isometry3<f64> {
    let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
        k.rotation[3],
        k.rotation[0],
        k.rotation[1],
        k.rotation[2],
    ));
    Isometry3::from_parts(
        Translation3::new(k.position[0], k.position[1], k.position[2]),
        q,
    )
}

/// Interpolate a keyframe list at fractional frame t (clamped at the ends).
fn interpolate_pose(keys: &[Keyframe], t: f64) -> Isometry3<f64> {
    debug_assert!(!keys.is_empty());
    if t <= keys[0].frame as f64 {
        return keyframe_pose(&keys[0]);
    }
    let last = keys.last().unwrap();
    if t >= last.frame as f64 {
        return keyframe_pose(last);
    }
    let hi = keys.iter().position(|k| (k.frame as f64) > t).unwrap();
    let (a, b) = (&keys[hi - 1], &keys[hi]);
    let alpha = (t - a.frame as f64) / ((b.frame - a.frame) as f64);
    let pa = keyframe_pose(a);
    let pb = keyframe_pose(b);
    let pos = pa.translation.vector.lerp(&pb.translation.vector, alpha);
    let rot = pa.rotation.slerp(&pb.rotation, alpha);
    Isometry3::from_parts(Translation3::from(pos), rot)
}

/// Trajectory binding event: while attached, the primitive rigidly follows
/// its parent from the relative pose it had at the attach frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BindEvent {
    Attach { attach: u32, parent: String },
    Detach { detach: u32 },
}

impl BindEvent {
    pub fn frame(&self) -> u32 {
        match self {
            BindEvent::Attach { attach, .. } => *attach,
            BindEvent::Detach { detach } => *detach,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrimitiveScript {
    pub name: String,
    pub shape: Shape,
    #[serde(default = "default_color")]
    pub color: [f32; 3],
    /// Local -> world pose keyframes (used while not attached).
    pub keyframes: Vec<Keyframe>,
    #[serde(default)]
    pub deformation: Deformation,
    #[serde(default)]
    pub binding: Vec<BindEvent>,
}

fn default_color() -> [f32; 3] {
    [0.7, 0.7, 0.7]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraSpec {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub eye: [f64; 3],
    pub look_at: [f64; 3],
    #[serde(default = "default_up")]
    pub up: [f64; 3],
}

fn default_up() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

impl CameraSpec {
    pub fn to_model(&self) -> crate::camera::CameraModel {
        crate::camera::CameraModel::look_at(
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.width,
            self.height,
            Vector3::from(self.eye),
            Vector3::from(self.look_at),
            Vector3::from(self.up),
        )
    }
}

/// Full scripted scene: primitives, cameras, frame count, depth noise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneScript {
    pub name: String,
    pub frames: u32,
    #[serde(default)]
    pub noise_sigma: f64,
    pub cameras: Vec<CameraSpec>,
    pub primitives: Vec<PrimitiveScript>,
}

impl SceneScript {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.primitives.is_empty() {
            return Err(SceneError::Empty(self.name.clone()));
        }
        if self.cameras.is_empty() {
            return Err(SceneError::NoCameras);
        }
        for p in &self.primitives {
            if p.keyframes.is_empty()
                || p.keyframes.windows(2).any(|w| w[1].frame <= w[0].frame)
            {
                return Err(SceneError::BadKeyframes(p.name.clone()));
            }
            if p.binding.windows(2).any(|w| w[1].frame() <= w[0].frame()) {
                return Err(SceneError::BadBindingOrder(p.name.clone()));
            }
            let mut attached = false;
            for ev in &p.binding {
                match ev {
                    BindEvent::Attach { parent, .. } => {
                        if !self.primitives.iter().any(|q| &q.name == parent) {
                            return Err(SceneError::UnknownParent(
                                p.name.clone(),
                                parent.clone(),
                            ));
                        }
                        if parent == &p.name {
                            return Err(SceneError::BindingCycle(p.name.clone(), parent.clone()));
                        }
                        attached = true;
                    }
                    BindEvent::Detach { detach } => {
                        if !attached {
                            return Err(SceneError::DetachWithoutAttach(p.name.clone(), *detach));
                        }
                        attached = false;
                    }
                }
            }
        }
        // Reject attachment cycles by walking parent chains at frame 0.
        for (i, p) in self.primitives.iter().enumerate() {
            let mut seen = vec![i];
            let mut cur = i;
            while let Some(parent) = self.first_parent(cur) {
                if seen.contains(&parent) {
                    return Err(SceneError::BindingCycle(
                        p.name.clone(),
                        self.primitives[parent].name.clone(),
                    ));
                }
                seen.push(parent);
                cur = parent;
            }
        }
        Ok(())
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        self.primitives.iter().position(|p| p.name == name)
    }

    fn first_parent(&self, prim: usize) -> Option<usize> {
        self.primitives[prim].binding.iter().find_map(|ev| match ev {
            BindEvent::Attach { parent, .. } => self.index_of(parent),
            _ => None,
        })
    }

    /// Attachment parent in effect at frame t, if any.
    pub fn binding_at(&self, prim: usize, frame: u32) -> Option<(usize, u32)> {
        let mut state: Option<(usize, u32)> = None;
        for ev in &self.primitives[prim].binding {
            if ev.frame() > frame {
                break;
            }
            state = match ev {
                BindEvent::Attach { attach, parent } => {
                    self.index_of(parent).map(|p| (p, *attach))
                }
                BindEvent::Detach { .. } => None,
            };
        }
        state
    }

    /// Actual local -> world pose of a primitive at (possibly fractional)
    /// frame t, honoring attachment.
    pub fn pose_at(&self, prim: usize, t: f64) -> Isometry3<f64> {
        let frame = t.floor().max(0.0) as u32;
        match self.binding_at(prim, frame) {
            None => interpolate_pose(&self.primitives[prim].keyframes, t),
            Some((parent, attach_frame)) => {
                let parent_now = self.pose_at(parent, t);
                let parent_then = self.pose_at(parent, attach_frame as f64);
                let own_then = self.pose_at_detached(prim, attach_frame as f64);
                parent_now * parent_then.inverse() * own_then
            }
        }
    }

    /// Pose the primitive would have had at t per its own keyframes or the
    /// binding state just before t (used to seed attach-relative poses).
    fn pose_at_detached(&self, prim: usize, t: f64) -> Isometry3<f64> {
        let frame = t.floor().max(0.0) as u32;
        // State strictly before this frame, to anchor a fresh attach.
        if frame > 0 {
            if let Some((parent, attach_frame)) = self.binding_at(prim, frame - 1) {
                let parent_now = self.pose_at(parent, t);
                let parent_then = self.pose_at(parent, attach_frame as f64);
                let own_then = self.pose_at_detached(prim, attach_frame as f64);
                return parent_now * parent_then.inverse() * own_then;
            }
        }
        interpolate_pose(&self.primitives[prim].keyframes, t)
    }

    /// Label root of a primitive at a frame (attachment chains collapse to
    /// their root primitive).
    pub fn label_root(&self, prim: usize, frame: u32) -> usize {
        let mut cur = prim;
        loop {
            match self.binding_at(cur, frame) {
                Some((parent, _)) if parent != cur => cur = parent,
                _ => return cur,
            }
        }
    }

    /// Number of distinct label roots at a frame.
    pub fn true_object_count(&self, frame: u32) -> usize {
        let mut roots: Vec<usize> = (0..self.primitives.len())
            .map(|i| self.label_root(i, frame))
            .collect();
        roots.sort_unstable();
        roots.dedup();
        roots.len()
    }

    /// Freeze the scene at a frame for rendering and distance queries.
    pub fn snapshot(&self, frame: u32) -> SceneSnapshot {
        let t = frame as f64;
        let instances = (0..self.primitives.len())
            .map(|i| {
                let p = &self.primitives[i];
                let pose = self.pose_at(i, t);
                let half = p.shape.half_extent();
                let slack = p.deformation.max_displacement(t, &half) + 1e-3;
                PrimitiveInstance {
                    shape: p.shape.clone(),
                    color: p.color,
                    pose_inv: pose.inverse(),
                    pose,
                    deformation: p.deformation.clone(),
                    t,
                    local_bound: half.norm() + slack,
                    inv_lipschitz: p.deformation.inverse_lipschitz(t),
                }
            })
            .collect();
        SceneSnapshot { instances }
    }

    /// Axis-aligned bounds of everything over the whole run (for sizing the
    /// fusion volume), padded by `margin`.
    pub fn bounding_box(&self, margin: f64) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for frame in 0..self.frames.max(1) {
            let t = frame as f64;
            for i in 0..self.primitives.len() {
                let p = &self.primitives[i];
                let pose = self.pose_at(i, t);
                let half = p.shape.half_extent();
                let r = half.norm() + p.deformation.max_displacement(t, &half);
                let c = pose.translation.vector;
                lo = lo.inf(&(c - Vector3::repeat(r)));
                hi = hi.sup(&(c + Vector3::repeat(r)));
            }
        }
        (lo - Vector3::repeat(margin), hi + Vector3::repeat(margin))
    }
}

/// One primitive frozen at a frame.
#[derive(Debug, Clone)]
pub struct PrimitiveInstance {
    pub shape: Shape,
    pub color: [f32; 3],
    pub pose: Isometry3<f64>,
    pub pose_inv: Isometry3<f64>,
    pub deformation: Deformation,
    pub t: f64,
    /// Radius of a world-space bounding sphere around the pose origin.
    pub local_bound: f64,
    pub inv_lipschitz: f64,
}

impl PrimitiveInstance {
    /// Signed distance in world space; exact for undeformed primitives and
    /// a conservative (Lipschitz-bounded) estimate under deformation.
    pub fn sdf(&self, p: &Vector3<f64>) -> f64 {
        let local = (self.pose_inv * nalgebra::Point3::from(*p)).coords;
        let material = self.deformation.inverse(&local, self.t);
        self.shape.sdf(&material)
    }

    /// True position at frame t of the material point that created surface
    /// point `p` (identity for rigid primitives).
    pub fn forward_material(&self, material: &Vector3<f64>) -> Vector3<f64> {
        let deformed = self.deformation.forward(material, self.t);
        (self.pose * nalgebra::Point3::from(deformed)).coords
    }
}

/// Scene frozen at one frame.
#[derive(Debug, Clone)]
pub struct SceneSnapshot {
    pub instances: Vec<PrimitiveInstance>,
}

impl SceneSnapshot {
    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Minimum signed distance over all primitives and the argmin index.
    pub fn sdf(&self, p: &Vector3<f64>) -> Option<(f64, usize)> {
        self.instances
            .iter()
            .enumerate()
            .map(|(i, inst)| (inst.sdf(p), i))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
    }

    /// Outward surface normal from the scene signed-distance gradient.
    pub fn normal(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let h = 1e-5;
        let f = |q: Vector3<f64>| self.sdf(&q).map(|(d, _)| d).unwrap_or(f64::INFINITY);
        let g = Vector3::new(
            f(p + Vector3::new(h, 0.0, 0.0)) - f(p - Vector3::new(h, 0.0, 0.0)),
            f(p + Vector3::new(0.0, h, 0.0)) - f(p - Vector3::new(0.0, h, 0.0)),
            f(p + Vector3::new(0.0, 0.0, h)) - f(p - Vector3::new(0.0, 0.0, h)),
        );
        let n = g.norm();
        if n > 0.0 {
            g / n
        } else {
            Vector3::z()
        }
    }

    /// First intersection of a ray with the scene by conservative sphere
    /// tracing plus bisection refinement. Returns (ray parameter, primitive).
    pub fn raycast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, t_min: f64, t_max: f64) -> Option<(f64, usize)> {
        if self.instances.is_empty() {
            return None;
        }
        // Conservative step scale over active deformations.
        let lipschitz = self
            .instances
            .iter()
            .map(|i| i.inv_lipschitz)
            .fold(1.0_f64, f64::max);
        let step_scale = 1.0 / lipschitz;

        let mut t = t_min;
        let mut prev_t = t_min;
        let mut prev_d = f64::INFINITY;
        let mut iters = 0;
        while t <= t_max && iters < 2000 {
            iters += 1;
            let p = origin + dir * t;
            let (d, _) = self.sdf(&p)?;
            if d <= 1e-7 {
                // Refine by bisection between the last known-outside point
                // and here (handles slight overshoot from the safety factor).
                if prev_d > 0.0 && d < 0.0 {
                    let (mut lo, mut hi) = (prev_t, t);
                    for _ in 0..40 {
                        let mid = 0.5 * (lo + hi);
                        let (dm, _) = self.sdf(&(origin + dir * mid)).unwrap();
                        if dm > 0.0 {
                            lo = mid;
                        } else {
                            hi = mid;
                        }
                    }
                    t = 0.5 * (lo + hi);
                }
                let (_, prim) = self.sdf(&(origin + dir * t))?;
                return Some((t, prim));
            }
            prev_t = t;
            prev_d = d;
            t += (d * step_scale).max(2e-4);
        }
        None
    }
}
