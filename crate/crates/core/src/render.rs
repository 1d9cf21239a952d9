//! Capsule silhouettes of a posed robot, mask IoU and PGM mask files.
//!
//! Link geometry comes from `<capsule>` annotations in the robot description.
//! A pixel is set when the ray through its center passes within a capsule's
//! radius of the capsule's segment.

use std::io::{BufRead, Write};

use nalgebra::{Point3, Vector3};
use thiserror::Error;

use crate::camera::CameraIntrinsics;
use crate::kinematics::{JointState, KinematicsError, RigidPose, RobotModel};

#[derive(Debug, Error)]
pub enum RenderError {
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error("mask dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
    #[error("PGM: {0}")]
    Pgm(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Capsule in camera coordinates (mm).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosedCapsule {
    pub a: Vector3<f64>,
    pub b: Vector3<f64>,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: u32,
    pub height: u32,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![false; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let mut m = Self::new(width, height);
        for v in 0..height {
            for u in 0..width {
                m.set(u, v, f(u, v));
            }
        }
        m
    }

    pub fn get(&self, u: u32, v: u32) -> bool {
        self.data[v as usize * self.width as usize + u as usize]
    }

    pub fn set(&mut self, u: u32, v: u32, value: bool) {
        let w = self.width as usize;
        self.data[v as usize * w + u as usize] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|v| *v)
    }

    pub fn pixels(&self) -> &[bool] {
        &self.data
    }

    pub fn pixels_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }
}

/// Output of [`rasterize_silhouette`]. `nothing_in_front` is set when no
/// capsule reaches in front of the camera; the mask is then empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Silhouette {
    pub mask: BinaryMask,
    pub nothing_in_front: bool,
}

/// Transforms every link capsule into the camera frame. `pose` places the
/// base link, as in [`crate::kinematics::forward_kinematics`].
pub fn pose_capsules(
    model: &RobotModel,
    q: &JointState,
    pose: &RigidPose,
) -> Result<Vec<PosedCapsule>, RenderError> {
    let frames = model.link_frames(&q.to_internal(model)?);
    let mut out = Vec::new();
    for (link, frame) in model.links().iter().zip(&frames) {
        for c in &link.capsules {
            let a = pose.apply(&(frame * Point3::from(c.from)).coords);
            let b = pose.apply(&(frame * Point3::from(c.to)).coords);
            out.push(PosedCapsule {
                a,
                b,
                radius: c.radius,
            });
        }
    }
    Ok(out)
}

/// Squared distance between the ray `τ·dir` (τ ≥ 0, `dir` unit) and segment `[a, b]`.
fn ray_segment_dist2(dir: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let point_to_ray = |p: &Vector3<f64>| {
        let tau = dir.dot(p).max(0.0);
        (p - dir * tau).norm_squared()
    };
    let e = b - a;
    let c = e.norm_squared();
    let mut best = point_to_ray(a).min(point_to_ray(b));
    if c > 0.0 {
        // origin to segment (τ = 0 edge)
        let s = (-a.dot(&e) / c).clamp(0.0, 1.0);
        best = best.min((a + e * s).norm_squared());
        // interior stationary point
        let bb = dir.dot(&e);
        let denom = c - bb * bb;
        if denom > 1e-12 * c {
            let d = -dir.dot(a);
            let ee = -e.dot(a);
            let tau = (bb * ee - c * d) / denom;
            let s = (ee - bb * d) / denom;
            if tau >= 0.0 && (0.0..=1.0).contains(&s) {
                best = best.min((dir * tau - a - e * s).norm_squared());
            }
        }
    }
    best
}

/// Pixel rectangle `[u0, u1) × [v0, v1)` that can contain the capsule.
fn screen_bounds(c: &PosedCapsule, k: &CameraIntrinsics) -> Option<(u32, u32, u32, u32)> {
    let lo = c.a.inf(&c.b) - Vector3::repeat(c.radius);
    let hi = c.a.sup(&c.b) + Vector3::repeat(c.radius);
    if hi.z <= 0.0 {
        return None;
    }
    if lo.z <= 1e-6 {
        return Some((0, k.width, 0, k.height));
    }
    let (mut umin, mut umax, mut vmin, mut vmax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for corner in 0..8 {
        let p = Vector3::new(
            if corner & 1 == 0 { lo.x } else { hi.x },
            if corner & 2 == 0 { lo.y } else { hi.y },
            if corner & 4 == 0 { lo.z } else { hi.z },
        );
        let uv = k.project_point(&p);
        umin = umin.min(uv.x);
        umax = umax.max(uv.x);
        vmin = vmin.min(uv.y);
        vmax = vmax.max(uv.y);
    }
    let clip = |v: f64, n: u32| v.clamp(0.0, n as f64);
    let u0 = clip(umin.floor() - 1.0, k.width) as u32;
    let u1 = clip(umax.ceil() + 1.0, k.width) as u32;
    let v0 = clip(vmin.floor() - 1.0, k.height) as u32;
    let v1 = clip(vmax.ceil() + 1.0, k.height) as u32;
    (u0 < u1 && v0 < v1).then_some((u0, u1, v0, v1))
}

pub fn rasterize_silhouette(capsules: &[PosedCapsule], k: &CameraIntrinsics) -> Silhouette {
    let mut mask = BinaryMask::new(k.width, k.height);
    let mut any_in_front = false;
    for c in capsules {
        if c.a.z.max(c.b.z) + c.radius <= 0.0 {
            continue;
        }
        any_in_front = true;
        let Some((u0, u1, v0, v1)) = screen_bounds(c, k) else {
            continue;
        };
        let r2 = c.radius * c.radius;
        for v in v0..v1 {
            for u in u0..u1 {
                if mask.get(u, v) {
                    continue;
                }
                let dir = Vector3::new(
                    (u as f64 + 0.5 - k.cx) / k.fx,
                    (v as f64 + 0.5 - k.cy) / k.fy,
                    1.0,
                )
                .normalize();
                if ray_segment_dist2(&dir, &c.a, &c.b) <= r2 {
                    mask.set(u, v, true);
                }
            }
        }
    }
    Silhouette {
        mask,
        nothing_in_front: !any_in_front,
    }
}

fn check_dims(a: &BinaryMask, b: &BinaryMask) -> Result<(), RenderError> {
    if a.width != b.width || a.height != b.height {
        return Err(RenderError::DimensionMismatch(a.width, a.height, b.width, b.height));
    }
    Ok(())
}

/// `(|A ∧ B|, |A ∨ B|)` pixel counts.
pub fn intersection_union(a: &BinaryMask, b: &BinaryMask) -> Result<(usize, usize), RenderError> {
    check_dims(a, b)?;
    let mut inter = 0;
    let mut union = 0;
    for (x, y) in a.data.iter().zip(&b.data) {
        inter += (*x && *y) as usize;
        union += (*x || *y) as usize;
    }
    Ok((inter, union))
}

/// `|A ∧ B| / |A ∨ B|`, defined as 1 when both masks are empty.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64, RenderError> {
    let (inter, union) = intersection_union(a, b)?;
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Binary PGM (P5, maxval 255): set pixels are 255.
pub fn write_pgm<W: Write>(mask: &BinaryMask, mut out: W) -> Result<(), RenderError> {
    write!(out, "P5\n{} {}\n255\n", mask.width, mask.height)?;
    let bytes: Vec<u8> = mask.data.iter().map(|v| if *v { 255 } else { 0 }).collect();
    out.write_all(&bytes)?;
    Ok(())
}

pub fn read_pgm<R: BufRead>(mut input: R) -> Result<BinaryMask, RenderError> {
    let mut tokens = Vec::new();
    let mut line = String::new();
    while tokens.len() < 4 {
        line.clear();
        if input.read_line(&mut line)? == 0 {
            return Err(RenderError::Pgm("truncated header".into()));
        }
        let content = line.split('#').next().unwrap_or("");
        tokens.extend(content.split_whitespace().map(str::to_string));
    }
    if tokens.len() != 4 || tokens[0] != "P5" {
        return Err(RenderError::Pgm(format!("unsupported header {tokens:?}")));
    }
    let parse = |s: &str| s.parse::<u32>().map_err(|_| RenderError::Pgm(format!("bad number {s:?}")));
    let (width, height, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(RenderError::Pgm(format!("unsupported maxval {maxval}")));
    }
    let mut bytes = vec![0u8; width as usize * height as usize];
    input.read_exact(&mut bytes)?;
    let data = bytes
        .iter()
        .map(|&b| match b as u32 {
            0 => Ok(false),
            v if v == maxval => Ok(true),
            v => Err(RenderError::Pgm(format!("non-binary pixel value {v}"))),
        })
        .collect::<Result<_, _>>()?;
    Ok(BinaryMask {
        width,
        height,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::parse_robot_description;
    use crate::rotation::axis_angle;
    use approx::assert_relative_eq;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn arm() -> RobotModel {
        parse_robot_description(
            r#"<robot name="arm">
              <link name="base"><capsule from="0 0 0" to="0 0 100" radius="30"/></link>
              <link name="upper"><capsule from="0 0 0" to="200 0 0" radius="20"/></link>
              <joint name="j" type="revolute"><parent link="base"/><child link="upper"/>
                <origin xyz="0 0 100"/><axis xyz="0 0 1"/></joint>
            </robot>"#,
        )
        .unwrap()
    }

    fn sphere(center: Vector3<f64>, r: f64) -> PosedCapsule {
        PosedCapsule {
            a: center,
            b: center,
            radius: r,
        }
    }

    #[test]
    fn canonical_placement() {
        let m = arm();
        let caps = pose_capsules(&m, &JointState(vec![0.0]), &RigidPose::identity()).unwrap();
        assert_eq!(caps[0].b, Vector3::new(0.0, 0.0, 100.0));
        assert_relative_eq!(caps[1].a, Vector3::new(0.0, 0.0, 100.0));
        assert_relative_eq!(caps[1].b, Vector3::new(200.0, 0.0, 100.0));
    }

    #[test]
    fn translation_shifts_endpoints() {
        let m = arm();
        let t = Vector3::new(5.0, -6.0, 700.0);
        let base = pose_capsules(&m, &JointState(vec![30.0]), &RigidPose::identity()).unwrap();
        let moved = pose_capsules(&m, &JointState(vec![30.0]), &RigidPose::new(nalgebra::Matrix3::identity(), t)).unwrap();
        for (a, b) in base.iter().zip(&moved) {
            assert_relative_eq!(b.a, a.a + t);
            assert_relative_eq!(b.b, a.b + t);
        }
    }

    #[test]
    fn root_rotation_rotates_endpoints() {
        let m = arm();
        let pose = RigidPose::new(axis_angle(Vector3::z(), 90.0), Vector3::zeros());
        let caps = pose_capsules(&m, &JointState(vec![0.0]), &pose).unwrap();
        assert_relative_eq!(caps[1].b, Vector3::new(0.0, 200.0, 100.0), epsilon = 1e-9);
    }

    #[test]
    fn sphere_on_principal_ray_is_a_disc() {
        let k = cam();
        let s = rasterize_silhouette(&[sphere(Vector3::new(0.0, 0.0, 1000.0), 100.0)], &k);
        assert!(!s.nothing_in_front);
        // f·r/z = 50 px (the exact tangent cone gives 50/sqrt(1 - 0.01))
        let expected = std::f64::consts::PI * 50.0f64.powi(2);
        let area = s.mask.count() as f64;
        assert!((area - expected).abs() / expected < 0.03, "area {area}");
        assert!(s.mask.get(320, 240));
        assert!(!s.mask.get(320 + 60, 240));
        assert!(s.mask.get(320 + 48, 240));
    }

    #[test]
    fn capsule_behind_camera() {
        let s = rasterize_silhouette(
            &[PosedCapsule {
                a: Vector3::new(0.0, 0.0, -500.0),
                b: Vector3::new(100.0, 0.0, -400.0),
                radius: 50.0,
            }],
            &cam(),
        );
        assert!(s.nothing_in_front);
        assert!(s.mask.is_empty());
    }

    #[test]
    fn disjoint_capsules_union() {
        let k = cam();
        let c1 = sphere(Vector3::new(-200.0, 0.0, 1000.0), 60.0);
        let c2 = PosedCapsule {
            a: Vector3::new(150.0, -100.0, 900.0),
            b: Vector3::new(250.0, 120.0, 1200.0),
            radius: 40.0,
        };
        let both = rasterize_silhouette(&[c1, c2], &k).mask;
        let m1 = rasterize_silhouette(&[c1], &k).mask;
        let m2 = rasterize_silhouette(&[c2], &k).mask;
        let union = BinaryMask::from_fn(640, 480, |u, v| m1.get(u, v) || m2.get(u, v));
        assert_eq!(both, union);
    }

    #[test]
    fn straddling_capsule_is_rendered() {
        let k = cam();
        let c = PosedCapsule {
            a: Vector3::new(0.0, 0.0, -100.0),
            b: Vector3::new(0.0, 0.0, 800.0),
            radius: 30.0,
        };
        let s = rasterize_silhouette(&[c], &k);
        assert!(!s.nothing_in_front);
        assert!(s.mask.get(320, 240));
    }

    #[test]
    fn larger_radius_never_removes_pixels() {
        let k = cam();
        let m = arm();
        let pose = RigidPose::new(axis_angle(Vector3::new(1.0, 0.3, 0.0), 120.0), Vector3::new(30.0, 10.0, 900.0));
        let caps = pose_capsules(&m, &JointState(vec![40.0]), &pose).unwrap();
        let small = rasterize_silhouette(&caps, &k).mask;
        let grown: Vec<_> = caps.iter().map(|c| PosedCapsule { radius: c.radius * 1.3, ..*c }).collect();
        let big = rasterize_silhouette(&grown, &k).mask;
        assert!(small.count() > 0);
        for (s, b) in small.pixels().iter().zip(big.pixels()) {
            assert!(!s || *b);
        }
        // determinism
        assert_eq!(rasterize_silhouette(&caps, &k).mask, small);
    }

    fn block(w: u32, h: u32, u0: u32, u1: u32, v0: u32, v1: u32) -> BinaryMask {
        BinaryMask::from_fn(w, h, |u, v| (u0..u1).contains(&u) && (v0..v1).contains(&v))
    }

    #[test]
    fn iou_examples() {
        let a = block(20, 20, 0, 10, 0, 10);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        let b = block(20, 20, 10, 20, 10, 20);
        assert_eq!(mask_iou(&a, &b).unwrap(), 0.0);
        let inner = block(20, 20, 0, 10, 0, 5);
        assert_eq!(inner.count(), 50);
        assert_eq!(mask_iou(&inner, &a).unwrap(), 0.5);
        assert_eq!(mask_iou(&BinaryMask::new(4, 4), &BinaryMask::new(4, 4)).unwrap(), 1.0);
        assert!(matches!(
            mask_iou(&BinaryMask::new(4, 4), &BinaryMask::new(4, 5)),
            Err(RenderError::DimensionMismatch(..))
        ));
    }

    #[test]
    fn pgm_round_trip_and_errors() {
        let a = block(7, 5, 1, 4, 2, 5);
        let mut bytes = Vec::new();
        write_pgm(&a, &mut bytes).unwrap();
        assert_eq!(read_pgm(bytes.as_slice()).unwrap(), a);

        let commented = b"P5\n# made by hand\n2 1\n255\n\x00\xff";
        let m = read_pgm(&commented[..]).unwrap();
        assert!(!m.get(0, 0) && m.get(1, 0));
        assert!(matches!(read_pgm(&b"P5\n2 1\n255\n\x00\x07"[..]), Err(RenderError::Pgm(_))));
        assert!(matches!(read_pgm(&b"P2\n1 1\n255\n0"[..]), Err(RenderError::Pgm(_))));
    }
}
