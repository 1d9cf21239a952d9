//! Voxel heatmaps and the spatial soft-argmax.
//!
//! A volume of raw scores is turned into a distribution with a softmax over
//! all voxels; the keypoint is the expectation of the voxel index `(k, i, j)`
//! under that distribution. Index axes map onto the root-relative metric frame
//! as `k → z` (depth, `D` voxels), `i → y` (`H'` rows) and `j → x` (`W'` columns),
//! with index `n` at the center of the `n`-th voxel.

use std::io::{Read, Write};

use nalgebra::Vector3;
use thiserror::Error;

use crate::kinematics::{JointKind, KeypointFrame, KeypointSet, RobotModel};

/// Default voxel count per axis.
pub const DEFAULT_RESOLUTION: usize = 64;

/// Default half-extent of the heatmap cube as a multiple of the robot's reach.
pub const DEFAULT_EXTENT_SCALE: f64 = 1.25;

const NORMALIZATION_TOL: f64 = 1e-9;
const DUMP_MAGIC: &[u8; 4] = b"HM3D";
const DUMP_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum HeatmapError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("volume has {actual} voxels, grid expects {expected}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("volume contains non-finite scores")]
    NonFinite,
    #[error("volume is not normalized (sum {sum}, min {min})")]
    Unnormalized { sum: f64, min: f64 },
    #[error("coordinate {0:?} lies outside the index box")]
    OutOfBox([f64; 3]),
    #[error("heatmap dump: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Voxel counts `(D, H', W')` and the metric box (mm, root-relative) they cover.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelGridSpec {
    pub dims: [usize; 3],
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl VoxelGridSpec {
    pub fn new(dims: [usize; 3], min: Vector3<f64>, max: Vector3<f64>) -> Result<Self, HeatmapError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(HeatmapError::InvalidGrid(format!("zero voxel count in {dims:?}")));
        }
        let ext = max - min;
        if !(ext.x > 0.0 && ext.y > 0.0 && ext.z > 0.0) || !ext.iter().all(|v| v.is_finite()) {
            return Err(HeatmapError::InvalidGrid(format!(
                "extent {min:?}..{max:?} has no volume"
            )));
        }
        Ok(Self { dims, min, max })
    }

    /// Cube of `DEFAULT_RESOLUTION³` voxels around `center` with half-extent
    /// `DEFAULT_EXTENT_SCALE × robot_reach(model)`.
    pub fn default_for(model: &RobotModel, center: Vector3<f64>) -> Result<Self, HeatmapError> {
        let half = DEFAULT_EXTENT_SCALE * robot_reach(model).max(1.0);
        Self::new(
            [DEFAULT_RESOLUTION; 3],
            center - Vector3::repeat(half),
            center + Vector3::repeat(half),
        )
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn flat_index(&self, k: usize, i: usize, j: usize) -> usize {
        (k * self.dims[1] + i) * self.dims[2] + j
    }

    /// Metric size of one voxel along (x, y, z).
    pub fn pitch(&self) -> Vector3<f64> {
        let ext = self.max - self.min;
        Vector3::new(
            ext.x / self.dims[2] as f64,
            ext.y / self.dims[1] as f64,
            ext.z / self.dims[0] as f64,
        )
    }

    /// Inverse of [`voxel_to_metric`], without bounds checks.
    pub fn metric_to_voxel(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let pitch = self.pitch();
        Vector3::new(
            (p.z - self.min.z) / pitch.z - 0.5,
            (p.y - self.min.y) / pitch.y - 0.5,
            (p.x - self.min.x) / pitch.x - 0.5,
        )
    }
}

/// Upper bound on the distance between the root keypoint and any keypoint,
/// from the lengths of the kinematic chains (origins, prismatic travel and
/// keypoint offsets).
pub fn robot_reach(model: &RobotModel) -> f64 {
    let links = model.links();
    let index = |name: &str| links.iter().position(|l| l.name == name).expect("validated link");
    let mut bound = vec![0.0; links.len()];
    for j in model.topological_joints() {
        let travel = match j.kind {
            JointKind::Prismatic => {
                let l = j.effective_limits();
                if l.is_bounded() {
                    l.lower.abs().max(l.upper.abs())
                } else {
                    0.0
                }
            }
            _ => 0.0,
        };
        bound[index(&j.child)] = bound[index(&j.parent)] + j.origin.xyz.norm() + travel;
    }
    let kp: Vec<f64> = model
        .keypoints()
        .iter()
        .map(|k| bound[index(&k.link)] + k.offset.norm())
        .collect();
    let root = kp[model.root_keypoint()];
    kp.iter().map(|b| b + root).fold(0.0, f64::max)
}

/// `N` normalized volumes sharing one grid, stored row-major in `(k, i, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap3D {
    pub dims: [usize; 3],
    pub volumes: Vec<Vec<f64>>,
}

fn softmax(raw: &[f64]) -> Result<Vec<f64>, HeatmapError> {
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(HeatmapError::NonFinite);
    }
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = raw.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    Ok(exp.into_iter().map(|e| e / sum).collect())
}

/// Softmax (temperature 1) over every voxel of each raw score volume.
pub fn normalize(dims: [usize; 3], raw: &[Vec<f64>]) -> Result<Heatmap3D, HeatmapError> {
    let expected: usize = dims.iter().product();
    if expected == 0 {
        return Err(HeatmapError::InvalidGrid(format!("zero voxel count in {dims:?}")));
    }
    let volumes = raw
        .iter()
        .map(|v| {
            if v.len() != expected {
                return Err(HeatmapError::SizeMismatch {
                    expected,
                    actual: v.len(),
                });
            }
            softmax(v)
        })
        .collect::<Result<_, _>>()?;
    Ok(Heatmap3D { dims, volumes })
}

/// Expected voxel coordinate `Σ (k, i, j) · H(k, i, j)` of a normalized volume.
pub fn soft_argmax(volume: &[f64], dims: [usize; 3]) -> Result<Vector3<f64>, HeatmapError> {
    let expected: usize = dims.iter().product();
    if volume.len() != expected {
        return Err(HeatmapError::SizeMismatch {
            expected,
            actual: volume.len(),
        });
    }
    let sum: f64 = volume.iter().sum();
    let min = volume.iter().copied().fold(f64::INFINITY, f64::min);
    if !((sum - 1.0).abs() <= NORMALIZATION_TOL) || min < 0.0 {
        return Err(HeatmapError::Unnormalized { sum, min });
    }
    let [d, h, w] = dims;
    let mut acc = Vector3::zeros();
    let mut idx = 0;
    for k in 0..d {
        for i in 0..h {
            for j in 0..w {
                let weight = volume[idx];
                acc += Vector3::new(k as f64, i as f64, j as f64) * weight;
                idx += 1;
            }
        }
    }
    Ok(acc)
}

/// Soft-argmax of `softmax(raw)` together with its gradient with respect to
/// every raw score: `∂c/∂s_v = w_v (x_v − c)`.
pub fn soft_argmax_with_gradient(
    raw: &[f64],
    dims: [usize; 3],
) -> Result<(Vector3<f64>, Vec<Vector3<f64>>), HeatmapError> {
    let expected: usize = dims.iter().product();
    if raw.len() != expected {
        return Err(HeatmapError::SizeMismatch {
            expected,
            actual: raw.len(),
        });
    }
    let weights = softmax(raw)?;
    let c = soft_argmax(&weights, dims)?;
    let [_, h, w] = dims;
    let grad = weights
        .iter()
        .enumerate()
        .map(|(v, wv)| {
            let x = Vector3::new((v / (h * w)) as f64, ((v / w) % h) as f64, (v % w) as f64);
            (x - c) * *wv
        })
        .collect();
    Ok((c, grad))
}

/// Maps a voxel-space coordinate `(k, i, j)` to root-relative millimeters.
pub fn voxel_to_metric(coord: &Vector3<f64>, spec: &VoxelGridSpec) -> Result<Vector3<f64>, HeatmapError> {
    let [d, h, w] = spec.dims;
    let upper = [d, h, w].map(|n| (n - 1) as f64);
    let eps = 1e-9;
    if (0..3).any(|a| !(coord[a] >= -eps && coord[a] <= upper[a] + eps)) {
        return Err(HeatmapError::OutOfBox([coord.x, coord.y, coord.z]));
    }
    let pitch = spec.pitch();
    Ok(Vector3::new(
        spec.min.x + (coord[2] + 0.5) * pitch.x,
        spec.min.y + (coord[1] + 0.5) * pitch.y,
        spec.min.z + (coord[0] + 0.5) * pitch.z,
    ))
}

/// Root-relative keypoints from normalized heatmaps.
pub fn keypoints_from_heatmaps(
    heatmap: &Heatmap3D,
    spec: &VoxelGridSpec,
) -> Result<KeypointSet, HeatmapError> {
    if heatmap.dims != spec.dims {
        return Err(HeatmapError::InvalidGrid(format!(
            "heatmap dims {:?} differ from grid {:?}",
            heatmap.dims, spec.dims
        )));
    }
    let points = heatmap
        .volumes
        .iter()
        .map(|v| voxel_to_metric(&soft_argmax(v, heatmap.dims)?, spec))
        .collect::<Result<_, _>>()?;
    Ok(KeypointSet::new(points, KeypointFrame::RootRelative))
}

/// Writes `HM3D`, version, `N`, `D`, `H'`, `W'` (u32 LE) then row-major f64 LE values.
pub fn write_heatmap<W: Write>(heatmap: &Heatmap3D, mut out: W) -> Result<(), HeatmapError> {
    out.write_all(DUMP_MAGIC)?;
    let header = [
        DUMP_VERSION,
        heatmap.volumes.len() as u32,
        heatmap.dims[0] as u32,
        heatmap.dims[1] as u32,
        heatmap.dims[2] as u32,
    ];
    for v in header {
        out.write_all(&v.to_le_bytes())?;
    }
    for vol in &heatmap.volumes {
        for v in vol {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_heatmap<R: Read>(mut input: R) -> Result<Heatmap3D, HeatmapError> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != DUMP_MAGIC {
        return Err(HeatmapError::Format("bad magic".into()));
    }
    let mut word = [0u8; 4];
    let mut header = [0u32; 5];
    for h in header.iter_mut() {
        input.read_exact(&mut word)?;
        *h = u32::from_le_bytes(word);
    }
    if header[0] != DUMP_VERSION {
        return Err(HeatmapError::Format(format!("unsupported version {}", header[0])));
    }
    let n = header[1] as usize;
    let dims = [header[2] as usize, header[3] as usize, header[4] as usize];
    let count: usize = dims.iter().product();
    let mut volumes = Vec::with_capacity(n);
    let mut buf = [0u8; 8];
    for _ in 0..n {
        let mut vol = Vec::with_capacity(count);
        for _ in 0..count {
            input.read_exact(&mut buf)?;
            vol.push(f64::from_le_bytes(buf));
        }
        volumes.push(vol);
    }
    Ok(Heatmap3D { dims, volumes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn delta(dims: [usize; 3], at: [usize; 3]) -> Vec<f64> {
        let mut v = vec![0.0; dims.iter().product()];
        v[(at[0] * dims[1] + at[1]) * dims[2] + at[2]] = 1.0;
        v
    }

    #[test]
    fn uniform_scores_give_uniform_weights() {
        let dims = [3, 4, 5];
        let h = normalize(dims, &[vec![2.5; 60]]).unwrap();
        assert!(h.volumes[0].iter().all(|w| (w - 1.0 / 60.0).abs() < 1e-15));
        // zero scores are a valid (uniform) input
        let z = normalize(dims, &[vec![0.0; 60]]).unwrap();
        assert_eq!(z.volumes[0], h.volumes[0]);
    }

    #[test]
    fn dominant_score_takes_the_mass() {
        let dims = [2, 2, 2];
        let mut raw = vec![0.0; 8];
        raw[5] = 50.0;
        let h = normalize(dims, &[raw]).unwrap();
        // 1 / (1 + 7 e^-50)
        assert_relative_eq!(h.volumes[0][5], 1.0 / (1.0 + 7.0 * (-50f64).exp()), epsilon = 1e-15);
        assert!(h.volumes[0][5] > 1.0 - 1e-15);
    }

    #[test]
    fn normalize_rejects_bad_volumes() {
        assert!(matches!(
            normalize([2, 2, 2], &[vec![0.0; 7]]),
            Err(HeatmapError::SizeMismatch { .. })
        ));
        assert!(matches!(
            normalize([1, 1, 2], &[vec![0.0, f64::NAN]]),
            Err(HeatmapError::NonFinite)
        ));
    }

    #[test]
    fn soft_argmax_examples() {
        let dims = [5, 6, 7];
        assert_eq!(soft_argmax(&delta(dims, [2, 3, 4]), dims).unwrap(), Vector3::new(2.0, 3.0, 4.0));
        assert_eq!(soft_argmax(&[0.125; 8], [2, 2, 2]).unwrap(), Vector3::new(0.5, 0.5, 0.5));
        let mut two = vec![0.0; 8];
        two[0] = 0.5;
        two[7] = 0.5;
        assert_eq!(soft_argmax(&two, [2, 2, 2]).unwrap(), Vector3::new(0.5, 0.5, 0.5));
        assert!(matches!(
            soft_argmax(&[0.2; 8], [2, 2, 2]),
            Err(HeatmapError::Unnormalized { .. })
        ));
    }

    #[test]
    fn voxel_to_metric_examples() {
        let spec = VoxelGridSpec::new(
            [64, 64, 64],
            Vector3::repeat(-1000.0),
            Vector3::repeat(1000.0),
        )
        .unwrap();
        let center = voxel_to_metric(&Vector3::repeat(31.5), &spec).unwrap();
        assert_relative_eq!(center, Vector3::zeros(), epsilon = 1e-12);
        // first voxel center: -1000 + 2000/64/2
        let corner = voxel_to_metric(&Vector3::zeros(), &spec).unwrap();
        assert_relative_eq!(corner, Vector3::repeat(-984.375), epsilon = 1e-12);
        assert!(matches!(
            voxel_to_metric(&Vector3::new(0.0, 64.0, 0.0), &spec),
            Err(HeatmapError::OutOfBox(_))
        ));

        let flat = VoxelGridSpec::new(
            [1, 8, 8],
            Vector3::new(0.0, 0.0, 100.0),
            Vector3::new(80.0, 80.0, 300.0),
        )
        .unwrap();
        let p = voxel_to_metric(&Vector3::new(0.0, 0.0, 0.0), &flat).unwrap();
        assert_eq!(p.z, 200.0);
    }

    #[test]
    fn keypoints_from_delta_and_uniform_volumes() {
        let dims = [5, 5, 5];
        let spec = VoxelGridSpec::new(dims, Vector3::new(-50.0, -60.0, -70.0), Vector3::new(50.0, 40.0, 30.0)).unwrap();
        let h = Heatmap3D {
            dims,
            volumes: vec![delta(dims, [2, 2, 2]); 3],
        };
        let kp = keypoints_from_heatmaps(&h, &spec).unwrap();
        assert_eq!(kp.frame, KeypointFrame::RootRelative);
        for p in &kp.points {
            assert_relative_eq!(*p, Vector3::new(0.0, -10.0, -20.0), epsilon = 1e-12);
        }
        let u = normalize(dims, &[vec![0.0; 125]]).unwrap();
        let kp = keypoints_from_heatmaps(&u, &spec).unwrap();
        assert_relative_eq!(kp.points[0], Vector3::new(0.0, -10.0, -20.0), epsilon = 1e-9);
    }

    #[test]
    fn gaussian_volumes_recover_points() {
        let dims = [32, 32, 32];
        let spec = VoxelGridSpec::new(dims, Vector3::repeat(-800.0), Vector3::repeat(800.0)).unwrap();
        let pitch = spec.pitch();
        let targets = [
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(123.0, -321.0, 250.0),
            Vector3::new(-400.0, 410.0, -90.0),
        ];
        let sigma = 1.5;
        let raw: Vec<Vec<f64>> = targets
            .iter()
            .map(|t| {
                let c = spec.metric_to_voxel(t);
                let mut v = Vec::with_capacity(spec.voxel_count());
                for k in 0..32 {
                    for i in 0..32 {
                        for j in 0..32 {
                            let d2 = (k as f64 - c[0]).powi(2) + (i as f64 - c[1]).powi(2) + (j as f64 - c[2]).powi(2);
                            v.push(-d2 / (2.0 * sigma * sigma));
                        }
                    }
                }
                v
            })
            .collect();
        let h = normalize(dims, &raw).unwrap();
        let kp = keypoints_from_heatmaps(&h, &spec).unwrap();
        for (p, t) in kp.points.iter().zip(&targets) {
            let err = p - t;
            assert!(err.x.abs() < pitch.x / 2.0 && err.y.abs() < pitch.y / 2.0 && err.z.abs() < pitch.z / 2.0, "{p:?} vs {t:?}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let dims = [3, 4, 2];
        let raw: Vec<f64> = (0..24).map(|v| ((v * 37 % 11) as f64 - 5.0) * 0.3).collect();
        let (c, grad) = soft_argmax_with_gradient(&raw, dims).unwrap();
        let h = 1e-6;
        for v in 0..raw.len() {
            let mut p = raw.clone();
            let mut m = raw.clone();
            p[v] += h;
            m[v] -= h;
            let fp = soft_argmax_with_gradient(&p, dims).unwrap().0;
            let fm = soft_argmax_with_gradient(&m, dims).unwrap().0;
            let fd = (fp - fm) / (2.0 * h);
            let scale = grad[v].amax().max(1e-3);
            assert!((fd - grad[v]).amax() / scale < 1e-5, "voxel {v}");
        }
        assert!(c.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn dump_round_trip() {
        let h = normalize([2, 3, 4], &[vec![0.1; 24], (0..24).map(|v| v as f64).collect()]).unwrap();
        let mut bytes = Vec::new();
        write_heatmap(&h, &mut bytes).unwrap();
        assert_eq!(bytes.len(), 4 + 5 * 4 + 2 * 24 * 8);
        assert_eq!(read_heatmap(bytes.as_slice()).unwrap(), h);
        assert!(matches!(read_heatmap(&b"NOPE"[..]), Err(HeatmapError::Format(_))));
    }

    proptest! {
        #[test]
        fn stays_in_support_hull(
            raw in prop::collection::vec(-3.0..3.0f64, 27),
            mask in prop::collection::vec(any::<bool>(), 27)
        ) {
            // zero out weight on masked voxels, renormalize by hand
            let dims = [3, 3, 3];
            let w = normalize(dims, &[raw]).unwrap().volumes.remove(0);
            let kept: Vec<f64> = w.iter().zip(&mask).map(|(v, m)| if *m { *v } else { 0.0 }).collect();
            let sum: f64 = kept.iter().sum();
            prop_assume!(sum > 0.0);
            let kept: Vec<f64> = kept.iter().map(|v| v / sum).collect();
            prop_assume!(((kept.iter().sum::<f64>()) - 1.0).abs() < 1e-12);
            let c = soft_argmax(&kept, dims).unwrap();
            let mut lo = Vector3::repeat(f64::INFINITY);
            let mut hi = Vector3::repeat(f64::NEG_INFINITY);
            for (v, m) in kept.iter().enumerate() {
                if *m > 0.0 {
                    let x = Vector3::new((v / 9) as f64, ((v / 3) % 3) as f64, (v % 3) as f64);
                    lo = lo.inf(&x);
                    hi = hi.sup(&x);
                }
            }
            for a in 0..3 {
                prop_assert!(c[a] >= lo[a] - 1e-12 && c[a] <= hi[a] + 1e-12);
            }
        }

        #[test]
        fn mirroring_mirrors_coordinate(raw in prop::collection::vec(-4.0..4.0f64, 60)) {
            let dims = [3, 4, 5];
            let w = normalize(dims, &[raw]).unwrap().volumes.remove(0);
            let c = soft_argmax(&w, dims).unwrap();
            // mirror along j (W' axis)
            let mut m = vec![0.0; 60];
            for k in 0..3 { for i in 0..4 { for j in 0..5 {
                m[(k * 4 + i) * 5 + (4 - j)] = w[(k * 4 + i) * 5 + j];
            }}}
            let cm = soft_argmax(&m, dims).unwrap();
            prop_assert!((cm[2] - (4.0 - c[2])).abs() < 1e-9);
            prop_assert!((cm[0] - c[0]).abs() < 1e-9 && (cm[1] - c[1]).abs() < 1e-9);
        }
    }
}
