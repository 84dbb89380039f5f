use std::collections::HashMap;

use rand::Rng;

use super::sh::{rgb_to_dc, sh_basis_len};
use super::GaussianSet;
use crate::error::{Error, Result};
use crate::math::{logit, Vec3};
use crate::render::CameraModel;

#[derive(Clone, Debug)]
pub struct InitOptions {
    pub voxel_size: f64,
    pub sh_degree: usize,
    pub initial_opacity: f64,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self {
            voxel_size: 0.15,
            sh_degree: 3,
            initial_opacity: 0.1,
        }
    }
}

type VoxelKey = (i64, i64, i64);

fn voxel_key(p: &[f64; 3], size: f64) -> VoxelKey {
    (
        (p[0] / size).floor() as i64,
        (p[1] / size).floor() as i64,
        (p[2] / size).floor() as i64,
    )
}

/// One centroid per occupied voxel, ordered by voxel index.
///
/// Points inside a voxel are summed in sorted order so the result does not
/// depend on the order of the input.
pub fn voxel_downsample(points: &[[f64; 3]], voxel_size: f64) -> Vec<[f64; 3]> {
    let mut cells: HashMap<VoxelKey, Vec<[f64; 3]>> = HashMap::new();
    for p in points {
        cells.entry(voxel_key(p, voxel_size)).or_default().push(*p);
    }
    let mut keys: Vec<VoxelKey> = cells.keys().copied().collect();
    keys.sort_unstable();
    keys.into_iter()
        .map(|k| {
            let pts = cells.get_mut(&k).expect("key from map");
            pts.sort_by(|a, b| {
                a[0].total_cmp(&b[0])
                    .then(a[1].total_cmp(&b[1]))
                    .then(a[2].total_cmp(&b[2]))
            });
            let n = pts.len() as f64;
            let mut c = [0.0; 3];
            for p in pts.iter() {
                for d in 0..3 {
                    c[d] += p[d];
                }
            }
            c.map(|v| v / n)
        })
        .collect()
}

fn visible_in_any(p: &[f64; 3], cameras: &[CameraModel]) -> bool {
    let p = Vec3::from(*p);
    cameras.iter().any(|cam| {
        let pc = cam.to_camera(&p);
        if pc.z <= cam.near || pc.z >= cam.far {
            return false;
        }
        let uv = cam.project_camera(&pc);
        uv.x >= 0.0 && uv.y >= 0.0 && uv.x < cam.width as f64 && uv.y < cam.height as f64
    })
}

/// Mean distance from each point to its `k` nearest neighbours, using a
/// uniform grid with shells searched outward until the answer is settled.
pub(crate) fn knn_mean_distance(points: &[[f64; 3]], k: usize, cell: f64) -> Vec<f64> {
    let mut grid: HashMap<VoxelKey, Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        grid.entry(voxel_key(p, cell)).or_default().push(i);
    }
    let (lo, hi) = grid.keys().fold(
        ((i64::MAX, i64::MAX, i64::MAX), (i64::MIN, i64::MIN, i64::MIN)),
        |(lo, hi), k| {
            (
                (lo.0.min(k.0), lo.1.min(k.1), lo.2.min(k.2)),
                (hi.0.max(k.0), hi.1.max(k.1), hi.2.max(k.2)),
            )
        },
    );
    let max_ring = (hi.0 - lo.0).max(hi.1 - lo.1).max(hi.2 - lo.2) + 1;

    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let c = voxel_key(p, cell);
            let mut best: Vec<f64> = Vec::with_capacity(k + 1);
            for ring in 0..=max_ring {
                // Everything outside `ring` cells is at least this far away.
                let settled = (ring as f64 - 1.0).max(0.0) * cell;
                if best.len() == k && best[k - 1] <= settled {
                    break;
                }
                for dx in -ring..=ring {
                    for dy in -ring..=ring {
                        for dz in -ring..=ring {
                            if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                                continue;
                            }
                            let Some(ids) = grid.get(&(c.0 + dx, c.1 + dy, c.2 + dz)) else {
                                continue;
                            };
                            for &j in ids {
                                if j == i {
                                    continue;
                                }
                                let d = crate::math::dist3(p, &points[j]);
                                let pos = best.partition_point(|&b| b <= d);
                                if pos < k {
                                    best.insert(pos, d);
                                    best.truncate(k);
                                }
                            }
                        }
                    }
                }
            }
            if best.is_empty() {
                cell
            } else {
                best.iter().sum::<f64>() / best.len() as f64
            }
        })
        .collect()
}

/// Builds the canonical Gaussian set from a point-cloud prior.
///
/// Points are voxel-downsampled to centroids, and those not projecting into
/// any camera image are dropped. Survivors get random base colours, an
/// isotropic scale equal to the mean 3-NN distance, identity rotation and
/// the configured initial opacity.
pub fn init_from_points<R: Rng>(
    points: &[[f64; 3]],
    cameras: &[CameraModel],
    opts: &InitOptions,
    rng: &mut R,
) -> Result<GaussianSet> {
    if points.is_empty() {
        return Err(Error::invalid("point cloud is empty"));
    }
    if !(opts.voxel_size > 0.0 && opts.voxel_size.is_finite()) {
        return Err(Error::invalid("voxel size must be positive"));
    }
    if !(opts.initial_opacity > 0.0 && opts.initial_opacity < 1.0) {
        return Err(Error::invalid("initial opacity must lie in (0, 1)"));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("point cloud contains non-finite coordinates"));
    }

    let survivors: Vec<[f64; 3]> = voxel_downsample(points, opts.voxel_size)
        .into_iter()
        .filter(|p| visible_in_any(p, cameras))
        .collect();
    if survivors.is_empty() {
        return Err(Error::EmptyInitialization);
    }

    let dists = knn_mean_distance(&survivors, 3, opts.voxel_size);
    let stride = 3 * sh_basis_len(opts.sh_degree);
    let opacity_logit = logit(opts.initial_opacity);
    let mut scene = GaussianSet::empty(opts.sh_degree);
    let mut sh = vec![0.0; stride];
    for (p, d) in survivors.iter().zip(&dists) {
        for c in sh[..3].iter_mut() {
            *c = rgb_to_dc(rng.random_range(0.0..1.0));
        }
        let ls = d.max(1e-7).ln();
        scene.push(*p, [ls; 3], [1.0, 0.0, 0.0, 0.0], opacity_logit, &sh);
    }
    Ok(scene)
}
