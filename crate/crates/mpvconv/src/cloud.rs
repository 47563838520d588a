//! Point clouds and the coordinate normalization that maps them into the
//! unit cube.
//!
//! Coordinates are kept in `f64` end to end: they never carry gradients, and
//! double precision keeps the normalization invariant under large
//! translations where `f32` would lose the geometry to cancellation.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// A raw point cloud: world-space coordinates, per-point features `[N,C1]`
/// and optional per-point part labels.
#[derive(Clone, Debug)]
pub struct RawCloud<T> {
    pub coords: Vec<[f64; 3]>,
    pub features: Tensor<T>,
    pub labels: Option<Vec<u32>>,
}

impl<T: Scalar> RawCloud<T> {
    pub fn new(coords: Vec<[f64; 3]>, features: Tensor<T>, labels: Option<Vec<u32>>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::InvalidArgument("point cloud must have N >= 1".into()));
        }
        if coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "RawCloud coordinates".into(),
            });
        }
        if features.rank() != 2 || features.shape()[0] != coords.len() {
            return Err(Error::ShapeMismatch {
                context: "RawCloud features".into(),
                expected: format!("[{},C1]", coords.len()),
                got: format!("{:?}", features.shape()),
            });
        }
        if let Some(labels) = &labels {
            if labels.len() != coords.len() {
                return Err(Error::ShapeMismatch {
                    context: "RawCloud labels".into(),
                    expected: format!("{}", coords.len()),
                    got: format!("{}", labels.len()),
                });
            }
        }
        Ok(Self {
            coords,
            features,
            labels,
        })
    }

    pub fn num_points(&self) -> usize {
        self.coords.len()
    }

    pub fn feature_channels(&self) -> usize {
        self.features.shape()[1]
    }
}

/// Cloud after coordinate normalization: every coordinate lies in `[0,1]`,
/// the centroid maps to the cube center, features pass through untouched.
#[derive(Clone, Debug)]
pub struct NormalizedCloud<T> {
    pub coords_hat: Vec<[f64; 3]>,
    pub features: Tensor<T>,
    pub centroid: [f64; 3],
    pub radius: f64,
}

/// Center the cloud on its centroid, measure the farthest-point radius, and
/// map every point into the unit cube:
/// `p_hat = (p - centroid) / (2 * radius) + 0.5`.
///
/// A zero radius (all points coincide) maps everything to the cube center
/// rather than erroring.
pub fn normalize_coords<T: Scalar>(cloud: &RawCloud<T>) -> Result<NormalizedCloud<T>> {
    let n = cloud.num_points();
    if cloud.coords.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "normalize_coords input".into(),
        });
    }

    let mut centroid = [0.0f64; 3];
    for p in &cloud.coords {
        for a in 0..3 {
            centroid[a] += p[a];
        }
    }
    for a in 0..3 {
        centroid[a] /= n as f64;
    }

    let mut radius = 0.0f64;
    for p in &cloud.coords {
        let mut sq = 0.0;
        for a in 0..3 {
            let d = p[a] - centroid[a];
            sq += d * d;
        }
        radius = radius.max(sq.sqrt());
    }

    let coords_hat = if radius == 0.0 {
        vec![[0.5; 3]; n]
    } else {
        let inv = 1.0 / (2.0 * radius);
        cloud
            .coords
            .iter()
            .map(|p| {
                let mut q = [0.0f64; 3];
                for a in 0..3 {
                    // Roundoff can land a hair outside [0,1]; clamp.
                    q[a] = ((p[a] - centroid[a]) * inv + 0.5).clamp(0.0, 1.0);
                }
                q
            })
            .collect()
    };

    Ok(NormalizedCloud {
        coords_hat,
        features: cloud.features.clone(),
        centroid,
        radius,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud_from(coords: Vec<[f64; 3]>) -> RawCloud<f64> {
        let n = coords.len();
        RawCloud::new(coords, Tensor::full(&[n, 1], 1.0), None).unwrap()
    }

    #[test]
    fn symmetric_pair_lands_on_cube_faces() {
        let cloud = cloud_from(vec![[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let norm = normalize_coords(&cloud).unwrap();
        assert_eq!(norm.centroid, [0.0, 0.0, 0.0]);
        assert_eq!(norm.radius, 1.0);
        assert_eq!(norm.coords_hat[0], [0.0, 0.5, 0.5]);
        assert_eq!(norm.coords_hat[1], [1.0, 0.5, 0.5]);
    }

    #[test]
    fn coincident_points_map_to_center() {
        let cloud = cloud_from(vec![[7.0, -3.0, 2.0]; 4]);
        let norm = normalize_coords(&cloud).unwrap();
        assert_eq!(norm.radius, 0.0);
        assert!(norm.coords_hat.iter().all(|p| *p == [0.5, 0.5, 0.5]));
    }

    #[test]
    fn triangle_example_matches_direct_evaluation() {
        let cloud = cloud_from(vec![[2.0, 2.0, 2.0], [4.0, 2.0, 2.0], [2.0, 4.0, 2.0]]);
        let norm = normalize_coords(&cloud).unwrap();
        let c = 8.0 / 3.0;
        assert!((norm.centroid[0] - c).abs() < 1e-12);
        assert!((norm.centroid[1] - c).abs() < 1e-12);
        assert!((norm.centroid[2] - 2.0).abs() < 1e-12);
        assert!((norm.radius - 20.0f64.sqrt() / 3.0).abs() < 1e-12);
        let p0 = norm.coords_hat[0];
        assert!((p0[0] - 0.2764).abs() < 1e-4);
        assert!((p0[1] - 0.2764).abs() < 1e-4);
        assert!((p0[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn similarity_invariance() {
        use rand::Rng;
        let mut rng = crate::nn::seeded_rng(42, "similarity");
        for _ in 0..20 {
            let coords: Vec<[f64; 3]> = (0..32)
                .map(|_| {
                    [
                        rng.random::<f64>() * 2.0 - 1.0,
                        rng.random::<f64>() * 2.0 - 1.0,
                        rng.random::<f64>() * 2.0 - 1.0,
                    ]
                })
                .collect();
            let s = 0.1 + rng.random::<f64>() * 9.9;
            let t = [
                rng.random::<f64>() * 200.0 - 100.0,
                rng.random::<f64>() * 200.0 - 100.0,
                rng.random::<f64>() * 200.0 - 100.0,
            ];
            let moved: Vec<[f64; 3]> = coords
                .iter()
                .map(|p| [p[0] * s + t[0], p[1] * s + t[1], p[2] * s + t[2]])
                .collect();
            let a = normalize_coords(&cloud_from(coords)).unwrap();
            let b = normalize_coords(&cloud_from(moved)).unwrap();
            for (pa, pb) in a.coords_hat.iter().zip(&b.coords_hat) {
                for axis in 0..3 {
                    assert!((pa[axis] - pb[axis]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn output_stays_in_unit_cube_and_features_pass_through() {
        let coords = vec![[10.0, -5.0, 3.0], [11.0, -4.0, 2.0], [9.5, -6.0, 3.5]];
        let features = Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let cloud = RawCloud::new(coords, features.clone(), None).unwrap();
        let norm = normalize_coords(&cloud).unwrap();
        assert!(norm
            .coords_hat
            .iter()
            .flatten()
            .all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(norm.features, features);
    }

    #[test]
    fn rejects_non_finite_coords() {
        let features = Tensor::full(&[1, 1], 1.0f32);
        assert!(RawCloud::new(vec![[f64::NAN, 0.0, 0.0]], features, None).is_err());
    }

    proptest::proptest! {
        #[test]
        fn prop_output_in_unit_cube_with_centered_centroid(
            raw in proptest::collection::vec(
                (-100.0f64..100.0, -100.0f64..100.0, -100.0f64..100.0),
                1..40,
            )
        ) {
            let coords: Vec<[f64; 3]> = raw.into_iter().map(|(a, b, c)| [a, b, c]).collect();
            let n = coords.len();
            let cloud = RawCloud::new(coords, Tensor::<f64>::full(&[n, 1], 1.0), None).unwrap();
            let norm = normalize_coords(&cloud).unwrap();
            proptest::prop_assert!(norm
                .coords_hat
                .iter()
                .flatten()
                .all(|&v| (0.0..=1.0).contains(&v)));
            let mut centroid = [0.0f64; 3];
            for p in &norm.coords_hat {
                for a in 0..3 {
                    centroid[a] += p[a];
                }
            }
            for c in centroid {
                proptest::prop_assert!((c / n as f64 - 0.5).abs() < 1e-6);
            }
        }
    }
}
