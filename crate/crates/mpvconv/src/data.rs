//! Dataset plumbing: a plain-text cloud format, a synthetic two-part sphere
//! generator, and per-point prediction dumps for external plotting.
//!
//! Cloud file format (UTF-8 text):
//! ```text
//! MPV1 <N> <C1> <K>
//! x y z f1 .. fC1 label      (N lines)
//! ```
//! Prediction dump:
//! ```text
//! MPVPRED <N>
//! x y z true pred            (N lines)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::cloud::RawCloud;
use crate::error::{Error, Result};
use crate::nn::seeded_rng;
use crate::tensor::{Scalar, Tensor};

/// A labeled point-cloud dataset.
#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub samples: Vec<RawCloud<T>>,
    pub class_count: usize,
    pub part_names: Option<Vec<String>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(samples: Vec<RawCloud<T>>, class_count: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("dataset must be nonempty".into()));
        }
        let c1 = samples[0].feature_channels();
        for (i, sample) in samples.iter().enumerate() {
            if sample.feature_channels() != c1 {
                return Err(Error::InvalidArgument(format!(
                    "sample {i} has {} feature channels, expected {c1}",
                    sample.feature_channels()
                )));
            }
            if let Some(labels) = &sample.labels {
                if let Some(&bad) = labels.iter().find(|&&l| l as usize >= class_count) {
                    return Err(Error::InvalidArgument(format!(
                        "sample {i} has label {bad} >= class count {class_count}"
                    )));
                }
            }
        }
        Ok(Self {
            samples,
            class_count,
            part_names: None,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_channels(&self) -> usize {
        self.samples[0].feature_channels()
    }
}

/// Parameters of the synthetic dataset generator.
#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub points_per_cloud: usize,
    pub noise_sigma: f64,
}

/// Unit-sphere point sets split into two parts by the canonical z sign.
/// Every sample gets a random azimuthal rotation and translation; the labels
/// are assigned in the canonical frame before the Gaussian coordinate noise
/// and the pose are applied. Features are a single constant-1 channel.
pub fn generate_synthetic<T: Scalar>(spec: &SyntheticSpec, seed: u64) -> Result<Dataset<T>> {
    if spec.points_per_cloud < 16 {
        return Err(Error::InvalidArgument(format!(
            "points_per_cloud must be >= 16, got {}",
            spec.points_per_cloud
        )));
    }
    if spec.n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
    }
    let mut rng = seeded_rng(seed, "synthetic-hemispheres");
    let mut samples = Vec::with_capacity(spec.n_samples);
    for _ in 0..spec.n_samples {
        let theta = rng.random::<f64>() * std::f64::consts::TAU;
        let (sin_t, cos_t) = theta.sin_cos();
        let translation = [
            rng.random::<f64>() * 6.0 - 3.0,
            rng.random::<f64>() * 6.0 - 3.0,
            rng.random::<f64>() * 6.0 - 3.0,
        ];
        let n = spec.points_per_cloud;
        let mut coords = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            // Uniform on the unit sphere: z uniform, azimuth uniform.
            let z = rng.random::<f64>() * 2.0 - 1.0;
            let phi = rng.random::<f64>() * std::f64::consts::TAU;
            let rho = (1.0 - z * z).max(0.0).sqrt();
            let p = [rho * phi.cos(), rho * phi.sin(), z];
            labels.push(if z > 0.0 { 1u32 } else { 0u32 });

            let mut gauss = || -> f64 { StandardNormal.sample(&mut rng) };
            let noisy = [
                p[0] + spec.noise_sigma * gauss(),
                p[1] + spec.noise_sigma * gauss(),
                p[2] + spec.noise_sigma * gauss(),
            ];
            coords.push([
                cos_t * noisy[0] - sin_t * noisy[1] + translation[0],
                sin_t * noisy[0] + cos_t * noisy[1] + translation[1],
                noisy[2] + translation[2],
            ]);
        }
        let features = Tensor::full(&[n, 1], T::one());
        samples.push(RawCloud::new(coords, features, Some(labels))?);
    }
    let mut dataset = Dataset::new(samples, 2)?;
    dataset.part_names = Some(vec!["lower".into(), "upper".into()]);
    Ok(dataset)
}

fn parse_float(tok: &str, path: &Path, line: usize) -> Result<f64> {
    let v: f64 = tok.parse().map_err(|_| Error::Parse {
        path: path.into(),
        line,
        msg: format!("invalid number `{tok}`"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            path: path.into(),
            line,
            msg: format!("non-finite value `{tok}`"),
        });
    }
    Ok(v)
}

/// Parse a cloud file, returning the cloud and its declared class count.
pub fn load_cloud<T: Scalar>(path: impl AsRef<Path>) -> Result<(RawCloud<T>, usize)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();

    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        path: path.into(),
        line: 1,
        msg: "empty file".into(),
    })?;
    let head: Vec<&str> = header.split_whitespace().collect();
    if head.len() != 4 || head[0] != "MPV1" {
        return Err(Error::Parse {
            path: path.into(),
            line: 1,
            msg: format!("expected header `MPV1 <N> <C1> <K>`, got `{header}`"),
        });
    }
    let parse_usize = |tok: &str, what: &str| -> Result<usize> {
        tok.parse().map_err(|_| Error::Parse {
            path: path.into(),
            line: 1,
            msg: format!("invalid {what} `{tok}`"),
        })
    };
    let n = parse_usize(head[1], "point count")?;
    let c1 = parse_usize(head[2], "channel count")?;
    let k = parse_usize(head[3], "class count")?;
    if n == 0 || c1 == 0 || k < 2 {
        return Err(Error::Parse {
            path: path.into(),
            line: 1,
            msg: format!("header requires N >= 1, C1 >= 1, K >= 2, got N={n} C1={c1} K={k}"),
        });
    }

    let mut coords = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n * c1);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let (idx, line) = lines.next().ok_or_else(|| Error::Parse {
            path: path.into(),
            line: n + 1,
            msg: format!("expected {n} data lines, file ended early"),
        })?;
        let lineno = idx + 1;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 3 + c1 + 1 {
            return Err(Error::Parse {
                path: path.into(),
                line: lineno,
                msg: format!("expected {} columns, got {}", 3 + c1 + 1, toks.len()),
            });
        }
        coords.push([
            parse_float(toks[0], path, lineno)?,
            parse_float(toks[1], path, lineno)?,
            parse_float(toks[2], path, lineno)?,
        ]);
        for tok in &toks[3..3 + c1] {
            features.push(T::from_f64(parse_float(tok, path, lineno)?));
        }
        let label: u32 = toks[3 + c1].parse().map_err(|_| Error::Parse {
            path: path.into(),
            line: lineno,
            msg: format!("invalid label `{}`", toks[3 + c1]),
        })?;
        if label as usize >= k {
            return Err(Error::Parse {
                path: path.into(),
                line: lineno,
                msg: format!("label {label} >= class count {k}"),
            });
        }
        labels.push(label);
    }

    let cloud = RawCloud::new(coords, Tensor::new(&[n, c1], features)?, Some(labels))?;
    Ok((cloud, k))
}

/// Write a cloud in the text format. Floats use the shortest representation
/// that round-trips, so save/load preserves the values.
pub fn save_cloud<T: Scalar>(
    cloud: &RawCloud<T>,
    class_count: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let labels = cloud.labels.as_ref().ok_or_else(|| {
        Error::InvalidArgument("save_cloud requires a labeled cloud".into())
    })?;
    let (n, c1) = (cloud.num_points(), cloud.feature_channels());
    let mut out = String::new();
    out.push_str(&format!("MPV1 {n} {c1} {class_count}\n"));
    for i in 0..n {
        let p = cloud.coords[i];
        out.push_str(&format!("{} {} {}", p[0], p[1], p[2]));
        for ch in 0..c1 {
            out.push_str(&format!(" {}", cloud.features.at(&[i, ch])));
        }
        out.push_str(&format!(" {}\n", labels[i]));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Load every `*.mpv` file of a directory (sorted by file name) as one
/// dataset. All files must declare the same class count.
pub fn load_dataset_dir<T: Scalar>(dir: impl AsRef<Path>) -> Result<Dataset<T>> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "mpv"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no .mpv files in {}",
            dir.display()
        )));
    }
    let mut samples = Vec::with_capacity(paths.len());
    let mut class_count = None;
    for path in &paths {
        let (cloud, k) = load_cloud(path)?;
        match class_count {
            None => class_count = Some(k),
            Some(existing) if existing != k => {
                return Err(Error::InvalidArgument(format!(
                    "{} declares {k} classes but earlier files declared {existing}",
                    path.display()
                )));
            }
            _ => {}
        }
        samples.push(cloud);
    }
    Dataset::new(samples, class_count.unwrap())
}

/// Write per-point `x y z true pred` lines for external plotting.
pub fn dump_predictions<T: Scalar>(
    cloud: &RawCloud<T>,
    predicted: &[u32],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let labels = cloud.labels.as_ref().ok_or_else(|| {
        Error::InvalidArgument("dump_predictions requires a labeled cloud".into())
    })?;
    if predicted.len() != cloud.num_points() {
        return Err(Error::ShapeMismatch {
            context: "dump_predictions".into(),
            expected: format!("{} predictions", cloud.num_points()),
            got: format!("{}", predicted.len()),
        });
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let write = |w: &mut dyn Write| -> std::io::Result<()> {
        writeln!(w, "MPVPRED {}", cloud.num_points())?;
        for i in 0..cloud.num_points() {
            let p = cloud.coords[i];
            writeln!(w, "{} {} {} {} {}", p[0], p[1], p[2], labels[i], predicted[i])?;
        }
        Ok(())
    };
    write(&mut w).map_err(|e| Error::io(path, e))
}

/// Read back a prediction dump: (coords, true labels, predicted labels).
pub fn read_prediction_dump(
    path: impl AsRef<Path>,
) -> Result<(Vec<[f64; 3]>, Vec<u32>, Vec<u32>)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        path: path.into(),
        line: 1,
        msg: "empty file".into(),
    })?;
    let head: Vec<&str> = header.split_whitespace().collect();
    if head.len() != 2 || head[0] != "MPVPRED" {
        return Err(Error::Parse {
            path: path.into(),
            line: 1,
            msg: format!("expected header `MPVPRED <N>`, got `{header}`"),
        });
    }
    let n: usize = head[1].parse().map_err(|_| Error::Parse {
        path: path.into(),
        line: 1,
        msg: format!("invalid point count `{}`", head[1]),
    })?;
    let mut coords = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    let mut pred = Vec::with_capacity(n);
    for _ in 0..n {
        let (idx, line) = lines.next().ok_or_else(|| Error::Parse {
            path: path.into(),
            line: n + 1,
            msg: "file ended early".into(),
        })?;
        let lineno = idx + 1;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 5 {
            return Err(Error::Parse {
                path: path.into(),
                line: lineno,
                msg: format!("expected 5 columns, got {}", toks.len()),
            });
        }
        coords.push([
            parse_float(toks[0], path, lineno)?,
            parse_float(toks[1], path, lineno)?,
            parse_float(toks[2], path, lineno)?,
        ]);
        let parse_label = |tok: &str| -> Result<u32> {
            tok.parse().map_err(|_| Error::Parse {
                path: path.into(),
                line: lineno,
                msg: format!("invalid label `{tok}`"),
            })
        };
        truth.push(parse_label(toks[3])?);
        pred.push(parse_label(toks[4])?);
    }
    Ok((coords, truth, pred))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let spec = SyntheticSpec {
            n_samples: 3,
            points_per_cloud: 512,
            noise_sigma: 0.02,
        };
        let a = generate_synthetic::<f32>(&spec, 7).unwrap();
        let b = generate_synthetic::<f32>(&spec, 7).unwrap();
        assert_eq!(a.len(), 3);
        for (sa, sb) in a.samples.iter().zip(&b.samples) {
            assert_eq!(sa.coords, sb.coords);
            assert_eq!(sa.labels, sb.labels);
        }
        for sample in &a.samples {
            let ones = sample
                .labels
                .as_ref()
                .unwrap()
                .iter()
                .filter(|&&l| l == 1)
                .count() as f64;
            let frac = ones / 512.0;
            assert!((0.4..=0.6).contains(&frac), "hemisphere balance {frac}");
        }
    }

    #[test]
    fn label_balance_holds_across_100_seeds() {
        let spec = SyntheticSpec {
            n_samples: 1,
            points_per_cloud: 512,
            noise_sigma: 0.02,
        };
        for seed in 0..100 {
            let set = generate_synthetic::<f32>(&spec, seed).unwrap();
            let ones = set.samples[0]
                .labels
                .as_ref()
                .unwrap()
                .iter()
                .filter(|&&l| l == 1)
                .count() as f64;
            let frac = ones / 512.0;
            assert!((0.4..=0.6).contains(&frac), "seed {seed}: balance {frac}");
        }
    }

    #[test]
    fn noiseless_labels_follow_canonical_z_sign() {
        let spec = SyntheticSpec {
            n_samples: 2,
            points_per_cloud: 64,
            noise_sigma: 0.0,
        };
        let set = generate_synthetic::<f32>(&spec, 3).unwrap();
        for sample in &set.samples {
            // The azimuthal pose preserves the z ordering, so without noise
            // the two parts are separated by a clean z threshold.
            let labels = sample.labels.as_ref().unwrap();
            let zs: Vec<f64> = sample.coords.iter().map(|p| p[2]).collect();
            let max_lower = zs
                .iter()
                .zip(labels)
                .filter(|(_, &l)| l == 0)
                .map(|(&z, _)| z)
                .fold(f64::MIN, f64::max);
            let min_upper = zs
                .iter()
                .zip(labels)
                .filter(|(_, &l)| l == 1)
                .map(|(&z, _)| z)
                .fold(f64::MAX, f64::min);
            assert!(max_lower < min_upper, "{max_lower} vs {min_upper}");
        }
    }

    #[test]
    fn generator_rejects_tiny_clouds() {
        let spec = SyntheticSpec {
            n_samples: 1,
            points_per_cloud: 8,
            noise_sigma: 0.0,
        };
        assert!(generate_synthetic::<f32>(&spec, 0).is_err());
    }

    #[test]
    fn cloud_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cloud.mpv");
        let spec = SyntheticSpec {
            n_samples: 1,
            points_per_cloud: 32,
            noise_sigma: 0.05,
        };
        let set = generate_synthetic::<f32>(&spec, 5).unwrap();
        save_cloud(&set.samples[0], set.class_count, &path).unwrap();
        let (loaded, k) = load_cloud::<f32>(&path).unwrap();
        assert_eq!(k, 2);
        assert_eq!(loaded.labels, set.samples[0].labels);
        assert_eq!(loaded.features, set.samples[0].features);
        // Coordinates round-trip through the shortest representation.
        assert_eq!(loaded.coords, set.samples[0].coords);
    }

    #[test]
    fn load_cloud_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.mpv");
        fs::write(&path, "MPV1 2 1 3\n0 0 0 1 0\n0 0 1\n").unwrap();
        let err = load_cloud::<f32>(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(":3"), "{msg}");
        assert!(msg.contains("columns"), "{msg}");

        fs::write(&path, "MPV1 1 1 2\n0 0 0 1 7\n").unwrap();
        let err = load_cloud::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("label 7"), "{err}");

        fs::write(&path, "MPVX 1 1 2\n").unwrap();
        assert!(load_cloud::<f32>(&path).is_err());
    }

    #[test]
    fn header_example_parses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("two.mpv");
        fs::write(&path, "MPV1 2 1 3\n0.5 0 0 1.25 0\n1 2 3 -0.5 2\n").unwrap();
        let (cloud, k) = load_cloud::<f64>(&path).unwrap();
        assert_eq!((cloud.num_points(), cloud.feature_channels(), k), (2, 1, 3));
        assert_eq!(cloud.features.at(&[1, 0]), -0.5);
        assert_eq!(cloud.labels.as_ref().unwrap()[1], 2);
    }

    #[test]
    fn prediction_dump_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pred.txt");
        let cloud = RawCloud::new(
            vec![[0.0, 1.0, 2.0], [3.0, 4.0, 5.0]],
            Tensor::<f32>::full(&[2, 1], 1.0),
            Some(vec![0, 1]),
        )
        .unwrap();
        dump_predictions(&cloud, &[1, 1], &path).unwrap();
        let (coords, truth, pred) = read_prediction_dump(&path).unwrap();
        assert_eq!(coords.len(), 2);
        assert_eq!(truth, vec![0, 1]);
        assert_eq!(pred, vec![1, 1]);

        // Single-point cloud writes exactly one data line.
        let one = RawCloud::new(
            vec![[0.0; 3]],
            Tensor::<f32>::full(&[1, 1], 1.0),
            Some(vec![0]),
        )
        .unwrap();
        dump_predictions(&one, &[0], &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);

        // Length mismatch rejected.
        assert!(dump_predictions(&cloud, &[], &path).is_err());
    }

    #[test]
    fn dataset_dir_loading() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            n_samples: 3,
            points_per_cloud: 20,
            noise_sigma: 0.01,
        };
        let set = generate_synthetic::<f32>(&spec, 11).unwrap();
        for (i, sample) in set.samples.iter().enumerate() {
            save_cloud(sample, set.class_count, dir.path().join(format!("{i:03}.mpv"))).unwrap();
        }
        let loaded = load_dataset_dir::<f32>(dir.path()).unwrap();
        assert_eq!(loaded.len(), 3);
        assert_eq!(loaded.class_count, 2);
        assert_eq!(loaded.samples[1].labels, set.samples[1].labels);
    }
}
