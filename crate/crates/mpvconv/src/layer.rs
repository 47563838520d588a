//! The point-voxel convolution layer: an initialization stage producing a
//! voxel-path feature `V1` and a point-path feature `P1`, an optional fusion
//! stage producing `V2` and `P2` from their sum, and a configurable
//! combination of those four as the layer output.

use crate::error::{Error, Result};
use crate::nn::blocks::{BufferVisitor, Conv3dBlock, ParamVisitor, SharedMlpBlock};
use crate::nn::{Activation, Mode};
use crate::tensor::{Scalar, Tensor};
use crate::voxel::{
    devoxelize_trilinear, devoxelize_trilinear_vjp, scale_coords, voxelize_avg, voxelize_avg_vjp,
    ScaledCoords, VoxelGrid,
};

/// Which of the four per-point feature maps are summed as the layer output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CombinationMode {
    A,
    B,
    C,
    D,
    E,
    F,
    G,
    H,
}

/// Presence flags for the four summands.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Components {
    pub v1: bool,
    pub p1: bool,
    pub v2: bool,
    pub p2: bool,
}

impl CombinationMode {
    pub const ALL: [CombinationMode; 8] = [
        CombinationMode::A,
        CombinationMode::B,
        CombinationMode::C,
        CombinationMode::D,
        CombinationMode::E,
        CombinationMode::F,
        CombinationMode::G,
        CombinationMode::H,
    ];

    pub fn components(self) -> Components {
        use CombinationMode::*;
        let (v1, p1, v2, p2) = match self {
            A => (false, false, true, false),
            B => (true, true, false, false),
            C => (false, true, true, false),
            D => (false, false, true, true),
            E => (true, true, true, false),
            F => (false, true, true, true),
            G => (true, false, true, true),
            H => (true, true, true, true),
        };
        Components { v1, p1, v2, p2 }
    }

    /// Whether this mode consumes any fusion-stage output.
    pub fn needs_fusion(self) -> bool {
        let c = self.components();
        c.v2 || c.p2
    }
}

impl std::fmt::Display for CombinationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

impl std::str::FromStr for CombinationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        use CombinationMode::*;
        match s.trim() {
            "A" | "a" => Ok(A),
            "B" | "b" => Ok(B),
            "C" | "c" => Ok(C),
            "D" | "d" => Ok(D),
            "E" | "e" => Ok(E),
            "F" | "f" => Ok(F),
            "G" | "g" => Ok(G),
            "H" | "h" => Ok(H),
            other => Err(Error::InvalidArgument(format!(
                "unknown combination mode `{other}` (expected A..H)"
            ))),
        }
    }
}

pub const WIDTH_MULTIPLIERS: [f64; 4] = [0.125, 0.25, 0.5, 1.0];

/// Hyperparameters of one layer.
#[derive(Clone, Debug)]
pub struct MpvConvConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub resolution: usize,
    pub width_multiplier: f64,
    pub combination_mode: CombinationMode,
    pub fusion_enabled: bool,
    pub one_by_one_conv: bool,
    pub init_conv_depth: usize,
    pub fusion_conv_depth: usize,
    pub leaky_slope: f64,
}

impl MpvConvConfig {
    pub fn new(in_channels: usize, out_channels: usize, resolution: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            resolution,
            width_multiplier: 1.0,
            combination_mode: CombinationMode::G,
            fusion_enabled: true,
            one_by_one_conv: true,
            init_conv_depth: 2,
            fusion_conv_depth: 2,
            leaky_slope: 0.1,
        }
    }

    /// Output channels after applying the width multiplier.
    pub fn effective_out_channels(&self) -> usize {
        (self.out_channels as f64 * self.width_multiplier).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidArgument(
                "mpvconv channels must be >= 1".into(),
            ));
        }
        if self.resolution < 2 {
            return Err(Error::InvalidArgument(format!(
                "mpvconv resolution must be >= 2, got {}",
                self.resolution
            )));
        }
        if !WIDTH_MULTIPLIERS.contains(&self.width_multiplier) {
            return Err(Error::InvalidArgument(format!(
                "width multiplier must be one of {WIDTH_MULTIPLIERS:?}, got {}",
                self.width_multiplier
            )));
        }
        if self.effective_out_channels() < 1 {
            return Err(Error::InvalidArgument(
                "effective output channels must be >= 1".into(),
            ));
        }
        if self.combination_mode.needs_fusion() && !self.fusion_enabled {
            return Err(Error::InvalidArgument(format!(
                "combination mode {} uses fusion outputs but fusion is disabled",
                self.combination_mode
            )));
        }
        if self.init_conv_depth < 1 || self.fusion_conv_depth < 1 {
            return Err(Error::InvalidArgument(
                "conv depth must be >= 1".into(),
            ));
        }
        Activation::leaky(self.leaky_slope)?;
        Ok(())
    }
}

/// Elementwise sum of the summands selected by `mode`. Summands are added in
/// the fixed order V1, P1, V2, P2.
pub fn combine_features<T: Scalar>(
    mode: CombinationMode,
    v1: Option<&Tensor<T>>,
    p1: Option<&Tensor<T>>,
    v2: Option<&Tensor<T>>,
    p2: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let c = mode.components();
    let mut selected: Vec<&Tensor<T>> = Vec::new();
    for (flag, tensor, name) in [
        (c.v1, v1, "V1"),
        (c.p1, p1, "P1"),
        (c.v2, v2, "V2"),
        (c.p2, p2, "P2"),
    ] {
        if flag {
            match tensor {
                Some(t) => selected.push(t),
                None => {
                    return Err(Error::InvalidArgument(format!(
                        "combination mode {mode} requires {name}, which is absent"
                    )))
                }
            }
        }
    }
    let mut out = selected[0].clone();
    for t in &selected[1..] {
        out.add_assign(t)?;
    }
    Ok(out)
}

/// Fusion stage: voxel path over the fused features (optional 1x1x1 conv,
/// then 3x3x3 convs) and a point path sharing the init point-path structure.
#[derive(Clone, Debug)]
pub struct FusionModule<T> {
    pub one_conv: Option<Conv3dBlock<T>>,
    pub voxel_convs: Vec<Conv3dBlock<T>>,
    pub point_mlp: SharedMlpBlock<T>,
}

struct LayerCache {
    scaled: Vec<ScaledCoords>,
    counts: Vec<Vec<u32>>,
    fusion_ran: bool,
}

/// One point-voxel convolution layer.
#[derive(Clone, Debug)]
pub struct MpvConvLayer<T> {
    cfg: MpvConvConfig,
    pub init_voxel_convs: Vec<Conv3dBlock<T>>,
    pub init_point_mlp: SharedMlpBlock<T>,
    pub fusion: Option<FusionModule<T>>,
    cache: Option<std::sync::Arc<LayerCache>>,
}

impl std::fmt::Debug for LayerCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("LayerCache")
    }
}

impl<T: Scalar> MpvConvLayer<T> {
    pub fn new(name: &str, cfg: MpvConvConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let c2 = cfg.effective_out_channels();
        let leaky = Activation::leaky(cfg.leaky_slope)?;

        let mut init_voxel_convs = Vec::with_capacity(cfg.init_conv_depth);
        for i in 0..cfg.init_conv_depth {
            let ci = if i == 0 { cfg.in_channels } else { c2 };
            init_voxel_convs.push(Conv3dBlock::new(
                &format!("{name}.init.vconv{i}"),
                ci,
                c2,
                3,
                leaky,
                seed,
            ));
        }
        let init_point_mlp = SharedMlpBlock::new(
            &format!("{name}.init.pmlp"),
            cfg.in_channels,
            c2,
            Activation::Relu,
            seed,
        );

        let fusion = if cfg.fusion_enabled {
            let one_conv = if cfg.one_by_one_conv {
                Some(Conv3dBlock::new(
                    &format!("{name}.fusion.vconv1x1"),
                    c2,
                    c2,
                    1,
                    leaky,
                    seed,
                ))
            } else {
                None
            };
            let mut voxel_convs = Vec::with_capacity(cfg.fusion_conv_depth);
            for i in 0..cfg.fusion_conv_depth {
                voxel_convs.push(Conv3dBlock::new(
                    &format!("{name}.fusion.vconv{i}"),
                    c2,
                    c2,
                    3,
                    leaky,
                    seed,
                ));
            }
            let point_mlp = SharedMlpBlock::new(
                &format!("{name}.fusion.pmlp"),
                c2,
                c2,
                Activation::Relu,
                seed,
            );
            Some(FusionModule {
                one_conv,
                voxel_convs,
                point_mlp,
            })
        } else {
            None
        };

        Ok(Self {
            cfg,
            init_voxel_convs,
            init_point_mlp,
            fusion,
            cache: None,
        })
    }

    pub fn config(&self) -> &MpvConvConfig {
        &self.cfg
    }

    pub fn out_channels(&self) -> usize {
        self.cfg.effective_out_channels()
    }

    fn check_inputs(&self, coords_hat: &[Vec<[f64; 3]>], features: &Tensor<T>) -> Result<(usize, usize)> {
        if features.rank() != 3 {
            return Err(Error::ShapeMismatch {
                context: "mpvconv features".into(),
                expected: "[B,C1,N]".into(),
                got: format!("{:?}", features.shape()),
            });
        }
        let (b, c, n) = (
            features.shape()[0],
            features.shape()[1],
            features.shape()[2],
        );
        if c != self.cfg.in_channels {
            return Err(Error::ShapeMismatch {
                context: "mpvconv input channels".into(),
                expected: format!("{}", self.cfg.in_channels),
                got: format!("{c}"),
            });
        }
        if coords_hat.len() != b || coords_hat.iter().any(|s| s.len() != n) {
            return Err(Error::ShapeMismatch {
                context: "mpvconv coords".into(),
                expected: format!("{b} samples of {n} points"),
                got: format!(
                    "{} samples of {:?} points",
                    coords_hat.len(),
                    coords_hat.iter().map(|s| s.len()).collect::<Vec<_>>()
                ),
            });
        }
        Ok((b, n))
    }

    fn scale_batch(&self, coords_hat: &[Vec<[f64; 3]>]) -> Result<Vec<ScaledCoords>> {
        coords_hat
            .iter()
            .map(|sample| scale_coords(sample, self.cfg.resolution))
            .collect()
    }

    /// Initialization stage: (V1, P1), both `[B,C2,N]`.
    pub fn init_module_forward(
        &mut self,
        coords_hat: &[Vec<[f64; 3]>],
        features: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        self.check_inputs(coords_hat, features)?;
        let scaled = self.scale_batch(coords_hat)?;
        let (v1, p1, _) = self.init_forward(&scaled, features, mode)?;
        Ok((v1, p1))
    }

    /// Fusion stage applied to given (V1, P1): (V2, P2), both `[B,C2,N]`.
    pub fn fusion_module_forward(
        &mut self,
        coords_hat: &[Vec<[f64; 3]>],
        v1: &Tensor<T>,
        p1: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        if self.fusion.is_none() {
            return Err(Error::InvalidArgument(
                "fusion module is disabled for this layer".into(),
            ));
        }
        let scaled = self.scale_batch(coords_hat)?;
        self.fusion_forward(&scaled, v1, p1, mode)
    }

    fn init_forward(
        &mut self,
        scaled: &[ScaledCoords],
        features: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, Tensor<T>, Vec<Vec<u32>>)> {
        let (grids, counts) = voxelize_batch(scaled, features)?;
        let mut x = grids;
        for block in &mut self.init_voxel_convs {
            x = block.forward(&x, mode)?;
        }
        let v1 = devoxelize_batch(scaled, &x)?;
        let p1 = self.init_point_mlp.forward(features, mode)?;
        Ok((v1, p1, counts))
    }

    fn fusion_forward(
        &mut self,
        scaled: &[ScaledCoords],
        v1: &Tensor<T>,
        p1: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let fused = v1.add(p1)?;
        let fusion = self.fusion.as_mut().expect("fusion module present");
        let (grids, _counts) = voxelize_batch(scaled, &fused)?;
        let mut x = grids;
        if let Some(one) = fusion.one_conv.as_mut() {
            x = one.forward(&x, mode)?;
        }
        for block in &mut fusion.voxel_convs {
            x = block.forward(&x, mode)?;
        }
        let v2 = devoxelize_batch(scaled, &x)?;
        let p2 = fusion.point_mlp.forward(&fused, mode)?;
        Ok((v2, p2))
    }

    /// Full layer forward. Coordinates are expected to be normalized to the
    /// unit cube already. The fusion stage runs only when the combination
    /// mode consumes one of its outputs, so a mode-B layer is bit-identical
    /// to its initialization stage regardless of `fusion_enabled`.
    pub fn forward(
        &mut self,
        coords_hat: &[Vec<[f64; 3]>],
        features: &Tensor<T>,
        mode: Mode,
    ) -> Result<Tensor<T>> {
        self.check_inputs(coords_hat, features)?;
        let scaled = self.scale_batch(coords_hat)?;
        let (v1, p1, counts) = self.init_forward(&scaled, features, mode)?;
        let fusion_ran = self.fusion.is_some() && self.cfg.combination_mode.needs_fusion();
        let (v2, p2) = if fusion_ran {
            let (v2, p2) = self.fusion_forward(&scaled, &v1, &p1, mode)?;
            (Some(v2), Some(p2))
        } else {
            (None, None)
        };
        let out = combine_features(
            self.cfg.combination_mode,
            Some(&v1),
            Some(&p1),
            v2.as_ref(),
            p2.as_ref(),
        )?;
        if mode == Mode::Train {
            self.cache = Some(std::sync::Arc::new(LayerCache {
                scaled,
                counts,
                fusion_ran,
            }));
        }
        Ok(out)
    }

    /// Backward through the whole layer. Accumulates parameter gradients and
    /// returns the gradient w.r.t. the input features `[B,C1,N]`.
    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .take()
            .expect("MpvConvLayer::backward without a train-mode forward");
        let c = self.cfg.combination_mode.components();
        let c2 = self.cfg.effective_out_channels();

        let mut d_v1 = Tensor::zeros(grad_out.shape());
        let mut d_p1 = Tensor::zeros(grad_out.shape());
        if c.v1 {
            d_v1.add_assign(grad_out)?;
        }
        if c.p1 {
            d_p1.add_assign(grad_out)?;
        }

        if cache.fusion_ran {
            let fusion = self.fusion.as_mut().expect("fusion module present");
            let mut d_fused = Tensor::zeros(grad_out.shape());
            // Point path of the fusion stage.
            let d_p2 = if c.p2 {
                grad_out.clone()
            } else {
                Tensor::zeros(grad_out.shape())
            };
            d_fused.add_assign(&fusion.point_mlp.backward(&d_p2)?)?;
            // Voxel path of the fusion stage.
            let d_v2 = if c.v2 {
                grad_out.clone()
            } else {
                Tensor::zeros(grad_out.shape())
            };
            let mut g = devoxelize_batch_vjp(&cache.scaled, c2, &d_v2)?;
            for block in fusion.voxel_convs.iter_mut().rev() {
                g = block.backward(&g)?;
            }
            if let Some(one) = fusion.one_conv.as_mut() {
                g = one.backward(&g)?;
            }
            d_fused.add_assign(&voxelize_batch_vjp(&cache.scaled, &cache.counts, &g)?)?;
            // fused = V1 + P1 feeds both fusion paths.
            d_v1.add_assign(&d_fused)?;
            d_p1.add_assign(&d_fused)?;
        }

        let mut d_features = self.init_point_mlp.backward(&d_p1)?;
        let mut g = devoxelize_batch_vjp(&cache.scaled, c2, &d_v1)?;
        for block in self.init_voxel_convs.iter_mut().rev() {
            g = block.backward(&g)?;
        }
        d_features.add_assign(&voxelize_batch_vjp(&cache.scaled, &cache.counts, &g)?)?;
        Ok(d_features)
    }

    pub fn visit_params(&mut self, f: &mut ParamVisitor<T>) {
        for block in &mut self.init_voxel_convs {
            block.visit_params(f);
        }
        self.init_point_mlp.visit_params(f);
        if let Some(fusion) = &mut self.fusion {
            if let Some(one) = &mut fusion.one_conv {
                one.visit_params(f);
            }
            for block in &mut fusion.voxel_convs {
                block.visit_params(f);
            }
            fusion.point_mlp.visit_params(f);
        }
    }

    pub fn visit_buffers(&mut self, f: &mut BufferVisitor<T>) {
        for block in &mut self.init_voxel_convs {
            block.visit_buffers(f);
        }
        self.init_point_mlp.visit_buffers(f);
        if let Some(fusion) = &mut self.fusion {
            if let Some(one) = &mut fusion.one_conv {
                one.visit_buffers(f);
            }
            for block in &mut fusion.voxel_convs {
                block.visit_buffers(f);
            }
            fusion.point_mlp.visit_buffers(f);
        }
    }

    pub fn param_count(&self) -> usize {
        let mut total: usize = self.init_voxel_convs.iter().map(|b| b.param_count()).sum();
        total += self.init_point_mlp.param_count();
        if let Some(fusion) = &self.fusion {
            if let Some(one) = &fusion.one_conv {
                total += one.param_count();
            }
            total += fusion.voxel_convs.iter().map(|b| b.param_count()).sum::<usize>();
            total += fusion.point_mlp.param_count();
        }
        total
    }
}

/// Voxelize every sample of a `[B,C,N]` batch into a stacked `[B,C,r,r,r]`
/// volume, returning the per-sample occupancy counts.
pub fn voxelize_batch<T: Scalar>(
    scaled: &[ScaledCoords],
    features: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<Vec<u32>>)> {
    let (b, c, n) = (
        features.shape()[0],
        features.shape()[1],
        features.shape()[2],
    );
    let r = scaled[0].resolution;
    let vol = r * r * r;
    let mut out = Tensor::zeros(&[b, c, r, r, r]);
    let mut counts = Vec::with_capacity(b);
    for bi in 0..b {
        let sample = sample_to_points(features, bi, c, n);
        let grid = voxelize_avg(&scaled[bi], &sample)?;
        out.data_mut()[bi * c * vol..(bi + 1) * c * vol].copy_from_slice(grid.data.data());
        counts.push(grid.counts);
    }
    Ok((out, counts))
}

/// VJP of [`voxelize_batch`]: maps a `[B,C,r,r,r]` grid gradient back to a
/// `[B,C,N]` feature gradient.
pub fn voxelize_batch_vjp<T: Scalar>(
    scaled: &[ScaledCoords],
    counts: &[Vec<u32>],
    grad_grids: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (b, c) = (grad_grids.shape()[0], grad_grids.shape()[1]);
    let r = scaled[0].resolution;
    let vol = r * r * r;
    let n = scaled[0].coords.len();
    let mut out = Tensor::zeros(&[b, c, n]);
    for bi in 0..b {
        let grad_grid = Tensor::new(
            &[c, r, r, r],
            grad_grids.data()[bi * c * vol..(bi + 1) * c * vol].to_vec(),
        )?;
        let grad_points = voxelize_avg_vjp(&scaled[bi], &counts[bi], &grad_grid)?;
        points_to_sample(&grad_points, &mut out, bi, c, n);
    }
    Ok(out)
}

/// Trilinearly sample every grid of a `[B,C,r,r,r]` stack at its sample's
/// points, producing `[B,C,N]`.
pub fn devoxelize_batch<T: Scalar>(
    scaled: &[ScaledCoords],
    grids: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (b, c) = (grids.shape()[0], grids.shape()[1]);
    let r = scaled[0].resolution;
    let vol = r * r * r;
    let n = scaled[0].coords.len();
    let mut out = Tensor::zeros(&[b, c, n]);
    for bi in 0..b {
        let grid = VoxelGrid {
            resolution: r,
            channels: c,
            data: Tensor::new(
                &[c, r, r, r],
                grids.data()[bi * c * vol..(bi + 1) * c * vol].to_vec(),
            )?,
            counts: Vec::new(),
        };
        let points = devoxelize_trilinear(&grid, &scaled[bi])?;
        points_to_sample(&points, &mut out, bi, c, n);
    }
    Ok(out)
}

/// VJP of [`devoxelize_batch`]: scatters a `[B,C,N]` point gradient back to
/// a `[B,C,r,r,r]` grid gradient.
pub fn devoxelize_batch_vjp<T: Scalar>(
    scaled: &[ScaledCoords],
    channels: usize,
    grad_points: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (b, n) = (grad_points.shape()[0], grad_points.shape()[2]);
    let r = scaled[0].resolution;
    let vol = r * r * r;
    let mut out = Tensor::zeros(&[b, channels, r, r, r]);
    for bi in 0..b {
        let sample = sample_to_points(grad_points, bi, channels, n);
        let grad_grid = devoxelize_trilinear_vjp(&scaled[bi], channels, &sample)?;
        out.data_mut()[bi * channels * vol..(bi + 1) * channels * vol]
            .copy_from_slice(grad_grid.data());
    }
    Ok(out)
}

/// Extract sample `b` of a `[B,C,N]` tensor as point-major `[N,C]`.
fn sample_to_points<T: Scalar>(features: &Tensor<T>, b: usize, c: usize, n: usize) -> Tensor<T> {
    let src = features.data();
    Tensor::from_fn(&[n, c], |off| {
        let (pt, ch) = (off / c, off % c);
        src[(b * c + ch) * n + pt]
    })
}

/// Write point-major `[N,C]` data into sample `b` of a `[B,C,N]` tensor.
fn points_to_sample<T: Scalar>(points: &Tensor<T>, dst: &mut Tensor<T>, b: usize, c: usize, n: usize) {
    let d = dst.data_mut();
    let s = points.data();
    for ch in 0..c {
        let base = (b * c + ch) * n;
        for pt in 0..n {
            d[base + pt] = s[pt * c + ch];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_coords(b: usize, n: usize, seed: u64) -> Vec<Vec<[f64; 3]>> {
        let mut rng = crate::nn::seeded_rng(seed, "layer-coords");
        (0..b)
            .map(|_| {
                (0..n)
                    .map(|_| {
                        [
                            rng.random::<f64>(),
                            rng.random::<f64>(),
                            rng.random::<f64>(),
                        ]
                    })
                    .collect()
            })
            .collect()
    }

    fn random_features(b: usize, c: usize, n: usize, seed: u64) -> Tensor<f32> {
        let mut rng = crate::nn::seeded_rng(seed, "layer-features");
        Tensor::from_fn(&[b, c, n], |_| rng.random::<f32>() * 2.0 - 1.0)
    }

    fn small_cfg() -> MpvConvConfig {
        MpvConvConfig::new(3, 4, 4)
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_cfg();
        assert!(cfg.validate().is_ok());
        cfg.width_multiplier = 0.3;
        assert!(cfg.validate().is_err());
        cfg.width_multiplier = 0.5;
        cfg.fusion_enabled = false;
        assert!(cfg.validate().is_err()); // mode G needs fusion
        cfg.combination_mode = CombinationMode::B;
        assert!(cfg.validate().is_ok());
        cfg.resolution = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn combine_mode_table() {
        use CombinationMode::*;
        assert_eq!(
            A.components(),
            Components { v1: false, p1: false, v2: true, p2: false }
        );
        assert_eq!(
            B.components(),
            Components { v1: true, p1: true, v2: false, p2: false }
        );
        assert_eq!(
            G.components(),
            Components { v1: true, p1: false, v2: true, p2: true }
        );
        assert!(!B.needs_fusion());
        assert!(A.needs_fusion() && G.needs_fusion() && H.needs_fusion());
    }

    #[test]
    fn combine_features_selects_exactly_the_checked_components() {
        let shape = [1usize, 2, 3];
        // Integer-valued tensors keep the sums exact.
        let v1 = Tensor::<f64>::from_fn(&shape, |i| i as f64);
        let p1 = Tensor::<f64>::from_fn(&shape, |i| (i * 7 % 5) as f64);
        let v2 = Tensor::<f64>::from_fn(&shape, |i| (i * 3 % 11) as f64);
        let p2 = Tensor::<f64>::from_fn(&shape, |i| (i * 13 % 17) as f64);

        // Mode G with V2 = P2 = 0 is V1 exactly.
        let zero = Tensor::<f64>::zeros(&shape);
        let g0 = combine_features(
            CombinationMode::G,
            Some(&v1),
            Some(&p1),
            Some(&zero),
            Some(&zero),
        )
        .unwrap();
        assert_eq!(g0, v1);

        // Mode B ignores the fusion tensors entirely.
        let b = combine_features(CombinationMode::B, Some(&v1), Some(&p1), None, None).unwrap();
        assert_eq!(b, v1.add(&p1).unwrap());

        // H minus G is P1 elementwise.
        let g = combine_features(
            CombinationMode::G,
            Some(&v1),
            Some(&p1),
            Some(&v2),
            Some(&p2),
        )
        .unwrap();
        let h = combine_features(
            CombinationMode::H,
            Some(&v1),
            Some(&p1),
            Some(&v2),
            Some(&p2),
        )
        .unwrap();
        for i in 0..g.len() {
            assert_eq!(h.data()[i] - g.data()[i], p1.data()[i]);
        }

        // Missing required tensor is rejected.
        assert!(combine_features(CombinationMode::G, Some(&v1), Some(&p1), None, None).is_err());
    }

    #[test]
    fn zero_features_give_zero_outputs() {
        let mut layer = MpvConvLayer::<f32>::new("l", small_cfg(), 0).unwrap();
        let coords = random_coords(2, 16, 1);
        let features = Tensor::zeros(&[2, 3, 16]);
        let out = layer.forward(&coords, &features, Mode::Train).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        let (v1, p1) = layer
            .init_module_forward(&coords, &features, Mode::Train)
            .unwrap();
        assert!(v1.data().iter().all(|&v| v == 0.0));
        assert!(p1.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fused_zero_gives_zero_fusion_outputs() {
        let mut layer = MpvConvLayer::<f32>::new("l", small_cfg(), 0).unwrap();
        let coords = random_coords(1, 8, 2);
        let c2 = layer.out_channels();
        let v1 = random_features(1, c2, 8, 3);
        let p1 = v1.scale(-1.0);
        let (v2, p2) = layer
            .fusion_module_forward(&coords, &v1, &p1, Mode::Train)
            .unwrap();
        assert!(v2.data().iter().all(|&v| v == 0.0));
        assert!(p2.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_samples_in_a_batch_match_in_eval() {
        let mut layer = MpvConvLayer::<f32>::new("l", small_cfg(), 0).unwrap();
        let coords1 = random_coords(1, 12, 4);
        let coords = vec![coords1[0].clone(), coords1[0].clone()];
        let f1 = random_features(1, 3, 12, 5);
        let features = Tensor::from_fn(&[2, 3, 12], |off| f1.data()[off % (3 * 12)]);
        let out = layer.forward(&coords, &features, Mode::Eval).unwrap();
        let n = 12;
        let c2 = layer.out_channels();
        for ch in 0..c2 {
            for pt in 0..n {
                assert_eq!(out.at(&[0, ch, pt]), out.at(&[1, ch, pt]));
            }
        }
    }

    #[test]
    fn permutation_equivariance_single_precision() {
        let mut cfg = small_cfg();
        cfg.in_channels = 2;
        let coords = random_coords(1, 64, 6);
        let features = random_features(1, 2, 64, 7);

        let mut layer = MpvConvLayer::<f32>::new("l", cfg.clone(), 0).unwrap();
        let out = layer.forward(&coords, &features, Mode::Train).unwrap();

        let mut rng = crate::nn::seeded_rng(8, "perm");
        let mut perm: Vec<usize> = (0..64).collect();
        for i in (1..perm.len()).rev() {
            let j = (rng.random::<u64>() % (i as u64 + 1)) as usize;
            perm.swap(i, j);
        }
        let coords_p = vec![perm.iter().map(|&i| coords[0][i]).collect::<Vec<_>>()];
        let features_p =
            Tensor::from_fn(&[1, 2, 64], |off| features.at(&[0, off / 64, perm[off % 64]]));
        let mut layer_p = MpvConvLayer::<f32>::new("l", cfg, 0).unwrap();
        let out_p = layer_p.forward(&coords_p, &features_p, Mode::Train).unwrap();

        let mut max_diff = 0.0f64;
        for ch in 0..layer.out_channels() {
            for (new_idx, &old_idx) in perm.iter().enumerate() {
                let d = (out_p.at(&[0, ch, new_idx]) as f64 - out.at(&[0, ch, old_idx]) as f64)
                    .abs();
                max_diff = max_diff.max(d);
            }
        }
        assert!(max_diff < 1e-4, "max diff {max_diff}");
    }

    #[test]
    fn mode_b_is_bit_identical_to_init_module_sum() {
        // Same seed: shared parameters are identical whether or not the
        // fusion stage exists, because init is keyed by parameter name.
        let mut cfg = small_cfg();
        cfg.combination_mode = CombinationMode::B;
        let coords = random_coords(2, 10, 9);
        let features = random_features(2, 3, 10, 10);

        let mut with_fusion = MpvConvLayer::<f32>::new("l", cfg.clone(), 0).unwrap();
        let out_fusion_present = with_fusion.forward(&coords, &features, Mode::Eval).unwrap();

        cfg.fusion_enabled = false;
        let mut without_fusion = MpvConvLayer::<f32>::new("l", cfg, 0).unwrap();
        let out_fusion_absent = without_fusion
            .forward(&coords, &features, Mode::Eval)
            .unwrap();
        assert_eq!(out_fusion_present, out_fusion_absent);

        let (v1, p1) = without_fusion
            .init_module_forward(&coords, &features, Mode::Eval)
            .unwrap();
        assert_eq!(out_fusion_absent, v1.add(&p1).unwrap());
    }

    #[test]
    fn one_by_one_conv_with_identity_weights_matches_plain_path() {
        // Identity 1x1x1 weights plus fresh (identity) batch-norm statistics
        // insert an extra leaky activation, which is itself the identity on
        // nonnegative inputs. Feed the fusion stage nonnegative V1/P1 and the
        // two paths should agree up to the bn eps shrinkage.
        let cfg = small_cfg();
        let coords = random_coords(1, 20, 11);
        let c2 = cfg.effective_out_channels();
        let v1 = random_features(1, c2, 20, 12).map(|v| v.abs());
        let p1 = random_features(1, c2, 20, 13).map(|v| v.abs());

        let mut plain_cfg = cfg.clone();
        plain_cfg.one_by_one_conv = false;
        let mut plain = MpvConvLayer::<f32>::new("l", plain_cfg, 0).unwrap();
        let (v2_plain, p2_plain) = plain
            .fusion_module_forward(&coords, &v1, &p1, Mode::Eval)
            .unwrap();

        let mut with_one = MpvConvLayer::<f32>::new("l", cfg, 0).unwrap();
        {
            let one = with_one
                .fusion
                .as_mut()
                .unwrap()
                .one_conv
                .as_mut()
                .unwrap();
            one.weight.value.fill(0.0);
            for ch in 0..c2 {
                one.weight.value.set(&[ch, ch, 0, 0, 0], 1.0);
            }
        }
        let (v2_one, p2_one) = with_one
            .fusion_module_forward(&coords, &v1, &p1, Mode::Eval)
            .unwrap();

        assert_eq!(p2_plain, p2_one);
        let diff = v2_plain.max_abs_diff(&v2_one);
        assert!(diff < 1e-5, "identity 1x1x1 insertion diff {diff}");
    }

    #[test]
    fn output_channels_follow_width_multiplier_for_all_modes() {
        for &wm in &WIDTH_MULTIPLIERS {
            for mode in CombinationMode::ALL {
                let mut cfg = MpvConvConfig::new(2, 16, 4);
                cfg.width_multiplier = wm;
                cfg.combination_mode = mode;
                let expected = (16.0 * wm).round() as usize;
                let mut layer = MpvConvLayer::<f32>::new("l", cfg, 0).unwrap();
                let coords = random_coords(1, 8, 13);
                let features = random_features(1, 2, 8, 14);
                let out = layer.forward(&coords, &features, Mode::Eval).unwrap();
                assert_eq!(out.shape(), &[1, expected, 8]);
            }
        }
    }

    #[test]
    fn width_multiplier_strictly_reduces_param_count() {
        let full = MpvConvLayer::<f32>::new("l", MpvConvConfig::new(4, 16, 4), 0).unwrap();
        let mut half_cfg = MpvConvConfig::new(4, 16, 4);
        half_cfg.width_multiplier = 0.5;
        let half = MpvConvLayer::<f32>::new("l", half_cfg, 0).unwrap();
        assert!(half.param_count() < full.param_count());
    }
}
