//! Soft (differentiable) and hard rasterization kernels.
//!
//! Per pixel p and primitive j the soft blend follows
//!
//! ```text
//! D_j(p) = sigmoid(delta_j d_j^2 / sigma)        delta = +1 inside, -1 outside
//! w_j    = D_j exp(z_j / gamma) / (sum_k D_k exp(z_k / gamma) + exp(eps_bg / gamma))
//! color  = sum_j w_j C_j + w_bg C_bg
//! ```
//!
//! computed in log space: each term becomes `l_j = z_j / gamma + ln D_j` and
//! the weights a softmax over `l`, which keeps the huge `z/gamma` exponents
//! finite. Below the sigmoid's useful range the coverage carries a smooth
//! quadratic log-space attenuation, and each term is dropped outright once it
//! sits far under the background no matter how its layer amplifies it: a
//! primitive the pixel does not touch leaves the blend instead of being
//! revived by `exp(z/gamma)`. That keeps the soft image local, matches the
//! hard rasterizer in the sigma -> 0 limit, and bounds the per-primitive
//! pixel work to a dilated bounding rect.
//!
//! Distances inside the sigmoid are in normalized device coordinates
//! ([-1, 1]^2 across the image), so `sigma_blend` is resolution-independent.

use super::sdf::{sdf_with_gradient, BaseGeometry};
use super::{BirdviewConfig, DrawPrimitive, RasterError, COLOR_BACKGROUND};
use crate::autodiff::{CustomOp, Result as AdResult, Scalar, Tape, Tensor};
use crate::geom::Point2;
use std::sync::Arc;

/// Sigmoid argument below which the quadratic log-space window starts
/// attenuating coverage.
const WINDOW_START: f64 = 30.0;
/// Log-weight margin under the background at which a term is dropped.
const DROP_MARGIN: f64 = 60.0;

/// The constant part of a render: base geometries, colors, layers, config.
/// Poses are supplied separately so they can come from a tape.
#[derive(Debug, Clone)]
pub struct RasterJob {
    pub geometries: Vec<BaseGeometry>,
    pub colors: Vec<[f64; 3]>,
    pub layers: Vec<f64>,
    pub config: BirdviewConfig,
}

impl RasterJob {
    /// Splits a primitive list into the constant job and the pose array.
    pub fn from_primitives(
        prims: &[DrawPrimitive],
        config: BirdviewConfig,
    ) -> Result<(Self, Vec<[f64; 3]>), RasterError> {
        config.validate()?;
        let mut geometries = Vec::with_capacity(prims.len());
        let mut colors = Vec::with_capacity(prims.len());
        let mut layers = Vec::with_capacity(prims.len());
        let mut poses = Vec::with_capacity(prims.len());
        for p in prims {
            p.geometry.validate()?;
            geometries.push(p.geometry.clone());
            colors.push(p.color);
            layers.push(p.layer);
            poses.push([p.pose.translation.x, p.pose.translation.y, p.pose.angle]);
        }
        Ok((
            RasterJob {
                geometries,
                colors,
                layers,
                config,
            },
            poses,
        ))
    }

    fn n_prims(&self) -> usize {
        self.geometries.len()
    }
}

/// Sigmoid-argument cutoff for one primitive: where its blend term sits
/// `DROP_MARGIN` log-units under the background no matter how deeply its
/// layer amplifies it, so dropping the term is invisible in the output.
///
/// Below `-WINDOW_START` the coverage carries an extra quadratic log-space
/// attenuation `ln W = -(t + WINDOW_START)^2`; solving
/// `(z - eps)/gamma + t + ln W <= l_bg - DROP_MARGIN` for `u = -(t +
/// WINDOW_START)` gives the positive quadratic root below.
fn cutoff_t(layer: f64, config: &BirdviewConfig) -> f64 {
    let amplification = ((layer - config.eps_bg) / config.gamma_blend).max(0.0);
    let a = amplification + WINDOW_START + DROP_MARGIN;
    let u = 0.5 * ((1.0 + 4.0 * a).sqrt() - 1.0);
    -(WINDOW_START + u)
}

/// Coverage band in meters for a primitive of the given layer (the pixel-rect
/// dilation radius).
pub fn render_band_meters(layer: f64, config: &BirdviewConfig) -> f64 {
    (cutoff_t(layer, config).abs() * config.sigma_blend).sqrt() * config.extent_m / 2.0
}

/// ln D and its derivative w.r.t. the sigmoid argument t, or `None` once the
/// term is dropped. The quadratic window below `-WINDOW_START` accelerates
/// the natural sigmoid decay so that no layer amplification can revive a
/// primitive the pixel does not touch; it is smooth, so the analytic
/// gradient tracks it exactly.
fn ln_coverage(t: f64, t_cut: f64) -> Option<(f64, f64)> {
    if t <= t_cut {
        return None;
    }
    // ln sigmoid(t) = -softplus(-t)
    let ln_sig = -Scalar::softplus(-t);
    let d_ln_sig = Scalar::sigmoid(-t);
    if t < -WINDOW_START {
        let u = -(t + WINDOW_START);
        Some((ln_sig - u * u, d_ln_sig + 2.0 * u))
    } else {
        Some((ln_sig, d_ln_sig))
    }
}

/// Pixel-rect of a posed primitive, dilated by the coverage band.
fn pixel_rect(
    geometry: &BaseGeometry,
    pose: &[f64; 3],
    layer: f64,
    config: &BirdviewConfig,
) -> Option<(usize, usize, usize, usize)> {
    let (lo, hi) = geometry.local_bounds();
    let corners = [
        Point2::new(lo.x, lo.y),
        Point2::new(hi.x, lo.y),
        Point2::new(hi.x, hi.y),
        Point2::new(lo.x, hi.y),
    ];
    let (sin, cos) = pose[2].sin_cos();
    let mut bx = (f64::INFINITY, f64::NEG_INFINITY);
    let mut by = (f64::INFINITY, f64::NEG_INFINITY);
    for c in corners {
        let x = cos * c.x - sin * c.y + pose[0];
        let y = sin * c.x + cos * c.y + pose[1];
        bx = (bx.0.min(x), bx.1.max(x));
        by = (by.0.min(y), by.1.max(y));
    }
    let band = render_band_meters(layer, config);
    let res = config.resolution_px;
    let mpp = config.meters_per_px();
    let half = 0.5 * res as f64 - 0.5;
    // row from x (forward-up), col from y (left-left)
    let r0 = (half - (bx.1 + band) / mpp).ceil().max(0.0) as isize;
    let r1 = (half - (bx.0 - band) / mpp).floor().min(res as f64 - 1.0) as isize;
    let c0 = (half - (by.1 + band) / mpp).ceil().max(0.0) as isize;
    let c1 = (half - (by.0 - band) / mpp).floor().min(res as f64 - 1.0) as isize;
    if r0 > r1 || c0 > c1 {
        return None;
    }
    Some((r0 as usize, r1 as usize, c0 as usize, c1 as usize))
}

/// Signed distance in meters plus pose gradients at an ego-frame point.
#[inline]
fn posed_sdf(geometry: &BaseGeometry, pose: &[f64; 3], p: Point2) -> (f64, Point2, f64) {
    let (sin, cos) = pose[2].sin_cos();
    let dx = p.x - pose[0];
    let dy = p.y - pose[1];
    // u = R(-angle) (p - t)
    let u = Point2::new(cos * dx + sin * dy, -sin * dx + cos * dy);
    let (s, gu) = sdf_with_gradient(u, geometry);
    // ds/dt = -R(angle) grad_u ; ds/dangle = grad_u . (u.y, -u.x)
    let g_world = Point2::new(cos * gu.x - sin * gu.y, sin * gu.x + cos * gu.y);
    let g_angle = gu.x * u.y - gu.y * u.x;
    (s, Point2::new(-g_world.x, -g_world.y), g_angle)
}

struct BlendState {
    /// Running max of the blend logits per pixel.
    m: Vec<f64>,
    /// Running sum of exp(l - m) per pixel.
    s: Vec<f64>,
    /// Running numerator per channel, scaled like `s`.
    num: [Vec<f64>; 3],
}

impl BlendState {
    fn new(n_px: usize, config: &BirdviewConfig) -> Self {
        let l_bg = config.eps_bg / config.gamma_blend;
        BlendState {
            m: vec![l_bg; n_px],
            s: vec![1.0; n_px],
            num: [
                vec![COLOR_BACKGROUND[0]; n_px],
                vec![COLOR_BACKGROUND[1]; n_px],
                vec![COLOR_BACKGROUND[2]; n_px],
            ],
        }
    }

    #[inline]
    fn push(&mut self, px: usize, l: f64, color: &[f64; 3]) {
        if l <= self.m[px] {
            let e = (l - self.m[px]).exp();
            self.s[px] += e;
            for c in 0..3 {
                self.num[c][px] += e * color[c];
            }
        } else {
            let scale = (self.m[px] - l).exp();
            self.s[px] = self.s[px] * scale + 1.0;
            for c in 0..3 {
                self.num[c][px] = self.num[c][px] * scale + color[c];
            }
            self.m[px] = l;
        }
    }
}

fn blend_pass(job: &RasterJob, poses: &[[f64; 3]]) -> BlendState {
    let cfg = &job.config;
    let res = cfg.resolution_px;
    let mut state = BlendState::new(res * res, cfg);
    let ndc_per_m = 2.0 / cfg.extent_m;
    for j in 0..job.n_prims() {
        let Some((r0, r1, c0, c1)) = pixel_rect(&job.geometries[j], &poses[j], job.layers[j], cfg)
        else {
            continue;
        };
        let l_layer = job.layers[j] / cfg.gamma_blend;
        let t_cut = cutoff_t(job.layers[j], cfg);
        for r in r0..=r1 {
            for c in c0..=c1 {
                let p = cfg.pixel_center(r, c);
                let (s_m, _, _) = posed_sdf(&job.geometries[j], &poses[j], p);
                let s_ndc = s_m * ndc_per_m;
                let t = -s_ndc * s_ndc.abs() / cfg.sigma_blend;
                if let Some((ln_d, _)) = ln_coverage(t, t_cut) {
                    state.push(r * res + c, l_layer + ln_d, &job.colors[j]);
                }
            }
        }
    }
    state
}

/// Soft-rasterizes the job at the given poses. Output layout `[3, H, W]`,
/// values in [0, 1].
pub fn soft_forward(job: &RasterJob, poses: &[[f64; 3]]) -> Vec<f64> {
    let state = blend_pass(job, poses);
    let n_px = state.s.len();
    let mut out = vec![0.0; 3 * n_px];
    for c in 0..3 {
        for px in 0..n_px {
            out[c * n_px + px] = state.num[c][px] / state.s[px];
        }
    }
    out
}

/// Gradient of a scalar loss w.r.t. each pose `(tx, ty, angle)`, given the
/// loss gradient w.r.t. the output image. Recomputes the forward blend.
pub fn soft_backward(job: &RasterJob, poses: &[[f64; 3]], out_grad: &[f64]) -> Vec<[f64; 3]> {
    let cfg = &job.config;
    let res = cfg.resolution_px;
    let n_px = res * res;
    debug_assert_eq!(out_grad.len(), 3 * n_px);
    let state = blend_pass(job, poses);
    let pixel = |px: usize, c: usize| state.num[c][px] / state.s[px];

    let ndc_per_m = 2.0 / cfg.extent_m;
    let mut grads = vec![[0.0; 3]; job.n_prims()];
    for j in 0..job.n_prims() {
        let Some((r0, r1, c0, c1)) = pixel_rect(&job.geometries[j], &poses[j], job.layers[j], cfg)
        else {
            continue;
        };
        let l_layer = job.layers[j] / cfg.gamma_blend;
        let t_cut = cutoff_t(job.layers[j], cfg);
        let color = &job.colors[j];
        let g = &mut grads[j];
        for r in r0..=r1 {
            for c in c0..=c1 {
                let p = cfg.pixel_center(r, c);
                let (s_m, d_pose_t, d_pose_angle) = posed_sdf(&job.geometries[j], &poses[j], p);
                let s_ndc = s_m * ndc_per_m;
                let t = -s_ndc * s_ndc.abs() / cfg.sigma_blend;
                let Some((ln_d, dln_d_dt)) = ln_coverage(t, t_cut) else {
                    continue;
                };
                let px = r * res + c;
                let w = ((l_layer + ln_d) - state.m[px]).exp() / state.s[px];
                // dL/dl = w sum_c g_c (C_c - I_c)
                let mut dl = 0.0;
                for ch in 0..3 {
                    dl += out_grad[ch * n_px + px] * (color[ch] - pixel(px, ch));
                }
                dl *= w;
                if dl == 0.0 {
                    continue;
                }
                // chain: l -> t -> s_ndc -> s_m -> pose
                let dt_ds_ndc = -2.0 * s_ndc.abs() / cfg.sigma_blend;
                let ds = dl * dln_d_dt * dt_ds_ndc * ndc_per_m;
                g[0] += ds * d_pose_t.x;
                g[1] += ds * d_pose_t.y;
                g[2] += ds * d_pose_angle;
            }
        }
    }
    grads
}

/// Reference renderer: per pixel, the highest-layer primitive containing the
/// pixel center wins; later primitives win layer ties.
pub fn hard_forward(job: &RasterJob, poses: &[[f64; 3]]) -> Vec<f64> {
    let cfg = &job.config;
    let res = cfg.resolution_px;
    let n_px = res * res;
    let mut best_layer = vec![f64::NEG_INFINITY; n_px];
    let mut out = vec![0.0; 3 * n_px];
    for c in 0..3 {
        out[c * n_px..(c + 1) * n_px].fill(COLOR_BACKGROUND[c]);
    }
    for j in 0..job.n_prims() {
        let Some((r0, r1, c0, c1)) = pixel_rect(&job.geometries[j], &poses[j], job.layers[j], cfg)
        else {
            continue;
        };
        for r in r0..=r1 {
            for c in c0..=c1 {
                let p = cfg.pixel_center(r, c);
                let (s_m, _, _) = posed_sdf(&job.geometries[j], &poses[j], p);
                if s_m > 0.0 {
                    continue;
                }
                let px = r * res + c;
                if job.layers[j] >= best_layer[px] {
                    best_layer[px] = job.layers[j];
                    for ch in 0..3 {
                        out[ch * n_px + px] = job.colors[j][ch];
                    }
                }
            }
        }
    }
    out
}

/// Differentiable soft rasterization of a primitive list (f64 convenience
/// wrapper; for tape use see [`rasterize_soft_diff`]).
pub fn rasterize_soft(
    prims: &[DrawPrimitive],
    config: BirdviewConfig,
) -> Result<Vec<f64>, RasterError> {
    let (job, poses) = RasterJob::from_primitives(prims, config)?;
    Ok(soft_forward(&job, &poses))
}

/// Hard reference rasterization of a primitive list.
pub fn rasterize_hard(
    prims: &[DrawPrimitive],
    config: BirdviewConfig,
) -> Result<Vec<f64>, RasterError> {
    let (job, poses) = RasterJob::from_primitives(prims, config)?;
    Ok(hard_forward(&job, &poses))
}

struct SoftRasterOp {
    job: Arc<RasterJob>,
}

impl<T: Scalar> CustomOp<T> for SoftRasterOp {
    fn name(&self) -> &'static str {
        "rasterize_soft"
    }

    fn backward(
        &self,
        inputs: &[Tensor<T>],
        _output: &Tensor<T>,
        out_grad: &[T],
        needed: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        if !needed[0] {
            return vec![None];
        }
        let poses = poses_from_tensor(&inputs[0]);
        let grad_f64: Vec<f64> = out_grad.iter().map(|g| g.to_f64()).collect();
        let pose_grads = soft_backward(&self.job, &poses, &grad_f64);
        let flat: Vec<T> = pose_grads
            .iter()
            .flat_map(|g| g.iter().map(|&v| T::from_f64(v)))
            .collect();
        vec![Some(flat)]
    }
}

fn poses_from_tensor<T: Scalar>(t: &Tensor<T>) -> Vec<[f64; 3]> {
    t.data()
        .chunks(3)
        .map(|c| [c[0].to_f64(), c[1].to_f64(), c[2].to_f64()])
        .collect()
}

/// Tape-recorded soft rasterization: `poses` has shape `[P, 3]` rows of
/// `(tx, ty, angle)`; the output image `[3, H, W]` is differentiable w.r.t.
/// the poses.
pub fn rasterize_soft_diff<T: Scalar>(
    tape: &mut Tape<T>,
    job: &Arc<RasterJob>,
    poses: &Tensor<T>,
) -> AdResult<Tensor<T>> {
    assert_eq!(
        poses.len(),
        3 * job.geometries.len(),
        "poses must be [P, 3] matching the job's primitive count"
    );
    let pose_arr = poses_from_tensor(poses);
    let pixels = soft_forward(job, &pose_arr);
    let res = job.config.resolution_px;
    let value = Tensor::from_f64_slice(vec![3, res, res], &pixels);
    tape.custom(
        Arc::new(SoftRasterOp {
            job: Arc::clone(job),
        }),
        &[poses],
        value,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Tape};
    use crate::geom::RigidTransform;
    use crate::rasterizer::{COLOR_EGO, LAYER_EGO, LAYER_OTHER_AGENT};

    fn small_cfg() -> BirdviewConfig {
        BirdviewConfig {
            resolution_px: 32,
            extent_m: 20.0,
            ..BirdviewConfig::default()
        }
    }

    fn boxed(
        center: (f64, f64),
        l: f64,
        w: f64,
        angle: f64,
        color: [f64; 3],
        layer: f64,
    ) -> DrawPrimitive {
        DrawPrimitive::oriented_box(Point2::new(center.0, center.1), l, w, angle, color, layer)
            .unwrap()
    }

    #[test]
    fn empty_scene_is_background() {
        let cfg = small_cfg();
        let soft = rasterize_soft(&[], cfg).unwrap();
        let hard = rasterize_hard(&[], cfg).unwrap();
        for v in soft {
            assert!((v - 1.0).abs() < 1e-12);
        }
        for v in hard {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn coverage_is_half_on_the_edge() {
        // directly exercise the coverage at t = 0
        let (ln_d, _) = ln_coverage(0.0, -100.0).unwrap();
        assert!((ln_d.exp() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn coverage_window_is_smooth_and_monotone() {
        // finite differences across the window region
        let t_cut = cutoff_t(4.0, &BirdviewConfig::default());
        let mut prev = f64::INFINITY;
        let mut t = -29.0;
        while t > t_cut + 0.5 {
            let (ln_d, d) = ln_coverage(t, t_cut).unwrap();
            assert!(ln_d < prev, "coverage must decay");
            let eps = 1e-6;
            let (plus, _) = ln_coverage(t + eps, t_cut).unwrap();
            let (minus, _) = ln_coverage(t - eps, t_cut).unwrap();
            let fd = (plus - minus) / (2.0 * eps);
            assert!((fd - d).abs() < 1e-4, "window gradient at {t}: {d} vs {fd}");
            prev = ln_d;
            t -= 0.37;
        }
    }

    #[test]
    fn deep_box_pixel_matches_box_color() {
        let cfg = small_cfg();
        let prim = boxed((0.0, 0.0), 10.0, 10.0, 0.0, COLOR_EGO, LAYER_EGO);
        let img = rasterize_soft(&[prim], cfg).unwrap();
        let res = cfg.resolution_px;
        let center = (res / 2) * res + res / 2;
        let n_px = res * res;
        for ch in 0..3 {
            assert!(
                (img[ch * n_px + center] - COLOR_EGO[ch]).abs() < 1e-3,
                "channel {ch}: {}",
                img[ch * n_px + center]
            );
        }
    }

    #[test]
    fn hard_overlap_shows_higher_layer() {
        let cfg = small_cfg();
        let lower = boxed(
            (0.0, 0.0),
            8.0,
            8.0,
            0.0,
            [0.2, 0.4, 1.0],
            LAYER_OTHER_AGENT,
        );
        let upper = boxed((0.0, 0.0), 4.0, 4.0, 0.0, COLOR_EGO, LAYER_EGO);
        let img = rasterize_hard(&[lower, upper], cfg).unwrap();
        let res = cfg.resolution_px;
        let n_px = res * res;
        let center = (res / 2) * res + res / 2;
        for ch in 0..3 {
            assert_eq!(img[ch * n_px + center], COLOR_EGO[ch]);
        }
        // a pixel inside the big box but outside the small one shows the lower layer
        let off = (res / 2) * res + res / 2 + 5; // ~3.1 m left of center
        assert_eq!(img[off], 0.2);
        assert_eq!(img[n_px + off], 0.4);
        assert_eq!(img[2 * n_px + off], 1.0);
    }

    #[test]
    fn hard_full_extent_box() {
        let cfg = small_cfg();
        let prim = boxed((0.0, 0.0), 100.0, 100.0, 0.0, COLOR_EGO, LAYER_EGO);
        let img = rasterize_hard(&[prim], cfg).unwrap();
        let n_px = cfg.resolution_px * cfg.resolution_px;
        for px in 0..n_px {
            assert_eq!(img[px], COLOR_EGO[0]);
            assert_eq!(img[n_px + px], COLOR_EGO[1]);
            assert_eq!(img[2 * n_px + px], COLOR_EGO[2]);
        }
    }

    #[test]
    fn outputs_stay_in_unit_interval() {
        let cfg = small_cfg();
        let prims = vec![
            boxed((1.0, 2.0), 5.0, 2.0, 0.7, [0.2, 0.4, 1.0], 3.0),
            boxed((-2.0, -1.0), 4.0, 2.0, -0.4, COLOR_EGO, 4.0),
            DrawPrimitive::new(
                BaseGeometry::convex_polygon(vec![
                    Point2::new(-8.0, -8.0),
                    Point2::new(8.0, -8.0),
                    Point2::new(8.0, 8.0),
                    Point2::new(-8.0, 8.0),
                ]),
                RigidTransform::identity(),
                [0.35, 0.35, 0.35],
                1.0,
            )
            .unwrap(),
        ];
        for v in rasterize_soft(&prims, cfg).unwrap() {
            assert!((0.0..=1.0 + 1e-12).contains(&v), "pixel {v}");
        }
    }

    /// d(mean pixel intensity)/d(box pose) vs central differences at default
    /// blend temperatures.
    #[test]
    fn soft_gradients_match_finite_differences() {
        let cfg = BirdviewConfig {
            resolution_px: 48,
            extent_m: 24.0,
            ..BirdviewConfig::default()
        };
        let prims = vec![
            boxed((0.5, -0.75), 4.0, 2.0, 0.3, [0.2, 0.4, 1.0], 3.0),
            boxed((-3.0, 2.0), 4.5, 2.0, -0.9, COLOR_EGO, 4.0),
        ];
        let (job, poses) = RasterJob::from_primitives(&prims, cfg).unwrap();
        let job = Arc::new(job);
        let flat: Vec<f64> = poses.iter().flatten().copied().collect();
        let x = Tensor::<f64>::from_f64_slice(vec![prims.len(), 3], &flat);
        let err = grad_check(
            |tape: &mut Tape<f64>, x: &Tensor<f64>| {
                let img = rasterize_soft_diff(tape, &job, x)?;
                tape.mean(&img)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-3, "raster gradient error {err}");
    }

    /// Soft converges to hard away from edges as both temperatures shrink.
    #[test]
    fn soft_converges_to_hard() {
        let cfg = BirdviewConfig {
            resolution_px: 64,
            extent_m: 32.0,
            sigma_blend: 1e-6,
            gamma_blend: 1e-4,
            eps_bg: 1e-3,
        };
        let prims = vec![
            DrawPrimitive::new(
                BaseGeometry::convex_polygon(vec![
                    Point2::new(-12.0, -6.0),
                    Point2::new(12.0, -6.0),
                    Point2::new(12.0, 6.0),
                    Point2::new(-12.0, 6.0),
                ]),
                RigidTransform::identity(),
                [0.35, 0.35, 0.35],
                1.0,
            )
            .unwrap(),
            boxed((2.0, 1.0), 5.0, 2.5, 0.4, [0.2, 0.4, 1.0], 3.0),
            boxed((-4.0, -2.0), 4.0, 2.0, -0.2, COLOR_EGO, 4.0),
        ];
        let (job, poses) = RasterJob::from_primitives(&prims, cfg).unwrap();
        let soft = soft_forward(&job, &poses);
        let hard = hard_forward(&job, &poses);

        let res = cfg.resolution_px;
        let n_px = res * res;
        let margin = 2.0 * cfg.meters_per_px();
        let mut tested = 0;
        for r in 0..res {
            for c in 0..res {
                let p = cfg.pixel_center(r, c);
                let min_abs_sdf = prims
                    .iter()
                    .zip(&poses)
                    .map(|(prim, pose)| posed_sdf(&prim.geometry, pose, p).0.abs())
                    .fold(f64::INFINITY, f64::min);
                if min_abs_sdf < margin {
                    continue;
                }
                tested += 1;
                let px = r * res + c;
                for ch in 0..3 {
                    let d = (soft[ch * n_px + px] - hard[ch * n_px + px]).abs();
                    assert!(
                        d < 1.0 / 255.0,
                        "pixel ({r},{c}) ch {ch}: |soft-hard| = {d}"
                    );
                }
            }
        }
        assert!(
            tested > n_px / 2,
            "too few interior pixels tested: {tested}"
        );
    }

    /// Rigidly transforming the world and the ego together leaves the image
    /// unchanged; this is the testable form of "ego-centered, ego-rotated".
    #[test]
    fn ego_frame_invariance() {
        use crate::scene::{AgentAttributes, AgentState, MapData};

        let cfg = small_cfg();
        let map = MapData {
            driveable_polygons: vec![vec![
                Point2::new(-10.0, -4.0),
                Point2::new(10.0, -4.0),
                Point2::new(10.0, 4.0),
                Point2::new(-10.0, 4.0),
            ]],
            lane_lines: vec![crate::scene::LaneLine {
                points: vec![Point2::new(-10.0, 0.0), Point2::new(10.0, 0.0)],
                width: 0.3,
            }],
        };
        let attrs = AgentAttributes::vehicle(4.0, 2.0);
        let states = [
            AgentState::new(1.0, 0.5, 0.2, 3.0),
            AgentState::new(-4.0, -1.0, -0.7, 2.0),
        ];

        let render = |map: &MapData, states: &[AgentState]| {
            let agents: Vec<_> = states.iter().map(|s| (attrs, Some(*s))).collect();
            let prims = crate::rasterizer::primitives_for_states(map, &agents, 0).unwrap();
            rasterize_soft(&prims, cfg).unwrap()
        };

        let base = render(&map, &states);

        // rigid world transform
        let shift = crate::geom::RigidTransform::new(Point2::new(13.0, -7.0), 0.9);
        let map2 = MapData {
            driveable_polygons: map
                .driveable_polygons
                .iter()
                .map(|poly| poly.iter().map(|&p| shift.apply(p)).collect())
                .collect(),
            lane_lines: map
                .lane_lines
                .iter()
                .map(|l| crate::scene::LaneLine {
                    points: l.points.iter().map(|&p| shift.apply(p)).collect(),
                    width: l.width,
                })
                .collect(),
        };
        let states2: Vec<AgentState> = states
            .iter()
            .map(|s| {
                let p = shift.apply(Point2::new(s.x, s.y));
                AgentState::new(p.x, p.y, s.psi + shift.angle, s.v)
            })
            .collect();
        let moved = render(&map2, &states2);

        for (a, b) in base.iter().zip(&moved) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}
