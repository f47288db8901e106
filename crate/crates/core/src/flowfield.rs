//! Optical-flow representation: magnitude/angle normalization, the RGB
//! encoding that lets flow share the video's data format, padding, a
//! brute-force block-matching estimator, and endpoint error.
//!
//! The color code is HSV with hue from the angle, full saturation and value
//! equal to the normalized magnitude, so zero motion is black `(-1, -1, -1)`.
//! Unlike the Middlebury wheel it is exactly invertible below the magnitude cap.

use std::f64::consts::PI;

use ndarray::{s, Array3, Array4, ArrayView4, Axis, Zip};

use crate::error::{Error, Result};
use crate::synthdata::Video;

pub const DEFAULT_SIGMA: f64 = 0.15;
/// Block edge used when estimating flow of generated videos.
pub const DEFAULT_BLOCK: usize = 4;
const BLACK_TOLERANCE: f64 = 1e-6;
const RANGE_TOLERANCE: f64 = 1e-4;

/// Per-pixel displacement `(u, v)` (horizontal, vertical) in pixels.
///
/// `padded` is false for the raw `T - 1` transitions of a `T`-frame video and
/// true once a trailing zero frame aligns it with the video.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub data: Array4<f64>,
    pub padded: bool,
}

impl FlowField {
    pub fn new(data: Array4<f64>, padded: bool) -> Result<Self> {
        if data.dim().3 != 2 {
            return Err(Error::shape(format!("flow needs 2 components, got {}", data.dim().3)));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("flow contains non-finite values".into()));
        }
        Ok(FlowField { data, padded })
    }

    pub fn frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn max_magnitude(&self) -> f64 {
        self.data
            .lanes(Axis(3))
            .into_iter()
            .map(|l| l[0].hypot(l[1]))
            .fold(0.0, f64::max)
    }

    /// Mean displacement magnitude over all pixels and frames.
    pub fn mean_magnitude(&self) -> f64 {
        let n = self.data.len() / 2;
        if n == 0 {
            return 0.0;
        }
        self.data
            .lanes(Axis(3))
            .into_iter()
            .map(|l| l[0].hypot(l[1]))
            .sum::<f64>()
            / n as f64
    }

    /// Drops a trailing pad frame, returning the `T - 1` transitions.
    pub fn unpadded(&self) -> FlowField {
        if !self.padded {
            return self.clone();
        }
        let t = self.frames();
        FlowField {
            data: self.data.slice(s![..t - 1, .., .., ..]).to_owned(),
            padded: false,
        }
    }
}

/// Flow rendered as a `T x H x W x 3` color video in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowVideo {
    pub data: Array4<f64>,
    pub sigma: f64,
}

impl FlowVideo {
    pub fn view(&self) -> ArrayView4<'_, f64> {
        self.data.view()
    }
}

/// Displacement magnitude at which `m` saturates to 1.
pub fn magnitude_cap(sigma: f64, height: usize, width: usize) -> f64 {
    sigma * ((height * height + width * width) as f64).sqrt()
}

/// Magnitude and angle fields: `m = min(1, |d| / (sigma * sqrt(H^2 + W^2)))`,
/// `alpha = atan2(v, u)`.
pub fn normalize_flow(flow: &FlowField, sigma: f64) -> Result<(Array3<f64>, Array3<f64>)> {
    if sigma.is_nan() || sigma <= 0.0 || !sigma.is_finite() {
        return Err(Error::invalid("sigma", format!("{sigma} must be positive")));
    }
    if flow.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("flow contains non-finite values".into()));
    }
    let (t, h, w, _) = flow.data.dim();
    let cap = magnitude_cap(sigma, h, w);
    let mut m = Array3::zeros((t, h, w));
    let mut alpha = Array3::zeros((t, h, w));
    Zip::from(&mut m)
        .and(&mut alpha)
        .and(flow.data.lanes(Axis(3)))
        .for_each(|m, a, d| {
            let (u, v) = (d[0], d[1]);
            *m = (u.hypot(v) / cap).min(1.0);
            // atan2(0, -0) would give pi; pin the zero-flow convention.
            *a = if u == 0.0 && v == 0.0 { 0.0 } else { v.atan2(u) };
        });
    Ok((m, alpha))
}

fn hsv_to_rgb(hue: f64, value: f64) -> [f64; 3] {
    let h6 = (hue * 6.0).rem_euclid(6.0);
    let sector = h6.floor();
    let f = h6 - sector;
    let (q, t) = (value * (1.0 - f), value * f);
    match sector as u8 {
        0 => [value, t, 0.0],
        1 => [q, value, 0.0],
        2 => [0.0, value, t],
        3 => [0.0, q, value],
        4 => [t, 0.0, value],
        _ => [value, 0.0, q],
    }
}

/// Returns `(hue, value)` of an RGB triple in `[0, 1]`.
fn rgb_to_hue_value(rgb: [f64; 3]) -> (f64, f64) {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let chroma = max - r.min(g).min(b);
    if chroma <= 0.0 {
        return (0.0, max);
    }
    let h6 = if max == r {
        ((g - b) / chroma).rem_euclid(6.0)
    } else if max == g {
        (b - r) / chroma + 2.0
    } else {
        (r - g) / chroma + 4.0
    };
    (h6 / 6.0, max)
}

/// Encodes a padded flow field as a color video.
pub fn encode_flow_rgb(flow: &FlowField, sigma: f64) -> Result<FlowVideo> {
    if !flow.padded {
        return Err(Error::invalid(
            "flow",
            "flow has T - 1 frames; call pad_flow before encoding",
        ));
    }
    let (m, alpha) = normalize_flow(flow, sigma)?;
    let (t, h, w) = m.dim();
    let mut data = Array4::from_elem((t, h, w, 3), -1.0);
    Zip::from(data.lanes_mut(Axis(3)))
        .and(&m)
        .and(&alpha)
        .for_each(|mut px, &m, &a| {
            if m > 0.0 {
                let rgb = hsv_to_rgb((a + PI) / (2.0 * PI), m);
                for c in 0..3 {
                    px[c] = 2.0 * rgb[c] - 1.0;
                }
            }
        });
    Ok(FlowVideo { data, sigma })
}

/// Inverts [`encode_flow_rgb`]. Saturated pixels (`m = 1`) decode to the cap
/// magnitude, which is only a lower bound on the true displacement.
pub fn decode_flow_rgb(fv: &FlowVideo) -> Result<FlowField> {
    let (t, h, w, c) = fv.data.dim();
    if c != 3 {
        return Err(Error::shape(format!("flow video needs 3 channels, got {c}")));
    }
    if let Some(bad) = fv
        .data
        .iter()
        .find(|v| !v.is_finite() || v.abs() > 1.0 + RANGE_TOLERANCE)
    {
        return Err(Error::invalid("flow video", format!("value {bad} outside [-1, 1]")));
    }
    let cap = magnitude_cap(fv.sigma, h, w);
    let mut data = Array4::zeros((t, h, w, 2));
    Zip::from(data.lanes_mut(Axis(3)))
        .and(fv.data.lanes(Axis(3)))
        .for_each(|mut d, px| {
            if px.iter().all(|&v| v <= -1.0 + BLACK_TOLERANCE) {
                return;
            }
            let rgb = [0, 1, 2].map(|i| (px[i].clamp(-1.0, 1.0) + 1.0) / 2.0);
            let (hue, m) = rgb_to_hue_value(rgb);
            let alpha = 2.0 * PI * hue - PI;
            let mag = m * cap;
            d[0] = mag * alpha.cos();
            d[1] = mag * alpha.sin();
        });
    FlowField::new(data, true)
}

/// Appends one all-zero trailing frame so flow frame `i` stays attached to
/// the transition `i -> i + 1`.
pub fn pad_flow(flow: &FlowField) -> Result<FlowField> {
    if flow.padded {
        return Err(Error::invalid("flow", "already padded"));
    }
    let (t, h, w, _) = flow.data.dim();
    let mut data = Array4::zeros((t + 1, h, w, 2));
    data.slice_mut(s![..t, .., .., ..]).assign(&flow.data);
    Ok(FlowField { data, padded: true })
}

/// Pads to `T` frames and encodes with `sigma`: the motion signal a training
/// item carries.
pub fn flow_video_for(flow: &FlowField, sigma: f64) -> Result<FlowVideo> {
    encode_flow_rgb(&pad_flow(flow)?, sigma)
}

/// Candidate displacements ordered by the tie-break rule: smaller magnitude
/// first, then lexicographic `(u, v)`.
fn search_order(radius: i64) -> Vec<(i64, i64)> {
    let mut c: Vec<(i64, i64)> = (-radius..=radius)
        .flat_map(|u| (-radius..=radius).map(move |v| (u, v)))
        .collect();
    c.sort_by_key(|&(u, v)| (u * u + v * v, u, v));
    c
}

/// Exhaustive integer block matching from frame `i` to frame `i + 1` by sum
/// of absolute differences over all channels. Candidate blocks must lie fully
/// inside the next frame.
pub fn estimate_flow_blockmatch(video: &Video, block: usize, radius: usize) -> Result<FlowField> {
    let (t, h, w, _) = video.data.dim();
    if t < 2 {
        return Err(Error::invalid("video", "block matching needs at least 2 frames"));
    }
    if block == 0 || h % block != 0 || w % block != 0 {
        return Err(Error::invalid("block", format!("{block} must divide {h}x{w}")));
    }
    if radius < 1 {
        return Err(Error::invalid("radius", "must be at least 1"));
    }
    let order = search_order(radius as i64);
    let mut data = Array4::zeros((t - 1, h, w, 2));
    for i in 0..t - 1 {
        let cur = video.data.index_axis(Axis(0), i);
        let next = video.data.index_axis(Axis(0), i + 1);
        for by in (0..h).step_by(block) {
            for bx in (0..w).step_by(block) {
                let src = cur.slice(s![by..by + block, bx..bx + block, ..]);
                let mut best: Option<(f64, (i64, i64))> = None;
                for &(u, v) in &order {
                    let (ty, tx) = (by as i64 + v, bx as i64 + u);
                    if ty < 0 || tx < 0 || ty as usize + block > h || tx as usize + block > w {
                        continue;
                    }
                    let (ty, tx) = (ty as usize, tx as usize);
                    let dst = next.slice(s![ty..ty + block, tx..tx + block, ..]);
                    let sad: f64 = Zip::from(&src).and(&dst).fold(0.0, |acc, a, b| acc + (a - b).abs());
                    if best.is_none_or(|(b, _)| sad < b) {
                        best = Some((sad, (u, v)));
                    }
                }
                let (_, (u, v)) = best.expect("zero displacement is always in range");
                let mut out = data.slice_mut(s![i, by..by + block, bx..bx + block, ..]);
                out.slice_mut(s![.., .., 0]).fill(u as f64);
                out.slice_mut(s![.., .., 1]).fill(v as f64);
            }
        }
    }
    FlowField::new(data, false)
}

fn check_same_shape(a: &FlowField, b: &FlowField) -> Result<()> {
    if a.data.dim() != b.data.dim() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.data.dim(), b.data.dim())));
    }
    Ok(())
}

/// Mean Euclidean distance between displacement vectors.
pub fn endpoint_error(a: &FlowField, b: &FlowField) -> Result<f64> {
    check_same_shape(a, b)?;
    let n = a.data.len() / 2;
    if n == 0 {
        return Ok(0.0);
    }
    let total: f64 = Zip::from(a.data.lanes(Axis(3)))
        .and(b.data.lanes(Axis(3)))
        .fold(0.0, |acc, p, q| acc + (p[0] - q[0]).hypot(p[1] - q[1]));
    Ok(total / n as f64)
}

/// Endpoint error restricted to pixels where `mask` (`T_f x H x W`) is set.
pub fn endpoint_error_masked(a: &FlowField, b: &FlowField, mask: &Array3<bool>) -> Result<f64> {
    check_same_shape(a, b)?;
    let (t, h, w, _) = a.data.dim();
    if mask.dim() != (t, h, w) {
        return Err(Error::shape("mask does not match flow".to_string()));
    }
    let (sum, n) = Zip::from(a.data.lanes(Axis(3)))
        .and(b.data.lanes(Axis(3)))
        .and(mask)
        .fold((0.0, 0usize), |(s, n), p, q, &m| {
            if m {
                (s + (p[0] - q[0]).hypot(p[1] - q[1]), n + 1)
            } else {
                (s, n)
            }
        });
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Pixels whose block, displaced by `flow`, stays inside the frame: the only
/// places where an exact block match can exist.
pub fn in_frame_block_mask(flow: &FlowField, block: usize) -> Array3<bool> {
    let (t, h, w, _) = flow.data.dim();
    Array3::from_shape_fn((t, h, w), |(i, y, x)| {
        let (by, bx) = ((y / block * block) as f64, (x / block * block) as f64);
        let ty = by + flow.data[[i, y, x, 1]];
        let tx = bx + flow.data[[i, y, x, 0]];
        ty >= 0.0 && tx >= 0.0 && ty + block as f64 <= h as f64 && tx + block as f64 <= w as f64
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::render_texture_pan;
    use proptest::prelude::*;

    fn single(u: f64, v: f64, h: usize, w: usize) -> FlowField {
        let mut d = Array4::zeros((1, h, w, 2));
        d[[0, 0, 0, 0]] = u;
        d[[0, 0, 0, 1]] = v;
        FlowField::new(d, true).unwrap()
    }

    #[test]
    fn zero_flow_normalizes_to_zero() {
        let (m, a) = normalize_flow(&single(0.0, 0.0, 4, 4), DEFAULT_SIGMA).unwrap();
        assert_eq!(m[[0, 0, 0]], 0.0);
        assert_eq!(a[[0, 0, 0]], 0.0);
    }

    #[test]
    fn cap_boundary() {
        let cap = magnitude_cap(DEFAULT_SIGMA, 16, 16);
        let (m, a) = normalize_flow(&single(cap, 0.0, 16, 16), DEFAULT_SIGMA).unwrap();
        assert!((m[[0, 0, 0]] - 1.0).abs() < 1e-15);
        assert_eq!(a[[0, 0, 0]], 0.0);
    }

    #[test]
    fn worked_example_saturates() {
        // |(3, 4)| = 5 against 0.15 * sqrt(512) ~ 3.394.
        let (m, a) = normalize_flow(&single(3.0, 4.0, 16, 16), DEFAULT_SIGMA).unwrap();
        assert_eq!(m[[0, 0, 0]], 1.0);
        assert!((a[[0, 0, 0]] - 0.927_295_218_001_612_2).abs() < 1e-12);
        assert!((magnitude_cap(0.15, 16, 16) - 3.394_112_549_695_428).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_sigma_and_nonfinite() {
        assert!(normalize_flow(&single(1.0, 0.0, 4, 4), 0.0).is_err());
        let mut f = single(1.0, 0.0, 4, 4);
        f.data[[0, 1, 1, 0]] = f64::NAN;
        assert!(matches!(normalize_flow(&f, 0.15), Err(Error::NonFinite(_))));
    }

    #[test]
    fn all_zero_flow_encodes_black() {
        let f = FlowField::new(Array4::zeros((3, 4, 4, 2)), true).unwrap();
        let fv = encode_flow_rgb(&f, DEFAULT_SIGMA).unwrap();
        assert!(fv.data.iter().all(|&x| x == -1.0));
        assert!(decode_flow_rgb(&fv).unwrap().data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn full_magnitude_at_zero_angle_is_cyan() {
        let cap = magnitude_cap(DEFAULT_SIGMA, 4, 4);
        let fv = encode_flow_rgb(&single(cap, 0.0, 4, 4), DEFAULT_SIGMA).unwrap();
        let px: Vec<f64> = fv.data.slice(s![0, 0, 0, ..]).to_vec();
        assert!((px[0] + 1.0).abs() < 1e-12);
        assert!((px[1] - 1.0).abs() < 1e-12);
        assert!((px[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn up_and_down_get_distinct_colors() {
        let a = encode_flow_rgb(&single(0.0, 1.0, 4, 4), DEFAULT_SIGMA).unwrap();
        let b = encode_flow_rgb(&single(0.0, -1.0, 4, 4), DEFAULT_SIGMA).unwrap();
        assert_ne!(a.data.slice(s![0, 0, 0, ..]), b.data.slice(s![0, 0, 0, ..]));
    }

    #[test]
    fn unpadded_encode_is_rejected() {
        let f = FlowField::new(Array4::zeros((1, 4, 4, 2)), false).unwrap();
        let err = encode_flow_rgb(&f, DEFAULT_SIGMA).unwrap_err();
        assert!(err.to_string().contains("pad_flow"));
    }

    #[test]
    fn super_cap_decodes_to_cap() {
        let cap = magnitude_cap(DEFAULT_SIGMA, 8, 8);
        let fv = encode_flow_rgb(&single(3.0 * cap, 0.0, 8, 8), DEFAULT_SIGMA).unwrap();
        let d = decode_flow_rgb(&fv).unwrap();
        assert!((d.data[[0, 0, 0, 0]].hypot(d.data[[0, 0, 0, 1]]) - cap).abs() < 1e-12);
    }

    #[test]
    fn decode_rejects_out_of_range() {
        let mut fv = FlowVideo {
            data: Array4::from_elem((1, 2, 2, 3), -1.0),
            sigma: DEFAULT_SIGMA,
        };
        fv.data[[0, 0, 0, 0]] = 1.00005;
        assert!(decode_flow_rgb(&fv).is_ok());
        fv.data[[0, 0, 0, 0]] = 1.01;
        assert!(decode_flow_rgb(&fv).is_err());
    }

    #[test]
    fn pad_contract() {
        let f = FlowField::new(Array4::from_elem((1, 2, 2, 2), 0.5), false).unwrap();
        let p = pad_flow(&f).unwrap();
        assert_eq!(p.frames(), 2);
        assert!(p.data.slice(s![1, .., .., ..]).iter().all(|&x| x == 0.0));
        assert_eq!(p.data.sum(), f.data.sum());
        assert!(pad_flow(&p).is_err());
        assert_eq!(p.unpadded(), f);
    }

    #[test]
    fn blockmatch_static_and_shift() {
        let v = Video::new(Array4::from_elem((3, 8, 8, 3), 0.3)).unwrap();
        let f = estimate_flow_blockmatch(&v, 4, 2).unwrap();
        assert!(f.data.iter().all(|&x| x == 0.0));

        let (v, truth) = render_texture_pan(3, 8, 8, [1, 0], 1).unwrap();
        let est = estimate_flow_blockmatch(&v, 2, 2).unwrap();
        let mask = in_frame_block_mask(&truth, 2);
        assert_eq!(endpoint_error_masked(&est, &truth, &mask).unwrap(), 0.0);
    }

    #[test]
    fn blockmatch_clamps_to_search_window() {
        let (v, truth) = render_texture_pan(2, 16, 16, [3, 0], 2).unwrap();
        let est = estimate_flow_blockmatch(&v, 4, 2).unwrap();
        assert!(est.max_magnitude() <= 2.0f64.hypot(2.0));
        let mask = in_frame_block_mask(&truth, 4);
        assert!(endpoint_error_masked(&est, &truth, &mask).unwrap() > 0.0);
    }

    #[test]
    fn blockmatch_validates() {
        let v = Video::new(Array4::zeros((1, 8, 8, 3))).unwrap();
        assert!(estimate_flow_blockmatch(&v, 4, 2).is_err());
        let v = Video::new(Array4::zeros((2, 8, 8, 3))).unwrap();
        assert!(estimate_flow_blockmatch(&v, 3, 2).is_err());
        assert!(estimate_flow_blockmatch(&v, 4, 0).is_err());
    }

    #[test]
    fn endpoint_error_basics() {
        let a = FlowField::new(
            Array4::from_shape_fn((2, 3, 3, 2), |(t, y, x, c)| (t + y * x + c) as f64),
            false,
        )
        .unwrap();
        assert_eq!(endpoint_error(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        b.data.slice_mut(s![.., .., .., 0]).mapv_inplace(|u| u + 1.0);
        assert!((endpoint_error(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(endpoint_error(&a, &b).unwrap(), endpoint_error(&b, &a).unwrap());
        let c = FlowField::new(Array4::zeros((1, 3, 3, 2)), false).unwrap();
        assert!(endpoint_error(&a, &c).is_err());
    }

    proptest! {
        #[test]
        fn magnitude_is_capped(u in -1e12f64..1e12, v in -1e12f64..1e12) {
            let (m, _) = normalize_flow(&single(u, v, 16, 16), DEFAULT_SIGMA).unwrap();
            prop_assert!((0.0..=1.0).contains(&m[[0, 0, 0]]));
        }

        #[test]
        fn sub_cap_round_trip(r in 1e-4f64..0.999, theta in -PI..PI) {
            let cap = magnitude_cap(DEFAULT_SIGMA, 16, 16);
            let f = single(r * cap * theta.cos(), r * cap * theta.sin(), 16, 16);
            let back = decode_flow_rgb(&encode_flow_rgb(&f, DEFAULT_SIGMA).unwrap()).unwrap();
            prop_assert!(endpoint_error(&f, &back).unwrap() * 256.0 < 1e-6);
        }
    }
}
