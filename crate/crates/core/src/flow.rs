//! Dense two-frame optical flow by Farneback polynomial expansion.
//!
//! Each pixel neighborhood is approximated by a quadratic
//! `f(p) ≈ pᵀ A p + bᵀ p + c` fitted by Gaussian-weighted least squares.
//! If the next frame is the previous one displaced by `d`, the expansions
//! satisfy `A d = -(b_next - b_prev) / 2`; the displacement is solved per
//! pixel from box-averaged normal equations, coarse to fine over a Gaussian
//! pyramid.
//!
//! The flow follows `prev(y, x) ≈ next(y + v, x + u)`: `u` is the
//! horizontal and `v` the vertical displacement in pixels per frame, with
//! `y` pointing down.

use crate::error::{Error, Result};
use crate::frame::{resample_plane, sample_bilinear, Frame};

/// Systems whose determinant falls below this resolve to zero displacement.
pub const SINGULAR_DET: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FarnebackParams {
    /// Downscale ratio between consecutive pyramid levels, in `(0, 1)`.
    pub pyr_scale: f64,
    /// Number of pyramid levels including the full-resolution one.
    pub levels: usize,
    /// Side of the square averaging window (odd).
    pub winsize: usize,
    /// Refinement passes per level.
    pub iterations: usize,
    /// Side of the polynomial expansion neighborhood (odd).
    pub poly_n: usize,
    /// Standard deviation of the Gaussian applicability.
    pub poly_sigma: f64,
}

impl Default for FarnebackParams {
    fn default() -> Self {
        FarnebackParams {
            pyr_scale: 0.5,
            levels: 3,
            winsize: 15,
            iterations: 3,
            poly_n: 5,
            poly_sigma: 1.1,
        }
    }
}

impl FarnebackParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.pyr_scale > 0.0 && self.pyr_scale < 1.0) {
            return bad(format!(
                "pyr_scale must be in (0,1), got {}",
                self.pyr_scale
            ));
        }
        if self.levels < 1 {
            return bad("levels must be at least 1".into());
        }
        if self.winsize < 3 || self.winsize % 2 != 1 {
            return bad(format!(
                "winsize must be odd and >= 3, got {}",
                self.winsize
            ));
        }
        if self.iterations < 1 {
            return bad("iterations must be at least 1".into());
        }
        if self.poly_n < 3 || self.poly_n % 2 != 1 {
            return bad(format!("poly_n must be odd and >= 3, got {}", self.poly_n));
        }
        if !(self.poly_sigma > 0.0 && self.poly_sigma.is_finite()) {
            return bad(format!(
                "poly_sigma must be positive, got {}",
                self.poly_sigma
            ));
        }
        Ok(())
    }
}

/// Per-pixel displacement field.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    u: Vec<f64>,
    v: Vec<f64>,
}

impl FlowField {
    pub fn new(width: usize, height: usize, u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if u.len() != width * height || v.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height} flow needs {} entries per component",
                width * height
            )));
        }
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter(
                "flow contains non-finite values".into(),
            ));
        }
        Ok(FlowField {
            width,
            height,
            u,
            v,
        })
    }

    pub fn uniform(width: usize, height: usize, u: f64, v: f64) -> Self {
        FlowField {
            width,
            height,
            u: vec![u; width * height],
            v: vec![v; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    /// Largest `|u|` or `|v|` over the field.
    pub fn max_abs(&self) -> f64 {
        self.u
            .iter()
            .chain(&self.v)
            .fold(0.0, |m, x| f64::max(m, x.abs()))
    }
}

/// Per-pixel quadratic model `pᵀ A p + bᵀ p + c` with `p = (x, y)` offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyExpansion {
    width: usize,
    height: usize,
    a11: Vec<f64>,
    a12: Vec<f64>,
    a22: Vec<f64>,
    b1: Vec<f64>,
    b2: Vec<f64>,
    c: Vec<f64>,
}

impl PolyExpansion {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Symmetric matrix `A` at a pixel.
    pub fn a(&self, x: usize, y: usize) -> [[f64; 2]; 2] {
        let i = y * self.width + x;
        [[self.a11[i], self.a12[i]], [self.a12[i], self.a22[i]]]
    }

    pub fn b(&self, x: usize, y: usize) -> [f64; 2] {
        let i = y * self.width + x;
        [self.b1[i], self.b2[i]]
    }

    pub fn c(&self, x: usize, y: usize) -> f64 {
        self.c[y * self.width + x]
    }
}

struct ExpansionKernel {
    radius: usize,
    /// Normalized Gaussian weights indexed by `offset + radius`.
    w: Vec<f64>,
    m2: f64,
    m4: f64,
}

impl ExpansionKernel {
    fn new(poly_n: usize, sigma: f64) -> Self {
        let radius = (poly_n.max(3) - 1) / 2;
        let mut w: Vec<f64> = (0..=2 * radius)
            .map(|k| {
                let i = k as f64 - radius as f64;
                (-i * i / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= total);
        let moment = |p: i32| {
            w.iter()
                .enumerate()
                .map(|(k, wk)| wk * (k as f64 - radius as f64).powi(p))
                .sum::<f64>()
        };
        let (m2, m4) = (moment(2), moment(4));
        ExpansionKernel { radius, w, m2, m4 }
    }

    fn weight(&self, offset: isize) -> f64 {
        self.w[(offset + self.radius as isize) as usize]
    }
}

/// 1D filter direction over a row-major plane, with edge replication.
#[derive(Clone, Copy)]
enum Axis {
    X,
    Y,
}

#[derive(Clone, Copy)]
enum Filter {
    /// `Σ w_i f(p+i)`
    Smooth,
    /// `Σ_{i>0} i w_i (f(p+i) - f(p-i))`: first moment.
    Odd,
    /// `Σ (i² - m2) w_i (f(p+i) - f(p))`: centered second moment.
    Even,
}

fn filter_1d(
    plane: &[f64],
    w: usize,
    h: usize,
    axis: Axis,
    filter: Filter,
    k: &ExpansionKernel,
) -> Vec<f64> {
    let r = k.radius as isize;
    let (len, stride) = match axis {
        Axis::X => (w, 1),
        Axis::Y => (h, w),
    };
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let pos = match axis {
                Axis::X => x,
                Axis::Y => y,
            } as isize;
            let base = y * w + x - pos as usize * stride;
            let at = |off: isize| {
                let q = (pos + off).clamp(0, len as isize - 1) as usize;
                plane[base + q * stride]
            };
            // Difference forms make the result independent of a constant
            // offset in `plane` whenever the subtraction is exact.
            let acc = match filter {
                Filter::Smooth => (-r..=r).map(|i| k.weight(i) * at(i)).sum(),
                Filter::Odd => (1..=r)
                    .map(|i| i as f64 * k.weight(i) * (at(i) - at(-i)))
                    .sum(),
                Filter::Even => {
                    let center = at(0);
                    (-r..=r)
                        .map(|i| ((i * i) as f64 - k.m2) * k.weight(i) * (at(i) - center))
                        .sum()
                }
            };
            out[y * w + x] = acc;
        }
    }
    out
}

/// Fits the per-pixel quadratic model with Gaussian applicability of side
/// `poly_n` and standard deviation `poly_sigma`.
///
/// Works in the basis `{1, x, y, xy, x²-m2, y²-m2}`, which is orthogonal
/// under a separable symmetric window, so each coefficient is a single
/// separable correlation.
pub fn poly_expand(frame: &Frame, poly_n: usize, poly_sigma: f64) -> PolyExpansion {
    let k = ExpansionKernel::new(poly_n, poly_sigma);
    let (w, h) = (frame.width(), frame.height());
    let f = frame.pixels();
    let var4 = k.m4 - k.m2 * k.m2;

    let hx_smooth = filter_1d(f, w, h, Axis::X, Filter::Smooth, &k);
    let hx_odd = filter_1d(f, w, h, Axis::X, Filter::Odd, &k);
    let hx_even = filter_1d(f, w, h, Axis::X, Filter::Even, &k);
    let vy_odd = filter_1d(f, w, h, Axis::Y, Filter::Odd, &k);
    let vy_even = filter_1d(f, w, h, Axis::Y, Filter::Even, &k);

    let c0 = filter_1d(&hx_smooth, w, h, Axis::Y, Filter::Smooth, &k);
    let mut b1 = filter_1d(&hx_odd, w, h, Axis::Y, Filter::Smooth, &k);
    let mut b2 = filter_1d(&vy_odd, w, h, Axis::X, Filter::Smooth, &k);
    let mut a11 = filter_1d(&hx_even, w, h, Axis::Y, Filter::Smooth, &k);
    let mut a22 = filter_1d(&vy_even, w, h, Axis::X, Filter::Smooth, &k);
    let mut a12 = filter_1d(&hx_odd, w, h, Axis::Y, Filter::Odd, &k);

    b1.iter_mut().chain(b2.iter_mut()).for_each(|x| *x /= k.m2);
    a11.iter_mut()
        .chain(a22.iter_mut())
        .for_each(|x| *x /= var4);
    // The xy coefficient is 2·a12.
    a12.iter_mut().for_each(|x| *x /= 2.0 * k.m2 * k.m2);
    let c = c0
        .iter()
        .zip(a11.iter().zip(&a22))
        .map(|(c0, (p, q))| c0 - k.m2 * (p + q))
        .collect();

    PolyExpansion {
        width: w,
        height: h,
        a11,
        a12,
        a22,
        b1,
        b2,
        c,
    }
}

/// Separable Gaussian blur with a normalized kernel of radius `ceil(3σ)`.
pub(crate) fn gaussian_blur(plane: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|x| *x /= total);
    let pass = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, wk) in kernel.iter().enumerate() {
                    let off = k as isize - radius;
                    let (sx, sy) = if horizontal {
                        ((x as isize + off).clamp(0, w as isize - 1) as usize, y)
                    } else {
                        (x, (y as isize + off).clamp(0, h as isize - 1) as usize)
                    };
                    acc += wk * src[sy * w + sx];
                }
                out[y * w + x] = acc;
            }
        }
        out
    };
    pass(&pass(plane, true), false)
}

/// Blur standard deviation applied before decimating by `scale`.
pub fn pyramid_sigma(scale: f64) -> f64 {
    0.6 * (1.0 / (scale * scale) - 1.0).sqrt()
}

fn level_dim(dim: usize, scale: f64) -> usize {
    ((dim as f64 * scale).round() as usize).max(8).min(dim)
}

/// Gaussian blur with `σ = 0.6·sqrt(1/scale² - 1)` followed by bilinear
/// resampling to `round(dim·scale)`, never below 8×8 (or the input size).
pub fn pyramid_downsample(frame: &Frame, scale: f64) -> Result<Frame> {
    if !(scale > 0.0 && scale < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "pyramid scale must be in (0,1), got {scale}"
        )));
    }
    let (w, h) = (frame.width(), frame.height());
    let blurred = gaussian_blur(frame.pixels(), w, h, pyramid_sigma(scale));
    let (ow, oh) = (level_dim(w, scale), level_dim(h, scale));
    Ok(Frame::from_raw(
        ow,
        oh,
        resample_plane(&blurred, w, h, ow, oh),
    ))
}

/// Polynomial expansions of one frame at every pyramid level, finest first.
///
/// Building this once per frame lets consecutive frame pairs share work.
#[derive(Debug, Clone)]
pub struct FlowPyramid {
    levels: Vec<PolyExpansion>,
}

impl FlowPyramid {
    pub fn build(frame: &Frame, params: &FarnebackParams) -> Result<Self> {
        params.validate()?;
        let mut levels = Vec::with_capacity(params.levels);
        let mut scale = 1.0;
        for k in 0..params.levels {
            let img = if k == 0 {
                frame.clone()
            } else {
                pyramid_downsample(frame, scale)?
            };
            levels.push(poly_expand(&img, params.poly_n, params.poly_sigma));
            scale *= params.pyr_scale;
        }
        Ok(FlowPyramid { levels })
    }
}

/// Averages each plane over a `size`×`size` window with edge replication.
fn box_average(plane: &[f64], w: usize, h: usize, size: usize) -> Vec<f64> {
    let r = (size / 2) as isize;
    let norm = 1.0 / (size * size) as f64;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for off in -r..=r {
                acc += row[(x as isize + off).clamp(0, w as isize - 1) as usize];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for off in -r..=r {
                let sy = (y as isize + off).clamp(0, h as isize - 1) as usize;
                acc += tmp[sy * w + x];
            }
            out[y * w + x] = acc * norm;
        }
    }
    out
}

/// Upsamples a coarse displacement plane and rescales its values by the
/// actual sampling ratio between the two grids.
fn upsample_flow(
    plane: &[f64],
    cw: usize,
    ch: usize,
    w: usize,
    h: usize,
    horizontal: bool,
) -> Vec<f64> {
    let (fine, coarse) = if horizontal { (w, cw) } else { (h, ch) };
    let ratio = if coarse > 1 {
        (fine - 1) as f64 / (coarse - 1) as f64
    } else {
        1.0
    };
    resample_plane(plane, cw, ch, w, h)
        .into_iter()
        .map(|x| x * ratio)
        .collect()
}

fn refine_level(
    e0: &PolyExpansion,
    e1: &PolyExpansion,
    u: &mut [f64],
    v: &mut [f64],
    params: &FarnebackParams,
) {
    let (w, h) = (e0.width, e0.height);
    let n = w * h;
    let mut g11 = vec![0.0; n];
    let mut g12 = vec![0.0; n];
    let mut g22 = vec![0.0; n];
    let mut h1 = vec![0.0; n];
    let mut h2 = vec![0.0; n];

    for _ in 0..params.iterations {
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let (dx, dy) = (u[i], v[i]);
                let (sx, sy) = (x as f64 + dx, y as f64 + dy);
                let s = |plane: &[f64]| sample_bilinear(plane, w, h, sx, sy);
                let a11 = 0.5 * (e0.a11[i] + s(&e1.a11));
                let a12 = 0.5 * (e0.a12[i] + s(&e1.a12));
                let a22 = 0.5 * (e0.a22[i] + s(&e1.a22));
                // Residual right-hand side relative to the current estimate.
                let db1 = -0.5 * (s(&e1.b1) - e0.b1[i]) + a11 * dx + a12 * dy;
                let db2 = -0.5 * (s(&e1.b2) - e0.b2[i]) + a12 * dx + a22 * dy;
                g11[i] = a11 * a11 + a12 * a12;
                g12[i] = a12 * (a11 + a22);
                g22[i] = a12 * a12 + a22 * a22;
                h1[i] = a11 * db1 + a12 * db2;
                h2[i] = a12 * db1 + a22 * db2;
            }
        }
        let g11s = box_average(&g11, w, h, params.winsize);
        let g12s = box_average(&g12, w, h, params.winsize);
        let g22s = box_average(&g22, w, h, params.winsize);
        let h1s = box_average(&h1, w, h, params.winsize);
        let h2s = box_average(&h2, w, h, params.winsize);
        for i in 0..n {
            let det = g11s[i] * g22s[i] - g12s[i] * g12s[i];
            let (du, dv) = if det < SINGULAR_DET {
                (0.0, 0.0)
            } else {
                (
                    (g22s[i] * h1s[i] - g12s[i] * h2s[i]) / det,
                    (g11s[i] * h2s[i] - g12s[i] * h1s[i]) / det,
                )
            };
            u[i] = if du.is_finite() { du } else { 0.0 };
            v[i] = if dv.is_finite() { dv } else { 0.0 };
        }
    }
}

/// Flow between two frames whose pyramids were built with `params`.
pub fn flow_between(
    prev: &FlowPyramid,
    next: &FlowPyramid,
    params: &FarnebackParams,
) -> Result<FlowField> {
    let (fw, fh) = (prev.levels[0].width, prev.levels[0].height);
    if (fw, fh) != (next.levels[0].width, next.levels[0].height)
        || prev.levels.len() != next.levels.len()
    {
        return Err(Error::DimensionMismatch(format!(
            "flow frames differ: {fw}x{fh} vs {}x{}",
            next.levels[0].width, next.levels[0].height
        )));
    }
    let mut flow: Option<(Vec<f64>, Vec<f64>, usize, usize)> = None;
    for (e0, e1) in prev.levels.iter().zip(&next.levels).rev() {
        let (w, h) = (e0.width, e0.height);
        let (mut u, mut v) = match flow.take() {
            None => (vec![0.0; w * h], vec![0.0; w * h]),
            Some((cu, cv, cw, ch)) => (
                upsample_flow(&cu, cw, ch, w, h, true),
                upsample_flow(&cv, cw, ch, w, h, false),
            ),
        };
        refine_level(e0, e1, &mut u, &mut v, params);
        flow = Some((u, v, w, h));
    }
    let (u, v, w, h) = flow.expect("at least one level");
    Ok(FlowField {
        width: w,
        height: h,
        u,
        v,
    })
}

/// Dense flow from `prev` to `next`.
pub fn farneback_flow(prev: &Frame, next: &Frame, params: &FarnebackParams) -> Result<FlowField> {
    if (prev.width(), prev.height()) != (next.width(), next.height()) {
        return Err(Error::DimensionMismatch(format!(
            "flow frames differ: {}x{} vs {}x{}",
            prev.width(),
            prev.height(),
            next.width(),
            next.height()
        )));
    }
    let p0 = FlowPyramid::build(prev, params)?;
    let p1 = FlowPyramid::build(next, params)?;
    flow_between(&p0, &p1, params)
}
