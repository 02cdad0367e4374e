// Forward and backward kernels for the non-elementwise tape operations.

use super::{Result, Tensor, TensorError};

pub(crate) fn conv2d_out_extent(extent: usize, k: usize, padding: usize) -> Result<usize> {
    let out = extent as i64 + 2 * padding as i64 - k as i64 + 1;
    if out < 1 {
        return Err(TensorError::EmptyOutput(out));
    }
    Ok(out as usize)
}

/// Range of output columns `ox` for which `ox + kx - padding` lands inside `[0, w)`.
#[inline]
fn valid_range(out_w: usize, w: usize, kx: usize, padding: usize) -> (usize, usize) {
    let lo = padding.saturating_sub(kx);
    let hi = (w + padding).saturating_sub(kx).min(out_w);
    (lo, hi.max(lo))
}

pub(crate) fn conv2d_forward(input: &Tensor, kernel: &Tensor, bias: &Tensor, padding: usize) -> Result<Tensor> {
    let (ci, h, w) = dims3(input)?;
    let ks = kernel.shape();
    if ks.len() != 4 || ks[1] != ci || ks[2] != ks[3] {
        return Err(TensorError::ShapeMismatch { expected: vec![0, ci, 0, 0], got: ks.to_vec() });
    }
    let (co, k) = (ks[0], ks[2]);
    if k % 2 == 0 {
        return Err(TensorError::EvenKernel(k));
    }
    if bias.shape() != [co] {
        return Err(TensorError::ShapeMismatch { expected: vec![co], got: bias.shape().to_vec() });
    }
    let oh = conv2d_out_extent(h, k, padding)?;
    let ow = conv2d_out_extent(w, k, padding)?;
    let x = input.data();
    let kd = kernel.data();
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        plane.fill(bias.data()[o]);
        for c in 0..ci {
            let src = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                let (oy_lo, oy_hi) = valid_range(oh, h, ky, padding);
                for kx in 0..k {
                    let wv = kd[((o * ci + c) * k + ky) * k + kx];
                    let (ox_lo, ox_hi) = valid_range(ow, w, kx, padding);
                    for oy in oy_lo..oy_hi {
                        let iy = oy + ky - padding;
                        let dst = &mut plane[oy * ow + ox_lo..oy * ow + ox_hi];
                        let s = &src[iy * w + ox_lo + kx - padding..iy * w + ox_hi + kx - padding];
                        for (d, &v) in dst.iter_mut().zip(s) {
                            *d += wv * v;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![co, oh, ow], out)
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernel: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(input: &Tensor, kernel: &Tensor, padding: usize, grad_out: &[f64], want: [bool; 3]) -> ConvGrads {
    let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (co, k) = (kernel.shape()[0], kernel.shape()[2]);
    let oh = h + 2 * padding + 1 - k;
    let ow = w + 2 * padding + 1 - k;
    let x = input.data();
    let kd = kernel.data();
    let mut gin = want[0].then(|| vec![0.0; x.len()]);
    let mut gk = want[1].then(|| vec![0.0; kd.len()]);
    let gb = want[2].then(|| (0..co).map(|o| grad_out[o * oh * ow..(o + 1) * oh * ow].iter().sum()).collect());
    if gin.is_none() && gk.is_none() {
        return ConvGrads { input: gin, kernel: gk, bias: gb };
    }
    for o in 0..co {
        let g = &grad_out[o * oh * ow..(o + 1) * oh * ow];
        for c in 0..ci {
            let src = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                let (oy_lo, oy_hi) = valid_range(oh, h, ky, padding);
                for kx in 0..k {
                    let widx = ((o * ci + c) * k + ky) * k + kx;
                    let (ox_lo, ox_hi) = valid_range(ow, w, kx, padding);
                    let shift = kx as isize - padding as isize;
                    let mut acc = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = oy + ky - padding;
                        let grow = &g[oy * ow + ox_lo..oy * ow + ox_hi];
                        let base = (iy * w) as isize + ox_lo as isize + shift;
                        let range = base as usize..base as usize + (ox_hi - ox_lo);
                        if gk.is_some() {
                            acc += grow.iter().zip(&src[range.clone()]).map(|(a, b)| a * b).sum::<f64>();
                        }
                        if let Some(gi) = gin.as_mut() {
                            let wv = kd[widx];
                            let dst = &mut gi[c * h * w..(c + 1) * h * w][range];
                            for (d, &gv) in dst.iter_mut().zip(grow) {
                                *d += wv * gv;
                            }
                        }
                    }
                    if let Some(gkv) = gk.as_mut() {
                        gkv[widx] += acc;
                    }
                }
            }
        }
    }
    ConvGrads { input: gin, kernel: gk, bias: gb }
}

pub(crate) fn dims3(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(TensorError::Invalid(format!("expected a [c, h, w] tensor, got shape {s:?}"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Mean,
}

pub(crate) fn pool2d_forward(input: &Tensor, window: usize, mode: PoolMode) -> Result<Tensor> {
    let (c, h, w) = dims3(input)?;
    if window == 0 {
        return Err(TensorError::Invalid("pool window must be positive".into()));
    }
    for extent in [h, w] {
        if extent % window != 0 {
            return Err(TensorError::NotDivisible { extent, window });
        }
    }
    let (oh, ow) = (h / window, w / window);
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let norm = 1.0 / (window * window) as f64;
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = match mode {
                    PoolMode::Max => f64::NEG_INFINITY,
                    PoolMode::Mean => 0.0,
                };
                for dy in 0..window {
                    let row = (ch * h + oy * window + dy) * w + ox * window;
                    for &v in &x[row..row + window] {
                        match mode {
                            PoolMode::Max => acc = acc.max(v),
                            PoolMode::Mean => acc += v,
                        }
                    }
                }
                out.push(if mode == PoolMode::Mean { acc * norm } else { acc });
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

pub(crate) fn pool2d_backward(input: &Tensor, window: usize, mode: PoolMode, grad_out: &[f64]) -> Vec<f64> {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (oh, ow) = (h / window, w / window);
    let x = input.data();
    let mut g = vec![0.0; x.len()];
    let norm = 1.0 / (window * window) as f64;
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let go = grad_out[(ch * oh + oy) * ow + ox];
                match mode {
                    PoolMode::Mean => {
                        for dy in 0..window {
                            let row = (ch * h + oy * window + dy) * w + ox * window;
                            for v in &mut g[row..row + window] {
                                *v += go * norm;
                            }
                        }
                    }
                    PoolMode::Max => {
                        // first maximal element in row-major window order
                        let mut best = (f64::NEG_INFINITY, 0);
                        for dy in 0..window {
                            let row = (ch * h + oy * window + dy) * w + ox * window;
                            for i in row..row + window {
                                if x[i] > best.0 {
                                    best = (x[i], i);
                                }
                            }
                        }
                        g[best.1] += go;
                    }
                }
            }
        }
    }
    g
}

/// Source taps for one axis of an align-corners=false bilinear resize.
fn bilinear_taps(in_extent: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..in_extent * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_extent - 1);
            let i1 = (i0 + 1).min(in_extent - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(crate) fn upsample_forward(input: &Tensor, factor: usize) -> Result<Tensor> {
    let (c, h, w) = dims3(input)?;
    if factor == 0 {
        return Err(TensorError::Invalid("upsample factor must be positive".into()));
    }
    let (ty, tx) = (bilinear_taps(h, factor), bilinear_taps(w, factor));
    let (oh, ow) = (h * factor, w * factor);
    let x = input.data();
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let dst = &mut out[(ch * oh + oy) * ow..(ch * oh + oy + 1) * ow];
            for (d, &(x0, x1, lx)) in dst.iter_mut().zip(&tx) {
                let top = (1.0 - lx) * plane[y0 * w + x0] + lx * plane[y0 * w + x1];
                let bot = (1.0 - lx) * plane[y1 * w + x0] + lx * plane[y1 * w + x1];
                *d = (1.0 - ly) * top + ly * bot;
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

pub(crate) fn upsample_backward(input_shape: &[usize], factor: usize, grad_out: &[f64]) -> Vec<f64> {
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let (ty, tx) = (bilinear_taps(h, factor), bilinear_taps(w, factor));
    let (oh, ow) = (h * factor, w * factor);
    let mut g = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &mut g[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let src = &grad_out[(ch * oh + oy) * ow..(ch * oh + oy + 1) * ow];
            for (&go, &(x0, x1, lx)) in src.iter().zip(&tx) {
                plane[y0 * w + x0] += (1.0 - ly) * (1.0 - lx) * go;
                plane[y0 * w + x1] += (1.0 - ly) * lx * go;
                plane[y1 * w + x0] += ly * (1.0 - lx) * go;
                plane[y1 * w + x1] += ly * lx * go;
            }
        }
    }
    g
}

pub(crate) fn check_temperatures(temps: &[f64], k: usize) -> Result<()> {
    if temps.len() != k {
        return Err(TensorError::TemperatureCount { expected: k, got: temps.len() });
    }
    if let Some(&t) = temps.iter().find(|&&t| !(t > 0.0 && t.is_finite())) {
        return Err(TensorError::Temperature(t));
    }
    Ok(())
}

/// Softmax (or log-softmax) along `axis`, with optional per-class temperatures.
pub(crate) fn softmax_axis(x: &Tensor, axis: usize, temps: Option<&[f64]>, log: bool, out: &mut [f64]) -> Result<()> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(TensorError::Axis { axis, rank: shape.len() });
    }
    let k = shape[axis];
    if let Some(t) = temps {
        check_temperatures(t, k)?;
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let xd = x.data();
    let mut z = vec![0.0; k];
    for o in 0..outer {
        for i in 0..inner {
            let at = |c: usize| (o * k + c) * inner + i;
            let mut m = f64::NEG_INFINITY;
            for c in 0..k {
                z[c] = match temps {
                    Some(t) => xd[at(c)] / t[c],
                    None => xd[at(c)],
                };
                m = m.max(z[c]);
            }
            let s: f64 = z.iter().map(|&v| (v - m).exp()).sum();
            let ls = s.ln();
            for c in 0..k {
                out[at(c)] = if log { z[c] - m - ls } else { (z[c] - m).exp() / s };
            }
        }
    }
    Ok(())
}

/// Gradient of softmax/log-softmax along `axis` given its output `y`.
pub(crate) fn softmax_axis_backward(y: &Tensor, axis: usize, temps: Option<&[f64]>, log: bool, g: &[f64]) -> Vec<f64> {
    let shape = y.shape();
    let k = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let yd = y.data();
    let mut gx = vec![0.0; yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |c: usize| (o * k + c) * inner + i;
            if log {
                let gs: f64 = (0..k).map(|c| g[at(c)]).sum();
                for c in 0..k {
                    let p = yd[at(c)].exp();
                    let t = temps.map_or(1.0, |t| t[c]);
                    gx[at(c)] = (g[at(c)] - p * gs) / t;
                }
            } else {
                let dot: f64 = (0..k).map(|c| g[at(c)] * yd[at(c)]).sum();
                for c in 0..k {
                    let t = temps.map_or(1.0, |t| t[c]);
                    gx[at(c)] = yd[at(c)] * (g[at(c)] - dot) / t;
                }
            }
        }
    }
    gx
}

/// Half-open rectangle `[row0, row1) x [col0, col1)` of a feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub row0: usize,
    pub row1: usize,
    pub col0: usize,
    pub col1: usize,
}

impl Region {
    pub fn height(&self) -> usize {
        self.row1 - self.row0
    }
    pub fn width(&self) -> usize {
        self.col1 - self.col0
    }
}

/// Width- and height-pooled slices of each region of a `[c, h, w]` map.
///
/// Per region the output holds `c * height` width-means (channel-major, then
/// row) followed by `c * width` height-means (channel-major, then column).
/// Regions are emitted in the given order.
pub fn pool_regions(x: &Tensor, regions: &[Region]) -> Result<Vec<f64>> {
    let (c, h, w) = dims3(x)?;
    let xd = x.data();
    let mut out = Vec::with_capacity(regions.iter().map(|r| c * (r.height() + r.width())).sum());
    for r in regions {
        if r.row1 > h || r.col1 > w || r.row0 >= r.row1 || r.col0 >= r.col1 {
            return Err(TensorError::Invalid(format!("region {r:?} outside a {h}x{w} map")));
        }
        let (rh, rw) = (r.height() as f64, r.width() as f64);
        for ch in 0..c {
            for row in r.row0..r.row1 {
                let s = &xd[(ch * h + row) * w + r.col0..(ch * h + row) * w + r.col1];
                out.push(s.iter().sum::<f64>() / rw);
            }
        }
        for ch in 0..c {
            for col in r.col0..r.col1 {
                let s: f64 = (r.row0..r.row1).map(|row| xd[(ch * h + row) * w + col]).sum();
                out.push(s / rh);
            }
        }
    }
    Ok(out)
}

pub(crate) fn pool_regions_backward(shape: &[usize], regions: &[Region], g: &[f64]) -> Vec<f64> {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut gx = vec![0.0; c * h * w];
    let mut at = 0;
    for r in regions {
        let (rh, rw) = (r.height() as f64, r.width() as f64);
        for ch in 0..c {
            for row in r.row0..r.row1 {
                let v = g[at] / rw;
                at += 1;
                for d in &mut gx[(ch * h + row) * w + r.col0..(ch * h + row) * w + r.col1] {
                    *d += v;
                }
            }
        }
        for ch in 0..c {
            for col in r.col0..r.col1 {
                let v = g[at] / rh;
                at += 1;
                for row in r.row0..r.row1 {
                    gx[(ch * h + row) * w + col] += v;
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_hand_example() {
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let k = t(&[1, 1, 1, 1], &[2.0]);
        let b = t(&[1], &[1.0]);
        let y = conv2d_forward(&x, &k, &b, 0).unwrap();
        assert_eq!(y.data(), &[3.0, 5.0, 7.0, 9.0]);
    }

    #[test]
    fn conv_3x3_padding_matches_direct_sum() {
        let x = t(&[1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let k = t(&[1, 1, 3, 3], &[0., 1., 0., 1., 1., 1., 0., 1., 0.]);
        let y = conv2d_forward(&x, &k, &t(&[1], &[0.0]), 1).unwrap();
        // plus-shaped stencil
        assert_eq!(y.data(), &[7., 11., 11., 17., 25., 23., 19., 29., 23.]);
    }

    #[test]
    fn conv_errors() {
        let x = Tensor::zeros(&[1, 2, 2]);
        assert_eq!(conv2d_forward(&x, &Tensor::zeros(&[1, 1, 2, 2]), &Tensor::zeros(&[1]), 0), Err(TensorError::EvenKernel(2)));
        assert!(matches!(conv2d_forward(&x, &Tensor::zeros(&[1, 1, 5, 5]), &Tensor::zeros(&[1]), 0), Err(TensorError::EmptyOutput(_))));
    }

    #[test]
    fn pool_examples() {
        let x = t(&[1, 2, 2], &[1., 2., 3., 4.]);
        assert_eq!(pool2d_forward(&x, 2, PoolMode::Mean).unwrap().data(), &[2.5]);
        assert_eq!(pool2d_forward(&x, 2, PoolMode::Max).unwrap().data(), &[4.0]);
        let c = Tensor::full(&[2, 4, 4], 0.7);
        for mode in [PoolMode::Max, PoolMode::Mean] {
            assert!(pool2d_forward(&c, 2, mode).unwrap().data().iter().all(|&v| v == 0.7));
        }
        assert!(matches!(
            pool2d_forward(&Tensor::zeros(&[1, 3, 4]), 2, PoolMode::Max),
            Err(TensorError::NotDivisible { extent: 3, window: 2 })
        ));
    }

    #[test]
    fn upsample_constant_and_corners() {
        let c = Tensor::full(&[1, 2, 2], 3.0);
        assert!(upsample_forward(&c, 4).unwrap().data().iter().all(|&v| v == 3.0));
        let x = t(&[1, 1, 2], &[0.0, 1.0]);
        let y = upsample_forward(&x, 2).unwrap();
        assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0, 0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn pool_regions_hand_example() {
        let x = t(&[1, 2, 2], &[1., 2., 3., 4.]);
        let r = Region { row0: 0, row1: 2, col0: 0, col1: 2 };
        assert_eq!(pool_regions(&x, &[r]).unwrap(), vec![1.5, 3.5, 2.0, 3.0]);
    }
}
