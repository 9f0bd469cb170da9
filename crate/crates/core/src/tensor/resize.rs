use super::Float;

/// Source taps for one output coordinate: `(lo, hi, w_lo, w_hi)`.
pub type Taps = (usize, usize, f64, f64);

/// Half-pixel (align-corners-false) sampling positions with edge clamping.
pub fn bilinear_sample_weights(input: usize, output: usize) -> Vec<Taps> {
    assert!(input >= 1 && output >= 1, "resize extents must be positive");
    if input == output {
        return (0..output).map(|i| (i, i, 1.0, 0.0)).collect();
    }
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            (lo, hi, 1.0 - frac, frac)
        })
        .collect()
}

/// Resizes an `[h, w, c]` row-major map to `[out_h, out_w, c]`.
pub fn bilinear_resize_slice<T: Float>(data: &[T], h: usize, w: usize, c: usize, out_h: usize, out_w: usize) -> Vec<T> {
    debug_assert_eq!(data.len(), h * w * c);
    if h == out_h && w == out_w {
        return data.to_vec();
    }
    let ys = bilinear_sample_weights(h, out_h);
    let xs = bilinear_sample_weights(w, out_w);
    let mut out = vec![T::zero(); out_h * out_w * c];
    for (oy, &(y0, y1, wy0, wy1)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, wx0, wx1)) in xs.iter().enumerate() {
            let dst = &mut out[(oy * out_w + ox) * c..][..c];
            for (y, wy) in [(y0, wy0), (y1, wy1)] {
                for (x, wx) in [(x0, wx0), (x1, wx1)] {
                    let wgt = T::from_f64(wy * wx);
                    if wgt == T::zero() {
                        continue;
                    }
                    let src = &data[(y * w + x) * c..][..c];
                    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += wgt * s);
                }
            }
        }
    }
    out
}

/// Adjoint of [`bilinear_resize_slice`]: scatters an output-space gradient
/// back onto the input grid.
pub(crate) fn bilinear_resize_adjoint<T: Float>(
    grad_out: &[T],
    h: usize,
    w: usize,
    c: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    if h == out_h && w == out_w {
        return grad_out.to_vec();
    }
    let ys = bilinear_sample_weights(h, out_h);
    let xs = bilinear_sample_weights(w, out_w);
    let mut grad_in = vec![T::zero(); h * w * c];
    for (oy, &(y0, y1, wy0, wy1)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, wx0, wx1)) in xs.iter().enumerate() {
            let src = &grad_out[(oy * out_w + ox) * c..][..c];
            for (y, wy) in [(y0, wy0), (y1, wy1)] {
                for (x, wx) in [(x0, wx0), (x1, wx1)] {
                    let wgt = T::from_f64(wy * wx);
                    if wgt == T::zero() {
                        continue;
                    }
                    let dst = &mut grad_in[(y * w + x) * c..][..c];
                    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += wgt * s);
                }
            }
        }
    }
    grad_in
}
