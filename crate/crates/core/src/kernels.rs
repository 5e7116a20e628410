// Raw numeric kernels shared by the forward ops and their adjoints.
// Everything here works on flat row-major slices; shape checks happen in the callers.

/// out[m×n] += a[m×k] · b[k×n]
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    // strides are (row, col) in elements
    dgemm(m, k, n, a, (k, 1), b, (n, 1), out);
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ
pub(crate) fn gemm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    dgemm(m, k, n, a, (k, 1), b, (1, k), out);
}

/// out[k×n] += a[m×k]ᵀ · g[m×n]
pub(crate) fn gemm_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    dgemm(k, m, n, a, (1, k), g, (n, 1), out);
}

#[allow(clippy::too_many_arguments)]
fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: (usize, usize),
    b: &[f64],
    sb: (usize, usize),
    out: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    // SAFETY: the asserts above bound every index the strided views can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a same-padded cubic-kernel 3D cross-correlation.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvGeom {
    fn vol(&self) -> usize {
        self.d * self.h * self.w
    }

    fn taps(&self) -> usize {
        self.k * self.k * self.k
    }

    /// Calls `f(tap, dz, dy, dx, z_range, y_range, x_range)` for every kernel tap, with the
    /// output ranges restricted to positions whose shifted input stays inside the volume.
    fn for_each_tap(
        &self,
        mut f: impl FnMut(usize, isize, isize, isize, (usize, usize), (usize, usize), (usize, usize)),
    ) {
        let r = (self.k / 2) as isize;
        let range = |off: isize, ext: usize| -> (usize, usize) {
            let lo = (-off).max(0) as usize;
            let hi = (ext as isize - off).min(ext as isize).max(0) as usize;
            (lo, hi.max(lo))
        };
        let mut tap = 0;
        for kz in 0..self.k {
            let dz = kz as isize - r;
            for ky in 0..self.k {
                let dy = ky as isize - r;
                for kx in 0..self.k {
                    let dx = kx as isize - r;
                    f(
                        tap,
                        dz,
                        dy,
                        dx,
                        range(dz, self.d),
                        range(dy, self.h),
                        range(dx, self.w),
                    );
                    tap += 1;
                }
            }
        }
    }
}

/// Unfolds one `[cin, vol]` volume into `[cin·taps, vol]` columns (zero outside the volume).
fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let (vol, taps) = (g.vol(), g.taps());
    let (hh, ww) = (g.h, g.w);
    cols.fill(0.0);
    for ci in 0..g.cin {
        let xb = &x[ci * vol..(ci + 1) * vol];
        g.for_each_tap(|tap, dz, dy, dx, zr, yr, xr| {
            let len = xr.1 - xr.0;
            if len == 0 {
                return;
            }
            let row = &mut cols[(ci * taps + tap) * vol..(ci * taps + tap + 1) * vol];
            for z in zr.0..zr.1 {
                let iz = (z as isize + dz) as usize;
                for y in yr.0..yr.1 {
                    let iy = (y as isize + dy) as usize;
                    let o0 = (z * hh + y) * ww + xr.0;
                    let i0 = (iz * hh + iy) * ww + (xr.0 as isize + dx) as usize;
                    row[o0..o0 + len].copy_from_slice(&xb[i0..i0 + len]);
                }
            }
        });
    }
}

/// Adjoint of [`im2col`]: scatters column adjoints back onto a `[cin, vol]` volume.
fn col2im_acc(g: &ConvGeom, cols: &[f64], gx: &mut [f64]) {
    let (vol, taps) = (g.vol(), g.taps());
    let (hh, ww) = (g.h, g.w);
    for ci in 0..g.cin {
        let gb = &mut gx[ci * vol..(ci + 1) * vol];
        g.for_each_tap(|tap, dz, dy, dx, zr, yr, xr| {
            let len = xr.1 - xr.0;
            if len == 0 {
                return;
            }
            let row = &cols[(ci * taps + tap) * vol..(ci * taps + tap + 1) * vol];
            for z in zr.0..zr.1 {
                let iz = (z as isize + dz) as usize;
                for y in yr.0..yr.1 {
                    let iy = (y as isize + dy) as usize;
                    let o0 = (z * hh + y) * ww + xr.0;
                    let i0 = (iz * hh + iy) * ww + (xr.0 as isize + dx) as usize;
                    for (dst, &v) in gb[i0..i0 + len].iter_mut().zip(&row[o0..o0 + len]) {
                        *dst += v;
                    }
                }
            }
        });
    }
}

pub(crate) fn conv3d_forward(g: &ConvGeom, x: &[f64], w: &[f64], bias: &[f64], out: &mut [f64]) {
    let (vol, taps) = (g.vol(), g.taps());
    let kdim = g.cin * taps;
    let mut cols = vec![0.0; kdim * vol];
    for b in 0..g.batch {
        im2col(g, &x[b * g.cin * vol..(b + 1) * g.cin * vol], &mut cols);
        let ob = &mut out[b * g.cout * vol..(b + 1) * g.cout * vol];
        for (co, row) in ob.chunks_mut(vol).enumerate() {
            row.fill(bias[co]);
        }
        gemm_acc(w, &cols, ob, g.cout, kdim, vol);
    }
}

/// Accumulates the adjoints of input, kernels and bias given the output adjoint `gout`.
pub(crate) fn conv3d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    let (vol, taps) = (g.vol(), g.taps());
    let kdim = g.cin * taps;
    if let Some(gb) = gb {
        for b in 0..g.batch {
            for co in 0..g.cout {
                let obase = (b * g.cout + co) * vol;
                gb[co] += gout[obase..obase + vol].iter().sum::<f64>();
            }
        }
    }
    if gx.is_none() && gw.is_none() {
        return;
    }
    let mut cols = vec![0.0; kdim * vol];
    for b in 0..g.batch {
        let go = &gout[b * g.cout * vol..(b + 1) * g.cout * vol];
        if let Some(gw) = gw.as_deref_mut() {
            im2col(g, &x[b * g.cin * vol..(b + 1) * g.cin * vol], &mut cols);
            gemm_nt_acc(go, &cols, gw, g.cout, vol, kdim);
        }
        if let Some(gx) = gx.as_deref_mut() {
            cols.fill(0.0);
            gemm_tn_acc(w, go, &mut cols, g.cout, kdim, vol);
            col2im_acc(g, &cols, &mut gx[b * g.cin * vol..(b + 1) * g.cin * vol]);
        }
    }
}

/// 2×2×2 average pooling over the trailing three axes of `[planes, d, h, w]`.
pub(crate) fn avg_pool2_forward(x: &[f64], planes: usize, d: usize, h: usize, w: usize) -> Vec<f64> {
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let mut out = vec![0.0; planes * od * oh * ow];
    for p in 0..planes {
        let ib = p * d * h * w;
        let ob = p * od * oh * ow;
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = 0.0;
                    for (a, b, c) in OCTANT {
                        s += x[ib + ((2 * z + a) * h + 2 * y + b) * w + 2 * xx + c];
                    }
                    out[ob + (z * oh + y) * ow + xx] = s * 0.125;
                }
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward(
    gout: &[f64],
    gx: &mut [f64],
    planes: usize,
    d: usize,
    h: usize,
    w: usize,
) {
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    for p in 0..planes {
        let ib = p * d * h * w;
        let ob = p * od * oh * ow;
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let gv = gout[ob + (z * oh + y) * ow + xx] * 0.125;
                    for (a, b, c) in OCTANT {
                        gx[ib + ((2 * z + a) * h + 2 * y + b) * w + 2 * xx + c] += gv;
                    }
                }
            }
        }
    }
}

const OCTANT: [(usize, usize, usize); 8] = [
    (0, 0, 0),
    (0, 0, 1),
    (0, 1, 0),
    (0, 1, 1),
    (1, 0, 0),
    (1, 0, 1),
    (1, 1, 0),
    (1, 1, 1),
];

/// Standard normal CDF through the exact error function.
pub(crate) fn norm_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
