//! Grouped, dilated, strided 2-D cross-correlation kernels.

use crate::error::{Error, Result};

use super::{Scalar, Tensor};

/// Static shape information of one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Validates shapes; weights are (c_out, c_in / groups, k, k).
    pub fn new(input: [usize; 4], weight: [usize; 4], stride: usize, dilation: usize, groups: usize, padding: usize) -> Result<Self> {
        let [batch, c_in, in_h, in_w] = input;
        let [c_out, cpg, kh, kw] = weight;
        if kh != kw || kh == 0 {
            return Err(Error::Shape(format!("kernel must be square and nonempty, got {kh}x{kw}")));
        }
        if stride == 0 || dilation == 0 || groups == 0 {
            return Err(Error::Shape("stride, dilation and groups must be positive".into()));
        }
        if c_in % groups != 0 || c_out % groups != 0 {
            return Err(Error::Shape(format!(
                "channels {c_in} -> {c_out} not divisible by {groups} groups"
            )));
        }
        if cpg != c_in / groups {
            return Err(Error::Shape(format!(
                "weight expects {cpg} input channels per group, input provides {}",
                c_in / groups
            )));
        }
        let span = dilation * (kh - 1) + 1;
        if in_h + 2 * padding < span || in_w + 2 * padding < span {
            return Err(Error::Shape(format!(
                "input {in_h}x{in_w} smaller than dilated kernel span {span}"
            )));
        }
        let out_h = (in_h + 2 * padding - span) / stride + 1;
        let out_w = (in_w + 2 * padding - span) / stride + 1;
        Ok(ConvGeom {
            batch,
            c_in,
            in_h,
            in_w,
            c_out,
            kernel: kh,
            stride,
            dilation,
            groups,
            padding,
            out_h,
            out_w,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.c_out, self.out_h, self.out_w]
    }

    /// Output positions `o` with `0 <= o * stride + offset - padding < len`.
    fn valid_range(&self, offset: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let shift = offset as isize - self.padding as isize;
        let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
        let hi_excl = (len as isize - shift + s - 1) / s;
        let lo = lo.clamp(0, out_len as isize) as usize;
        let hi = hi_excl.clamp(0, out_len as isize) as usize;
        (lo, hi.max(lo))
    }

    /// Calls `f(b, co, ci, tap, out_row, in_row, (ox_lo, ox_hi), ix_of_lo)`
    /// for every contributing output row segment.
    #[inline]
    fn for_each_segment(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize, usize, usize, usize)) {
        let cin_g = self.c_in / self.groups;
        let cout_g = self.c_out / self.groups;
        let k = self.kernel;
        for b in 0..self.batch {
            for co in 0..self.c_out {
                let g = co / cout_g;
                for ci_l in 0..cin_g {
                    let ci = g * cin_g + ci_l;
                    for ky in 0..k {
                        let (oy_lo, oy_hi) = self.valid_range(ky * self.dilation, self.in_h, self.out_h);
                        for kx in 0..k {
                            let (ox_lo, ox_hi) = self.valid_range(kx * self.dilation, self.in_w, self.out_w);
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            let tap = (co * cin_g + ci_l) * k * k + ky * k + kx;
                            let ix_lo = ox_lo * self.stride + kx * self.dilation - self.padding;
                            for oy in oy_lo..oy_hi {
                                let iy = oy * self.stride + ky * self.dilation - self.padding;
                                f(b, co, ci, tap, oy, iy, ox_lo, ox_hi, ix_lo);
                            }
                        }
                    }
                }
            }
        }
    }

    fn out_index(&self, b: usize, co: usize, oy: usize) -> usize {
        ((b * self.c_out + co) * self.out_h + oy) * self.out_w
    }

    fn in_index(&self, b: usize, ci: usize, iy: usize) -> usize {
        ((b * self.c_in + ci) * self.in_h + iy) * self.in_w
    }
}

/// Which kernel family handles a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    /// 1x1, stride 1, unpadded: a matrix product per group.
    Pointwise,
    /// One input and one output channel per group.
    Depthwise,
    General,
}

impl ConvGeom {
    fn kind(&self) -> Kind {
        if self.kernel == 1 && self.stride == 1 && self.padding == 0 {
            Kind::Pointwise
        } else if self.groups == self.c_in && self.groups == self.c_out {
            Kind::Depthwise
        } else {
            Kind::General
        }
    }
}

pub(crate) fn forward<T: Scalar>(geom: &ConvGeom, x: &[T], w: &[T]) -> Vec<T> {
    match geom.kind() {
        Kind::Pointwise => pointwise_forward(geom, x, w),
        Kind::Depthwise => depthwise_forward(geom, x, w),
        Kind::General => direct_forward(geom, x, w),
    }
}

/// Accumulates input and weight gradients.
pub(crate) fn backward<T: Scalar>(geom: &ConvGeom, x: &[T], w: &[T], gout: &[T], gx: Option<&mut [T]>, gw: Option<&mut [T]>) {
    match geom.kind() {
        Kind::Pointwise => pointwise_backward(geom, x, w, gout, gx, gw),
        Kind::Depthwise => depthwise_backward(geom, x, w, gout, gx, gw),
        Kind::General => direct_backward(geom, x, w, gout, gx, gw),
    }
}

fn direct_forward<T: Scalar>(geom: &ConvGeom, x: &[T], w: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); geom.out_shape().iter().product()];
    let s = geom.stride;
    geom.for_each_segment(|b, co, ci, tap, oy, iy, lo, hi, ix_lo| {
        let wv = w[tap];
        let o = geom.out_index(b, co, oy);
        let i = geom.in_index(b, ci, iy) + ix_lo;
        let orow = &mut out[o + lo..o + hi];
        if s == 1 {
            for (ov, &iv) in orow.iter_mut().zip(&x[i..i + (hi - lo)]) {
                *ov += wv * iv;
            }
        } else {
            for (n, ov) in orow.iter_mut().enumerate() {
                *ov += wv * x[i + n * s];
            }
        }
    });
    out
}

fn direct_backward<T: Scalar>(geom: &ConvGeom, x: &[T], w: &[T], gout: &[T], mut gx: Option<&mut [T]>, mut gw: Option<&mut [T]>) {
    let s = geom.stride;
    geom.for_each_segment(|b, co, ci, tap, oy, iy, lo, hi, ix_lo| {
        let o = geom.out_index(b, co, oy);
        let i = geom.in_index(b, ci, iy) + ix_lo;
        let grow = &gout[o + lo..o + hi];
        if let Some(gx) = gx.as_deref_mut() {
            let wv = w[tap];
            if s == 1 {
                for (gv, &go) in gx[i..i + (hi - lo)].iter_mut().zip(grow) {
                    *gv += wv * go;
                }
            } else {
                for (n, &go) in grow.iter().enumerate() {
                    gx[i + n * s] += wv * go;
                }
            }
        }
        if let Some(gw) = gw.as_deref_mut() {
            let mut acc = T::zero();
            if s == 1 {
                acc = dot(grow, &x[i..i + (hi - lo)]);
            } else {
                for (n, &go) in grow.iter().enumerate() {
                    acc += go * x[i + n * s];
                }
            }
            gw[tap] += acc;
        }
    });
}

/// Row-major strided matrix view.
#[derive(Clone, Copy)]
struct Mat<'a, T> {
    data: &'a [T],
    stride: usize,
}

/// `c += a * b` for an `m x k` by `k x n` product. Every output element is
/// summed over `k` in order into a fresh accumulator before being added to
/// `c`, so the result does not depend on the blocking.
fn gemm_acc<T: Scalar>(m: usize, n: usize, k: usize, a: Mat<T>, b: Mat<T>, c: &mut [T], ldc: usize) {
    const MR: usize = 4;
    const NR: usize = 8;
    let mut packed = vec![[T::zero(); MR]; k];
    for i in (0..m).step_by(MR) {
        let mr = MR.min(m - i);
        if mr == MR {
            for (p, col) in packed.iter_mut().enumerate() {
                for (r, v) in col.iter_mut().enumerate() {
                    *v = a.data[(i + r) * a.stride + p];
                }
            }
        }
        for j in (0..n).step_by(NR) {
            let nr = NR.min(n - j);
            if mr == MR && nr == NR {
                let mut acc = [[T::zero(); NR]; MR];
                for (p, col) in packed.iter().enumerate() {
                    let row: &[T; NR] = b.data[p * b.stride + j..][..NR].try_into().expect("NR columns");
                    for (acc_r, &av) in acc.iter_mut().zip(col) {
                        for (t, &bv) in acc_r.iter_mut().zip(row) {
                            *t += av * bv;
                        }
                    }
                }
                for (r, acc_r) in acc.iter().enumerate() {
                    for (cv, &v) in c[(i + r) * ldc + j..][..NR].iter_mut().zip(acc_r) {
                        *cv += v;
                    }
                }
            } else {
                for r in i..i + mr {
                    for l in j..j + nr {
                        let mut acc = T::zero();
                        for p in 0..k {
                            acc += a.data[r * a.stride + p] * b.data[p * b.stride + l];
                        }
                        c[r * ldc + l] += acc;
                    }
                }
            }
        }
    }
}

/// Transposes a `rows x cols` block starting at `src[0]` with row stride `ld`.
fn transpose<T: Scalar>(src: &[T], rows: usize, cols: usize, ld: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for (c, &v) in src[r * ld..r * ld + cols].iter().enumerate() {
            out[c * rows + r] = v;
        }
    }
    out
}

fn pointwise_forward<T: Scalar>(geom: &ConvGeom, x: &[T], w: &[T]) -> Vec<T> {
    let plane = geom.out_h * geom.out_w;
    let (cin_g, cout_g) = (geom.c_in / geom.groups, geom.c_out / geom.groups);
    let mut out = vec![T::zero(); geom.batch * geom.c_out * plane];
    for b in 0..geom.batch {
        for g in 0..geom.groups {
            let wg = Mat { data: &w[g * cout_g * cin_g..], stride: cin_g };
            let xg = Mat { data: &x[(b * geom.c_in + g * cin_g) * plane..], stride: plane };
            let og = &mut out[(b * geom.c_out + g * cout_g) * plane..];
            gemm_acc(cout_g, plane, cin_g, wg, xg, og, plane);
        }
    }
    out
}

fn pointwise_backward<T: Scalar>(geom: &ConvGeom, x: &[T], w: &[T], gout: &[T], gx: Option<&mut [T]>, gw: Option<&mut [T]>) {
    let plane = geom.out_h * geom.out_w;
    let (cin_g, cout_g) = (geom.c_in / geom.groups, geom.c_out / geom.groups);
    if let Some(gx) = gx {
        for g in 0..geom.groups {
            let wt = transpose(&w[g * cout_g * cin_g..], cout_g, cin_g, cin_g);
            for b in 0..geom.batch {
                let go = Mat { data: &gout[(b * geom.c_out + g * cout_g) * plane..], stride: plane };
                let gxg = &mut gx[(b * geom.c_in + g * cin_g) * plane..];
                gemm_acc(cin_g, plane, cout_g, Mat { data: &wt, stride: cout_g }, go, gxg, plane);
            }
        }
    }
    if let Some(gw) = gw {
        for b in 0..geom.batch {
            for g in 0..geom.groups {
                let xt = transpose(&x[(b * geom.c_in + g * cin_g) * plane..], cin_g, plane, plane);
                let go = Mat { data: &gout[(b * geom.c_out + g * cout_g) * plane..], stride: plane };
                let gwg = &mut gw[g * cout_g * cin_g..];
                gemm_acc(cout_g, cin_g, plane, go, Mat { data: &xt, stride: cin_g }, gwg, cin_g);
            }
        }
    }
}

/// Depthwise planes laid out for whole-plane vector operations.
///
/// The zero-padded input is split into `stride x stride` phase planes of
/// width `pw` so that every tap reads a contiguous run of `out_h * pw`
/// elements. Columns `out_w..pw` of the wide output grid are junk on the
/// forward pass and must hold zeros in a wide gradient.
struct Phases {
    s: usize,
    /// Phase plane width and height, the latter with one row of slack.
    pw: usize,
    ph: usize,
    /// Tap offsets into `data` and run length.
    offsets: Vec<usize>,
    run: usize,
}

impl Phases {
    fn new(geom: &ConvGeom) -> Self {
        let s = geom.stride;
        let pw = (geom.in_w + 2 * geom.padding).div_ceil(s);
        let ph = (geom.in_h + 2 * geom.padding).div_ceil(s) + 1;
        let k = geom.kernel;
        let offsets = (0..k * k)
            .map(|tap| {
                let (dy, dx) = ((tap / k) * geom.dilation, (tap % k) * geom.dilation);
                let phase = (dy % s) * s + dx % s;
                phase * ph * pw + (dy / s) * pw + dx / s
            })
            .collect();
        Phases {
            s,
            pw,
            ph,
            offsets,
            run: geom.out_h * pw,
        }
    }

    fn len(&self) -> usize {
        self.s * self.s * self.ph * self.pw
    }

    /// Index in the phase buffer of padded coordinate `(y, x)`.
    fn index(&self, y: usize, x: usize) -> usize {
        ((y % self.s) * self.s + x % self.s) * self.ph * self.pw + (y / self.s) * self.pw + x / self.s
    }

    /// Calls `f(dst_start, src_row, x0)` for each run of input columns
    /// `x0, x0 + s, ...` of padded row `y + padding` that lands contiguously
    /// in one phase plane.
    fn runs(&self, geom: &ConvGeom, mut f: impl FnMut(usize, usize, usize)) {
        let p = geom.padding;
        for y in 0..geom.in_h {
            for x0 in 0..self.s.min(geom.in_w) {
                f(self.index(y + p, x0 + p), y * geom.in_w, x0);
            }
        }
    }

    /// Fills `dst` (zeroed padding included) from one input plane.
    fn scatter<T: Scalar>(&self, geom: &ConvGeom, src: &[T], dst: &mut [T]) {
        dst.fill(T::zero());
        let (s, w) = (self.s, geom.in_w);
        self.runs(geom, |start, row, x0| {
            for (t, &v) in dst[start..].iter_mut().zip(src[row + x0..row + w].iter().step_by(s)) {
                *t = v;
            }
        });
    }

    /// Adds the interior of a phase buffer into one input-gradient plane.
    fn gather_add<T: Scalar>(&self, geom: &ConvGeom, src: &[T], dst: &mut [T]) {
        let (s, w) = (self.s, geom.in_w);
        self.runs(geom, |start, row, x0| {
            for (t, &v) in dst[row + x0..row + w].iter_mut().step_by(s).zip(&src[start..]) {
                *t += v;
            }
        });
    }
}

fn depthwise_forward<T: Scalar>(geom: &ConvGeom, x: &[T], w: &[T]) -> Vec<T> {
    let k2 = geom.kernel * geom.kernel;
    let (oh, ow) = (geom.out_h, geom.out_w);
    let in_plane = geom.in_h * geom.in_w;
    let ph = Phases::new(geom);
    let mut buf = vec![T::zero(); ph.len()];
    let mut wide = vec![T::zero(); ph.run];
    let mut out = vec![T::zero(); geom.batch * geom.c_out * oh * ow];
    for (bc, oplane) in out.chunks_exact_mut(oh * ow).enumerate() {
        let c = bc % geom.c_out;
        ph.scatter(geom, &x[bc * in_plane..][..in_plane], &mut buf);
        wide.fill(T::zero());
        for (&wv, &off) in w[c * k2..][..k2].iter().zip(&ph.offsets) {
            for (o, &v) in wide.iter_mut().zip(&buf[off..off + ph.run]) {
                *o += wv * v;
            }
        }
        for (orow, wrow) in oplane.chunks_exact_mut(ow).zip(wide.chunks_exact(ph.pw)) {
            orow.copy_from_slice(&wrow[..ow]);
        }
    }
    out
}

fn depthwise_backward<T: Scalar>(geom: &ConvGeom, x: &[T], w: &[T], gout: &[T], mut gx: Option<&mut [T]>, mut gw: Option<&mut [T]>) {
    let k2 = geom.kernel * geom.kernel;
    let (oh, ow) = (geom.out_h, geom.out_w);
    let in_plane = geom.in_h * geom.in_w;
    let ph = Phases::new(geom);
    let mut buf = vec![T::zero(); ph.len()];
    let mut gbuf = vec![T::zero(); ph.len()];
    let mut wide = vec![T::zero(); ph.run];
    for (bc, gplane) in gout.chunks_exact(oh * ow).enumerate() {
        let c = bc % geom.c_out;
        for (wrow, grow) in wide.chunks_exact_mut(ph.pw).zip(gplane.chunks_exact(ow)) {
            wrow[..ow].copy_from_slice(grow);
        }
        if let Some(gx) = gx.as_deref_mut() {
            gbuf.fill(T::zero());
            for (&wv, &off) in w[c * k2..][..k2].iter().zip(&ph.offsets) {
                for (t, &g) in gbuf[off..off + ph.run].iter_mut().zip(&wide) {
                    *t += wv * g;
                }
            }
            ph.gather_add(geom, &gbuf, &mut gx[bc * in_plane..][..in_plane]);
        }
        if let Some(gw) = gw.as_deref_mut() {
            ph.scatter(geom, &x[bc * in_plane..][..in_plane], &mut buf);
            for (gv, &off) in gw[c * k2..][..k2].iter_mut().zip(&ph.offsets) {
                *gv += dot(&wide, &buf[off..off + ph.run]);
            }
        }
    }
}

/// Dot product with eight independent accumulators combined in a fixed
/// order, so the result does not depend on anything but the inputs.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += xa[l] * xb[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7])) + tail
}

/// Direct seven-loop convolution, used as a test oracle.
pub fn conv2d_reference<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, dilation: usize, groups: usize, padding: usize) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, dilation, groups, padding)?;
    let cin_g = g.c_in / groups;
    let cout_g = g.c_out / groups;
    Ok(Tensor::from_fn(g.out_shape(), |[b, co, oy, ox]| {
        let grp = co / cout_g;
        let mut acc = T::zero();
        for ci_l in 0..cin_g {
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                    let ix = (ox * stride + kx * dilation) as isize - padding as isize;
                    if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                        continue;
                    }
                    acc += w.at([co, ci_l, ky, kx]) * x.at([b, grp * cin_g + ci_l, iy as usize, ix as usize]);
                }
            }
        }
        acc
    }))
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::gumbel::derive_rng;

    fn random(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn specialized_kernels_agree_with_direct_loops() {
        let mut rng = derive_rng(11, 0, 0);
        // (c_in, c_out, kernel, stride, dilation, groups)
        let configs = [
            (5, 7, 1, 1, 1, 1),
            (6, 10, 1, 1, 1, 2),
            (16, 9, 1, 1, 1, 1),
            (6, 6, 3, 1, 1, 6),
            (6, 6, 3, 2, 1, 6),
            (4, 4, 3, 1, 2, 4),
            (4, 4, 5, 2, 1, 4),
            (3, 3, 5, 1, 1, 3),
        ];
        for &(ci, co, k, s, d, g) in &configs {
            let (h, w) = (rng.gen_range(5..=11), rng.gen_range(5..=11));
            let pad = d * (k - 1) / 2;
            let geom = ConvGeom::new([2, ci, h, w], [co, ci / g, k, k], s, d, g, pad).unwrap();
            assert_ne!(geom.kind(), Kind::General);
            let x = random(&mut rng, 2 * ci * h * w);
            let wt = random(&mut rng, co * (ci / g) * k * k);
            let gout = random(&mut rng, geom.out_shape().iter().product());
            let fast = forward(&geom, &x, &wt);
            let slow = direct_forward(&geom, &x, &wt);
            assert!(max_diff(&fast, &slow) < 1e-12, "forward {ci}->{co} k{k} s{s} d{d} g{g}");

            let (mut gx_f, mut gw_f) = (vec![0.5; x.len()], vec![0.25; wt.len()]);
            let (mut gx_s, mut gw_s) = (gx_f.clone(), gw_f.clone());
            backward(&geom, &x, &wt, &gout, Some(&mut gx_f), Some(&mut gw_f));
            direct_backward(&geom, &x, &wt, &gout, Some(&mut gx_s), Some(&mut gw_s));
            assert!(max_diff(&gx_f, &gx_s) < 1e-12, "gx {ci}->{co} k{k} s{s} d{d} g{g}");
            assert!(max_diff(&gw_f, &gw_s) < 1e-12, "gw {ci}->{co} k{k} s{s} d{d} g{g}");
        }
    }

    #[test]
    fn gemm_handles_ragged_edges() {
        let mut rng = derive_rng(12, 0, 0);
        let (m, n, k) = (6, 11, 5);
        let a = random(&mut rng, m * k);
        let b = random(&mut rng, k * n);
        let mut c = vec![1.0; m * n];
        gemm_acc(m, n, k, Mat { data: &a, stride: k }, Mat { data: &b, stride: n }, &mut c, n);
        for i in 0..m {
            for j in 0..n {
                let expect = 1.0 + (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum::<f64>();
                assert!((c[i * n + j] - expect).abs() < 1e-12);
            }
        }
    }
}
