//! Strided 3D convolution (kernel 1 or 3 per axis, "same" padding) and the matching
//! kernel-equals-stride transposed convolution used for upsampling.

use super::linalg::{matmul, Layout};
use super::{Act, ParamRange};

/// Floats of im2col scratch per chunk; keeps the column buffer cache-resident.
const CHUNK_FLOATS: usize = 1 << 18;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    /// `[K × cout]`, row `((dz·ky + dy)·kx + dx)·cin + ci`.
    pub weight: ParamRange,
    pub bias: Option<ParamRange>,
}

impl Conv3d {
    pub fn k_len(&self) -> usize {
        self.kernel.iter().product::<usize>() * self.cin
    }

    pub fn out_shape(&self, in_shape: [usize; 3]) -> [usize; 3] {
        std::array::from_fn(|a| {
            let pad = self.kernel[a] / 2;
            (in_shape[a] + 2 * pad - self.kernel[a]) / self.stride[a] + 1
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1]
    }

    fn chunk_rows(&self) -> usize {
        (CHUNK_FLOATS / self.k_len()).max(64)
    }

    fn im2col(&self, x: &Act, out_shape: [usize; 3], row0: usize, rows: usize, col: &mut [f32]) {
        let k_len = self.k_len();
        let cin = self.cin;
        let [kx, ky, kz] = self.kernel;
        let [sx, sy, sz] = self.stride;
        let [nx, ny, nz] = x.shape;
        let (px, py, pz) = ((kx / 2) as isize, (ky / 2) as isize, (kz / 2) as isize);
        let (onx, ony) = (out_shape[0], out_shape[1]);
        for r in 0..rows {
            let o = row0 + r;
            let ox = o % onx;
            let oy = (o / onx) % ony;
            let oz = o / (onx * ony);
            let dst = &mut col[r * k_len..(r + 1) * k_len];
            let x0 = (ox * sx) as isize - px;
            let x_interior = x0 >= 0 && x0 + kx as isize <= nx as isize;
            let mut p = 0;
            for dz in 0..kz {
                let iz = (oz * sz) as isize + dz as isize - pz;
                for dy in 0..ky {
                    let iy = (oy * sy) as isize + dy as isize - py;
                    let row_len = kx * cin;
                    if iz < 0 || iz >= nz as isize || iy < 0 || iy >= ny as isize {
                        dst[p..p + row_len].fill(0.0);
                        p += row_len;
                        continue;
                    }
                    let base = (iy as usize + ny * iz as usize) * nx;
                    if x_interior {
                        let s = (base + x0 as usize) * cin;
                        dst[p..p + row_len].copy_from_slice(&x.data[s..s + row_len]);
                        p += row_len;
                    } else {
                        for dx in 0..kx {
                            let ix = x0 + dx as isize;
                            if ix < 0 || ix >= nx as isize {
                                dst[p..p + cin].fill(0.0);
                            } else {
                                let s = (base + ix as usize) * cin;
                                dst[p..p + cin].copy_from_slice(&x.data[s..s + cin]);
                            }
                            p += cin;
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, dx: &mut Act, out_shape: [usize; 3], row0: usize, rows: usize, col: &[f32]) {
        let k_len = self.k_len();
        let cin = self.cin;
        let [kx, ky, kz] = self.kernel;
        let [sx, sy, sz] = self.stride;
        let [nx, ny, nz] = dx.shape;
        let (px, py, pz) = ((kx / 2) as isize, (ky / 2) as isize, (kz / 2) as isize);
        let (onx, ony) = (out_shape[0], out_shape[1]);
        for r in 0..rows {
            let o = row0 + r;
            let ox = o % onx;
            let oy = (o / onx) % ony;
            let oz = o / (onx * ony);
            let src = &col[r * k_len..(r + 1) * k_len];
            let mut p = 0;
            for dz in 0..kz {
                let iz = (oz * sz) as isize + dz as isize - pz;
                for dy in 0..ky {
                    let iy = (oy * sy) as isize + dy as isize - py;
                    if iz < 0 || iz >= nz as isize || iy < 0 || iy >= ny as isize {
                        p += kx * cin;
                        continue;
                    }
                    let base = (iy as usize + ny * iz as usize) * nx;
                    for ddx in 0..kx {
                        let ix = (ox * sx) as isize + ddx as isize - px;
                        if ix >= 0 && ix < nx as isize {
                            let d = (base + ix as usize) * cin;
                            for (t, s) in dx.data[d..d + cin].iter_mut().zip(&src[p..p + cin]) {
                                *t += s;
                            }
                        }
                        p += cin;
                    }
                }
            }
        }
    }

    /// Same geometry with input and output channels swapped; used for unstrided dx.
    fn flipped(&self) -> Conv3d {
        Conv3d {
            cin: self.cout,
            cout: self.cin,
            kernel: self.kernel,
            stride: [1; 3],
            weight: ParamRange { offset: 0, len: self.weight.len },
            bias: None,
        }
    }

    /// `W'[d'][co][ci] = W[2p − d'][ci][co]` laid out as `[27·cout × cin]`.
    fn flipped_weight(&self, w: &[f32]) -> Vec<f32> {
        let [kx, ky, kz] = self.kernel;
        let (cin, cout) = (self.cin, self.cout);
        let mut out = vec![0.0f32; w.len()];
        for dz in 0..kz {
            for dy in 0..ky {
                for dx in 0..kx {
                    let src_k = (dz * ky + dy) * kx + dx;
                    let dst_k = ((kz - 1 - dz) * ky + (ky - 1 - dy)) * kx + (kx - 1 - dx);
                    for ci in 0..cin {
                        for co in 0..cout {
                            out[(dst_k * cout + co) * cin + ci] = w[(src_k * cin + ci) * cout + co];
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, params: &[f32], x: &Act) -> Act {
        let mut out = self.forward_with_weight(self.weight.of(params), x);
        if let Some(b) = self.bias {
            let b = b.of(params);
            for v in out.data.chunks_exact_mut(self.cout) {
                for (o, bb) in v.iter_mut().zip(b) {
                    *o += bb;
                }
            }
        }
        out
    }

    fn forward_with_weight(&self, w: &[f32], x: &Act) -> Act {
        debug_assert_eq!(x.channels, self.cin);
        let out_shape = self.out_shape(x.shape);
        let mut out = Act::zeros(out_shape, self.cout);
        let n_out = out.voxels();
        let cout = self.cout;
        if self.is_pointwise() {
            matmul(
                n_out,
                cout,
                self.cin,
                &mut out.data,
                Layout::row_major(cout),
                false,
                &x.data,
                Layout::row_major(self.cin),
                w,
                Layout::row_major(cout),
            );
        } else {
            let k_len = self.k_len();
            let chunk = self.chunk_rows();
            let mut col = vec![0.0f32; chunk.min(n_out) * k_len];
            let mut row0 = 0;
            while row0 < n_out {
                let rows = chunk.min(n_out - row0);
                self.im2col(x, out_shape, row0, rows, &mut col);
                matmul(
                    rows,
                    cout,
                    k_len,
                    &mut out.data[row0 * cout..(row0 + rows) * cout],
                    Layout::row_major(cout),
                    false,
                    &col,
                    Layout::row_major(k_len),
                    w,
                    Layout::row_major(cout),
                );
                row0 += rows;
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grads`; returns the input gradient when asked.
    pub fn backward(&self, params: &[f32], x: &Act, dout: &Act, grads: &mut [f32], need_dx: bool) -> Option<Act> {
        let out_shape = dout.shape;
        let n_out = dout.voxels();
        let cout = self.cout;
        let k_len = self.k_len();
        if let Some(b) = self.bias {
            let gb = b.of_mut(grads);
            let mut acc = vec![0.0f64; cout];
            for v in dout.data.chunks_exact(cout) {
                for (a, d) in acc.iter_mut().zip(v) {
                    *a += *d as f64;
                }
            }
            for (g, a) in gb.iter_mut().zip(acc) {
                *g += a as f32;
            }
        }
        let w = self.weight.of(params);
        let mut dx = need_dx.then(|| Act::zeros(x.shape, self.cin));
        if self.is_pointwise() {
            let gw = self.weight.of_mut(grads);
            matmul(
                self.cin,
                cout,
                n_out,
                gw,
                Layout::row_major(cout),
                true,
                &x.data,
                Layout::transposed(self.cin),
                &dout.data,
                Layout::row_major(cout),
            );
            if let Some(dx) = dx.as_mut() {
                matmul(
                    n_out,
                    self.cin,
                    cout,
                    &mut dx.data,
                    Layout::row_major(self.cin),
                    false,
                    &dout.data,
                    Layout::row_major(cout),
                    w,
                    Layout::transposed(cout),
                );
            }
            return dx;
        }
        // Unstrided layers get dx as a convolution of dout with the flipped kernel, which
        // keeps the GEMM inner dimension at 27·cout instead of cout.
        let flipped_dx = need_dx && self.stride == [1, 1, 1];
        if flipped_dx {
            dx = Some(self.flipped().forward_with_weight(&self.flipped_weight(w), dout));
        }
        let scatter_dx = need_dx && !flipped_dx;
        let chunk = self.chunk_rows();
        let mut col = vec![0.0f32; chunk.min(n_out) * k_len];
        let mut dcol = if scatter_dx { vec![0.0f32; chunk.min(n_out) * k_len] } else { Vec::new() };
        let mut row0 = 0;
        while row0 < n_out {
            let rows = chunk.min(n_out - row0);
            let dout_chunk = &dout.data[row0 * cout..(row0 + rows) * cout];
            self.im2col(x, out_shape, row0, rows, &mut col);
            matmul(
                k_len,
                cout,
                rows,
                self.weight.of_mut(grads),
                Layout::row_major(cout),
                true,
                &col,
                Layout::transposed(k_len),
                dout_chunk,
                Layout::row_major(cout),
            );
            if let (true, Some(dx)) = (scatter_dx, dx.as_mut()) {
                matmul(
                    rows,
                    k_len,
                    cout,
                    &mut dcol,
                    Layout::row_major(k_len),
                    false,
                    dout_chunk,
                    Layout::row_major(cout),
                    w,
                    Layout::transposed(cout),
                );
                self.col2im(dx, out_shape, row0, rows, &dcol);
            }
            row0 += rows;
        }
        dx
    }
}

/// Transposed convolution whose kernel equals its stride (1 or 2 per axis): every input
/// voxel writes a disjoint `kx·ky·kz` output block.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose3d {
    pub cin: usize,
    pub cout: usize,
    pub stride: [usize; 3],
    /// `[cin × (kvol·cout)]`, column `((dz·ky + dy)·kx + dx)·cout + co`.
    pub weight: ParamRange,
}

impl ConvTranspose3d {
    pub fn kvol(&self) -> usize {
        self.stride.iter().product()
    }

    pub fn out_shape(&self, in_shape: [usize; 3]) -> [usize; 3] {
        std::array::from_fn(|a| in_shape[a] * self.stride[a])
    }

    fn chunk_rows(&self) -> usize {
        (CHUNK_FLOATS / (self.kvol() * self.cout)).max(64)
    }

    /// Visits `(input voxel, kernel index, output voxel)` for a chunk of input rows.
    fn for_each_target(&self, in_shape: [usize; 3], row0: usize, rows: usize, mut f: impl FnMut(usize, usize, usize)) {
        let [sx, sy, sz] = self.stride;
        let [nx, ny, _] = in_shape;
        let (onx, ony) = (nx * sx, ny * sy);
        for r in 0..rows {
            let i = row0 + r;
            let ix = i % nx;
            let iy = (i / nx) % ny;
            let iz = i / (nx * ny);
            let mut k = 0;
            for dz in 0..sz {
                for dy in 0..sy {
                    for dx in 0..sx {
                        let o = (ix * sx + dx) + onx * ((iy * sy + dy) + ony * (iz * sz + dz));
                        f(r, k, o);
                        k += 1;
                    }
                }
            }
        }
    }

    pub fn forward(&self, params: &[f32], x: &Act) -> Act {
        let out_shape = self.out_shape(x.shape);
        let mut out = Act::zeros(out_shape, self.cout);
        let w = self.weight.of(params);
        let n_in = x.voxels();
        let kc = self.kvol() * self.cout;
        let cout = self.cout;
        let chunk = self.chunk_rows();
        let mut tmp = vec![0.0f32; chunk.min(n_in) * kc];
        let mut row0 = 0;
        while row0 < n_in {
            let rows = chunk.min(n_in - row0);
            matmul(
                rows,
                kc,
                self.cin,
                &mut tmp,
                Layout::row_major(kc),
                false,
                &x.data[row0 * self.cin..(row0 + rows) * self.cin],
                Layout::row_major(self.cin),
                w,
                Layout::row_major(kc),
            );
            self.for_each_target(x.shape, row0, rows, |r, k, o| {
                let s = r * kc + k * cout;
                out.data[o * cout..(o + 1) * cout].copy_from_slice(&tmp[s..s + cout]);
            });
            row0 += rows;
        }
        out
    }

    pub fn backward(&self, params: &[f32], x: &Act, dout: &Act, grads: &mut [f32]) -> Act {
        let w = self.weight.of(params);
        let n_in = x.voxels();
        let kc = self.kvol() * self.cout;
        let cout = self.cout;
        let chunk = self.chunk_rows();
        let mut dtmp = vec![0.0f32; chunk.min(n_in) * kc];
        let mut dx = Act::zeros(x.shape, self.cin);
        let mut row0 = 0;
        while row0 < n_in {
            let rows = chunk.min(n_in - row0);
            self.for_each_target(x.shape, row0, rows, |r, k, o| {
                let s = r * kc + k * cout;
                dtmp[s..s + cout].copy_from_slice(&dout.data[o * cout..(o + 1) * cout]);
            });
            let xs = &x.data[row0 * self.cin..(row0 + rows) * self.cin];
            matmul(
                self.cin,
                kc,
                rows,
                self.weight.of_mut(grads),
                Layout::row_major(kc),
                true,
                xs,
                Layout::transposed(self.cin),
                &dtmp,
                Layout::row_major(kc),
            );
            matmul(
                rows,
                self.cin,
                kc,
                &mut dx.data[row0 * self.cin..(row0 + rows) * self.cin],
                Layout::row_major(self.cin),
                false,
                &dtmp,
                Layout::row_major(kc),
                w,
                Layout::transposed(kc),
            );
            row0 += rows;
        }
        dx
    }
}
