//! Stride-1 2-D convolution kernels built on im2col and a single GEMM per
//! image. All loops run in a fixed order so results are bit-reproducible.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView2, ArrayViewMut2, Axis};

use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        self.height + 2 * self.padding + 1 - self.kernel
    }

    pub fn out_width(&self) -> usize {
        self.width + 2 * self.padding + 1 - self.kernel
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

fn im2col<T: Real>(src: &[T], g: &ConvGeom, col: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let p = g.padding as isize;
    for c in 0..g.channels {
        let plane = &src[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = oy as isize + ky as isize - p;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let srow = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize + kx as isize - p;
                        *v = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], g: &ConvGeom, dst: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let p = g.padding as isize;
    for c in 0..g.channels {
        let plane = &mut dst[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = oy as isize + ky as isize - p;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..wo {
                        let ix = ox as isize + kx as isize - p;
                        if ix >= 0 && ix < g.width as isize {
                            drow[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn geom_of<T>(x: &Array4<T>, w: &Array4<T>, padding: usize) -> ConvGeom {
    let (_, c, h, wd) = x.dim();
    let (_, wc, kh, kw) = w.dim();
    assert_eq!(c, wc, "conv input channels {c} do not match weight channels {wc}");
    assert_eq!(kh, kw, "only square kernels are supported");
    assert!(h + 2 * padding >= kh && wd + 2 * padding >= kw, "kernel larger than padded input");
    ConvGeom { channels: c, height: h, width: wd, kernel: kh, padding }
}

fn weight_matrix<T: Real>(w: &Array4<T>) -> ArrayView2<'_, T> {
    let (co, ci, k, _) = w.dim();
    w.view().into_shape_with_order((co, ci * k * k)).expect("weights are contiguous")
}

fn image_matrix<'a, T: Real>(
    out: &'a mut Array4<T>,
    n: usize,
    rows: usize,
    cols: usize,
) -> ArrayViewMut2<'a, T> {
    out.index_axis_mut(Axis(0), n)
        .into_shape_with_order((rows, cols))
        .expect("activations are contiguous")
}

fn is_pointwise(g: &ConvGeom) -> bool {
    g.kernel == 1 && g.padding == 0
}

pub(crate) fn forward<T: Real>(
    x: &Array4<T>,
    w: &Array4<T>,
    bias: Option<&Array4<T>>,
    padding: usize,
) -> Array4<T> {
    let g = geom_of(x, w, padding);
    let n = x.dim().0;
    let co = w.dim().0;
    let (ho, wo) = (g.out_height(), g.out_width());
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let wm = weight_matrix(w);
    let mut out = Array4::<T>::zeros((n, co, ho, wo));
    let mut col = Array2::<T>::zeros((g.rows(), g.cols()));
    let img = g.channels * g.height * g.width;
    for i in 0..n {
        let xs = &src[i * img..(i + 1) * img];
        let mut om = image_matrix(&mut out, i, co, ho * wo);
        if is_pointwise(&g) {
            let xv = ArrayView2::from_shape((g.rows(), g.cols()), xs).expect("shape");
            general_mat_mul(T::one(), &wm, &xv, T::zero(), &mut om);
        } else {
            im2col(xs, &g, col.as_slice_mut().expect("standard layout"));
            general_mat_mul(T::one(), &wm, &col, T::zero(), &mut om);
        }
    }
    if let Some(b) = bias {
        let bv = b.as_slice().expect("bias contiguous");
        for mut img in out.outer_iter_mut() {
            for (c, mut plane) in img.outer_iter_mut().enumerate() {
                plane.mapv_inplace(|v| v + bv[c]);
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Array4<T>>,
    pub dw: Option<Array4<T>>,
    pub db: Option<Array4<T>>,
}

pub(crate) fn backward<T: Real>(
    x: &Array4<T>,
    w: &Array4<T>,
    grad_out: &Array4<T>,
    padding: usize,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let g = geom_of(x, w, padding);
    let n = x.dim().0;
    let co = w.dim().0;
    let (ho, wo) = (g.out_height(), g.out_width());
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let go = grad_out.as_standard_layout();
    let wm = weight_matrix(w);
    let img = g.channels * g.height * g.width;

    let mut dw_mat = need_dw.then(|| Array2::<T>::zeros((co, g.rows())));
    let mut dx = need_dx.then(|| Array4::<T>::zeros(x.raw_dim()));
    let mut col = Array2::<T>::zeros((g.rows(), g.cols()));
    let mut dcol = Array2::<T>::zeros((g.rows(), g.cols()));

    for i in 0..n {
        let gm = go
            .index_axis(Axis(0), i)
            .into_shape_with_order((co, ho * wo))
            .expect("grad contiguous");
        if let Some(dw) = dw_mat.as_mut() {
            let xs = &src[i * img..(i + 1) * img];
            if is_pointwise(&g) {
                let xv = ArrayView2::from_shape((g.rows(), g.cols()), xs).expect("shape");
                general_mat_mul(T::one(), &gm, &xv.t(), T::one(), dw);
            } else {
                im2col(xs, &g, col.as_slice_mut().expect("standard layout"));
                general_mat_mul(T::one(), &gm, &col.t(), T::one(), dw);
            }
        }
        if let Some(dx) = dx.as_mut() {
            if is_pointwise(&g) {
                let mut dm = image_matrix(dx, i, g.rows(), g.cols());
                general_mat_mul(T::one(), &wm.t(), &gm, T::zero(), &mut dm);
            } else {
                general_mat_mul(T::one(), &wm.t(), &gm, T::zero(), &mut dcol);
                let ds = dx.as_slice_mut().expect("standard layout");
                col2im(
                    dcol.as_slice().expect("standard layout"),
                    &g,
                    &mut ds[i * img..(i + 1) * img],
                );
            }
        }
    }

    let dw = dw_mat.map(|m| {
        m.into_shape_with_order(w.raw_dim()).expect("weight grad reshape")
    });
    let db = need_db.then(|| {
        let mut db = Array4::<T>::zeros((1, co, 1, 1));
        for img in go.outer_iter() {
            for (c, plane) in img.outer_iter().enumerate() {
                db[[0, c, 0, 0]] += plane.sum();
            }
        }
        db
    });
    ConvGrads { dx, dw, db }
}
