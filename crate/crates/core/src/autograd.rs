//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as it is evaluated; [`Graph::backward`]
//! walks the tape in reverse. The op set is exactly what the hiding, locating
//! and revealing networks and their training objective need.

use crate::distortions::{blur, jpeg};
use crate::exec;
use crate::tensor::{gemm, Layout, Real, Tensor};

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index of a trainable tensor in a parameter store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Position of a square window inside batch item `item`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub item: usize,
    pub top: usize,
    pub left: usize,
}

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Sigmoid {
        x: Var,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample2 {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Crop {
        x: Var,
        windows: Vec<Window>,
    },
    LocalAdd {
        cover: Var,
        code: Var,
        windows: Vec<Window>,
        pass: Vec<bool>,
    },
    Select {
        a: Var,
        b: Var,
        take_b: Vec<bool>,
    },
    Blur {
        x: Var,
        taps: Vec<T>,
    },
    Jpeg {
        x: Var,
        traces: Vec<jpeg::JpegTrace<T>>,
    },
    MeanPow {
        a: Var,
        b: Var,
        p: u8,
    },
    WeightedSum {
        terms: Vec<(Var, T)>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// An evaluation tape.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(Var, ParamId)>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every parameter that received one, in recording order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> + '_ {
        self.params
            .iter()
            .filter_map(|&(v, id)| self.wrt(v).map(|g| (id, g)))
    }
}

fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * hw..][..hw];
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let shift = kx as isize - pad as isize;
                    let (lo, hi) = (
                        (-shift).max(0) as usize,
                        (w as isize - shift).min(w as isize).max(0) as usize,
                    );
                    dst[..lo.min(w)].fill(T::zero());
                    if hi > lo {
                        let s0 = (lo as isize + shift) as usize;
                        dst[lo..hi].copy_from_slice(&src[s0..s0 + hi - lo]);
                    }
                    dst[hi.max(lo)..].fill(T::zero());
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], c: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let shift = kx as isize - pad as isize;
                    let lo = (-shift).max(0) as usize;
                    let hi = (w as isize - shift).min(w as isize).max(0) as usize;
                    for x in lo..hi {
                        let sx = (x as isize + shift) as usize;
                        let d = &mut plane[sy as usize * w + sx];
                        *d = *d + row[y * w + x];
                    }
                }
            }
        }
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records constant data (no gradient is propagated to it).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Records data whose gradient should be available after `backward`.
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, true)
    }

    pub fn param(&mut self, id: ParamId, t: &Tensor<T>) -> Var {
        self.push(t.clone(), Op::Param(id), true)
    }

    /// 'Same' 2-D convolution with stride 1 and an odd square kernel.
    /// `w` is `[out, in, k, k]`, `b` is `[1, out, 1, 1]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let [n, cin, h, wd] = xv.shape();
        let [cout, wcin, k, k2] = wv.shape();
        assert_eq!(
            cin, wcin,
            "conv2d: input has {cin} channels, kernel expects {wcin}"
        );
        assert!(
            k == k2 && k % 2 == 1,
            "conv2d: kernel must be square and odd"
        );
        let hw = h * wd;
        let ck = cin * k * k;
        let bias = self.value(b).data();
        let mut out = Tensor::zeros([n, cout, h, wd]);
        exec::for_each_chunk(out.data_mut(), cout * hw, |i, o| {
            let mut col = vec![T::zero(); ck * hw];
            im2col(xv.item(i), cin, h, wd, k, &mut col);
            for (co, row) in o.chunks_mut(hw).enumerate() {
                row.fill(bias[co]);
            }
            gemm(
                cout,
                ck,
                hw,
                wv.data(),
                Layout::Normal,
                &col,
                Layout::Normal,
                T::one(),
                o,
            );
        });
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(out, Op::Conv2d { x, w, b }, needs)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::lit(slope);
        let out = self.value(x).map(|v| if v > T::zero() { v } else { v * s });
        let needs = self.needs(x);
        self.push(out, Op::LeakyRelu { x, slope: s }, needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let needs = self.needs(x);
        self.push(out, Op::Sigmoid { x }, needs)
    }

    /// 2x2 max pooling with stride 2; spatial sides must be even.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        assert!(
            h % 2 == 0 && w % 2 == 0,
            "max_pool2 needs even sides, got {h}x{w}"
        );
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let mut argmax = vec![0u32; n * c * oh * ow];
        let src = xv.data();
        for plane in 0..n * c {
            for y in 0..oh {
                for xo in 0..ow {
                    let base = plane * h * w;
                    let mut best = base + 2 * y * w + 2 * xo;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * y + dy) * w + 2 * xo + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    let o = (plane * oh + y) * ow + xo;
                    out.data_mut()[o] = src[best];
                    argmax[o] = best as u32;
                }
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::MaxPool2 { x, argmax }, needs)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
        let src = xv.data();
        let dst = out.data_mut();
        for plane in 0..n * c {
            for y in 0..2 * h {
                for xo in 0..2 * w {
                    dst[(plane * 2 * h + y) * 2 * w + xo] = src[(plane * h + y / 2) * w + xo / 2];
                }
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::Upsample2 { x }, needs)
    }

    /// Channel concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let [n, ca, h, w] = av.shape();
        let [nb, cb, hb, wb] = bv.shape();
        assert_eq!([n, h, w], [nb, hb, wb], "concat: incompatible shapes");
        let mut data = Vec::with_capacity(n * (ca + cb) * h * w);
        for i in 0..n {
            data.extend_from_slice(av.item(i));
            data.extend_from_slice(bv.item(i));
        }
        let out = Tensor::from_vec([n, ca + cb, h, w], data);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Concat { a, b }, needs)
    }

    /// Extracts `side x side` windows; the output batch has one item per window.
    pub fn crop(&mut self, x: Var, windows: Vec<Window>, side: usize) -> Var {
        let xv = self.value(x);
        let [_, c, h, w] = xv.shape();
        let mut out = Tensor::zeros([windows.len(), c, side, side]);
        for (m, win) in windows.iter().enumerate() {
            assert!(
                win.top + side <= h && win.left + side <= w,
                "crop out of bounds"
            );
            let src = xv.item(win.item);
            let dst = out.item_mut(m);
            for ch in 0..c {
                for y in 0..side {
                    let s = ch * h * w + (win.top + y) * w + win.left;
                    dst[(ch * side + y) * side..][..side].copy_from_slice(&src[s..s + side]);
                }
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::Crop { x, windows }, needs)
    }

    /// Adds code `m` into `cover` at `windows[m]` and clamps the touched
    /// pixels to `[0, 1]`. Pixels outside every window are copied unchanged.
    pub fn local_add(&mut self, cover: Var, code: Var, windows: Vec<Window>) -> Var {
        let cv = self.value(cover);
        let kv = self.value(code);
        let [_, c, h, w] = cv.shape();
        let [m, kc, side, side2] = kv.shape();
        assert_eq!(m, windows.len(), "local_add: one window per code");
        assert_eq!((kc, side), (c, side2), "local_add: code shape mismatch");
        let mut out = cv.clone();
        let mut pass = vec![true; out.len()];
        let item_len = c * h * w;
        for (mi, win) in windows.iter().enumerate() {
            assert!(
                win.top + side <= h && win.left + side <= w,
                "local_add out of bounds"
            );
            let src = kv.item(mi);
            for ch in 0..c {
                for y in 0..side {
                    for x in 0..side {
                        let o = win.item * item_len + ch * h * w + (win.top + y) * w + win.left + x;
                        let v = out.data()[o] + src[(ch * side + y) * side + x];
                        pass[o] = v >= T::zero() && v <= T::one();
                        out.data_mut()[o] = v.max(T::zero()).min(T::one());
                    }
                }
            }
        }
        let needs = self.needs(cover) || self.needs(code);
        self.push(
            out,
            Op::LocalAdd {
                cover,
                code,
                windows,
                pass,
            },
            needs,
        )
    }

    /// Per-pixel choice between `a` and `b`; `take_b` has one flag per
    /// `(item, y, x)` shared by all channels.
    pub fn select(&mut self, a: Var, b: Var, take_b: Vec<bool>) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "select: shape mismatch");
        let [n, c, h, w] = av.shape();
        assert_eq!(take_b.len(), n * h * w);
        let mut out = av.clone();
        for i in 0..n {
            for ch in 0..c {
                for p in 0..h * w {
                    if take_b[i * h * w + p] {
                        let o = (i * c + ch) * h * w + p;
                        out.data_mut()[o] = bv.data()[o];
                    }
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Select { a, b, take_b }, needs)
    }

    /// Separable blur of every channel with the given normalized taps.
    pub fn blur(&mut self, x: Var, taps: &[f64]) -> Var {
        let taps: Vec<T> = taps.iter().map(|&t| T::lit(t)).collect();
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let mut out = Tensor::zeros([n, c, h, w]);
        let src = xv.data();
        exec::for_each_chunk(out.data_mut(), h * w, |p, dst| {
            dst.copy_from_slice(&blur::blur_plane(
                &src[p * h * w..][..h * w],
                h,
                w,
                &taps,
                false,
            ));
        });
        let needs = self.needs(x);
        self.push(out, Op::Blur { x, taps }, needs)
    }

    /// Differentiable JPEG approximation (soft rounding) on RGB items.
    pub fn jpeg(&mut self, x: Var, quality: u8) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        assert_eq!(c, 3, "jpeg needs RGB input");
        let results = exec::map_indexed(n, |i| {
            jpeg::forward(xv.item(i), h, w, quality, jpeg::Rounding::Soft)
        });
        let mut data = Vec::with_capacity(xv.len());
        let mut traces = Vec::with_capacity(n);
        for (o, t) in results {
            data.extend(o);
            traces.push(t);
        }
        let needs = self.needs(x);
        self.push(
            Tensor::from_vec([n, c, h, w], data),
            Op::Jpeg { x, traces },
            needs,
        )
    }

    /// `mean(|a - b|^p)` for `p` in {1, 2}.
    pub fn mean_pow(&mut self, a: Var, b: Var, p: u8) -> Var {
        assert!(p == 1 || p == 2, "only p = 1 and p = 2 are supported");
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mean_pow: shape mismatch");
        let total: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| {
                let d = (x - y).as_f64().abs();
                if p == 1 {
                    d
                } else {
                    d * d
                }
            })
            .sum();
        let out = Tensor::scalar(T::lit(total / av.len() as f64));
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::MeanPow { a, b, p }, needs)
    }

    /// `sum_i w_i * x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: Vec<(Var, f64)>) -> Var {
        let terms: Vec<(Var, T)> = terms.into_iter().map(|(v, w)| (v, T::lit(w))).collect();
        let total = terms.iter().fold(T::zero(), |acc, &(v, w)| {
            acc + w * self.value(v).to_scalar()
        });
        let needs = terms.iter().any(|&(v, _)| self.needs(v));
        self.push(Tensor::scalar(total), Op::WeightedSum { terms }, needs)
    }

    /// Reverse pass from a scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let shape = self.value(root).shape();
        grads[root.0] = Some(Tensor::full(shape, T::one()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((Var(i), id)),
                _ => None,
            })
            .collect();
        Gradients { grads, params }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv2d { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let xv = self.value(x);
                let wv = self.value(w);
                let [n, cin, h, wd] = xv.shape();
                let [cout, _, k, _] = wv.shape();
                let hw = h * wd;
                let ck = cin * k * k;
                let (need_x, need_w) = (self.needs(x), self.needs(w));
                let per_item = exec::map_indexed(n, |item| {
                    let go = g.item(item);
                    let dw = need_w.then(|| {
                        let mut col = vec![T::zero(); ck * hw];
                        im2col(xv.item(item), cin, h, wd, k, &mut col);
                        let mut dw = vec![T::zero(); cout * ck];
                        gemm(
                            cout,
                            hw,
                            ck,
                            go,
                            Layout::Normal,
                            &col,
                            Layout::Transposed,
                            T::zero(),
                            &mut dw,
                        );
                        dw
                    });
                    let dx = need_x.then(|| {
                        let mut dcol = vec![T::zero(); ck * hw];
                        gemm(
                            ck,
                            cout,
                            hw,
                            wv.data(),
                            Layout::Transposed,
                            go,
                            Layout::Normal,
                            T::zero(),
                            &mut dcol,
                        );
                        let mut dx = vec![T::zero(); cin * hw];
                        col2im(&dcol, cin, h, wd, k, &mut dx);
                        dx
                    });
                    (dw, dx)
                });
                let mut db = vec![T::zero(); cout];
                for item in 0..n {
                    for (co, row) in g.item(item).chunks(hw).enumerate() {
                        db[co] = db[co] + row.iter().copied().sum::<T>();
                    }
                }
                let mut dw_total = need_w.then(|| vec![T::zero(); cout * ck]);
                let mut dx_total = need_x.then(|| Vec::with_capacity(n * cin * hw));
                for (dw, dx) in per_item {
                    if let (Some(acc), Some(dw)) = (dw_total.as_mut(), dw) {
                        for (a, v) in acc.iter_mut().zip(dw) {
                            *a = *a + v;
                        }
                    }
                    if let (Some(acc), Some(dx)) = (dx_total.as_mut(), dx) {
                        acc.extend(dx);
                    }
                }
                if let Some(dw) = dw_total {
                    self.accumulate(grads, w, Tensor::from_vec(wv.shape(), dw));
                }
                if let Some(dx) = dx_total {
                    self.accumulate(grads, x, Tensor::from_vec(xv.shape(), dx));
                }
                self.accumulate(grads, b, Tensor::from_vec([1, cout, 1, 1], db));
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { gv * *slope })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), data));
            }
            Op::Sigmoid { x } => {
                let data = node
                    .value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &gv)| gv * y * (T::one() - y))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(node.value.shape(), data));
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    let d = &mut dx.data_mut()[src as usize];
                    *d = *d + gv;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Upsample2 { x } => {
                let [n, c, h, w] = self.value(*x).shape();
                let mut dx = Tensor::zeros([n, c, h, w]);
                let gd = g.data();
                for plane in 0..n * c {
                    for y in 0..2 * h {
                        for xo in 0..2 * w {
                            let d = &mut dx.data_mut()[(plane * h + y / 2) * w + xo / 2];
                            *d = *d + gd[(plane * 2 * h + y) * 2 * w + xo];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Concat { a, b } => {
                let sa = self.value(*a).shape();
                let sb = self.value(*b).shape();
                let la = sa[1] * sa[2] * sa[3];
                let mut ga = Vec::with_capacity(sa.iter().product());
                let mut gb = Vec::with_capacity(sb.iter().product());
                for item in 0..sa[0] {
                    let gi = g.item(item);
                    ga.extend_from_slice(&gi[..la]);
                    gb.extend_from_slice(&gi[la..]);
                }
                self.accumulate(grads, *a, Tensor::from_vec(sa, ga));
                self.accumulate(grads, *b, Tensor::from_vec(sb, gb));
            }
            Op::Crop { x, windows } => {
                let [n, c, h, w] = self.value(*x).shape();
                let side = g.height();
                let mut dx = Tensor::zeros([n, c, h, w]);
                for (m, win) in windows.iter().enumerate() {
                    let src = g.item(m);
                    let dst = dx.item_mut(win.item);
                    for ch in 0..c {
                        for y in 0..side {
                            for xo in 0..side {
                                let d = &mut dst[ch * h * w + (win.top + y) * w + win.left + xo];
                                *d = *d + src[(ch * side + y) * side + xo];
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LocalAdd {
                cover,
                code,
                windows,
                pass,
            } => {
                let masked: Vec<T> = g
                    .data()
                    .iter()
                    .zip(pass)
                    .map(|(&gv, &p)| if p { gv } else { T::zero() })
                    .collect();
                let [_, c, h, w] = g.shape();
                let [m, _, side, _] = self.value(*code).shape();
                if self.needs(*code) {
                    let mut dcode = Tensor::zeros([m, c, side, side]);
                    for (mi, win) in windows.iter().enumerate() {
                        let dst = dcode.item_mut(mi);
                        for ch in 0..c {
                            for y in 0..side {
                                for x in 0..side {
                                    let o = win.item * c * h * w
                                        + ch * h * w
                                        + (win.top + y) * w
                                        + win.left
                                        + x;
                                    dst[(ch * side + y) * side + x] = masked[o];
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *code, dcode);
                }
                self.accumulate(grads, *cover, Tensor::from_vec(g.shape(), masked));
            }
            Op::Select { a, b, take_b } => {
                let [n, c, h, w] = g.shape();
                let mut ga = g.clone();
                let mut gb = Tensor::zeros(g.shape());
                for item in 0..n {
                    for ch in 0..c {
                        for p in 0..h * w {
                            if take_b[item * h * w + p] {
                                let o = (item * c + ch) * h * w + p;
                                gb.data_mut()[o] = ga.data()[o];
                                ga.data_mut()[o] = T::zero();
                            }
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Blur { x, taps } => {
                let [_, _, h, w] = g.shape();
                let mut dx = Tensor::zeros(g.shape());
                let gd = g.data();
                exec::for_each_chunk(dx.data_mut(), h * w, |p, dst| {
                    dst.copy_from_slice(&blur::blur_plane(
                        &gd[p * h * w..][..h * w],
                        h,
                        w,
                        taps,
                        true,
                    ));
                });
                self.accumulate(grads, *x, dx);
            }
            Op::Jpeg { x, traces } => {
                let [n, c, h, w] = g.shape();
                let parts =
                    exec::map_indexed(n, |item| jpeg::backward(g.item(item), h, w, &traces[item]));
                let data: Vec<T> = parts.into_iter().flatten().collect();
                self.accumulate(grads, *x, Tensor::from_vec([n, c, h, w], data));
            }
            Op::MeanPow { a, b, p } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let scale = g.to_scalar() / T::lit(av.len() as f64);
                let two = T::lit(2.0);
                let da: Vec<T> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(&x, &y)| {
                        let d = x - y;
                        if *p == 1 {
                            if d > T::zero() {
                                scale
                            } else if d < T::zero() {
                                -scale
                            } else {
                                T::zero()
                            }
                        } else {
                            two * d * scale
                        }
                    })
                    .collect();
                if self.needs(*b) {
                    let db = da.iter().map(|&v| -v).collect();
                    self.accumulate(grads, *b, Tensor::from_vec(bv.shape(), db));
                }
                self.accumulate(grads, *a, Tensor::from_vec(av.shape(), da));
            }
            Op::WeightedSum { terms } => {
                let gv = g.to_scalar();
                for &(v, w) in terms {
                    self.accumulate(grads, v, Tensor::scalar(gv * w));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|i| {
                let v = ((i as u64 * 2654435761 + seed * 97) % 1000) as f64 / 1000.0;
                v - 0.5
            })
            .collect();
        Tensor::from_vec(shape, data)
    }

    /// Central-difference check of d(sum of weighted outputs)/d(input).
    fn check_input_grad(shape: [usize; 4], build: impl Fn(&mut Graph<f64>, Var) -> Var) {
        let x0 = ramp(shape, 1);
        let loss_of = |x: Tensor<f64>| {
            let mut g = Graph::new();
            let xv = g.input_with_grad(x);
            let y = build(&mut g, xv);
            let target = Tensor::zeros(g.value(y).shape());
            let t = g.input(target);
            let l = g.mean_pow(y, t, 2);
            (g, xv, l)
        };
        let (g, xv, l) = loss_of(x0.clone());
        let grads = g.backward(l);
        let analytic = grads.wrt(xv).expect("input gradient").clone();
        let eps = 1e-6;
        for idx in 0..x0.len() {
            let mut xp = x0.clone();
            xp.data_mut()[idx] += eps;
            let mut xm = x0.clone();
            xm.data_mut()[idx] -= eps;
            let (gp, _, lp) = loss_of(xp);
            let (gm, _, lm) = loss_of(xm);
            let fd = (gp.value(lp).to_scalar() - gm.value(lm).to_scalar()) / (2.0 * eps);
            let a = analytic.data()[idx];
            assert!(
                (fd - a).abs() <= 1e-6 + 1e-4 * fd.abs().max(a.abs()),
                "index {idx}: analytic {a} vs numeric {fd}"
            );
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let w = ramp([3, 2, 3, 3], 5);
        let b = ramp([1, 3, 1, 1], 7);
        check_input_grad([2, 2, 4, 5], |g, x| {
            let wv = g.input(w.clone());
            let bv = g.input(b.clone());
            g.conv2d(x, wv, bv)
        });
        // Weight gradient via the weights as the differentiated input.
        let xdata = ramp([2, 2, 4, 5], 3);
        check_input_grad([3, 2, 3, 3], |g, wv| {
            let x = g.input(xdata.clone());
            let bv = g.input(b.clone());
            g.conv2d(x, wv, bv)
        });
    }

    #[test]
    fn elementwise_and_shape_ops_match_finite_differences() {
        check_input_grad([1, 2, 4, 4], |g, x| g.leaky_relu(x, 0.2));
        check_input_grad([1, 2, 4, 4], |g, x| g.sigmoid(x));
        check_input_grad([2, 1, 4, 4], |g, x| g.max_pool2(x));
        check_input_grad([1, 2, 2, 3], |g, x| g.upsample2(x));
        check_input_grad([2, 3, 6, 6], |g, x| {
            g.crop(
                x,
                vec![
                    Window {
                        item: 1,
                        top: 2,
                        left: 1,
                    },
                    Window {
                        item: 0,
                        top: 0,
                        left: 3,
                    },
                ],
                3,
            )
        });
        check_input_grad([1, 1, 5, 6], |g, x| {
            let taps = blur::gaussian_kernel(5, 1.0);
            g.blur(x, &taps)
        });
        check_input_grad([1, 2, 3, 3], |g, x| {
            let other = g.input(ramp([1, 1, 3, 3], 9));
            g.concat(x, other)
        });
    }

    #[test]
    fn local_add_routes_gradients_to_cover_and_code() {
        let code = ramp([1, 3, 2, 2], 4).map(|v| v * 0.2);
        check_input_grad([1, 3, 4, 4], |g, x| {
            let c = g.input(code.clone());
            g.local_add(
                x,
                c,
                vec![Window {
                    item: 0,
                    top: 1,
                    left: 2,
                }],
            )
        });
        let cover = ramp([1, 3, 4, 4], 2).map(|v| v * 0.5 + 0.5);
        check_input_grad([1, 3, 2, 2], |g, k| {
            let c = g.input(cover.clone());
            g.local_add(
                c,
                k,
                vec![Window {
                    item: 0,
                    top: 0,
                    left: 1,
                }],
            )
        });
    }

    #[test]
    fn select_splits_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.input_with_grad(Tensor::full([1, 2, 1, 2], 1.0));
        let b = g.input_with_grad(Tensor::full([1, 2, 1, 2], 3.0));
        let s = g.select(a, b, vec![true, false]);
        assert_eq!(g.value(s).data(), &[3.0, 1.0, 3.0, 1.0]);
        let zero = g.input(Tensor::zeros([1, 2, 1, 2]));
        let l = g.mean_pow(s, zero, 1);
        let grads = g.backward(l);
        assert_eq!(grads.wrt(a).unwrap().data(), &[0.0, 0.25, 0.0, 0.25]);
        assert_eq!(grads.wrt(b).unwrap().data(), &[0.25, 0.0, 0.25, 0.0]);
    }

    #[test]
    fn jpeg_layer_matches_finite_differences() {
        let x0 = ramp([1, 3, 8, 8], 11).map(|v| 0.5 + 0.3 * v);
        let loss_of = |x: Tensor<f64>| {
            let mut g = Graph::new();
            let xv = g.input_with_grad(x);
            let y = g.jpeg(xv, 50);
            let t = g.input(Tensor::full([1, 3, 8, 8], 0.5));
            let l = g.mean_pow(y, t, 2);
            let v = g.value(l).to_scalar();
            (g, xv, l, v)
        };
        let (g, xv, l, _) = loss_of(x0.clone());
        let analytic = g.backward(l).wrt(xv).unwrap().clone();
        let eps = 1e-6;
        let mut nonzero = 0;
        for idx in (0..x0.len()).step_by(7) {
            let mut xp = x0.clone();
            xp.data_mut()[idx] += eps;
            let mut xm = x0.clone();
            xm.data_mut()[idx] -= eps;
            let fd = (loss_of(xp).3 - loss_of(xm).3) / (2.0 * eps);
            let a = analytic.data()[idx];
            assert!(a.is_finite());
            assert!(
                (fd - a).abs() <= 1e-7 + 1e-3 * fd.abs(),
                "{idx}: {a} vs {fd}"
            );
            if a != 0.0 {
                nonzero += 1;
            }
        }
        assert!(nonzero > 0);
    }
}
