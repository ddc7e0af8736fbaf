//! Minimal reverse-mode automatic differentiation over 2-D `f32` arrays.
//!
//! A [`Tape`] records operations in evaluation order; [`Tape::backward`]
//! walks it in reverse. Parameters live in a [`ParamStore`] and are borrowed,
//! not copied, by the tape.

use std::collections::BTreeMap;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Named trainable tensors, kept in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f32>>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f32>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Array2<f32> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f32> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array2<f32>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn zeros_like(&self) -> Grads {
        Grads(self.values.iter().map(|v| Array2::zeros(v.raw_dim())).collect())
    }
}

/// Parameter gradients, index-aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads(pub Vec<Array2<f32>>);

impl Grads {
    pub fn get(&self, id: ParamId) -> &Array2<f32> {
        &self.0[id.0]
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn scale(&mut self, c: f32) {
        for g in &mut self.0 {
            g.mapv_inplace(|v| v * c);
        }
    }

    pub fn norm(&self) -> f32 {
        self.0
            .iter()
            .map(|g| g.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>())
            .sum::<f64>()
            .sqrt() as f32
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulT(Var, Var),
    Add(Var, Var),
    /// Broadcast add of a 1×n row.
    AddRow(Var, Var),
    /// Broadcast multiply by a 1×n row.
    MulRow(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    Gelu(Var),
    /// Learnable-slope leaky unit; the slope is a 1×1 variable.
    Prelu(Var, Var),
    /// Row-wise standardization; keeps 1/σ per row.
    LayerNorm(Var, Vec<f32>),
    Softmax(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    /// Row-major reshape to a single row.
    Flatten(Var),
    Warp(Var, Var, WarpCache),
    Mse(Var, Array2<f32>),
}

struct WarpCache {
    floor: f32,
    /// Lower neighbour index per output frame.
    lower: Vec<usize>,
    /// Interpolation weight of the upper neighbour.
    weight: Vec<f32>,
    /// Whether the sample time was clamped at the end of the clip.
    clamped: Vec<bool>,
}

struct Node {
    value: Option<Array2<f32>>,
    op: Op,
}

/// Gradients of a scalar output. Only inputs and parameters are retained.
pub struct Gradients {
    nodes: Vec<Option<Array2<f32>>>,
    pub params: Grads,
}

impl Gradients {
    pub fn of(&self, var: Var) -> Option<&Array2<f32>> {
        self.nodes[var.0].as_ref()
    }
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

/// `exp` to about 2 ulp, written so the compiler can vectorize it.
#[inline]
pub fn fast_exp(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    let x = x.clamp(-87.0, 88.0);
    // Round to nearest via the float mantissa; avoids a libm call.
    const SHIFTER: f32 = 12_582_912.0;
    let n = (x * LOG2E + SHIFTER) - SHIFTER;
    let r = x - n * LN2_HI - n * LN2_LO;
    let p = 1.987_569_1e-4f32;
    let p = p * r + 1.398_199_9e-3;
    let p = p * r + 8.333_452e-3;
    let p = p * r + 4.166_579_6e-2;
    let p = p * r + 1.666_666_5e-1;
    let p = p * r + 0.5;
    let y = p * r * r + r + 1.0;
    y * f32::from_bits(((n as i32 + 127) as u32) << 23)
}

#[inline]
fn fast_tanh(x: f32) -> f32 {
    let x = x.clamp(-15.0, 15.0);
    1.0 - 2.0 / (fast_exp(2.0 * x) + 1.0)
}

fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + fast_tanh(C * (x + 0.044715 * x * x * x)))
}

fn gelu_grad(x: f32) -> f32 {
    const C: f32 = 0.797_884_6;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = fast_tanh(inner);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

const LN_EPS: f32 = 1e-5;

fn accumulate(slot: &mut Option<Array2<f32>>, g: Array2<f32>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(512),
        }
    }

    pub fn value(&self, v: Var) -> &Array2<f32> {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.params.get(*id),
            _ => self.nodes[v.0].value.as_ref().expect("non-parameter nodes hold values"),
        }
    }

    fn push(&mut self, value: Array2<f32>, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Array2<f32>) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn prelu(&mut self, a: Var, slope: Var) -> Var {
        let alpha = self.value(slope)[[0, 0]];
        let v = self.value(a).mapv(|x| if x > 0.0 { x } else { alpha * x });
        self.push(v, Op::Prelu(a, slope))
    }

    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.ncols() as f32;
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f32>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| v * inv);
            inv_std.push(inv);
        }
        self.push(out, Op::LayerNorm(a, inv_std))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let row = row.as_slice_mut().expect("owned arrays are contiguous");
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            for v in row.iter_mut() {
                *v = fast_exp(*v - max);
            }
            let inv = 1.0 / row.iter().sum::<f32>();
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        self.push(out, Op::Softmax(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f32>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows needs equal widths");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start, end))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f32>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols needs equal heights");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start, end))
    }

    pub fn flatten(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Array2::from_shape_vec((1, x.len()), x.iter().copied().collect())
            .expect("flatten preserves length");
        self.push(v, Op::Flatten(a))
    }

    /// Backward-mapped time warp of `frames` (F×D) by raw slopes (1×F):
    /// slopes are floored at `floor`, accumulated from slot 1 into sample
    /// times, clamped to the last frame, and frames are linearly
    /// interpolated at those times.
    pub fn warp(&mut self, slopes: Var, frames: Var, floor: f32) -> Var {
        let raw = self.value(slopes);
        let x = self.value(frames);
        let n = x.nrows();
        assert_eq!(raw.dim(), (1, n), "warp slopes must be 1×F");
        let last = (n - 1) as f32;
        let mut lower = Vec::with_capacity(n);
        let mut weight = Vec::with_capacity(n);
        let mut clamped = Vec::with_capacity(n);
        let mut out = Array2::zeros(x.raw_dim());
        let mut t = 0.0f32;
        for f in 0..n {
            if f > 0 {
                t += raw[[0, f]].max(floor);
            }
            let is_clamped = t >= last;
            let tc = t.min(last);
            let a = (tc.floor() as usize).min(n - 1);
            let u = if a + 1 >= n { 0.0 } else { tc - a as f32 };
            if u == 0.0 {
                out.row_mut(f).assign(&x.row(a));
            } else {
                let row = &x.row(a) * (1.0 - u) + &x.row(a + 1) * u;
                out.row_mut(f).assign(&row);
            }
            lower.push(a);
            weight.push(u);
            clamped.push(is_clamped);
        }
        let cache = WarpCache {
            floor,
            lower,
            weight,
            clamped,
        };
        self.push(out, Op::Warp(slopes, frames, cache))
    }

    /// Mean squared error against a constant target, as a 1×1 variable.
    pub fn mse(&mut self, a: Var, target: Array2<f32>) -> Var {
        let x = self.value(a);
        assert_eq!(x.dim(), target.dim(), "mse shape mismatch");
        let loss = x
            .iter()
            .zip(target.iter())
            .map(|(p, q)| {
                let d = (*p - *q) as f64;
                d * d
            })
            .sum::<f64>()
            / x.len() as f64;
        self.push(Array2::from_elem((1, 1), loss as f32), Op::Mse(a, target))
    }

    /// Reverse pass from the scalar `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Array2<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params = self.params.zeros_like();
        grads[output.0] = Some(Array2::ones(self.value(output).raw_dim()));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            // Input gradients are kept for callers; everything else is consumed.
            if matches!(node.op, Op::Input) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => params.0[id.0] += &g,
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[b.0], g.clone());
                    accumulate(&mut grads[a.0], g);
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads[row.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accumulate(&mut grads[a.0], g);
                }
                Op::MulRow(a, row) => {
                    let gr = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[row.0], gr);
                    accumulate(&mut grads[a.0], g * self.value(*row));
                }
                Op::Scale(a, c) => accumulate(&mut grads[a.0], g * *c),
                Op::Relu(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(self.value(*a), |gv, &x| {
                        if x <= 0.0 {
                            *gv = 0.0
                        }
                    });
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Gelu(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(self.value(*a), |gv, &x| *gv *= gelu_grad(x));
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Prelu(a, slope) => {
                    let alpha = self.value(*slope)[[0, 0]];
                    let x = self.value(*a);
                    let mut galpha = 0.0f32;
                    let mut ga = g;
                    ga.zip_mut_with(x, |gv, &xv| {
                        if xv <= 0.0 {
                            galpha += *gv * xv;
                            *gv *= alpha;
                        }
                    });
                    accumulate(&mut grads[slope.0], Array2::from_elem((1, 1), galpha));
                    accumulate(&mut grads[a.0], ga);
                }
                Op::LayerNorm(a, inv_std) => {
                    let y = node.value.as_ref().unwrap();
                    let n = y.ncols() as f32;
                    let mut ga = g;
                    for ((mut grow, yrow), &inv) in ga.rows_mut().into_iter().zip(y.rows()).zip(inv_std) {
                        let mean_g = grow.sum() / n;
                        let mean_gy = grow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum::<f32>() / n;
                        grow.zip_mut_with(&yrow, |gv, &yv| *gv = inv * (*gv - mean_g - yv * mean_gy));
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Softmax(a) => {
                    let y = node.value.as_ref().unwrap();
                    let mut ga = g;
                    for (mut grow, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let dot = grow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum::<f32>();
                        grow.zip_mut_with(&yrow, |gv, &yv| *gv = yv * (*gv - dot));
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let rows = self.value(*p).nrows();
                        accumulate(&mut grads[p.0], g.slice(s![start..start + rows, ..]).to_owned());
                        start += rows;
                    }
                }
                Op::SliceRows(a, start, end) => {
                    let mut ga = Array2::zeros(self.value(*a).raw_dim());
                    ga.slice_mut(s![*start..*end, ..]).assign(&g);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let cols = self.value(*p).ncols();
                        accumulate(&mut grads[p.0], g.slice(s![.., start..start + cols]).to_owned());
                        start += cols;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let mut ga = Array2::zeros(self.value(*a).raw_dim());
                    ga.slice_mut(s![.., *start..*end]).assign(&g);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Flatten(a) => {
                    let shape = self.value(*a).raw_dim();
                    let ga = Array2::from_shape_vec(shape, g.iter().copied().collect())
                        .expect("flatten preserves length");
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Warp(slopes, frames, cache) => {
                    let x = self.value(*frames);
                    let raw = self.value(*slopes);
                    let n = x.nrows();
                    let mut gx = Array2::zeros(x.raw_dim());
                    let mut du = vec![0.0f32; n];
                    for f in 0..n {
                        let a = cache.lower[f];
                        let u = cache.weight[f];
                        let gf = g.row(f);
                        gx.row_mut(a).scaled_add(1.0 - u, &gf);
                        if a + 1 < n {
                            if u != 0.0 {
                                gx.row_mut(a + 1).scaled_add(u, &gf);
                            }
                            if !cache.clamped[f] {
                                du[f] = gf
                                    .iter()
                                    .zip(x.row(a + 1).iter().zip(x.row(a).iter()))
                                    .map(|(gv, (hi, lo))| gv * (hi - lo))
                                    .sum();
                            }
                        }
                    }
                    let mut gs = Array2::zeros((1, n));
                    let mut acc = 0.0f32;
                    for i in (1..n).rev() {
                        acc += du[i];
                        if raw[[0, i]] > cache.floor {
                            gs[[0, i]] = acc;
                        }
                    }
                    accumulate(&mut grads[slopes.0], gs);
                    accumulate(&mut grads[frames.0], gx);
                }
                Op::Mse(a, target) => {
                    let c = 2.0 * g[[0, 0]] / target.len() as f32;
                    let ga = (self.value(*a) - target) * c;
                    accumulate(&mut grads[a.0], ga);
                }
            }
        }
        Gradients {
            nodes: grads,
            params,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f32> {
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
    }

    /// Checks every parameter gradient of `f` against central differences.
    fn check(store: &ParamStore, f: impl Fn(&mut Tape) -> Var, tol: f32) {
        let mut tape = Tape::new(store);
        let out = f(&mut tape);
        let grads = tape.backward(out).params;
        let h = 1e-2f32;
        for (id, name, value) in store.iter() {
            for idx in 0..value.len() {
                let eval = |delta: f32| {
                    let mut s = store.clone();
                    let p = s.get_mut(id);
                    let cell = p.iter_mut().nth(idx).unwrap();
                    *cell += delta;
                    let mut t = Tape::new(&s);
                    let o = f(&mut t);
                    t.value(o)[[0, 0]] as f64
                };
                let fd = ((eval(h) - eval(-h)) / (2.0 * h as f64)) as f32;
                let an = *grads.get(id).iter().nth(idx).unwrap();
                let err = (an - fd).abs() / (fd.abs().max(an.abs()) + 1e-2);
                assert!(err < tol, "{name}[{idx}]: analytic {an}, numeric {fd}");
            }
        }
    }

    #[test]
    fn fast_exp_matches_std() {
        let mut x = -80.0f32;
        while x < 80.0 {
            let (a, b) = (fast_exp(x), x.exp());
            assert!((a - b).abs() <= 4e-7 * b, "{x}: {a} vs {b}");
            x += 0.0137;
        }
        assert!((fast_tanh(0.3) - 0.3f32.tanh()).abs() < 1e-6);
    }

    #[test]
    fn dense_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let a = store.add("a", random(&mut rng, 4, 3));
        let b = store.add("b", random(&mut rng, 3, 5));
        let row = store.add("row", random(&mut rng, 1, 5));
        let c = store.add("c", random(&mut rng, 2, 5));
        let alpha = store.add("alpha", Array2::from_elem((1, 1), 0.3));
        let target = random(&mut rng, 6, 5);
        let fixed = random(&mut rng, 6, 5).mapv(|v| if v < 0.0 { v - 0.2 } else { v + 0.2 });
        check(
            &store,
            |t| {
                let (a, b, row, c, al) = (t.param(a), t.param(b), t.param(row), t.param(c), t.param(alpha));
                let h = t.matmul(a, b);
                let h = t.add_row(h, row);
                let h = t.mul_row(h, row);
                let h = t.gelu(h);
                let top = t.relu(c);
                let h = t.concat_rows(&[h, top]);
                // Kept away from the kink at 0 so differences stay smooth.
                let fixed = t.input(fixed.clone());
                let p = t.prelu(fixed, al);
                let h = t.add(h, p);
                let h = t.layer_norm(h);
                let h = t.scale(h, 1.7);
                t.mse(h, target.clone())
            },
            2e-2,
        );
    }

    #[test]
    fn attention_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let q = store.add("q", random(&mut rng, 5, 4));
        let k = store.add("k", random(&mut rng, 3, 4));
        let v = store.add("v", random(&mut rng, 3, 4));
        let target = random(&mut rng, 1, 12);
        check(
            &store,
            |t| {
                let (q, k, v) = (t.param(q), t.param(k), t.param(v));
                let mut heads = Vec::new();
                for h in 0..2 {
                    let qh = t.slice_cols(q, 2 * h, 2 * h + 2);
                    let kh = t.slice_cols(k, 2 * h, 2 * h + 2);
                    let vh = t.slice_cols(v, 2 * h, 2 * h + 2);
                    let s = t.matmul_t(qh, kh);
                    let w = t.softmax(s);
                    heads.push(t.matmul(w, vh));
                }
                let joined = t.concat_cols(&heads);
                let mid = t.slice_rows(joined, 1, 4);
                let flat = t.flatten(mid);
                let two = t.add(flat, flat);
                t.mse(two, target.clone())
            },
            2e-2,
        );
    }

    #[test]
    fn warp_op_gradients_away_from_kinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 8;
        let mut store = ParamStore::new();
        // Slopes near 0.7 keep every sample time interior and non-integer.
        let slopes = store.add(
            "slopes",
            Array2::from_shape_simple_fn((1, n), || 0.7 + 0.05 * rng.random_range(-1.0f32..1.0)),
        );
        let frames = store.add("frames", random(&mut rng, n, 3));
        let target = random(&mut rng, n, 3);
        let mut tape = Tape::new(&store);
        let (s, x) = (tape.param(slopes), tape.param(frames));
        let w = tape.warp(s, x, 1e-3);
        let out = tape.mse(w, target.clone());
        let grads = tape.backward(out).params;
        let h = 1e-3f32;
        for idx in 1..n {
            let eval = |delta: f32| {
                let mut st = store.clone();
                st.get_mut(slopes)[[0, idx]] += delta;
                let mut t = Tape::new(&st);
                let (s, x) = (t.param(slopes), t.param(frames));
                let w = t.warp(s, x, 1e-3);
                let o = t.mse(w, target.clone());
                t.value(o)[[0, 0]]
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = grads.get(slopes)[[0, idx]];
            assert!((an - fd).abs() <= 1e-2 * fd.abs().max(1e-2), "slope {idx}: {an} vs {fd}");
        }
        assert_eq!(grads.get(slopes)[[0, 0]], 0.0);
        check(
            &store,
            |t| {
                let (s, x) = (t.param(slopes), t.param(frames));
                let w = t.warp(s, x, 1e-3);
                t.mse(w, target.clone())
            },
            3e-2,
        );
    }

    #[test]
    fn warp_op_matches_core_operator() {
        use loosekey_core::warp::{apply_warp, WarpFunction};
        use loosekey_core::{Motion, PoseLayout};
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layout = PoseLayout::new(1, 0, 0).unwrap();
        let n = 12;
        let frames = random(&mut rng, n, layout.dim());
        let raw: Vec<f32> = (0..n).map(|_| rng.random_range(-0.5f32..2.5)).collect();
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let s = tape.input(Array2::from_shape_vec((1, n), raw.clone()).unwrap());
        let x = tape.input(frames.clone());
        let w = tape.warp(s, x, 1e-3);
        let motion = Motion::new(layout, 30, frames.mapv(|v| v as f64)).unwrap();
        let raw64: Vec<f64> = raw.iter().map(|&v| v as f64).collect();
        let wf = WarpFunction::from_slopes(&raw64, 1e-3).unwrap();
        let expect = apply_warp(&wf, &motion).unwrap();
        for (a, b) in tape.value(w).iter().zip(expect.frames().iter()) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
    }

    #[test]
    fn input_gradients_are_retained() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.input(Array2::from_elem((2, 2), 1.0));
        let y = tape.scale(x, 3.0);
        let loss = tape.mse(y, Array2::zeros((2, 2)));
        let g = tape.backward(loss);
        // d/dx mean((3x)^2) = 18x / 4
        assert!(g.of(x).unwrap().iter().all(|v| (v - 4.5).abs() < 1e-6));
    }
}
