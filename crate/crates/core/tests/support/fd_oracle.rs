//! Independent f64 forward pass of the two-conv CNN and central finite
//! differences of its mean cross-entropy for every parameter. A perturbed
//! parameter only changes its own unit, so each difference recomputes the
//! network from that unit onward.

#![allow(dead_code)]

pub struct Dims {
    pub side: usize,
    pub k: usize,
    pub c1: usize,
    pub c2: usize,
    pub f1: usize,
    pub f2: usize,
    pub f3: usize,
    pub nc: usize,
}

impl Dims {
    fn s1(&self) -> usize {
        self.side - self.k + 1
    }
    fn q1(&self) -> usize {
        self.s1() / 2
    }
    fn s2(&self) -> usize {
        self.q1() - self.k + 1
    }
    fn q2(&self) -> usize {
        self.s2() / 2
    }
    fn flat(&self) -> usize {
        self.c2 * self.q2() * self.q2()
    }
}

#[derive(Clone)]
struct Cache {
    a1: Vec<f64>,
    p1: Vec<f64>,
    a2: Vec<f64>,
    p2: Vec<f64>,
    z1: Vec<f64>,
    z2: Vec<f64>,
    z3: Vec<f64>,
    logits: Vec<f64>,
}

pub struct Oracle<'a> {
    pub d: Dims,
    /// Same order as the model: conv1 w/b, conv2 w/b, fc1..fc3 w/b, classifier w/b.
    pub t: &'a [Vec<f64>],
    xs: Vec<Vec<f64>>,
    ys: Vec<usize>,
    caches: Vec<Cache>,
}

fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.max(0.0)).collect()
}

/// ReLU then 2x2 max-pool of channel `c` into `out`.
fn pool_channel(a: &[f64], c: usize, s: usize, out: &mut [f64]) {
    let q = s / 2;
    for y in 0..q {
        for x in 0..q {
            let at = |dy: usize, dx: usize| a[c * s * s + (2 * y + dy) * s + 2 * x + dx];
            out[c * q * q + y * q + x] = at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1)).max(0.0);
        }
    }
}

fn pool(a: &[f64], channels: usize, s: usize) -> Vec<f64> {
    let q = s / 2;
    let mut out = vec![0.0; channels * q * q];
    for c in 0..channels {
        pool_channel(a, c, s, &mut out);
    }
    out
}

/// Valid cross-correlation, weights `[cout, cin, k, k]`.
fn conv(x: &[f64], cin: usize, side: usize, w: &[f64], b: &[f64], cout: usize, k: usize) -> Vec<f64> {
    let s = side - k + 1;
    let mut out = vec![0.0; cout * s * s];
    for o in 0..cout {
        for y in 0..s {
            for xx in 0..s {
                let mut acc = b[o];
                for c in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            acc += w[((o * cin + c) * k + ky) * k + kx] * x[c * side * side + (y + ky) * side + xx + kx];
                        }
                    }
                }
                out[o * s * s + y * s + xx] = acc;
            }
        }
    }
    out
}

fn dense(x: &[f64], w: &[f64], b: &[f64], n_out: usize) -> Vec<f64> {
    let n_in = x.len();
    (0..n_out).map(|j| b[j] + w[j * n_in..(j + 1) * n_in].iter().zip(x).map(|(a, v)| a * v).sum::<f64>()).collect()
}

pub fn cross_entropy(logits: &[f64], y: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - logits[y]
}

impl<'a> Oracle<'a> {
    pub fn new(d: Dims, t: &'a [Vec<f64>], xs: Vec<Vec<f64>>, ys: Vec<usize>) -> Self {
        let mut o = Self { d, t, xs, ys, caches: Vec::new() };
        o.caches = o.xs.iter().map(|x| o.forward(x)).collect();
        o
    }

    fn forward(&self, x: &[f64]) -> Cache {
        let (d, t) = (&self.d, self.t);
        let a1 = conv(x, 1, d.side, &t[0], &t[1], d.c1, d.k);
        let p1 = pool(&a1, d.c1, d.s1());
        let a2 = conv(&p1, d.c1, d.q1(), &t[2], &t[3], d.c2, d.k);
        let p2 = pool(&a2, d.c2, d.s2());
        let z1 = dense(&p2, &t[4], &t[5], d.f1);
        let z2 = dense(&relu(&z1), &t[6], &t[7], d.f2);
        let z3 = dense(&relu(&z2), &t[8], &t[9], d.f3);
        let logits = dense(&relu(&z3), &t[10], &t[11], d.nc);
        Cache { a1, p1, a2, p2, z1, z2, z3, logits }
    }

    pub fn loss(&self) -> f64 {
        self.caches.iter().zip(&self.ys).map(|(c, &y)| cross_entropy(&c.logits, y)).sum::<f64>() / self.ys.len() as f64
    }

    pub fn logits(&self) -> Vec<Vec<f64>> {
        self.caches.iter().map(|c| c.logits.clone()).collect()
    }

    fn from_z3(&self, z3: &[f64]) -> Vec<f64> {
        dense(&relu(z3), &self.t[10], &self.t[11], self.d.nc)
    }

    fn from_h2(&self, h2: &[f64]) -> Vec<f64> {
        self.from_z3(&dense(h2, &self.t[8], &self.t[9], self.d.f3))
    }

    /// `z2` with entry `j` of `h1` moved by `delta`.
    fn z2_after_h1_change(&self, c: &Cache, j: usize, delta: f64) -> Vec<f64> {
        let f1 = self.d.f1;
        c.z2.iter().enumerate().map(|(r, v)| v + self.t[6][r * f1 + j] * delta).collect()
    }

    fn from_z1(&self, z1: &[f64]) -> Vec<f64> {
        let z2 = dense(&relu(z1), &self.t[6], &self.t[7], self.d.f2);
        self.from_h2(&relu(&z2))
    }

    /// `z1` after the flattened pooled features of channel `o` change to `p2o`.
    fn from_p2_channel(&self, c: &Cache, o: usize, p2: &[f64]) -> Vec<f64> {
        let qq = self.d.q2() * self.d.q2();
        let flat = self.d.flat();
        let mut z1 = c.z1.clone();
        for i in o * qq..(o + 1) * qq {
            let delta = p2[i] - c.p2[i];
            if delta != 0.0 {
                for (j, z) in z1.iter_mut().enumerate() {
                    *z += self.t[4][j * flat + i] * delta;
                }
            }
        }
        self.from_z1(&z1)
    }

    fn from_a2_channel(&self, c: &Cache, o: usize, a2: &[f64]) -> Vec<f64> {
        let mut p2 = c.p2.clone();
        pool_channel(a2, o, self.d.s2(), &mut p2);
        self.from_p2_channel(c, o, &p2)
    }

    fn from_a1_channel(&self, c: &Cache, ch: usize, a1: &[f64]) -> Vec<f64> {
        let d = &self.d;
        let (q1, s2, k) = (d.q1(), d.s2(), d.k);
        let mut p1 = c.p1.clone();
        pool_channel(a1, ch, d.s1(), &mut p1);
        let mut a2 = c.a2.clone();
        for o in 0..d.c2 {
            for y in 0..s2 {
                for x in 0..s2 {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let idx = ch * q1 * q1 + (y + ky) * q1 + x + kx;
                            acc += self.t[2][((o * d.c1 + ch) * k + ky) * k + kx] * (p1[idx] - c.p1[idx]);
                        }
                    }
                    a2[o * s2 * s2 + y * s2 + x] += acc;
                }
            }
        }
        let p2 = pool(&a2, d.c2, s2);
        let z1 = dense(&p2, &self.t[4], &self.t[5], d.f1);
        self.from_z1(&z1)
    }

    /// Logits of sample `s` with parameter `(tensor, index)` moved by `delta`.
    fn perturbed_logits(&self, s: usize, tensor: usize, index: usize, delta: f64) -> Vec<f64> {
        let (d, c, x) = (&self.d, &self.caches[s], &self.xs[s]);
        let k = d.k;
        match tensor {
            0 | 1 => {
                let (o, ky, kx) = if tensor == 0 { (index / (k * k), index / k % k, index % k) } else { (index, 0, 0) };
                let s1 = d.s1();
                let mut a1 = c.a1.clone();
                for y in 0..s1 {
                    for xx in 0..s1 {
                        let v = if tensor == 0 { x[(y + ky) * d.side + xx + kx] } else { 1.0 };
                        a1[o * s1 * s1 + y * s1 + xx] += delta * v;
                    }
                }
                self.from_a1_channel(c, o, &a1)
            }
            2 | 3 => {
                let (o, ci, ky, kx) = if tensor == 2 {
                    (index / (d.c1 * k * k), index / (k * k) % d.c1, index / k % k, index % k)
                } else {
                    (index, 0, 0, 0)
                };
                let (q1, s2) = (d.q1(), d.s2());
                let mut a2 = c.a2.clone();
                for y in 0..s2 {
                    for xx in 0..s2 {
                        let v = if tensor == 2 { c.p1[ci * q1 * q1 + (y + ky) * q1 + xx + kx] } else { 1.0 };
                        a2[o * s2 * s2 + y * s2 + xx] += delta * v;
                    }
                }
                self.from_a2_channel(c, o, &a2)
            }
            4 | 5 => {
                let (j, v) = if tensor == 4 { (index / d.flat(), c.p2[index % d.flat()]) } else { (index, 1.0) };
                let old = c.z1[j].max(0.0);
                let new = (c.z1[j] + delta * v).max(0.0);
                self.from_h2(&relu(&self.z2_after_h1_change(c, j, new - old)))
            }
            6 | 7 => {
                let h1 = relu(&c.z1);
                let (j, v) = if tensor == 6 { (index / d.f1, h1[index % d.f1]) } else { (index, 1.0) };
                let change = (c.z2[j] + delta * v).max(0.0) - c.z2[j].max(0.0);
                let mut z3 = c.z3.clone();
                for (r, z) in z3.iter_mut().enumerate() {
                    *z += self.t[8][r * d.f2 + j] * change;
                }
                self.from_z3(&z3)
            }
            8 | 9 => {
                let h2 = relu(&c.z2);
                let (j, v) = if tensor == 8 { (index / d.f2, h2[index % d.f2]) } else { (index, 1.0) };
                let mut z3 = c.z3.clone();
                z3[j] += delta * v;
                self.from_z3(&z3)
            }
            10 | 11 => {
                let h3 = relu(&c.z3);
                let (o, v) = if tensor == 10 { (index / d.f3, h3[index % d.f3]) } else { (index, 1.0) };
                let mut l = c.logits.clone();
                l[o] += delta * v;
                l
            }
            _ => panic!("no tensor {tensor}"),
        }
    }

    pub fn perturbed_loss(&self, tensor: usize, index: usize, delta: f64) -> f64 {
        (0..self.ys.len()).map(|s| cross_entropy(&self.perturbed_logits(s, tensor, index, delta), self.ys[s])).sum::<f64>()
            / self.ys.len() as f64
    }

    pub fn central_difference(&self, tensor: usize, index: usize, h: f64) -> f64 {
        (self.perturbed_loss(tensor, index, h) - self.perturbed_loss(tensor, index, -h)) / (2.0 * h)
    }
}

/// `|a - n| / max(|a|, |n|)`, zero when both are below `1e-10`.
pub fn relative_error(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-10 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}
