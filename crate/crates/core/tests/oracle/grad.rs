//! Double-precision reference implementations of every tape primitive and
//! of the network, and a finite-difference gradient checker built on them.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stdai_core::backbone::{BackboneConfig, HistologyFeatures, ModelParams, FeatureSource};
use stdai_core::pdl::{all_sites, insert_pdls};
use stdai_core::tape::{ParamId, ParamStore, Tape, Var};
use stdai_core::Tensor;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-3;
/// Gradients smaller than this are compared absolutely; f32 accumulation
/// noise dominates any relative comparison below it.
const FLOOR: f64 = 1e-3;

/// Dense f64 tensor in `[C, H, W]` (or flat) layout.
#[derive(Clone, Debug)]
pub struct T {
    pub shape: Vec<usize>,
    pub d: Vec<f64>,
}

impl T {
    pub fn from(t: &Tensor) -> Self {
        Self { shape: t.shape().to_vec(), d: t.data().iter().map(|&v| v as f64).collect() }
    }
    fn dims(&self) -> (usize, usize, usize) {
        (self.shape[0], self.shape[1], self.shape[2])
    }
}

pub fn conv(x: &T, w: &T, b: &T, pad: usize) -> T {
    let (ci, h, wd) = x.dims();
    let (co, k) = (w.shape[0], w.shape[2]);
    let (oh, ow) = (h + 2 * pad + 1 - k, wd + 2 * pad + 1 - k);
    let mut d = vec![0.0; co * oh * ow];
    for o in 0..co {
        for y in 0..oh {
            for xx in 0..ow {
                let mut s = b.d[o];
                for c in 0..ci {
                    for ky in 0..k {
                        for kx in 0..k {
                            let (iy, ix) = (y + ky, xx + kx);
                            if iy < pad || ix < pad || iy - pad >= h || ix - pad >= wd {
                                continue;
                            }
                            s += w.d[((o * ci + c) * k + ky) * k + kx] * x.d[(c * h + iy - pad) * wd + ix - pad];
                        }
                    }
                }
                d[(o * oh + y) * ow + xx] = s;
            }
        }
    }
    T { shape: vec![co, oh, ow], d }
}

pub fn pool(x: &T) -> T {
    let (c, h, w) = x.dims();
    let mut d = vec![0.0; c * h / 2 * w / 2];
    for ch in 0..c {
        for y in 0..h / 2 {
            for xx in 0..w / 2 {
                let at = |dy, dx| x.d[(ch * h + 2 * y + dy) * w + 2 * xx + dx];
                d[(ch * h / 2 + y) * (w / 2) + xx] = at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1));
            }
        }
    }
    T { shape: vec![c, h / 2, w / 2], d }
}

pub fn upsample(x: &T) -> T {
    let (c, h, w) = x.dims();
    let mut d = vec![0.0; c * 4 * h * w];
    for ch in 0..c {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                d[(ch * 2 * h + y) * 2 * w + xx] = x.d[(ch * h + y / 2) * w + xx / 2];
            }
        }
    }
    T { shape: vec![c, 2 * h, 2 * w], d }
}

pub fn leaky(x: &T) -> T {
    T { shape: x.shape.clone(), d: x.d.iter().map(|&v| if v > 0.0 { v } else { 0.01 * v }).collect() }
}

pub fn cat(parts: &[&T]) -> T {
    let (_, h, w) = parts[0].dims();
    let c = parts.iter().map(|p| p.shape[0]).sum();
    T { shape: vec![c, h, w], d: parts.iter().flat_map(|p| p.d.iter().copied()).collect() }
}

pub fn affine(x: &T, a: &T, b: &T) -> T {
    let (c, h, w) = x.dims();
    let n = h * w;
    T { shape: x.shape.clone(), d: (0..c * n).map(|i| (1.0 + a.d[i / n]) * x.d[i] + b.d[i / n]).collect() }
}

pub fn zip(a: &T, b: &T, f: impl Fn(f64, f64) -> f64) -> T {
    T { shape: a.shape.clone(), d: a.d.iter().zip(&b.d).map(|(&x, &y)| f(x, y)).collect() }
}

pub fn dot(a: &T, b: &T) -> f64 {
    a.d.iter().zip(&b.d).map(|(x, y)| x * y).sum()
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Outcome of one gradient comparison.
#[derive(Clone, Debug)]
pub struct Check {
    pub what: String,
    pub worst: f64,
    pub skipped: usize,
    pub total: usize,
    /// First coordinate over tolerance, or too many kink skips.
    pub failure: Option<String>,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

/// Checks every coordinate of the parameters in `ids`.
///
/// A coordinate whose difference quotient changes with the step size sits
/// within one step of a kink (rectifier zero or pooling tie); it is skipped
/// and counted. At most 2% of coordinates may be skipped.
pub fn check(store: &ParamStore, ids: &[ParamId], loss_tape: impl Fn(&mut Tape<'_>) -> Var, loss_ref: impl Fn(&[T]) -> f64, what: &str) -> Check {
    let mut tape = Tape::new(store);
    let l = loss_tape(&mut tape);
    let grads = tape.backward(l).unwrap();
    let base: Vec<T> = store.ids().map(|id| T::from(store.get(id))).collect();
    let mut out = Check { what: what.to_string(), worst: 0.0, skipped: 0, total: 0, failure: None };
    for &id in ids {
        let pi = id.index();
        let Some(g) = grads.get(id) else {
            out.failure = Some(format!("no gradient for {}", store.name(id)));
            return out;
        };
        for j in 0..base[pi].d.len() {
            let fd = |h: f64| {
                let mut p = base.clone();
                p[pi].d[j] += h;
                let up = loss_ref(&p);
                p[pi].d[j] -= 2.0 * h;
                (up - loss_ref(&p)) / (2.0 * h)
            };
            let (f1, f2) = (fd(STEP), fd(STEP / 4.0));
            out.total += 1;
            if (f1 - f2).abs() > 1e-6 * f1.abs().max(1.0) {
                out.skipped += 1;
                continue;
            }
            let a = g.data()[j] as f64;
            let rel = (a - f2).abs() / a.abs().max(f2.abs()).max(FLOOR);
            out.worst = out.worst.max(rel);
            if rel >= TOL && out.failure.is_none() {
                out.failure = Some(format!("{}[{j}] autodiff {a} vs finite difference {f2} (rel {rel:.2e})", store.name(id)));
            }
        }
    }
    if out.skipped * 50 > out.total && out.failure.is_none() {
        out.failure = Some(format!("{}/{} coordinates near kinks", out.skipped, out.total));
    }
    out
}

/// Every primitive, in four composed checks.
pub fn primitives(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let x = s.add("x", random(&mut rng, &[3, 6, 8], 1.0), true);
    let y = s.add("y", random(&mut rng, &[3, 6, 8], 1.0), true);
    let w = s.add("w", random(&mut rng, &[4, 3, 3, 3], 0.5), true);
    let b = s.add("b", random(&mut rng, &[4], 0.5), true);
    let a = s.add("a", random(&mut rng, &[4], 0.5), true);
    let sh = s.add("shift", random(&mut rng, &[4], 0.5), true);
    let r1 = random(&mut rng, &[4, 6, 8], 1.0);
    let r2 = random(&mut rng, &[9, 3, 4], 1.0);
    let r3 = random(&mut rng, &[3, 12, 16], 1.0);
    let (q1, q2, q3) = (T::from(&r1), T::from(&r2), T::from(&r3));
    let [ix, iy, iw, ib, ia, ish] = [x, y, w, b, a, sh].map(ParamId::index);

    let mut out = Vec::new();
    // conv2d -> leaky -> channel_affine, weighted sum
    out.push(check(
        &s,
        &[x, w, b, a, sh],
        |t| {
            let (xv, wv, bv, av, sv) = (t.param(x), t.param(w), t.param(b), t.param(a), t.param(sh));
            let c = t.conv2d(xv, wv, bv, 1).unwrap();
            let c = t.leaky_relu(c);
            let c = t.channel_affine(c, av, sv).unwrap();
            let r = t.input(r1.clone());
            let m = t.mul(c, r).unwrap();
            t.sum(m)
        },
        |p| dot(&affine(&leaky(&conv(&p[ix], &p[iw], &p[ib], 1)), &p[ia], &p[ish]), &q1),
        &format!("conv/leaky/affine seed {seed}"),
    ));
    // unpadded conv
    out.push(check(
        &s,
        &[x, w, b],
        |t| {
            let (xv, wv, bv) = (t.param(x), t.param(w), t.param(b));
            let c = t.conv2d(xv, wv, bv, 0).unwrap();
            let m = t.mul(c, c).unwrap();
            t.mean(m)
        },
        |p| {
            let c = conv(&p[ix], &p[iw], &p[ib], 0);
            dot(&c, &c) / c.d.len() as f64
        },
        &format!("conv pad 0 seed {seed}"),
    ));
    // add, sub, mul, scale, concat, max_pool
    out.push(check(
        &s,
        &[x, y],
        |t| {
            let (xv, yv) = (t.param(x), t.param(y));
            let s1 = t.add(xv, yv).unwrap();
            let s2 = t.sub(xv, yv).unwrap();
            let s3 = t.mul(s1, s2).unwrap();
            let s4 = t.scale(s3, 0.7);
            let c = t.concat(&[s4, xv, yv]).unwrap();
            let pooled = t.max_pool2(c).unwrap();
            let r = t.input(r2.clone());
            let m = t.mul(pooled, r).unwrap();
            t.sum(m)
        },
        |p| {
            let s3 = zip(&zip(&p[ix], &p[iy], |a, b| a + b), &zip(&p[ix], &p[iy], |a, b| a - b), |a, b| a * b);
            let s4 = T { shape: s3.shape.clone(), d: s3.d.iter().map(|v| v * 0.7f32 as f64).collect() };
            let c = cat(&[&s4, &p[ix], &p[iy]]);
            dot(&pool(&c), &q2)
        },
        &format!("elementwise/concat/pool seed {seed}"),
    ));
    // upsample
    out.push(check(
        &s,
        &[x],
        |t| {
            let xv = t.param(x);
            let u = t.upsample2(xv).unwrap();
            let r = t.input(r3.clone());
            let m = t.mul(u, r).unwrap();
            let m = t.mul(m, u).unwrap();
            t.sum(m)
        },
        |p| {
            let u = upsample(&p[ix]);
            dot(&zip(&u, &u, |a, b| a * b), &q3)
        },
        &format!("upsample seed {seed}"),
    ));
    out
}

pub fn param(m: &ModelParams, p: &[T], name: &str) -> T {
    let id = m.store().find(name).unwrap_or_else(|| panic!("missing {name}"));
    p[id.index()].clone()
}

pub fn block_ref(m: &ModelParams, p: &[T], x: &T, name: &str, site: usize) -> T {
    let c = |x: &T, conv_name: &str| conv(x, &param(m, p, &format!("{name}.{conv_name}.weight")), &param(m, p, &format!("{name}.{conv_name}.bias")), 1);
    let h = leaky(&c(&leaky(&c(x, "conv1")), "conv2"));
    if m.store().find(&format!("pdl{site}.scale")).is_some() {
        affine(&h, &param(m, p, &format!("pdl{site}.scale")), &param(m, p, &format!("pdl{site}.shift")))
    } else {
        h
    }
}

/// Written from the architecture description, not from the tape code.
pub fn model_ref(m: &ModelParams, p: &[T], input: &T, feats: &T) -> T {
    let depth = m.config().depth;
    let mut skips = Vec::new();
    let mut x = input.clone();
    for level in 0..depth {
        if level > 0 {
            x = pool(&x);
        }
        let name = if level + 1 == depth { "bottleneck".to_string() } else { format!("enc{level}") };
        x = block_ref(m, p, &x, &name, level);
        if level + 1 < depth {
            skips.push(x.clone());
        }
    }
    let inj = conv(feats, &param(m, p, "adapter.weight"), &param(m, p, "adapter.bias"), 0);
    x = cat(&[&x, &inj]);
    for (i, level) in (0..depth - 1).rev().enumerate() {
        x = cat(&[&upsample(&x), &skips[level]]);
        x = block_ref(m, p, &x, &format!("dec{level}"), depth + i);
    }
    conv(&x, &param(m, p, "head.weight"), &param(m, p, "head.bias"), 0)
}

/// A small network with every PDL site filled, all parameters checked.
pub fn composite(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let cfg = BackboneConfig { genes: 2, base_width: 4, depth: 2, feature_channels: 3 };
    let mut m = ModelParams::init(cfg.clone(), seed).unwrap();
    let sites = all_sites(&m);
    insert_pdls(&mut m, &sites).unwrap();
    let ids: Vec<ParamId> = m.store().ids().collect();
    for &id in &ids {
        if m.store().name(id).starts_with("pdl") {
            *m.store_mut().get_mut(id) = random(&mut rng, m.store().get(id).shape(), 0.3);
        }
    }
    let input = random(&mut rng, &[cfg.in_channels(), 8, 8], 1.0);
    let feats = HistologyFeatures { map: random(&mut rng, &[3, 4, 4], 1.0), source: FeatureSource::Loaded };
    let r = random(&mut rng, &[2, 8, 8], 1.0);
    let (qi, qf, qr) = (T::from(&input), T::from(&feats.map), T::from(&r));
    check(
        m.store(),
        &ids,
        |t| {
            let (x, f) = (t.input(input.clone()), t.input(feats.map.clone()));
            let out = m.forward_tape(t, x, f).unwrap();
            let rv = t.input(r.clone());
            let prod = t.mul(out, rv).unwrap();
            t.sum(prod)
        },
        |p| dot(&model_ref(&m, p, &qi, &qf), &qr),
        &format!("composite model seed {seed}"),
    )
}

