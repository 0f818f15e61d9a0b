#![allow(dead_code)]

use attentive_gru::params::ParamStore;
use attentive_gru::tensor::{ConvGeom, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Textbook seven-deep loop cross-correlation.
pub fn conv_oracle(x: &Tensor, k: &Tensor, b: Option<&Tensor>, g: ConvGeom) -> Tensor {
    let [n, c, h, w] = <[usize; 4]>::try_from(x.shape()).unwrap();
    let [o, _, kh, kw] = <[usize; 4]>::try_from(k.shape()).unwrap();
    let ho = (h + g.pad_top + g.pad_bottom - kh) / g.stride + 1;
    let wo = (w + g.pad_left + g.pad_right - kw) / g.stride + 1;
    let mut out = vec![0.0; n * o * ho * wo];
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = b.map(|b| b.data()[oi]).unwrap_or(0.0);
                    for ci in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * g.stride + i) as isize - g.pad_top as isize;
                                let ix = (xx * g.stride + j) as isize - g.pad_left as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += k.at4(oi, ci, i, j) * x.at4(ni, ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    out[((ni * o + oi) * ho + y) * wo + xx] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, o, ho, wo], out).unwrap()
}

pub fn relu(t: &Tensor) -> Tensor {
    Tensor::new(t.shape(), t.data().iter().map(|v| v.max(0.0)).collect()).unwrap()
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape(), b.shape());
    Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).unwrap()
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    Tensor::new(a.shape(), a.data().iter().map(|x| x * s).collect()).unwrap()
}

pub fn max_pool2(t: &Tensor) -> Tensor {
    let [n, c, h, w] = <[usize; 4]>::try_from(t.shape()).unwrap();
    Tensor::from_fn(&[n, c, h / 2, w / 2], |i| {
        let (p, r, col) = (i / (h / 2 * w / 2), (i / (w / 2)) % (h / 2), i % (w / 2));
        let (ni, ci) = (p / c, p % c);
        [(0, 0), (0, 1), (1, 0), (1, 1)]
            .iter()
            .map(|(a, b)| t.at4(ni, ci, 2 * r + a, 2 * col + b))
            .fold(f64::NEG_INFINITY, f64::max)
    })
}

pub fn upsample2(t: &Tensor) -> Tensor {
    let [n, c, h, w] = <[usize; 4]>::try_from(t.shape()).unwrap();
    Tensor::from_fn(&[n, c, 2 * h, 2 * w], |i| {
        let (p, r, col) = (i / (4 * h * w), (i / (2 * w)) % (2 * h), i % (2 * w));
        t.at4(p / c, p % c, r / 2, col / 2)
    })
}

pub fn param(store: &ParamStore, name: &str) -> Tensor {
    store.get(store.id(name).unwrap_or_else(|| panic!("no parameter {name}"))).clone()
}

fn bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let mut v = 0.0;
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let (r, c) = (y0 + dy, x0 + dx);
            if r >= 0.0 && c >= 0.0 && (r as usize) < h && (c as usize) < w {
                v += wy * wx * plane[r as usize * w + c as usize];
            }
        }
    }
    v
}

/// Deformable convolution, one output value at a time.
pub fn deform_oracle(x: &Tensor, k: &Tensor, off: &Tensor) -> Tensor {
    let [n, c, h, w] = <[usize; 4]>::try_from(x.shape()).unwrap();
    let [o, _, s, _] = <[usize; 4]>::try_from(k.shape()).unwrap();
    let half = (s / 2) as f64;
    Tensor::from_fn(&[n, o, h, w], |i| {
        let (ni, oi, r, col) = (i / (o * h * w), (i / (h * w)) % o, (i / w) % h, i % w);
        let mut acc = 0.0;
        for ci in 0..c {
            let plane = &x.data()[(ni * c + ci) * h * w..][..h * w];
            for a in 0..s {
                for b in 0..s {
                    let t = a * s + b;
                    let y = r as f64 + a as f64 - half + off.at4(ni, 2 * t + 1, r, col);
                    let xx = col as f64 + b as f64 - half + off.at4(ni, 2 * t, r, col);
                    acc += k.at4(oi, ci, a, b) * bilinear(plane, h, w, y, xx);
                }
            }
        }
        acc
    })
}
