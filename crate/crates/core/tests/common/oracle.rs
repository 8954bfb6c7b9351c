//! Loop-based forward pass of the network and a scripted recomputation of
//! the disentanglement loss, written without the autodiff graph. Shared by
//! the loss tests and the acceptance harness.

use dislab_core::gradcore::{ModelParams, Tensor};
use dislab_core::losses::DisentForm;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub struct Maps {
    pub c: usize,
    pub s: usize,
    pub v: Vec<f64>,
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn get<'a>(p: &'a ModelParams<f64>, name: &str) -> &'a [f64] {
    p.get(name).unwrap().data()
}

fn conv(p: &ModelParams<f64>, layer: &str, x: &Maps, stride: usize) -> Maps {
    let w = get(p, &format!("{layer}.w"));
    let b = get(p, &format!("{layer}.b"));
    let out_c = b.len();
    let out_s = if stride == 2 { x.s / 2 } else { x.s };
    let mut v = vec![0.0; out_c * out_s * out_s];
    for o in 0..out_c {
        for y in 0..out_s {
            for xx in 0..out_s {
                let mut acc = b[o];
                for i in 0..x.c {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let sy = (y * stride + ky) as isize - 1;
                            let sx = (xx * stride + kx) as isize - 1;
                            if sy < 0 || sx < 0 || sy >= x.s as isize || sx >= x.s as isize {
                                continue;
                            }
                            let px = x.v[i * x.s * x.s + sy as usize * x.s + sx as usize];
                            acc += w[((o * x.c + i) * 3 + ky) * 3 + kx] * px;
                        }
                    }
                }
                v[o * out_s * out_s + y * out_s + xx] = acc;
            }
        }
    }
    Maps { c: out_c, s: out_s, v }
}

fn dense(p: &ModelParams<f64>, layer: &str, x: &[f64]) -> Vec<f64> {
    let w = get(p, &format!("{layer}.w"));
    let b = get(p, &format!("{layer}.b"));
    (0..b.len())
        .map(|o| b[o] + (0..x.len()).map(|i| w[o * x.len() + i] * x[i]).sum::<f64>())
        .collect()
}

fn up(x: &Maps) -> Maps {
    let s = 2 * x.s;
    let mut v = vec![0.0; x.c * s * s];
    for c in 0..x.c {
        for y in 0..s {
            for xx in 0..s {
                v[c * s * s + y * s + xx] = x.v[c * x.s * x.s + (y / 2) * x.s + xx / 2];
            }
        }
    }
    Maps { c: x.c, s, v }
}

pub fn encode(p: &ModelParams<f64>, img: &[f64]) -> Vec<f64> {
    let a = &p.arch;
    let mut h = Maps {
        c: a.channels,
        s: a.image_size,
        v: img.to_vec(),
    };
    for l in ["encoder.conv1", "encoder.conv2", "encoder.conv3"] {
        h = conv(p, l, &h, 2);
        h.v.iter_mut().for_each(|x| *x = silu(*x));
    }
    dense(p, "encoder.fc", &h.v)
}

pub fn decode(p: &ModelParams<f64>, z: &[f64]) -> Vec<f64> {
    let a = &p.arch;
    let mut v = dense(p, "decoder.fc", z);
    v.iter_mut().for_each(|x| *x = silu(*x));
    let mut h = Maps {
        c: a.encoder_widths[2],
        s: a.image_size / 8,
        v,
    };
    for (i, l) in ["decoder.conv1", "decoder.conv2", "decoder.conv3"].iter().enumerate() {
        h = conv(p, l, &up(&h), 1);
        let f = if i < 2 { silu } else { sigmoid };
        h.v.iter_mut().for_each(|x| *x = f(*x));
    }
    h.v
}

pub fn scripted_disent(p: &ModelParams<f64>, images: &Tensor<f64>, sigma: f64, seed: u64, form: DisentForm) -> f64 {
    let n = images.rows();
    let d = p.arch.latent_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Noise blocks: med first, then sensit, each n x d row-major.
    let mut noise = vec![vec![0.0; n * d]; 2];
    for block in noise.iter_mut() {
        for v in block.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = z * sigma;
        }
    }
    let mut total = 0.0;
    for i in 0..n {
        let z = encode(p, images.row(i));
        for (k, block) in noise.iter().enumerate() {
            let mut zp = z.clone();
            let offset = k * d;
            for j in 0..d {
                zp[offset + j] += block[i * d + j];
            }
            let re = encode(p, &decode(p, &zp));
            let range = match form {
                DisentForm::Literal => 0..2 * d,
                DisentForm::CrossOnly if k == 0 => d..2 * d,
                DisentForm::CrossOnly => 0..d,
            };
            total += range.map(|j| (z[j] - re[j]).powi(2)).sum::<f64>();
        }
    }
    total / n as f64
}
