//! Encoder with two latent heads, mirrored decoder, and the per-latent
//! classifiers.
//!
//! Parameter enumeration order (stable; checkpoints and optimizer state
//! rely on it):
//!
//! 1. `encoder.conv{1,2,3}.{w,b}` then `encoder.fc.{w,b}`
//! 2. disentangled only: `decoder.fc.{w,b}` then `decoder.conv{1,2,3}.{w,b}`
//! 3. disentangled: `c_med.{w,b}`, `c_sensit.{w,b}`; baseline: `c_joint.{w,b}`

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{ConvGeometry, Graph, Var};
use super::tensor::{Scalar, Tensor};
use super::GradError;

const DOWN: ConvGeometry = ConvGeometry { stride: 2, pad: 1 };
const SAME: ConvGeometry = ConvGeometry { stride: 1, pad: 1 };
const KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Shared encoder with a single DR classifier on the concatenated latent.
    Baseline,
    /// Encoder, decoder, and one classifier per latent half.
    Disentangled,
}

/// Network topology. Everything else about the model is derived from it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub kind: ModelKind,
    pub image_size: usize,
    pub channels: usize,
    pub latent_dim: usize,
    /// Channel widths of the three encoder stages.
    pub encoder_widths: [usize; 3],
    /// Channel widths of the decoder's first two upsampling stages.
    pub decoder_widths: [usize; 2],
    /// Number of groups the sensitive-attribute head separates.
    pub sa_groups: usize,
}

impl Architecture {
    pub fn new(kind: ModelKind, image_size: usize, channels: usize, latent_dim: usize) -> Self {
        Self {
            kind,
            image_size,
            channels,
            latent_dim,
            encoder_widths: [8, 16, 32],
            decoder_widths: [16, 8],
            sa_groups: 2,
        }
    }

    pub fn validate(&self) -> Result<(), GradError> {
        if self.image_size < 8 || !self.image_size.is_multiple_of(8) {
            return Err(GradError::Config(format!(
                "image size {} must be a positive multiple of 8",
                self.image_size
            )));
        }
        if self.channels == 0 || self.latent_dim == 0 || self.sa_groups < 2 {
            return Err(GradError::Config(
                "channels and latent_dim must be positive, sa_groups >= 2".into(),
            ));
        }
        Ok(())
    }

    fn bottleneck_side(&self) -> usize {
        self.image_size / 8
    }

    fn bottleneck_len(&self) -> usize {
        self.encoder_widths[2] * self.bottleneck_side().pow(2)
    }

    /// Ordered `(name, shape)` list of every trainable tensor.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let k = KERNEL;
        let [e1, e2, e3] = self.encoder_widths;
        let [d1, d2] = self.decoder_widths;
        let d = self.latent_dim;
        let mut out: Vec<(String, Vec<usize>)> = vec![
            ("encoder.conv1.w".into(), vec![e1, self.channels, k, k]),
            ("encoder.conv1.b".into(), vec![e1]),
            ("encoder.conv2.w".into(), vec![e2, e1, k, k]),
            ("encoder.conv2.b".into(), vec![e2]),
            ("encoder.conv3.w".into(), vec![e3, e2, k, k]),
            ("encoder.conv3.b".into(), vec![e3]),
            ("encoder.fc.w".into(), vec![2 * d, self.bottleneck_len()]),
            ("encoder.fc.b".into(), vec![2 * d]),
        ];
        match self.kind {
            ModelKind::Disentangled => out.extend([
                ("decoder.fc.w".into(), vec![self.bottleneck_len(), 2 * d]),
                ("decoder.fc.b".into(), vec![self.bottleneck_len()]),
                ("decoder.conv1.w".into(), vec![d1, e3, k, k]),
                ("decoder.conv1.b".into(), vec![d1]),
                ("decoder.conv2.w".into(), vec![d2, d1, k, k]),
                ("decoder.conv2.b".into(), vec![d2]),
                ("decoder.conv3.w".into(), vec![self.channels, d2, k, k]),
                ("decoder.conv3.b".into(), vec![self.channels]),
                ("c_med.w".into(), vec![2, d]),
                ("c_med.b".into(), vec![2]),
                ("c_sensit.w".into(), vec![self.sa_groups, d]),
                ("c_sensit.b".into(), vec![self.sa_groups]),
            ]),
            ModelKind::Baseline => out.extend([("c_joint.w".into(), vec![2, 2 * d]), ("c_joint.b".into(), vec![2])]),
        }
        out
    }
}

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// All trainable weights, in [`Architecture::layout`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub arch: Architecture,
    pub tensors: Vec<NamedTensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Fan-in scaled uniform weights `U(-sqrt(3/fan_in), sqrt(3/fan_in))`, zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self, GradError> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = arch
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let len: usize = shape.iter().product();
                let value = if name.ends_with(".b") {
                    Tensor::zeros(shape)
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let bound = (3.0 / fan_in as f64).sqrt();
                    let data = (0..len).map(|_| T::of(rng.random_range(-bound..bound))).collect();
                    Tensor::new(shape, data)
                };
                NamedTensor { name, value }
            })
            .collect();
        Ok(Self { arch, tensors })
    }

    pub fn zeros(arch: Architecture) -> Result<Self, GradError> {
        arch.validate()?;
        let tensors = arch
            .layout()
            .into_iter()
            .map(|(name, shape)| NamedTensor {
                name,
                value: Tensor::zeros(shape),
            })
            .collect();
        Ok(Self { arch, tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.iter_mut().find(|t| t.name == name).map(|t| &mut t.value)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            arch: self.arch.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| NamedTensor {
                    name: t.name.clone(),
                    value: t.value.cast(),
                })
                .collect(),
        }
    }

    /// Place every tensor on `g` as a leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.leaf(t.value.clone())).collect(),
            kind: self.arch.kind,
        }
    }
}

/// Graph handles for a bound [`ModelParams`], in layout order.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
    kind: ModelKind,
}

impl Bound {
    fn pair(&self, slot: usize) -> (Var, Var) {
        (self.vars[2 * slot], self.vars[2 * slot + 1])
    }

    fn head_slot(&self, head: Head) -> usize {
        match (self.kind, head) {
            (ModelKind::Disentangled, Head::Med) => 8,
            (ModelKind::Disentangled, Head::Sensit) => 9,
            (ModelKind::Baseline, Head::Joint) => 4,
            (kind, head) => panic!("{head:?} head is not part of a {kind:?} model"),
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Head {
    Med,
    Sensit,
    Joint,
}

/// Medical half of the latent pair.
#[derive(Clone, Copy, Debug)]
pub struct MedLatent(pub Var);

/// Sensitive-attribute half of the latent pair.
#[derive(Clone, Copy, Debug)]
pub struct SensitLatent(pub Var);

/// Latent pair as graph nodes; `joint` is the concatenation `[z_med | z_sensit]`.
#[derive(Clone, Copy, Debug)]
pub struct LatentVars {
    pub med: MedLatent,
    pub sensit: SensitLatent,
    pub joint: Var,
}

/// Graph-level forward functions for one architecture.
pub struct Network<'a> {
    pub arch: &'a Architecture,
    pub bound: &'a Bound,
}

impl<'a> Network<'a> {
    pub fn new(arch: &'a Architecture, bound: &'a Bound) -> Self {
        Self { arch, bound }
    }

    fn check_images<T: Scalar>(&self, g: &Graph<T>, images: Var) -> Result<(), GradError> {
        let s = g.shape(images);
        let want = [self.arch.channels, self.arch.image_size, self.arch.image_size];
        if s.len() != 4 || s[1..] != want {
            return Err(GradError::Shape {
                what: "image batch",
                expected: format!("[n, {}, {}, {}]", want[0], want[1], want[2]),
                got: format!("{s:?}"),
            });
        }
        Ok(())
    }

    /// Image batch `[n, c, s, s]` to the latent pair.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, images: Var) -> Result<LatentVars, GradError> {
        self.check_images(g, images)?;
        let n = g.shape(images)[0];
        let mut h = images;
        for slot in 0..3 {
            let (w, b) = self.bound.pair(slot);
            h = g.conv2d(h, w, b, DOWN);
            h = g.silu(h);
        }
        let flat = g.reshape(h, vec![n, self.arch.bottleneck_len()]);
        let (w, b) = self.bound.pair(3);
        let joint = g.dense(flat, w, b);
        let d = self.arch.latent_dim;
        let med = g.slice_cols(joint, 0, d);
        let sensit = g.slice_cols(joint, d, d);
        Ok(LatentVars {
            med: MedLatent(med),
            sensit: SensitLatent(sensit),
            joint,
        })
    }

    /// Latent pair back to an image batch with pixels in (0, 1).
    pub fn decode<T: Scalar>(&self, g: &mut Graph<T>, med: MedLatent, sensit: SensitLatent) -> Result<Var, GradError> {
        if self.arch.kind != ModelKind::Disentangled {
            return Err(GradError::Config("baseline model has no decoder".into()));
        }
        let d = self.arch.latent_dim;
        for (what, v) in [("z_med", med.0), ("z_sensit", sensit.0)] {
            let s = g.shape(v);
            if s.len() != 2 || s[1] != d {
                return Err(GradError::Shape {
                    what,
                    expected: format!("[n, {d}]"),
                    got: format!("{s:?}"),
                });
            }
        }
        let z = g.concat_cols(med.0, sensit.0);
        let n = g.shape(z)[0];
        let (w, b) = self.bound.pair(4);
        let mut h = g.dense(z, w, b);
        h = g.silu(h);
        let side = self.arch.bottleneck_side();
        h = g.reshape(h, vec![n, self.arch.encoder_widths[2], side, side]);
        for slot in 5..8 {
            h = g.upsample2(h);
            let (w, b) = self.bound.pair(slot);
            h = g.conv2d(h, w, b, SAME);
            h = if slot < 7 { g.silu(h) } else { g.sigmoid(h) };
        }
        Ok(h)
    }

    fn head<T: Scalar>(&self, g: &mut Graph<T>, z: Var, head: Head) -> Result<Var, GradError> {
        let (w, b) = self.bound.pair(self.bound.head_slot(head));
        let fan_in = g.shape(w)[1];
        let s = g.shape(z);
        if s.len() != 2 || s[1] != fan_in {
            return Err(GradError::Shape {
                what: "classifier input",
                expected: format!("[n, {fan_in}]"),
                got: format!("{s:?}"),
            });
        }
        let logits = g.dense(z, w, b);
        Ok(g.softmax(logits))
    }

    /// `p(Normal), p(Referable)` from the medical latent only.
    pub fn classify_med<T: Scalar>(&self, g: &mut Graph<T>, z: MedLatent) -> Result<Var, GradError> {
        self.head(g, z.0, Head::Med)
    }

    /// Group probabilities for the target attribute from the sensitive latent only.
    pub fn classify_sensit<T: Scalar>(&self, g: &mut Graph<T>, z: SensitLatent) -> Result<Var, GradError> {
        self.head(g, z.0, Head::Sensit)
    }

    /// Baseline DR head on the concatenated latent.
    pub fn classify_joint<T: Scalar>(&self, g: &mut Graph<T>, latents: &LatentVars) -> Result<Var, GradError> {
        self.head(g, latents.joint, Head::Joint)
    }

    /// DR probabilities for whichever head this architecture uses at inference.
    pub fn classify_dr<T: Scalar>(&self, g: &mut Graph<T>, latents: &LatentVars) -> Result<Var, GradError> {
        match self.arch.kind {
            ModelKind::Baseline => self.classify_joint(g, latents),
            ModelKind::Disentangled => self.classify_med(g, latents.med),
        }
    }
}

/// One sample's latent vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPair<T> {
    pub z_med: Vec<T>,
    pub z_sensit: Vec<T>,
}

impl<T: Scalar> LatentPair<T> {
    pub fn joint(&self) -> Vec<T> {
        let mut v = self.z_med.clone();
        v.extend_from_slice(&self.z_sensit);
        v
    }
}

/// Encode a batch `[n, c, s, s]` without keeping the graph.
pub fn encode<T: Scalar>(params: &ModelParams<T>, images: &Tensor<T>) -> Result<Vec<LatentPair<T>>, GradError> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let net = Network::new(&params.arch, &bound);
    let x = g.leaf(images.clone());
    let lat = net.encode(&mut g, x)?;
    let (zm, zs) = (g.value(lat.med.0), g.value(lat.sensit.0));
    Ok((0..zm.rows())
        .map(|i| LatentPair {
            z_med: zm.row(i).to_vec(),
            z_sensit: zs.row(i).to_vec(),
        })
        .collect())
}

fn latent_matrix<T: Scalar>(rows: &[&[T]], d: usize, what: &'static str) -> Result<Tensor<T>, GradError> {
    let mut data = Vec::with_capacity(rows.len() * d);
    for r in rows {
        if r.len() != d {
            return Err(GradError::Shape {
                what,
                expected: format!("{d} coordinates"),
                got: format!("{} coordinates", r.len()),
            });
        }
        data.extend_from_slice(r);
    }
    Ok(Tensor::new(vec![rows.len(), d], data))
}

/// Decode latent pairs to an image batch `[n, c, s, s]`.
pub fn decode<T: Scalar>(params: &ModelParams<T>, latents: &[LatentPair<T>]) -> Result<Tensor<T>, GradError> {
    let d = params.arch.latent_dim;
    let med: Vec<&[T]> = latents.iter().map(|l| l.z_med.as_slice()).collect();
    let sen: Vec<&[T]> = latents.iter().map(|l| l.z_sensit.as_slice()).collect();
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let net = Network::new(&params.arch, &bound);
    let zm = g.leaf(latent_matrix(&med, d, "z_med")?);
    let zs = g.leaf(latent_matrix(&sen, d, "z_sensit")?);
    let out = net.decode(&mut g, MedLatent(zm), SensitLatent(zs))?;
    Ok(g.value(out).clone())
}

/// DR probabilities `[n, 2]` from medical latents.
pub fn classify_med<T: Scalar>(params: &ModelParams<T>, z_med: &[Vec<T>]) -> Result<Tensor<T>, GradError> {
    let rows: Vec<&[T]> = z_med.iter().map(Vec::as_slice).collect();
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let net = Network::new(&params.arch, &bound);
    let z = g.leaf(latent_matrix(&rows, params.arch.latent_dim, "z_med")?);
    let p = net.classify_med(&mut g, MedLatent(z))?;
    Ok(g.value(p).clone())
}

/// Attribute-group probabilities `[n, groups]` from sensitive latents.
pub fn classify_sensit<T: Scalar>(params: &ModelParams<T>, z_sensit: &[Vec<T>]) -> Result<Tensor<T>, GradError> {
    let rows: Vec<&[T]> = z_sensit.iter().map(Vec::as_slice).collect();
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let net = Network::new(&params.arch, &bound);
    let z = g.leaf(latent_matrix(&rows, params.arch.latent_dim, "z_sensit")?);
    let p = net.classify_sensit(&mut g, SensitLatent(z))?;
    Ok(g.value(p).clone())
}
