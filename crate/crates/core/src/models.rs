//! Conditional generator and two-headed discriminator.
//!
//! Generator: `[z ; onehot(y)] -> linear -> leaky_relu -> reshape
//! -> (upsample2x -> conv3x3 -> leaky_relu) x2 -> conv3x3 -> tanh`.
//!
//! Discriminator: three 3x3 conv blocks (stride 1, 2, 2) with leaky_relu, a
//! global mean pool, then a real/fake head (1 logit) and a class head
//! (K logits) over the same pooled features. The discriminator sees no
//! label input.

use serde::{Deserialize, Serialize};

use crate::data::{Batch, BatchKind};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamSet};
use crate::rng::StreamRng;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub noise_dim: usize,
    /// Channel width of the generator's last hidden block.
    pub gen_width: usize,
    /// Channel width of the discriminator's first block.
    pub disc_width: usize,
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 1,
            height: 16,
            width: 16,
            num_classes: 4,
            noise_dim: 32,
            gen_width: 16,
            disc_width: 8,
            leaky_slope: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.channels,
            self.height,
            self.width,
            self.num_classes,
            self.noise_dim,
            self.gen_width,
            self.disc_width,
        ];
        if positive.iter().any(|&v| v == 0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.height % 4 != 0 || self.width % 4 != 0 {
            return Err(Error::Config(format!(
                "image size {}x{} must be divisible by 4",
                self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn image_dims(&self, n: usize) -> [usize; 4] {
        [n, self.channels, self.height, self.width]
    }
}

fn check_labels(labels: &[usize], k: usize) -> Result<()> {
    match labels.iter().position(|&l| l >= k) {
        None => Ok(()),
        Some(i) => Err(Error::Validation(format!(
            "label {} at index {i} out of range [0, {k})",
            labels[i]
        ))),
    }
}

/// `x · W + b` for `x: [N, in]`.
fn linear<T: Real>(g: &mut Graph<T>, x: Var, w: Var, b: Var, layer: &str) -> Result<Var> {
    let y = g.matmul(x, w).map_err(|e| e.in_layer(layer))?;
    g.add_bias(y, b).map_err(|e| e.in_layer(layer))
}

fn conv<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    w: Var,
    b: Var,
    stride: usize,
    layer: &str,
) -> Result<Var> {
    let y = g.conv2d(x, w, stride, 1).map_err(|e| e.in_layer(layer))?;
    g.add_bias(y, b).map_err(|e| e.in_layer(layer))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator<T> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
}

impl<T: Real> Generator<T> {
    pub fn init(config: &ModelConfig, rng: &mut StreamRng) -> Result<Self> {
        config.validate()?;
        let c = config;
        let (h4, w4) = (c.height / 4, c.width / 4);
        let wide = 2 * c.gen_width;
        let fc_in = c.noise_dim + c.num_classes;
        let fc_out = wide * h4 * w4;
        let mut p = ParamSet::new();
        p.push_uniform("g.fc.w", &[fc_in, fc_out], fc_in, rng);
        p.push_uniform("g.fc.b", &[fc_out], fc_in, rng);
        p.push_uniform("g.conv1.w", &[c.gen_width, wide, 3, 3], wide * 9, rng);
        p.push_uniform("g.conv1.b", &[c.gen_width], wide * 9, rng);
        p.push_uniform("g.conv2.w", &[c.gen_width, c.gen_width, 3, 3], c.gen_width * 9, rng);
        p.push_uniform("g.conv2.b", &[c.gen_width], c.gen_width * 9, rng);
        p.push_uniform("g.out.w", &[c.channels, c.gen_width, 3, 3], c.gen_width * 9, rng);
        p.push_uniform("g.out.b", &[c.channels], c.gen_width * 9, rng);
        Ok(Self {
            config: config.clone(),
            params: p,
        })
    }

    /// Records the generator on `g`; returns images `[N, C, H, W]`.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, z: Var, labels: &[usize]) -> Result<Var> {
        let c = &self.config;
        check_labels(labels, c.num_classes)?;
        let zd = g.dims(z).to_vec();
        if zd.len() != 2 || zd[1] != c.noise_dim || zd[0] != labels.len() {
            return Err(Error::shape(
                "generator",
                format!("noise {zd:?} for {} labels, noise_dim {}", labels.len(), c.noise_dim),
            ));
        }
        let n = labels.len();
        let mut onehot = Tensor::zeros(&[n, c.num_classes]);
        for (i, &y) in labels.iter().enumerate() {
            onehot.data_mut()[i * c.num_classes + y] = T::one();
        }
        let onehot = g.constant(onehot);
        let x = g.concat(&[z, onehot], 1)?;
        let x = linear(g, x, p.get(0), p.get(1), "g.fc")?;
        let x = g.leaky_relu(x, c.leaky_slope)?;
        let x = g.reshape(x, &[n, 2 * c.gen_width, c.height / 4, c.width / 4])?;
        let x = g.upsample2x(x)?;
        let x = conv(g, x, p.get(2), p.get(3), 1, "g.conv1")?;
        let x = g.leaky_relu(x, c.leaky_slope)?;
        let x = g.upsample2x(x)?;
        let x = conv(g, x, p.get(4), p.get(5), 1, "g.conv2")?;
        let x = g.leaky_relu(x, c.leaky_slope)?;
        let x = conv(g, x, p.get(6), p.get(7), 1, "g.out")?;
        g.tanh(x).map_err(|e| e.in_layer("g.out"))
    }

    /// Generates a detached fake batch.
    pub fn generate(&self, z: &Tensor<T>, labels: &[usize]) -> Result<Batch<T>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let out = self.forward(&mut g, &p, zv, labels)?;
        Batch::new(g.value(out).clone(), labels.to_vec(), BatchKind::Fake)
    }
}

/// Graph handles for the two discriminator heads.
#[derive(Debug, Clone, Copy)]
pub struct DiscOutput {
    /// Real/fake logits, `[N]`.
    pub rf: Var,
    /// Class logits, `[N, K]`.
    pub class_logits: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator<T> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
}

/// Parameter names of the real/fake head.
pub const RF_HEAD: [&str; 2] = ["d.rf.w", "d.rf.b"];

impl<T: Real> Discriminator<T> {
    pub fn init(config: &ModelConfig, rng: &mut StreamRng) -> Result<Self> {
        config.validate()?;
        let c = config;
        let (w1, w2, w3) = (c.disc_width, 2 * c.disc_width, 4 * c.disc_width);
        let mut p = ParamSet::new();
        p.push_uniform("d.conv1.w", &[w1, c.channels, 3, 3], c.channels * 9, rng);
        p.push_uniform("d.conv1.b", &[w1], c.channels * 9, rng);
        p.push_uniform("d.conv2.w", &[w2, w1, 3, 3], w1 * 9, rng);
        p.push_uniform("d.conv2.b", &[w2], w1 * 9, rng);
        p.push_uniform("d.conv3.w", &[w3, w2, 3, 3], w2 * 9, rng);
        p.push_uniform("d.conv3.b", &[w3], w2 * 9, rng);
        p.push_uniform(RF_HEAD[0], &[w3, 1], w3, rng);
        p.push_uniform(RF_HEAD[1], &[1], w3, rng);
        p.push_uniform("d.cls.w", &[w3, c.num_classes], w3, rng);
        p.push_uniform("d.cls.b", &[c.num_classes], w3, rng);
        Ok(Self {
            config: config.clone(),
            params: p,
        })
    }

    /// Indices of real/fake head tensors within `params`.
    pub fn rf_head_indices(&self) -> Vec<usize> {
        self.params
            .names()
            .enumerate()
            .filter(|(_, n)| RF_HEAD.contains(n))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<DiscOutput> {
        let c = &self.config;
        let d = g.dims(x).to_vec();
        if d.len() != 4 || d[1..] != [c.channels, c.height, c.width] {
            return Err(Error::shape(
                "discriminator",
                format!(
                    "expected [N, {}, {}, {}], got {d:?}",
                    c.channels, c.height, c.width
                ),
            ));
        }
        let n = d[0];
        let h = conv(g, x, p.get(0), p.get(1), 1, "d.conv1")?;
        let h = g.leaky_relu(h, c.leaky_slope)?;
        let h = conv(g, h, p.get(2), p.get(3), 2, "d.conv2")?;
        let h = g.leaky_relu(h, c.leaky_slope)?;
        let h = conv(g, h, p.get(4), p.get(5), 2, "d.conv3")?;
        let h = g.leaky_relu(h, c.leaky_slope)?;
        let feat = g.mean_pool2d(h).map_err(|e| e.in_layer("d.pool"))?;
        let rf = linear(g, feat, p.get(6), p.get(7), "d.rf")?;
        let rf = g.reshape(rf, &[n])?;
        let class_logits = linear(g, feat, p.get(8), p.get(9), "d.cls")?;
        Ok(DiscOutput { rf, class_logits })
    }

    /// Evaluates both heads without recording gradients.
    pub fn discriminate(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(images.clone());
        let out = self.forward(&mut g, &p, x)?;
        Ok((g.value(out.rf).clone(), g.value(out.class_logits).clone()))
    }

    /// Top-1 predictions; ties go to the lowest class index.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Vec<usize>> {
        let (_, logits) = self.discriminate(images)?;
        Ok(argmax_rows(&logits))
    }
}

pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.dims()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn noise(n: usize, d: usize, seed: u64) -> Tensor<f32> {
        let mut r = rng::derive(seed, "z");
        let v = (0..n * d).map(|_| r.sample::<f32, _>(StandardNormal)).collect();
        Tensor::new(vec![n, d], v).unwrap()
    }

    #[test]
    fn generator_shape_and_range() {
        let cfg = ModelConfig::default();
        let gen = Generator::<f32>::init(&cfg, &mut rng::derive(1, "g")).unwrap();
        for b in 0..100u64 {
            let labels: Vec<usize> = (0..6).map(|i| (i + b as usize) % 4).collect();
            let out = gen.generate(&noise(6, cfg.noise_dim, b), &labels).unwrap();
            assert_eq!(out.images.dims(), &[6, 1, 16, 16]);
            assert!(out.images.data().iter().all(|v| v.abs() < 1.0));
            assert_eq!(out.labels, labels);
            assert_eq!(out.kind, BatchKind::Fake);
        }
    }

    #[test]
    fn generator_is_deterministic_and_checks_labels() {
        let cfg = ModelConfig::default();
        let gen = Generator::<f32>::init(&cfg, &mut rng::derive(1, "g")).unwrap();
        let z = noise(3, cfg.noise_dim, 9);
        let a = gen.generate(&z, &[0, 1, 2]).unwrap();
        let b = gen.generate(&z, &[0, 1, 2]).unwrap();
        assert_eq!(a, b);
        assert!(matches!(gen.generate(&z, &[0, 4, 1]), Err(Error::Validation(_))));
    }

    #[test]
    fn discriminator_shapes_and_per_sample_rows() {
        let cfg = ModelConfig::default();
        let disc = Discriminator::<f64>::init(&cfg, &mut rng::derive(2, "d")).unwrap();
        let mut r = rng::derive(5, "x");
        let one: Vec<f64> = (0..256).map(|_| r.gen_range(-1.0..1.0)).collect();
        let other: Vec<f64> = (0..256).map(|_| r.gen_range(-1.0..1.0)).collect();
        let data = [one.clone(), other, one].concat();
        let x = Tensor::new(vec![3, 1, 16, 16], data).unwrap();
        let (rf, cls) = disc.discriminate(&x).unwrap();
        assert_eq!(rf.dims(), &[3]);
        assert_eq!(cls.dims(), &[3, 4]);
        assert_eq!(rf.data()[0], rf.data()[2]);
        assert_eq!(cls.data()[..4], cls.data()[8..]);
    }

    #[test]
    fn discriminator_rejects_wrong_image_dims() {
        let cfg = ModelConfig::default();
        let disc = Discriminator::<f64>::init(&cfg, &mut rng::derive(2, "d")).unwrap();
        let x = Tensor::zeros(&[2, 1, 8, 8]);
        assert!(matches!(disc.discriminate(&x), Err(Error::Shape { .. })));
    }

    #[test]
    fn argmax_ties_pick_lowest_index() {
        let t = Tensor::<f64>::from_f64(&[2, 3], &[1., 1., 0., 0., 2., 2.]).unwrap();
        assert_eq!(argmax_rows(&t), vec![0, 1]);
    }
}
