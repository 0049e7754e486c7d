//! Network building blocks: U-Net generators and the single-block
//! attention discriminator, with deterministic fan-in initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{
    add, concat_channels, conv2d, layer_norm, leaky_relu, matmul, mean_tokens, mul_scalar, relu,
    sigmoid, softmax, tokens_from_feature_map, transpose_last2, upsample_nearest, Shape, Tensor,
};

const LEAKY_SLOPE: f64 = 0.2;
const LAYER_NORM_EPS: f64 = 1e-5;

/// Scaled-uniform fan-in initialization: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
fn uniform_init(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Convolution layer with owned weight and bias.
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    pub fn new(rng: &mut ChaCha8Rng, in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize) -> Self {
        let fan_in = in_c * k * k;
        Self {
            weight: Tensor::leaf(Shape([out_c, in_c, k, k]), uniform_init(rng, out_c * fan_in, fan_in)),
            bias: Tensor::leaf(Shape([1, out_c, 1, 1]), vec![0.0; out_c]),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        conv2d(x, &self.weight, &self.bias, self.stride, self.pad)
    }

    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Dense layer over the last dim of (B,1,N,D) token tensors.
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Tensor::leaf(Shape([1, 1, d_in, d_out]), uniform_init(rng, d_in * d_out, d_in)),
            bias: Tensor::leaf(Shape([1, 1, 1, d_out]), vec![0.0; d_out]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let y = matmul(x, &self.weight);
        // Row-broadcast bias: (B,1,N,D) + (1,1,1,D).
        add_bias_rows(&y, &self.bias)
    }

    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Adds a (1,1,1,D) bias to every row of a (B,H,N,D) tensor by expanding it
/// through a constant-free broadcast (concat of cheap ops would obscure the
/// gradient; this stays a dedicated composite).
fn add_bias_rows(x: &Tensor, bias: &Tensor) -> Tensor {
    let Shape([b, h, n, _d]) = x.shape();
    let ones = Tensor::leaf(Shape([b, h, n, 1]), vec![1.0; b * h * n]);
    let tiled = matmul(&ones, bias);
    add(x, &tiled)
}

pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        Self {
            gamma: Tensor::leaf(Shape([1, 1, 1, d]), vec![1.0; d]),
            beta: Tensor::leaf(Shape([1, 1, 1, d]), vec![0.0; d]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        layer_norm(x, &self.gamma, &self.beta, LAYER_NORM_EPS)
    }

    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}

/// Which generator a spec describes; fixes input/output channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeneratorKind {
    /// Diffuse reflection, RGB to RGB.
    Diffuse,
    /// Specular reflection, RGB to single channel.
    Specular,
    /// Light transmission, RGB to single channel.
    Transmission,
    /// Dewatered radiance, RGB to RGB.
    Radiance,
}

impl GeneratorKind {
    pub fn channels(self) -> (usize, usize) {
        match self {
            GeneratorKind::Diffuse | GeneratorKind::Radiance => (3, 3),
            GeneratorKind::Specular | GeneratorKind::Transmission => (3, 1),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GeneratorKind::Diffuse => "g_d",
            GeneratorKind::Specular => "g_s",
            GeneratorKind::Transmission => "g_t",
            GeneratorKind::Radiance => "g_j",
        }
    }
}

/// U-Net geometry. Outputs keep the input spatial size; every output passes
/// through a sigmoid so predictions live in (0,1).
#[derive(Debug, Clone, Copy)]
pub struct GeneratorSpec {
    pub kind: GeneratorKind,
    /// Number of downsampling levels.
    pub depth: usize,
    /// Channel width of the first encoder level; deeper levels double,
    /// capped at 4x.
    pub base_width: usize,
}

impl GeneratorSpec {
    pub fn new(kind: GeneratorKind) -> Self {
        Self {
            kind,
            depth: 3,
            base_width: 16,
        }
    }

    fn level_width(&self, level: usize) -> usize {
        self.base_width * (1 << level.min(2))
    }
}

/// Small U-Net: stride-2 encoder convs, nearest-upsample + conv decoder with
/// skip connections, sigmoid head.
pub struct UNet {
    pub spec: GeneratorSpec,
    stem: Conv2d,
    down: Vec<Conv2d>,
    up: Vec<Conv2d>,
    head: Conv2d,
}

impl UNet {
    pub fn build(spec: GeneratorSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (in_c, out_c) = spec.kind.channels();
        let w0 = spec.level_width(0);
        let stem = Conv2d::new(&mut rng, in_c, w0, 3, 1, 1);
        let mut down = Vec::with_capacity(spec.depth);
        for lvl in 0..spec.depth {
            let cin = spec.level_width(lvl);
            let cout = spec.level_width(lvl + 1);
            down.push(Conv2d::new(&mut rng, cin, cout, 4, 2, 1));
        }
        let mut up = Vec::with_capacity(spec.depth);
        for lvl in (0..spec.depth).rev() {
            let c_up = spec.level_width(lvl + 1);
            let c_skip = spec.level_width(lvl);
            up.push(Conv2d::new(&mut rng, c_up + c_skip, c_skip, 3, 1, 1));
        }
        let head = Conv2d::new(&mut rng, w0, out_c, 3, 1, 1);
        Self {
            spec,
            stem,
            down,
            up,
            head,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut skips = Vec::with_capacity(self.spec.depth + 1);
        let mut cur = leaky_relu(&self.stem.forward(x), LEAKY_SLOPE);
        skips.push(cur.clone());
        for conv in &self.down {
            cur = leaky_relu(&conv.forward(&cur), LEAKY_SLOPE);
            skips.push(cur.clone());
        }
        // skips = [e0, e1, ..., e_depth]; the deepest is the bottleneck.
        for (i, conv) in self.up.iter().enumerate() {
            let skip = &skips[self.spec.depth - 1 - i];
            let upsampled = upsample_nearest(&cur);
            cur = relu(&conv.forward(&concat_channels(&upsampled, skip)));
        }
        sigmoid(&self.head.forward(&cur))
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let name = self.spec.kind.name();
        let mut out = Vec::new();
        self.stem.collect(&format!("{name}.stem"), &mut out);
        for (i, c) in self.down.iter().enumerate() {
            c.collect(&format!("{name}.down{i}"), &mut out);
        }
        for (i, c) in self.up.iter().enumerate() {
            c.collect(&format!("{name}.up{i}"), &mut out);
        }
        self.head.collect(&format!("{name}.head"), &mut out);
        out
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }
}

/// Patch-embedding discriminator with one self-attention block and an MLP
/// head; conditioned by channel-concatenating the input scene with the
/// candidate image. Returns one probability per image.
pub struct Discriminator {
    pub patch: usize,
    pub dim: usize,
    embed: Conv2d,
    norm1: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    norm2: LayerNorm,
    mlp1: Linear,
    mlp2: Linear,
    head: Linear,
}

impl Discriminator {
    pub fn build(patch: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            patch,
            dim,
            embed: Conv2d::new(&mut rng, 6, dim, patch, patch, 0),
            norm1: LayerNorm::new(dim),
            wq: Linear::new(&mut rng, dim, dim),
            wk: Linear::new(&mut rng, dim, dim),
            wv: Linear::new(&mut rng, dim, dim),
            wo: Linear::new(&mut rng, dim, dim),
            norm2: LayerNorm::new(dim),
            mlp1: Linear::new(&mut rng, dim, dim * 2),
            mlp2: Linear::new(&mut rng, dim * 2, dim),
            head: Linear::new(&mut rng, dim, 1),
        }
    }

    /// `scene` conditions the judgement of `candidate`; both (B,3,H,W) with
    /// the spatial size divisible by the patch size.
    pub fn forward(&self, scene: &Tensor, candidate: &Tensor) -> Tensor {
        let Shape([_, _, h, w]) = scene.shape();
        assert!(
            h % self.patch == 0 && w % self.patch == 0,
            "discriminator: image size {h}x{w} not divisible by patch {}",
            self.patch
        );
        let x = concat_channels(scene, candidate);
        let tokens = tokens_from_feature_map(&self.embed.forward(&x));

        // Pre-norm attention block with residual.
        let normed = self.norm1.forward(&tokens);
        let q = self.wq.forward(&normed);
        let k = self.wk.forward(&normed);
        let v = self.wv.forward(&normed);
        let scores = mul_scalar(&matmul(&q, &transpose_last2(&k)), 1.0 / (self.dim as f64).sqrt());
        let attended = matmul(&softmax(&scores), &v);
        let tokens = add(&tokens, &self.wo.forward(&attended));

        // Pre-norm MLP block with residual.
        let normed = self.norm2.forward(&tokens);
        let hidden = relu(&self.mlp1.forward(&normed));
        let tokens = add(&tokens, &self.mlp2.forward(&hidden));

        sigmoid(&self.head.forward(&mean_tokens(&tokens)))
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.embed.collect("d.embed", &mut out);
        self.norm1.collect("d.norm1", &mut out);
        self.wq.collect("d.wq", &mut out);
        self.wk.collect("d.wk", &mut out);
        self.wv.collect("d.wv", &mut out);
        self.wo.collect("d.wo", &mut out);
        self.norm2.collect("d.norm2", &mut out);
        self.mlp1.collect("d.mlp1", &mut out);
        self.mlp2.collect("d.mlp2", &mut out);
        self.head.collect("d.head", &mut out);
        out
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }
}
