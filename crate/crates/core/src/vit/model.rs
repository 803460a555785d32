use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, LinearExec, Var};
use crate::error::{shape_err, Result};
use crate::quantlinear::{LayerId, MatmulTrace, OutlierPolicy, QuantLinearLayer, QuantSettings};
use crate::tensor::{Scalar, Tensor};

use super::ViTConfig;

const LN_EPS: f64 = 1e-5;
const HEAD_PARAMS: usize = 4;
const BLOCK_PARAMS: usize = 12;
const TAIL_PARAMS: usize = 4;

/// Gain over the variance-preserving uniform bound. At this value about
/// half a percent of the quantized-layer input columns of a trained toy
/// model exceed τ = 6 on clean images.
pub const INIT_GAIN: f32 = 1.3;

/// Bound of the uniform initializer for a layer with `fan_in` inputs.
pub fn init_bound(fan_in: usize) -> f32 {
    INIT_GAIN * (6.0 / fan_in as f32).sqrt()
}

/// Hidden states fed to the quantized layers during one forward pass, in
/// execution order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CaptureBuffer {
    pub entries: Vec<Capture>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Capture {
    pub layer_id: LayerId,
    /// `s x h` input of the layer; `(B·s) x h` for a batch.
    pub hidden: Tensor,
}

impl CaptureBuffer {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Result of [`VisionTransformer::forward`].
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `B x M`.
    pub logits: Tensor,
    pub captures: CaptureBuffer,
    pub traces: Vec<MatmulTrace>,
}

/// Graph nodes produced by [`VisionTransformer::forward_graph`].
#[derive(Clone, Debug)]
pub struct GraphForward {
    /// `B x M`.
    pub logits: Var,
    /// Inputs of the quantized layers, in execution order.
    pub captures: Vec<(LayerId, Var)>,
}

/// Model parameters bound into a graph, in canonical order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1_g: Tensor,
    ln1_b: Tensor,
    qkv: QuantLinearLayer,
    attn_out: QuantLinearLayer,
    ln2_g: Tensor,
    ln2_b: Tensor,
    mlp_in: QuantLinearLayer,
    mlp_out: QuantLinearLayer,
}

/// Pre-norm vision transformer whose block projections run through the
/// mixed-precision kernel.
#[derive(Clone, Debug)]
pub struct VisionTransformer {
    config: ViTConfig,
    patch_w: Tensor,
    patch_b: Tensor,
    cls: Tensor,
    pos: Tensor,
    blocks: Vec<Block>,
    lnf_g: Tensor,
    lnf_b: Tensor,
    head_w: Tensor,
    head_b: Tensor,
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::from_parts(shape, data)
}

fn bias(layer: &QuantLinearLayer) -> &Tensor {
    layer.bias().expect("block layers carry a bias")
}

fn linear(
    rng: &mut ChaCha8Rng,
    id: String,
    fan_in: usize,
    fan_out: usize,
) -> Result<QuantLinearLayer> {
    let w = uniform(rng, vec![fan_in, fan_out], init_bound(fan_in));
    QuantLinearLayer::new(id, w, Some(Tensor::zeros(vec![fan_out])))
}

impl VisionTransformer {
    /// Deterministic initialization: weight matrices uniform in
    /// `±init_bound(fan_in)`, biases zero, layer norms identity.
    pub fn init_random(config: &ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, m) = (config.hidden_dim, config.mlp_dim);
        let pd = config.patch_dim();
        let patch_w = uniform(&mut rng, vec![pd, h], init_bound(pd));
        let cls = uniform(&mut rng, vec![1, h], init_bound(h));
        let pos = uniform(&mut rng, vec![config.seq_len(), h], init_bound(h));
        let mut blocks = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            blocks.push(Block {
                ln1_g: Tensor::full(vec![h], 1.0),
                ln1_b: Tensor::zeros(vec![h]),
                qkv: linear(&mut rng, format!("block{l}.qkv"), h, 3 * h)?,
                attn_out: linear(&mut rng, format!("block{l}.attn_out"), h, h)?,
                ln2_g: Tensor::full(vec![h], 1.0),
                ln2_b: Tensor::zeros(vec![h]),
                mlp_in: linear(&mut rng, format!("block{l}.mlp_in"), h, m)?,
                mlp_out: linear(&mut rng, format!("block{l}.mlp_out"), m, h)?,
            });
        }
        let head_w = uniform(&mut rng, vec![h, config.num_classes], init_bound(h));
        Ok(Self {
            config: config.clone(),
            patch_w,
            patch_b: Tensor::zeros(vec![h]),
            cls,
            pos,
            blocks,
            lnf_g: Tensor::full(vec![h], 1.0),
            lnf_b: Tensor::zeros(vec![h]),
            head_w,
            head_b: Tensor::zeros(vec![config.num_classes]),
        })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    /// Changes the outlier threshold used by [`forward`](Self::forward).
    pub fn set_tau(&mut self, tau: f32) -> Result<()> {
        let config = ViTConfig { tau, ..self.config.clone() };
        config.validate()?;
        self.config = config;
        Ok(())
    }

    /// The quantized layers in execution order.
    pub fn quantized_layers(&self) -> Vec<&QuantLinearLayer> {
        self.blocks
            .iter()
            .flat_map(|b| [&b.qkv, &b.attn_out, &b.mlp_in, &b.mlp_out])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        HEAD_PARAMS + BLOCK_PARAMS * self.blocks.len() + TAIL_PARAMS
    }

    /// Parameter `i` in canonical order: patch weights, patch bias, class
    /// token, position embeddings; per block the two layer norms and four
    /// linear layers (weights then bias) in execution order; final layer
    /// norm; classifier weights and bias.
    pub fn param(&self, i: usize) -> &Tensor {
        let nb = self.blocks.len();
        match i {
            0 => &self.patch_w,
            1 => &self.patch_b,
            2 => &self.cls,
            3 => &self.pos,
            _ if i < HEAD_PARAMS + BLOCK_PARAMS * nb => {
                let j = i - HEAD_PARAMS;
                let b = &self.blocks[j / BLOCK_PARAMS];
                match j % BLOCK_PARAMS {
                    0 => &b.ln1_g,
                    1 => &b.ln1_b,
                    2 => b.qkv.weights(),
                    3 => bias(&b.qkv),
                    4 => b.attn_out.weights(),
                    5 => bias(&b.attn_out),
                    6 => &b.ln2_g,
                    7 => &b.ln2_b,
                    8 => b.mlp_in.weights(),
                    9 => bias(&b.mlp_in),
                    10 => b.mlp_out.weights(),
                    _ => bias(&b.mlp_out),
                }
            }
            _ => match i - HEAD_PARAMS - BLOCK_PARAMS * nb {
                0 => &self.lnf_g,
                1 => &self.lnf_b,
                2 => &self.head_w,
                3 => &self.head_b,
                _ => panic!("parameter index {i} out of range"),
            },
        }
    }

    /// Replaces parameter `i`, keeping the int8 weight caches in sync.
    pub fn set_param(&mut self, i: usize, value: Tensor) -> Result<()> {
        if value.shape() != self.param(i).shape() {
            return Err(shape_err!(
                "parameter {i}: shape {:?} does not match {:?}",
                value.shape(),
                self.param(i).shape()
            ));
        }
        let nb = self.blocks.len();
        match i {
            0 => self.patch_w = value,
            1 => self.patch_b = value,
            2 => self.cls = value,
            3 => self.pos = value,
            _ if i < HEAD_PARAMS + BLOCK_PARAMS * nb => {
                let j = i - HEAD_PARAMS;
                let b = &mut self.blocks[j / BLOCK_PARAMS];
                match j % BLOCK_PARAMS {
                    0 => b.ln1_g = value,
                    1 => b.ln1_b = value,
                    2 => b.qkv.set_weights(value)?,
                    3 => b.qkv.set_bias(value)?,
                    4 => b.attn_out.set_weights(value)?,
                    5 => b.attn_out.set_bias(value)?,
                    6 => b.ln2_g = value,
                    7 => b.ln2_b = value,
                    8 => b.mlp_in.set_weights(value)?,
                    9 => b.mlp_in.set_bias(value)?,
                    10 => b.mlp_out.set_weights(value)?,
                    _ => b.mlp_out.set_bias(value)?,
                }
            }
            _ => match i - HEAD_PARAMS - BLOCK_PARAMS * nb {
                0 => self.lnf_g = value,
                1 => self.lnf_b = value,
                2 => self.head_w = value,
                _ => self.head_b = value,
            },
        }
        Ok(())
    }

    /// Adds every parameter to `g`, as trainable leaves or as constants.
    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>, trainable: bool) -> BoundParams {
        let vars = (0..self.num_params())
            .map(|i| {
                let t = self.param(i).cast::<T>();
                if trainable {
                    g.param(t)
                } else {
                    g.constant(t)
                }
            })
            .collect();
        BoundParams { vars }
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        if shape != self.config.image_shape() {
            return Err(shape_err!(
                "image shape {:?} does not match model input {:?}",
                shape,
                self.config.image_shape()
            ));
        }
        Ok(())
    }

    /// Builds the forward pass for a batch of `C x H x W` image nodes.
    ///
    /// The images are stacked into one `(B·s) x h` token matrix so each
    /// quantized layer runs a single matmul per batch; attention is computed
    /// per image on its own rows.
    pub fn forward_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &BoundParams,
        images: &[Var],
        exec: LinearExec,
    ) -> Result<GraphForward> {
        if images.is_empty() {
            return Err(shape_err!("forward needs at least one image"));
        }
        let c = &self.config;
        let p = |i: usize| params.vars[i];
        let (s, h) = (c.seq_len(), c.hidden_dim);
        let eps = T::from_f64(LN_EPS);

        let mut tokens = Vec::with_capacity(images.len());
        for &img in images {
            self.check_image(g.value(img).shape())?;
            let patches = g.patches(img, c.patch_size)?;
            let emb = g.matmul(patches, p(0))?;
            let emb = g.add_row(emb, p(1))?;
            let seq = g.concat(&[p(2), emb], 0)?;
            tokens.push(g.add(seq, p(3))?);
        }
        let mut x = g.concat(&tokens, 0)?;

        let mut captures = Vec::with_capacity(c.quantized_layers());
        for (l, block) in self.blocks.iter().enumerate() {
            let base = HEAD_PARAMS + BLOCK_PARAMS * l;
            let bp = |j: usize| params.vars[base + j];

            let xn = g.layer_norm(x, bp(0), bp(1), eps)?;
            captures.push((block.qkv.id().clone(), xn));
            let qkv = g.quant_linear(xn, bp(2), Some(bp(3)), &block.qkv, exec)?;
            let ctx = self.attention(g, qkv, images.len())?;
            captures.push((block.attn_out.id().clone(), ctx));
            let attn = g.quant_linear(ctx, bp(4), Some(bp(5)), &block.attn_out, exec)?;
            x = g.add(x, attn)?;

            let xn = g.layer_norm(x, bp(6), bp(7), eps)?;
            captures.push((block.mlp_in.id().clone(), xn));
            let hid = g.quant_linear(xn, bp(8), Some(bp(9)), &block.mlp_in, exec)?;
            let hid = g.gelu(hid);
            captures.push((block.mlp_out.id().clone(), hid));
            let out = g.quant_linear(hid, bp(10), Some(bp(11)), &block.mlp_out, exec)?;
            x = g.add(x, out)?;
        }

        let tail = HEAD_PARAMS + BLOCK_PARAMS * self.blocks.len();
        let xn = g.layer_norm(x, p(tail), p(tail + 1), eps)?;
        let cls_rows = (0..images.len())
            .map(|b| g.narrow(xn, 0, b * s, 1))
            .collect::<Result<Vec<_>>>()?;
        let cls = g.concat(&cls_rows, 0)?;
        let logits = g.matmul(cls, p(tail + 2))?;
        let logits = g.add_row(logits, p(tail + 3))?;
        debug_assert_eq!(g.value(x).shape(), [images.len() * s, h]);
        Ok(GraphForward { logits, captures })
    }

    /// Multi-head self-attention on the fused `(B·s) x 3h` projection.
    fn attention<T: Scalar>(&self, g: &mut Graph<T>, qkv: Var, batch: usize) -> Result<Var> {
        let c = &self.config;
        let (s, h, d) = (c.seq_len(), c.hidden_dim, c.head_dim());
        let scale = T::from_f64(1.0 / (d as f64).sqrt());
        let mut per_image = Vec::with_capacity(batch);
        for b in 0..batch {
            let rows = g.narrow(qkv, 0, b * s, s)?;
            let mut heads = Vec::with_capacity(c.num_heads);
            for head in 0..c.num_heads {
                let q = g.narrow(rows, 1, head * d, d)?;
                let k = g.narrow(rows, 1, h + head * d, d)?;
                let v = g.narrow(rows, 1, 2 * h + head * d, d)?;
                let kt = g.transpose(k)?;
                let scores = g.matmul(q, kt)?;
                let scores = g.scale(scores, scale);
                let weights = g.softmax(scores)?;
                heads.push(g.matmul(weights, v)?);
            }
            per_image.push(g.concat(&heads, 1)?);
        }
        g.concat(&per_image, 0)
    }

    fn split_images(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        if images.rank() != 4 {
            return Err(shape_err!("expected B x C x H x W images, got {:?}", images.shape()));
        }
        self.check_image(&images.shape()[1..])?;
        let n: usize = images.shape()[1..].iter().product();
        Ok(images
            .data()
            .chunks_exact(n)
            .map(|chunk| Tensor::from_parts(images.shape()[1..].to_vec(), chunk.to_vec()))
            .collect())
    }

    /// Inference on a `B x C x H x W` batch with the mixed-precision kernel
    /// at the configured τ.
    pub fn forward(&self, images: &Tensor, capture: bool, policy: OutlierPolicy) -> Result<ForwardOutput> {
        let settings = QuantSettings::new(self.config.tau)?.with_policy(policy);
        self.forward_with(images, capture, LinearExec::Mixed(settings))
    }

    /// Inference with an explicit execution mode for the quantized layers.
    pub fn forward_with(&self, images: &Tensor, capture: bool, exec: LinearExec) -> Result<ForwardOutput> {
        let imgs = self.split_images(images)?;
        let mut g = Graph::<f32>::new();
        let params = self.bind(&mut g, false);
        let vars: Vec<Var> = imgs.into_iter().map(|t| g.constant(t)).collect();
        let out = self.forward_graph(&mut g, &params, &vars, exec)?;
        let captures = if capture {
            CaptureBuffer {
                entries: out
                    .captures
                    .iter()
                    .map(|(id, v)| Capture {
                        layer_id: id.clone(),
                        hidden: g.value(*v).clone(),
                    })
                    .collect(),
            }
        } else {
            CaptureBuffer::default()
        };
        let logits = g.value(out.logits).clone();
        Ok(ForwardOutput {
            logits,
            captures,
            traces: g.take_traces(),
        })
    }

    /// Predicted class of every image in the batch.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        let out = self.forward(images, false, OutlierPolicy::Unlimited)?;
        Ok(predictions(&out.logits))
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Row-wise [`argmax`] of a `B x M` logit matrix.
pub fn predictions(logits: &Tensor) -> Vec<usize> {
    let m = logits.shape().last().copied().unwrap_or(1).max(1);
    logits.data().chunks_exact(m).map(argmax).collect()
}
