//! Gated-convolution decoder: fuses the n-layer feature pyramid into one
//! full-resolution image with a single gated convolution per layer, a
//! learned 1x1 self-bypass, and bilinear upsampling between levels.

use crate::error::{Error, Result};
use crate::raster::ImagePyramid;
use crate::tensor::ops::{
    conv2d, conv2d_backward, elu, elu_grad_from_output, sigmoid, sigmoid_grad_from_output,
    upsample2x, upsample2x_backward,
};
use crate::tensor::scalar::{sc, Scalar};
use crate::tensor::store::ParameterStore;
use crate::tensor::Tensor;
use rand::Rng;

pub const HIDDEN: usize = 32;
pub const KERNEL: usize = 3;

#[derive(Clone, Copy, Debug)]
pub struct DecoderConfig {
    pub n_layers: usize,
    /// Channels delivered by the rasterizer per level (features + opacity).
    pub raster_channels: usize,
    /// 27 when the spherical-harmonics module is enabled, 3 otherwise.
    pub out_channels: usize,
}

impl DecoderConfig {
    pub fn block_in_channels(&self, level: usize) -> usize {
        if level == self.n_layers - 1 {
            self.raster_channels
        } else {
            self.raster_channels + HIDDEN
        }
    }
}

fn name(level: usize, part: &str) -> String {
    format!("decoder.block{level}.{part}")
}

/// Register all decoder weights: Kaiming-uniform kernels, zero biases, gate
/// biases +1 so gates start mostly open.
pub fn register_params<S: Scalar>(
    store: &mut ParameterStore<S>,
    cfg: &DecoderConfig,
    lr: f64,
    rng: &mut impl Rng,
) {
    let kaiming = |shape: Vec<usize>, fan_in: usize, rng: &mut dyn rand::RngCore| {
        let bound = (6.0 / fan_in as f64).sqrt();
        Tensor::from_fn(shape, |_| sc::<S>(rng.gen_range(-bound..bound)))
    };
    for level in 0..cfg.n_layers {
        let c_in = cfg.block_in_channels(level);
        let fan = c_in * KERNEL * KERNEL;
        store.register(
            &name(level, "feature.kernel"),
            kaiming(vec![HIDDEN, c_in, KERNEL, KERNEL], fan, rng),
            lr,
        );
        store.register(&name(level, "feature.bias"), Tensor::zeros(vec![HIDDEN]), lr);
        store.register(
            &name(level, "gate.kernel"),
            kaiming(vec![HIDDEN, c_in, KERNEL, KERNEL], fan, rng),
            lr,
        );
        store.register(
            &name(level, "gate.bias"),
            Tensor::full(vec![HIDDEN], S::one()),
            lr,
        );
        store.register(
            &name(level, "bypass.kernel"),
            kaiming(vec![HIDDEN, c_in, 1, 1], c_in, rng),
            lr,
        );
    }
    store.register(
        "decoder.output.kernel",
        kaiming(vec![cfg.out_channels, HIDDEN, 1, 1], HIDDEN, rng),
        lr,
    );
    store.register("decoder.output.bias", Tensor::zeros(vec![cfg.out_channels]), lr);
}

/// Total number of decoder parameters for a configuration.
pub fn param_count(cfg: &DecoderConfig) -> usize {
    let mut total = 0;
    for level in 0..cfg.n_layers {
        let c_in = cfg.block_in_channels(level);
        total += 2 * (HIDDEN * c_in * KERNEL * KERNEL + HIDDEN); // feature + gate
        total += HIDDEN * c_in; // bypass
    }
    total + cfg.out_channels * HIDDEN + cfg.out_channels
}

/// Borrowed weights of one gated convolution block.
pub struct BlockWeights<'a, S> {
    pub feature_kernel: &'a Tensor<S>,
    pub feature_bias: &'a Tensor<S>,
    pub gate_kernel: &'a Tensor<S>,
    pub gate_bias: &'a Tensor<S>,
    pub bypass_kernel: &'a Tensor<S>,
}

impl<'a, S: Scalar> BlockWeights<'a, S> {
    pub fn from_store(store: &'a ParameterStore<S>, level: usize) -> Self {
        BlockWeights {
            feature_kernel: store.value(&name(level, "feature.kernel")),
            feature_bias: store.value(&name(level, "feature.bias")),
            gate_kernel: store.value(&name(level, "gate.kernel")),
            gate_bias: store.value(&name(level, "gate.bias")),
            bypass_kernel: store.value(&name(level, "bypass.kernel")),
        }
    }
}

/// Intermediates of one block forward, kept for the backward pass.
pub struct BlockSaved<S> {
    pub input: Tensor<S>,
    /// ELU(conv_f(x)), post-activation.
    pub f_post: Tensor<S>,
    /// sigmoid(conv_g(x)), post-activation.
    pub g_post: Tensor<S>,
}

/// out = ELU(conv_f(x)) * sigmoid(conv_g(x)) + bypass(x)
pub fn gated_conv_block<S: Scalar>(
    input: &Tensor<S>,
    w: &BlockWeights<'_, S>,
) -> Result<(Tensor<S>, BlockSaved<S>)> {
    let mut f = conv2d(input, w.feature_kernel, Some(w.feature_bias))?;
    for v in f.data_mut() {
        *v = elu(*v);
    }
    let mut g = conv2d(input, w.gate_kernel, Some(w.gate_bias))?;
    for v in g.data_mut() {
        *v = sigmoid(*v);
    }
    let mut out = conv2d(input, w.bypass_kernel, None)?;
    for ((o, fv), gv) in out.data_mut().iter_mut().zip(f.data()).zip(g.data()) {
        *o = *o + *fv * *gv;
    }
    Ok((
        out,
        BlockSaved {
            input: input.clone(),
            f_post: f,
            g_post: g,
        },
    ))
}

/// Gradients of one block: returns grad wrt the input, plus named weight
/// gradients.
pub fn gated_conv_block_backward<S: Scalar>(
    saved: &BlockSaved<S>,
    w: &BlockWeights<'_, S>,
    grad_out: &Tensor<S>,
) -> Result<(Tensor<S>, Vec<(&'static str, Tensor<S>)>)> {
    let mut df_pre = Tensor::zeros(saved.f_post.shape().to_vec());
    let mut dg_pre = Tensor::zeros(saved.g_post.shape().to_vec());
    for i in 0..grad_out.len() {
        let go = grad_out.data()[i];
        let f = saved.f_post.data()[i];
        let g = saved.g_post.data()[i];
        df_pre.data_mut()[i] = go * g * elu_grad_from_output(f);
        dg_pre.data_mut()[i] = go * f * sigmoid_grad_from_output(g);
    }
    let (dx_f, dk_f, db_f) = conv2d_backward(&saved.input, w.feature_kernel, &df_pre)?;
    let (dx_g, dk_g, db_g) = conv2d_backward(&saved.input, w.gate_kernel, &dg_pre)?;
    let (dx_b, dk_b, _) = conv2d_backward(&saved.input, w.bypass_kernel, grad_out)?;
    let mut dx = dx_f;
    for ((a, b), c) in dx.data_mut().iter_mut().zip(dx_g.data()).zip(dx_b.data()) {
        *a = *a + *b + *c;
    }
    Ok((
        dx,
        vec![
            ("feature.kernel", dk_f),
            ("feature.bias", db_f),
            ("gate.kernel", dk_g),
            ("gate.bias", db_g),
            ("bypass.kernel", dk_b),
        ],
    ))
}

pub struct DecodeSaved<S> {
    pub blocks: Vec<BlockSaved<S>>,
    /// Output of block 0 (input to the final 1x1 projection).
    pub head_input: Tensor<S>,
    pub layer_dims: Vec<(usize, usize)>,
}

fn pyramid_layer_tensor<S: Scalar>(pyr: &ImagePyramid<S>, l: usize) -> Tensor<S> {
    let layer = &pyr.layers[l];
    Tensor::new(vec![layer.channels, layer.h, layer.w], layer.data.clone())
        .expect("layer data consistent")
}

fn concat_channels<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (ca, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let cb = b.shape()[0];
    let mut data = Vec::with_capacity((ca + cb) * h * w);
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(vec![ca + cb, h, w], data).expect("concat shapes")
}

fn crop_spatial<S: Scalar>(t: &Tensor<S>, h: usize, w: usize) -> Tensor<S> {
    let (c, th, tw) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    debug_assert!(th >= h && tw >= w);
    let mut out = Tensor::zeros(vec![c, h, w]);
    for ci in 0..c {
        for y in 0..h {
            let src = (ci * th + y) * tw;
            let dst = (ci * h + y) * w;
            out.data_mut()[dst..dst + w].copy_from_slice(&t.data()[src..src + w]);
        }
    }
    out
}

fn pad_spatial<S: Scalar>(t: &Tensor<S>, h: usize, w: usize) -> Tensor<S> {
    let (c, th, tw) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    debug_assert!(th <= h && tw <= w);
    let mut out = Tensor::zeros(vec![c, h, w]);
    for ci in 0..c {
        for y in 0..th {
            let src = (ci * th + y) * tw;
            let dst = (ci * h + y) * w;
            out.data_mut()[dst..dst + tw].copy_from_slice(&t.data()[src..src + tw]);
        }
    }
    out
}

/// Decode the pyramid coarsest-to-finest and project to the output channels.
pub fn decode_pyramid<S: Scalar>(
    store: &ParameterStore<S>,
    cfg: &DecoderConfig,
    pyramid: &ImagePyramid<S>,
) -> Result<(Tensor<S>, DecodeSaved<S>)> {
    if pyramid.layers.len() != cfg.n_layers {
        return Err(Error::shape(
            "decode_pyramid layers",
            0,
            cfg.n_layers,
            pyramid.layers.len(),
        ));
    }
    let layer_dims: Vec<(usize, usize)> = pyramid.layers.iter().map(|l| (l.h, l.w)).collect();
    let mut blocks: Vec<BlockSaved<S>> = (0..cfg.n_layers)
        .map(|_| BlockSaved {
            input: Tensor::zeros(vec![1]),
            f_post: Tensor::zeros(vec![1]),
            g_post: Tensor::zeros(vec![1]),
        })
        .collect();

    let coarsest = cfg.n_layers - 1;
    let x = pyramid_layer_tensor(pyramid, coarsest);
    let (mut out, saved) = gated_conv_block(&x, &BlockWeights::from_store(store, coarsest))?;
    blocks[coarsest] = saved;
    for l in (0..coarsest).rev() {
        let up = upsample2x(&out)?;
        let (h, w) = layer_dims[l];
        let up = if up.shape()[1] != h || up.shape()[2] != w {
            crop_spatial(&up, h, w)
        } else {
            up
        };
        let x = concat_channels(&pyramid_layer_tensor(pyramid, l), &up);
        let (o, saved) = gated_conv_block(&x, &BlockWeights::from_store(store, l))?;
        blocks[l] = saved;
        out = o;
    }
    let head_input = out;
    let result = conv2d(
        &head_input,
        store.value("decoder.output.kernel"),
        Some(store.value("decoder.output.bias")),
    )?;
    Ok((
        result,
        DecodeSaved {
            blocks,
            head_input,
            layer_dims,
        },
    ))
}

/// Backward through the decoder. Returns named weight gradients and the
/// gradient with respect to every pyramid layer.
pub fn decode_backward<S: Scalar>(
    store: &ParameterStore<S>,
    cfg: &DecoderConfig,
    saved: &DecodeSaved<S>,
    grad_out: &Tensor<S>,
) -> Result<(Vec<(String, Tensor<S>)>, Vec<Tensor<S>>)> {
    let mut weight_grads: Vec<(String, Tensor<S>)> = Vec::new();
    let (mut d_block_out, dk_out, db_out) = conv2d_backward(
        &saved.head_input,
        store.value("decoder.output.kernel"),
        grad_out,
    )?;
    weight_grads.push(("decoder.output.kernel".to_string(), dk_out));
    weight_grads.push(("decoder.output.bias".to_string(), db_out));

    let rc = cfg.raster_channels;
    let mut pyramid_grads: Vec<Tensor<S>> = saved
        .layer_dims
        .iter()
        .map(|&(h, w)| Tensor::zeros(vec![rc, h, w]))
        .collect();

    for l in 0..cfg.n_layers {
        let w = BlockWeights::from_store(store, l);
        let (dx, grads) = gated_conv_block_backward(&saved.blocks[l], &w, &d_block_out)?;
        for (part, g) in grads {
            weight_grads.push((name(l, part), g));
        }
        let (h, wd) = saved.layer_dims[l];
        // split dx into the raster channels and (except at the coarsest
        // level) the upsampled-carry channels
        let plane = h * wd;
        pyramid_grads[l]
            .data_mut()
            .copy_from_slice(&dx.data()[..rc * plane]);
        if l == cfg.n_layers - 1 {
            break;
        }
        let d_up = Tensor::new(vec![HIDDEN, h, wd], dx.data()[rc * plane..].to_vec())?;
        let (ph, pw) = saved.layer_dims[l + 1];
        let d_up_full = if d_up.shape()[1] != 2 * ph || d_up.shape()[2] != 2 * pw {
            pad_spatial(&d_up, 2 * ph, 2 * pw)
        } else {
            d_up
        };
        d_block_out = upsample2x_backward(&d_up_full, ph, pw)?;
    }
    Ok((weight_grads, pyramid_grads))
}
