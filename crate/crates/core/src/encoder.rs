//! Small convolutional image encoder: three 5x5 stride-2 conv layers with
//! relu give the feature map, a linear layer on the flattened map gives the
//! global image code.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{invalid, Result};
use crate::params::{Bound, ParamStore};
use crate::rng::Rng;

pub const KERNEL: usize = 5;
pub const STRIDE: usize = 2;
pub const PADDING: usize = 2;
pub const CHANNELS: [usize; 4] = [3, 16, 32, 32];
/// Channels of the feature map, i.e. the region descriptor width.
pub const FEATURE_CHANNELS: usize = CHANNELS[3];
/// Total downsampling of the conv stack.
pub const DOWNSAMPLE: usize = 8;
/// Receptive-field center of feature cell `i` along an axis, in cell
/// units: `i + CELL_CENTER`. Each layer's padding centers output `a` on input
/// `STRIDE * a`, so the center lands half an input pixel past the cell origin.
pub const CELL_CENTER: f64 = 0.5 / DOWNSAMPLE as f64;

/// Parameter prefix of the main encoder.
pub const MAIN: &str = "enc";
/// Parameter prefix of the high-resolution conv stack.
pub const HIRES: &str = "hires";

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    /// Global image code, length `d_image`.
    pub phi: Tensor,
    /// Feature map `[H, W, c]`.
    pub gamma: Tensor,
    /// Feature map of the 2x render, when the high-resolution stack exists.
    pub gamma_hires: Option<Tensor>,
}

fn conv_name(prefix: &str, layer: usize, part: &str) -> String {
    format!("{prefix}.conv{layer}.{part}")
}

/// Adds the conv stack `prefix.conv{1,2,3}.{w,b}`.
pub fn init_conv_stack(params: &mut ParamStore, prefix: &str, rng: &mut Rng) {
    for layer in 1..=3 {
        let (cin, cout) = (CHANNELS[layer - 1], CHANNELS[layer]);
        let k2 = KERNEL * KERNEL;
        params.insert_glorot(
            &conv_name(prefix, layer, "w"),
            &[KERNEL, KERNEL, cin, cout],
            k2 * cin,
            k2 * cout,
            rng,
        );
        params.insert_zeros(&conv_name(prefix, layer, "b"), &[cout]);
    }
}

/// Adds the main encoder for square inputs of side `input_size`: conv stack
/// plus the linear map to a `d_image` code.
pub fn init_encoder(
    params: &mut ParamStore,
    input_size: usize,
    d_image: usize,
    rng: &mut Rng,
) -> Result<()> {
    if input_size == 0 || !input_size.is_multiple_of(DOWNSAMPLE) {
        return Err(invalid(format!(
            "input size {input_size} must be a positive multiple of {DOWNSAMPLE}"
        )));
    }
    init_conv_stack(params, MAIN, rng);
    let side = input_size / DOWNSAMPLE;
    let flat = side * side * FEATURE_CHANNELS;
    params.insert_glorot(
        &format!("{MAIN}.fc.w"),
        &[d_image, flat],
        flat,
        d_image,
        rng,
    );
    params.insert_zeros(&format!("{MAIN}.fc.b"), &[d_image]);
    Ok(())
}

pub fn is_encoder_param(name: &str) -> bool {
    name.starts_with("enc.") || name.starts_with("hires.")
}

/// Feature map of `image` `[H, W, 3]` through the conv stack `prefix`.
pub fn conv_stack(tape: &mut Tape, bound: &Bound, prefix: &str, image: Var) -> Result<Var> {
    let shape = tape.shape(image);
    if shape.len() != 3 || shape[2] != CHANNELS[0] {
        return Err(invalid(format!(
            "encoder expects an [H, W, 3] image, got {shape:?}"
        )));
    }
    let mut x = image;
    for layer in 1..=3 {
        let w = bound.var(&conv_name(prefix, layer, "w"))?;
        let b = bound.var(&conv_name(prefix, layer, "b"))?;
        let conv = tape.conv2d(x, w, STRIDE, PADDING)?;
        let biased = tape.add_bias(conv, b)?;
        x = tape.relu(biased)?;
    }
    Ok(x)
}

/// Global image code from the main feature map.
pub fn image_code(tape: &mut Tape, bound: &Bound, gamma: Var) -> Result<Var> {
    let n = tape.value(gamma).len();
    let flat = tape.reshape(gamma, &[n])?;
    let w = bound.var(&format!("{MAIN}.fc.w"))?;
    let b = bound.var(&format!("{MAIN}.fc.b"))?;
    let wx = tape.matmul(w, flat)?;
    tape.add_bias(wx, b)
}

/// Conv stack applied to the 2x render: the dedicated high-resolution stack
/// when `params` has one, the main stack otherwise.
pub fn hires_prefix(params: &ParamStore) -> &'static str {
    if params.contains(&conv_name(HIRES, 1, "w")) {
        HIRES
    } else {
        MAIN
    }
}

/// Forward pass outside of training.
pub fn encode(
    image: &Tensor,
    hires_image: Option<&Tensor>,
    params: &ParamStore,
) -> Result<EncoderOutput> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 || s[0] != s[1] || !s[0].is_multiple_of(DOWNSAMPLE) {
        return Err(invalid(format!(
            "encode expects a square [S, S, 3] image, got {s:?}"
        )));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, |_| false);
    let x = tape.constant(image.clone());
    let gamma = conv_stack(&mut tape, &bound, MAIN, x)?;
    let phi = image_code(&mut tape, &bound, gamma)?;
    let gamma_hires = match hires_image {
        Some(img) => {
            let x = tape.constant(img.clone());
            let g = conv_stack(&mut tape, &bound, hires_prefix(params), x)?;
            Some(tape.value(g).clone())
        }
        None => None,
    };
    Ok(EncoderOutput {
        phi: tape.value(phi).clone(),
        gamma: tape.value(gamma).clone(),
        gamma_hires,
    })
}

/// Flat cell indices kept by stride subsampling of an `h x w` grid.
pub fn grid_indices(h: usize, w: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 || stride > h || stride > w {
        return Err(invalid(format!(
            "grid stride {stride} invalid for a {h}x{w} map"
        )));
    }
    Ok((0..h)
        .step_by(stride)
        .flat_map(|i| (0..w).step_by(stride).map(move |j| i * w + j))
        .collect())
}

/// Keeps cells `0, stride, 2 stride, ...` along both axes.
pub fn subsample_grid(gamma: &Tensor, stride: usize) -> Result<Tensor> {
    let s = gamma.shape();
    if s.len() != 3 {
        return Err(invalid(format!("expected an [H, W, c] map, got {s:?}")));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let idx = grid_indices(h, w, stride)?;
    let mut data = Vec::with_capacity(idx.len() * c);
    for i in &idx {
        data.extend_from_slice(&gamma.data()[i * c..(i + 1) * c]);
    }
    Tensor::new(&[h.div_ceil(stride), w.div_ceil(stride), c], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn shapes_for_64px_input() {
        let mut p = ParamStore::new();
        init_encoder(&mut p, 64, 64, &mut substream(1, "init")).unwrap();
        let img = Tensor::filled(&[64, 64, 3], 0.5);
        let out = encode(&img, None, &p).unwrap();
        assert_eq!(out.gamma.shape(), &[8, 8, 32]);
        assert_eq!(out.phi.shape(), &[64]);
        assert!(out.gamma_hires.is_none());
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let mut p = ParamStore::new();
        init_encoder(&mut p, 64, 64, &mut substream(1, "init")).unwrap();
        assert!(encode(&Tensor::zeros(&[64, 64, 1]), None, &p).is_err());
        assert!(encode(&Tensor::zeros(&[32, 32, 3]), None, &p).is_err());
    }

    #[test]
    fn grid_subsampling() {
        let g = Tensor::new(&[14, 14, 1], (0..196).map(f64::from).collect()).unwrap();
        assert_eq!(subsample_grid(&g, 2).unwrap().shape(), &[7, 7, 1]);
        assert_eq!(subsample_grid(&g, 1).unwrap(), g);
        let g8 = Tensor::zeros(&[8, 8, 2]);
        assert_eq!(subsample_grid(&g8, 2).unwrap().shape(), &[4, 4, 2]);
        assert_eq!(subsample_grid(&g8, 8).unwrap().shape(), &[1, 1, 2]);
        assert!(subsample_grid(&g8, 9).is_err());
        let s = subsample_grid(&g, 2).unwrap();
        assert_eq!(s.at(&[1, 3, 0]), g.at(&[2, 6, 0]));
    }
}
