//! Convolutional stem producing the shared feature tensor.
//!
//! Every stage is a 3x3 convolution followed by batch norm and ReLU. The
//! first `log2(downsample)` stages use stride 2.

use crate::autograd::Var;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{Init, ParamStore, Session};

pub fn stage_widths(cfg: &ModelConfig) -> Vec<usize> {
    let mut w = cfg.stem_channels.clone();
    w.push(cfg.feature_channels);
    w
}

pub fn init(cfg: &ModelConfig, store: &mut ParamStore, init: &mut Init) {
    let mut in_c = 3;
    for (i, &out_c) in stage_widths(cfg).iter().enumerate() {
        init.conv(store, &format!("stem.s{i}.conv"), out_c, in_c, 3, 2.0);
        init.bn(store, &format!("stem.s{i}.bn"), out_c);
        in_c = out_c;
    }
}

/// `[N, 3, H_img, W_img] -> [N, C_f, H_f, W_f]`.
pub fn forward(cfg: &ModelConfig, s: &mut Session<'_>, images: Var) -> Result<Var> {
    let shape = s.tape.shape(images).to_vec();
    let expected = [3, cfg.image_height, cfg.image_width];
    if shape.len() != 4 || shape[1..] != expected {
        return Err(Error::Shape {
            op: "stem_forward",
            detail: format!("expected [N, 3, {}, {}], got {shape:?}", cfg.image_height, cfg.image_width),
        });
    }
    let strided = cfg.stride2_stages();
    let mut x = images;
    for i in 0..stage_widths(cfg).len() {
        let stride = if i < strided { 2 } else { 1 };
        x = s.conv_bn_relu(x, &format!("stem.s{i}"), stride, 1)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Mode, ParamGroup};
    use crate::tensor::Tensor;

    #[test]
    fn desk_stem_output_shape() {
        let cfg = ModelConfig::desk();
        let mut store = ParamStore::new();
        init(&cfg, &mut store, &mut Init::new(1));
        let mut s = Session::new(&mut store, Mode::Train, &[]);
        let img = s.input(Tensor::zeros(&[2, 3, 96, 48]));
        let t = forward(&cfg, &mut s, img).unwrap();
        assert_eq!(s.tape.shape(t), &[2, 128, 24, 12]);
        assert!(s.tape.value(t).is_finite());
    }

    #[test]
    fn wrong_image_shape() {
        let cfg = ModelConfig::desk();
        let mut store = ParamStore::new();
        init(&cfg, &mut store, &mut Init::new(1));
        let mut s = Session::new(&mut store, Mode::Eval, &[ParamGroup::Stem]);
        let img = s.input(Tensor::zeros(&[1, 3, 48, 96]));
        assert!(forward(&cfg, &mut s, img).is_err());
    }

    #[test]
    fn seeds_give_distinct_parameters() {
        let cfg = ModelConfig::desk();
        let (mut a, mut b) = (ParamStore::new(), ParamStore::new());
        init(&cfg, &mut a, &mut Init::new(1));
        init(&cfg, &mut b, &mut Init::new(2));
        assert_ne!(a.get("stem.s0.conv.weight"), b.get("stem.s0.conv.weight"));
    }
}
