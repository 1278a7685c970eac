//! Attribute branch: attention block, attention refinement, LSTM sweep over
//! the attributes and one classifier head per attribute.
//!
//! Shapes use `N` for the batch, `C` for the attribute count, `k = H_f * W_f`
//! for the feature-grid area and `d` for the LSTM hidden width.
//!
//! Parameter names (all under `att.`):
//!
//! | name                         | shape            |
//! |------------------------------|------------------|
//! | `att.block.c1.{conv,bn}`     | `[a1, C_f, 1, 1]`|
//! | `att.block.c2.{conv,bn}`     | `[a2, a1, 3, 3]` |
//! | `att.block.c3`               | `[C, a2, 1, 1]` + bias |
//! | `att.transfer`               | `[d, C_f, 1, 1]` + bias |
//! | `att.wh.weight`              | `[k, k]`         |
//! | `att.wg.weight`              | `[k, d]`         |
//! | `att.lstm`                   | `[4d, 2d]` + bias, gate rows `i, f, o, g` |
//! | `att.head{l}`                | `[m_l, d]` + bias |

use crate::autograd::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{Init, ParamStore, Session};
use crate::schema::AttributeSchema;
use crate::tensor::Tensor;

/// Initial value of the forget-gate bias.
pub const FORGET_BIAS: f64 = 1.0;
/// Standard deviation of the initial `W_g`.
pub const WG_INIT_STD: f64 = 0.01;
/// Standard deviation of the initial map-producing convolution; small so
/// that untrained attention starts close to uniform.
pub const MAP_INIT_STD: f64 = 0.01;

pub fn init(cfg: &ModelConfig, schema: &AttributeSchema, store: &mut ParamStore, init: &mut Init) {
    let (a1, a2) = (cfg.attention_channels[0], cfg.attention_channels[1]);
    let (cf, d, k) = (cfg.feature_channels, cfg.hidden_dim, cfg.feature_area());
    init.conv(store, "att.block.c1.conv", a1, cf, 1, 2.0);
    init.bn(store, "att.block.c1.bn", a1);
    init.conv(store, "att.block.c2.conv", a2, a1, 3, 2.0);
    init.bn(store, "att.block.c2.bn", a2);
    store.insert("att.block.c3.weight", init.normal(&[schema.len(), a2, 1, 1], MAP_INIT_STD));
    store.insert("att.block.c3.bias", Tensor::zeros(&[schema.len()]));
    init.conv(store, "att.transfer", d, cf, 1, 1.0);
    store.insert("att.transfer.bias", Tensor::zeros(&[d]));

    let mut wh = Tensor::zeros(&[k, k]);
    for i in 0..k {
        wh.data_mut()[i * k + i] = 1.0;
    }
    store.insert("att.wh.weight", wh);
    store.insert("att.wg.weight", init.normal(&[k, d], WG_INIT_STD));

    init.linear(store, "att.lstm", 4 * d, 2 * d, cfg.lstm_bias);
    if cfg.lstm_bias {
        let b = store.get_mut("att.lstm.bias").expect("just inserted");
        b.data_mut()[d..2 * d].fill(FORGET_BIAS);
    }
    for (l, a) in schema.attributes().iter().enumerate() {
        init.linear(store, &head_name(l), a.classes, d, true);
    }
}

pub fn head_name(label_index: usize) -> String {
    format!("att.head{label_index}")
}

/// `T [N, C_f, H, W] -> A [N, C, H, W]`: two conv+BN+ReLU layers and a
/// linear 1x1 conv with one output map per attribute.
pub fn attention_block(s: &mut Session<'_>, t: Var, num_attributes: usize) -> Result<Var> {
    let out = s.store().param("att.block.c3.weight")?.shape()[0];
    if out != num_attributes {
        return Err(Error::Config(format!(
            "attention block produces {out} maps but the schema has {num_attributes} attributes"
        )));
    }
    let x = s.conv_bn_relu(t, "att.block.c1", 1, 0)?;
    let x = s.conv_bn_relu(x, "att.block.c2", 1, 1)?;
    s.conv(x, "att.block.c3", 1, 0)
}

/// `T [N, C_f, H, W] -> X_f [N, d, H, W]` by a 1x1 conv.
pub fn transfer_features(s: &mut Session<'_>, t: Var) -> Result<Var> {
    s.conv(t, "att.transfer", 1, 0)
}

/// Unnormalised and normalised attention for one step:
///
/// ```text
/// U = W_h tanh(a + W_g h_prev)      a, U, Z: [N, k]
/// Z = softmax(U) over the k positions
/// ```
pub fn refine_attention(tape: &mut Tape, a: Var, h_prev: Var, wh: Var, wg: Var) -> Result<(Var, Var)> {
    let (wh_s, wg_s) = (tape.shape(wh).to_vec(), tape.shape(wg).to_vec());
    let (a_s, h_s) = (tape.shape(a).to_vec(), tape.shape(h_prev).to_vec());
    if a_s.len() != 2 || h_s.len() != 2 || a_s[0] != h_s[0] {
        return Err(Error::Shape {
            op: "refine_attention",
            detail: format!("a {a_s:?} and h {h_s:?} must both be [N, _]"),
        });
    }
    let k = a_s[1];
    if wh_s.len() != 2 || wh_s[0] != wh_s[1] || wh_s[1] != k {
        return Err(Error::dim("refine_attention", "W_h columns (k)", k, wh_s[1]));
    }
    if wg_s[0] != k {
        return Err(Error::dim("refine_attention", "W_g rows (k)", k, wg_s[0]));
    }
    if wg_s[1] != h_s[1] {
        return Err(Error::dim("refine_attention", "hidden width (d)", wg_s[1], h_s[1]));
    }
    let gh = tape.linear(h_prev, wg, None)?;
    let pre = tape.add(a, gh)?;
    let act = tape.tanh(pre);
    let u = tape.linear(act, wh, None)?;
    let z = tape.softmax(u);
    Ok((u, z))
}

/// `x = sum over positions of Z * X_f`: `X_f [N, d, H, W]`, `Z [N, H*W]` -> `[N, d]`.
pub fn attend(tape: &mut Tape, xf: Var, z: Var) -> Result<Var> {
    let xs = tape.shape(xf).to_vec();
    if xs.len() != 4 {
        return Err(Error::Shape {
            op: "attend",
            detail: format!("features must be [N, d, H, W], got {xs:?}"),
        });
    }
    let map = tape.reshape(z, &[xs[0], 1, xs[2], xs[3]])?;
    let masked = tape.mul_map(map, xf)?;
    tape.sum_spatial(masked)
}

#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

/// One LSTM step with gates stacked as `[i; f; o; g]`:
///
/// ```text
/// [i f o g] = [s s s tanh](M [x; h] + b)
/// c' = f * c + i * g
/// h' = o * tanh(c')
/// ```
pub fn lstm_step(tape: &mut Tape, x: Var, state: LstmState, m: Var, bias: Option<Var>) -> Result<LstmState> {
    let d = tape.shape(state.h)[1];
    let xh = tape.concat(&[x, state.h], 1)?;
    let gates = tape.linear(xh, m, bias)?;
    if tape.shape(gates)[1] != 4 * d {
        return Err(Error::dim("lstm_step", "gate rows (4d)", 4 * d, tape.shape(gates)[1]));
    }
    let gi = tape.slice(gates, 1, 0..d)?;
    let gf = tape.slice(gates, 1, d..2 * d)?;
    let go = tape.slice(gates, 1, 2 * d..3 * d)?;
    let gg = tape.slice(gates, 1, 3 * d..4 * d)?;
    let i = tape.sigmoid(gi);
    let f = tape.sigmoid(gf);
    let o = tape.sigmoid(go);
    let g = tape.tanh(gg);
    let fc = tape.mul(f, state.c)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok(LstmState { h, c })
}

/// Everything the attribute branch produces for one batch.
#[derive(Debug, Clone)]
pub struct AttributeOutput {
    /// Initial maps `A [N, C, H, W]`.
    pub initial_maps: Var,
    /// `X_f [N, d, H, W]`.
    pub features: Var,
    /// Logits per attribute, in label order.
    pub logits: Vec<Var>,
    /// Unnormalised maps `U_t [N, k]`, in label order.
    pub raw_maps: Vec<Var>,
    /// Normalised maps `Z_t [N, k]`, in label order.
    pub maps: Vec<Var>,
    /// Hidden states `h_1..h_C [N, d]`, in sweep order.
    pub hidden: Vec<Var>,
    /// `f_att [N, C*d]`: hidden states concatenated in sweep order.
    pub feature: Var,
}

pub fn attribute_forward(
    cfg: &ModelConfig,
    schema: &AttributeSchema,
    s: &mut Session<'_>,
    t: Var,
) -> Result<AttributeOutput> {
    let ts = s.tape.shape(t).to_vec();
    let (n, hf, wf) = (ts[0], ts[2], ts[3]);
    let k = hf * wf;
    let d = cfg.hidden_dim;
    for (l, a) in schema.attributes().iter().enumerate() {
        let shape = s.store().param(&format!("{}.weight", head_name(l)))?.shape().to_vec();
        if shape != [a.classes, d] {
            return Err(Error::Config(format!(
                "head for attribute {} has shape {shape:?}, schema needs [{}, {d}]",
                a.name, a.classes
            )));
        }
    }

    let initial_maps = attention_block(s, t, schema.len())?;
    let features = transfer_features(s, t)?;
    let wh = s.param("att.wh.weight")?;
    let wg = s.param("att.wg.weight")?;
    let m = s.param("att.lstm.weight")?;
    let bias = if cfg.lstm_bias {
        Some(s.param("att.lstm.bias")?)
    } else {
        None
    };

    let zeros = s.input(Tensor::zeros(&[n, d]));
    let mut state = LstmState { h: zeros, c: zeros };
    let c = schema.len();
    let mut logits = vec![None; c];
    let mut raw_maps = vec![None; c];
    let mut maps = vec![None; c];
    let mut hidden = Vec::with_capacity(c);
    for &l in schema.sweep() {
        let a_map = s.tape.slice(initial_maps, 1, l..l + 1)?;
        let a_flat = s.tape.reshape(a_map, &[n, k])?;
        let (u, z) = refine_attention(&mut s.tape, a_flat, state.h, wh, wg)?;
        let x = attend(&mut s.tape, features, z)?;
        state = lstm_step(&mut s.tape, x, state, m, bias)?;
        logits[l] = Some(s.linear(state.h, &head_name(l))?);
        raw_maps[l] = Some(u);
        maps[l] = Some(z);
        hidden.push(state.h);
    }
    let feature = s.tape.concat(&hidden, 1)?;
    let unwrap = |v: Vec<Option<Var>>| v.into_iter().map(|x| x.expect("sweep is a permutation")).collect();
    Ok(AttributeOutput {
        initial_maps,
        features,
        logits: unwrap(logits),
        raw_maps: unwrap(raw_maps),
        maps: unwrap(maps),
        hidden,
        feature,
    })
}

/// Sum over attributes of the batch-mean cross-entropy. `labels[n][l]` is
/// sample `n`'s class for attribute `l`.
pub fn attribute_loss(tape: &mut Tape, logits: &[Var], labels: &[Vec<usize>]) -> Result<Var> {
    if logits.is_empty() {
        return Err(Error::Usage("attribute_loss needs at least one head".into()));
    }
    let mut total: Option<Var> = None;
    for (l, &z) in logits.iter().enumerate() {
        let column = labels
            .iter()
            .map(|row| {
                row.get(l).copied().ok_or_else(|| {
                    Error::Validation(format!("sample has {} attribute labels, head {l} needs one", row.len()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ce = tape.cross_entropy(z, &column)?;
        total = Some(match total {
            None => ce,
            Some(acc) => tape.add(acc, ce)?,
        });
    }
    Ok(total.expect("at least one head"))
}
