//! Appearance branch: stripe pooling, width reduction and identity heads.
//!
//! The feature tensor is cut into `h` horizontal stripes, `v` vertical
//! stripes and the whole tensor. Each part is mean-pooled to a `C_f` vector,
//! reduced to `r` by a 1x1 conv + BN + ReLU, and classified by its own head.
//! One reduction conv serves every stripe of a branch (horizontal, vertical,
//! global); with `share_reduction` a single conv serves all three.
//!
//! Descriptor layout: `[g_1..g_h, k_1..k_v, p]`, each piece length `r`.
//!
//! Parameter names (all under `app.`): `app.red.{h,v,g}.{conv,bn}` (or
//! `app.red.shared.*`), `app.head{j}` for `j` in `0..h+v+1` in descriptor order.

use std::ops::Range;

use crate::autograd::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{Init, ParamStore, Session};
use crate::tensor::Tensor;

pub fn init(cfg: &ModelConfig, num_ids: usize, store: &mut ParamStore, init: &mut Init) {
    for branch in reduction_names(cfg) {
        init.conv(store, &format!("{branch}.conv"), cfg.reduced_dim, cfg.feature_channels, 1, 2.0);
        init.bn(store, &format!("{branch}.bn"), cfg.reduced_dim);
    }
    for j in 0..num_parts(cfg) {
        init.linear(store, &head_name(j), num_ids, cfg.reduced_dim, true);
    }
}

fn reduction_names(cfg: &ModelConfig) -> Vec<&'static str> {
    if cfg.share_reduction {
        vec!["app.red.shared"]
    } else {
        vec!["app.red.h", "app.red.v", "app.red.g"]
    }
}

pub fn num_parts(cfg: &ModelConfig) -> usize {
    cfg.h_stripes + cfg.v_stripes + 1
}

pub fn head_name(part: usize) -> String {
    format!("app.head{part}")
}

/// Row ranges of the horizontal stripes and column ranges of the vertical
/// stripes of an `hf x wf` grid.
pub fn stripe_ranges(hf: usize, wf: usize, h: usize, v: usize) -> Result<(Vec<Range<usize>>, Vec<Range<usize>>)> {
    if h == 0 || v == 0 || hf % h != 0 || wf % v != 0 {
        return Err(Error::Config(format!(
            "cannot partition a {hf}x{wf} grid into {h} horizontal and {v} vertical stripes: \
             height must be divisible by {h} and width by {v}"
        )));
    }
    let (sh, sv) = (hf / h, wf / v);
    Ok((
        (0..h).map(|i| i * sh..(i + 1) * sh).collect(),
        (0..v).map(|i| i * sv..(i + 1) * sv).collect(),
    ))
}

/// Splits `[N, C, H, W]` (or `[C, H, W]`) into horizontal and vertical
/// stripes. Horizontal stripes are `[.., H/h, W]`, vertical `[.., H, W/v]`.
pub fn partition(t: &Tensor, h: usize, v: usize) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let s = t.shape();
    if s.len() < 2 {
        return Err(Error::Shape {
            op: "partition",
            detail: format!("need at least a 2-d grid, got {s:?}"),
        });
    }
    let (hf, wf) = (s[s.len() - 2], s[s.len() - 1]);
    let lead = &s[..s.len() - 2];
    let planes: usize = lead.iter().product();
    let (rows, cols) = stripe_ranges(hf, wf, h, v)?;
    let cut = |rr: &Range<usize>, cc: &Range<usize>| {
        let mut data = Vec::with_capacity(planes * rr.len() * cc.len());
        for p in t.data().chunks(hf * wf) {
            for r in rr.clone() {
                data.extend_from_slice(&p[r * wf + cc.start..r * wf + cc.end]);
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([rr.len(), cc.len()]);
        Tensor::new(&shape, data).expect("consistent stripe shape")
    };
    Ok((
        rows.iter().map(|r| cut(r, &(0..wf))).collect(),
        cols.iter().map(|c| cut(&(0..hf), c)).collect(),
    ))
}

/// Pools each region of `t [N, C_f, H, W]` and reduces it with one shared
/// 1x1 conv + BN + ReLU. The regions are stacked along the batch so the
/// batch-norm statistics are taken over every (sample, region) pair.
/// Returns one `[N, r]` vector per region.
pub fn pool_reduce(
    s: &mut Session<'_>,
    t: Var,
    regions: &[(Range<usize>, Range<usize>)],
    reduction: &str,
) -> Result<Vec<Var>> {
    let n = s.tape.shape(t)[0];
    let pooled = regions
        .iter()
        .map(|(r, c)| s.tape.avg_pool_region(t, r.clone(), c.clone()))
        .collect::<Result<Vec<_>>>()?;
    let stacked = s.tape.concat(&pooled, 0)?;
    let cf = s.tape.shape(stacked)[1];
    let x = s.tape.reshape(stacked, &[regions.len() * n, cf, 1, 1])?;
    let y = s.conv_bn_relu(x, reduction, 1, 0)?;
    let r = s.tape.shape(y)[1];
    let y = s.tape.reshape(y, &[regions.len() * n, r])?;
    (0..regions.len()).map(|j| s.tape.slice(y, 0, j * n..(j + 1) * n)).collect()
}

#[derive(Debug, Clone)]
pub struct AppearanceOutput {
    /// `[N, K]` logits per part, in descriptor order.
    pub logits: Vec<Var>,
    /// `[N, r]` reduced vectors per part, in descriptor order.
    pub parts: Vec<Var>,
    /// `f_app [N, r * (h + v + 1)]`.
    pub feature: Var,
}

pub fn appearance_forward(cfg: &ModelConfig, s: &mut Session<'_>, t: Var) -> Result<AppearanceOutput> {
    let ts = s.tape.shape(t).to_vec();
    if ts.len() != 4 || ts[1] != cfg.feature_channels {
        return Err(Error::Shape {
            op: "appearance_forward",
            detail: format!("expected [N, {}, H, W], got {ts:?}", cfg.feature_channels),
        });
    }
    let (hf, wf) = (ts[2], ts[3]);
    let (rows, cols) = stripe_ranges(hf, wf, cfg.h_stripes, cfg.v_stripes)?;
    let horizontal: Vec<_> = rows.into_iter().map(|r| (r, 0..wf)).collect();
    let vertical: Vec<_> = cols.into_iter().map(|c| (0..hf, c)).collect();
    let global = vec![(0..hf, 0..wf)];

    let parts = if cfg.share_reduction {
        let all: Vec<_> = horizontal.into_iter().chain(vertical).chain(global).collect();
        pool_reduce(s, t, &all, "app.red.shared")?
    } else {
        let mut p = pool_reduce(s, t, &horizontal, "app.red.h")?;
        p.extend(pool_reduce(s, t, &vertical, "app.red.v")?);
        p.extend(pool_reduce(s, t, &global, "app.red.g")?);
        p
    };
    let logits = parts
        .iter()
        .enumerate()
        .map(|(j, &p)| s.linear(p, &head_name(j)))
        .collect::<Result<Vec<_>>>()?;
    let feature = s.tape.concat(&parts, 1)?;
    Ok(AppearanceOutput { logits, parts, feature })
}

/// Sum over parts of the batch-mean identity cross-entropy.
pub fn appearance_loss(tape: &mut Tape, logits: &[Var], ids: &[usize]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &z in logits {
        let ce = tape.cross_entropy(z, ids)?;
        total = Some(match total {
            None => ce,
            Some(acc) => tape.add(acc, ce)?,
        });
    }
    total.ok_or_else(|| Error::Usage("appearance_loss needs at least one head".into()))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck;
    use crate::params::{Mode, ParamGroup};
    use proptest::prelude::*;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
    }

    #[test]
    fn paper_faithful_stripe_sizes() {
        let t = Tensor::zeros(&[2048, 24, 12]);
        let (h, v) = partition(&t, 6, 3).unwrap();
        assert_eq!(h.len(), 6);
        assert_eq!(v.len(), 3);
        assert!(h.iter().all(|s| s.shape() == [2048, 4, 12]));
        assert!(v.iter().all(|s| s.shape() == [2048, 24, 4]));
    }

    #[test]
    fn single_stripes_are_the_whole_tensor() {
        let t = random(&mut ChaCha8Rng::seed_from_u64(1), &[3, 4, 6], 1.0);
        let (h, v) = partition(&t, 1, 1).unwrap();
        assert_eq!(h[0], t);
        assert_eq!(v[0], t);
    }

    #[test]
    fn horizontal_stripes_concatenate_back() {
        let t = random(&mut ChaCha8Rng::seed_from_u64(2), &[2, 3, 24, 12], 1.0);
        let (h, v) = partition(&t, 6, 3).unwrap();
        let mut tape = Tape::new();
        let hv: Vec<Var> = h.into_iter().map(|s| tape.constant(s)).collect();
        let back = tape.concat(&hv, 2).unwrap();
        assert_eq!(tape.value(back), &t);
        let vv: Vec<Var> = v.into_iter().map(|s| tape.constant(s)).collect();
        let back = tape.concat(&vv, 3).unwrap();
        assert_eq!(tape.value(back), &t);
    }

    #[test]
    fn divisibility_error_names_divisors() {
        let err = partition(&Tensor::zeros(&[1, 24, 12]), 5, 3).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("divisible by 5"));
    }

    #[test]
    fn pool_reduce_constant_input_gives_constant_vector() {
        let mut cfg = ModelConfig::tiny();
        cfg.reduced_dim = cfg.feature_channels;
        let mut store = ParamStore::new();
        init(&cfg, 4, &mut store, &mut Init::new(1));
        let w = store.get_mut("app.red.h.conv.weight").unwrap();
        w.data_mut().fill(0.0);
        for i in 0..6 {
            w.data_mut()[i * 6 + i] = 1.0;
        }
        let mut s = Session::new(&mut store, Mode::Eval, &[]);
        let t = s.input(Tensor::full(&[1, 6, 4, 3], 0.75));
        let out = pool_reduce(&mut s, t, &[(0..2, 0..3), (2..4, 0..3)], "app.red.h").unwrap();
        // eval-mode BN with fresh running stats is y = x / sqrt(1 + eps)
        let expected = 0.75 / (1.0 + crate::params::BN_EPS).sqrt();
        for v in out {
            assert!(s.tape.value(v).data().iter().all(|&x| (x - expected).abs() < 1e-15));
        }
    }

    #[test]
    fn descriptor_lengths() {
        let cfg = ModelConfig::desk();
        let mut store = ParamStore::new();
        init(&cfg, 10, &mut store, &mut Init::new(1));
        let mut s = Session::new(&mut store, Mode::Train, &[]);
        let t = s.input(random(&mut ChaCha8Rng::seed_from_u64(3), &[2, 128, 24, 12], 1.0));
        let out = appearance_forward(&cfg, &mut s, t).unwrap();
        assert_eq!(out.logits.len(), 10);
        assert_eq!(s.tape.shape(out.feature), &[2, 640]);
        assert_eq!(ModelConfig::paper_faithful().appearance_len(), 2560);
    }

    #[test]
    fn descriptor_is_deterministic() {
        let cfg = ModelConfig::tiny();
        let mut store = ParamStore::new();
        init(&cfg, 3, &mut store, &mut Init::new(2));
        let input = random(&mut ChaCha8Rng::seed_from_u64(4), &[2, 6, 4, 3], 1.0);
        let run = |store: &mut ParamStore| {
            let mut s = Session::new(store, Mode::Eval, &[]);
            let t = s.input(input.clone());
            let out = appearance_forward(&cfg, &mut s, t).unwrap();
            s.tape.value(out.feature).clone()
        };
        let a = run(&mut store);
        let b = run(&mut store);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn single_identity_loss_is_zero() {
        let cfg = ModelConfig::tiny();
        let mut store = ParamStore::new();
        init(&cfg, 1, &mut store, &mut Init::new(2));
        let mut s = Session::new(&mut store, Mode::Train, &[]);
        let t = s.input(random(&mut ChaCha8Rng::seed_from_u64(5), &[2, 6, 4, 3], 1.0));
        let out = appearance_forward(&cfg, &mut s, t).unwrap();
        let l = appearance_loss(&mut s.tape, &out.logits, &[0, 0]).unwrap();
        assert_eq!(s.tape.value(l).item(), 0.0);
    }

    #[test]
    fn uniform_and_confident_losses() {
        let mut tape = Tape::new();
        let logits: Vec<Var> = (0..10).map(|_| tape.constant(Tensor::zeros(&[3, 4]))).collect();
        let l = appearance_loss(&mut tape, &logits, &[0, 3, 2]).unwrap();
        assert!((tape.value(l).item() - 10.0 * 4f64.ln()).abs() < 1e-12);
        assert!((10.0 * 4f64.ln() - 13.8629).abs() < 1e-4);

        let mut tape = Tape::new();
        let logits: Vec<Var> = (0..10)
            .map(|_| tape.constant(Tensor::new(&[1, 4], vec![0.0, 0.0, 1000.0, 0.0]).unwrap()))
            .collect();
        let l = appearance_loss(&mut tape, &logits, &[2]).unwrap();
        assert!(tape.value(l).item() < 1e-12);
    }

    #[test]
    fn loss_matches_per_head_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (n, k) = (5, 7);
        let heads: Vec<Tensor> = (0..10).map(|_| random(&mut rng, &[n, k], 3.0)).collect();
        let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let mut expected = 0.0;
        for h in &heads {
            let mut sum = 0.0;
            for (i, &y) in ids.iter().enumerate() {
                let row = &h.data()[i * k..(i + 1) * k];
                sum += row.iter().map(|v| v.exp()).sum::<f64>().ln() - row[y];
            }
            expected += sum / n as f64;
        }
        let mut tape = Tape::new();
        let vars: Vec<Var> = heads.into_iter().map(|h| tape.constant(h)).collect();
        let l = appearance_loss(&mut tape, &vars, &ids).unwrap();
        assert!((tape.value(l).item() - expected).abs() < 1e-10);
    }

    #[test]
    fn identity_out_of_range() {
        let mut tape = Tape::new();
        let logits = vec![tape.constant(Tensor::zeros(&[1, 4]))];
        assert!(matches!(
            appearance_loss(&mut tape, &logits, &[4]),
            Err(Error::Label { label: 4, classes: 4 })
        ));
    }

    #[test]
    fn each_head_gets_gradient_only_from_its_own_term() {
        let cfg = ModelConfig::tiny();
        let mut store = ParamStore::new();
        init(&cfg, 3, &mut store, &mut Init::new(7));
        let input = random(&mut ChaCha8Rng::seed_from_u64(8), &[4, 6, 4, 3], 1.0);
        let mut s = Session::new(&mut store, Mode::Train, &ParamGroup::ALL);
        let t = s.input(input);
        let out = appearance_forward(&cfg, &mut s, t).unwrap();
        // drop the term of part 2
        let kept: Vec<Var> = out.logits.iter().enumerate().filter(|(j, _)| *j != 2).map(|(_, &v)| v).collect();
        let l = appearance_loss(&mut s.tape, &kept, &[0, 1, 2, 1]).unwrap();
        s.backward(l).unwrap();
        let g2 = store.get("app.head2.weight").unwrap().grad();
        assert!(g2.is_none_or(|g| g.iter().all(|&x| x == 0.0)));
        let g3 = store.get("app.head3.weight").unwrap().grad().unwrap();
        assert!(g3.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn full_branch_gradient() {
        for share in [false, true] {
            let mut cfg = ModelConfig::tiny();
            cfg.share_reduction = share;
            let mut store = ParamStore::new();
            init(&cfg, 3, &mut store, &mut Init::new(9));
            let input = random(&mut ChaCha8Rng::seed_from_u64(10), &[4, 6, 4, 3], 1.0);
            let names = store.group_names(ParamGroup::Appearance);
            let report = gradcheck::check_params(&store, &names, gradcheck::STEP, |s| {
                let t = s.input(input.clone());
                let out = appearance_forward(&cfg, s, t)?;
                appearance_loss(&mut s.tape, &out.logits, &[0, 1, 2, 1])
            })
            .unwrap();
            for (name, e) in report {
                assert!(e < 1e-4, "{name}: {e}");
            }
        }
    }

    proptest! {
        #[test]
        fn stripes_tile_and_recombine(seed in any::<u64>(), hi in 0usize..4, vi in 0usize..3) {
            let (h, v) = ([1, 2, 3, 6][hi], [1, 2, 4][vi]);
            let t = random(&mut ChaCha8Rng::seed_from_u64(seed), &[2, 12, 8], 5.0);
            let (hs, vs) = partition(&t, h, v).unwrap();
            let total: usize = hs.iter().map(Tensor::numel).sum();
            prop_assert_eq!(total, t.numel());
            let total: usize = vs.iter().map(Tensor::numel).sum();
            prop_assert_eq!(total, t.numel());
            let mean = |x: &Tensor| x.data().iter().sum::<f64>() / x.numel() as f64;
            let weighted = |parts: &[Tensor]| {
                parts.iter().map(|p| mean(p) * p.numel() as f64).sum::<f64>() / t.numel() as f64
            };
            prop_assert!((weighted(&hs) - mean(&t)).abs() < 1e-10);
            prop_assert!((weighted(&vs) - mean(&t)).abs() < 1e-10);
        }
    }
}
