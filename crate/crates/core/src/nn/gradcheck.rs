//! Central finite-difference checks of the hand-written backward passes.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::attention::{mha_backward, mha_forward, Pos};
use super::cnn::{cnn_backward, cnn_forward};
use super::config::ModelConfig;
use super::encoder::{encoder_backward, encoder_forward};
use super::layers::{linear_backward, linear_forward, rmsnorm_backward, rmsnorm_forward, swiglu_backward, swiglu_forward};
use super::model::{cross_entropy, Model, PatchInput};
use super::params::{BlockParams, ModelParams};
use super::tensor::{Mat, Tensor};
use crate::cyrope::CyRopeTable;
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-4;
/// Gradients below this magnitude are compared in absolute terms; central
/// differences of an O(1) loss resolve about `1e-16 / FD_STEP`.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub op: String,
    pub max_rel_error: f64,
    /// `name[index]` of the worst entry.
    pub worst: String,
    pub entries_checked: usize,
    /// Entries left out because the perturbation crossed a kink.
    pub skipped: usize,
}

/// Compares `analytic` against central differences of `loss`, locating each
/// named tensor among `slots(params)`. `per_tensor` limits the check to a
/// seeded sample of entries per tensor.
pub fn fd_check<P>(
    op: &str,
    params: &mut P,
    slots: fn(&mut P) -> Vec<(String, &mut Tensor)>,
    analytic: &[(String, Tensor)],
    loss: impl FnMut(&P) -> f64,
    per_tensor: Option<usize>,
    seed: u64,
) -> GradCheck {
    fd_check_piecewise(op, params, slots, analytic, loss, |_| 0, per_tensor, seed)
}

/// As [`fd_check`] for a piecewise-smooth loss. `regime` identifies the
/// active smooth piece (e.g. the max-pool selections); entries whose
/// perturbation changes it are skipped and counted.
#[allow(clippy::too_many_arguments)]
pub fn fd_check_piecewise<P>(
    op: &str,
    params: &mut P,
    slots: fn(&mut P) -> Vec<(String, &mut Tensor)>,
    analytic: &[(String, Tensor)],
    mut loss: impl FnMut(&P) -> f64,
    mut regime: impl FnMut(&P) -> u64,
    per_tensor: Option<usize>,
    seed: u64,
) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report =
        GradCheck { op: op.into(), max_rel_error: 0.0, worst: String::new(), entries_checked: 0, skipped: 0 };
    let base = regime(params);
    for (name, grad) in analytic {
        let Some(ti) = slots(params).iter().position(|(n, _)| n == name) else {
            panic!("no tensor named {name}");
        };
        let len = grad.data.len();
        let idx: Vec<usize> = match per_tensor {
            Some(s) if s < len => sample(&mut rng, len, s).into_vec(),
            _ => (0..len).collect(),
        };
        for j in idx {
            let orig = slots(params)[ti].1.data[j];
            slots(params)[ti].1.data[j] = orig + FD_STEP;
            let up = loss(params);
            let r_up = regime(params);
            slots(params)[ti].1.data[j] = orig - FD_STEP;
            let down = loss(params);
            let r_down = regime(params);
            slots(params)[ti].1.data[j] = orig;
            if r_up != base || r_down != base {
                report.skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * FD_STEP);
            let err = rel_error(grad.data[j], numeric);
            report.entries_checked += 1;
            if err > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = err;
                report.worst = format!("{name}[{j}] analytic {:.3e} numeric {numeric:.3e}", grad.data[j]);
            }
        }
    }
    report
}

type Named = Vec<(String, Tensor)>;

fn named_slots(p: &mut Named) -> Vec<(String, &mut Tensor)> {
    p.iter_mut().map(|(n, t)| (n.clone(), t)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rand_t(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::trunc_normal(shape, std, rng)
}

fn as_mat(t: &Tensor) -> Mat {
    Mat::from_vec(t.shape[0], t.shape[1], t.data.clone())
}

fn as_tensor(m: Mat) -> Tensor {
    Tensor { shape: vec![m.rows, m.cols], data: m.data }
}

fn zeros_named(p: &Named) -> Named {
    p.iter().map(|(n, t)| (n.clone(), Tensor::zeros(&t.shape))).collect()
}

fn block_from(p: &Named, at: usize) -> BlockParams {
    BlockParams {
        qkv: p[at].1.clone(),
        out: p[at + 1].1.clone(),
        w1: p[at + 2].1.clone(),
        w2: p[at + 3].1.clone(),
        w3: p[at + 4].1.clone(),
        norm1: p[at + 5].1.clone(),
        norm2: p[at + 6].1.clone(),
    }
}

fn block_named(prefix: &str, d: usize, f: usize, rng: &mut ChaCha8Rng) -> Named {
    let gain = |rng: &mut ChaCha8Rng| {
        let mut g = rand_t(&[d], 0.2, rng);
        g.data.iter_mut().for_each(|v| *v += 1.0);
        g
    };
    vec![
        (format!("{prefix}.attn.qkv"), rand_t(&[3 * d, d], 0.3, rng)),
        (format!("{prefix}.attn.out"), rand_t(&[d, d], 0.3, rng)),
        (format!("{prefix}.ffn.w1"), rand_t(&[f, d], 0.3, rng)),
        (format!("{prefix}.ffn.w2"), rand_t(&[d, f], 0.3, rng)),
        (format!("{prefix}.ffn.w3"), rand_t(&[f, d], 0.3, rng)),
        (format!("{prefix}.norm1.gain"), gain(rng)),
        (format!("{prefix}.norm2.gain"), gain(rng)),
    ]
}

fn block_grads(g: BlockParams) -> Vec<Tensor> {
    vec![g.qkv, g.out, g.w1, g.w2, g.w3, g.norm1, g.norm2]
}

fn small_positions(n: usize, channels: usize) -> Vec<Pos> {
    (0..n).map(|i| if i == 0 { None } else { Some(((i / channels) as i64, (i % channels) as i64)) }).collect()
}

/// Names accepted by [`grad_check`].
pub const OPS: &[&str] = &[
    "linear",
    "rmsnorm",
    "swiglu",
    "attention",
    "block",
    "encoder",
    "cnn",
    "ssl_head",
    "kin_head",
    "ssl_model",
    "ssl_model_mae",
    "ssl_model_absolute",
    "finetune_model",
];

/// Max relative error between analytic and finite-difference gradients for a
/// named operation on a seeded random instance. Single ops use a random linear
/// probe of their output as the scalar loss and also check the input gradient.
pub fn grad_check(op: &str, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let report = match op {
        "linear" => {
            let mut p: Named = vec![
                ("weight".into(), rand_t(&[4, 7], 0.5, &mut rng)),
                ("bias".into(), rand_t(&[4], 0.5, &mut rng)),
                ("input".into(), rand_t(&[5, 7], 1.0, &mut rng)),
            ];
            let r = rand_t(&[5, 4], 1.0, &mut rng);
            let f = |p: &Named| dot(&linear_forward(&as_mat(&p[2].1), &p[0].1, Some(&p[1].1)).data, &r.data);
            let mut g = zeros_named(&p);
            let dx = {
                let (a, b) = g.split_at_mut(1);
                linear_backward(&as_mat(&r), &as_mat(&p[2].1), &p[0].1, &mut a[0].1, Some(&mut b[0].1), true)
            };
            g[2].1 = as_tensor(dx.unwrap());
            fd_check(op, &mut p, named_slots, &g, f, None, seed)
        }
        "rmsnorm" => {
            let mut gain = rand_t(&[8], 0.3, &mut rng);
            gain.data.iter_mut().for_each(|v| *v += 1.0);
            let mut p: Named = vec![("gain".into(), gain), ("input".into(), rand_t(&[5, 8], 1.0, &mut rng))];
            let r = rand_t(&[5, 8], 1.0, &mut rng);
            let f = |p: &Named| dot(&rmsnorm_forward(&as_mat(&p[1].1), &p[0].1).0.data, &r.data);
            let mut g = zeros_named(&p);
            let x = as_mat(&p[1].1);
            let (_, invs) = rmsnorm_forward(&x, &p[0].1);
            let dx = rmsnorm_backward(&as_mat(&r), &x, &p[0].1, &invs, &mut g[0].1);
            g[1].1 = as_tensor(dx);
            fd_check(op, &mut p, named_slots, &g, f, None, seed)
        }
        "swiglu" => {
            let (d, ff) = (8, 16);
            let mut p: Named = vec![
                ("w1".into(), rand_t(&[ff, d], 0.4, &mut rng)),
                ("w2".into(), rand_t(&[d, ff], 0.4, &mut rng)),
                ("w3".into(), rand_t(&[ff, d], 0.4, &mut rng)),
                ("input".into(), rand_t(&[4, d], 1.0, &mut rng)),
            ];
            let r = rand_t(&[4, d], 1.0, &mut rng);
            let f = |p: &Named| dot(&swiglu_forward(&as_mat(&p[3].1), &p[0].1, &p[1].1, &p[2].1).0.data, &r.data);
            let x = as_mat(&p[3].1);
            let (_, cache) = swiglu_forward(&x, &p[0].1, &p[1].1, &p[2].1);
            let mut g = zeros_named(&p);
            let (g1, rest) = g.split_at_mut(1);
            let (g2, rest) = rest.split_at_mut(1);
            let dx = swiglu_backward(&as_mat(&r), &x, &cache, &p[0].1, &p[1].1, &p[2].1, &mut g1[0].1, &mut g2[0].1, &mut rest[0].1);
            g[3].1 = as_tensor(dx);
            fd_check(op, &mut p, named_slots, &g, f, None, seed)
        }
        "attention" => {
            let (n, d, heads, ch) = (7, 16, 2, 3);
            let rope = CyRopeTable::new(d / heads, ch, 1e4)?;
            let pos = small_positions(n, ch);
            let mut p: Named = vec![
                ("qkv".into(), rand_t(&[3 * d, d], 0.4, &mut rng)),
                ("out".into(), rand_t(&[d, d], 0.4, &mut rng)),
                ("input".into(), rand_t(&[n, d], 1.0, &mut rng)),
            ];
            let r = rand_t(&[n, d], 1.0, &mut rng);
            let f = |p: &Named| {
                dot(&mha_forward(&as_mat(&p[2].1), &p[0].1, &p[1].1, heads, &pos, Some(&rope)).0.data, &r.data)
            };
            let x = as_mat(&p[2].1);
            let (_, cache) = mha_forward(&x, &p[0].1, &p[1].1, heads, &pos, Some(&rope));
            let mut g = zeros_named(&p);
            let (ga, gb) = g.split_at_mut(1);
            let dx = mha_backward(&as_mat(&r), &x, &cache, &p[0].1, &p[1].1, heads, &pos, Some(&rope), &mut ga[0].1, &mut gb[0].1);
            g[2].1 = as_tensor(dx);
            fd_check(op, &mut p, named_slots, &g, f, None, seed)
        }
        "block" | "encoder" => {
            let (n, d, heads, ff, ch) = (7, 16, 2, 40, 3);
            let depth = if op == "block" { 1 } else { 2 };
            let rope = CyRopeTable::new(d / heads, ch, 1e4)?;
            let pos = small_positions(n, ch);
            let mut p: Named = Vec::new();
            for b in 0..depth {
                p.extend(block_named(&format!("blocks.{b}"), d, ff, &mut rng));
            }
            let mut fin = rand_t(&[d], 0.2, &mut rng);
            fin.data.iter_mut().for_each(|v| *v += 1.0);
            p.push(("final_norm.gain".into(), fin));
            p.push(("input".into(), rand_t(&[n, d], 1.0, &mut rng)));
            let r = rand_t(&[n, d], 1.0, &mut rng);
            let unpack = |p: &Named| -> (Vec<BlockParams>, Tensor, Mat) {
                let blocks = (0..depth).map(|b| block_from(p, 7 * b)).collect();
                (blocks, p[7 * depth].1.clone(), as_mat(&p[7 * depth + 1].1))
            };
            let f = |p: &Named| {
                let (blocks, fin, x) = unpack(p);
                dot(&encoder_forward(&blocks, &fin, x, heads, &pos, Some(&rope), None).0.data, &r.data)
            };
            let (blocks, fin, x) = unpack(&p);
            let (_, cache) = encoder_forward(&blocks, &fin, x, heads, &pos, Some(&rope), None);
            let mut gb: Vec<BlockParams> = blocks
                .iter()
                .map(|b| {
                    let mut z = b.clone();
                    for t in [&mut z.qkv, &mut z.out, &mut z.w1, &mut z.w2, &mut z.w3, &mut z.norm1, &mut z.norm2] {
                        t.zero_();
                    }
                    z
                })
                .collect();
            let mut gf = Tensor::zeros(&[d]);
            let dx = encoder_backward(&blocks, &fin, &as_mat(&r), &cache, heads, &pos, Some(&rope), &mut gb, &mut gf);
            let mut flat: Vec<Tensor> = gb.into_iter().flat_map(block_grads).collect();
            flat.push(gf);
            flat.push(as_tensor(dx));
            let g: Named = p.iter().map(|(n, _)| n.clone()).zip(flat).collect();
            fd_check(op, &mut p, named_slots, &g, f, None, seed)
        }
        "cnn" => {
            let cfg = ModelConfig { d: 16, heads: 2, ..ModelConfig::desk() };
            let init = ModelParams::init(&cfg, seed)?;
            let mut p: Named = Vec::new();
            for (l, c) in init.cnn.iter().enumerate() {
                let mut b = c.bias.clone();
                b.data.iter_mut().for_each(|v| *v = 0.05 * (*v + 1.0));
                p.push((format!("cnn.layer{}.weight", l + 1), c.weight.clone()));
                p.push((format!("cnn.layer{}.bias", l + 1), b));
            }
            let patches = as_mat(&rand_t(&[3, cfg.patch_len], 1.0, &mut rng));
            let r = rand_t(&[3, cfg.d], 1.0, &mut rng);
            let convs = |p: &Named| {
                [0, 1, 2].map(|l| super::params::ConvParams { weight: p[2 * l].1.clone(), bias: p[2 * l + 1].1.clone() })
            };
            let f = |p: &Named| dot(&cnn_forward(&patches, &convs(p), &cfg).0.data, &r.data);
            let cv = convs(&p);
            let (_, cache) = cnn_forward(&patches, &cv, &cfg);
            let mut gc = [0, 1, 2].map(|l| super::params::ConvParams {
                weight: Tensor::zeros(&cv[l].weight.shape),
                bias: Tensor::zeros(&cv[l].bias.shape),
            });
            cnn_backward(&as_mat(&r), &cache, &cv, &mut gc);
            let g: Named = p
                .iter()
                .map(|(n, _)| n.clone())
                .zip(gc.into_iter().flat_map(|c| [c.weight, c.bias]))
                .collect();
            let regime = |p: &Named| cnn_forward(&patches, &convs(p), &cfg).1.pool_signature();
            fd_check_piecewise(op, &mut p, named_slots, &g, f, regime, Some(40), seed)
        }
        "ssl_head" => {
            let (n, d, k) = (4, 8, 5);
            let mut p: Named = vec![
                ("ssl_head.weight".into(), rand_t(&[k, d], 0.5, &mut rng)),
                ("ssl_head.bias".into(), rand_t(&[k], 0.5, &mut rng)),
                ("input".into(), rand_t(&[n, d], 1.0, &mut rng)),
            ];
            let labels = [0usize, 3, 4, 3];
            let f = |p: &Named| {
                let z = linear_forward(&as_mat(&p[2].1), &p[0].1, Some(&p[1].1));
                (0..n).map(|i| cross_entropy(z.row(i), labels[i]).0).sum::<f64>()
            };
            let x = as_mat(&p[2].1);
            let z = linear_forward(&x, &p[0].1, Some(&p[1].1));
            let mut dz = Mat::zeros(n, k);
            for i in 0..n {
                dz.row_mut(i).copy_from_slice(&cross_entropy(z.row(i), labels[i]).1);
            }
            let mut g = zeros_named(&p);
            let (a, b) = g.split_at_mut(1);
            let dx = linear_backward(&dz, &x, &p[0].1, &mut a[0].1, Some(&mut b[0].1), true).unwrap();
            g[2].1 = as_tensor(dx);
            fd_check(op, &mut p, named_slots, &g, f, None, seed)
        }
        "kin_head" => {
            let cfg = ModelConfig { d: 8, heads: 2, layers: 0, ..ModelConfig::desk() };
            let model = Model::new(cfg.clone())?;
            let mut params = ModelParams::init(&cfg, seed)?;
            for (name, t) in params.entries_mut() {
                if name.starts_with("kin_head") {
                    *t = rand_t(&t.shape.clone(), 0.5, &mut rng);
                }
            }
            let seg_input = tiny_input(&cfg, &mut rng);
            let target: Vec<f64> = (0..cfg.dof).map(|i| 0.2 * i as f64).collect();
            let mut g = params.zeros_like();
            model.finetune_loss(&params, &seg_input, &target, Some((&mut g, 1.0)), None)?;
            let analytic: Named = g
                .entries()
                .into_iter()
                .filter(|(n, _)| n.starts_with("kin_head"))
                .map(|(n, t)| (n, t.clone()))
                .collect();
            let f = |p: &ModelParams| model.finetune_loss(p, &seg_input, &target, None, None).unwrap();
            fd_check(op, &mut params, ModelParams::entries_mut, &analytic, f, None, seed)
        }
        "ssl_model" | "ssl_model_mae" | "ssl_model_absolute" | "finetune_model" => {
            let mut cfg = ModelConfig::desk();
            match op {
                "ssl_model_mae" => cfg.mask_style = super::config::MaskStyle::Mae,
                "ssl_model_absolute" => cfg.pe_type = super::config::PeType::Absolute,
                _ => {}
            }
            return model_check(op, &cfg, seed, Some(3));
        }
        other => return Err(Error::config(format!("unknown gradient-check op {other:?}"))),
    };
    Ok(report)
}

fn tiny_input(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> PatchInput {
    let t_n = 2;
    let n = cfg.channels * t_n;
    let patches = as_mat(&rand_t(&[n, cfg.patch_len], 1.0, rng));
    let coords = (0..cfg.channels).flat_map(|c| (0..t_n).map(move |t| (c, t))).collect();
    PatchInput { patches, coords }
}

/// Whole-model check: every tensor, `per_tensor` sampled entries each.
pub fn model_check(op: &str, cfg: &ModelConfig, seed: u64, per_tensor: Option<usize>) -> Result<GradCheck> {
    let model = Model::new(cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut params = ModelParams::init(cfg, seed)?;
    // non-trivial biases and gains so their gradients are exercised
    for (name, t) in params.entries_mut() {
        if name.ends_with(".bias") || name.ends_with(".gain") {
            let base = if name.ends_with(".gain") { 1.0 } else { 0.0 };
            t.data.iter_mut().for_each(|v| *v = base + 0.1 * rand::Rng::gen_range(&mut rng, -1.0..1.0));
        }
    }
    let input = tiny_input(cfg, &mut rng);
    let n = input.len();
    let finetune = op.starts_with("finetune");
    let labels: Vec<usize> = (0..n).map(|_| rand::Rng::gen_range(&mut rng, 0..cfg.codebook_size)).collect();
    let m = ((cfg.mask_ratio * n as f64).round_ties_even() as usize).max(1);
    let masked = sample(&mut rng, n, m).into_vec();
    let target: Vec<f64> = (0..cfg.dof).map(|_| rand::Rng::gen_range(&mut rng, 0.0..1.0)).collect();
    let eval = |p: &ModelParams, g: Option<(&mut ModelParams, f64)>| {
        if finetune {
            model.finetune_loss(p, &input, &target, g, None)
        } else {
            model.ssl_loss(p, &input, &labels, &masked, g, None)
        }
    };
    let mut g = params.zeros_like();
    let loss = eval(&params, Some((&mut g, 1.0)))?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("{op} loss")));
    }
    let mut analytic: Named = g.entries().into_iter().map(|(n, t)| (n, t.clone())).collect();
    let mut used: Vec<bool> = vec![true; analytic.len()];
    // tensors the objective never touches (e.g. the other head) are skipped
    for (i, (name, _)) in analytic.iter().enumerate() {
        let unused = if finetune {
            name == "mask_token" || name.starts_with("ssl_head") || name.starts_with("decoder")
        } else {
            name == "kin_token" || name.starts_with("kin_head")
        };
        used[i] = !unused;
    }
    let keep: Vec<String> = analytic.iter().zip(&used).filter(|(_, &u)| u).map(|((n, _), _)| n.clone()).collect();
    analytic.retain(|(n, _)| keep.contains(n));
    let f = |p: &ModelParams| eval(p, None).expect("forward");
    let regime = |p: &ModelParams| cnn_forward(&input.patches, &p.cnn, cfg).1.pool_signature();
    Ok(fd_check_piecewise(op, &mut params, ModelParams::entries_mut, &analytic, f, regime, per_tensor, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_error_floor() {
        assert_eq!(rel_error(0.0, 0.0), 0.0);
        assert!((rel_error(1e-9, 0.0) - 1e-3).abs() < 1e-12);
        assert!((rel_error(2.0, 1.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn fd_check_flags_a_wrong_gradient() {
        let mut p: Named = vec![("w".into(), Tensor { shape: vec![2], data: vec![1.0, 2.0] })];
        let good: Named = vec![("w".into(), Tensor { shape: vec![2], data: vec![2.0, 4.0] })];
        let bad: Named = vec![("w".into(), Tensor { shape: vec![2], data: vec![2.0, 5.0] })];
        let f = |p: &Named| p[0].1.data.iter().map(|v| v * v).sum::<f64>();
        assert!(fd_check("sq", &mut p, named_slots, &good, f, None, 0).max_rel_error < 1e-9);
        let r = fd_check("sq", &mut p, named_slots, &bad, f, None, 0);
        assert!(r.max_rel_error > 0.1);
        assert!(r.worst.starts_with("w[1] "), "{}", r.worst);
    }

    #[test]
    fn linear_and_norm_are_tight() {
        for op in ["linear", "rmsnorm"] {
            let r = grad_check(op, 1).unwrap();
            assert!(r.max_rel_error < 1e-6, "{r:?}");
        }
    }

    #[test]
    fn single_ops_pass() {
        for op in ["swiglu", "attention", "block", "encoder", "cnn", "ssl_head", "kin_head"] {
            let r = grad_check(op, 2).unwrap();
            assert!(r.max_rel_error < 1e-4, "{r:?}");
        }
    }

    #[test]
    fn kink_crossings_are_skipped() {
        let mut p: Named = vec![("w".into(), Tensor { shape: vec![2], data: vec![1.0 + 5e-5, 1.0] })];
        let g: Named = vec![("w".into(), Tensor { shape: vec![2], data: vec![1.0, 0.0] })];
        let f = |p: &Named| p[0].1.data[0].max(p[0].1.data[1]);
        let argmax = |p: &Named| (p[0].1.data[1] > p[0].1.data[0]) as u64;
        assert!(fd_check("max", &mut p, named_slots, &g, f, None, 0).max_rel_error > 0.1);
        let r = fd_check_piecewise("max", &mut p, named_slots, &g, f, argmax, None, 0);
        assert_eq!((r.skipped, r.entries_checked), (2, 0));
    }

    #[test]
    fn unknown_op_is_config_error() {
        assert!(matches!(grad_check("conv9", 0), Err(Error::Config(_))));
    }
}
