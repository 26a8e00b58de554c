//! End-to-end gradient checks: encoder, split, heads and every loss term.

use clever::model::{EncoderKind, InitScheme, ModelConfig, Network};
use clever::objectives::{contrastive_loss, ddcl_losses, orthogonal_loss, preg_loss, project, total_loss, LossWeights};
use clever::tensor::{finite_diff_check_fn, InputCheck, Tape, Tensor, Var};

fn config(encoder: EncoderKind, init: InitScheme) -> ModelConfig {
    ModelConfig {
        encoder,
        output_dim: 10,
        rho: 0.6,
        head_hidden: 6,
        head_out: 5,
        mlp_hidden: 7,
        resolution: 8,
        channels: 3,
        init,
    }
}

fn images(n: usize, phase: f64) -> Tensor {
    let len = n * 8 * 8 * 3;
    let data = (0..len).map(|k| ((k as f64 * 0.37 + phase).sin() + 1.0) / 2.0).collect();
    Tensor::from_vec(vec![n, 8, 8, 3], data).unwrap()
}

fn worst(checks: &[InputCheck]) -> f64 {
    checks.iter().filter_map(InputCheck::max_rel_error).fold(0.0, f64::max)
}

fn clever_loss(net: &Network, teacher: &Network, views: &[Tensor], w: &LossWeights) -> impl Fn(&mut Tape, &[Var]) -> clever::Result<Var> {
    let net = net.clone();
    let views = views.to_vec();
    let w = w.clone();
    let mut t_ir = Vec::new();
    let mut t_ef = Vec::new();
    for x in &views {
        let s = teacher.encode_and_split(x).unwrap();
        let mut tape = Tape::new();
        let tv = teacher.params.bind(&mut tape, false);
        let zi = tape.constant(s.z_ir.clone());
        let hi = teacher.head_ir().forward(&mut tape, &tv, zi).unwrap();
        t_ir.push(tape.value(hi).clone());
        let ze = tape.constant(s.z_ef.clone());
        let he = teacher.head_ef().unwrap().forward(&mut tape, &tv, ze).unwrap();
        t_ef.push(tape.value(he).clone());
    }
    let center = Tensor::from_vec(vec![5], vec![0.1, -0.2, 0.0, 0.3, 0.05]).unwrap();
    move |tape: &mut Tape, vars: &[Var]| {
        let mut s_ir = Vec::new();
        let mut s_ef = Vec::new();
        for x in &views {
            let xv = tape.constant(x.clone());
            let s = net.encode_split(tape, vars, xv)?;
            let h = project(tape, vars, &net, &s)?;
            s_ir.push(h.ir);
            s_ef.extend(h.ef);
        }
        let cl = contrastive_loss(tape, &t_ir, &s_ir, &center, &w)?;
        let orth = orthogonal_loss(tape, &s_ef, &t_ef, w.orth_temperature)?;
        let preg = preg_loss(tape, vars, &net)?;
        Ok(total_loss(tape, cl, orth, preg, &w)?.0)
    }
}

fn check_clever(encoder: EncoderKind) {
    let net = Network::new(config(encoder, InitScheme::He), 1).unwrap();
    let teacher = Network::new(config(encoder, InitScheme::He), 2).unwrap();
    let w = LossWeights { lambda: 0.5, tau_s: 0.5, tau_t: 0.3, ..LossWeights::default() };
    let f = clever_loss(&net, &teacher, &[images(3, 0.0), images(3, 1.0)], &w);
    let point = net.params.values().to_vec();
    let diff = vec![true; point.len()];
    let checks = finite_diff_check_fn(f, &point, &diff, 1e-6, |_, _| false).unwrap();
    assert!(worst(&checks) < 1e-4, "{encoder:?}: {checks:?}");
}

#[test]
fn clever_objective_gradient_through_conv_encoder() {
    check_clever(EncoderKind::ConvTiny);
}

#[test]
fn clever_objective_gradient_through_mlp_encoder() {
    check_clever(EncoderKind::MlpTiny);
}

#[test]
fn ddcl_objective_gradient() {
    let net = Network::new(config(EncoderKind::MlpTiny, InitScheme::He), 3).unwrap();
    let views = [images(4, 0.3), images(4, 2.0)];
    let n = net.clone();
    let f = move |tape: &mut Tape, vars: &[Var]| {
        let mut outs = Vec::new();
        for x in &views {
            let xv = tape.constant(x.clone());
            let s = n.encode_split(tape, vars, xv)?;
            outs.push(project(tape, vars, &n, &s)?);
        }
        let (li, lv) = ddcl_losses(tape, (outs[0].ir, outs[1].ir), Some((outs[0].ef.unwrap(), outs[1].ef.unwrap())))?;
        let preg = preg_loss(tape, vars, &n)?;
        Ok(total_loss(tape, li, lv, preg, &LossWeights::default())?.0)
    };
    let point = net.params.values().to_vec();
    let checks = finite_diff_check_fn(f, &point, &vec![true; point.len()], 1e-6, |_, _| false).unwrap();
    assert!(worst(&checks) < 1e-4, "{checks:?}");
}
