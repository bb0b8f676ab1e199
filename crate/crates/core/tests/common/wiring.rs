//! Micro-model probes of the loss wiring.

use dsagcn_core::adversarial::{domain_adversarial_loss, GrlConfig, GrlSchedule};
use dsagcn_core::diff::{no_grad, DiffArray};
use dsagcn_core::model::{build_model, windows_to_array, ArchSpec, ConvStage, ForwardMode, Model, Pool, ThirdLoss, VariantId};
use dsagcn_core::train::{classification_loss, TrainConfig, Trainer};
use dsagcn_core::Result;
use rand::Rng;

use super::{rng, uniform};

pub const MICRO_CLASSES: usize = 3;
pub const MICRO_WINDOW: usize = 32;

/// Same topology as the standard network at toy widths.
pub fn micro_arch() -> ArchSpec {
    ArchSpec {
        conv: vec![
            ConvStage {
                kernel: 5,
                stride: 1,
                channels: 4,
                pool: Pool::Max(2),
            },
            ConvStage {
                kernel: 3,
                stride: 1,
                channels: 4,
                pool: Pool::Adaptive(2),
            },
        ],
        fc1: 8,
        fc1_dropout: 0.5,
        graph_dropout: 0.5,
        tagcn: vec![6, 8],
        hops: 2,
        topk: None,
        discriminator_hidden: 4,
        discriminator_dropout: 0.5,
        classes: MICRO_CLASSES,
    }
}

pub fn micro_model(variant: VariantId, seed: u64) -> Model<f64> {
    build_model(variant, &micro_arch(), seed).unwrap()
}

pub fn micro_windows(n: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| uniform(&mut r, MICRO_WINDOW, -2.0, 2.0).into_iter().map(|v| v as f32).collect())
        .collect()
}

pub fn micro_labels(n: usize, seed: u64) -> Vec<usize> {
    let mut r = rng(seed ^ 0xabc);
    (0..n).map(|_| r.random_range(0..MICRO_CLASSES)).collect()
}

/// Worst `|L_total − (L_c + μ L_d + β L_third)|` over every variant and a
/// few random trade-off settings.
pub fn loss_identity_error() -> Result<f64> {
    let mut worst = 0.0f64;
    for (i, v) in VariantId::ALL.into_iter().enumerate() {
        for trial in 0..3u64 {
            let mut r = rng(i as u64 * 10 + trial);
            let cfg = TrainConfig {
                variant: v,
                mu: r.random_range(0.0..2.0),
                beta: r.random_range(0.0..2.0),
                batch_size: 4,
                seed: trial,
                ..TrainConfig::default()
            };
            let mut t = Trainer::new(micro_model(v, trial), cfg.clone())?;
            let (total, l) = t.losses(&micro_windows(4, trial), &micro_labels(4, trial), &micro_windows(4, trial + 100), 0.5)?;
            worst = worst.max((l.l_total - (l.l_c + cfg.mu * l.l_d + cfg.beta * l.l_third)).abs());
            worst = worst.max((total.item() - l.l_total).abs());
        }
    }
    Ok(worst)
}

fn max_abs_grad(params: &[(String, DiffArray<f64>)]) -> f64 {
    params
        .iter()
        .filter_map(|(_, p)| p.grad())
        .flatten()
        .fold(0.0f64, |m, g| m.max(g.abs()))
}

fn zero_all(model: &Model<f64>) {
    for (_, p) in model.named_params() {
        p.zero_grad();
    }
}

/// Gradient partition on a micro DSAGCN: returns the largest discriminator
/// gradient produced by `L_c`, the largest classifier gradient produced by
/// `L_d`, and the largest change of `L_c` under finite perturbations of the
/// discriminator weights. All three should be exactly zero.
pub fn gradient_partition() -> Result<(f64, f64, f64)> {
    let mut model = micro_model(VariantId::Dsagcn, 1);
    let n = 4;
    let mut windows = micro_windows(n, 1);
    windows.extend(micro_windows(n, 2));
    let input = windows_to_array::<f64>(&windows)?;
    let labels = micro_labels(n, 1);
    let mode = ForwardMode::train(GrlConfig::default(), 0.5);

    let lc = |m: &mut Model<f64>| -> Result<DiffArray<f64>> {
        let taps = m.forward(&input, mode, &mut rng(7))?;
        classification_loss(&taps.logits.slice_rows(0, n)?, &labels)
    };

    zero_all(&model);
    lc(&mut model)?.backward()?;
    let disc_params: Vec<_> = model.discriminator.as_ref().unwrap().params();
    let from_lc = max_abs_grad(&disc_params);

    zero_all(&model);
    let taps = model.forward(&input, mode, &mut rng(7))?;
    let p = taps.domain_probs.unwrap().reshape(&[2 * n, 1])?;
    domain_adversarial_loss(&p.slice_rows(0, n)?, &p.slice_rows(n, 2 * n)?)?.backward()?;
    let cls = vec![
        ("w".to_string(), model.classifier.weight.clone()),
        ("b".to_string(), model.classifier.bias.clone()),
    ];
    let from_ld = max_abs_grad(&cls);

    let base = no_grad(|| lc(&mut model))?.item();
    let mut probe = 0.0f64;
    for (_, p) in &disc_params {
        for i in [0, p.len() - 1] {
            let orig = p.data()[i];
            p.data_mut()[i] = orig + 1e-3;
            let moved = no_grad(|| lc(&mut model))?.item();
            p.data_mut()[i] = orig;
            probe = probe.max((moved - base).abs());
        }
    }
    Ok((from_lc, from_ld, probe))
}

/// Feature-extractor gradients of `L_d` at reversal strength `λ` divided
/// by those at `λ = 1`; returns the worst relative deviation from `λ`.
/// Also returns the largest mismatch between the `λ = 1` gradient and the
/// negated finite-difference derivative of `L_d` (which ignores reversal).
pub fn grl_scaling() -> Result<(f64, f64)> {
    let n = 4;
    let mut windows = micro_windows(n, 3);
    windows.extend(micro_windows(n, 4));
    let input = windows_to_array::<f64>(&windows)?;
    let run = |model: &mut Model<f64>, lambda: f64| -> Result<DiffArray<f64>> {
        let grl = GrlConfig {
            lambda,
            schedule: GrlSchedule::Constant,
        };
        let taps = model.forward(&input, ForwardMode::train(grl, 0.0), &mut rng(11))?;
        let p = taps.domain_probs.unwrap().reshape(&[2 * n, 1])?;
        domain_adversarial_loss(&p.slice_rows(0, n)?, &p.slice_rows(n, 2 * n)?)
    };
    let feature_grads = |model: &mut Model<f64>, lambda: f64| -> Result<Vec<f64>> {
        zero_all(model);
        run(model, lambda)?.backward()?;
        Ok(model.fc1.weight.grad().unwrap())
    };
    let mut model = micro_model(VariantId::Dsagcn, 5);
    let g1 = feature_grads(&mut model, 1.0)?;
    let mut scale_err = 0.0f64;
    for lambda in [0.5, 0.1, 2.0] {
        let gl = feature_grads(&mut model, lambda)?;
        for (a, b) in gl.iter().zip(&g1) {
            let expect = lambda * b;
            scale_err = scale_err.max((a - expect).abs() / expect.abs().max(1e-12));
        }
    }
    let w = model.fc1.weight.clone();
    let mut fd_err = 0.0f64;
    for i in [0, 7, w.len() / 2, w.len() - 1] {
        let orig = w.data()[i];
        w.data_mut()[i] = orig + 1e-6;
        let plus = no_grad(|| run(&mut model, 1.0))?.item();
        w.data_mut()[i] = orig - 1e-6;
        let minus = no_grad(|| run(&mut model, 1.0))?.item();
        w.data_mut()[i] = orig;
        let fd = (plus - minus) / 2e-6;
        fd_err = fd_err.max((g1[i] + fd).abs() / g1[i].abs().max(fd.abs()).max(1e-6));
    }
    Ok((scale_err, fd_err))
}

/// Expected component matrix: (graph, adversarial, third loss).
pub const VARIANT_TABLE: [(VariantId, bool, bool, ThirdLoss); 7] = [
    (VariantId::Dsagcn, true, true, ThirdLoss::Lmmd),
    (VariantId::Cnn, false, false, ThirdLoss::None),
    (VariantId::Baseline, true, false, ThirdLoss::None),
    (VariantId::Udacnn, false, true, ThirdLoss::Lmmd),
    (VariantId::GcMmd, true, true, ThirdLoss::Mmd),
    (VariantId::GcMkmmd, true, true, ThirdLoss::Mkmmd),
    (VariantId::GcCoral, true, true, ThirdLoss::Coral),
];

/// Checks the declared wiring, the built components, and which loss terms
/// are live for every variant. Returns a description of each mismatch.
pub fn variant_table_mismatches() -> Vec<String> {
    let mut out = Vec::new();
    for (v, graph, adv, third) in VARIANT_TABLE {
        let w = v.wiring();
        if (w.graph, w.adversarial, w.third) != (graph, adv, third) {
            out.push(format!("{v}: declared wiring {w:?}"));
        }
        let m = micro_model(v, 0);
        if m.tagcn.is_empty() == graph {
            out.push(format!("{v}: TAGCN layers present = {}", !m.tagcn.is_empty()));
        }
        if m.discriminator.is_some() != adv {
            out.push(format!("{v}: discriminator present = {}", m.discriminator.is_some()));
        }
        let cfg = TrainConfig {
            variant: v,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(m, cfg).unwrap();
        let (_, l) = t
            .losses(&micro_windows(4, 9), &micro_labels(4, 9), &micro_windows(4, 10), 0.5)
            .unwrap();
        if (l.l_d != 0.0) != adv {
            out.push(format!("{v}: L_d = {}", l.l_d));
        }
        if (l.l_third != 0.0) != (third != ThirdLoss::None) {
            out.push(format!("{v}: L_third = {}", l.l_third));
        }
    }
    out
}
