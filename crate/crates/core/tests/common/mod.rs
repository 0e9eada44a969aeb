//! Strategies and invariant checks shared by the property suite and the
//! acceptance run.
#![allow(dead_code)]

use mada::autodiff::{Tape, Var};
use mada::model::{build_objective, GraphOptions, ParamGroup};
use mada::{
    make_batches, train, Algorithm, Architecture, Batch, Dataset, Domain, MadaModel, ShareMode,
    Tensor, TrainConfig,
};
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

pub type Check = Result<(), TestCaseError>;

pub fn tensor(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |d| Tensor::new(rows, cols, d).unwrap())
}

pub fn shaped(lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    (1usize..6, 1usize..6).prop_flat_map(move |(r, c)| tensor(r, c, lo, hi))
}

pub fn share_mode() -> impl Strategy<Value = ShareMode> {
    prop_oneof![Just(ShareMode::Independent), Just(ShareMode::Partial), Just(ShareMode::Full)]
}

/// Reduces `x` to a scalar through a fixed projection so every entry gets a
/// distinct upstream gradient (`0.3 + 0.7·column`).
pub fn project(tape: &mut Tape, x: Var) -> Var {
    let cols = tape.value(x).cols();
    let w: Vec<f64> = (0..cols).map(|j| 0.3 + 0.7 * j as f64).collect();
    let w = tape.constant(Tensor::column(&w));
    let y = tape.matmul(x, w).unwrap();
    tape.sum(y)
}

pub fn small_arch() -> Architecture {
    Architecture {
        feature_hidden: vec![5],
        bottleneck_dim: 4,
        label_hidden: vec![],
        discriminator_hidden: vec![3, 3],
    }
}

pub fn batch_strategy(k: usize) -> impl Strategy<Value = Batch> {
    (1usize..4, 1usize..4).prop_flat_map(move |(ns, nt)| {
        (
            tensor(ns, 2, -2.0, 2.0),
            prop::collection::vec(0..k, ns),
            tensor(nt, 2, -2.0, 2.0),
        )
            .prop_map(|(xs, ys, xt)| Batch::new(&xs, &ys, &xt).unwrap())
    })
}

pub fn labeled(features: Tensor, labels: Vec<usize>, k: usize) -> Dataset {
    Dataset::new(features, labels.into_iter().map(Some).collect(), Domain::Source, k).unwrap()
}

pub fn softmax_normalization(x: Tensor) -> Check {
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let s = tape.softmax_rows(v).unwrap();
    let p = tape.value(s);
    for r in 0..p.rows() {
        let total: f64 = p.row(r).iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12, "row sum {}", total);
        prop_assert!(p.row(r).iter().all(|&q| (0.0..=1.0).contains(&q)));
    }
    Ok(())
}

pub fn grad_reverse_identity_and_flip(x: Tensor, lambda: f64) -> Check {
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = tape.grad_reverse(xv, lambda).unwrap();
    let fwd = tape.value(y);
    prop_assert!(fwd.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    let loss = project(&mut tape, y);
    let grads = tape.backward(loss).unwrap();
    let g = grads.wrt(xv);
    for r in 0..g.rows() {
        for c in 0..g.cols() {
            let upstream = 0.3 + 0.7 * c as f64;
            prop_assert_eq!(g.get(r, c).to_bits(), (-lambda * upstream).to_bits());
        }
    }
    Ok(())
}

/// With one-hot attention each row reaches exactly one discriminator; the
/// others see a zero row, so a discriminator with no assigned rows gets no
/// first-layer weight gradient.
pub fn one_hot_annihilation(f: Tensor, classes: Vec<usize>, batch: Batch, seed: u64) -> Check {
    let k = 3;
    let mut tape = Tape::new();
    let fv = tape.constant(f.clone());
    for c in 0..k {
        let w: Vec<f64> = classes.iter().map(|&l| if l == c { 1.0 } else { 0.0 }).collect();
        let wv = tape.constant(Tensor::column(&w));
        let out = tape.scale_rows(fv, wv).unwrap();
        let out = tape.value(out);
        for (r, &l) in classes.iter().enumerate() {
            if l == c {
                prop_assert_eq!(out.row(r), f.row(r));
            } else {
                prop_assert!(out.row(r).iter().all(|&v| v == 0.0));
            }
        }
    }

    let model = MadaModel::new(2, k, &small_arch(), k, ShareMode::Independent, seed).unwrap();
    let mut att = Tensor::zeros(batch.len(), k);
    for r in 0..batch.len() {
        att.set(r, 0, 1.0);
    }
    let options = GraphOptions { attention_flow: false, frozen_attention: Some(att) };
    let mut tape = Tape::new();
    let g = build_objective(&model, &batch, 0.5, Algorithm::Mada, &options, &mut tape).unwrap();
    let grads = tape.backward(g.loss).unwrap();
    let bank = &model.discriminators;
    let vars = g.bound.param_vars();
    let first_pool = model.params().len() - 2 * bank.pool.len();
    for c in 1..k {
        let w = vars[first_pool + 2 * bank.routes[c][0]];
        prop_assert!(grads.wrt(w).data().iter().all(|&v| v == 0.0));
    }
    Ok(())
}

/// λ = 0: the domain loss sends nothing into the feature extractor and the
/// label-path gradients equal the source-only ones.
pub fn lambda_zero_decoupling(batch: Batch, seed: u64, share: ShareMode) -> Check {
    let model = MadaModel::new(2, 3, &small_arch(), 3, share, seed).unwrap();
    let opts = GraphOptions::default();
    let mut ta = Tape::new();
    let a = build_objective(&model, &batch, 0.0, Algorithm::Mada, &opts, &mut ta).unwrap();
    let domain_only = ta.backward(a.domain_loss.unwrap()).unwrap();
    let full = ta.backward(a.loss).unwrap();
    let mut tb = Tape::new();
    let b = build_objective(&model, &batch, 0.0, Algorithm::SourceOnly, &opts, &mut tb).unwrap();
    let plain = tb.backward(b.loss).unwrap();
    let (va, vb) = (a.bound.param_vars(), b.bound.param_vars());
    for (i, group) in model.param_groups().into_iter().enumerate() {
        match group {
            ParamGroup::FeatureExtractor => {
                prop_assert!(domain_only.wrt(va[i]).data().iter().all(|&v| v == 0.0));
                prop_assert_eq!(full.wrt(va[i]), plain.wrt(vb[i]));
            }
            ParamGroup::LabelPredictor => prop_assert_eq!(full.wrt(va[i]), plain.wrt(vb[i])),
            ParamGroup::Discriminator => {}
        }
    }
    Ok(())
}

pub fn full_sharing_identity(seed: u64, steps: usize) -> Check {
    let xs = Tensor::new(8, 2, (0..16).map(|i| ((i * 7 % 11) as f64) / 5.0 - 1.0).collect()).unwrap();
    let xt = xs.map(|v| v + 0.5);
    let source = labeled(xs, (0..8).map(|i| i % 3).collect(), 3);
    let target = Dataset::new(xt, vec![None; 8], Domain::Target, 3).unwrap();
    let cfg = TrainConfig {
        share_mode: ShareMode::Full,
        architecture: small_arch(),
        total_iterations: steps,
        batch_source: 4,
        batch_target: 4,
        seed,
        eval_interval: steps,
        adist_interval: Some(0),
        ..TrainConfig::default()
    };
    let out = train(&cfg, &source, &target, None).unwrap();
    let bank = &out.model.discriminators;
    prop_assert_eq!(bank.len(), 3);
    prop_assert_eq!(bank.pool.len(), 3);
    let first = bank.discriminator(0);
    for k in 1..3 {
        prop_assert_eq!(&bank.discriminator(k), &first);
    }
    Ok(())
}

/// Same seed, same batches; source rows carry source labels only and the
/// domain column is ones then zeros.
pub fn batch_determinism(ns: usize, nt: usize, bs: usize, bt: usize, seed: u64) -> Check {
    let xs = Tensor::new(ns, 1, (0..ns).map(|i| i as f64).collect()).unwrap();
    let xt = Tensor::new(nt, 1, (0..nt).map(|i| 100.0 + i as f64).collect()).unwrap();
    let source = labeled(xs, (0..ns).map(|i| i % 2).collect(), 2);
    let target = Dataset::new(xt, vec![Some(1); nt], Domain::Target, 2).unwrap();
    let a: Vec<Batch> = make_batches(&source, &target, bs, bt, seed).unwrap().take(7).collect();
    let b: Vec<Batch> = make_batches(&source, &target, bs, bt, seed).unwrap().take(7).collect();
    prop_assert_eq!(&a, &b);
    for batch in &a {
        prop_assert_eq!(batch.source_count, bs);
        prop_assert_eq!(batch.target_count, bt);
        prop_assert_eq!(batch.class_labels.len(), bs);
        for r in 0..bs {
            let i = batch.x.get(r, 0) as usize;
            prop_assert!(i < ns);
            prop_assert_eq!(batch.class_labels[r], i % 2);
            prop_assert_eq!(batch.domain_labels.get(r, 0), 1.0);
        }
        for r in bs..bs + bt {
            prop_assert!(batch.x.get(r, 0) >= 100.0);
            prop_assert_eq!(batch.domain_labels.get(r, 0), 0.0);
        }
    }
    Ok(())
}
