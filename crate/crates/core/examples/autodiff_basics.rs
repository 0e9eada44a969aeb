//! Builds a two-layer classifier by hand on the tape, shows a gradient
//! reversal layer and checks the tape against finite differences.

use mada::autodiff::{finite_diff_check, Tape};
use mada::Tensor;

fn main() -> mada::Result<()> {
    let x = Tensor::from_rows(&[[0.5, -1.0], [1.5, 0.25], [-0.75, 2.0]]);
    let labels = [0, 1, 1];
    let w1 = Tensor::from_rows(&[[0.2, -0.4, 0.1], [0.7, 0.3, -0.5]]);
    let b1 = Tensor::from_rows(&[[0.05, -0.1, 0.2]]);
    let w2 = Tensor::from_rows(&[[0.3, -0.2], [-0.6, 0.4], [0.1, 0.9]]);

    let loss_fn = |tape: &mut Tape, p: &[mada::Var]| {
        let xv = tape.constant(x.clone());
        let h = tape.matmul(xv, p[0])?;
        let h = tape.add_row(h, p[1])?;
        let h = tape.relu(h);
        let logits = tape.matmul(h, p[2])?;
        let probs = tape.softmax_rows(logits)?;
        tape.cross_entropy(probs, &labels)
    };

    let params = [w1.clone(), b1.clone(), w2.clone()];
    let mut tape = Tape::new();
    let vars: Vec<_> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = loss_fn(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    println!("loss = {:.6}", tape.value(loss).item());
    println!("dL/dW2 = {:?}", grads.wrt(vars[2]).data());
    println!("tape records: {}, visited in backward: {}", tape.len(), grads.records_visited());

    let err = finite_diff_check(loss_fn, &params, 1e-5)?;
    println!("max relative error vs central differences: {err:.2e}");

    // identity forward, -lambda backward
    let mut tape = Tape::new();
    let v = tape.param(Tensor::from_rows(&[[1.0, 2.0]]));
    let r = tape.grad_reverse(v, 0.5)?;
    let s = tape.sum(r);
    let g = tape.backward(s)?;
    println!("grad_reverse forward {:?}, gradient {:?}", tape.value(r).data(), g.wrt(v).data());
    Ok(())
}
