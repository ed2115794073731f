//! Reverse-mode gradients against central differences for a small
//! softmax-regression loss built on the tape.
//!
//! `cargo run --example gradcheck`

use csam::autodiff::Graph;
use csam::tensor::Tensor;

fn loss(w: &Tensor, b: &Tensor, x: &Tensor, labels: &[usize]) -> (f64, Option<(Tensor, Tensor)>) {
    let mut g = Graph::new();
    let xn = g.constant(x.clone());
    let wn = g.param(w.clone());
    let bn = g.param(b.clone());
    let logits = g.affine(xn, wn, bn).unwrap();
    let ce = g.cross_entropy(logits, labels).unwrap();
    let l = g.mean(ce).unwrap();
    let value = g.value(l).item();
    let grads = g.backward(l).unwrap();
    (value, Some((grads.get(wn).unwrap().clone(), grads.get(bn).unwrap().clone())))
}

fn main() {
    let x = Tensor::matrix(4, 3, vec![0.5, -1.0, 2.0, 1.5, 0.3, -0.7, -0.2, 0.9, 0.1, 1.1, -1.3, 0.4]);
    let labels = [0, 2, 1, 2];
    let w = Tensor::matrix(3, 3, vec![0.1, -0.2, 0.3, 0.0, 0.4, -0.1, -0.3, 0.2, 0.2]);
    let b = Tensor::vector(vec![0.05, -0.05, 0.0]);

    let (value, grads) = loss(&w, &b, &x, &labels);
    let (gw, _) = grads.unwrap();
    println!("loss = {value:.6}");
    println!("{:>5} {:>14} {:>14} {:>10}", "w[i]", "backprop", "central diff", "rel err");
    let h = 1e-6;
    for i in 0..w.len() {
        let mut plus = w.clone();
        plus.data_mut()[i] += h;
        let mut minus = w.clone();
        minus.data_mut()[i] -= h;
        let fd = (loss(&plus, &b, &x, &labels).0 - loss(&minus, &b, &x, &labels).0) / (2.0 * h);
        let a = gw.data()[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-5);
        println!("{i:>5} {a:>14.8} {fd:>14.8} {rel:>10.2e}");
    }
}
