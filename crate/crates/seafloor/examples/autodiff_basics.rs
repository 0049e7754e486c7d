//! A tour of the reverse-mode tensor engine.
//!
//!     cargo run --example autodiff_basics

use seafloor::microgan::gradcheck::{check_all_elements, FD_STEP};
use seafloor::microgan::tensor::{self, Shape, Tensor};

fn main() {
    // Scalar chain rule: d/dx sigmoid(x^2) at x = 1.2.
    let x = Tensor::scalar(1.2);
    let y = tensor::sigmoid(&tensor::mul(&x, &x));
    y.backward();
    let s = 1.0 / (1.0 + (-1.44f64).exp());
    println!("autodiff  d/dx sigmoid(x^2) = {:.6}", x.grad()[0]);
    println!("analytic  2x s (1 - s)      = {:.6}", 2.0 * 1.2 * s * (1.0 - s));

    // A small composite graph checked against central finite differences.
    let a = Tensor::leaf(Shape([1, 1, 2, 3]), vec![0.3, -0.8, 1.1, 0.4, -0.2, 0.9]);
    let w = Tensor::leaf(Shape([1, 1, 3, 2]), vec![0.5, -0.3, 0.2, 0.8, -0.6, 0.1]);
    let mut build = {
        let (a, w) = (a.clone(), w.clone());
        move || {
            let h = tensor::tanh(&tensor::matmul(&a, &w));
            let p = tensor::softmax(&h);
            tensor::sum_all(&tensor::mul(&p, &p))
        }
    };
    let err = check_all_elements(&mut build, &[a, w], FD_STEP);
    println!("matmul -> tanh -> softmax gradcheck: max rel err {err:.2e}");
    assert!(err < 1e-4);

    // Gradients flow through shared nodes exactly once.
    let z = Tensor::scalar(2.0);
    let shared = tensor::mul(&z, &z);
    let out = tensor::add(&shared, &shared);
    out.backward();
    println!("d/dz 2z^2 at z=2: {} (expected 8)", z.grad()[0]);
}
