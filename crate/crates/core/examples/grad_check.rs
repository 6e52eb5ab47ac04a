//! Reverse-mode autodiff on the tape, validated against central finite
//! differences. The same machinery backs every gradient in training.
//!
//!     cargo run -p ralm --example grad_check

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ralm::tensor::{finite_difference_grad, max_rel_err_with_floor, Tape, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let x = Tensor::randn(&[4, 6], 0.5, &mut rng);
    let w = Tensor::randn(&[6, 3], 0.5, &mut rng).with_grad();
    let b = Tensor::randn(&[3], 0.5, &mut rng).with_grad();

    // loss(W) = logsumexp(gelu(x W + b)) as one scalar.
    let loss_of = |w_data: &[f64]| -> Result<f64, ralm::tensor::TensorError> {
        let mut tape = Tape::new();
        let xt = tape.leaf(&x);
        let wt = tape.constant(&[6, 3], w_data.to_vec())?;
        let bt = tape.leaf(&b);
        let h = tape.matmul(xt, wt)?;
        let h = tape.add_row_bias(h, bt)?;
        let h = tape.gelu(h);
        let flat = tape.reshape(h, &[12])?;
        let loss = tape.log_sum_exp(flat)?;
        Ok(tape.value(loss)[0])
    };

    // Analytic gradient from one backward pass.
    let mut tape = Tape::new();
    let xt = tape.leaf(&x);
    let wt = tape.leaf(&w);
    let bt = tape.leaf(&b);
    let h = tape.matmul(xt, wt)?;
    let h = tape.add_row_bias(h, bt)?;
    let h = tape.gelu(h);
    let flat = tape.reshape(h, &[12])?;
    let loss = tape.log_sum_exp(flat)?;
    let grads = tape.backward(loss)?;
    let analytic = grads.get(wt).expect("w requires grad");

    let numeric = finite_difference_grad(loss_of, w.data(), 1e-5)?;
    let err = max_rel_err_with_floor(analytic, &numeric, 1e-6);

    println!("loss                 {:+.12}", tape.value(loss)[0]);
    println!("d loss / d W[0][0]   {:+.12}", analytic[0]);
    println!("max relative error   {err:.3e}  (over {} entries)", numeric.len());
    assert!(err < 1e-6, "analytic and numeric gradients disagree");
    println!("gradient check passed");
    Ok(())
}
