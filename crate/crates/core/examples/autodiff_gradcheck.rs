//! Central-difference check of every tape primitive, plus a hand-built
//! two-layer network trained for a few steps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use task_transfer::autodiff::gradcheck::{gradcheck, primitive_cases, rand_tensor};
use task_transfer::autodiff::Tape;

fn main() -> task_transfer::Result<()> {
    for (name, gen, build) in primitive_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let worst = (0..20)
            .map(|_| {
                let inputs = gen(&mut rng);
                gradcheck(&inputs, &mut rng, build.as_ref())
            })
            .fold(0.0f64, f64::max);
        println!("{name:>14}  worst relative error {worst:.2e}");
    }

    // Fit y = sum(x) with a tanh hidden layer.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, 16, 3, -1.0, 1.0);
    let y: Vec<f64> = (0..16).map(|r| x.row_slice(r).iter().sum()).collect();
    let mut w1 = rand_tensor(&mut rng, 3, 8, -0.5, 0.5);
    let mut w2 = rand_tensor(&mut rng, 8, 1, -0.5, 0.5);
    for step in 0..=200 {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let a = t.param(w1.clone());
        let b = t.param(w2.clone());
        let h = t.matmul(xv, a)?;
        let h = t.tanh(h);
        let out = t.matmul(h, b)?;
        let yv = t.constant(task_transfer::autodiff::Tensor::new(16, 1, y.clone())?);
        let d = t.sub(out, yv)?;
        let sq = t.mul(d, d)?;
        let loss = t.mean(sq);
        t.backward(loss)?;
        if step % 50 == 0 {
            println!("step {step:3}  mse {:.5}", t.value(loss).data()[0]);
        }
        let (ga, gb) = (t.grad(a).unwrap().clone(), t.grad(b).unwrap().clone());
        for (p, g) in w1.data_mut().iter_mut().zip(ga.data()) {
            *p -= 0.1 * g;
        }
        for (p, g) in w2.data_mut().iter_mut().zip(gb.data()) {
            *p -= 0.1 * g;
        }
    }
    Ok(())
}
