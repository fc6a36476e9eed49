//! The tape in isolation: fit a two-layer network to a toy regression with
//! AdamW, and compare its gradients against central differences.

use lad::tensor::nn::{self, Init};
use lad::tensor::{grad_check, AdamW, AdamWConfig, ParamSet, Tape, Tensor, TensorError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> lad::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut params = ParamSet::new();
    {
        let mut init = Init::new(&mut params, &mut rng);
        init.head("net", 3, 16, 1);
    }
    let x = Tensor::normal(&[32, 3], 1.0, &mut rng);
    let y = Tensor::new(
        vec![32, 1],
        (0..32).map(|i| (x.get(i, 0) * x.get(i, 1)).sin() + 0.5 * x.get(i, 2)).collect(),
    )?;

    let loss = |tape: &mut Tape, ps: &ParamSet| -> Result<_, TensorError> {
        let input = tape.constant(x.clone());
        let target = tape.constant(y.clone());
        let pred = nn::feed_forward(tape, ps, "net", input)?;
        let diff = tape.sub(pred, target)?;
        let sq = tape.mul(diff, diff)?;
        Ok(tape.mean(sq))
    };

    let err: f64 = grad_check(&params, 1e-5, None, loss)?;
    println!("worst relative gradient error: {err:.2e}");

    let mut opt = AdamW::new(AdamWConfig { lr: 1e-2, ..AdamWConfig::default() });
    for step in 0..=500 {
        let mut tape = Tape::new();
        let l = loss(&mut tape, &params)?;
        let grads = tape.backward(l)?;
        if step % 100 == 0 {
            println!("step {step:>3}  mse {:.5}", tape.scalar_value(l));
        }
        opt.step(&mut params, &grads)?;
    }
    Ok(())
}
