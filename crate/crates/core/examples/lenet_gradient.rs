//! Forward and backward pass of LeNet5 on one synthetic digit-sized image.

use mkor::datasets::synth_dataset;
use mkor::nn::engine::{logits, loss_and_gradient};
use mkor::nn::{build_model, init_params, ModelConfig, Variant};

fn main() -> mkor::Result<()> {
    let spec = build_model(&ModelConfig::new(Variant::Lenet5Original, 10))?;
    let params = init_params(&spec, 0);
    let sample = &synth_dataset(10, 1, 28, 28, 1, 0)[3];

    let z = logits(&spec, &params, &sample.image)?;
    let (loss, grad) = loss_and_gradient(&spec, &params, &sample.image, sample.label)?;
    println!(
        "{} parameters, label {}, loss {:.4}",
        spec.param_count(),
        sample.label,
        loss
    );
    println!("logits {:?}", z.iter().map(|v| format!("{:.3}", v)).collect::<Vec<_>>());
    for e in &grad.layout.entries {
        let g = &grad.values[e.range()];
        let norm = g.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        println!(
            "layer {:>2} {:<6} {:?}  |grad| {:.3e}",
            e.layer,
            e.role.as_str(),
            e.shape,
            norm
        );
    }
    Ok(())
}
