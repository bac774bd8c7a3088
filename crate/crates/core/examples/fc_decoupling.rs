//! Decouple LeNet's classifier and read each class's input back from one summed gradient.

use mkor::attack::fc::{expected_unique_count, inject_fc_inconspicuous, reconstruct_fc_inputs, FcInjectConfig};
use mkor::datasets::{make_batch, synth_dataset, BatchSpec};
use mkor::fl::pipeline::prepare_batch;
use mkor::fl::{client_update, DefenseConfig};
use mkor::nn::engine::forward;
use mkor::nn::{build_model, init_params, ModelConfig, Variant};

fn main() -> mkor::Result<()> {
    let spec = build_model(&ModelConfig::new(Variant::Lenet5Modified, 10))?;
    let (params, map) = inject_fc_inconspicuous(&spec, &init_params(&spec, 0), &FcInjectConfig::default())?;
    println!(
        "{} chains, sink class {:?}; a random batch of 12 over 10 classes holds {:.2} singletons on average",
        map.chains.len(),
        map.sink_class,
        expected_unique_count(12, &[0.1; 10])?
    );

    let data = synth_dataset(10, 4, 28, 28, 1, 3);
    let batch = prepare_batch(&make_batch(&data, &BatchSpec::random(12, 5))?, &spec)?;
    let update = client_update(&spec, &params, &batch, &DefenseConfig::default(), 1)?;
    let flat = spec.flatten_index().unwrap() - 1;
    for rec in reconstruct_fc_inputs(&update, &map, None)? {
        let members: Vec<_> = batch.iter().filter(|d| d.label == rec.class).collect();
        if !rec.present {
            println!("class {:>2}: absent ({} samples)", rec.class, members.len());
            continue;
        }
        // plain mean of the members' classifier inputs; a single sample is recovered exactly
        let mut avg = vec![0.0f64; rec.z.len()];
        for m in &members {
            for (a, v) in avg.iter_mut().zip(forward(&spec, &params, &m.image)?[flat].data()) {
                *a += *v as f64 / members.len() as f64;
            }
        }
        let err = rec
            .z
            .iter()
            .zip(&avg)
            .map(|(z, a)| (*z as f64 - a).powi(2))
            .sum::<f64>()
            .sqrt()
            / avg.iter().map(|a| a * a).sum::<f64>().sqrt();
        println!(
            "class {:>2}: {} samples, d = {:+.3e}, twin {}, relative distance to member mean {:.2e}",
            rec.class,
            members.len(),
            rec.denominator,
            rec.used_twin,
            err
        );
    }
    Ok(())
}
