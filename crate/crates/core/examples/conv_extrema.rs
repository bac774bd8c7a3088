//! Copy, min and shift filters turning VGG16 features into regional extrema of the input.

use mkor::attack::conv::{build_conv_plan, inject_conv_naive, region_of, Polarity};
use mkor::datasets::synth_dataset;
use mkor::nn::engine::forward;
use mkor::nn::{build_model, init_params, ModelConfig, Variant};

fn main() -> mkor::Result<()> {
    let spec = build_model(&ModelConfig::new(Variant::Vgg16Original, 10).with_input_side(64))?;
    let plan = build_conv_plan(&spec, 3, 2, 0)?;
    let params = inject_conv_naive(&spec, &init_params(&spec, 0), &plan)?;
    println!(
        "{} considered channels, z0 {:?}, input {:?}",
        plan.channels.len(),
        plan.output_shape,
        plan.input_shape
    );

    let x = synth_dataset(1, 1, 64, 64, 3, 9).remove(0).image;
    let out = forward(&spec, &params, &x)?;
    let z = &out[spec.flatten_index().unwrap() - 1];
    for fc in plan.channels.iter().step_by(97) {
        let r = region_of(1, 0, fc.channel, &plan)?.expect("considered");
        let mut best = f32::MIN;
        for y in r.rows.0..=r.rows.1 {
            for c in r.cols.0..=r.cols.1 {
                let v = x.at(y, c, r.color);
                best = best.max(if r.polarity == Polarity::Max { v } else { 1.0 - v });
            }
        }
        println!(
            "channel {:>3} {:?} rows {:?} cols {:?} color {}: feature {:.5}, brute force {:.5}",
            fc.channel,
            r.polarity,
            r.rows,
            r.cols,
            r.color,
            z.at(1, 0, fc.channel),
            best
        );
    }
    Ok(())
}
