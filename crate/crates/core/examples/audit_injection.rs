//! Client-side audit of naive versus inconspicuous injection.

use mkor::attack::fc::InjectionMode;
use mkor::fl::audit;
use mkor::fl::pipeline::{build, inject, AttackConfig};
use mkor::nn::{ModelConfig, Variant};

fn main() -> mkor::Result<()> {
    let side = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(64);
    let mut cfg = AttackConfig::new(ModelConfig::new(Variant::Vgg16Original, 100).with_input_side(side));
    let (spec, reference) = build(&cfg)?;
    for mode in [InjectionMode::Inconspicuous, InjectionMode::Naive] {
        cfg.fc_mode = mode;
        cfg.conv_mode = mode;
        let received = inject(&spec, &reference, &cfg)?.params;
        let r = audit(&reference, &received, None)?;
        println!("{:?}: peak modified fraction {:.4}", mode, r.peak_modified_fraction);
        for l in r.layers.iter().filter(|l| l.modified_fraction > 0.0) {
            println!(
                "  layer {:>2}: modified {:.4}, zeros {:.4}{}",
                l.layer,
                l.modified_fraction,
                l.zero_fraction,
                if l.flagged { "  FLAGGED" } else { "" }
            );
        }
        for f in &r.flags {
            println!("  flag: {}", f);
        }
    }
    Ok(())
}
