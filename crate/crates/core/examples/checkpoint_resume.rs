//! Interrupts training halfway, writes a checkpoint, resumes from the file
//! and confirms the loss trajectory matches an uninterrupted run bit for bit.
//!
//! ```text
//! cargo run --release --example checkpoint_resume [out_dir]
//! ```

mod common;

use sir::data::SynthSpec;
use sir::harness::{load_train_images, splits_for, ModelStreams, Trainer};
use sir::persist::{load_checkpoint, save_checkpoint};
use sir::Config;

const HALF: u64 = 15;
const TOTAL: u64 = 30;

fn main() -> sir::Result<()> {
    let out = common::out_dir("sir-resume");
    let cfg = common::benchmark(&out.join("data"), &SynthSpec::default(), Config { batch_size: 8, ..Config::default() })?;
    let split = &splits_for(&cfg)?[0];
    let images = load_train_images(&cfg, &split.train)?;

    let mut straight = Trainer::new(&cfg, &split.name, &images, ModelStreams::base())?;
    let reference = straight.run(TOTAL, 1)?;

    let mut first = Trainer::new(&cfg, &split.name, &images, ModelStreams::base())?;
    let mut losses = first.run(HALF, 1)?;
    let path = out.join("half.ckpt");
    save_checkpoint(&first.checkpoint(&cfg), &path)?;
    let bytes = std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
    println!("checkpoint after {HALF} steps: {} ({bytes} bytes)", path.display());

    let mut resumed = Trainer::resume(&cfg, &images, ModelStreams::base(), &load_checkpoint(&path)?)?;
    losses.extend(resumed.run(TOTAL, 1)?);

    for (a, b) in reference.iter().zip(&losses).skip((HALF - 2) as usize).take(5) {
        println!("step {:>3}: uninterrupted {:.15}  resumed {:.15}", a.step, a.loss, b.loss);
    }
    let identical = reference.len() == losses.len()
        && reference.iter().zip(&losses).all(|(a, b)| a.loss.to_bits() == b.loss.to_bits());
    println!("all {TOTAL} losses bit-identical: {identical}");
    Ok(())
}
