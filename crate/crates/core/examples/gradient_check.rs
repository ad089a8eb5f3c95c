//! Finite-difference check of every student gradient on the tiny model,
//! for one and three loops.
//!
//! ```text
//! cargo run --release --example gradient_check
//! ```

use sir::harness::grad_check;
use sir::Config;

fn main() -> sir::Result<()> {
    for loops in [1, 3] {
        let cfg = Config { loops, ..Config::tiny() };
        let r = grad_check(&cfg)?;
        println!("L = {loops}, loss {:.6}", r.loss);
        println!("  {:<26}{:>8}{:>14}{:>14}{:>14}", "tensor", "entries", "max |grad|", "max abs err", "max rel err");
        for c in &r.student {
            println!(
                "  {:<26}{:>8}{:>14.3e}{:>14.3e}{:>14.3e}",
                c.name, c.entries, c.max_abs_grad, c.max_abs_error, c.max_rel_error
            );
        }
        let frozen = r.teacher.iter().filter(|(_, g)| *g == 0.0).count();
        println!("  worst relative error {:.3e}; {frozen}/{} teacher tensors received no gradient\n", r.max_rel_error, r.teacher.len());
    }
    Ok(())
}
