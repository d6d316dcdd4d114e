//! Writes a scripted mock population for trying the CLI offline.
//!
//! cargo run -p divthought-core --example synth_population -- out/pop [tasks] [seed]

use std::path::PathBuf;

use divthought::synthetic::{Population, PopulationConfig};

fn main() -> divthought::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "population".into()));
    let tasks = args.next().map_or(100, |s| s.parse().expect("task count"));
    let seed = args.next().map_or(0, |s| s.parse().expect("seed"));
    let pop = Population::generate(PopulationConfig { tasks, seed, ..Default::default() });
    pop.write_to(&dir)?;
    println!("wrote {} tasks to {}", pop.tasks.len(), dir.display());
    Ok(())
}
