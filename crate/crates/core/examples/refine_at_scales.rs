//! Build the order-2 expansion of a scenario at chosen target scales and
//! Newton-refine each of them.
//!
//! ```text
//! cargo run --release --example refine_at_scales -- scenarios/shipped.toml 0.3 0.2
//! ```

use std::path::Path;
use std::time::Instant;

use sphereflow::scenario::Scenario;

fn main() -> sphereflow::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args.next().unwrap_or_else(|| "scenarios/shipped.toml".into());
    let targets: Vec<f64> = args.map(|v| v.parse().expect("target scales are numbers")).collect();
    let targets = if targets.is_empty() { vec![0.2] } else { targets };

    let scenario = Scenario::load(Path::new(&path))?;
    let setup = scenario.setup()?;
    let engine = setup.engine(&scenario)?.with_targets(&targets)?;

    let start = Instant::now();
    let state = engine.build(2)?;
    println!("expansion built in {:.1} s", start.elapsed().as_secs_f64());
    for order in &engine.residual_sweep(&state).orders {
        println!("N = {}: interior sup of Φ per target {:?}", order.order, order.sup);
    }
    for (i, s) in targets.iter().enumerate() {
        let start = Instant::now();
        let r = engine.newton_refine(&state, i, scenario.expansion.refine_iterations)?;
        println!(
            "s = {s}: residual {:.2e} -> {:.2e} in {} Newton steps ({:.1} s), distance to partial sums Y {:.2e}, f {:.2e}",
            r.initial_residual,
            r.final_residual,
            r.iterations,
            start.elapsed().as_secs_f64(),
            r.distance_y,
            r.distance_f
        );
    }
    Ok(())
}
