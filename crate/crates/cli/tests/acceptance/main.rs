//! End-to-end acceptance criteria. Each criterion runs once, is timed
//! against its runtime limit and prints a single PASS or FAIL line.

#[path = "../../../core/tests/common/mod.rs"]
mod vol;
#[path = "../../../ensemble/tests/common/mod.rs"]
mod ens;

mod ensemble;
mod random_walker;
mod render;
mod volume;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

struct Criterion {
    name: &'static str,
    limit: Option<Duration>,
    run: fn(),
}

const fn criterion(name: &'static str, secs: u64, run: fn()) -> Criterion {
    Criterion {
        name,
        limit: Some(Duration::from_secs(secs)),
        run,
    }
}

fn panic_message(e: &(dyn std::any::Any + Send)) -> String {
    e.downcast_ref::<String>()
        .cloned()
        .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panicked".into())
}

fn main() {
    // Nothing below may need a display or a GPU.
    std::env::remove_var("DISPLAY");
    std::env::remove_var("WAYLAND_DISPLAY");

    let criteria = [
        criterion("filter-stack I/O algebra", 10, volume::filter_stack_io),
        criterion("octree losslessness and node limit", 30, volume::octree_lossless_and_limit),
        criterion("streaming CCA exactness", 60, volume::cca_exactness),
        criterion("random walker", 120, random_walker::random_walker),
        criterion("vesselness", 60, volume::vesselness_criteria),
        criterion("MDS reconstruction", 5, ensemble::mds),
        criterion("similarity metric", 30, ensemble::similarity),
        criterion("ensemble end-to-end", 180, ensemble::end_to_end),
        criterion("parallel coordinates", 60, ensemble::parcoords),
        criterion("renderer", 120, render::renderer),
        Criterion {
            name: "determinism",
            limit: None,
            run: ensemble::determinism,
        },
        Criterion {
            name: "headless",
            limit: None,
            run: render::headless,
        },
    ];

    let mut failed = Vec::new();
    for c in &criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run));
        let took = start.elapsed();
        let verdict = match (outcome, c.limit) {
            (Err(e), _) => Err(panic_message(e.as_ref())),
            (Ok(()), Some(limit)) if took > limit => Err(format!("took {took:.1?}, limit {limit:?}")),
            (Ok(()), _) => Ok(()),
        };
        let limit = c.limit.map(|l| format!(", limit {l:?}")).unwrap_or_default();
        match verdict {
            Ok(()) => println!("PASS  {}  ({took:.2?}{limit})", c.name),
            Err(why) => {
                println!("FAIL  {}  ({took:.2?}{limit}): {why}", c.name);
                failed.push(c.name);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed.len(), criteria.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
