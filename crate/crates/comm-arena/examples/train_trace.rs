//! Per-epoch training trace for one run, printed live. Handy for watching
//! learning dynamics without waiting for a full campaign.
//!
//! ```sh
//! cargo run --release --example train_trace -- private_comm 300 0
//! ```

use comm_arena::env::{EnvConfig, Mode};
use comm_arena::training::{TrainerState, TrainingConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.len() < 4 {
        eprintln!("usage: train_trace <mode> <epochs> <seed>");
        std::process::exit(2);
    }
    let mode = Mode::parse(&args[1]).unwrap_or_else(|e| {
        eprintln!("{e}");
        std::process::exit(2);
    });
    let epochs: usize = args[2].parse().expect("epochs");
    let seed: u64 = args[3].parse().expect("seed");

    let config = TrainingConfig::with_epochs(epochs);
    let mut trainer = TrainerState::new(config, EnvConfig::new(mode), seed).unwrap();
    let mut peak = f64::NEG_INFINITY;
    let mut peak_epoch = 0;
    for epoch in 0..epochs {
        let outcome = trainer.train_epoch().unwrap();
        let r = &outcome.record;
        if r.mean_predator_reward > peak {
            peak = r.mean_predator_reward;
            peak_epoch = epoch;
        }
        println!(
            "epoch {epoch}: predators {:.2} prey {:.2} eps {:.3} peak {:.2} (epoch {peak_epoch})",
            r.mean_predator_reward, r.mean_prey_reward, r.epsilon, peak
        );
    }
}
