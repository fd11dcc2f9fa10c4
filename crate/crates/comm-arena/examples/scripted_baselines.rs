//! Reward levels of hand-written reference policies, useful for placing
//! learned scores on an absolute scale.
//!
//! ```sh
//! cargo run --release --example scripted_baselines
//! ```

use comm_arena::env::{self, Action, EnvConfig, Mode, WorldState, PREDATORS, PREY};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy)]
enum PredatorScript {
    ChaseOwnTarget,
    ChaseNearest,
    ChaseMidpoint,
    Random,
}

#[derive(Clone, Copy)]
enum PreyScript {
    Random,
    FleeNearest,
}

fn toward(state: &WorldState, agent: usize, point: [f64; 2]) -> Action {
    let dx = point[0] - state.positions[agent][0];
    let dy = point[1] - state.positions[agent][1];
    if dx.abs() > dy.abs() {
        if dx > 0.0 {
            Action::PosX
        } else {
            Action::NegX
        }
    } else if dy > 0.0 {
        Action::PosY
    } else {
        Action::NegY
    }
}

fn away(state: &WorldState, agent: usize, point: [f64; 2]) -> Action {
    match toward(state, agent, point) {
        Action::PosX => Action::NegX,
        Action::NegX => Action::PosX,
        Action::PosY => Action::NegY,
        Action::NegY => Action::PosY,
        Action::NoOp => Action::NoOp,
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn episode(
    predators: PredatorScript,
    prey: PreyScript,
    rng: &mut ChaCha8Rng,
    config: &EnvConfig,
) -> f64 {
    let mut state = env::reset(config, rng);
    let mut total = 0.0;
    loop {
        let mut actions = [Action::NoOp; 4];
        for p in PREDATORS {
            let own = state.positions[p];
            actions[p] = match predators {
                PredatorScript::ChaseOwnTarget => {
                    toward(&state, p, state.positions[PREY[state.targets[p]]])
                }
                PredatorScript::ChaseNearest => {
                    let d2 = dist(own, state.positions[PREY[0]]);
                    let d3 = dist(own, state.positions[PREY[1]]);
                    toward(&state, p, state.positions[if d2 < d3 { PREY[0] } else { PREY[1] }])
                }
                PredatorScript::ChaseMidpoint => {
                    let mid = [
                        0.5 * (state.positions[PREY[0]][0] + state.positions[PREY[1]][0]),
                        0.5 * (state.positions[PREY[0]][1] + state.positions[PREY[1]][1]),
                    ];
                    toward(&state, p, mid)
                }
                PredatorScript::Random => Action::from_index(rng.gen_range(0..5)).unwrap(),
            };
        }
        for q in PREY {
            actions[q] = match prey {
                PreyScript::Random => Action::from_index(rng.gen_range(0..5)).unwrap(),
                PreyScript::FleeNearest => {
                    let d0 = dist(state.positions[q], state.positions[PREDATORS[0]]);
                    let d1 = dist(state.positions[q], state.positions[PREDATORS[1]]);
                    let nearest = if d0 < d1 { PREDATORS[0] } else { PREDATORS[1] };
                    away(&state, q, state.positions[nearest])
                }
            };
        }
        let out = env::step(&state, &actions, config).unwrap();
        total += out.predator_reward;
        state = out.next_state;
        if out.done {
            return total;
        }
    }
}

fn main() {
    let config = EnvConfig::new(Mode::NoComm);
    let episodes = 2000;
    let cases = [
        (PredatorScript::ChaseOwnTarget, "chase own target"),
        (PredatorScript::ChaseNearest, "chase nearest"),
        (PredatorScript::ChaseMidpoint, "chase midpoint"),
        (PredatorScript::Random, "random"),
    ];
    println!("mean predator episode reward over {episodes} episodes:");
    for (script, label) in cases {
        for (prey, prey_label) in [(PreyScript::Random, "random prey"), (PreyScript::FleeNearest, "fleeing prey")] {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mean: f64 = (0..episodes)
                .map(|_| episode(script, prey, &mut rng, &config))
                .sum::<f64>()
                / episodes as f64;
            println!("  {label:18} vs {prey_label:13} {mean:8.2}");
        }
    }
}
