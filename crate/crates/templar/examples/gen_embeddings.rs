//! Regenerate the bundled embedding file from the bundled games' vocabulary.
//!
//! Collects every token the engine can emit (walkthrough replays plus a long
//! seeded random walk per game), assigns each a deterministic pseudo-random
//! 100-dimensional vector, and writes `data/embeddings_100d.txt`.
//!
//! Run from the workspace root: `cargo run --example gen_embeddings`

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use templar::text::tokenize;
use templar::world::{self, GameSpec};

const DIM: usize = 100;
const GAMES: [&str; 3] = ["microzork.json", "darkcave.json", "lockbox.json"];

fn harvest_observation(tokens: &mut BTreeSet<String>, obs: &world::RawObservation) {
    for part in [&obs.location_text, &obs.inventory_text, &obs.look_text] {
        tokens.extend(tokenize(part));
    }
}

fn harvest_game(tokens: &mut BTreeSet<String>, game: &GameSpec) {
    for t in &game.templates {
        tokens.extend(tokenize(&t.verb));
    }
    for o in &game.objects {
        tokens.extend(tokenize(&o.name));
    }
    // walkthrough replay
    let (actions, _) = world::walkthrough(game).expect("bundled walkthrough replays");
    let (mut state, obs) = world::reset(game);
    harvest_observation(tokens, &obs);
    for a in &actions {
        let (next, obs, _, _) = world::step(game, &state, a).expect("walkthrough action");
        harvest_observation(tokens, &obs);
        state = next;
    }
    // seeded random walk to reach renders the walkthrough misses
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let (mut state, obs) = world::reset(game);
        harvest_observation(tokens, &obs);
        for _ in 0..game.max_steps {
            let valid = world::valid_actions(game, &state);
            if valid.is_empty() {
                break;
            }
            let a = valid[rng.gen_range(0..valid.len())];
            let (next, obs, _, done) = world::step(game, &state, &a).expect("valid action");
            harvest_observation(tokens, &obs);
            state = next;
            if done {
                break;
            }
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn main() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let mut tokens = BTreeSet::new();
    for name in GAMES {
        let game = world::load_game_file(&root.join("games").join(name)).expect("bundled game");
        harvest_game(&mut tokens, &game);
    }

    let mut out = String::new();
    for token in &tokens {
        // per-token seed: stable regardless of collection order
        let mut rng = ChaCha8Rng::seed_from_u64(0x656d62 ^ fnv1a(token.as_bytes()));
        out.push_str(token);
        for _ in 0..DIM {
            out.push_str(&format!(" {:.6}", rng.gen_range(-0.1..0.1f64)));
        }
        out.push('\n');
    }
    let path = root.join("data/embeddings_100d.txt");
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    std::fs::write(&path, out).unwrap();
    println!("wrote {} tokens to {}", tokens.len(), path.display());
}
