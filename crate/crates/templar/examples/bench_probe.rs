//! Rough component timings (dev aid).
use std::sync::Arc;
use std::time::Instant;
use templar::agent::Transition;
use templar::rcmodel::{ModelConfig, RcModel, RcModelParams};
use templar::text::{assemble_observation, EmbeddingTable, Vocab};
use templar::world;

fn main() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let game = world::load_game_file(&root.join("games/microzork.json")).unwrap();
    let embeds = EmbeddingTable::load(&root.join("data/embeddings_100d.txt"), 100, 42).unwrap();
    let mut vocab = Vocab::new();
    let lexicon = game.lexicon();
    let (state, obs) = world::reset(&game);
    let doc = assemble_observation(&obs.location_text, &obs.inventory_text, &obs.look_text, &lexicon, &mut vocab, 0);
    println!("doc len: {}", doc.len());
    let valid = world::valid_actions(&game, &state);
    println!("valid actions: {}", valid.len());
    let params = RcModelParams::init(ModelConfig::default(), 1);
    let model = RcModel::new(params.clone());

    // forward q_all
    let t0 = Instant::now();
    let reps = 20;
    for _ in 0..reps {
        let _ = model.q_all(&doc, &valid, &game.templates, &embeds, &vocab).unwrap();
    }
    println!("q_all ({} actions): {:.2} ms", valid.len(), t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    // one fwd+bwd group via batch internals: use train_step with batch 1 buffer 1
    let tx = Transition {
        doc: Arc::clone(&doc),
        action: valid[0],
        reward: 0,
        next_doc: Arc::clone(&doc),
        next_valid: Arc::new(valid.clone()),
        done: true,
        trajectory: 0,
    };
    use templar::agent::{train_step, ReplayBuffer, TargetCache, TrainConfig};
    use templar::autodiff::AdamState;
    let mut p2 = params.clone();
    let mut adam = AdamState::new(&p2.entries().into_iter().map(|(_, t)| t).collect::<Vec<_>>());
    let mut buffer = ReplayBuffer::new(4);
    buffer.push(tx);
    let mut cache = TargetCache::new();
    let cfg = TrainConfig { batch_size: 1, ..Default::default() };
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let target = RcModel::new(params.clone());
    let t0 = Instant::now();
    for _ in 0..reps {
        train_step(&mut p2, &mut adam, &target, &buffer, &game, &embeds, &vocab, &cfg, &mut cache, &mut rng).unwrap();
    }
    println!("train_step (1 distinct group, done-transition): {:.2} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    // single-template q (1 action)
    let t0 = Instant::now();
    for _ in 0..reps {
        let _ = model.q_values(&doc, &game.templates[valid[0].template.0], &[(valid[0].arg0, valid[0].arg1)], &embeds, &vocab).unwrap();
    }
    println!("q_values single action: {:.2} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);
}
