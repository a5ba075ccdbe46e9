//! Interactive debug play: read commands, step the engine, print feedback.
//! With an advisor, the top five Q-valued actions print before each prompt.

use std::io::{BufRead, Write};
use std::sync::Arc;

use anyhow::Result;

use crate::actions;
use crate::rcmodel::RcModel;
use crate::retrieval::{extend_observation, retrieve, HistoryBuffer};
use crate::text::{assemble_observation, EmbeddingTable, Vocab};
use crate::world::{self, GameSpec, RawObservation};

pub struct PlayAdvisor {
    pub model: RcModel,
    pub embeds: EmbeddingTable,
    pub k: usize,
    pub recency_only: bool,
}

fn print_observation(out: &mut impl Write, obs: &RawObservation) -> Result<()> {
    writeln!(out, "{}", obs.location_text)?;
    writeln!(out, "[inventory] {}", obs.inventory_text)?;
    writeln!(out, "[look] {}", obs.look_text)?;
    Ok(())
}

/// Run the interactive loop until the episode ends, input runs out, or the
/// player types `quit`. Returns the final score.
pub fn play_loop(
    game: &GameSpec,
    advisor: Option<PlayAdvisor>,
    input: impl BufRead,
    mut out: impl Write,
) -> Result<i64> {
    let names = game.object_names();
    let lexicon = game.lexicon();
    let mut vocab = Vocab::new();
    let mut history = HistoryBuffer::new();
    let (mut state, obs) = world::reset(game);
    let mut obs = obs;
    writeln!(out, "=== {} ===", game.name)?;
    print_observation(&mut out, &obs)?;

    let push_doc = |obs: &RawObservation,
                    step: usize,
                    history: &mut HistoryBuffer,
                    vocab: &mut Vocab| {
        let doc = assemble_observation(
            &obs.location_text,
            &obs.inventory_text,
            &obs.look_text,
            &lexicon,
            vocab,
            step,
        );
        let retrieved = retrieve(history, &doc.object_set(), advisor.as_ref().map_or(0, |a| a.k),
            advisor.as_ref().is_some_and(|a| a.recency_only));
        let ext = extend_observation(&doc, &retrieved);
        history.push(Arc::clone(&doc));
        ext
    };
    let mut ext = push_doc(&obs, 0, &mut history, &mut vocab);

    let mut lines = input.lines();
    loop {
        if state.done {
            break;
        }
        let valid = world::valid_actions(game, &state);
        if let Some(advisor) = &advisor {
            if !valid.is_empty() {
                let values = advisor.model.q_all(
                    &ext,
                    &valid,
                    &game.templates,
                    &advisor.embeds,
                    &vocab,
                )?;
                let mut ranked: Vec<(usize, f64)> =
                    values.iter().copied().enumerate().collect();
                ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
                writeln!(out, "[advice]")?;
                for (i, v) in ranked.into_iter().take(5) {
                    let text = actions::render(&valid[i], &game.templates, &names)?;
                    writeln!(out, "  {v:+.4}  {text}")?;
                }
            }
        }
        write!(out, "> ")?;
        out.flush()?;
        let Some(line) = lines.next() else {
            break;
        };
        let line = line?;
        let command = line.trim();
        if command.is_empty() {
            continue;
        }
        if command == "quit" || command == "q" {
            break;
        }
        let Some(action) = actions::parse(command, &game.templates, &names) else {
            writeln!(out, "invalid action")?;
            continue;
        };
        match world::step(game, &state, &action) {
            Err(_) => {
                writeln!(out, "invalid action")?;
                continue;
            }
            Ok((next, next_obs, reward, done)) => {
                state = next;
                obs = next_obs;
                print_observation(&mut out, &obs)?;
                if reward != 0 {
                    writeln!(out, "[reward {reward:+}] score {}", state.cumulative_score)?;
                }
                ext = push_doc(&obs, state.step_count, &mut history, &mut vocab);
                if done {
                    writeln!(out, "*** The game is over. ***")?;
                }
            }
        }
    }
    writeln!(out, "final score: {}", state.cumulative_score)?;
    Ok(state.cumulative_score)
}
