//! Deterministic synthetic interactive-fiction engine.
//!
//! Games are declared in JSON (rooms, objects, verb templates, reward
//! events) and compiled into a [`GameSpec`]. The engine is RNG-free: a spec
//! plus an action sequence fixes every state, observation and reward.
//! `valid_actions` enumerates exactly the actions `step` will accept,
//! standing in for the valid-action handicap of real IF benchmarks.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::actions::{self, Template, TemplateAction, TplId};
pub use crate::actions::ObjId;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("invalid action: {0}")]
    InvalidAction(String),
    #[error("episode is over")]
    EpisodeOver,
    #[error("walkthrough invalid at step {step}: {reason}")]
    WalkthroughInvalid { step: usize, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn invalid(msg: impl Into<String>) -> WorldError {
    WorldError::Validation(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RoomId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Direction {
    North,
    South,
    East,
    West,
    Up,
    Down,
}

impl Direction {
    pub const ALL: [Direction; 6] = [
        Direction::North,
        Direction::South,
        Direction::East,
        Direction::West,
        Direction::Up,
        Direction::Down,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::North => "north",
            Direction::South => "south",
            Direction::East => "east",
            Direction::West => "west",
            Direction::Up => "up",
            Direction::Down => "down",
        }
    }

    pub fn from_str(s: &str) -> Option<Self> {
        Direction::ALL.iter().copied().find(|d| d.as_str() == s)
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct Room {
    pub id: String,
    pub description: String,
    pub dark: bool,
    /// Sorted by direction for deterministic rendering.
    pub exits: Vec<(Direction, RoomId)>,
}

impl Room {
    pub fn exit(&self, dir: Direction) -> Option<RoomId> {
        self.exits.iter().find(|(d, _)| *d == dir).map(|(_, r)| *r)
    }
}

/// Where an object currently is (or starts).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Place {
    Room(RoomId),
    Container(ObjId),
    Inventory,
}

#[derive(Debug, Clone)]
pub struct ObjectSpec {
    pub id: String,
    pub name: String,
    pub takeable: bool,
    pub container: bool,
    pub locked_by: Option<ObjId>,
    pub reveals: Option<ObjId>,
    pub light_source: bool,
    pub location: Place,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trigger {
    EnterRoom(RoomId),
    Take(ObjId),
    Unlock(ObjId, Option<ObjId>),
    Open(ObjId),
}

#[derive(Debug, Clone)]
pub struct RewardEvent {
    pub id: String,
    pub trigger: Trigger,
    pub reward: i64,
    pub once: bool,
}

/// What a verb template does in the engine's effect table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerbKind {
    Move(Direction),
    Take,
    Drop,
    Open,
    Unlock,
    TurnOn,
    TurnOff,
}

impl VerbKind {
    pub fn of(verb: &str) -> Option<VerbKind> {
        if let Some(d) = Direction::from_str(verb) {
            return Some(VerbKind::Move(d));
        }
        match verb {
            "take OBJ" => Some(VerbKind::Take),
            "drop OBJ" => Some(VerbKind::Drop),
            "open OBJ" => Some(VerbKind::Open),
            "unlock OBJ with OBJ" => Some(VerbKind::Unlock),
            "turn on OBJ" => Some(VerbKind::TurnOn),
            "turn off OBJ" => Some(VerbKind::TurnOff),
            _ => None,
        }
    }

    fn arity(self) -> u8 {
        match self {
            VerbKind::Move(_) => 0,
            VerbKind::Unlock => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GameSpec {
    pub name: String,
    pub max_steps: usize,
    pub start_room: RoomId,
    pub rooms: Vec<Room>,
    pub objects: Vec<ObjectSpec>,
    pub templates: Vec<Template>,
    pub verb_kinds: Vec<VerbKind>,
    pub reward_events: Vec<RewardEvent>,
    pub walkthrough: Vec<String>,
}

impl GameSpec {
    pub fn object_names(&self) -> Vec<String> {
        self.objects.iter().map(|o| o.name.clone()).collect()
    }

    /// Lexicon over the object names, for span detection.
    pub fn lexicon(&self) -> crate::text::Lexicon {
        crate::text::Lexicon::new(
            self.objects
                .iter()
                .enumerate()
                .map(|(i, o)| (o.name.clone(), ObjId(i))),
        )
    }
}

// ---------------------------------------------------------------------------
// JSON schema
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGame {
    name: String,
    max_steps: usize,
    start_room: String,
    rooms: Vec<RawRoom>,
    objects: Vec<RawObject>,
    templates: Vec<RawTemplate>,
    reward_events: Vec<RawEvent>,
    #[serde(default)]
    walkthrough: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRoom {
    id: String,
    description: String,
    #[serde(default)]
    dark: bool,
    exits: BTreeMap<String, String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawObject {
    id: String,
    name: String,
    #[serde(default)]
    takeable: bool,
    #[serde(default)]
    container: bool,
    #[serde(default)]
    locked_by: Option<String>,
    #[serde(default)]
    reveals: Option<String>,
    #[serde(default)]
    light_source: bool,
    location: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTemplate {
    verb: String,
    arity: u8,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEvent {
    id: String,
    trigger: String,
    target: String,
    #[serde(default)]
    with: Option<String>,
    reward: i64,
    once: bool,
}

/// Parse and validate a game spec from JSON text.
pub fn load_game(text: &str) -> Result<GameSpec, WorldError> {
    let raw: RawGame = serde_json::from_str(text)?;
    if raw.max_steps < 1 {
        return Err(invalid("max_steps must be at least 1"));
    }

    let mut room_ids: HashMap<&str, RoomId> = HashMap::new();
    for (i, r) in raw.rooms.iter().enumerate() {
        if room_ids.insert(&r.id, RoomId(i)).is_some() {
            return Err(invalid(format!("duplicate room id {:?}", r.id)));
        }
        if r.description.trim().is_empty() {
            return Err(invalid(format!("room {:?} has empty description", r.id)));
        }
    }
    let start_room = *room_ids
        .get(raw.start_room.as_str())
        .ok_or_else(|| invalid(format!("start_room {:?} does not exist", raw.start_room)))?;

    let mut obj_ids: HashMap<&str, ObjId> = HashMap::new();
    let mut names_seen: HashMap<String, &str> = HashMap::new();
    for (i, o) in raw.objects.iter().enumerate() {
        if obj_ids.insert(&o.id, ObjId(i)).is_some() {
            return Err(invalid(format!("duplicate object id {:?}", o.id)));
        }
        let lower = o.name.to_lowercase();
        let words = lower.split_whitespace().count();
        if !(1..=3).contains(&words) {
            return Err(invalid(format!(
                "object {:?} name must be one to three words",
                o.id
            )));
        }
        if let Some(prev) = names_seen.insert(lower, &o.id) {
            return Err(invalid(format!(
                "objects {:?} and {:?} share a name",
                prev, o.id
            )));
        }
    }

    let rooms: Vec<Room> = raw
        .rooms
        .iter()
        .map(|r| {
            let mut exits = Vec::new();
            for (dir, target) in &r.exits {
                let d = Direction::from_str(dir)
                    .ok_or_else(|| invalid(format!("room {:?}: unknown direction {dir:?}", r.id)))?;
                let t = room_ids.get(target.as_str()).copied().ok_or_else(|| {
                    invalid(format!("room {:?}: exit to nonexistent room {target:?}", r.id))
                })?;
                exits.push((d, t));
            }
            exits.sort_by_key(|(d, _)| *d);
            Ok(Room {
                id: r.id.clone(),
                description: r.description.clone(),
                dark: r.dark,
                exits,
            })
        })
        .collect::<Result<_, WorldError>>()?;

    let objects: Vec<ObjectSpec> = raw
        .objects
        .iter()
        .map(|o| {
            let locked_by = o
                .locked_by
                .as_ref()
                .map(|k| {
                    obj_ids.get(k.as_str()).copied().ok_or_else(|| {
                        invalid(format!("object {:?}: unknown key {k:?}", o.id))
                    })
                })
                .transpose()?;
            let reveals = o
                .reveals
                .as_ref()
                .map(|r| {
                    obj_ids.get(r.as_str()).copied().ok_or_else(|| {
                        invalid(format!("object {:?}: unknown reveals target {r:?}", o.id))
                    })
                })
                .transpose()?;
            if (locked_by.is_some() || reveals.is_some()) && !o.container {
                return Err(invalid(format!(
                    "object {:?}: locked_by/reveals require a container",
                    o.id
                )));
            }
            let location = if o.location == "INVENTORY" {
                Place::Inventory
            } else if let Some(&r) = room_ids.get(o.location.as_str()) {
                Place::Room(r)
            } else if let Some(&c) = obj_ids.get(o.location.as_str()) {
                Place::Container(c)
            } else {
                return Err(invalid(format!(
                    "object {:?}: unknown location {:?}",
                    o.id, o.location
                )));
            };
            Ok(ObjectSpec {
                id: o.id.clone(),
                name: o.name.clone(),
                takeable: o.takeable,
                container: o.container,
                locked_by,
                reveals,
                light_source: o.light_source,
                location,
            })
        })
        .collect::<Result<_, WorldError>>()?;

    for (i, o) in objects.iter().enumerate() {
        if let Place::Container(c) = o.location {
            if !objects[c.0].container {
                return Err(invalid(format!(
                    "object {:?} is located in non-container {:?}",
                    o.id, objects[c.0].id
                )));
            }
            if c.0 == i {
                return Err(invalid(format!("object {:?} contains itself", o.id)));
            }
        }
        if let Some(inner) = o.reveals {
            if objects[inner.0].location != Place::Container(ObjId(i)) {
                return Err(invalid(format!(
                    "object {:?} reveals {:?} which does not start inside it",
                    o.id, objects[inner.0].id
                )));
            }
        }
    }

    let mut templates = Vec::new();
    let mut verb_kinds = Vec::new();
    for (i, t) in raw.templates.iter().enumerate() {
        let kind = VerbKind::of(&t.verb)
            .ok_or_else(|| invalid(format!("template {:?} has no engine semantics", t.verb)))?;
        if actions::placeholder_count(&t.verb) != t.arity as usize || kind.arity() != t.arity {
            return Err(invalid(format!(
                "template {:?} arity mismatch (declared {})",
                t.verb, t.arity
            )));
        }
        templates.push(Template::new(TplId(i), t.verb.clone(), t.arity));
        verb_kinds.push(kind);
    }

    let mut event_ids: HashMap<&str, ()> = HashMap::new();
    let reward_events: Vec<RewardEvent> = raw
        .reward_events
        .iter()
        .map(|e| {
            if event_ids.insert(&e.id, ()).is_some() {
                return Err(invalid(format!("duplicate event id {:?}", e.id)));
            }
            let obj = |name: &str| {
                obj_ids.get(name).copied().ok_or_else(|| {
                    invalid(format!("event {:?}: unknown object {name:?}", e.id))
                })
            };
            let trigger = match e.trigger.as_str() {
                "enter_room" => {
                    let r = room_ids.get(e.target.as_str()).copied().ok_or_else(|| {
                        invalid(format!("event {:?}: unknown room {:?}", e.id, e.target))
                    })?;
                    Trigger::EnterRoom(r)
                }
                "take" => Trigger::Take(obj(&e.target)?),
                "open" => Trigger::Open(obj(&e.target)?),
                "unlock" => {
                    let with = e.with.as_ref().map(|w| obj(w)).transpose()?;
                    Trigger::Unlock(obj(&e.target)?, with)
                }
                other => return Err(invalid(format!("unknown trigger {other:?}"))),
            };
            if e.with.is_some() && e.trigger != "unlock" {
                return Err(invalid(format!(
                    "event {:?}: `with` only applies to unlock triggers",
                    e.id
                )));
            }
            Ok(RewardEvent {
                id: e.id.clone(),
                trigger,
                reward: e.reward,
                once: e.once,
            })
        })
        .collect::<Result<_, WorldError>>()?;

    let spec = GameSpec {
        name: raw.name,
        max_steps: raw.max_steps,
        start_room,
        rooms,
        objects,
        templates,
        verb_kinds,
        reward_events,
        walkthrough: raw.walkthrough,
    };

    // Walkthrough commands must parse against the bundled templates/objects.
    let names = spec.object_names();
    for (i, cmd) in spec.walkthrough.iter().enumerate() {
        if actions::parse(cmd, &spec.templates, &names).is_none() {
            return Err(invalid(format!(
                "walkthrough step {}: unparseable command {cmd:?}",
                i + 1
            )));
        }
    }

    Ok(spec)
}

pub fn load_game_file(path: &Path) -> Result<GameSpec, WorldError> {
    load_game(&std::fs::read_to_string(path)?)
}

// ---------------------------------------------------------------------------
// State and dynamics
// ---------------------------------------------------------------------------

/// Hidden simulator state. A pure value: `step` returns a new state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorldState {
    pub current_room: RoomId,
    pub object_locations: Vec<Place>,
    pub open: Vec<bool>,
    pub locked: Vec<bool>,
    pub lit: Vec<bool>,
    pub fired_events: Vec<bool>,
    pub step_count: usize,
    pub cumulative_score: i64,
    pub done: bool,
}

/// The three text parts of one observation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawObservation {
    pub location_text: String,
    pub inventory_text: String,
    pub look_text: String,
}

const PITCH_BLACK: &str = "It is pitch black.";

fn article(name: &str) -> &'static str {
    match name.chars().next() {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

/// Whether the agent can see: the room is lit, or a carried light source is on.
pub fn perceivable(spec: &GameSpec, state: &WorldState) -> bool {
    if !spec.rooms[state.current_room.0].dark {
        return true;
    }
    spec.objects.iter().enumerate().any(|(i, o)| {
        o.light_source && state.lit[i] && state.object_locations[i] == Place::Inventory
    })
}

/// Objects the agent can currently see, in spec order. Empty in darkness.
pub fn visible_objects(spec: &GameSpec, state: &WorldState) -> Vec<ObjId> {
    if !perceivable(spec, state) {
        return Vec::new();
    }
    let n = spec.objects.len();
    let mut visible = vec![false; n];
    // Fixpoint over containment: an object is visible if it sits in the room
    // or inside a visible open container.
    loop {
        let mut changed = false;
        for i in 0..n {
            if visible[i] {
                continue;
            }
            let v = match state.object_locations[i] {
                Place::Room(r) => r == state.current_room,
                Place::Container(c) => visible[c.0] && state.open[c.0],
                Place::Inventory => false,
            };
            if v {
                visible[i] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    (0..n).filter(|&i| visible[i]).map(ObjId).collect()
}

fn carried_objects(state: &WorldState) -> Vec<ObjId> {
    state
        .object_locations
        .iter()
        .enumerate()
        .filter(|(_, p)| **p == Place::Inventory)
        .map(|(i, _)| ObjId(i))
        .collect()
}

fn object_state_sentence(spec: &GameSpec, state: &WorldState, id: ObjId) -> Option<String> {
    let o = &spec.objects[id.0];
    if o.container {
        let s = if state.locked[id.0] {
            "locked"
        } else if state.open[id.0] {
            "open"
        } else {
            "closed"
        };
        return Some(format!("The {} is {}.", o.name, s));
    }
    if o.light_source && state.lit[id.0] {
        return Some(format!("The {} is lit.", o.name));
    }
    None
}

fn look_text(spec: &GameSpec, state: &WorldState) -> String {
    if !perceivable(spec, state) {
        return PITCH_BLACK.to_string();
    }
    let room = &spec.rooms[state.current_room.0];
    let mut parts = vec![room.description.clone()];
    for id in visible_objects(spec, state) {
        let o = &spec.objects[id.0];
        parts.push(format!("You see {} {}.", article(&o.name), o.name));
        if let Some(s) = object_state_sentence(spec, state, id) {
            parts.push(s);
        }
    }
    let dirs: Vec<&str> = room.exits.iter().map(|(d, _)| d.as_str()).collect();
    if dirs.is_empty() {
        parts.push("There are no exits.".to_string());
    } else {
        parts.push(format!("Exits: {}.", dirs.join(", ")));
    }
    parts.join(" ")
}

fn inventory_text(spec: &GameSpec, state: &WorldState) -> String {
    let carried = carried_objects(state);
    if carried.is_empty() {
        return "You are carrying nothing.".to_string();
    }
    let items: Vec<String> = carried
        .iter()
        .map(|id| {
            let o = &spec.objects[id.0];
            format!("{} {}", article(&o.name), o.name)
        })
        .collect();
    let mut text = format!("You are carrying: {}.", items.join(", "));
    for id in carried {
        let o = &spec.objects[id.0];
        if o.light_source && state.lit[id.0] {
            text.push_str(&format!(" The {} is lit.", o.name));
        }
    }
    text
}

fn observe(spec: &GameSpec, state: &WorldState, location_text: String) -> RawObservation {
    RawObservation {
        location_text,
        inventory_text: inventory_text(spec, state),
        look_text: look_text(spec, state),
    }
}

/// Start an episode: state at the start room with initial object placement.
pub fn reset(spec: &GameSpec) -> (WorldState, RawObservation) {
    let n = spec.objects.len();
    let state = WorldState {
        current_room: spec.start_room,
        object_locations: spec.objects.iter().map(|o| o.location).collect(),
        open: vec![false; n],
        locked: spec.objects.iter().map(|o| o.locked_by.is_some()).collect(),
        lit: vec![false; n],
        fired_events: vec![false; spec.reward_events.len()],
        step_count: 0,
        cumulative_score: 0,
        done: false,
    };
    let look = look_text(spec, &state);
    let obs = observe(spec, &state, look);
    (state, obs)
}

/// Exactly the actions `step` accepts in this state, in deterministic order:
/// template order, then arg0 in spec object order, then arg1.
pub fn valid_actions(spec: &GameSpec, state: &WorldState) -> Vec<TemplateAction> {
    let mut out = Vec::new();
    if state.done {
        return out;
    }
    let percv = perceivable(spec, state);
    let room = &spec.rooms[state.current_room.0];
    let visible = visible_objects(spec, state);
    let carried = carried_objects(state);
    for (t, kind) in spec.templates.iter().zip(&spec.verb_kinds) {
        match kind {
            VerbKind::Move(d) => {
                if room.exit(*d).is_some() {
                    out.push(TemplateAction::nullary(t.id));
                }
            }
            _ if !percv => {} // in the dark, only movement
            VerbKind::Take => {
                for &o in &visible {
                    if spec.objects[o.0].takeable {
                        out.push(TemplateAction::unary(t.id, o));
                    }
                }
            }
            VerbKind::Drop => {
                for &o in &carried {
                    out.push(TemplateAction::unary(t.id, o));
                }
            }
            VerbKind::Open => {
                for &o in &visible {
                    if spec.objects[o.0].container && !state.locked[o.0] && !state.open[o.0] {
                        out.push(TemplateAction::unary(t.id, o));
                    }
                }
            }
            VerbKind::Unlock => {
                for &o in &visible {
                    if spec.objects[o.0].container && state.locked[o.0] {
                        for &k in &carried {
                            if spec.objects[o.0].locked_by == Some(k) {
                                out.push(TemplateAction::binary(t.id, o, k));
                            }
                        }
                    }
                }
            }
            VerbKind::TurnOn => {
                for &o in visible.iter().chain(&carried) {
                    if spec.objects[o.0].light_source && !state.lit[o.0] {
                        out.push(TemplateAction::unary(t.id, o));
                    }
                }
            }
            VerbKind::TurnOff => {
                for &o in visible.iter().chain(&carried) {
                    if spec.objects[o.0].light_source && state.lit[o.0] {
                        out.push(TemplateAction::unary(t.id, o));
                    }
                }
            }
        }
    }
    out
}

/// Apply one action. Fails on finished episodes and on actions outside
/// [`valid_actions`].
pub fn step(
    spec: &GameSpec,
    state: &WorldState,
    action: &TemplateAction,
) -> Result<(WorldState, RawObservation, i64, bool), WorldError> {
    if state.done {
        return Err(WorldError::EpisodeOver);
    }
    if !valid_actions(spec, state).contains(action) {
        let text = actions::render(action, &spec.templates, &spec.object_names())
            .unwrap_or_else(|_| format!("{action:?}"));
        return Err(WorldError::InvalidAction(text));
    }

    let mut next = state.clone();
    let kind = spec.verb_kinds[action.template.0];
    let feedback;
    match kind {
        VerbKind::Move(d) => {
            let target = spec.rooms[state.current_room.0]
                .exit(d)
                .expect("validated by valid_actions");
            next.current_room = target;
            // in darkness only darkness is reported; otherwise the room's
            // lead sentence (the full render is in the look part)
            feedback = if perceivable(spec, &next) {
                spec.rooms[target.0].description.clone()
            } else {
                PITCH_BLACK.to_string()
            };
        }
        VerbKind::Take => {
            let o = action.arg0.unwrap();
            next.object_locations[o.0] = Place::Inventory;
            feedback = "Taken.".to_string();
        }
        VerbKind::Drop => {
            let o = action.arg0.unwrap();
            next.object_locations[o.0] = Place::Room(next.current_room);
            feedback = "Dropped.".to_string();
        }
        VerbKind::Open => {
            let o = action.arg0.unwrap();
            next.open[o.0] = true;
            let name = &spec.objects[o.0].name;
            feedback = match spec.objects[o.0].reveals {
                Some(inner) if next.object_locations[inner.0] == Place::Container(o) => {
                    let inner_name = &spec.objects[inner.0].name;
                    format!(
                        "You open the {name}, revealing {} {inner_name}.",
                        article(inner_name)
                    )
                }
                _ => format!("You open the {name}."),
            };
        }
        VerbKind::Unlock => {
            let o = action.arg0.unwrap();
            let k = action.arg1.unwrap();
            next.locked[o.0] = false;
            feedback = format!(
                "You unlock the {} with the {}.",
                spec.objects[o.0].name, spec.objects[k.0].name
            );
        }
        VerbKind::TurnOn => {
            let o = action.arg0.unwrap();
            next.lit[o.0] = true;
            feedback = format!("You turn on the {}.", spec.objects[o.0].name);
        }
        VerbKind::TurnOff => {
            let o = action.arg0.unwrap();
            next.lit[o.0] = false;
            feedback = format!("You turn off the {}.", spec.objects[o.0].name);
        }
    }

    let mut reward = 0;
    for (i, ev) in spec.reward_events.iter().enumerate() {
        if ev.once && next.fired_events[i] {
            continue;
        }
        let hit = match ev.trigger {
            Trigger::EnterRoom(r) => {
                matches!(kind, VerbKind::Move(_))
                    && next.current_room == r
                    && perceivable(spec, &next)
            }
            Trigger::Take(o) => kind == VerbKind::Take && action.arg0 == Some(o),
            Trigger::Open(o) => kind == VerbKind::Open && action.arg0 == Some(o),
            Trigger::Unlock(o, with) => {
                kind == VerbKind::Unlock
                    && action.arg0 == Some(o)
                    && with.map_or(true, |w| action.arg1 == Some(w))
            }
        };
        if hit {
            reward += ev.reward;
            if ev.once {
                next.fired_events[i] = true;
            }
        }
    }

    next.step_count += 1;
    next.cumulative_score += reward;
    let once_events: Vec<usize> = spec
        .reward_events
        .iter()
        .enumerate()
        .filter(|(_, e)| e.once)
        .map(|(i, _)| i)
        .collect();
    let all_fired = !once_events.is_empty() && once_events.iter().all(|&i| next.fired_events[i]);
    next.done = next.step_count >= spec.max_steps || all_fired;

    let obs = observe(spec, &next, feedback);
    let done = next.done;
    Ok((next, obs, reward, done))
}

/// Replay the spec's walkthrough from reset; the engine is the score oracle.
pub fn walkthrough(spec: &GameSpec) -> Result<(Vec<TemplateAction>, i64), WorldError> {
    let names = spec.object_names();
    let mut parsed = Vec::new();
    for (i, cmd) in spec.walkthrough.iter().enumerate() {
        let action = actions::parse(cmd, &spec.templates, &names).ok_or_else(|| {
            WorldError::WalkthroughInvalid {
                step: i + 1,
                reason: format!("unparseable command {cmd:?}"),
            }
        })?;
        parsed.push(action);
    }
    let (mut state, _) = reset(spec);
    for (i, action) in parsed.iter().enumerate() {
        if state.done {
            return Err(WorldError::WalkthroughInvalid {
                step: i + 1,
                reason: "episode ended before the walkthrough finished".to_string(),
            });
        }
        match step(spec, &state, action) {
            Ok((next, _, _, _)) => state = next,
            Err(e) => {
                return Err(WorldError::WalkthroughInvalid {
                    step: i + 1,
                    reason: e.to_string(),
                })
            }
        }
    }
    Ok((parsed, state.cumulative_score))
}
