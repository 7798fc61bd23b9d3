//! Seeded synthetic text worlds.
//!
//! Rooms sit on a grid, so a link east from `(x, y)` always lands on
//! `(x + 1, y)` and the reverse link west exists by construction. The player
//! is the only actor that moves objects, so the rendered graph (what the
//! player has seen) never goes stale and deletions are always inferable.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::data::{StateSample, StateSnapshot};
use crate::kg::{KnowledgeGraph, Triple};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WorldGenError {
    #[error("a world needs at least one room")]
    NoRooms,
    #[error("{attr} attribute objects requested but only {total} objects")]
    TooManyAttributeObjects { attr: usize, total: usize },
    #[error("at most {max} exits per room are possible on the room grid, {requested} requested")]
    InfeasibleExits { requested: usize, max: usize },
    #[error("{requested} {what} requested but the name pool holds {available}")]
    NamePoolExhausted {
        what: &'static str,
        requested: usize,
        available: usize,
    },
    #[error("n_samples must be at least 1")]
    NoSamples,
    #[error("the initial state has no valid actions")]
    Stuck,
}

/// Planar directions used by the room grid, with unit offsets.
const GRID_DIRECTIONS: [(&str, (i32, i32)); 4] =
    [("north", (0, 1)), ("south", (0, -1)), ("east", (1, 0)), ("west", (-1, 0))];

pub fn opposite_direction(dir: &str) -> Option<&'static str> {
    Some(match dir {
        "north" => "south",
        "south" => "north",
        "east" => "west",
        "west" => "east",
        "northeast" => "southwest",
        "southwest" => "northeast",
        "northwest" => "southeast",
        "southeast" => "northwest",
        "up" => "down",
        "down" => "up",
        _ => return None,
    })
}

const ROOM_ADJECTIVES: [&str; 10] = [
    "dusty", "dark", "grand", "narrow", "cold", "quiet", "damp", "bright", "hidden", "old",
];
const ROOM_NOUNS: [&str; 12] = [
    "hall", "cellar", "kitchen", "library", "armory", "gallery", "attic", "garden", "chapel",
    "study", "vault", "corridor",
];
const OBJECT_ADJECTIVES: [&str; 10] = [
    "brass", "rusty", "silver", "wooden", "red", "small", "heavy", "golden", "cracked", "blue",
];
const PLAIN_NOUNS: [&str; 12] = [
    "coin", "key", "wire", "book", "rope", "sword", "map", "apple", "bottle", "knife", "scroll",
    "gem",
];
const CONTAINER_NOUNS: [&str; 5] = ["chest", "box", "crate", "cabinet", "basket"];
const WEARABLE_NOUNS: [&str; 5] = ["cloak", "helmet", "gloves", "boots", "scarf"];
const LIGHT_NOUNS: [&str; 4] = ["lamp", "lantern", "torch", "candle"];
const CHARACTERS: [&str; 5] = ["old man", "guard", "merchant", "cat", "wizard"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ObjectKind {
    Plain,
    Container,
    Wearable,
    Light,
}

impl ObjectKind {
    /// The attribute pair `(on-value, off-value)`, if the kind has a slot.
    pub fn attribute_slot(self) -> Option<(&'static str, &'static str)> {
        match self {
            ObjectKind::Plain => None,
            ObjectKind::Container => Some(("open", "closed")),
            ObjectKind::Wearable => Some(("worn", "removed")),
            ObjectKind::Light => Some(("lit", "unlit")),
        }
    }
}

/// Where an object is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Place {
    Room(usize),
    Player,
    /// Inside the container with this object index.
    Inside(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub name: String,
    pub position: (i32, i32),
    pub exits: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub name: String,
    pub kind: ObjectKind,
    pub portable: bool,
    pub initial: Place,
    /// Initial value of the attribute slot (`true` = open / worn / lit).
    pub initially_on: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharacterSpec {
    pub name: String,
    pub room: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub name: String,
    pub seed: u64,
    pub rooms: Vec<RoomSpec>,
    pub objects: Vec<ObjectSpec>,
    pub characters: Vec<CharacterSpec>,
    pub start_room: usize,
    /// Taking this object for the first time yields reward 1.
    pub goal: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldParams {
    pub n_rooms: usize,
    pub n_objects: usize,
    pub n_attr_objects: usize,
    pub n_characters: usize,
    pub max_exits: usize,
    /// Chance of linking two adjacent rooms beyond the spanning tree.
    pub loop_probability: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            n_rooms: 4,
            n_objects: 5,
            n_attr_objects: 3,
            n_characters: 1,
            max_exits: 4,
            loop_probability: 0.3,
        }
    }
}

pub fn generate_world(
    seed: u64,
    n_rooms: usize,
    n_objects: usize,
    n_attr_objects: usize,
) -> Result<WorldSpec, WorldGenError> {
    generate_world_with(
        seed,
        &WorldParams {
            n_rooms,
            n_objects,
            n_attr_objects,
            ..WorldParams::default()
        },
    )
}

fn draw_names(
    rng: &mut ChaCha8Rng,
    adjectives: &[&str],
    nouns: &[&str],
    n: usize,
    what: &'static str,
    taken: &mut HashSet<String>,
) -> Result<Vec<String>, WorldGenError> {
    let mut pool: Vec<String> = adjectives
        .iter()
        .flat_map(|a| nouns.iter().map(move |b| format!("{a} {b}")))
        .filter(|s| !taken.contains(s))
        .collect();
    if n > pool.len() {
        return Err(WorldGenError::NamePoolExhausted {
            what,
            requested: n,
            available: pool.len(),
        });
    }
    pool.shuffle(rng);
    pool.truncate(n);
    taken.extend(pool.iter().cloned());
    Ok(pool)
}

pub fn generate_world_with(seed: u64, p: &WorldParams) -> Result<WorldSpec, WorldGenError> {
    if p.n_rooms == 0 {
        return Err(WorldGenError::NoRooms);
    }
    if p.n_attr_objects > p.n_objects {
        return Err(WorldGenError::TooManyAttributeObjects {
            attr: p.n_attr_objects,
            total: p.n_objects,
        });
    }
    if p.max_exits > GRID_DIRECTIONS.len() || (p.max_exits == 0 && p.n_rooms > 1) {
        return Err(WorldGenError::InfeasibleExits {
            requested: p.max_exits,
            max: GRID_DIRECTIONS.len(),
        });
    }
    if p.n_characters > CHARACTERS.len() {
        return Err(WorldGenError::NamePoolExhausted {
            what: "characters",
            requested: p.n_characters,
            available: CHARACTERS.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken = HashSet::new();

    let room_names = draw_names(&mut rng, &ROOM_ADJECTIVES, &ROOM_NOUNS, p.n_rooms, "rooms", &mut taken)?;
    let mut rooms: Vec<RoomSpec> = Vec::with_capacity(p.n_rooms);
    let mut at: HashMap<(i32, i32), usize> = HashMap::new();
    rooms.push(RoomSpec {
        name: room_names[0].clone(),
        position: (0, 0),
        exits: BTreeMap::new(),
    });
    at.insert((0, 0), 0);

    let link = |rooms: &mut Vec<RoomSpec>, a: usize, b: usize, dir: &str| {
        rooms[a].exits.insert(dir.to_string(), b);
        let back = opposite_direction(dir).expect("grid direction");
        rooms[b].exits.insert(back.to_string(), a);
    };

    // Spanning tree grown by attaching each new room next to an existing one
    // that still has exit capacity.
    for name in room_names.iter().skip(1) {
        let mut frontier: Vec<(usize, &str, (i32, i32))> = Vec::new();
        for (i, r) in rooms.iter().enumerate() {
            if r.exits.len() >= p.max_exits {
                continue;
            }
            for (dir, (dx, dy)) in GRID_DIRECTIONS {
                let cell = (r.position.0 + dx, r.position.1 + dy);
                if !at.contains_key(&cell) {
                    frontier.push((i, dir, cell));
                }
            }
        }
        // A chain always has free cells at its ends, so the frontier is
        // non-empty whenever max_exits ≥ 2; with max_exits = 1 only two
        // rooms fit.
        let Some(&(from, dir, cell)) = frontier.choose(&mut rng) else {
            return Err(WorldGenError::InfeasibleExits {
                requested: p.max_exits,
                max: GRID_DIRECTIONS.len(),
            });
        };
        let id = rooms.len();
        rooms.push(RoomSpec {
            name: name.clone(),
            position: cell,
            exits: BTreeMap::new(),
        });
        at.insert(cell, id);
        link(&mut rooms, from, id, dir);
    }

    // Extra links between grid neighbours.
    for a in 0..rooms.len() {
        for (dir, (dx, dy)) in GRID_DIRECTIONS {
            let cell = (rooms[a].position.0 + dx, rooms[a].position.1 + dy);
            let Some(&b) = at.get(&cell) else { continue };
            if b < a || rooms[a].exits.contains_key(dir) {
                continue;
            }
            if rooms[a].exits.len() < p.max_exits
                && rooms[b].exits.len() < p.max_exits
                && rng.gen_bool(p.loop_probability)
            {
                link(&mut rooms, a, b, dir);
            }
        }
    }

    // Attribute objects cycle through the three kinds.
    let attr_kinds = [ObjectKind::Container, ObjectKind::Light, ObjectKind::Wearable];
    let kinds: Vec<ObjectKind> = (0..p.n_objects)
        .map(|i| {
            if i < p.n_attr_objects {
                attr_kinds[i % attr_kinds.len()]
            } else {
                ObjectKind::Plain
            }
        })
        .collect();
    let mut objects = Vec::with_capacity(p.n_objects);
    let mut by_kind: BTreeMap<ObjectKind, usize> = BTreeMap::new();
    for k in &kinds {
        *by_kind.entry(*k).or_default() += 1;
    }
    let mut names: BTreeMap<ObjectKind, Vec<String>> = BTreeMap::new();
    for (kind, n) in &by_kind {
        let nouns: &[&str] = match kind {
            ObjectKind::Plain => &PLAIN_NOUNS,
            ObjectKind::Container => &CONTAINER_NOUNS,
            ObjectKind::Wearable => &WEARABLE_NOUNS,
            ObjectKind::Light => &LIGHT_NOUNS,
        };
        names.insert(*kind, draw_names(&mut rng, &OBJECT_ADJECTIVES, nouns, *n, "objects", &mut taken)?);
    }
    let containers: Vec<usize> = kinds
        .iter()
        .enumerate()
        .filter(|(_, k)| **k == ObjectKind::Container)
        .map(|(i, _)| i)
        .collect();
    for kind in &kinds {
        let name = names.get_mut(kind).and_then(Vec::pop).expect("name drawn per object");
        let room = Place::Room(rng.gen_range(0..rooms.len()));
        let initial = match kind {
            ObjectKind::Plain if !containers.is_empty() && rng.gen_bool(0.4) => {
                Place::Inside(*containers.choose(&mut rng).expect("non-empty"))
            }
            _ => room,
        };
        objects.push(ObjectSpec {
            name,
            kind: *kind,
            portable: *kind != ObjectKind::Container,
            initial,
            initially_on: match kind {
                ObjectKind::Light => rng.gen_bool(0.5),
                // Containers start closed so their contents stay hidden.
                _ => false,
            },
        });
    }

    let mut char_names: Vec<&str> = CHARACTERS.to_vec();
    char_names.shuffle(&mut rng);
    let characters = char_names
        .into_iter()
        .take(p.n_characters)
        .map(|n| CharacterSpec {
            name: n.to_string(),
            room: rng.gen_range(0..rooms.len()),
        })
        .collect();

    let plain: Vec<usize> = (0..objects.len()).filter(|&i| objects[i].kind == ObjectKind::Plain).collect();
    let goal = plain.choose(&mut rng).copied();
    let start_room = rng.gen_range(0..rooms.len());

    Ok(WorldSpec {
        name: format!("world{seed:04}"),
        seed,
        rooms,
        objects,
        characters,
        start_room,
        goal,
    })
}

/// Two rooms, a closed chest holding a coin, and a lamp: opening the chest
/// reveals a triple that could not be read off the previous observation.
pub fn hidden_container_world() -> WorldSpec {
    let mut rooms = vec![
        RoomSpec {
            name: "cellar".into(),
            position: (0, 0),
            exits: BTreeMap::new(),
        },
        RoomSpec {
            name: "kitchen".into(),
            position: (1, 0),
            exits: BTreeMap::new(),
        },
    ];
    rooms[0].exits.insert("east".into(), 1);
    rooms[1].exits.insert("west".into(), 0);
    let obj = |name: &str, kind, initial, on| ObjectSpec {
        name: name.into(),
        kind,
        portable: kind != ObjectKind::Container,
        initial,
        initially_on: on,
    };
    WorldSpec {
        name: "chestworld".into(),
        seed: 0,
        rooms,
        objects: vec![
            obj("chest", ObjectKind::Container, Place::Room(0), false),
            obj("coin", ObjectKind::Plain, Place::Inside(0), false),
            obj("lamp", ObjectKind::Light, Place::Room(1), false),
        ],
        characters: vec![],
        start_room: 0,
        goal: Some(1),
    }
}

impl WorldSpec {
    /// East of A is B exactly when west of B is A (and so on).
    pub fn is_bidirectionally_consistent(&self) -> bool {
        self.rooms.iter().enumerate().all(|(a, r)| {
            r.exits.iter().all(|(dir, &b)| {
                opposite_direction(dir)
                    .and_then(|back| self.rooms.get(b)?.exits.get(back))
                    .is_some_and(|&x| x == a)
            })
        })
    }

    pub fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.rooms.len()];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(r) = queue.pop_front() {
            for &b in self.rooms[r].exits.values() {
                if !seen[b] {
                    seen[b] = true;
                    queue.push_back(b);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    pub fn initial_state(&self) -> GameState {
        let mut s = GameState {
            player_room: self.start_room,
            places: self.objects.iter().map(|o| o.initial).collect(),
            on: self.objects.iter().map(|o| o.initially_on).collect(),
            visited: BTreeSet::new(),
            seen_objects: BTreeSet::new(),
            seen_characters: BTreeSet::new(),
            goal_reached: false,
        };
        s.observe(self);
        s
    }
}

/// Simulator state. `visited` and the `seen_*` sets are part of the state
/// because they decide what the rendered graph shows.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GameState {
    pub player_room: usize,
    pub places: Vec<Place>,
    pub on: Vec<bool>,
    pub visited: BTreeSet<usize>,
    pub seen_objects: BTreeSet<usize>,
    pub seen_characters: BTreeSet<usize>,
    pub goal_reached: bool,
}

impl GameState {
    /// Room an object ultimately sits in, or `None` when the player carries
    /// it (directly or inside a carried container).
    fn room_of(&self, obj: usize) -> Option<usize> {
        match self.places[obj] {
            Place::Room(r) => Some(r),
            Place::Player => None,
            Place::Inside(c) => self.room_of(c),
        }
    }

    fn is_held(&self, obj: usize) -> bool {
        self.places[obj] == Place::Player
    }

    /// Objects the player can touch: in the room, carried, or inside an open
    /// container that is itself reachable.
    pub fn reachable_objects(&self, spec: &WorldSpec) -> Vec<usize> {
        (0..spec.objects.len())
            .filter(|&o| self.is_reachable(spec, o))
            .collect()
    }

    fn is_reachable(&self, spec: &WorldSpec, obj: usize) -> bool {
        match self.places[obj] {
            Place::Room(r) => r == self.player_room,
            Place::Player => true,
            Place::Inside(c) => {
                spec.objects[c].kind == ObjectKind::Container && self.on[c] && self.is_reachable(spec, c)
            }
        }
    }

    fn observe(&mut self, spec: &WorldSpec) {
        self.visited.insert(self.player_room);
        for o in self.reachable_objects(spec) {
            self.seen_objects.insert(o);
        }
        for (i, c) in spec.characters.iter().enumerate() {
            if c.room == self.player_room {
                self.seen_characters.insert(i);
            }
        }
    }
}

fn attr_triple(spec: &WorldSpec, state: &GameState, o: usize) -> Option<Triple> {
    let (on, off) = spec.objects[o].kind.attribute_slot()?;
    let v = if state.on[o] { on } else { off };
    Some(Triple::new(&spec.objects[o].name, "is", v).expect("non-empty names"))
}

/// What the player knows: their room, the exits of visited rooms, and the
/// place and attributes of every object and character they have seen.
pub fn state_to_graph(state: &GameState, spec: &WorldSpec) -> KnowledgeGraph {
    let tr = |s: &str, r: &str, o: &str| Triple::new(s, r, o).expect("non-empty names");
    let mut g = KnowledgeGraph::new();
    g.insert(tr("you", "in", &spec.rooms[state.player_room].name));
    for &r in &state.visited {
        let room = &spec.rooms[r];
        for (dir, &b) in &room.exits {
            g.insert(tr(&room.name, dir, &spec.rooms[b].name));
        }
    }
    for &o in &state.seen_objects {
        let name = &spec.objects[o].name;
        g.insert(match state.places[o] {
            Place::Room(r) => tr(name, "in", &spec.rooms[r].name),
            Place::Player => tr("you", "have", name),
            Place::Inside(c) => tr(name, "in", &spec.objects[c].name),
        });
        if let Some(t) = attr_triple(spec, state, o) {
            g.insert(t);
        }
    }
    for &c in &state.seen_characters {
        let ch = &spec.characters[c];
        g.insert(tr(&ch.name, "in", &spec.rooms[ch.room].name));
    }
    g
}

/// Every applicable template instantiation. Each one changes the state.
pub fn valid_actions(state: &GameState, spec: &WorldSpec) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for dir in spec.rooms[state.player_room].exits.keys() {
        out.insert(format!("go {dir}"));
    }
    for o in state.reachable_objects(spec) {
        let obj = &spec.objects[o];
        let name = &obj.name;
        let held = state.is_held(o);
        if obj.portable && !held {
            out.insert(format!("take {name}"));
        }
        let worn = obj.kind == ObjectKind::Wearable && state.on[o];
        if held && !worn {
            out.insert(format!("put {name} down"));
        }
        match obj.kind {
            ObjectKind::Plain => {}
            ObjectKind::Container => {
                out.insert(format!("{} {name}", if state.on[o] { "close" } else { "open" }));
            }
            ObjectKind::Light => {
                out.insert(format!("turn {} {name}", if state.on[o] { "off" } else { "on" }));
            }
            ObjectKind::Wearable if held => {
                out.insert(format!("{} {name}", if worn { "remove" } else { "wear" }));
            }
            ObjectKind::Wearable => {}
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: GameState,
    pub observation: String,
    pub reward: f64,
}

fn object_by_name(state: &GameState, spec: &WorldSpec, name: &str) -> Option<usize> {
    state
        .reachable_objects(spec)
        .into_iter()
        .find(|&o| spec.objects[o].name == name)
}

fn list_phrase(items: &[String]) -> String {
    match items {
        [] => String::new(),
        [one] => format!("a {one}"),
        _ => {
            let (last, rest) = items.split_last().expect("non-empty");
            let head: Vec<String> = rest.iter().map(|s| format!("a {s}")).collect();
            format!("{} and a {last}", head.join(", "))
        }
    }
}

/// Applies `action`. Anything outside [`valid_actions`] leaves the state as
/// it is and answers "Nothing happens."
pub fn step(state: &GameState, action: &str, spec: &WorldSpec) -> StepOutcome {
    let action = crate::text::normalize_action(action);
    let unchanged = || StepOutcome {
        state: state.clone(),
        observation: "Nothing happens.".into(),
        reward: 0.0,
    };
    if !valid_actions(state, spec).contains(&action) {
        return unchanged();
    }
    let mut next = state.clone();
    let mut reward = 0.0;
    let observation;
    if let Some(dir) = action.strip_prefix("go ") {
        next.player_room = spec.rooms[state.player_room].exits[dir];
        observation = format!("You go {dir} to the {}.", spec.rooms[next.player_room].name);
    } else if let Some(rest) = action.strip_prefix("put ") {
        let name = rest.strip_suffix(" down").unwrap_or(rest);
        let o = object_by_name(state, spec, name).expect("valid action names a reachable object");
        next.places[o] = Place::Room(state.player_room);
        observation = format!("You put the {name} down.");
    } else {
        let (verb, name) = if let Some(n) = action.strip_prefix("turn on ") {
            ("turn on", n)
        } else if let Some(n) = action.strip_prefix("turn off ") {
            ("turn off", n)
        } else {
            action.split_once(' ').expect("verb and object")
        };
        let o = object_by_name(state, spec, name).expect("valid action names a reachable object");
        match verb {
            "take" => {
                next.places[o] = Place::Player;
                observation = format!("You take the {name}.");
                if spec.goal == Some(o) && !state.goal_reached {
                    next.goal_reached = true;
                    reward = 1.0;
                }
            }
            "open" => {
                next.on[o] = true;
                let inside: Vec<String> = (0..spec.objects.len())
                    .filter(|&x| state.places[x] == Place::Inside(o))
                    .map(|x| spec.objects[x].name.clone())
                    .collect();
                observation = if inside.is_empty() {
                    format!("You open the {name}. It is empty.")
                } else {
                    format!("Opening the {name} reveals {}.", list_phrase(&inside))
                };
            }
            "close" => {
                next.on[o] = false;
                observation = format!("You close the {name}.");
            }
            "wear" => {
                next.on[o] = true;
                observation = format!("You put on the {name}.");
            }
            "remove" => {
                next.on[o] = false;
                observation = format!("You take off the {name}.");
            }
            "turn on" => {
                next.on[o] = true;
                observation = format!("The {name} is now lit.");
            }
            "turn off" => {
                next.on[o] = false;
                observation = format!("The {name} goes dark.");
            }
            _ => return unchanged(),
        }
    }
    next.observe(spec);
    StepOutcome {
        state: next,
        observation,
        reward,
    }
}

fn describe_object(spec: &WorldSpec, state: &GameState, o: usize) -> String {
    let obj = &spec.objects[o];
    match obj.kind.attribute_slot() {
        Some((on, off)) => format!("{} ({})", obj.name, if state.on[o] { on } else { off }),
        None => obj.name.clone(),
    }
}

fn attr_map(spec: &WorldSpec, state: &GameState, objs: &[usize]) -> (Value, Value) {
    let mut names = Map::new();
    let mut attrs = Map::new();
    for &o in objs {
        let obj = &spec.objects[o];
        let words: Vec<Value> = obj.name.split_whitespace().map(|w| json!(w)).collect();
        names.insert(obj.name.clone(), Value::Array(words));
        let mut a = Vec::new();
        if obj.portable {
            a.push(json!("portable"));
        }
        if let Some((on, off)) = obj.kind.attribute_slot() {
            a.push(json!(if state.on[o] { on } else { off }));
        }
        attrs.insert(obj.name.clone(), Value::Array(a));
    }
    (Value::Object(names), Value::Object(attrs))
}

/// Full dataset-style snapshot of a state, with `observation` as the text
/// that led into it.
pub fn render_snapshot(state: &GameState, spec: &WorldSpec, observation: &str) -> StateSnapshot {
    let room = &spec.rooms[state.player_room];
    let here: Vec<usize> = state
        .reachable_objects(spec)
        .into_iter()
        .filter(|&o| !state.is_held(o) && state.room_of(o) == Some(state.player_room))
        .collect();
    let held: Vec<usize> = (0..spec.objects.len()).filter(|&o| state.is_held(o)).collect();
    let people: Vec<String> = spec
        .characters
        .iter()
        .filter(|c| c.room == state.player_room)
        .map(|c| c.name.clone())
        .collect();

    let mut location_text = format!("{}.", capitalize(&room.name));
    let here_desc: Vec<String> = here.iter().map(|&o| describe_object(spec, state, o)).collect();
    if !here_desc.is_empty() {
        location_text.push_str(&format!(" You see {}.", list_phrase(&here_desc)));
    }
    if !people.is_empty() {
        location_text.push_str(&format!(" The {} is here.", people.join(" and the ")));
    }
    let exits: Vec<&str> = room.exits.keys().map(String::as_str).collect();
    if exits.is_empty() {
        location_text.push_str(" There are no exits.");
    } else {
        location_text.push_str(&format!(" Exits: {}.", exits.join(", ")));
    }

    let held_desc: Vec<String> = held.iter().map(|&o| describe_object(spec, state, o)).collect();
    let inventory_text = if held_desc.is_empty() {
        "You are empty-handed.".to_string()
    } else {
        format!("You are carrying {}.", list_phrase(&held_desc))
    };

    let (inv_objs, inv_attrs) = attr_map(spec, state, &held);
    let (sur_objs, sur_attrs) = attr_map(spec, state, &here);
    StateSnapshot {
        game: spec.name.clone(),
        location: room.name.clone(),
        location_text,
        observation: observation.to_string(),
        inventory_text,
        inventory_objects: inv_objs,
        inventory_attributes: inv_attrs,
        surrounding_objects: sur_objs,
        surrounding_attributes: sur_attrs,
        graph: state_to_graph(state, spec),
        valid_actions: valid_actions(state, spec),
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    Random,
    /// Prefers actions leading to states not yet seen this episode.
    CoverageWalk,
}

/// Episode length used by [`emit_corpus`].
pub const DEFAULT_EPISODE_LEN: usize = 40;

pub fn emit_corpus(
    spec: &WorldSpec,
    policy: Policy,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<StateSample>, WorldGenError> {
    emit_corpus_with(spec, policy, n_samples, seed, DEFAULT_EPISODE_LEN)
}

pub fn emit_corpus_with(
    spec: &WorldSpec,
    policy: Policy,
    n_samples: usize,
    seed: u64,
    episode_len: usize,
) -> Result<Vec<StateSample>, WorldGenError> {
    if n_samples == 0 {
        return Err(WorldGenError::NoSamples);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let intro = |s: &GameState| format!("You are in the {}.", spec.rooms[s.player_room].name);
    let mut state = spec.initial_state();
    if valid_actions(&state, spec).is_empty() {
        return Err(WorldGenError::Stuck);
    }
    let mut message = intro(&state);
    let mut visited: HashSet<GameState> = HashSet::from([state.clone()]);
    let mut t = 0;
    let mut out = Vec::with_capacity(n_samples);
    while out.len() < n_samples {
        if t == episode_len.max(1) {
            state = spec.initial_state();
            message = intro(&state);
            visited = HashSet::from([state.clone()]);
            t = 0;
        }
        let actions: Vec<String> = valid_actions(&state, spec).into_iter().collect();
        let action = match policy {
            Policy::Random => actions.choose(&mut rng).cloned(),
            Policy::CoverageWalk => {
                let fresh: Vec<&String> = actions
                    .iter()
                    .filter(|a| !visited.contains(&step(&state, a, spec).state))
                    .collect();
                if fresh.is_empty() {
                    actions.choose(&mut rng).cloned()
                } else {
                    fresh.choose(&mut rng).map(|a| (*a).clone())
                }
            }
        }
        // Every state has at least the reverse of the move that reached it,
        // or the object action that changed it.
        .ok_or(WorldGenError::Stuck)?;
        let prev = render_snapshot(&state, spec, &message);
        let outcome = step(&state, &action, spec);
        let next = render_snapshot(&outcome.state, spec, &outcome.observation);
        out.push(StateSample {
            prev,
            action,
            next,
            reward: outcome.reward,
        });
        visited.insert(outcome.state.clone());
        state = outcome.state;
        message = outcome.observation;
        t += 1;
    }
    Ok(out)
}

/// Breadth-first enumeration of every reachable state, up to `limit`.
/// Returns the states and whether the enumeration finished.
pub fn reachable_states(spec: &WorldSpec, limit: usize) -> (Vec<GameState>, bool) {
    let start = spec.initial_state();
    let mut seen: HashSet<GameState> = HashSet::from([start.clone()]);
    let mut order = vec![start.clone()];
    let mut queue = VecDeque::from([start]);
    while let Some(s) = queue.pop_front() {
        for a in valid_actions(&s, spec) {
            let n = step(&s, &a, spec).state;
            if seen.insert(n.clone()) {
                if order.len() >= limit {
                    return (order, false);
                }
                order.push(n.clone());
                queue.push_back(n);
            }
        }
    }
    (order, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{apply_diff, diff, infer_deletions, ApplyMode, ContradictionLexicon, DeletionRules};

    fn t(s: &str, r: &str, o: &str) -> Triple {
        Triple::new(s, r, o).unwrap()
    }

    fn tiny(seed: u64) -> WorldSpec {
        generate_world_with(
            seed,
            &WorldParams {
                n_rooms: 2,
                n_objects: 3,
                n_attr_objects: 2,
                n_characters: 1,
                max_exits: 4,
                loop_probability: 0.3,
            },
        )
        .unwrap()
    }

    #[test]
    fn same_seed_same_world() {
        assert_eq!(generate_world(7, 5, 6, 3).unwrap(), generate_world(7, 5, 6, 3).unwrap());
        assert_ne!(generate_world(7, 5, 6, 3).unwrap(), generate_world(8, 5, 6, 3).unwrap());
    }

    #[test]
    fn parameter_errors() {
        assert_eq!(generate_world(0, 0, 1, 0), Err(WorldGenError::NoRooms));
        assert!(matches!(generate_world(0, 2, 1, 2), Err(WorldGenError::TooManyAttributeObjects { .. })));
        let p = WorldParams {
            max_exits: 5,
            ..WorldParams::default()
        };
        assert!(matches!(generate_world_with(0, &p), Err(WorldGenError::InfeasibleExits { .. })));
        let p = WorldParams {
            n_rooms: 3,
            max_exits: 1,
            ..WorldParams::default()
        };
        assert!(matches!(generate_world_with(0, &p), Err(WorldGenError::InfeasibleExits { .. })));
    }

    #[test]
    fn room_graphs_consistent_and_connected() {
        for seed in 0..1000 {
            let w = generate_world(seed, 1 + (seed as usize % 9), 4, 2).unwrap();
            assert!(w.is_bidirectionally_consistent(), "seed {seed}");
            assert!(w.is_connected(), "seed {seed}");
            assert!(w.rooms.iter().all(|r| r.exits.len() <= 4));
        }
    }

    #[test]
    fn single_room_has_no_navigation() {
        let w = generate_world(3, 1, 3, 1).unwrap();
        let (states, done) = reachable_states(&w, 100_000);
        assert!(done);
        for s in states {
            assert!(valid_actions(&s, &w).iter().all(|a| !a.starts_with("go ")));
        }
    }

    #[test]
    fn holding_renders_possession() {
        let w = hidden_container_world();
        let s = step(&w.initial_state(), "go east", &w).state;
        let s = step(&s, "take lamp", &w).state;
        let g = state_to_graph(&s, &w);
        assert!(g.contains(&t("you", "in", "kitchen")));
        assert!(g.contains(&t("you", "have", "lamp")));
        assert!(!g.contains(&t("lamp", "in", "kitchen")));
    }

    #[test]
    fn take_moves_object_and_put_down_is_absent_before() {
        let w = hidden_container_world();
        let s0 = step(&w.initial_state(), "go east", &w).state;
        let acts = valid_actions(&s0, &w);
        assert!(acts.contains("take lamp"));
        assert!(!acts.contains("put lamp down"));
        let s1 = step(&s0, "take lamp", &w).state;
        let d = diff(&state_to_graph(&s0, &w), &state_to_graph(&s1, &w));
        assert_eq!(d.additions(), &BTreeSet::from([t("you", "have", "lamp")]));
        assert_eq!(d.deletions(), &BTreeSet::from([t("lamp", "in", "kitchen")]));
    }

    #[test]
    fn invalid_action_changes_nothing() {
        let w = hidden_container_world();
        let s = w.initial_state();
        let out = step(&s, "dance wildly", &w);
        assert_eq!(out.state, s);
        assert_eq!(out.observation, "Nothing happens.");
        assert!(diff(&state_to_graph(&s, &w), &state_to_graph(&out.state, &w)).is_empty());
    }

    #[test]
    fn opening_chest_reveals_contents() {
        let w = hidden_container_world();
        let s0 = w.initial_state();
        let g0 = state_to_graph(&s0, &w);
        assert!(g0.contains(&t("chest", "is", "closed")));
        assert!(!g0.iter().any(|x| x.subject() == "coin"));
        let out = step(&s0, "open chest", &w);
        assert!(out.observation.contains("coin"));
        let g1 = state_to_graph(&out.state, &w);
        let d = diff(&g0, &g1);
        assert!(d.additions().contains(&t("coin", "in", "chest")));
        assert!(d.additions().contains(&t("chest", "is", "open")));
        assert_eq!(d.deletions(), &BTreeSet::from([t("chest", "is", "closed")]));
        assert!(valid_actions(&out.state, &w).contains("take coin"));
        let took = step(&out.state, "take coin", &w);
        assert_eq!(took.reward, 1.0);
        assert_eq!(step(&step(&took.state, "put coin down", &w).state, "take coin", &w).reward, 0.0);
    }

    #[test]
    fn exhaustive_tiny_worlds() {
        let rules = DeletionRules::default();
        for seed in 0..6 {
            let w = tiny(seed);
            let (states, done) = reachable_states(&w, 200_000);
            assert!(done, "seed {seed} state space too large");
            let compass0: BTreeSet<Triple> = BTreeSet::new();
            let _ = compass0;
            for s in &states {
                let g = state_to_graph(s, &w);
                // One place per entity.
                let mut places: HashMap<&str, usize> = HashMap::new();
                for x in g.iter() {
                    match x.relation() {
                        "in" => *places.entry(x.subject()).or_default() += 1,
                        "have" => *places.entry(x.object()).or_default() += 1,
                        _ => {}
                    }
                }
                assert!(places.values().all(|&n| n == 1), "{g:?}");
                for a in valid_actions(s, &w) {
                    let n = step(s, &a, &w).state;
                    assert_ne!(&n, s, "`{a}` did not change the state");
                    let g1 = state_to_graph(&n, &w);
                    let d = diff(&g, &g1);
                    assert_eq!(&rules.infer_deletions(&g, d.additions()), d.deletions(), "`{a}`");
                    // Compass edges are never removed.
                    assert!(d.deletions().iter().all(|x| opposite_direction(x.relation()).is_none()));
                }
            }
        }
    }

    #[test]
    fn corpus_samples_are_consistent() {
        let w = generate_world(11, 4, 6, 3).unwrap();
        for policy in [Policy::Random, Policy::CoverageWalk] {
            let c = emit_corpus(&w, policy, 300, 5).unwrap();
            assert_eq!(c.len(), 300);
            assert_eq!(c, emit_corpus(&w, policy, 300, 5).unwrap());
            for s in &c {
                assert!(s.prev.valid_actions.contains(&s.action));
                let d = diff(&s.prev.graph, &s.next.graph);
                assert_eq!(apply_diff(&s.prev.graph, &d, ApplyMode::Strict).unwrap(), s.next.graph);
                assert_eq!(
                    &infer_deletions(&s.prev.graph, d.additions(), &ContradictionLexicon::default()),
                    d.deletions()
                );
            }
        }
        assert_eq!(emit_corpus(&w, Policy::Random, 0, 0), Err(WorldGenError::NoSamples));
    }

    #[test]
    fn coverage_walk_visits_more_states() {
        let w = generate_world(4, 6, 6, 3).unwrap();
        let distinct = |p| {
            let c = emit_corpus_with(&w, p, 200, 1, 200).unwrap();
            c.iter().map(|s| s.next.graph.clone()).collect::<BTreeSet<_>>().len()
        };
        assert!(distinct(Policy::CoverageWalk) >= distinct(Policy::Random));
    }
}
