//! House-independent tables shared by every split: room and object
//! vocabularies, the room-transition prior, and the feature prototypes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

use super::{EnvError, Result};

pub const ROOM_NAMES: [&str; 8] = [
    "hallway",
    "living room",
    "kitchen",
    "dining room",
    "bedroom",
    "bathroom",
    "office",
    "laundry room",
];

pub const OBJECT_NAMES: [&str; 16] = [
    "bed",
    "pillow",
    "towel",
    "mirror",
    "sink",
    "stove",
    "fridge",
    "table",
    "chair",
    "sofa",
    "television",
    "desk",
    "lamp",
    "plant",
    "washer",
    "picture",
];

/// High-frequency objects per room type (indices into [`OBJECT_NAMES`]).
pub const TYPICAL_OBJECTS: [[usize; 3]; 8] = [
    [15, 13, 12], // hallway: picture, plant, lamp
    [9, 10, 13],  // living room: sofa, television, plant
    [5, 6, 4],    // kitchen: stove, fridge, sink
    [7, 8, 15],   // dining room: table, chair, picture
    [0, 1, 12],   // bedroom: bed, pillow, lamp
    [2, 3, 4],    // bathroom: towel, mirror, sink
    [11, 8, 12],  // office: desk, chair, lamp
    [14, 2, 4],   // laundry room: washer, towel, sink
];

/// Row `i` is the distribution over the type of a room entered through a
/// door from a room of type `i`.
pub const DEFAULT_TRANSITIONS: [[f64; 8]; 8] = [
    [0.10, 0.20, 0.10, 0.05, 0.30, 0.15, 0.05, 0.05],
    [0.25, 0.00, 0.20, 0.35, 0.05, 0.05, 0.10, 0.00],
    [0.10, 0.20, 0.00, 0.40, 0.00, 0.00, 0.00, 0.30],
    [0.20, 0.35, 0.40, 0.00, 0.00, 0.05, 0.00, 0.00],
    [0.20, 0.00, 0.00, 0.00, 0.05, 0.70, 0.05, 0.00],
    [0.20, 0.00, 0.00, 0.00, 0.60, 0.00, 0.00, 0.20],
    [0.40, 0.30, 0.00, 0.00, 0.20, 0.10, 0.00, 0.00],
    [0.30, 0.00, 0.50, 0.00, 0.00, 0.20, 0.00, 0.00],
];

/// Row-stochastic room-transition matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionPrior {
    pub id: String,
    pub rows: Vec<Vec<f64>>,
}

impl TransitionPrior {
    pub fn default_prior(num_rooms: usize) -> Self {
        let rows = (0..num_rooms)
            .map(|i| {
                let row: Vec<f64> = DEFAULT_TRANSITIONS[i][..num_rooms].to_vec();
                let s: f64 = row.iter().sum();
                if s > 0.0 {
                    row.iter().map(|v| v / s).collect()
                } else {
                    vec![1.0 / num_rooms as f64; num_rooms]
                }
            })
            .collect();
        Self {
            id: format!("default-k{num_rooms}"),
            rows,
        }
    }

    pub fn validate(&self, num_rooms: usize) -> Result<()> {
        if self.rows.len() != num_rooms {
            return Err(EnvError::Config(format!(
                "transition matrix has {} rows, expected {num_rooms}",
                self.rows.len()
            )));
        }
        for (i, row) in self.rows.iter().enumerate() {
            if row.len() != num_rooms || row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(EnvError::Config(format!("transition row {i} is malformed")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(EnvError::Config(format!(
                    "transition row {i} sums to {s}, not 1"
                )));
            }
        }
        Ok(())
    }
}

/// Instruction vocabulary. Ids 0..3 are `[PAD]`, `[UNK]`, `[MASK]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    room_ids: Vec<usize>,
    object_ids: Vec<usize>,
}

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const MASK_ID: usize = 2;

const FUNCTION_WORDS: [&str; 12] = [
    "go", "to", "the", "and", "find", "in", "walk", "there", "please", "room", "that", "is",
];

pub const VERBS: [&str; 8] = [
    "clean", "bring", "check", "touch", "wipe", "move", "inspect", "fetch",
];

impl Vocab {
    pub fn new(num_rooms: usize, num_objects: usize) -> Self {
        let mut words: Vec<String> = ["[PAD]", "[UNK]", "[MASK]"]
            .iter()
            .chain(FUNCTION_WORDS.iter())
            .chain(VERBS.iter())
            .map(|s| s.to_string())
            .collect();
        let mut room_ids = Vec::with_capacity(num_rooms);
        for name in &ROOM_NAMES[..num_rooms] {
            room_ids.push(words.len());
            words.push(room_word(name).to_string());
        }
        let mut object_ids = Vec::with_capacity(num_objects);
        for name in &OBJECT_NAMES[..num_objects] {
            object_ids.push(words.len());
            words.push(name.to_string());
        }
        Self {
            words,
            room_ids,
            object_ids,
        }
    }

    /// Room type named by a token, if any.
    pub fn room_of(&self, id: usize) -> Option<usize> {
        self.room_ids.iter().position(|&r| r == id)
    }

    /// Object class named by a token, if any.
    pub fn object_of(&self, id: usize) -> Option<usize> {
        self.object_ids.iter().position(|&o| o == id)
    }

    pub fn num_rooms(&self) -> usize {
        self.room_ids.len()
    }

    pub fn num_objects(&self) -> usize {
        self.object_ids.len()
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.words.iter().position(|w| w == word).unwrap_or(UNK_ID)
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map_or("[UNK]", String::as_str)
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.word(i)).collect::<Vec<_>>().join(" ")
    }
}

/// Distinguishing token for a room name ("living room" → "living").
pub fn room_word(name: &str) -> &str {
    name.split(' ').next().unwrap_or(name)
}

/// Surface tokens of a room name.
pub fn room_tokens(name: &str) -> Vec<&str> {
    name.split(' ').collect()
}

/// Deterministic feature prototypes for rooms and objects.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    pub rooms: Tensor,
    pub objects: Tensor,
}

impl Prototypes {
    pub fn generate(num_rooms: usize, num_objects: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rooms = Tensor::normal(&[num_rooms, dim], 1.0, &mut rng);
        let objects = Tensor::normal(&[num_objects, dim], 0.7, &mut rng);
        Self { rooms, objects }
    }

    pub fn room(&self, r: usize) -> &[f64] {
        self.rooms.row(r)
    }

    pub fn object(&self, o: usize) -> &[f64] {
        self.objects.row(o)
    }

    pub fn dim(&self) -> usize {
        self.rooms.dims2().1
    }
}
