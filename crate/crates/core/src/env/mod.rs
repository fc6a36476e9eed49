//! Procedural house graphs, referring-expression episodes, observations and
//! shortest-path planning.
//!
//! Every generator is a pure function of its config and seed.

mod dataset;
mod episode;
mod house;
mod observe;
mod planner;
mod world;

pub use dataset::{
    generate_dataset, mix_seed, read_jsonl, write_jsonl, DataConfig, Dataset, SCHEMA_VERSION,
};
pub use episode::{
    parse_instruction, render_instruction, sample_episode, Episode, EpisodeConfig,
    InstructionTarget, TEMPLATES,
};
pub use house::{
    generate_house, heading, sector_of, Edge, GenConfig, HouseGraph, NavNode, NodeId,
    ObjectInstance, Room, Split,
};
pub use observe::{observe, NeighborView, Observation};
pub use planner::{
    dijkstra_plan, house_distances, shortest_distances, teacher_next, teacher_next_with, Plan,
    PlanGraph,
};
pub use world::{
    room_tokens, room_word, Prototypes, TransitionPrior, Vocab, DEFAULT_TRANSITIONS, MASK_ID,
    OBJECT_NAMES, PAD_ID, ROOM_NAMES, TYPICAL_OBJECTS, UNK_ID, VERBS,
};

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("unknown node {0}")]
    UnknownNode(usize),
    #[error("corrupt data: {0}")]
    Corrupt(String),
    #[error("node {to} unreachable from {from}")]
    Unreachable { from: usize, to: usize },
    #[error("episode sampling failed: {0}")]
    Sampling(String),
    #[error("instruction names no room and object: `{0}`")]
    Instruction(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EnvError>;
