//! The navigation model: instruction encoder, topological map, graph-aware
//! node attention, global and local cross-attention branches, room-layout
//! head, goal-imagination branch, decision fusion and object grounding.

mod model;
mod rollout;
mod topo;

pub use model::{
    cross_global, cross_local, dreamer, embed_nodes, encode_instruction, forward_step,
    fuse_decision, fuse_local_visuals, gasa, ground_objects, hop_buckets, init_params,
    layout_predict, location_features, AgentConfig, Decision, StepOutput, HOP_BUCKETS,
};
pub use rollout::{
    rollout, teacher_label, Agent, Control, Rollout, RolloutOptions, StepRecord, TraceStep,
};
pub use topo::{MapNode, NodeStatus, TopoMap};
