//! Conversation graphs and the modality networks built on them: a GAT
//! teacher for text, a GCN student for audio and a GAT student for visual.

mod graph;
mod layers;
mod model;

pub use graph::{build_conversation_graph, ConvGraph, Edge, EdgeKind, PreparedGraph, DEFAULT_WINDOW};
pub use layers::{GatHead, GatLayer, GatOutput, GcnLayer};
pub use model::{student_forward, teacher_forward, GraphForward, GraphNet, GraphNetSpec, LayerKind, STUDENT_LAYERS, TEACHER_LAYERS};
