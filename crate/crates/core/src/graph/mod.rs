//! Slot and slot-value graphs and the K-hop graph attention network.

mod gat;
mod oracle;
mod topology;

pub use gat::{
    attention_matrix, attention_on_tape, gat_layer_forward, gat_stack_forward, head_aggregate, head_on_tape,
    layer_on_tape, slice_slot_outputs, Activation, GatConfig, GatHeadParams, GatLayerParams, GatStack, HeadVars,
};
pub use oracle::message_passing_oracle;
pub use topology::{build_ds_graph, build_dsv_graph, build_topology, GraphTopology, GraphType, NodeKind};
