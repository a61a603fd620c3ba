//! Synthetic ground-truth videos and every on-disk format.

pub mod io;
pub mod synth;
pub mod texture;

pub use io::{
    read_flow, read_labels, read_tracks, read_video, write_flow, write_labels, write_tracks, write_video,
    FLOW_HEADER_BYTES, FLOW_MAGIC, TRACK_HEADER,
};
pub use synth::{desk_suite, generate_synth, MotionModel, Occluder, OccluderSpec, SynthSample, SynthSpec, Texture};
