//! Multi-turn grounding of natural-language commands to objects on mobile
//! UI screens: corpus, simulated users, transformer agent, training and
//! evaluation.

pub mod agent;
pub mod autograd;
pub mod encoder;
pub mod eval;
pub mod generator;
pub mod ingest;
pub mod io;
pub mod live;
pub mod nn;
pub mod report;
pub mod screen;
pub mod tensor;
pub mod train;
pub mod usersim;
pub mod vocab;
