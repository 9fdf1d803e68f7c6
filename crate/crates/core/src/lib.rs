pub mod command;
pub mod event;
pub mod image;
pub mod narrator;
pub mod overhead;
pub mod planner;
pub mod rng;
pub mod scenario;
pub mod session;
pub mod slam;
pub mod stereo;
pub mod world;
