//! Question-guided sub-image selection for high-resolution visual question
//! answering.
//!
//! A high-resolution image is split into a grid of native-resolution crops.
//! A relevance scorer ranks the crops against the question and only the top
//! crops, plus a low-resolution overview, are sent to the answering model.

pub mod backends;
pub mod config;
pub mod dataset;
pub mod harness;
pub mod imaging;
pub mod scoring;
pub mod selection;
pub mod synthbench;
pub mod training;
