//! Command-line interface and HTTP service for the streaming NER engine.

pub mod cli;
pub mod service;
