pub mod alto;
pub mod analytics;
pub mod cli;
pub mod cocoset;
pub mod detect;
pub mod embedstore;
pub mod evalmap;
pub mod geometry;
pub mod pipeline;
