pub mod tensor;
pub mod graph;
pub mod model;
pub mod metrics;
pub mod dataset_io;
pub mod datagen;
pub mod training;
pub mod checkpoint;
pub mod attribution;
