pub mod data;
pub mod experiments;
pub mod gif;
pub mod mca2;
pub mod metrics;
pub mod model;
pub mod synthetic;
pub mod tensor;
pub mod text;
