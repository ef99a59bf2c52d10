pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod losses;
pub mod model;
pub mod optim;
pub mod probe;
pub mod rng;
pub mod trainer;
pub mod tensor;
pub mod volume;
