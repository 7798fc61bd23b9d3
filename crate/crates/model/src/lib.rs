pub mod beam;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod features;
pub mod gradcheck;
pub mod invariants;
pub mod loss;
pub mod network;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod tape;
pub mod tensor;
pub mod train;
