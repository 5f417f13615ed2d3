pub mod agents;
pub mod backend;
pub mod clock;
pub mod engine;
pub mod eval;
pub mod fixtures;
pub mod memory;
pub mod pool;
pub mod table;
