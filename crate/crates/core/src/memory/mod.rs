pub mod note;
pub mod store;

pub use note::{ErrorType, MemoryNote, NoteContent};
pub use store::{
    Hit, IntegrationOutcome, MemoryStore, QueryKind, RetrievalConfig, RetrievalResult, StoreCounters,
    StoreError,
};
