pub use q4fg_core as core;
