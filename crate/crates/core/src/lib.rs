pub mod copy_tree;
pub mod durable_log;
pub mod file_layer;
pub mod harness;
pub mod kv_cache;
pub mod scheduler;
pub mod simnet;
pub mod transport;
