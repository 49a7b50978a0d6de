pub mod adapters;
pub mod bench;
pub mod canon;
pub mod events;
pub mod model;
pub mod pipeline;
pub mod store;
pub mod vote;
pub mod watch;
