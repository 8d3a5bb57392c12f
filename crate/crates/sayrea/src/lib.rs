//! Service layer around `sayrea-core`: the HTTP API, the data directory and
//! the chat-completion backend.

pub mod api;
pub mod backend;
pub mod store;
