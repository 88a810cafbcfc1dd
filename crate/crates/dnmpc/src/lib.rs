//! Decentralized real-time NMPC toolkit.
//!
//! Building blocks: a partially separable NLP layer with consensus coupling
//! (`nlp`), a dense active-set QP solver (`qp`, `kkt`), consensus ADMM with a
//! neighbor-to-neighbor message-passing variant (`admm`, `bus`), the bi-level
//! SQP driver (`dsqp`), convergence and stability certificate calculators
//! (`cert`), the coupled inverted-pendulum benchmark plant (`pendulum`), and
//! a closed-loop simulation harness (`mpc`).

pub mod admm;
pub mod bus;
pub mod cert;
pub mod config;
pub mod dsqp;
pub mod kkt;
pub mod linalg;
pub mod models;
pub mod mpc;
pub mod nlp;
pub mod pendulum;
pub mod qp;
