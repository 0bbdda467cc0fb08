//! Automaton extraction from recurrent networks, and the interaction
//! theory of representational mergers.

pub mod dfa;
pub mod extraction;
pub mod harness;
pub mod plot;
pub mod rnn;
pub mod seeding;
pub mod taskgen;
pub mod theory;
