//! Desk-scale morph detector: network, training and evaluation, adversarial
//! attacks and relevance propagation.

pub mod nn;
pub mod attack;
pub mod lrp;
