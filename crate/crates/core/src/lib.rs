//! Mobile edge generation: an edge server produces a latent feature from a
//! text prompt, compresses it into a seed, and sends it over a fading channel
//! to user equipment that decodes the final image.

pub mod channel;
pub mod experiment;
pub mod genmodel;
pub mod metrics;
pub mod nn;
pub mod power;
pub mod protocol;
pub mod rng;
pub mod seedcodec;
