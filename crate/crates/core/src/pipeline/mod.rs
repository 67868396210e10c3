//! Projection heads, the audio front-end, optimization, and the training loop.

pub mod checkpoint;
pub mod evaluate;
pub mod frontend;
pub mod head;
pub mod optim;
pub mod train;
