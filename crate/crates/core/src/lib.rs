pub mod cli;
pub mod codec;
pub mod gates;
pub mod inr;
pub mod meta;
pub mod signals;
pub mod tensor;
mod wire;
