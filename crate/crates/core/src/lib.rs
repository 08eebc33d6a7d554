pub mod numerics;
pub mod encoder;
pub mod bst;
pub mod stargraph;
pub mod decoding;
pub mod oracle;
pub mod probing;
pub mod harness;
