//! Co-design toolchain for a streaming CNN accelerator: model description,
//! mixed shift/fixed-point quantization, bit-exact golden inference, unroll
//! planning, resource estimation, configuration search, cycle simulation and
//! SystemVerilog emission.

pub mod engine;
pub mod model;
pub mod quant;
pub mod cost;
pub mod planner;
pub mod search;
pub mod sim;
pub mod rtl;
