pub mod loss_check;
pub mod op_cases;
pub mod oracles;
pub mod synth;
