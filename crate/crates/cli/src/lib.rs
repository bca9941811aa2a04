//! CLI placeholder; command wiring lands with the pipeline modules.

pub fn run() -> i32 {
    0
}
