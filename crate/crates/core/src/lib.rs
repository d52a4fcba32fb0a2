pub mod banded;
pub mod eskf;
pub mod factors;
pub mod harness;
pub mod lie;
pub mod preint;
pub mod robust;
pub mod sim;
pub mod smoother;
pub mod state;
