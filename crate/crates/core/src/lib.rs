//! Heterogeneous complementary distillation at desk scale: a small
//! reverse-mode autodiff engine, a CNN student, frozen teacher dumps, the
//! CFM / sub-logit / orthogonality losses and a training harness.

mod binfmt;
pub mod cli;
pub mod harness;
pub mod hcd;
pub mod nn;
pub mod teacher;
pub mod tensor;
