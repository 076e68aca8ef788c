#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod harness;
pub mod learned;
pub mod model;
pub mod risk;
pub mod selfcheck;
pub mod train;
