// SPDX-License-Identifier: Apache-2.0

pub mod adapter;
pub mod checkpoint;
pub mod embank;
pub mod episodes;
pub mod error;
pub mod harness;
pub mod infer;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod optim;
pub mod rng;
pub mod textpath;
