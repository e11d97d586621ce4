// SPDX-License-Identifier: Apache-2.0

//! The guide under `book/`, compiled so its snippets run as doc-tests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/banks.md")]
pub mod banks {}

#[doc = include_str!("../../../book/src/episodes.md")]
pub mod episodes {}

#[doc = include_str!("../../../book/src/adapter.md")]
pub mod adapter {}

#[doc = include_str!("../../../book/src/prompts.md")]
pub mod prompts {}

#[doc = include_str!("../../../book/src/losses.md")]
pub mod losses {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/inference.md")]
pub mod inference {}

#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}
