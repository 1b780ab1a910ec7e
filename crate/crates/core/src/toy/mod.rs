// SPDX-License-Identifier: MIT OR Apache-2.0

//! Desk-scale stand-in for a CLIP image encoder: a fixed, seeded vision
//! transformer, a vocabulary-embedding zero-shot head, and synthetic images
//! with planted class, attribute and typographic signals.

pub mod data;
pub mod head;
pub mod vit;
pub mod world;

pub use data::{synth_vision_dataset, typographic_attack, SynthVisionSpec, VisionData, VisionSample};
pub use head::{read_head, write_head, VocabularyHead};
pub use vit::{ForwardTrace, ToyVit, ToyVitConfig};
pub use world::ToyWorld;
