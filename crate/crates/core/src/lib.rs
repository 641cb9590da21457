//! CR-Swin2-VT: a volumetric segmentation transformer that runs shifted-window
//! and cross-shaped-window attention side by side in its encoder, trained with
//! Dice, cross-entropy and a virtual-adversarial smoothness term.

pub mod attention;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod volume_io;
pub mod windowing;
