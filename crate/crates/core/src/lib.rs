pub mod tensor;
pub mod scene;
pub mod render;
pub mod features;
pub mod mask;
pub mod colorxfer;
pub mod controls;
pub mod styleloss;
pub mod refine;
pub mod pipeline;
