//! Tensor and image data types, file formats and the synthetic shapes dataset.

pub mod dataset;
pub mod io;
pub mod maps;
pub mod resize;
pub mod shapes;
pub mod tensor_file;

pub use dataset::{DatasetIndex, Record, Sample, Split};
pub use io::load_image;
pub use maps::{
    AnomalyLabel, AnomalyLabelMap, AnomalyScoreMap, InstanceMap, RgbImage, SemanticMap, SoftmaxMap, VOID,
};
pub use shapes::{generate_shapes_dataset, ShapeKind, ShapesConfig};
pub use tensor_file::{load_tensor, save_tensor, TensorData};
