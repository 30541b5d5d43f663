//! Depth frames, cropping, augmentation, camera geometry and datasets.

pub mod augment;
pub mod camera;
pub mod dataset;
pub mod frame;
pub mod hand;

pub use augment::{augment, augment_with, AugmentConfig, AugmentParams};
pub use camera::{uvz_to_xyz, xyz_to_uvz, CameraIntrinsics};
pub use dataset::{
    load_dataset, read_depth_png, write_depth_png, write_native, DatasetFormat, IcvlDataset, LoadOptions,
    MemoryDataset, NativeDataset, NativeMeta, SampleSource, SelectJoints, SynthDataset,
};
pub use frame::{crop_and_normalize, CropTransform, DepthFrame, RawDepth, Sample};
pub use hand::{render_capsules, synth_generate, Capsule, HandModel, HandPose, SynthSettings, SYNTH_JOINTS};
