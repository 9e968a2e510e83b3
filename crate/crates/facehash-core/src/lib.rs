//! Similarity-guided hashing for face image retrieval.
//!
//! Trains a convolutional network that maps images to K-bit binary codes by
//! pairing every training image with a randomly augmented twin and optimizing
//! four objectives at once: a similarity pairing loss in a projected latent
//! space, an l2 penalty on the projections, a squared quantization loss
//! pulling pre-activations toward +-1, and an identity classification loss on
//! the relaxed codes. Retrieval binarizes with `sign` and ranks by exact
//! packed Hamming distance.
//!
//! Module map:
//! - [`datapipe`]: folder/synthetic datasets, protocol splits, batching
//! - [`augment`]: the five-stage augmentation family
//! - [`netcore`]: the network, exact forward/backward
//! - [`losses`]: the four objectives and the comparison quantization curves
//! - [`trainer`]: Adam loop, schedule, checkpoints
//! - [`hashindex`]: packed codes, Hamming search, the on-disk index
//! - [`evalkit`]: mAP@50, P@H<=2, PR curves, P@Top-M, protocol driver
//! - [`oracle`]: brute-force reference implementations for verification

pub mod augment;
mod binio;
mod colorspace;
pub mod datapipe;
mod error;
pub mod evalkit;
pub mod hashindex;
pub mod losses;
pub mod netcore;
pub mod oracle;
pub mod rng;
pub mod trainer;

pub use augment::{apply, augment_batch, sample_transform, AugmentationPolicy, TransformInstance};
pub use datapipe::{
    batch_iterator, load_image_folder, make_synthetic_dataset, split_protocol, Dataset,
    IdentityLabel, ImageTensor, LabeledBatch, SplitRole,
};
pub use error::{Error, Result};
pub use evalkit::{run_protocol, EvalReport, EvalSettings, ProtocolMode};
pub use hashindex::{binarize, hamming_distance, BinaryCode, RetrievalIndex};
pub use losses::LossWeights;
pub use netcore::{
    backward, forward_eval, forward_train, init_model, BackboneScale, ModelConfig, ModelParams,
};
pub use trainer::{
    fit, load_checkpoint, lr_at, save_checkpoint, train_step, FitOptions, TrainConfig, TrainState,
};
