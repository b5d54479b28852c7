//! Desk-scale end-to-end pieces: datasets, the SGD trainer, evaluation,
//! Grad-CAM, weight files and model configs.

mod cam;
mod config;
mod data;
mod train;
mod weights;

pub use cam::{
    cam_from, decode_pnm, encode_pgm, encode_ppm, grad_cam, read_pnm, upsample_bilinear, write_pgm,
    write_ppm, CamMap,
};
pub use config::{parse_key_values, ModelConfig};
pub use data::{
    augment, gen_synthetic_multiscale, load_cifar100, parse_cifar100, prepare, shuffled,
    BoundingBox, Dataset, Standardizer, CIFAR100_CLASSES, CIFAR_RECORD, CIFAR_SIDE, GLYPH_SCALES,
    MEAN_KEY, STD_KEY,
};
pub use train::{
    argmax, evaluate, in_top_k, predict, score_logits, sgd_update, train, EpochLog, EvalReport,
    TrainConfig,
};
pub use weights::{decode_weights, encode_weights, load_weights, save_weights, MAGIC, VERSION};
