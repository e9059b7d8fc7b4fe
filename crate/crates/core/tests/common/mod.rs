#![allow(dead_code)]

use std::path::Path;
use std::sync::OnceLock;

use promptlab::pretrain::{load_or_pretrain, PretrainConfig};
use promptlab::Backbone;

/// Pretrained desk-scale backbone, cached on disk across test binaries.
pub fn desk_backbone() -> &'static Backbone {
    static BACKBONE: OnceLock<Backbone> = OnceLock::new();
    BACKBONE.get_or_init(|| {
        let config = PretrainConfig::default();
        let path = Path::new(env!("CARGO_TARGET_TMPDIR")).join(config.checkpoint_name());
        load_or_pretrain(&config, &path).expect("pretraining succeeds")
    })
}
