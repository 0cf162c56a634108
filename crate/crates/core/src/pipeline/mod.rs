//! End-to-end orchestration: data generation, training, inference and
//! evaluation.

pub mod config;
pub mod infer;
pub mod runlog;
pub mod session;

pub use config::Config;
pub use infer::{
    both_routes, evaluate, infer, routes_to_gm, select_route, sentence_ter, summarize, sweep_tau, Evaluation,
    Inference, Routing, Sweep, SweepRow,
};
pub use runlog::RunLog;
pub use session::{pretraining_pairs, Outputs, Phase, Session, TrainSummary};

use crate::corpus::{gen_synthetic_triplets, item_seed, Triplet};
use crate::error::Result;

/// Synthetic train, development and test splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<Triplet>,
    pub dev: Vec<Triplet>,
    pub test: Vec<Triplet>,
}

/// Generates the three splits described by `cfg`, each from its own seed.
pub fn synthetic_splits(cfg: &Config) -> Result<Splits> {
    let split = |n: usize, stream: u64| {
        let seed = item_seed(cfg.seed, stream);
        gen_synthetic_triplets(
            n,
            cfg.data.vocab_size,
            (cfg.data.min_tokens, cfg.data.max_tokens),
            &cfg.noise_spec(item_seed(seed, 1)),
            seed,
        )
    };
    Ok(Splits {
        train: split(cfg.data.train_size, 0x7472)?,
        dev: split(cfg.data.dev_size, 0x6465)?,
        test: split(cfg.data.test_size, 0x7465)?,
    })
}
