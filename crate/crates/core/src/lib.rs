//! Sequential recommendation with entropy-weighted future supervision and a
//! future-horizon contrastive term, on a small `f64` autodiff tape.
//!
//! ```
//! use ufrec::data::{split_leave_one_out, synth_markov};
//! use ufrec::eval::infer_topn;
//! use ufrec::trainer::{train_on_splits, TrainConfig};
//!
//! let corpus = synth_markov(20, 12, 8, 1)?;
//! let splits = split_leave_one_out(&corpus)?;
//! let mut bcfg = ufrec::backbone::BackboneConfig::new(corpus.num_items);
//! bcfg.dim = 8;
//! bcfg.layers = 1;
//! let fit = train_on_splits(&splits, bcfg, &TrainConfig { max_epochs: 2, ..Default::default() }, |_| Ok(()))?;
//! let top = infer_topn(&fit.best.backbone, &splits.train[0], 5)?;
//! assert_eq!(top.len(), 5);
//! # Ok::<(), ufrec::Error>(())
//! ```

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod futurecl;
pub mod futuresup;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

// The guide's code blocks run as doctests, one module per chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/tape.md")]
    mod tape {}
    #[doc = include_str!("../../../book/src/backbone.md")]
    mod backbone {}
    #[doc = include_str!("../../../book/src/future-supervision.md")]
    mod future_supervision {}
    #[doc = include_str!("../../../book/src/contrastive.md")]
    mod contrastive {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
}
