//! Text-to-point-cloud localization on a synthetic city.
//!
//! A query is a handful of hint sentences ("The pose is west of a black
//! garage."). The coarse stage embeds the hints and every 30 m submap into a
//! shared 256-d space and ranks submaps by cosine similarity; the fine stage
//! regresses a 2-D offset from the center of each retrieved submap.
//!
//! ```
//! use despos::scenegen::{generate_world, Palette};
//!
//! let world = generate_world(3, [60.0, 60.0], 40, &Palette::default()).unwrap();
//! assert_eq!(world.submaps.len(), 16);
//! ```

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod fine;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod pc_encoder;
pub mod retrieval;
pub mod scenegen;
pub mod tape;
pub mod text_encoder;
pub mod training;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/scene-generation.md")]
    mod scene_generation {}
    #[doc = include_str!("../../../book/src/point-cloud-encoder.md")]
    mod point_cloud_encoder {}
    #[doc = include_str!("../../../book/src/text-encoder.md")]
    mod text_encoder {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/fine-localization.md")]
    mod fine_localization {}
    #[doc = include_str!("../../../book/src/retrieval.md")]
    mod retrieval {}
    #[doc = include_str!("../../../book/src/gradient-checking.md")]
    mod gradient_checking {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
