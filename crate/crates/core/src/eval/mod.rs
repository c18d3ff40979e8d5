pub mod flicker;
pub mod identity;
pub mod interpolate;
pub mod plot;
pub mod tsne;
