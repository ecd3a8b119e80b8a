//! Geodesic shooting (LDDMM) toolkit for fluid-based data augmentation.
//!
//! Images live on regular 2D or 3D grids. Registration estimates an initial
//! momentum whose geodesic warps a source onto a target; convex combinations
//! of such momenta, shot to arbitrary times, generate new deformations.

pub mod augment;
pub mod error;
pub mod grid;
pub mod io;
pub mod kernel;
pub mod registration;
pub mod shooting;
pub mod subspace;
pub mod synthdata;

pub use augment::{
    atlas_segmenter, augment_test, augment_train, bspline_augment, dice, label_fusion, oneshot_synthesize,
    warp_labels, AugmentedExample, BSplineConfig, BSplineSetting, LabelMap, Lineage, MomentumCache,
    OneShotVariant, Segmenter, SoftLabelField, Subject,
};
pub use error::{Error, Result};
pub use grid::{
    compose_maps, divergence, gradient, identity_map, interpolate, jacobian_determinant,
    min_jacobian_determinant, DeformationMap, GridSpec, Interpolate, ScalarField, VectorField,
};
pub use kernel::{inner_product, smooth, GaussianComponent, KernelSpec, Smoother};
pub use registration::{
    build_momentum_set, energy, energy_gradient, register, EnergyTerms, OptimizerConfig, RegConfig, RegResult,
    ScaleLevel, Similarity,
};
pub use shooting::{epdiff_rhs, shoot, shoot_sequence, GeodesicState, ShootConfig};
pub use subspace::{
    convex_combination, draw_sample, sample_at, sample_lambda, sample_t, MomentumSet, SamplerConfig,
    SubspaceSample,
};
pub use synthdata::{generate_population, generate_scene, PerturbationScales, Shape, ShapeKind, ShapeSceneSpec};
