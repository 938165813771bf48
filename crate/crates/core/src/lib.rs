//! Surrogate-assisted neuroevolution over phenotypic distance vectors.
//!
//! Networks are encoded as differentiable Cartesian-GP genotypes ([`cgp`]) and
//! trained with mini-batch SGD. Their behaviour on the training split, the
//! flattened softmax outputs over every instance ([`phenotype`]), is the input
//! of a Gaussian-process surrogate that predicts the fully-trained error rate.
//! Two surrogates are provided: ordinary Kriging with one length-scale per
//! input dimension ([`kriging`]) and Kriging with a PLS-compressed kernel
//! ([`kpls`]) whose hyperparameter count does not grow with the input
//! dimension. [`evolution`] ties them together in a pre-selection loop.

pub mod cgp;
pub mod dataset;
pub mod evolution;
pub mod kpls;
pub mod kriging;
pub mod optim;
pub mod phenotype;
pub mod pls;
pub mod rng;

pub use cgp::{Activation, ActiveGraph, Genotype, GridConfig, MutationRates, TrainParams};
pub use dataset::{BinarizeRule, Dataset, Schema, SplitSpec};
pub use evolution::{Archive, EvolutionConfig, RunLog, SurrogateKind};
pub use kriging::{FitSpec, KrigingModel, Prediction};
pub use phenotype::PhenotypeVector;
pub use pls::PlsRotation;
