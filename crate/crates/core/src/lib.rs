//! Globally optimal periodic current waveforms for switched reluctance motors.
//!
//! The torque-control problem — drive a motor at constant speed so that the
//! average torque hits a target while resistive loss and torque ripple are
//! minimized — is nonconvex because flux and torque depend nonlinearly on the
//! magnetomotive force of each magnetic element. This crate approximates those
//! characteristics by continuous piecewise-affine functions, encodes the region
//! choice with one-hot binaries (a disjunctive formulation), and solves the
//! resulting mixed-integer QP to global optimality with branch and bound over
//! convex QP relaxations.
//!
//! Pipeline:
//!
//! 1. [`model`] — physical description: resistances, magnetic circuit, sampled
//!    flux characteristics, and the phase-torque surfaces derived from them.
//! 2. [`pwa`] — continuous piecewise-affine fits of flux and torque over fixed
//!    MMF breakpoints, one fit per discrete rotor angle.
//! 3. [`transcribe`] — symmetry reduction, discretization, and assembly of the
//!    standard-form MIQP (sparse equalities/inequalities, box bounds, SOS1
//!    groups).
//! 4. [`qp`] — an operator-splitting QP solver with equilibration, polishing,
//!    infeasibility certificates, and warm starts; every branch-and-bound node
//!    goes through it.
//! 5. [`persp`] — perspective reformulation of the resistive loss and the
//!    supporting-hyperplane cuts that tighten node relaxations.
//! 6. [`bnb`] — best-bound branch and bound over SOS1 region subsets, with a
//!    rounding heuristic and a certified optimality gap.
//! 7. [`verify`] — independent oracles: exhaustive enumeration on small
//!    instances, waveform re-evaluation against the sampled (non-PWA) model,
//!    and a closed-form cross-check for affine magnetics.
//! 8. [`lut`] — lookup-table sweeps over (speed, torque) with resumable cells.
//!
//! The CLI in `reluct-cli` and the Python module in `reluct-py` are thin
//! wrappers over these modules.

pub mod bnb;
pub mod model;
pub mod lut;
pub mod persp;
pub mod pwa;
pub mod qp;
pub mod sparse;
pub mod transcribe;
pub mod verify;
pub mod waveform;

pub use model::{MotorModel, SampledSurface};
pub use pwa::PwaCharacteristic;
