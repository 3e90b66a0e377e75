//! Bundled test networks.

use crate::error::Result;
use crate::grid::{parse_case, Network};

/// IEEE 118-bus case text (MATPOWER format) with flow ratings filled in.
pub const IEEE118_M: &str = include_str!("../data/case118.m");

/// Two-bus lossless toy: reference bus with a generator, a 10 MW load behind
/// a line with `x = 0.1` p.u.
pub const TWO_BUS_M: &str = "\
function mpc = two_bus
mpc.baseMVA = 100;
mpc.bus = [
  1 3 0  0 0 0 1 1 0 1 1 1.1 0.9;
  2 1 10 0 0 0 1 1 0 1 1 1.1 0.9;
];
mpc.gen = [
  1 0 0 100 -100 1 100 1 200 0;
];
mpc.branch = [
  1 2 0 0.1 0 50 50 50 0 0 1 -360 360;
];
mpc.gencost = [
  2 0 0 3 0.01 20 0;
];
";

pub fn ieee118() -> Result<Network> {
    parse_case(IEEE118_M)
}

/// IEEE-118 with unit taps and no line charging, the form whose branch
/// flows follow the plain series-admittance expressions.
pub fn ieee118_plain() -> Result<Network> {
    ieee118()?.without_taps_and_charging()
}

pub fn two_bus() -> Result<Network> {
    parse_case(TWO_BUS_M)
}
