//! Shared fixture: the reduced backend and its first complex crossing.
#![allow(dead_code)]

use std::sync::OnceLock;

use fallsphere::discretization::{build_discretization, Discretization, DiscretizationConfig};
use fallsphere::hopf::BranchData;
use fallsphere::linop::{find_critical, CriticalPoint, CriticalSettings, SteadyFamily, Subspace};
use fallsphere::spaces::PhysicalParams;
use fallsphere::steady::SteadyState;

pub struct Setup {
    pub d: Discretization,
    pub p: PhysicalParams,
}

pub fn setup() -> &'static Setup {
    static S: OnceLock<Setup> = OnceLock::new();
    S.get_or_init(|| Setup { d: build_discretization(&DiscretizationConfig::reduced()).unwrap(), p: PhysicalParams::new(0.0, 1.0).unwrap() })
}

pub struct Critical {
    pub crit: CriticalPoint,
    pub state: SteadyState,
    pub branch: BranchData<'static>,
}

/// The m = 1 complex pair crossing between λ = 130 and 165 on the reduced
/// backend (an under-resolved but genuine discrete Hopf point).
pub fn critical() -> &'static Critical {
    static C: OnceLock<Critical> = OnceLock::new();
    C.get_or_init(|| {
        let s = setup();
        let fam = SteadyFamily::new(s.p.clone(), &s.d, vec![0, 1, 2], Subspace::Mirror);
        let cs = CriticalSettings { n_eigs: 4000, n_scan: 5, ..Default::default() };
        let crit = find_critical(&fam, 130.0, 165.0, &cs).unwrap();
        let state = fam.state(crit.lambda_c).unwrap();
        let branch = BranchData::new(state.clone(), s.p.clone(), &s.d, (-20.0, 20.0)).unwrap();
        Critical { crit, state, branch }
    })
}
