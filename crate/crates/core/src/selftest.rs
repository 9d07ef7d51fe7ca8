//! Fast built-in oracle checks, run by the `selftest` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::archive::{decode_dataset, encode_dataset};
use crate::dataset::{collect_dataset, Record};
use crate::env::{EnvSpec, Observation};
use crate::error::Result;
use crate::expert::{render_scan, ExpertState};
use crate::generator::{GeneratorDims, GeneratorModel};
use crate::irl::{irl_recover, irl_validate, solve_exact, FeatureMap, IrlHyper};
use crate::mdp::{tabular_build, DEFAULT_DISCOUNT};
use crate::numerics::{finite_diff_check, finite_diff_check_where, ParamStore};
use crate::par::Exec;
use crate::policy::PolicyParams;
use crate::scan::{BrainScan, ScanConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct OracleCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> OracleCheck {
    OracleCheck { name, passed, detail }
}

fn randomize(params: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in params.ids().collect::<Vec<_>>() {
        for x in params.get_mut(id).data_mut() {
            *x = rng.random_range(-0.8..0.8);
        }
    }
}

fn tiny_generator(seed: u64) -> Result<GeneratorModel> {
    let dims = GeneratorDims {
        embed: 3,
        hidden: 4,
        context: 3,
        encoder_hidden: 4,
    };
    let mut g = GeneratorModel::new(ScanConfig::new(2, 2, 1, 2)?, 2, dims, seed)?;
    randomize(g.params_mut(), seed);
    Ok(g)
}

/// Summed probability of all 16 binary 2×2 scans under random weights.
fn normalization() -> Result<OracleCheck> {
    let mut worst = 0.0f64;
    for seed in 0..3 {
        let g = tiny_generator(seed)?;
        let ctx = g.context_encode(&BrainScan::zeros(*g.scan_config()), &Observation { features: vec![0.3, -0.7] })?;
        let mut total = 0.0;
        for bits in 0..16u8 {
            let cells = (0..4).map(|i| (bits >> i) & 1).collect();
            total += g.log_likelihood(&BrainScan::from_cells(*g.scan_config(), cells)?, &ctx)?.exp();
        }
        worst = worst.max((total - 1.0).abs());
    }
    Ok(check("generator normalization", worst < 1e-9, format!("max |Σp − 1| = {worst:.2e}")))
}

fn gradients() -> Result<Vec<OracleCheck>> {
    let g = tiny_generator(7)?;
    let prev = BrainScan::from_cells(*g.scan_config(), vec![1, 0, 0, 1])?;
    let next = BrainScan::from_cells(*g.scan_config(), vec![0, 1, 1, 1])?;
    let obs = Observation { features: vec![0.25, -1.0] };
    let build = |tape: &mut _, store: &_| g.record_transition_nll(tape, store, &prev, &obs, &next);
    let lstm = finite_diff_check_where(g.params(), 1e-5, |n| n.starts_with("lstm.") || n == "embed" || n.starts_with("out."), build)?;
    let enc = finite_diff_check_where(g.params(), 1e-5, |n| n.starts_with("enc."), build)?;

    let scan = ScanConfig::new(2, 2, 3, 4)?;
    let pol = PolicyParams::new(scan, 3, 3, 6, 11)?;
    let ds = collect_dataset(&EnvSpec::t_maze(2), 2, &scan, 3, Exec::Sequential)?;
    let recs: Vec<&Record> = ds.records.iter().collect();
    let p = finite_diff_check(pol.params(), 1e-5, |tape, store| pol.record_loss(tape, store, &recs, false))?;

    Ok([("gradient: LSTM cell", lstm), ("gradient: context encoder", enc), ("gradient: policy", p)]
        .into_iter()
        .map(|(name, r)| {
            check(
                name,
                r.checked > 0 && r.max_rel_error < 1e-4,
                format!("max rel err {:.2e} over {} coords ({} masked)", r.max_rel_error, r.checked, r.masked),
            )
        })
        .collect())
}

fn uniform_likelihood() -> Result<OracleCheck> {
    let cfg = ScanConfig::default();
    let g = GeneratorModel::new(cfg, 3, GeneratorDims::default(), 0)?;
    let scan = render_scan(&ExpertState { cue: -1, counter: 4 }, &cfg)?;
    let ctx = g.context_encode(&scan, &Observation { features: vec![0.4, 0.0, 0.0] })?;
    let ll = g.log_likelihood(&scan, &ctx)?;
    let want = cfg.n_cells() as f64 * (1.0 / cfg.levels as f64).ln();
    Ok(check("uniform-start likelihood", (ll - want).abs() < 1e-9, format!("{ll:.12} vs {want:.12}")))
}

fn irl_recovery() -> Result<OracleCheck> {
    let mdp = tabular_build(&EnvSpec::gridworld(4, 4), DEFAULT_DISCOUNT)?;
    let (_, expert) = solve_exact(&mdp)?;
    let phi = FeatureMap::one_hot(16);
    let rec = irl_recover(&mdp, &expert, &phi, &IrlHyper::default())?;
    let frac = irl_validate(&mdp, &rec.weights, &phi, &expert, 1e-9)?.optimal_fraction();
    Ok(check("IRL recovery", frac >= 0.95, format!("{:.0}% of states optimal", 100.0 * frac)))
}

fn archive_round_trip() -> Result<OracleCheck> {
    let ds = collect_dataset(&EnvSpec::t_maze(3), 4, &ScanConfig::default(), 1, Exec::Sequential)?;
    let bytes = encode_dataset(&ds)?;
    let back = decode_dataset(&bytes)?;
    let ok = back == ds && encode_dataset(&back)? == bytes;
    Ok(check("dataset round trip", ok, format!("{} bytes", bytes.len())))
}

/// Runs every oracle; an `Err` means a check could not run at all.
pub fn run_all() -> Result<Vec<OracleCheck>> {
    let mut out = vec![normalization()?];
    out.extend(gradients()?);
    out.push(uniform_likelihood()?);
    out.push(irl_recovery()?);
    out.push(archive_round_trip()?);
    Ok(out)
}
