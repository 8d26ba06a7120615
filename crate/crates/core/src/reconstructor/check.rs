use rand::Rng;

use super::ReconstructorModel;
use crate::data::{synth_pair, SynthParams};
use crate::error::Result;
use crate::numerics::{check_params, GradCheckReport, ParamStore, Tape};
use crate::preprocess::{preprocess, Passbands};
use crate::rng::substream;
use crate::spa::StageConfig;

/// Parameters always probed by [`model_gradcheck`]: one per structural component.
pub const PROBE_PARAMS: [&str; 4] = ["enc.stem.kernel", "enc.embed.w", "dec.query", "head.b"];

/// Finite-difference check of the reconstruction loss gradient in f64 on
/// `coords` parameter coordinates (at least the probes), two synthetic windows.
///
/// Targets sit 0.1 to 0.5 away from the initial output so no kink of the l1
/// loss falls inside the difference step.
pub fn model_gradcheck(config: &StageConfig, seed: u64, coords: usize, h: f64) -> Result<GradCheckReport> {
    let model = ReconstructorModel::<f64>::new(config.clone(), seed)?;
    let mut rng = substream(seed, "gradcheck");
    let mut ppg_windows = Vec::new();
    for i in 0..2 {
        let params = SynthParams {
            noise_std: 0.0,
            ..SynthParams::sampled(rng.gen())
        };
        let (ppg, _) = synth_pair::<f64>(&params, 4.0, &format!("check{i}"))?;
        ppg_windows.push(preprocess(&ppg, &Passbands::default())?.swap_remove(0));
    }
    let ppg: Vec<&[f64]> = ppg_windows.iter().map(|w| w.values()).collect();
    let base = model.reconstruct_batch(&ppg)?;
    let targets: Vec<Vec<f64>> = base
        .iter()
        .map(|y| {
            y.iter()
                .map(|&v| {
                    let off: f64 = rng.gen_range(0.1..0.5);
                    if rng.gen_bool(0.5) { v + off } else { v - off }
                })
                .collect()
        })
        .collect();
    let tgt: Vec<&[f64]> = targets.iter().map(Vec::as_slice).collect();

    let names: Vec<String> = model.params().names().map(str::to_string).collect();
    let mut picks: Vec<(String, usize)> = PROBE_PARAMS.iter().map(|n| (n.to_string(), 0)).collect();
    while picks.len() < coords {
        let n = &names[rng.gen_range(0..names.len())];
        let len = model.params().get(n).expect("listed name").len();
        picks.push((n.clone(), rng.gen_range(0..len)));
    }
    let mut store = model.params().clone();
    check_params(
        &mut store,
        |tape: &mut Tape<f64>, store: &ParamStore<f64>| {
            let m = ReconstructorModel::from_params(config.clone(), store.clone())?;
            m.batch_loss(tape, &ppg, &tgt)
        },
        &picks,
        h,
    )
}
