// Temporary tuning probe — not part of the shipped examples.
use covft_lab::analysis::{encoder_l2_distance, grad_cosine_series, spearman};
use covft_lab::experiment::{twin_datasets, two_stage, ExperimentConfig, Instrument};
use covft_lab::model::{self, ModelConfig};
use covft_lab::params::ParamStore;
use covft_lab::seed::subseed;
use covft_lab::taskgen;
use covft_lab::vft::{self, GradSnapshot, Stage, Strategy, TrainConfig};
use covft_lab::Result;

fn conflict_xc() -> ExperimentConfig {
    let mut xc = ExperimentConfig::default();
    xc.budget.pretrain_steps = 100;
    xc.budget.instruct_steps = 200;
    xc
}

fn divergence3(
    xc: &ExperimentConfig,
    seed: u64,
    foundation: usize,
    twins: usize,
    batch: usize,
) -> Result<(f64, f64, f64)> {
    let cfg = ModelConfig::plain();
    let mut store = ParamStore::new();
    model::init_model(&mut store, &cfg, seed)?;
    let pairs = taskgen::pretrain_pairs(xc.data.n_pretrain, subseed(seed, "data-pretrain"))?;
    let mut tc = TrainConfig::new(
        Strategy::FullFt,
        Stage::Pretrain,
        xc.budget.pretrain_steps,
        xc.budget.batch,
        xc.budget.pretrain_lr,
        subseed(seed, "pretrain"),
    );
    vft::train(&mut store, &cfg, &pairs, &tc)?;

    let (grounding, captioning) = twin_datasets(xc.data.n_train, subseed(seed, "twin-data"))?;
    let mixed: Vec<_> = grounding
        .iter()
        .cloned()
        .zip(captioning.iter().cloned())
        .flat_map(|(g, c)| [g, c])
        .collect();
    if foundation > 0 {
        tc = TrainConfig::new(
            Strategy::FullFt,
            Stage::Instruct,
            foundation,
            xc.budget.batch,
            xc.budget.instruct_lr,
            subseed(seed, "foundation"),
        );
        vft::train(&mut store, &cfg, &mixed, &tc)?;
    }

    tc = TrainConfig::new(
        Strategy::FullFt,
        Stage::Instruct,
        twins,
        batch,
        xc.budget.instruct_lr,
        subseed(seed, "instruct"),
    );
    tc.checkpoint_every = Some((twins / 10).max(1));
    let mut store_g = store.clone();
    let run_g = vft::train(&mut store_g, &cfg, &grounding, &tc)?;
    let mut store_c = store;
    let run_c = vft::train(&mut store_c, &cfg, &captioning, &tc)?;

    let mut steps_x = Vec::new();
    let mut totals = Vec::new();
    let mut last = None;
    for (g, c) in run_g.checkpoints.iter().zip(&run_c.checkpoints) {
        let d = encoder_l2_distance(&g.params, &c.params)?;
        steps_x.push(g.step as f64);
        totals.push(d.total);
        last = Some(d.per_block);
    }
    let rho = spearman(&steps_x, &totals)?;
    let pb = last.unwrap();
    let half = pb.len() / 2;
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    println!(
        "      per_block {:?}",
        pb.iter().map(|d| (d * 1000.0).round() / 1000.0).collect::<Vec<_>>()
    );
    Ok((rho, mean(&pb[..half]), mean(&pb[half..])))
}

/// Average raw gradient vectors over non-overlapping windows of `w` snapshots.
fn windowed(snaps: &[GradSnapshot], w: usize) -> Vec<GradSnapshot> {
    snaps
        .chunks_exact(w)
        .map(|chunk| {
            let mut flat = vec![0.0; chunk[0].flat.len()];
            for s in chunk {
                for (a, v) in flat.iter_mut().zip(&s.flat) {
                    *a += v;
                }
            }
            for a in &mut flat {
                *a /= w as f64;
            }
            let norm = flat.iter().map(|v| v * v).sum::<f64>().sqrt();
            GradSnapshot { step: chunk.last().unwrap().step, names: chunk[0].names.clone(), flat, norm }
        })
        .collect()
}

fn align3(seed: u64) -> Result<()> {
    // Larger alignment batches, per-step snapshot semantics kept.
    for batch in [16usize, 32] {
        let mut xc = conflict_xc();
        xc.budget.batch = batch;
        let every = (xc.budget.instruct_steps / 32).max(1);
        let instrument = Instrument { snapshot_every: Some(every), checkpoint_every: None };
        for strategy in [Strategy::FullFt, Strategy::Covft] {
            let art = two_stage(&xc, strategy, seed, instrument)?;
            let cs = grad_cosine_series(&art.snapshots)?;
            println!(
                "s{seed} {:7} [batch {batch:2}]      mean {:.3} std {:.3} (n={})",
                format!("{:?}", strategy),
                cs.mean,
                cs.std,
                art.snapshots.len()
            );
        }
    }
    // Window-averaged per-step gradients at the default batch.
    let xc = conflict_xc();
    let instrument = Instrument { snapshot_every: Some(1), checkpoint_every: None };
    for strategy in [Strategy::FullFt, Strategy::Covft] {
        let art = two_stage(&xc, strategy, seed, instrument)?;
        for w in [3usize, 6] {
            let snaps = windowed(&art.snapshots, w);
            let cs = grad_cosine_series(&snaps)?;
            println!(
                "s{seed} {:7} [batch  8, win {w}] mean {:.3} std {:.3} (n={})",
                format!("{:?}", strategy),
                cs.mean,
                cs.std,
                snaps.len()
            );
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    let mode = std::env::args().nth(1).unwrap_or_default();
    match mode.as_str() {
        "div3" => {
            for (foundation, twins, batch) in [(300, 300, 16), (300, 300, 32), (0, 300, 32)] {
                let xc = conflict_xc();
                for seed in [42, 43, 44] {
                    match divergence3(&xc, seed, foundation, twins, batch) {
                        Ok((rho, sh, dp)) => println!(
                            "found={foundation} twins={twins} batch={batch} s{seed}: rho={rho:.3} shallow={sh:.4} deep={dp:.4} {}",
                            if rho > 0.9 && dp > sh { "OK" } else { "fail" }
                        ),
                        Err(e) => println!(
                            "found={foundation} twins={twins} batch={batch} s{seed}: error: {e}"
                        ),
                    }
                }
            }
        }
        "align3" => {
            for seed in [42, 43, 44] {
                align3(seed)?;
            }
        }
        other => eprintln!("unknown mode {other:?} (want div3|align3)"),
    }
    Ok(())
}
