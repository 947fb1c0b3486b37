//! Condenses a genuinely recorded training trajectory into synthetic
//! window pairs and shows how the matching loss falls, including how
//! sensitive the build is to the synthetic-data optimizer rate.

use fedtrend::condense::{
    build_dct, match_distance, CondenseConfig, ConsistencyMask, SegmentCt, TrajectoryBankCt,
};
use fedtrend::data::make_windows;
use fedtrend::models::{init_params, loss_on_tape, Batch, ModelSpec};
use fedtrend::numcore::Tape;
use fedtrend::rng::Rng;

fn main() {
    let spec = ModelSpec::dlinear(24, 24).unwrap();
    let mut rng = Rng::from_seed(1);
    let series: Vec<f64> = (0..120)
        .map(|t| (t as f64 * 0.26).sin() + 0.05 * rng.normal())
        .collect();
    let ds = make_windows(&series, 24, 24, 1).unwrap();
    let pairs: Vec<(&[f64], &[f64])> = ds
        .pairs
        .iter()
        .take(20)
        .map(|p| (p.x.as_slice(), p.y.as_slice()))
        .collect();
    let batch = Batch::from_pairs(&pairs).unwrap();

    // Train for 40 "rounds" of three steps, recording every round the way
    // the federation records client uploads; boundaries fall every 10.
    let mut bank = TrajectoryBankCt::new(10);
    let mut w = init_params(&spec, 3);
    bank.record_client_update("c0", &w, 0).unwrap();
    for round in 1..=40usize {
        for _ in 0..3 {
            let tape = Tape::new();
            let p = tape.leaf(w.to_tensor());
            let x = tape.constant(batch.x.clone());
            let y = tape.constant(batch.y.clone());
            let loss = loss_on_tape(&tape, &spec, p, x, y).unwrap();
            let grads = tape.grad(loss, &[p]).unwrap();
            for (wv, gv) in w.flat_mut().iter_mut().zip(grads[0].data()) {
                *wv -= 5e-3 * gv;
            }
        }
        bank.record_client_update("c0", &w, round).unwrap();
    }
    let segments = bank.take_completed();
    println!("recorded {} segments of 10 rounds each", segments.len());
    for s in &segments {
        println!(
            "  segment ending round {:2}: start->end distance {:.4}, mask keeps {}/{} coordinates",
            s.end_round,
            match_distance(&s.start, &s.end, &s.start, None).unwrap(),
            s.mask.ones(),
            s.mask.len(),
        );
    }

    for adam_lr in [3e-4, 3e-3, 1e-2] {
        let mut replay = TrajectoryBankCt::new(10);
        for s in &segments {
            replay.insert_completed(SegmentCt {
                mask: ConsistencyMask::all_ones(s.start.len()),
                ..s.clone()
            });
        }
        let cfg = CondenseConfig {
            iterations: 300,
            adam_lr,
            size: 20,
            ..CondenseConfig::ct_default()
        };
        let (synth, trace) = build_dct(&mut replay, &spec, &cfg, 7).unwrap();
        let tail: f64 = trace[trace.len() - 10..].iter().sum::<f64>() / 10.0;
        println!(
            "adam lr {adam_lr:>6}: matching loss {:.4} -> {:.4} over {} iterations ({} pairs, finite: {})",
            trace[0],
            tail,
            trace.len(),
            synth.size,
            synth.is_finite(),
        );
    }
}
