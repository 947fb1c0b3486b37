//! Switches the method's components off one at a time: the consistency
//! masks, the client-trajectory dataset, and the global-trajectory
//! refinement. With all three off, the run is exactly plain averaging.

use fedtrend::experiment::{ablate, run_experiment, AblationFlags, ExperimentConfig, Method};

fn main() {
    let mut cfg = ExperimentConfig::demo_fleet(0.8);
    cfg.seed = 1;
    cfg.method = Method::FedTrend;

    let full = run_experiment(&cfg).unwrap();
    println!("full method              MSE {:.5}", full.final_mse);

    let variants = [
        (
            "-cu  (all-ones masks)  ",
            AblationFlags {
                no_cu: true,
                ..Default::default()
            },
        ),
        (
            "-dct (no client mix-in)",
            AblationFlags {
                no_dct: true,
                ..Default::default()
            },
        ),
        (
            "-dgt (no refinement)   ",
            AblationFlags {
                no_dgt: true,
                ..Default::default()
            },
        ),
    ];
    for (label, flags) in variants {
        let run = ablate(&cfg, flags).unwrap();
        println!("{label}  MSE {:.5}", run.final_mse);
    }

    let all_off = ablate(
        &cfg,
        AblationFlags {
            no_cu: true,
            no_dct: true,
            no_dgt: true,
        },
    )
    .unwrap();
    cfg.method = Method::FedAvg;
    let fedavg = run_experiment(&cfg).unwrap();
    println!(
        "all off                  MSE {:.5} (bitwise fedavg: {})",
        all_off.final_mse,
        all_off.final_params.bitwise_eq(&fedavg.final_params)
    );
}
