mod common;

use celora::privacy::{attack_model, attack_report, dlg_attack, report_csv, run_trial, surface_gradient, AttackConfig, TrialShape};
use celora::seed;
use celora::Surface;

const SHAPE: TrialShape = TrialShape { input_dim: 8, classes: 2, rank: 2 };
const SURFACES: [Surface; 3] = [Surface::FullLora, Surface::Ffa, Surface::COnly];

#[test]
fn observed_gradient_sizes() {
    let model = attack_model(8, 4, 2, 1).unwrap();
    let x = common::random_matrix(3, 8, &mut seed::rng(2));
    for s in SURFACES {
        assert_eq!(surface_gradient(&model, x.view(), &[0, 1, 3], s).unwrap().len(), s.observed_dim(8, 4, 2));
    }
}

#[test]
fn starting_at_the_truth_stays_there() {
    let model = attack_model(8, 2, 2, 4).unwrap();
    let x = common::random_matrix(2, 8, &mut seed::rng(5));
    let labels = [1, 0];
    for surface in SURFACES {
        let observed = surface_gradient(&model, x.view(), &labels, surface).unwrap();
        let cfg = AttackConfig { surface, steps: 5, attack_lr: 1.0, restarts: 1, seed: 0 };
        let res = dlg_attack(&model, &observed, x.dim(), &labels, x.view(), &cfg, Some(x.view())).unwrap();
        assert_eq!(res.objective_trace[0], 0.0);
        assert!(res.mse < 1e-20, "{surface}: {}", res.mse);
        assert!((res.cosine - 1.0).abs() < 1e-12);
    }
}

#[test]
fn attack_rejects_mismatched_batches() {
    let model = attack_model(8, 2, 2, 4).unwrap();
    let x = common::random_matrix(2, 8, &mut seed::rng(5));
    let cfg = AttackConfig { surface: Surface::Ffa, steps: 5, attack_lr: 1.0, restarts: 1, seed: 0 };
    let observed = surface_gradient(&model, x.view(), &[0, 1], Surface::Ffa).unwrap();
    assert!(dlg_attack(&model, &observed, (2, 8), &[0], x.view(), &cfg, None).is_err());
    assert!(dlg_attack(&model, &observed[1..], (2, 8), &[0, 1], x.view(), &cfg, None).is_err());
}

#[test]
fn report_has_one_row_per_surface_and_batch_size() {
    let mut trials = Vec::new();
    for s in SURFACES {
        for b in [1, 2] {
            for seed in 0..2 {
                trials.push(run_trial(SHAPE, s, b, seed, 20, 1.0, 1).unwrap());
            }
        }
    }
    let rows = attack_report(&trials).unwrap();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.seeds == 2 && r.mean_mse.is_finite() && r.std_mse >= 0.0));
    let csv = report_csv(&rows);
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.starts_with("surface,batch_size,mean_mse,std_mse,mean_cosine,std_cosine,seeds\n"));
    assert!(attack_report(&[]).is_err());
}

#[test]
fn trials_are_reproducible() {
    for s in SURFACES {
        assert_eq!(run_trial(SHAPE, s, 2, 9, 30, 1.0, 2).unwrap(), run_trial(SHAPE, s, 2, 9, 30, 1.0, 2).unwrap());
    }
}
