use casemix::seed::{child_seed, stream_rng};
use casemix::sim::{
    gen_residual_cov, oracle_truth_table, run_transport_sim, transport_replicate, TransportDgp, TransportSimConfig,
};
use casemix::weights::{PropensityRatioFit, WeightModel};
use casemix::{BasisSpec, IpdTrial};
use nalgebra::DVector;
use sha2::{Digest, Sha256};

#[test]
fn residual_cov_matches_golden_hash() {
    let s = gen_residual_cov(3, 1).unwrap();
    let mut h = Sha256::new();
    for v in s.iter() {
        h.update(v.to_le_bytes());
    }
    let hex: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(hex, "b87f891e1925f21787af1782ec853c5e3076bd725c211fe03e371c769efd11d0");
}

#[test]
fn replicates_reproduce_in_isolation() {
    let cfg = TransportSimConfig { oracle_draws: 50_000, ..TransportSimConfig::new(1, 600, 4, 99) };
    let report = run_transport_sim(&cfg).unwrap();
    let dgp = TransportDgp::new(1).unwrap();
    for r in &report.replicates {
        let alone = transport_replicate(&dgp, 600, 99, r.rep).unwrap();
        assert_eq!(&alone, r);
    }
    let again = run_transport_sim(&cfg).unwrap();
    assert_eq!(again.rows, report.rows);
    for row in &report.rows {
        assert!((row.mse - (row.bias * row.bias + row.var)).abs() <= 1e-9);
    }
}

/// Batch means of the oracle under two unrelated seeds.
#[test]
fn oracle_is_seed_consistent() {
    let dgp = TransportDgp::new(1).unwrap();
    let batches = 20;
    let run = |seed: u64| -> Vec<[f64; 2]> {
        (0..batches)
            .map(|b| {
                let t = oracle_truth_table(&dgp, 100_000, child_seed(seed, b));
                [t[0][1], t[0][2]]
            })
            .collect()
    };
    let (a, b) = (run(1), run(2));
    for p in 0..2 {
        let stats = |v: &[[f64; 2]]| {
            let m = v.iter().map(|x| x[p]).sum::<f64>() / batches as f64;
            let var = v.iter().map(|x| (x[p] - m).powi(2)).sum::<f64>() / (batches as f64 - 1.0);
            (m, var / batches as f64)
        };
        let ((ma, va), (mb, vb)) = (stats(&a), stats(&b));
        assert!((ma - mb).abs() <= 2.0 * (va + vb).sqrt(), "{ma} vs {mb}");
    }
}

/// Self-normalized arm means with their linearized variance.
fn hajek(trial: &IpdTrial, w: &DVector<f64>) -> (f64, f64) {
    let arm = |x: bool| {
        let idx: Vec<usize> = (0..trial.len()).filter(|&i| trial.treatment()[i] == x).collect();
        let sw: f64 = idx.iter().map(|&i| w[i]).sum();
        let mu = idx.iter().map(|&i| w[i] * trial.outcome()[i] as u8 as f64).sum::<f64>() / sw;
        let v = idx
            .iter()
            .map(|&i| (w[i] * (trial.outcome()[i] as u8 as f64 - mu)).powi(2))
            .sum::<f64>()
            / (sw * sw);
        (mu, v)
    };
    let ((m1, v1), (m0, v0)) = (arm(true), arm(false));
    (m1 - m0, v1 + v0)
}

/// With the true membership ratio as weights the estimator is consistent
/// in both settings.
#[test]
fn true_weights_remove_bias_at_large_n() {
    for setting in [1u8, 2] {
        let dgp = TransportDgp::new(setting).unwrap();
        let truth = oracle_truth_table(&dgp, 4_000_000, 5);
        let trials = dgp.sample(100_000, &mut stream_rng(17, setting as u64)).unwrap();
        let q = if setting == 2 { 3.0 } else { 0.0 };
        // log P(S=1|L) - log P(S=k|L) over {1, l1, l2, l1^2, l2^2}.
        let betas = [(2usize, [-1.0, 1.0, 1.0, q, 0.0]), (3, [1.0, -1.0, -1.0, q, 0.0])];
        let model = WeightModel::exactly_identified(BasisSpec::with_squares(2)).unwrap();
        for (k, b) in betas {
            let src = &trials[k - 1];
            let fit = PropensityRatioFit::from_beta(k, 1, src, model.clone(), DVector::from_row_slice(&b)).unwrap();
            let (est, var) = hajek(src, fit.weights());
            let err = est - truth[0][k - 1];
            assert!(err.abs() <= 3.0 * var.sqrt(), "setting {setting}, k={k}: error {err}, se {}", var.sqrt());
        }
    }
}
