use memsim_core::crossbar::{solve_irdrop, CrossbarConfig};
use memsim_core::dpe::{dpe_matmul, EngineConfig, NoiseMode};
use memsim_core::numerics::{Purpose, SeededRng, StreamId};
use memsim_core::Matrix;
use proptest::prelude::*;

fn uniform(rows: usize, cols: usize, tag: usize) -> Matrix {
    let mut r = SeededRng::new(42, StreamId::new(Purpose::Operands).block(tag, 0));
    Matrix::from_fn(rows, cols, |_, _| r.uniform(-1.0, 1.0))
}

fn engine(mode: NoiseMode, cv: f64) -> EngineConfig {
    let mut cfg = EngineConfig {
        noise_mode: mode,
        ..EngineConfig::default()
    };
    cfg.device = cfg.device.with_cv(cv);
    cfg
}

#[test]
fn ideal_mode_error_is_quantization_only() {
    let (x, w) = (uniform(32, 96, 0), uniform(96, 40, 1));
    let re = dpe_matmul(&x, &w, &engine(NoiseMode::Ideal, 0.05), 0).unwrap().relative_error.unwrap();
    assert!(re < 0.02, "re = {re}");
}

#[test]
fn same_cycle_reproduces_and_new_cycle_redraws() {
    let (x, w) = (uniform(16, 70, 2), uniform(70, 16, 3));
    let cfg = engine(NoiseMode::VariationOnly, 0.1);
    let a = dpe_matmul(&x, &w, &cfg, 3).unwrap().result;
    let b = dpe_matmul(&x, &w, &cfg, 3).unwrap().result;
    let c = dpe_matmul(&x, &w, &cfg, 4).unwrap().result;
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn error_grows_with_variation() {
    let (x, w) = (uniform(64, 64, 4), uniform(64, 64, 5));
    let re = |cv| dpe_matmul(&x, &w, &engine(NoiseMode::VariationOnly, cv), 0).unwrap().relative_error.unwrap();
    assert!(re(0.01) < re(0.2));
}

#[test]
fn wire_resistance_only_removes_current() {
    let mut r = SeededRng::new(7, StreamId::new(Purpose::Operands));
    let g = Matrix::from_fn(32, 32, |_, _| r.uniform(1e-7, 1e-5));
    let cfg = CrossbarConfig::default().with_size(32, 32);
    let v: Vec<f64> = (0..32).map(|_| r.uniform(0.0, cfg.v_read)).collect();
    let ideal = g.transpose().matvec(&v).unwrap();
    let sol = solve_irdrop(&v, &g, &cfg, 1e-9, 100).unwrap();
    assert!(sol.converged);
    for (i, s) in ideal.iter().zip(&sol.currents) {
        assert!(*s > 0.0 && s <= i, "{s} vs {i}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn integer_operands_are_exact_without_noise(
        vals in proptest::collection::vec(-127i32..=127, 2 * 12 * 12),
    ) {
        let mut x = Matrix::from_fn(12, 12, |i, j| f64::from(vals[i * 12 + j]));
        let mut w = Matrix::from_fn(12, 12, |i, j| f64::from(vals[144 + i * 12 + j]));
        x.data_mut()[0] = 127.0;
        w.data_mut()[0] = 127.0;
        let mut cfg = engine(NoiseMode::Ideal, 0.0);
        cfg.crossbar = cfg.crossbar.with_size(16, 16).with_ideal_converters();
        let report = dpe_matmul(&x, &w, &cfg, 0).unwrap();
        prop_assert_eq!(report.result, memsim_core::numerics::matmul_exact(&x, &w).unwrap());
    }
}
