#![no_main]

use libfuzzer_sys::fuzz_target;
use relgate::analysis::{
    read_error_points, read_published_paired, read_reliability_runs, read_scatter, reliability_validation,
    scatter_sample, win_tie_loss,
};

fuzz_target!(|data: &[u8]| {
    if let Ok(pts) = read_error_points(data) {
        assert!(pts.iter().all(|p| p.err.is_finite() && p.s_target.is_finite()));
    }
    if let Ok(runs) = read_reliability_runs(data) {
        let _ = reliability_validation(&runs, 50.0, 0.8);
    }
    if let Ok(pts) = read_scatter(data) {
        if let Ok(s) = scatter_sample(&pts) {
            let w = win_tie_loss(&s, 0.02);
            assert_eq!(w.wins + w.ties + w.losses, s.len());
        }
    }
    let _ = read_published_paired(data);
});
