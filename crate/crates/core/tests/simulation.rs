use svsd_core::likelihood::{ModelSpec, Smoothing};
use svsd_core::simulate::{simulate_dataset, SimulationConfig};
use svsd_core::spatial::fit_semivariogram;

#[test]
fn simulated_alpha_field_recovers_its_range() {
    let cfg = SimulationConfig { n_sites: 200, n_obs_per_core: 2, ..SimulationConfig::default() };
    let true_range = 1.0 / cfg.truth.phi;
    let spec = ModelSpec { smoothing: Smoothing::None, ..ModelSpec::default() };
    let mut ranges: Vec<f64> = (0..20)
        .map(|seed| {
            let sim = simulate_dataset(&cfg, &spec, 1000 + seed).unwrap();
            let alpha: Vec<f64> = sim.truth.theta.iter().map(|t| t.0[0]).collect();
            fit_semivariogram(&alpha, &sim.data.sites.dist, 15).unwrap().range
        })
        .collect();
    ranges.sort_by(f64::total_cmp);
    let median = 0.5 * (ranges[9] + ranges[10]);
    assert!((median / true_range - 1.0).abs() < 0.3, "median range {median} vs {true_range}");
}

#[test]
fn simulated_sites_share_coordinates_as_configured() {
    let cfg = SimulationConfig { n_sites: 8, n_shared_sites: 3, n_obs_per_core: 20, ..SimulationConfig::default() };
    let sim = simulate_dataset(&cfg, &ModelSpec::default(), 4).unwrap();
    assert_eq!((sim.data.n_cores(), sim.data.n_sites()), (11, 8));
    assert!(sim.data.cores.iter().flat_map(|c| &c.density).all(|&y| y > 0.0));
}
