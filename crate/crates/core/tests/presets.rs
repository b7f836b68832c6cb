use gnss_fgo::evaluate::evaluate;
use gnss_fgo::pipeline::{run_wls, PipelineConfig};
use gnss_fgo::simulator::{generate, urban_canyon_preset, ScenarioConfig, Severity};

fn wls_mean_over_seeds(sev: Severity) -> f64 {
    let cfg = PipelineConfig::default();
    (1..=20)
        .map(|seed| {
            let sc = generate(&ScenarioConfig {
                seed,
                ..urban_canyon_preset(sev)
            })
            .unwrap();
            evaluate(&run_wls(&sc.rover, &cfg), &sc.truth).unwrap().mean_m
        })
        .sum::<f64>()
        / 20.0
}

#[test]
fn severity_scales_wls_error() {
    let low = wls_mean_over_seeds(Severity::Low);
    let mid = wls_mean_over_seeds(Severity::Mid);
    let high = wls_mean_over_seeds(Severity::High);
    println!("WLS mean: low {low:.2} mid {mid:.2} high {high:.2}");
    assert!(high > 5.0, "{high}");
    assert!(low < 3.0, "{low}");
    assert!(low < mid && mid < high);
}
