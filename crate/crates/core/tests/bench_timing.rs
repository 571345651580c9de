use liteie::bench::{flops_estimate, time_pipeline};
use liteie::{init_weights, EnhanceConfig, NetTopology};

#[test]
fn flops_ordering_follows_parameter_heavy_topologies() {
    // Heavier topologies cost more per pixel.
    let studied = NetTopology::studied();
    let mut by_flops: Vec<_> = studied.iter().map(|t| (flops_estimate(t, 100, 100, 8, true), t.to_string())).collect();
    by_flops.sort();
    let order: Vec<_> = by_flops.into_iter().map(|(_, t)| t).collect();
    let mut by_macs: Vec<_> = studied.iter().map(|t| (t.macs_per_pixel(), t.to_string())).collect();
    by_macs.sort();
    assert_eq!(order, by_macs.into_iter().map(|(_, t)| t).collect::<Vec<_>>());
}

#[test]
fn small_frame_timing_report() {
    let w = init_weights(&NetTopology::canonical(), 0);
    let r = time_pipeline(&w, 64, 64, &EnhanceConfig::default(), 3, 1, 1).unwrap();
    assert!(r.median_ms > 0.0 && r.median_ms <= r.p95_ms);
    assert_eq!(r.flops, flops_estimate(&NetTopology::canonical(), 64, 64, 8, true));
}

#[test]
#[ignore = "timing probe"]
fn hd_timing_probe() {
    let w = init_weights(&NetTopology::canonical(), 0);
    for &(h, wd) in &[(720, 1280), (1080, 1920), (2160, 3840)] {
        let r = time_pipeline(&w, h, wd, &EnhanceConfig::default(), 5, 1, 1).unwrap();
        eprintln!("{}", r.csv_row());
    }
}
