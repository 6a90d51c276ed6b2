mod common;

use pns::epsim::*;
use rand::Rng;

#[test]
fn resting_state_is_exactly_preserved() {
    let hier = common::desk_hier();
    let n = hier.finest().node_count;
    let (du, dv) = ap_rhs(&vec![0.0; n], &vec![0.0; n], &TissueField::healthy(n, 0.15), &hier.finest().laplacian(), &vec![0.0; n], &ApParams::default()).unwrap();
    assert!(du.iter().chain(&dv).all(|&v| v == 0.0));
    for subject in DatasetSpec::desk().subjects {
        let tissue = subject.tissue(hier.finest(), 0.15).unwrap();
        let rec = simulate(&hier, &tissue, &stimulus_at(&hier, 97, 0.0, 1.0, 0.0), &SimParams::default(), "r").unwrap();
        assert!(rec.x.iter().all(|&u| u == 0.0), "{}", subject.name);
    }
}

/// Random subject, origin and onset, with stimuli up to the desk dataset's strength.
#[test]
fn one_hundred_random_desk_simulations_stay_bounded() {
    let hier = common::desk_hier();
    let spec = DatasetSpec::desk();
    let tissues: Vec<TissueField> = spec.subjects.iter().map(|s| s.tissue(hier.finest(), 0.15).unwrap()).collect();
    let mut rng = pns::seed::rng(2024);
    for k in 0..100 {
        let tissue = &tissues[rng.random_range(0..tissues.len())];
        let origin = rng.random_range(0..196);
        let stim = stimulus_at(&hier, origin, rng.random_range(0.0..5.0), rng.random_range(0.5..=1.0), rng.random_range(0.2..=0.5));
        let rec = simulate(&hier, tissue, &stim, &SimParams::default(), "b").unwrap();
        assert_eq!(rec.x.dim(), (40, 196));
        let (lo, hi) = rec.x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &u| (l.min(u), h.max(u)));
        assert!(lo >= U_MIN && hi <= U_MAX, "simulation {k}: u in [{lo}, {hi}]");
    }
}

#[test]
fn activation_time_increases_with_graph_distance() {
    let hier = common::desk_hier();
    let level = hier.finest();
    let healthy = TissueField::healthy(196, 0.15);
    for origin in [0, 97, 14 * 13 + 6] {
        let stim = stimulus_at(&hier, origin, 0.0, 1.0, 0.5);
        let hops = level.hop_distances(&stim.origins);
        let times = common::activation_times(&hier, &healthy, origin);
        assert!(times.iter().all(Option::is_some), "origin {origin}: sheet not fully activated");
        let t: Vec<f64> = times.into_iter().map(Option::unwrap).collect();
        let max_hop = *hops.iter().max().unwrap();
        let shell_mean: Vec<f64> = (0..=max_hop)
            .map(|d| {
                let ts: Vec<f64> = (0..196).filter(|&i| hops[i] == d).map(|i| t[i]).collect();
                ts.iter().sum::<f64>() / ts.len() as f64
            })
            .collect();
        assert!(shell_mean.windows(2).all(|w| w[1] > w[0]), "origin {origin}: {shell_mean:?}");
        for &(i, j) in &level.edges {
            let (near, far) = if hops[i] < hops[j] { (i, j) } else { (j, i) };
            if hops[far] > hops[near] {
                assert!(t[far] > t[near], "origin {origin}: edge {near}→{far} activates at {} then {}", t[near], t[far]);
            }
        }
    }
}

#[test]
fn blocking_scar_delays_its_shadow_by_a_fifth() {
    let hier = common::desk_hier();
    let scar = &DatasetSpec::desk().subjects[1];
    assert_eq!(scar.name, "scar_block");
    let tissue = scar.tissue(hier.finest(), 0.15).unwrap();
    let origin = 14 * 13 + 4;
    let nodes = common::shadow(&tissue, scar.regions[0].center, origin);
    assert!(nodes.len() >= 20);
    let mean = |t: &[Option<f64>]| nodes.iter().map(|&i| t[i].expect("shadow activates")).sum::<f64>() / nodes.len() as f64;
    let base = mean(&common::activation_times(&hier, &TissueField::healthy(196, 0.15), origin));
    let scarred = mean(&common::activation_times(&hier, &tissue, origin));
    assert!(scarred >= 1.2 * base, "healthy {base:.2}, scar {scarred:.2}");
}

#[test]
fn stimulus_inside_a_full_block_never_escapes() {
    let hier = common::desk_hier();
    let block = ScarConfig { name: "block".into(), regions: vec![ScarRegion { center: 97, radius: 3.0, excitability: 0.95 }] };
    let tissue = block.tissue(hier.finest(), 0.15).unwrap();
    let rec = simulate(&hier, &tissue, &stimulus_at(&hier, 97, 0.0, 1.0, 0.5), &SimParams::default(), "b").unwrap();
    for (i, act) in activation_frames(&rec.x, 0.5).into_iter().enumerate() {
        if !tissue.scar_mask[i] {
            assert!(act.is_none(), "healthy node {i} activated");
        }
    }
}

#[test]
fn simulation_is_bit_deterministic() {
    let hier = common::desk_hier();
    let tissue = DatasetSpec::desk().subjects[3].tissue(hier.finest(), 0.15).unwrap();
    let stim = stimulus_at(&hier, 31, 0.5, 1.0, 0.5);
    let a = simulate(&hier, &tissue, &stim, &SimParams::default(), "d").unwrap();
    let b = simulate(&hier, &tissue, &stim, &SimParams::default(), "d").unwrap();
    assert_eq!(a.x, b.x);
}

#[test]
fn desk_bank_has_four_subjects_of_twenty_five_records() {
    let hier = common::desk_hier();
    let bank = common::desk_bank(&hier);
    assert_eq!(bank.subjects.len(), 4);
    assert!(bank.subjects.iter().all(|s| s.len() == 25 && s.observations.len() == 25));
    assert_eq!(bank.record_count(), 100);
    assert_eq!(bank.sensor_nodes.len(), 49);
    let healthy = &bank.subjects[0];
    assert!(healthy.tissue.scar_mask.iter().all(|&m| !m));
    for s in &bank.subjects[1..] {
        assert!(s.tissue.scar_mask.iter().any(|&m| m), "{}", s.key);
    }
    let full = observe(&healthy.records[0], &(0..196).collect::<Vec<_>>(), 0.0, 0).unwrap();
    assert_eq!(full.y, healthy.records[0].x);
}
