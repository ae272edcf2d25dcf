use impostor_core::city::{generate_synthetic_city, LatentClass, SyntheticCitySpec};
use impostor_core::grid::{GridMap, TimeScheme};
use impostor_core::semantics::{accumulate_flows, adjusted_rand_index, SemanticModel};
use impostor_core::stations::{extract_stations_parking, SpeedTable};

#[test]
fn clustering_recovers_latent_classes() {
    let map = GridMap::default();
    let scheme = TimeScheme::default();
    let city = generate_synthetic_city(&SyntheticCitySpec::new(map.clone(), 500, 20, 42)).unwrap();
    let speeds = SpeedTable::estimate(&city.traces, &map, &scheme, 10, 300);
    let stations: Vec<_> = city
        .traces
        .iter()
        .flat_map(|t| extract_stations_parking(t, &speeds, 9.0, &scheme))
        .collect();
    let flows = accumulate_flows(&stations, map.n_regions(), &scheme);
    let model = SemanticModel::build(&flows, 4, 0.5, 0.5, 1e-6, 0.75).unwrap();
    let truth: Vec<LatentClass> = model.graph.regions.iter().map(|&r| city.labels[r as usize]).collect();
    let found: Vec<usize> = model.graph.regions.iter().map(|&r| model.cluster_of(r).unwrap()).collect();
    let ari = adjusted_rand_index(&truth, &found);
    assert!(ari >= 0.8, "ARI {ari}");
}
