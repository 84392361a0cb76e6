//! Regenerates the bundled measles-like fixture: 17 areas, 104 weeks,
//! endemic-epidemic dynamics with strong nearest-neighbour coupling and two
//! areas that never report a case.
//!
//! `cargo run --example make_fixture -- fixtures/measles`

use std::collections::BTreeMap;
use std::path::PathBuf;

use epicount::data::{Populations, SpatialStructure, SurveillancePanel};
use epicount::model::{Component, EeSpec, Model, ModelSpec};
use epicount::rng::root_rng;
use epicount::simulate::simulate_ee;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};

const N_AREAS: usize = 17;
const WEEKS: usize = 104;
const SILENT: [usize; 2] = [4, 13];

fn main() -> epicount::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "fixtures/measles".into()));
    std::fs::create_dir_all(&dir).map_err(|source| epicount::Error::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut rng = root_rng(2001);

    // Jittered 5 x 4 grid with three corners removed; adjacency within 1.45 units.
    let mut pos = Vec::new();
    for r in 0..4 {
        for c in 0..5 {
            if (r, c) == (0, 0) || (r, c) == (3, 4) || (r, c) == (0, 4) {
                continue;
            }
            pos.push((c as f64 + rng.random_range(-0.2..0.2), r as f64 + rng.random_range(-0.2..0.2)));
        }
    }
    assert_eq!(pos.len(), N_AREAS);
    let areas: Vec<String> = (1..=N_AREAS).map(|i| format!("D{i:02}")).collect();
    let dist: Vec<Vec<f64>> = pos
        .iter()
        .map(|a| pos.iter().map(|b| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt() * 25.0).collect())
        .collect();
    let adj: Vec<Vec<bool>> = (0..N_AREAS)
        .map(|i| (0..N_AREAS).map(|j| i != j && dist[i][j] < 1.45 * 25.0).collect())
        .collect();
    let spatial = SpatialStructure::new(areas.clone(), Some(dist), Some(adj))?;

    let pops: Vec<u64> = (0..N_AREAS).map(|_| rng.random_range(80_000..420_000)).collect();
    let mut init = vec![vec![0u64; WEEKS]; N_AREAS];
    let seed_cases = Poisson::new(2.0).expect("valid rate");
    for (i, row) in init.iter_mut().enumerate() {
        if !SILENT.contains(&i) {
            row[0] = seed_cases.sample(&mut rng) as u64;
        }
    }
    let template = SurveillancePanel::new(areas.clone(), 52, init, Populations::Constant(pops))?;

    let spec = EeSpec {
        random_effects: Component::ALL.into_iter().collect(),
        ..EeSpec::default()
    };
    let model = Model::new(ModelSpec::Ee(spec.clone()), template.clone(), &spatial)?;
    let mut named: BTreeMap<String, f64> = [
        ("lambda_ar", -1.4),
        ("lambda_ne", -0.6),
        ("beta0_en", -13.4),
        ("beta1_en", 0.004),
        ("gamma_seas", 0.9),
        ("delta_seas", 0.5),
        ("theta", 0.85),
        ("phi", 2.5),
        ("sigma_ar", 0.2),
        ("sigma_ne", 0.3),
        ("sigma_en", 0.5),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let sd = [("ar", 0.2), ("ne", 0.3), ("en", 0.5)];
    for (tag, s) in sd {
        let normal = Normal::new(0.0, s).expect("valid sd");
        for (i, a) in areas.iter().enumerate() {
            let b = if SILENT.contains(&i) { -20.0 } else { normal.sample(&mut rng) };
            named.insert(format!("b_{tag}[{a}]"), b);
        }
    }
    let x = model.params_from_named(&named)?.values;
    let sim = simulate_ee(&model, &x, WEEKS, &mut rng)?;
    let panel = sim.to_panel(&template)?;
    // Weekly births at about 1% of the population per year.
    let births: Vec<Vec<u64>> = (0..N_AREAS)
        .map(|i| {
            let rate = Poisson::new(panel.population(i, 1) as f64 * 0.01 / 52.0).expect("valid rate");
            (0..WEEKS).map(|_| rate.sample(&mut rng) as u64).collect()
        })
        .collect();
    let panel = panel.with_births(births, 0)?;

    panel.write_counts_csv(&dir.join("counts.csv"))?;
    panel.write_populations_csv(&dir.join("populations.csv"))?;
    panel.write_births_csv(&dir.join("births.csv"))?;
    epicount::io::write_atomic(&dir.join("spatial.json"), spatial.to_json_string()?.as_bytes())?;
    let config = serde_json::json!({
        "spec": ModelSpec::Ee(spec),
    });
    epicount::io::write_atomic(
        &dir.join("config.json"),
        serde_json::to_string_pretty(&config)?.as_bytes(),
    )?;
    let truth = serde_json::to_string_pretty(&named)?;
    epicount::io::write_atomic(&dir.join("truth.json"), truth.as_bytes())?;

    let totals: Vec<u64> = panel.counts().iter().map(|r| r.iter().sum()).collect();
    eprintln!("area totals: {totals:?}");
    Ok(())
}
