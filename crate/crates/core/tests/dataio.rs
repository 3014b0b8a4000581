use std::fs;
use std::path::Path;

use wqtrust::dataio::{
    coverage, fit_normalizer, ingest_csv, split, synthesize, write_csv, FeatureGroup, IngestOptions, LandUse, RowSet,
    SplitPlan, SynthConfig, VariableRecipe,
};
use wqtrust::metrics::record_simplicity;
use wqtrust::Error;

fn write(path: &Path, body: &str) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    fs::write(path, body).unwrap();
}

fn dated(rows: impl Fn(usize) -> String, header: &str) -> String {
    let mut s = format!("{header}\n");
    for d in 0..10 {
        s.push_str(&format!("2001-03-{:02},{}\n", d + 1, rows(d)));
    }
    s
}

/// Two basins, ten days, one empty target column, one sparse target.
fn fixture(dir: &Path) {
    write(
        &dir.join("statics.csv"),
        "basin_id,lon,lat,urban_pct,ag_pct,AREA,SLOPE\nA,-90.5,40.25,3,10,120,0.5\nB,-80,35,30,30,80,1.5\n",
    );
    for id in ["A", "B"] {
        write(
            &dir.join("dynamics").join(format!("{id}.csv")),
            &dated(|d| format!("{},{},{}", 1.0 + d as f64, 0.1 * d as f64, 7.0), "date,Q:runoff,M:pr,RC:Ca"),
        );
    }
    write(
        &dir.join("targets/A.csv"),
        &dated(|d| if d % 3 == 0 { format!("{},", 2.0 + d as f64) } else { ",".into() }, "date,NO3,TP"),
    );
    write(
        &dir.join("targets/B.csv"),
        &dated(|d| if d == 4 { "n/a,".into() } else { format!("{},", d) }, "date,NO3,TP"),
    );
}

#[test]
fn two_basin_fixture_ingests_with_masks() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let ds = ingest_csv(dir.path(), &IngestOptions::default()).unwrap();
    assert_eq!(ds.n_days(), 10);
    assert_eq!(ds.basins.len(), 2);
    assert_eq!(ds.target_names, ["NO3", "TP"]);
    assert_eq!(ds.static_names, ["AREA", "SLOPE"]);
    // three raw features plus datenum, sin and cos
    assert_eq!(ds.n_dynamic(), 6);
    assert_eq!(ds.columns_of(FeatureGroup::Q), [0]);

    let a = &ds.basins[0];
    assert_eq!(a.id, "A");
    assert_eq!(a.coords, [-90.5, 40.25]);
    assert_eq!(a.land_use, LandUse::UD);
    assert_eq!(ds.basins[1].land_use, LandUse::MX);
    let no3_a: Vec<bool> = (0..10).map(|t| a.mask[t * 2]).collect();
    assert_eq!(
        no3_a,
        [true, false, false, true, false, false, true, false, false, true]
    );
    assert_eq!(a.targets[3 * 2], 5.0);
    // unparseable cell is missing, the rest observed
    let no3_b: Vec<bool> = (0..10).map(|t| ds.basins[1].mask[t * 2]).collect();
    assert_eq!(no3_b.iter().filter(|m| **m).count(), 9);
    assert!(!no3_b[4]);
    assert_eq!(coverage(a, 2, 0), 40.0);
    assert_eq!(coverage(&ds.basins[1], 2, 0), 90.0);
}

#[test]
fn empty_target_column_gives_all_false_mask() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let ds = ingest_csv(dir.path(), &IngestOptions::default()).unwrap();
    for b in &ds.basins {
        assert!((0..10).all(|t| !b.mask[t * 2 + 1]));
        assert_eq!(coverage(b, 2, 1), 0.0);
    }
}

#[test]
fn duplicated_date_is_an_ingestion_error() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let path = dir.path().join("dynamics/B.csv");
    let mut body = fs::read_to_string(&path).unwrap();
    body.push_str("2001-03-10,11,1,7\n");
    fs::write(&path, body).unwrap();
    assert!(matches!(ingest_csv(dir.path(), &IngestOptions::default()), Err(Error::Ingestion(_))));
}

#[test]
fn missing_static_row_is_an_ingestion_error() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    write(
        &dir.path().join("statics.csv"),
        "basin_id,lon,lat,urban_pct,ag_pct,AREA,SLOPE\nA,-90.5,40.25,3,10,120,0.5\n",
    );
    let err = ingest_csv(dir.path(), &IngestOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Ingestion(ref m) if m.contains('B')), "{err}");
}

#[test]
fn observation_screening_clears_sparse_series() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let opts = IngestOptions {
        min_observations: Some(5),
        ..Default::default()
    };
    let ds = ingest_csv(dir.path(), &opts).unwrap();
    assert_eq!(coverage(&ds.basins[0], 2, 0), 0.0);
    assert_eq!(coverage(&ds.basins[1], 2, 0), 90.0);
}

fn small_config(n_basins: usize, years: usize) -> SynthConfig {
    SynthConfig {
        n_basins,
        start_year: 1982,
        years,
        n_meteo: 2,
        n_rc: 1,
        n_veg: 1,
        n_statics: 4,
        variables: vec![
            VariableRecipe {
                alpha: 1.0,
                beta_sin: 0.5,
                simplicity: Some(0.6),
                p_obs: 0.3,
                ..VariableRecipe::new("NO3")
            },
            VariableRecipe {
                beta_cos: 1.0,
                gamma: 0.3,
                ..VariableRecipe::new("Temp")
            },
        ],
        redundant_meteo: false,
        relaxed_land_use: false,
    }
}

#[test]
fn synthetic_corpus_round_trips_through_csv_bit_exactly() {
    let ds = synthesize(&small_config(3, 1), 5).unwrap().dataset;
    let dir = tempfile::tempdir().unwrap();
    write_csv(&ds, dir.path()).unwrap();
    let back = ingest_csv(dir.path(), &IngestOptions::default()).unwrap();
    assert_eq!(back.features, ds.features);
    assert_eq!(back.static_names, ds.static_names);
    assert_eq!(back.calendar, ds.calendar);
    for (a, b) in ds.basins.iter().zip(&back.basins) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.land_use, b.land_use);
        assert_eq!(a.mask, b.mask);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.dynamics), bits(&b.dynamics));
        assert_eq!(bits(&a.statics), bits(&b.statics));
        let observed = |r: &wqtrust::dataio::BasinRecord| {
            r.targets.iter().zip(&r.mask).filter(|(_, m)| **m).map(|(v, _)| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(observed(a), observed(b));
    }
}

#[test]
fn temporal_split_holds_out_exactly_one_year() {
    let ds = synthesize(&small_config(2, 10), 1).unwrap().dataset;
    assert_eq!(ds.calendar.first().unwrap().to_string(), "1982-01-01");
    let s = split(&ds, &SplitPlan::TemporalHeldOut { test_years: vec![1985] }).unwrap();
    assert_eq!(s.test.n_days(), 365);
    assert!(s.test.days().all(|t| ds.year_of(t) == 1985));
    assert_eq!(s.train.n_days() + s.test.n_days(), ds.n_days());
    for b in 0..2 {
        for t in 0..ds.n_days() {
            assert!(s.train.contains(b, t) != s.test.contains(b, t));
        }
    }
    assert!(matches!(
        split(&ds, &SplitPlan::TemporalHeldOut { test_years: vec![1995] }),
        Err(Error::Split(_))
    ));
}

#[test]
fn spatial_split_takes_one_basin_per_class() {
    let ds = synthesize(&small_config(20, 1), 2).unwrap().dataset;
    for class in LandUse::ALL {
        assert_eq!(ds.basins.iter().filter(|b| b.land_use == class).count(), 5);
    }
    let plan = SplitPlan::SpatialStratified {
        test_fraction: 0.2,
        stratify_by_land_use: true,
        seed: 9,
    };
    let s = split(&ds, &plan).unwrap();
    assert_eq!(s.test.basins.len(), 4);
    let mut classes: Vec<LandUse> = s.test.basins.iter().map(|&b| ds.basins[b].land_use).collect();
    classes.sort();
    classes.dedup();
    assert_eq!(classes.len(), 4);
    assert!(s.test.basins.iter().all(|b| !s.train.basins.contains(b)));
    assert_eq!(s.train.basins.len() + s.test.basins.len(), 20);
    assert_eq!(split(&ds, &plan).unwrap(), s);

    let five = synthesize(&small_config(5, 1), 2).unwrap().dataset;
    assert!(matches!(split(&five, &plan), Err(Error::Split(_))));
}

#[test]
fn normalizer_uses_training_rows_only() {
    let mut ds = synthesize(&small_config(4, 10), 3).unwrap().dataset;
    let s = split(&ds, &SplitPlan::TemporalHeldOut { test_years: vec![1985, 1990] }).unwrap();
    let before = fit_normalizer(&ds, &s.train).unwrap();
    // an extreme held-out runoff value must not move the statistics
    let t_test = s.test.days().next().unwrap();
    let f0 = ds.n_dynamic();
    ds.basins[0].dynamics[t_test * f0] = 1e6;
    let train_only = fit_normalizer(&ds, &s.train).unwrap();
    assert_eq!(before, train_only);
    let everything = RowSet {
        basins: (0..4).collect(),
        day_mask: vec![true; ds.n_days()],
    };
    let all_rows = fit_normalizer(&ds, &everything).unwrap();
    assert_ne!(train_only, all_rows);

    // rebuild a dataset containing only training days and refit
    let mut train_ds = ds.clone();
    let keep: Vec<usize> = s.train.days().collect();
    train_ds.calendar = keep.iter().map(|&t| ds.calendar[t]).collect();
    let (f, v) = (ds.n_dynamic(), ds.n_targets());
    for (b, orig) in train_ds.basins.iter_mut().zip(&ds.basins) {
        b.dynamics = keep.iter().flat_map(|&t| orig.dynamics[t * f..(t + 1) * f].to_vec()).collect();
        b.targets = keep.iter().flat_map(|&t| orig.targets[t * v..(t + 1) * v].to_vec()).collect();
        b.mask = keep.iter().flat_map(|&t| orig.mask[t * v..(t + 1) * v].to_vec()).collect();
    }
    let recomputed = RowSet {
        basins: (0..4).collect(),
        day_mask: vec![true; keep.len()],
    };
    assert_eq!(fit_normalizer(&train_ds, &recomputed).unwrap(), train_only);

    // normalized training values stay in [0, 1]; held-out values may not
    let norm = train_only.apply(&ds);
    for b in 0..4 {
        for t in s.train.days() {
            for j in 0..f {
                let x = norm.dynamics[b][t * f + j];
                assert!((-1e-12..=1.0 + 1e-12).contains(&x), "{x}");
            }
        }
    }
}

#[test]
fn synthetic_simplicity_matches_the_estimator() {
    let mut cfg = small_config(4, 4);
    cfg.variables = vec![
        VariableRecipe {
            alpha: 1.0,
            beta_sin: 0.7,
            beta_cos: -0.4,
            ..VariableRecipe::new("NO3")
        },
        VariableRecipe {
            gamma: 1.0,
            ..VariableRecipe::new("TP")
        },
        VariableRecipe {
            alpha: 0.8,
            beta_cos: 0.6,
            simplicity: Some(0.5),
            ..VariableRecipe::new("Temp")
        },
        VariableRecipe {
            alpha: 0.5,
            beta_sin: 0.5,
            simplicity: Some(0.8),
            ..VariableRecipe::new("TN")
        },
    ];
    let out = synthesize(&cfg, 17).unwrap();
    let ds = &out.dataset;
    for truth in &out.truth {
        let b = ds.basins.iter().find(|b| b.id == truth.basin).unwrap();
        let j = ds.target_index(&truth.variable).unwrap();
        let est = record_simplicity(ds, b, j).unwrap().simplicity;
        assert!(
            (est - truth.simplicity).abs() < 0.05,
            "{} {}: estimated {est}, truth {}",
            truth.basin,
            truth.variable,
            truth.simplicity
        );
        match truth.variable.as_str() {
            "NO3" => assert!(est >= 0.99, "{est}"),
            "TP" => assert!(est <= 0.1, "{est}"),
            _ => {}
        }
    }
}
